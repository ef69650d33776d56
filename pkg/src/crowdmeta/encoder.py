"""Shared embedding network: a fully-connected ReLU stack in plain numpy.

The same parameters drive two forward implementations: a fast numpy path
with a recorded-activation backward (used for evaluation and finite
differences), and a graph builder over :mod:`crowdmeta.autodiff` tensors
(used when the training loss is differentiated through the unrolled EM).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

CHECKPOINT_MAGIC = b"CMETA1"


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture: input_dim -> hidden_dims (ReLU) -> output_dim (affine)."""

    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    init_seed: int = 0

    def __post_init__(self) -> None:
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(d < 1 for d in dims):
            raise ValueError(f"all layer widths must be >= 1, got {dims}")

    @property
    def layer_dims(self) -> tuple[tuple[int, int], ...]:
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        return tuple(zip(dims[:-1], dims[1:]))


@dataclass
class EncoderParams:
    """Per-layer weights (fan_in, fan_out) and biases (fan_out,)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self) -> None:
        if len(self.weights) != len(self.biases):
            raise ValueError("weights and biases must pair up per layer")
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        for w, b in zip(self.weights, self.biases):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError("inconsistent layer shapes")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError("parameters contain non-finite values")

    @property
    def num_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def flatten(self) -> np.ndarray:
        """Layer order, weights row-major then bias — the checkpoint layout."""
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts)

    @classmethod
    def unflatten(cls, config: EncoderConfig, vec: np.ndarray) -> "EncoderParams":
        vec = np.asarray(vec, dtype=np.float64)
        expected = sum(fi * fo + fo for fi, fo in config.layer_dims)
        if vec.size != expected:
            raise ValueError(
                f"parameter vector has {vec.size} entries, config needs {expected}"
            )
        weights, biases, offset = [], [], 0
        for fan_in, fan_out in config.layer_dims:
            weights.append(
                vec[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out).copy()
            )
            offset += fan_in * fan_out
            biases.append(vec[offset : offset + fan_out].copy())
            offset += fan_out
        return cls(weights=weights, biases=biases)

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
        )


def init_params(config: EncoderConfig) -> EncoderParams:
    """He-style init: W ~ N(0, 2/fan_in), biases zero, seeded and deterministic."""
    rng = np.random.default_rng(config.init_seed)
    weights, biases = [], []
    for fan_in, fan_out in config.layer_dims:
        weights.append(rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in))
        biases.append(np.zeros(fan_out))
    return EncoderParams(weights=weights, biases=biases)


@dataclass
class ActivationRecord:
    """Forward-pass intermediates needed by :func:`backward`."""

    params: EncoderParams
    inputs: list[np.ndarray]  # input to each affine layer
    masks: list[np.ndarray]  # ReLU masks after each hidden layer


def _as_batch(x: np.ndarray, input_dim: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    batch = x[None, :] if single else x
    if batch.ndim != 2 or batch.shape[1] != input_dim:
        raise ValueError(f"input dimension {batch.shape[-1]} != {input_dim}")
    return batch, single


def forward(x: np.ndarray, params: EncoderParams) -> np.ndarray:
    """Embed one vector or a batch; final layer has no activation."""
    batch, single = _as_batch(x, params.weights[0].shape[0])
    h = batch
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if i < last:
            h = np.maximum(h, 0.0)
    return h[0] if single else h


def forward_recorded(
    x: np.ndarray, params: EncoderParams
) -> tuple[np.ndarray, ActivationRecord]:
    """Forward pass that keeps what the backward pass needs."""
    batch, _ = _as_batch(x, params.weights[0].shape[0])
    inputs, masks = [], []
    h = batch
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        h = h @ w + b
        if i < last:
            mask = h > 0.0
            masks.append(mask)
            h = h * mask
    return h, ActivationRecord(params=params, inputs=inputs, masks=masks)


def backward(record: ActivationRecord, grad_embeddings: np.ndarray) -> np.ndarray:
    """Exact reverse-mode gradient of sum(grad_embeddings * embeddings) w.r.t.
    the flattened parameters, reusing the recorded activations."""
    params = record.params
    g = np.asarray(grad_embeddings, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    if len(record.inputs) != len(params.weights) or g.shape != (
        record.inputs[0].shape[0],
        params.weights[-1].shape[1],
    ):
        raise ValueError("activation record does not match the gradient or parameters")
    grad_w = [None] * len(params.weights)
    grad_b = [None] * len(params.weights)
    for i in range(len(params.weights) - 1, -1, -1):
        grad_w[i] = record.inputs[i].T @ g
        grad_b[i] = g.sum(axis=0)
        if i > 0:
            g = (g @ params.weights[i].T) * record.masks[i - 1]
    parts = []
    for gw, gb in zip(grad_w, grad_b):
        parts.append(gw.ravel())
        parts.append(gb)
    return np.concatenate(parts)


def params_to_tensors(params: EncoderParams) -> tuple[list[ad.Tensor], list[ad.Tensor]]:
    """Leaf tensors over the current parameter arrays, for graph building."""
    return [ad.Tensor(w) for w in params.weights], [ad.Tensor(b) for b in params.biases]


def forward_graph(
    x: np.ndarray, weight_ts: list[ad.Tensor], bias_ts: list[ad.Tensor]
) -> ad.Tensor:
    """Differentiable forward pass; mirrors :func:`forward` op for op."""
    h = ad.Tensor(np.asarray(x, dtype=np.float64))
    last = len(weight_ts) - 1
    for i, (w, b) in enumerate(zip(weight_ts, bias_ts)):
        h = ad.matmul(h, w) + ad.reshape(b, (1, b.data.shape[0]))
        if i < last:
            h = ad.relu(h)
    return h


def collect_gradient(
    weight_ts: list[ad.Tensor], bias_ts: list[ad.Tensor]
) -> np.ndarray:
    """Flatten tensor gradients in checkpoint layer order; missing grads are 0."""
    parts = []
    for w, b in zip(weight_ts, bias_ts):
        gw = w.grad if w.grad is not None else np.zeros_like(w.data)
        gb = b.grad if b.grad is not None else np.zeros_like(b.data)
        parts.append(np.asarray(gw).ravel())
        parts.append(np.asarray(gb).ravel())
    return np.concatenate(parts)


def save_checkpoint(path: str, config: EncoderConfig, params: EncoderParams) -> None:
    """Binary layout: magic, little-endian header ints, float64 parameters.

    Header: input_dim, output_dim, hidden-layer count, each hidden width
    (uint32), then init_seed (int64).  Parameters follow in layer order,
    each weight matrix row-major, then its bias vector.
    """
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(
            struct.pack(
                f"<III{len(config.hidden_dims)}I",
                config.input_dim,
                config.output_dim,
                len(config.hidden_dims),
                *config.hidden_dims,
            )
        )
        fh.write(struct.pack("<q", config.init_seed))
        fh.write(params.flatten().astype("<f8").tobytes())


def load_checkpoint(path: str) -> tuple[EncoderConfig, EncoderParams]:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a crowdmeta checkpoint")
        input_dim, output_dim, n_hidden = struct.unpack("<III", fh.read(12))
        hidden = struct.unpack(f"<{n_hidden}I", fh.read(4 * n_hidden)) if n_hidden else ()
        (init_seed,) = struct.unpack("<q", fh.read(8))
        config = EncoderConfig(
            input_dim=input_dim,
            hidden_dims=tuple(hidden),
            output_dim=output_dim,
            init_seed=init_seed,
        )
        flat = np.frombuffer(fh.read(), dtype="<f8").astype(np.float64)
    return config, EncoderParams.unflatten(config, flat)
