"""Episodic bi-level training loop.

Each outer iteration samples an episode from a source task, pseudo-annotates
its support set with freshly drawn annotators, adapts the task-specific
classifier with the unrolled EM on the embedded support, scores the clean
query set, and backpropagates the query loss through every EM step into the
encoder parameters, which an Adam step then updates.  The unrolled graph
mirrors :mod:`crowdmeta.em` operation for operation, so the differentiable
forward pass and the plain-numpy adaptation agree to the last bit.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import em
from .annotators import AnnotatorDistribution, AnnotatorProfile, annotate, pseudo_annotate, sample_annotator_pool
from .encoder import (
    EncoderConfig,
    EncoderParams,
    collect_gradient,
    forward,
    forward_graph,
    init_params,
    params_to_tensors,
)
from .episodes import Episode, LabeledDataset, sample_episode
from .seeding import stream


@dataclass(frozen=True)
class MetaConfig:
    """Everything the training loop needs besides the data."""

    ways: int
    shots: int
    query_per_class: int
    num_annotators: int
    pseudo_dist: AnnotatorDistribution
    hyper: em.PriorHyperparams
    encoder: EncoderConfig
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_iterations: int = 1000
    validation_interval: int = 100
    patience: int = 5
    val_episodes_per_task: int = 1
    meta_batch: int = 1
    pseudo_annotation: bool = True  # False = train on clean single-annotator labels
    val_dist: AnnotatorDistribution | None = None
    master_seed: int = 0

    def __post_init__(self) -> None:
        for name in ("ways", "shots", "query_per_class", "num_annotators",
                     "max_iterations", "validation_interval", "patience",
                     "val_episodes_per_task", "meta_batch"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be > 0")

    @property
    def validation_dist(self) -> AnnotatorDistribution:
        return self.val_dist if self.val_dist is not None else self.pseudo_dist


@dataclass
class TrainState:
    """Flat parameters plus Adam moments and the best-validation snapshot."""

    theta: np.ndarray
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    best_theta: np.ndarray | None = None
    best_score: float = -np.inf
    best_iteration: int = 0

    @classmethod
    def from_params(cls, params: EncoderParams) -> "TrainState":
        theta = params.flatten()
        return cls(theta=theta, m=np.zeros_like(theta), v=np.zeros_like(theta))


class NonFiniteGradientError(RuntimeError):
    """Gradient contained NaN or infinity; the update was aborted."""


def adam_update(state: TrainState, gradient: np.ndarray, config: MetaConfig) -> TrainState:
    """Standard bias-corrected Adam step, applied in place."""
    gradient = np.asarray(gradient, dtype=np.float64)
    if gradient.shape != state.theta.shape:
        raise ValueError(
            f"gradient shape {gradient.shape} does not match parameters {state.theta.shape}"
        )
    if not np.all(np.isfinite(gradient)):
        bad = int(np.sum(~np.isfinite(gradient)))
        raise NonFiniteGradientError(f"{bad} non-finite gradient entries")
    state.step += 1
    state.m = config.beta1 * state.m + (1.0 - config.beta1) * gradient
    state.v = config.beta2 * state.v + (1.0 - config.beta2) * gradient * gradient
    m_hat = state.m / (1.0 - config.beta1**state.step)
    v_hat = state.v / (1.0 - config.beta2**state.step)
    state.theta = state.theta - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.eps)
    return state


def _query_log_scores(u: np.ndarray, prototypes: np.ndarray, class_prior: np.ndarray) -> np.ndarray:
    return -0.5 * em.squared_distances(u, prototypes) + np.log(class_prior)[None, :]


def query_loss(
    classifier: em.AdaptedClassifier,
    query_embeddings: np.ndarray,
    query_labels: np.ndarray,
) -> float:
    """Mean negative log-probability of the true query labels."""
    u = np.asarray(query_embeddings, dtype=np.float64)
    labels = np.asarray(query_labels, dtype=np.intp)
    if u.ndim != 2 or u.shape[0] == 0:
        raise ValueError("query set must be a nonempty (N, M) array")
    scores = _query_log_scores(u, classifier.prototypes, classifier.class_prior)
    lse = em.logsumexp(scores, axis=1)
    picked = scores[np.arange(len(labels)), labels]
    return float(np.sum(lse - picked)) / len(labels)


def _sq_dist_graph(u: ad.Tensor, protos: ad.Tensor) -> ad.Tensor:
    n = u.data.shape[0]
    k = protos.data.shape[0]
    sq_u = ad.reshape(ad.tsum(ad.mul(u, u), axis=1), (n, 1))
    sq_p = ad.reshape(ad.tsum(ad.mul(protos, protos), axis=1), (1, k))
    cross = ad.mul(ad.matmul(u, ad.transpose(protos)), -2.0)
    return ad.add(ad.add(sq_u, cross), sq_p)


def unrolled_adapt_graph(
    u_support: ad.Tensor,
    annotations: Sequence[dict[int, int]],
    num_classes: int,
    num_annotators: int,
    hyper: em.PriorHyperparams,
) -> tuple[ad.Tensor, ad.Tensor, list[ad.Tensor], ad.Tensor]:
    """Differentiable replica of :func:`crowdmeta.em.adapt`.

    The vote-fraction initialization and the discrete labels enter as
    constants; prototypes, class prior, and confusions stay on the
    gradient path through every iteration.  Returns the parameters from
    the final M step and the responsibilities from the final E step.
    """
    n, k = len(annotations), num_classes
    lam = ad.Tensor(em.init_responsibilities(annotations, k))
    grouped = em.group_by_annotator(annotations, num_annotators)
    onehots = []
    for idx, labels in grouped:
        onehot = np.zeros((len(idx), k))
        onehot[np.arange(len(idx)), labels] = 1.0
        onehots.append(onehot)

    protos = pi = None
    confusions: list[ad.Tensor] = []
    for _ in range(hyper.em_steps):
        lam_sum = ad.tsum(lam, axis=0)
        protos = ad.div(
            ad.matmul(ad.transpose(lam), u_support),
            ad.reshape(ad.add(lam_sum, hyper.tau), (k, 1)),
        )
        pi = ad.div(ad.add(lam_sum, hyper.b), k * hyper.b + n)
        confusions = []
        log_a = ad.Tensor(np.zeros((n, k)))
        for (idx, labels), onehot in zip(grouped, onehots):
            lam_r = ad.take_rows(lam, idx)
            counts = ad.matmul(ad.Tensor(onehot.T), lam_r)
            alpha = ad.div(
                ad.add(counts, hyper.c),
                ad.reshape(ad.add(ad.tsum(lam_r, axis=0), k * hyper.c), (1, k)),
            )
            confusions.append(alpha)
            if len(idx):
                rows = ad.take_rows(ad.log(alpha), labels)
                log_a = ad.add(log_a, ad.scatter_rows(rows, idx, n))
        scores = ad.add(
            ad.add(
                ad.mul(_sq_dist_graph(u_support, protos), -0.5),
                ad.reshape(ad.log(pi), (1, k)),
            ),
            log_a,
        )
        lam = ad.exp(ad.add(scores, ad.mul(ad.logsumexp(scores, axis=1, keepdims=True), -1.0)))
    return protos, pi, confusions, lam


def query_loss_graph(
    u_query: ad.Tensor,
    query_labels: np.ndarray,
    protos: ad.Tensor,
    pi: ad.Tensor,
) -> ad.Tensor:
    labels = np.asarray(query_labels, dtype=np.intp)
    k = pi.data.shape[0]
    scores = ad.add(
        ad.mul(_sq_dist_graph(u_query, protos), -0.5),
        ad.reshape(ad.log(pi), (1, k)),
    )
    onehot = np.zeros((len(labels), k))
    onehot[np.arange(len(labels)), labels] = 1.0
    picked = ad.tsum(ad.mul(scores, ad.Tensor(onehot)), axis=1)
    lse = ad.logsumexp(scores, axis=1)
    return ad.div(ad.tsum(ad.add(lse, ad.mul(picked, -1.0))), float(len(labels)))


def confusion_digest(confusions: Sequence[np.ndarray]) -> str:
    h = hashlib.sha256()
    for alpha in confusions:
        h.update(np.ascontiguousarray(alpha, dtype=np.float64).tobytes())
    return h.hexdigest()[:12]


@dataclass
class EpisodeGradient:
    loss: float
    grad: np.ndarray
    pseudo_digest: str


def meta_gradient(
    params: EncoderParams,
    episode: Episode,
    config: MetaConfig,
    rng: np.random.Generator,
) -> EpisodeGradient:
    """Loss and exact reverse-mode gradient for one episode.

    Support labels are pseudo-annotated from the configured distribution
    (fresh draw per call); with pseudo-annotation disabled the support
    keeps its clean labels as a single perfect annotator.  The sampled
    labels themselves are constants of the episode; gradients flow through
    the embeddings and through every EM quantity that depends on them.
    """
    k = episode.num_classes
    if config.pseudo_annotation:
        annotations, confusions = pseudo_annotate(
            episode.support_y, config.num_annotators, config.pseudo_dist, k, rng
        )
        digest = confusion_digest(confusions)
        num_annotators = config.num_annotators
    else:
        annotations = [{0: int(y)} for y in episode.support_y]
        digest = "clean"
        num_annotators = 1

    weight_ts, bias_ts = params_to_tensors(params)
    u_support = forward_graph(episode.support_x, weight_ts, bias_ts)
    u_query = forward_graph(episode.query_x, weight_ts, bias_ts)
    protos, pi, _, _ = unrolled_adapt_graph(
        u_support, annotations, k, num_annotators, config.hyper
    )
    loss = query_loss_graph(u_query, episode.query_y, protos, pi)
    ad.backward(loss)
    return EpisodeGradient(
        loss=loss.item(),
        grad=collect_gradient(weight_ts, bias_ts),
        pseudo_digest=digest,
    )


@dataclass
class EvalResult:
    accuracies: np.ndarray
    mean: float
    stderr: float
    annotator_profiles: list[list[AnnotatorProfile]]


def evaluate(
    params: EncoderParams,
    episodes: Sequence[Episode],
    dist: AnnotatorDistribution,
    hyper: em.PriorHyperparams,
    num_annotators: int,
    master_seed: int,
    stream_label: str = "eval-annotators",
) -> EvalResult:
    """Simulate annotators per task, adapt, and score query accuracy."""
    accuracies = np.empty(len(episodes))
    all_profiles: list[list[AnnotatorProfile]] = []
    for i, episode in enumerate(episodes):
        rng = stream(master_seed, stream_label, i)
        k = episode.num_classes
        profiles, confusions = sample_annotator_pool(dist, num_annotators, k, rng)
        annotations = annotate(episode.support_y, confusions, rng)
        support = em.SupportSet(
            embeddings=forward(episode.support_x, params),
            annotations=annotations,
            num_classes=k,
            num_annotators=num_annotators,
        )
        classifier = em.adapt(support, hyper)
        predicted = em.predict_labels(forward(episode.query_x, params), classifier)
        accuracies[i] = float(np.mean(predicted == episode.query_y))
        all_profiles.append(list(profiles))
    stderr = (
        float(np.std(accuracies, ddof=1) / np.sqrt(len(accuracies)))
        if len(accuracies) > 1
        else 0.0
    )
    return EvalResult(
        accuracies=accuracies,
        mean=float(np.mean(accuracies)),
        stderr=stderr,
        annotator_profiles=all_profiles,
    )


@dataclass
class TrainingLogRow:
    iteration: int
    loss: float
    wall_ms: float
    pseudo_digest: str


@dataclass
class MetaTrainResult:
    params: EncoderParams  # best-validation snapshot (final if never validated)
    final_params: EncoderParams
    log: list[TrainingLogRow]
    val_history: list[tuple[int, float]]
    best_iteration: int
    best_val_accuracy: float
    iterations_run: int
    stopped_early: bool


def _validation_accuracy(
    params: EncoderParams, val_episodes: Sequence[Episode], config: MetaConfig
) -> float:
    """Mean adaptation accuracy on the fixed validation episodes.

    The main path simulates target annotators from the validation
    distribution; the no-pseudo-annotation ablation validates on clean
    single-annotator labels to stay a fully noise-free meta-learner
    (unless a validation distribution is set explicitly).
    """
    if not config.pseudo_annotation and config.val_dist is None:
        accuracies = []
        for episode in val_episodes:
            annotations = [{0: int(y)} for y in episode.support_y]
            support = em.SupportSet(
                embeddings=forward(episode.support_x, params),
                annotations=annotations,
                num_classes=episode.num_classes,
                num_annotators=1,
            )
            classifier = em.adapt(support, config.hyper)
            predicted = em.predict_labels(forward(episode.query_x, params), classifier)
            accuracies.append(float(np.mean(predicted == episode.query_y)))
        return float(np.mean(accuracies))
    return evaluate(
        params,
        val_episodes,
        config.validation_dist,
        config.hyper,
        config.num_annotators,
        config.master_seed,
        stream_label="val-annotators",
    ).mean


def _validation_episodes(
    val_tasks: Sequence[LabeledDataset], config: MetaConfig
) -> list[Episode]:
    episodes = []
    for ti, task in enumerate(val_tasks):
        for j in range(config.val_episodes_per_task):
            episodes.append(
                sample_episode(
                    task,
                    config.ways,
                    config.shots,
                    config.query_per_class,
                    stream(config.master_seed, "val-episode", ti, j),
                )
            )
    return episodes


def meta_train(
    source_tasks: Sequence[LabeledDataset],
    val_tasks: Sequence[LabeledDataset],
    config: MetaConfig,
) -> MetaTrainResult:
    """Run the outer loop with validation-based early stopping.

    Validation episodes and their simulated annotators are fixed once from
    the master seed, so successive validation scores are comparable and
    the whole run is reproducible.
    """
    if not source_tasks:
        raise ValueError("at least one source task is required")
    params = init_params(config.encoder)
    state = TrainState.from_params(params)
    val_episodes = _validation_episodes(val_tasks, config) if val_tasks else []

    log: list[TrainingLogRow] = []
    val_history: list[tuple[int, float]] = []
    bad_validations = 0
    stopped_early = False
    iterations_run = 0

    for iteration in range(1, config.max_iterations + 1):
        tic = time.perf_counter()
        params = EncoderParams.unflatten(config.encoder, state.theta)
        losses, grads, digest = [], [], "clean"
        for b in range(config.meta_batch):
            task_rng = stream(config.master_seed, "task-choice", iteration, b)
            d = int(task_rng.integers(len(source_tasks)))
            episode = sample_episode(
                source_tasks[d],
                config.ways,
                config.shots,
                config.query_per_class,
                stream(config.master_seed, "episode", iteration, b),
            )
            result = meta_gradient(
                params, episode, config,
                stream(config.master_seed, "pseudo-annotate", iteration, b),
            )
            losses.append(result.loss)
            grads.append(result.grad)
            digest = result.pseudo_digest
        loss = float(np.mean(losses))
        gradient = np.mean(grads, axis=0)
        try:
            adam_update(state, gradient, config)
        except NonFiniteGradientError as exc:
            log.append(TrainingLogRow(iteration, float("nan"), 0.0, f"skipped:{exc}"))
            continue
        iterations_run = iteration
        log.append(
            TrainingLogRow(iteration, loss, (time.perf_counter() - tic) * 1e3, digest)
        )

        if val_episodes and iteration % config.validation_interval == 0:
            current = EncoderParams.unflatten(config.encoder, state.theta)
            val_score = _validation_accuracy(current, val_episodes, config)
            val_history.append((iteration, val_score))
            if val_score > state.best_score:
                state.best_score = val_score
                state.best_theta = state.theta.copy()
                state.best_iteration = iteration
                bad_validations = 0
            else:
                bad_validations += 1
                if bad_validations >= config.patience:
                    stopped_early = True
                    break

    final_params = EncoderParams.unflatten(config.encoder, state.theta)
    best_theta = state.best_theta if state.best_theta is not None else state.theta
    return MetaTrainResult(
        params=EncoderParams.unflatten(config.encoder, best_theta),
        final_params=final_params,
        log=log,
        val_history=val_history,
        best_iteration=state.best_iteration,
        best_val_accuracy=state.best_score if val_history else float("nan"),
        iterations_run=iterations_run,
        stopped_early=stopped_early,
    )
