"""Latent-space mixture model over noisy multi-annotator labels, fit by EM.

Each support example carries labels from one or more annotators.  The model
couples three pieces on the embedding space: an isotropic unit-variance
Gaussian per class (prototypes ``mu_k``), a categorical class prior ``pi``,
and one column-stochastic confusion matrix per annotator whose ``(l, k)``
entry is the probability that the annotator reports label ``l`` when the
true class is ``k``.  Conjugate priors (Gaussian with precision ``tau`` on
prototypes, Dirichlet with strengths ``b`` and ``c`` on the class prior and
on confusion columns) make every EM update closed form:

  M step:  mu_k     = sum_n lam_nk u_n / (tau + sum_n lam_nk)
           pi_k     = (sum_n lam_nk + b) / (K b + N)
           alpha_lk = (sum_{n in I_r} lam_nk [y_n = l] + c)
                      / (sum_{n in I_r} lam_nk + K c)
  E step:  lam_nk  propto  N(u_n | mu_k, I) pi_k a_nk

where ``a_nk`` is the probability of example ``n``'s annotations given true
class ``k`` and ``I_r`` indexes the examples annotated by annotator ``r``.
All probability products run in log space; E-step normalization uses
log-sum-exp with a max shift.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)

# One annotation map per example: annotator index -> reported label.
AnnotationMap = Mapping[int, int]


class UnannotatedExampleError(ValueError):
    """A support example has no annotations at all."""


@dataclass(frozen=True)
class PriorHyperparams:
    """Prior strengths and the EM iteration budget.

    ``tau`` is the Gaussian precision pulling prototypes toward the origin,
    ``b`` and ``c`` are the Dirichlet strengths smoothing the class prior
    and the confusion columns, and ``em_steps`` is the number of EM
    iterations run by :func:`adapt`.  ``allow_zero_tau`` permits the
    degenerate flat prototype prior used by the nearest-class-mean
    reduction checks; general use requires ``tau > 0``.
    """

    tau: float = 1.0
    b: float = 1.0
    c: float = 1.0
    em_steps: int = 2
    allow_zero_tau: bool = False

    def __post_init__(self) -> None:
        if self.tau < 0.0 or (self.tau == 0.0 and not self.allow_zero_tau):
            raise ValueError(f"tau must be > 0 (got {self.tau})")
        if self.b <= 0.0:
            raise ValueError(f"b must be > 0 (got {self.b})")
        if self.c <= 0.0:
            raise ValueError(f"c must be > 0 (got {self.c})")
        if not isinstance(self.em_steps, int) or self.em_steps < 1:
            raise ValueError(f"em_steps must be an integer >= 1 (got {self.em_steps})")


def normalize_annotations(annotations: Sequence[AnnotationMap]) -> tuple[dict[int, int], ...]:
    """Copy annotation maps into plain dicts, rejecting unannotated examples."""
    out = []
    for n, ann in enumerate(annotations):
        if len(ann) == 0:
            raise UnannotatedExampleError(f"unannotated example at index {n}")
        out.append({int(r): int(y) for r, y in ann.items()})
    return tuple(out)


def group_by_annotator(
    annotations: Sequence[AnnotationMap], num_annotators: int
) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
    """Per-annotator ``(example_indices, labels)`` arrays.

    Annotators who labeled nothing get empty arrays, which the confusion
    update turns into the uniform prior-mean matrix.
    """
    idx: list[list[int]] = [[] for _ in range(num_annotators)]
    lab: list[list[int]] = [[] for _ in range(num_annotators)]
    for n, ann in enumerate(annotations):
        for r, y in ann.items():
            idx[r].append(n)
            lab[r].append(y)
    return tuple(
        (np.asarray(i, dtype=np.intp), np.asarray(l, dtype=np.intp))
        for i, l in zip(idx, lab)
    )


@dataclass
class SupportSet:
    """Embedded support examples with their per-annotator labels.

    ``embeddings`` is ``(N, M)`` float64; ``annotations[n]`` maps annotator
    index to the reported label for example ``n``.  Every example must have
    at least one annotation.
    """

    embeddings: np.ndarray
    annotations: tuple[dict[int, int], ...]
    num_classes: int
    num_annotators: int
    by_annotator: tuple[tuple[np.ndarray, np.ndarray], ...] = field(
        init=False, repr=False
    )

    def __post_init__(self) -> None:
        self.embeddings = np.ascontiguousarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2:
            raise ValueError("embeddings must be a 2-D (N, M) array")
        if not np.all(np.isfinite(self.embeddings)):
            raise ValueError("embeddings contain non-finite values")
        self.annotations = normalize_annotations(self.annotations)
        if len(self.annotations) != self.embeddings.shape[0]:
            raise ValueError("annotation count does not match embedding count")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.num_annotators < 1:
            raise ValueError("num_annotators must be >= 1")
        for n, ann in enumerate(self.annotations):
            for r, y in ann.items():
                if not 0 <= r < self.num_annotators:
                    raise ValueError(f"annotator index {r} out of range at example {n}")
                if not 0 <= y < self.num_classes:
                    raise ValueError(f"label {y} out of range at example {n}")
        self.by_annotator = group_by_annotator(self.annotations, self.num_annotators)

    @property
    def size(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


@dataclass
class AdaptedClassifier:
    """Task-specific parameters produced by EM adaptation."""

    prototypes: np.ndarray  # (K, M)
    class_prior: np.ndarray  # (K,)
    confusions: tuple[np.ndarray, ...]  # R matrices, each (K, K)
    responsibilities: np.ndarray  # (N, K)
    hyper: PriorHyperparams

    def __post_init__(self) -> None:
        self.prototypes = np.asarray(self.prototypes, dtype=np.float64)
        self.class_prior = np.asarray(self.class_prior, dtype=np.float64)
        self.responsibilities = np.asarray(self.responsibilities, dtype=np.float64)
        check_class_prior(self.class_prior)
        for alpha in self.confusions:
            check_confusion(alpha)
        check_responsibilities(self.responsibilities)

    @property
    def num_classes(self) -> int:
        return self.prototypes.shape[0]


def check_responsibilities(lam: np.ndarray, atol: float = 1e-12) -> None:
    """Rows of a responsibility matrix are distributions over classes."""
    if np.any(lam < 0.0):
        raise ValueError("responsibilities contain negative entries")
    if not np.allclose(lam.sum(axis=1), 1.0, rtol=0.0, atol=atol):
        raise ValueError("responsibility rows do not sum to 1")


def check_class_prior(pi: np.ndarray, atol: float = 1e-12) -> None:
    if np.any(pi < 0.0):
        raise ValueError("class prior contains negative entries")
    if abs(float(pi.sum()) - 1.0) > atol:
        raise ValueError("class prior does not sum to 1")


def check_confusion(alpha: np.ndarray, atol: float = 1e-12) -> None:
    """Confusion matrices are square and column-stochastic."""
    alpha = np.asarray(alpha)
    if alpha.ndim != 2 or alpha.shape[0] != alpha.shape[1]:
        raise ValueError("confusion matrix must be square")
    if np.any(alpha < 0.0) or np.any(alpha > 1.0):
        raise ValueError("confusion entries must lie in [0, 1]")
    if not np.allclose(alpha.sum(axis=0), 1.0, rtol=0.0, atol=atol):
        raise ValueError("confusion columns do not sum to 1")


def init_responsibilities(
    annotations: Sequence[AnnotationMap], num_classes: int
) -> np.ndarray:
    """Vote-fraction initialization: lam_nk = (votes for k) / (labels given to n)."""
    annotations = normalize_annotations(annotations)
    lam = np.zeros((len(annotations), num_classes), dtype=np.float64)
    for n, ann in enumerate(annotations):
        for y in ann.values():
            lam[n, y] += 1.0
        lam[n] /= len(ann)
    return lam


def prototype_update(lam: np.ndarray, embeddings: np.ndarray, tau: float) -> np.ndarray:
    """Closed-form prototype maximizer; empty classes fall back to the prior mean 0."""
    denom = tau + lam.sum(axis=0)
    protos = np.zeros((lam.shape[1], embeddings.shape[1]), dtype=np.float64)
    nz = denom > 0.0
    protos[nz] = (lam.T @ embeddings)[nz] / denom[nz, None]
    return protos


def class_prior_update(lam: np.ndarray, b: float) -> np.ndarray:
    num_examples, num_classes = lam.shape
    return (lam.sum(axis=0) + b) / (num_classes * b + num_examples)


def confusion_update(
    lam: np.ndarray,
    by_annotator: Sequence[tuple[np.ndarray, np.ndarray]],
    num_classes: int,
    c: float,
) -> tuple[np.ndarray, ...]:
    """Smoothed per-annotator confusion estimates.

    With ``c > 0`` an annotator who labeled nothing gets exactly the
    uniform matrix (the Dirichlet prior mean), since all counts are zero.
    """
    out = []
    for idx, labels in by_annotator:
        lam_r = lam[idx]
        onehot = np.zeros((len(idx), num_classes), dtype=np.float64)
        onehot[np.arange(len(idx)), labels] = 1.0
        counts = onehot.T @ lam_r  # (label l, class k)
        alpha = (counts + c) / (lam_r.sum(axis=0) + num_classes * c)
        out.append(alpha)
    return tuple(out)


def m_step(
    lam: np.ndarray, support: SupportSet, hyper: PriorHyperparams
) -> tuple[np.ndarray, np.ndarray, tuple[np.ndarray, ...]]:
    """One maximization step: prototypes, class prior, confusion matrices."""
    lam = np.asarray(lam, dtype=np.float64)
    if lam.shape != (support.size, support.num_classes):
        raise ValueError(
            f"responsibilities shape {lam.shape} does not match "
            f"({support.size}, {support.num_classes})"
        )
    protos = prototype_update(lam, support.embeddings, hyper.tau)
    pi = class_prior_update(lam, hyper.b)
    confusions = confusion_update(lam, support.by_annotator, support.num_classes, hyper.c)
    return protos, pi, confusions


def annotation_log_likelihood(
    support: SupportSet, confusions: Sequence[np.ndarray]
) -> np.ndarray:
    """``log a_nk``: log-probability of example n's labels given true class k."""
    if len(confusions) != support.num_annotators:
        raise ValueError("one confusion matrix per annotator required")
    log_a = np.zeros((support.size, support.num_classes), dtype=np.float64)
    with np.errstate(divide="ignore"):
        for (idx, labels), alpha in zip(support.by_annotator, confusions):
            if len(idx) == 0:
                continue
            rows = np.log(alpha)[labels, :]
            if np.any(np.isneginf(rows)):
                raise ValueError(
                    "zero confusion entry hit by an observed label; "
                    "annotation likelihood requires strictly positive entries"
                )
            log_a[idx] += rows
    return log_a


def annotation_likelihood(
    support: SupportSet, confusions: Sequence[np.ndarray]
) -> np.ndarray:
    """``a_nk`` on the linear scale (products accumulated in log space)."""
    return np.exp(annotation_log_likelihood(support, confusions))


def squared_distances(u: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances, (n, K)."""
    sq_u = np.sum(u * u, axis=1)[:, None]
    sq_p = np.sum(prototypes * prototypes, axis=1)[None, :]
    return sq_u - 2.0 * (u @ prototypes.T) + sq_p


def logsumexp(scores: np.ndarray, axis: int = -1, keepdims: bool = False) -> np.ndarray:
    """Max-shifted log-sum-exp along ``axis``."""
    shift = np.max(scores, axis=axis, keepdims=True)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    out = shift + np.log(np.sum(np.exp(scores - shift), axis=axis, keepdims=True))
    return out if keepdims else np.squeeze(out, axis=axis)


def _posterior_log_scores(
    support: SupportSet,
    prototypes: np.ndarray,
    class_prior: np.ndarray,
    confusions: Sequence[np.ndarray],
) -> np.ndarray:
    """Unnormalized per-example class log scores (Gaussian constant dropped)."""
    sq = squared_distances(support.embeddings, prototypes)
    return -0.5 * sq + np.log(class_prior)[None, :] + annotation_log_likelihood(
        support, confusions
    )


def e_step(
    support: SupportSet,
    prototypes: np.ndarray,
    class_prior: np.ndarray,
    confusions: Sequence[np.ndarray],
) -> np.ndarray:
    """Exact posterior responsibilities, normalized row-wise in log space."""
    scores = _posterior_log_scores(support, prototypes, class_prior, confusions)
    if not np.all(np.isfinite(np.max(scores, axis=1))):
        raise RuntimeError("no class has positive posterior mass for some example")
    return np.exp(scores - logsumexp(scores, axis=1, keepdims=True))


def log_prior(
    prototypes: np.ndarray,
    class_prior: np.ndarray,
    confusions: Sequence[np.ndarray],
    hyper: PriorHyperparams,
) -> float:
    """Log density of the conjugate priors, normalization constants included."""
    if hyper.tau <= 0.0:
        raise ValueError("log prior requires tau > 0")
    num_classes, dim = prototypes.shape
    gauss = num_classes * 0.5 * dim * (math.log(hyper.tau) - LOG_2PI)
    gauss -= 0.5 * hyper.tau * float(np.sum(prototypes * prototypes))
    dir_pi = (
        math.lgamma(num_classes * (hyper.b + 1.0))
        - num_classes * math.lgamma(hyper.b + 1.0)
        + hyper.b * float(np.sum(np.log(class_prior)))
    )
    col_const = math.lgamma(num_classes * (hyper.c + 1.0)) - num_classes * math.lgamma(
        hyper.c + 1.0
    )
    dir_conf = 0.0
    for alpha in confusions:
        dir_conf += num_classes * col_const + hyper.c * float(np.sum(np.log(alpha)))
    return gauss + dir_pi + dir_conf


def log_posterior(
    support: SupportSet,
    prototypes: np.ndarray,
    class_prior: np.ndarray,
    confusions: Sequence[np.ndarray],
    hyper: PriorHyperparams,
) -> float:
    """Unnormalized log posterior: marginal log likelihood plus log prior."""
    scores = _posterior_log_scores(support, prototypes, class_prior, confusions)
    scores -= 0.5 * support.dim * LOG_2PI  # Gaussian normalization constant
    loglik = float(np.sum(logsumexp(scores, axis=1)))
    return loglik + log_prior(prototypes, class_prior, confusions, hyper)


def lower_bound_q(
    lam: np.ndarray,
    support: SupportSet,
    prototypes: np.ndarray,
    class_prior: np.ndarray,
    confusions: Sequence[np.ndarray],
    hyper: PriorHyperparams,
) -> float:
    """Jensen lower bound on :func:`log_posterior`, tight after an E step.

    Entries with ``lam_nk == 0`` contribute zero by the usual convention.
    """
    lam = np.asarray(lam, dtype=np.float64)
    scores = _posterior_log_scores(support, prototypes, class_prior, confusions)
    scores -= 0.5 * support.dim * LOG_2PI
    with np.errstate(divide="ignore", invalid="ignore"):
        inner = np.where(lam > 0.0, lam * (scores - np.log(lam)), 0.0)
    return float(np.sum(inner)) + log_prior(prototypes, class_prior, confusions, hyper)


def adapt(support: SupportSet, hyper: PriorHyperparams) -> AdaptedClassifier:
    """Run the full adaptation: vote-fraction init, then em_steps x {M, E}."""
    lam = init_responsibilities(support.annotations, support.num_classes)
    prototypes = pi = confusions = None
    for _ in range(hyper.em_steps):
        prototypes, pi, confusions = m_step(lam, support, hyper)
        lam = e_step(support, prototypes, pi, confusions)
    return AdaptedClassifier(
        prototypes=prototypes,
        class_prior=pi,
        confusions=confusions,
        responsibilities=lam,
        hyper=hyper,
    )


def predict_log_probs(u: np.ndarray, classifier: AdaptedClassifier) -> np.ndarray:
    """Log class probabilities for new embeddings.

    Accepts a single ``(M,)`` vector or an ``(n, M)`` batch; returns the
    matching ``(K,)`` or ``(n, K)`` log-softmax scores.
    """
    u = np.asarray(u, dtype=np.float64)
    single = u.ndim == 1
    u2 = u[None, :] if single else u
    if u2.shape[1] != classifier.prototypes.shape[1]:
        raise ValueError(
            f"embedding dimension {u2.shape[1]} does not match prototypes "
            f"({classifier.prototypes.shape[1]})"
        )
    scores = -0.5 * squared_distances(u2, classifier.prototypes)
    scores += np.log(classifier.class_prior)[None, :]
    log_probs = scores - logsumexp(scores, axis=1, keepdims=True)
    return log_probs[0] if single else log_probs


def predict_labels(u: np.ndarray, classifier: AdaptedClassifier) -> np.ndarray:
    """Argmax prediction; ties resolve to the lowest class index."""
    log_probs = predict_log_probs(u, classifier)
    return np.argmax(log_probs, axis=-1)
