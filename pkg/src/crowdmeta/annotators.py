"""Annotator simulation: profiles, confusion matrices, and noisy labels.

Five annotator behaviors are modeled.  Experts and hammers report the true
class with accuracy ``q`` (drawn from disjoint ranges) and otherwise pick a
wrong label uniformly; spammers label uniformly at random; pairwise
flippers err onto one fixed target label per class; classwise spammers are
perfect on some classes and uniform on the rest.  The same machinery
produces pseudo-annotations for meta-training and simulated target-task
annotators for evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np


class AnnotatorKind(str, Enum):
    EXPERT = "expert"
    HAMMER = "hammer"
    SPAMMER = "spammer"
    PAIRWISE_FLIPPER = "pairwise_flipper"
    CLASSWISE_SPAMMER = "classwise_spammer"


# (low, high] accuracy range per kind; spammers and classwise spammers
# have fixed mechanics and no sampled accuracy.
ACCURACY_RANGES: dict[AnnotatorKind, tuple[float, float]] = {
    AnnotatorKind.EXPERT: (0.8, 1.0),
    AnnotatorKind.HAMMER: (0.5, 0.8),
    AnnotatorKind.PAIRWISE_FLIPPER: (0.5, 0.8),
}


@dataclass(frozen=True)
class AnnotatorProfile:
    """One annotator's behavior.

    ``q`` is the accuracy rate for kinds that have one, ``flip_targets``
    gives the per-class error label for pairwise flippers, and
    ``spam_classes`` lists the classes a classwise spammer answers at
    random.
    """

    kind: AnnotatorKind
    q: float | None = None
    flip_targets: tuple[int, ...] = ()
    spam_classes: frozenset[int] = frozenset()

    def __post_init__(self) -> None:
        if self.kind in ACCURACY_RANGES:
            lo, hi = ACCURACY_RANGES[self.kind]
            if self.q is None or not lo < self.q <= hi:
                raise ValueError(
                    f"{self.kind.value} accuracy must lie in ({lo}, {hi}], got {self.q}"
                )
        if self.kind is AnnotatorKind.PAIRWISE_FLIPPER:
            if not self.flip_targets:
                raise ValueError("pairwise flipper needs flip targets")
            for k, target in enumerate(self.flip_targets):
                if target == k:
                    raise ValueError(f"flip target for class {k} must differ from {k}")
        if self.kind is AnnotatorKind.CLASSWISE_SPAMMER and not self.spam_classes:
            raise ValueError("classwise spammer needs a nonempty spam-class set")

    def to_dict(self) -> dict:
        """JSON-serializable summary for run audit output."""
        out: dict = {"kind": self.kind.value}
        if self.q is not None:
            out["q"] = self.q
        if self.flip_targets:
            out["flip_targets"] = list(self.flip_targets)
        if self.spam_classes:
            out["spam_classes"] = sorted(self.spam_classes)
        return out


@dataclass(frozen=True)
class AnnotatorDistribution:
    """Sampling weights over annotator kinds."""

    weights: tuple[tuple[AnnotatorKind, float], ...]

    def __post_init__(self) -> None:
        total = 0.0
        for kind, w in self.weights:
            if w < 0.0:
                raise ValueError(f"negative weight for {kind.value}")
            total += w
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"annotator weights must sum to 1, got {total}")

    @classmethod
    def expert_hammer_spammer(cls, p_expert: float, p_hammer: float, p_spammer: float):
        return cls(
            (
                (AnnotatorKind.EXPERT, p_expert),
                (AnnotatorKind.HAMMER, p_hammer),
                (AnnotatorKind.SPAMMER, p_spammer),
            )
        )

    @classmethod
    def from_mapping(cls, weights: dict[AnnotatorKind, float]):
        return cls(tuple(weights.items()))

    def kinds(self) -> tuple[AnnotatorKind, ...]:
        return tuple(kind for kind, _ in self.weights)

    def probabilities(self) -> np.ndarray:
        return np.asarray([w for _, w in self.weights], dtype=np.float64)

    def to_dict(self) -> dict:
        return {kind.value: w for kind, w in self.weights}


def _sample_q(kind: AnnotatorKind, rng: np.random.Generator) -> float:
    # uniform over (lo, hi]: rng.random() is in [0, 1)
    lo, hi = ACCURACY_RANGES[kind]
    return hi - rng.random() * (hi - lo)


def sample_profile(
    dist: AnnotatorDistribution, num_classes: int, rng: np.random.Generator
) -> AnnotatorProfile:
    """Draw one annotator: kind from the distribution, then its parameters."""
    if num_classes < 2:
        raise ValueError("annotator simulation needs at least 2 classes")
    kinds = dist.kinds()
    kind = kinds[rng.choice(len(kinds), p=dist.probabilities())]
    if kind is AnnotatorKind.SPAMMER:
        return AnnotatorProfile(kind=kind)
    if kind is AnnotatorKind.PAIRWISE_FLIPPER:
        q = _sample_q(kind, rng)
        targets = []
        for k in range(num_classes):
            t = int(rng.integers(num_classes - 1))
            targets.append(t + 1 if t >= k else t)
        return AnnotatorProfile(kind=kind, q=q, flip_targets=tuple(targets))
    if kind is AnnotatorKind.CLASSWISE_SPAMMER:
        spam = rng.choice(num_classes, size=num_classes // 2, replace=False)
        return AnnotatorProfile(kind=kind, spam_classes=frozenset(int(s) for s in spam))
    return AnnotatorProfile(kind=kind, q=_sample_q(kind, rng))


def profile_to_confusion(profile: AnnotatorProfile, num_classes: int) -> np.ndarray:
    """Column-stochastic (K, K) matrix realizing the profile's behavior."""
    K = num_classes
    kind = profile.kind
    if kind is AnnotatorKind.SPAMMER:
        return np.full((K, K), 1.0 / K, dtype=np.float64)
    if kind is AnnotatorKind.PAIRWISE_FLIPPER:
        if len(profile.flip_targets) != K:
            raise ValueError("flip targets do not match the class count")
        alpha = np.zeros((K, K), dtype=np.float64)
        for k, target in enumerate(profile.flip_targets):
            alpha[k, k] = profile.q
            alpha[target, k] = 1.0 - profile.q
        return alpha
    if kind is AnnotatorKind.CLASSWISE_SPAMMER:
        alpha = np.eye(K, dtype=np.float64)
        for k in profile.spam_classes:
            alpha[:, k] = 1.0 / K
        return alpha
    # expert / hammer: correct with probability q, otherwise uniform over
    # the K - 1 wrong labels
    alpha = np.full((K, K), (1.0 - profile.q) / (K - 1), dtype=np.float64)
    np.fill_diagonal(alpha, profile.q)
    return alpha


def annotate(
    true_labels: np.ndarray,
    confusions: Sequence[np.ndarray],
    rng: np.random.Generator,
    label_fraction: float = 1.0,
) -> list[dict[int, int]]:
    """Sample annotator labels from confusion columns of the true classes.

    By default every annotator labels every example.  ``label_fraction``
    below 1 keeps each (example, annotator) pair independently with that
    probability, forcing at least one label per example so downstream EM
    never sees an unannotated example.
    """
    true_labels = np.asarray(true_labels, dtype=np.intp)
    n = len(true_labels)
    num_annotators = len(confusions)
    sampled = np.empty((n, num_annotators), dtype=np.intp)
    for r, alpha in enumerate(confusions):
        cum = np.cumsum(alpha[:, true_labels], axis=0)  # (K, n)
        draws = rng.random(n)
        sampled[:, r] = np.minimum(
            (draws[None, :] > cum).sum(axis=0), alpha.shape[0] - 1
        )
    if label_fraction >= 1.0:
        keep = np.ones((n, num_annotators), dtype=bool)
    else:
        if label_fraction <= 0.0:
            raise ValueError("label_fraction must be in (0, 1]")
        keep = rng.random((n, num_annotators)) < label_fraction
        for i in np.flatnonzero(~keep.any(axis=1)):
            keep[i, rng.integers(num_annotators)] = True
    return [
        {r: int(sampled[i, r]) for r in range(num_annotators) if keep[i, r]}
        for i in range(n)
    ]


def sample_annotator_pool(
    dist: AnnotatorDistribution,
    num_annotators: int,
    num_classes: int,
    rng: np.random.Generator,
) -> tuple[tuple[AnnotatorProfile, ...], tuple[np.ndarray, ...]]:
    """Draw a pool of annotators and their true confusion matrices."""
    profiles = tuple(
        sample_profile(dist, num_classes, rng) for _ in range(num_annotators)
    )
    confusions = tuple(profile_to_confusion(p, num_classes) for p in profiles)
    return profiles, confusions


def pseudo_annotate(
    support_truth: np.ndarray,
    num_annotators: int,
    dist: AnnotatorDistribution,
    num_classes: int,
    rng: np.random.Generator,
) -> tuple[list[dict[int, int]], tuple[np.ndarray, ...]]:
    """Noisy labels for clean support data from freshly sampled annotators."""
    _, confusions = sample_annotator_pool(dist, num_annotators, num_classes, rng)
    annotations = annotate(support_truth, confusions, rng)
    return annotations, confusions
