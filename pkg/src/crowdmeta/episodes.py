"""Datasets, class-disjoint splits, and N-way/K-shot episode sampling."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class DataError(ValueError):
    """Malformed input data (CSV parse failures, impossible splits...)."""


@dataclass
class LabeledDataset:
    """Feature vectors with dense integer class labels."""

    features: np.ndarray  # (N, D) float64
    labels: np.ndarray  # (N,) intp
    _class_index: dict[int, np.ndarray] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.intp)
        if self.features.ndim != 2:
            raise DataError("features must be a 2-D (N, D) array")
        if self.labels.shape != (self.features.shape[0],):
            raise DataError("labels must be a vector matching the feature rows")
        self._class_index = {
            int(c): np.flatnonzero(self.labels == c) for c in np.unique(self.labels)
        }

    @property
    def size(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def class_ids(self) -> tuple[int, ...]:
        return tuple(sorted(self._class_index))

    def examples_of(self, class_id: int) -> np.ndarray:
        return self._class_index[class_id]

    def eligible_classes(self, min_examples: int) -> tuple[int, ...]:
        return tuple(
            c for c in self.class_ids if len(self._class_index[c]) >= min_examples
        )


@dataclass
class Episode:
    """One task: support and query drawn from the same dataset, disjoint.

    Labels are remapped to 0..K-1 (sorted original class ids).  Support
    annotations are attached later by the simulator or a caller.
    """

    class_ids: tuple[int, ...]
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    annotations: list[dict[int, int]] | None = None

    @property
    def num_classes(self) -> int:
        return len(self.class_ids)


def generate_synthetic(
    num_classes: int,
    dim: int,
    cluster_spread: float,
    examples_per_class: int,
    seed: int,
) -> LabeledDataset:
    """Gaussian clusters: centers ~ N(0, I), examples ~ N(center, spread^2 I)."""
    if num_classes < 2:
        raise DataError("synthetic datasets need at least 2 classes")
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((num_classes, dim))
    features = np.repeat(centers, examples_per_class, axis=0)
    features = features + cluster_spread * rng.standard_normal(features.shape)
    labels = np.repeat(np.arange(num_classes), examples_per_class)
    return LabeledDataset(features=features, labels=labels)


def split_classes(
    dataset: LabeledDataset,
    fractions: tuple[float, float, float],
    seed: int,
) -> tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    """Shuffle classes and partition them into disjoint train/val/test sets."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError("split fractions must sum to 1")
    classes = np.asarray(dataset.class_ids)
    rng = np.random.default_rng(seed)
    rng.shuffle(classes)
    n = len(classes)
    counts = [int(np.floor(f * n)) for f in fractions]
    remainders = [f * n - c for f, c in zip(fractions, counts)]
    for _ in range(n - sum(counts)):
        i = int(np.argmax(remainders))
        counts[i] += 1
        remainders[i] = -1.0
    for f, c in zip(fractions, counts):
        if f > 0.0 and c == 0:
            raise DataError("too few classes to honor a nonzero split fraction")
    pieces = []
    start = 0
    for c in counts:
        chosen = set(int(x) for x in classes[start : start + c])
        mask = np.isin(dataset.labels, sorted(chosen))
        pieces.append(
            LabeledDataset(features=dataset.features[mask], labels=dataset.labels[mask])
        )
        start += c
    return pieces[0], pieces[1], pieces[2]


def sample_episode(
    dataset: LabeledDataset,
    ways: int,
    shots: int | Sequence[int],
    query_per_class: int,
    rng: np.random.Generator,
    strict: bool = False,
) -> Episode:
    """Draw a ways-class episode with disjoint support and query examples.

    ``shots`` is either one count for every class or a per-class override
    sequence of length ``ways`` (class-imbalanced support).  Classes with
    too few examples are skipped when ``strict`` is false and rejected
    otherwise.
    """
    if isinstance(shots, (int, np.integer)):
        per_class_shots = [int(shots)] * ways
    else:
        per_class_shots = [int(s) for s in shots]
        if len(per_class_shots) != ways:
            raise DataError(
                f"{len(per_class_shots)} shot overrides for {ways}-way episode"
            )
    if any(s < 1 for s in per_class_shots):
        raise DataError("every class needs at least one support example")
    if query_per_class < 1:
        raise DataError("query_per_class must be >= 1")

    need = max(per_class_shots) + query_per_class
    eligible = dataset.eligible_classes(need)
    if strict and len(eligible) != len(dataset.class_ids):
        lacking = sorted(set(dataset.class_ids) - set(eligible))
        raise DataError(f"classes {lacking} have fewer than {need} examples")
    if len(eligible) < ways:
        raise DataError(
            f"only {len(eligible)} classes have {need}+ examples; need {ways}"
        )

    chosen = rng.choice(len(eligible), size=ways, replace=False)
    class_ids = tuple(sorted(eligible[i] for i in chosen))

    support_x, support_y, query_x, query_y = [], [], [], []
    for new_label, class_id in enumerate(class_ids):
        pool = dataset.examples_of(class_id)
        n_support = per_class_shots[new_label]
        picked = rng.choice(len(pool), size=n_support + query_per_class, replace=False)
        picked = pool[picked]
        support_x.append(dataset.features[picked[:n_support]])
        query_x.append(dataset.features[picked[n_support:]])
        support_y.append(np.full(n_support, new_label, dtype=np.intp))
        query_y.append(np.full(query_per_class, new_label, dtype=np.intp))
    return Episode(
        class_ids=class_ids,
        support_x=np.concatenate(support_x),
        support_y=np.concatenate(support_y),
        query_x=np.concatenate(query_x),
        query_y=np.concatenate(query_y),
    )


def load_csv(path: str, label_column: str) -> LabeledDataset:
    """Read a headed CSV: one label column, every other column numeric.

    Label values map to dense ids in order of first appearance.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, header row required") from None
        if label_column not in header:
            raise DataError(f"{path}: no column named {label_column!r}")
        label_pos = header.index(label_column)
        feature_pos = [i for i in range(len(header)) if i != label_pos]

        rows: list[list[float]] = []
        label_ids: dict[str, int] = {}
        labels: list[int] = []
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataError(
                    f"{path}: row {line_no} has {len(row)} fields, expected {len(header)}"
                )
            try:
                rows.append([float(row[i]) for i in feature_pos])
            except ValueError as exc:
                raise DataError(f"{path}: row {line_no}: {exc}") from None
            key = row[label_pos]
            labels.append(label_ids.setdefault(key, len(label_ids)))
    if not rows:
        raise DataError(f"{path}: no data rows")
    return LabeledDataset(
        features=np.asarray(rows, dtype=np.float64),
        labels=np.asarray(labels, dtype=np.intp),
    )
