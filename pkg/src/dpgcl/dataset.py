"""Synthetic positive-pair datasets and Poisson subsampling.

Each class is a Gaussian component around a random direction scaled by
``separation``. A pair is two independent draws from the same component, which
plays the role of an augmented view (uni-modal) or of a paired item from a
second modality (dual-modal, with an independent set of class means).
Labels travel with the pairs for evaluation only; no loss ever reads them.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from dpgcl.errors import ParameterError
from dpgcl.rng import stream


class Modality(str, enum.Enum):
    UNI = "uni"
    DUAL = "dual"


@dataclass(frozen=True)
class Sample:
    features: np.ndarray
    label: int


@dataclass(frozen=True)
class PairSample:
    anchor: Sample
    positive: Sample
    modality: Modality


def _pair_at(anchors, positives, labels, modality, i) -> PairSample:
    label = int(labels[i])
    return PairSample(Sample(anchors[i], label), Sample(positives[i], label), modality)


@dataclass(frozen=True, eq=False)
class Dataset:
    """An ordered collection of positive pairs stored column-wise.

    ``anchors`` is ``(n, d_x)``, ``positives`` is ``(n, d_x2)`` and ``labels``
    is ``(n,)``. For uni-modal data ``d_x == d_x2``.
    """

    anchors: np.ndarray
    positives: np.ndarray
    labels: np.ndarray
    modality: Modality
    seed: int
    num_classes: int
    class_separation: float

    def __post_init__(self):
        if len({self.anchors.shape[0], self.positives.shape[0], self.labels.shape[0]}) != 1:
            raise ParameterError("anchors, positives and labels differ in length")
        if self.modality is Modality.UNI and self.anchors.shape[1] != self.positives.shape[1]:
            raise ParameterError("uni-modal pairs must share dimensionality")
        if not (np.all(np.isfinite(self.anchors)) and np.all(np.isfinite(self.positives))):
            raise ParameterError("features must be finite")

    @property
    def n(self) -> int:
        return int(self.labels.shape[0])

    def __len__(self) -> int:
        return self.n

    @property
    def d_x(self) -> int:
        return int(self.anchors.shape[1])

    @property
    def d_x2(self) -> int:
        return int(self.positives.shape[1])

    def __getitem__(self, i: int) -> PairSample:
        return _pair_at(self.anchors, self.positives, self.labels, self.modality, i)

    @property
    def pairs(self) -> list[PairSample]:
        return [self[i] for i in range(self.n)]

    def take(self, indices: Sequence[int]) -> "PairBatch":
        idx = np.asarray(indices, dtype=np.int64)
        return PairBatch(
            anchors=self.anchors[idx],
            positives=self.positives[idx],
            labels=self.labels[idx],
            source_indices=idx,
            modality=self.modality,
        )


@dataclass(frozen=True, eq=False)
class PairBatch:
    anchors: np.ndarray
    positives: np.ndarray
    labels: np.ndarray
    source_indices: np.ndarray
    modality: Modality

    @property
    def realized_size(self) -> int:
        return int(self.anchors.shape[0])

    def __len__(self) -> int:
        return self.realized_size

    @property
    def pairs(self) -> list[PairSample]:
        return [
            _pair_at(self.anchors, self.positives, self.labels, self.modality, i)
            for i in range(self.realized_size)
        ]

    def subset(self, rows: Sequence[int]) -> "PairBatch":
        """Rows of this batch (positions, not dataset indices)."""
        rows = np.asarray(rows, dtype=np.int64)
        return PairBatch(
            self.anchors[rows], self.positives[rows], self.labels[rows],
            self.source_indices[rows], self.modality,
        )

    @classmethod
    def from_arrays(cls, anchors, positives, labels=None, modality=Modality.UNI) -> "PairBatch":
        anchors = np.asarray(anchors, dtype=np.float64)
        positives = np.asarray(positives, dtype=np.float64)
        n = anchors.shape[0]
        labels = np.zeros(n, dtype=np.int64) if labels is None else np.asarray(labels, dtype=np.int64)
        return cls(anchors, positives, labels, np.arange(n, dtype=np.int64), Modality(modality))


def _check_common(num_classes, per_class, dims, separation, noise_std):
    if num_classes < 2:
        raise ParameterError(f"num_classes must be >= 2, got {num_classes}")
    if per_class < 1:
        raise ParameterError(f"per_class must be >= 1, got {per_class}")
    for d in dims:
        if d < 2:
            raise ParameterError(f"feature dimensions must be >= 2, got {d}")
    if not separation > 0:
        raise ParameterError(f"separation must be positive, got {separation}")
    if not noise_std > 0:
        raise ParameterError(f"noise_std must be positive, got {noise_std}")


def _class_means(rng: np.random.Generator, num_classes: int, dim: int, separation: float):
    means = rng.standard_normal((num_classes, dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    return means * separation


def generate_unimodal(
    num_classes: int,
    per_class: int,
    d_x: int,
    separation: float,
    noise_std: float,
    seed: int,
) -> Dataset:
    _check_common(num_classes, per_class, [d_x], separation, noise_std)
    rng = stream("dataset/uni", seed)
    means = _class_means(rng, num_classes, d_x, separation)
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), per_class)
    anchors = means[labels] + noise_std * rng.standard_normal((labels.size, d_x))
    positives = means[labels] + noise_std * rng.standard_normal((labels.size, d_x))
    return Dataset(anchors, positives, labels, Modality.UNI, seed, num_classes, float(separation))


def generate_dualmodal(
    num_classes: int,
    per_class: int,
    d1: int,
    d2: int,
    separation: float,
    noise_std: float,
    seed: int,
) -> Dataset:
    _check_common(num_classes, per_class, [d1, d2], separation, noise_std)
    rng = stream("dataset/dual", seed)
    means1 = _class_means(rng, num_classes, d1, separation)
    means2 = _class_means(rng, num_classes, d2, separation)
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), per_class)
    anchors = means1[labels] + noise_std * rng.standard_normal((labels.size, d1))
    positives = means2[labels] + noise_std * rng.standard_normal((labels.size, d2))
    return Dataset(anchors, positives, labels, Modality.DUAL, seed, num_classes, float(separation))


def split_per_class(ds: Dataset, n_train: int) -> tuple[Dataset, Dataset]:
    """First ``n_train`` pairs of every class for training, the rest held out."""
    if n_train < 1:
        raise ParameterError(f"n_train must be >= 1, got {n_train}")
    rank = np.zeros(ds.n, dtype=np.int64)
    seen: dict[int, int] = {}
    for i, y in enumerate(ds.labels.tolist()):
        rank[i] = seen.get(y, 0)
        seen[y] = rank[i] + 1
    parts = []
    for keep in (rank < n_train, rank >= n_train):
        idx = np.flatnonzero(keep)
        parts.append(Dataset(ds.anchors[idx], ds.positives[idx], ds.labels[idx], ds.modality,
                             ds.seed, ds.num_classes, ds.class_separation))
    return parts[0], parts[1]


def poisson_subsample(ds: Dataset, q: float, seed: int, step: int) -> PairBatch:
    """Includes each pair independently with probability ``q``.

    The draw depends only on ``(seed, step)``, so any step can be replayed in
    isolation.
    """
    if not 0.0 < q <= 1.0:
        raise ParameterError(f"sampling ratio q must lie in (0, 1], got {q}")
    if ds.n == 0:
        raise ParameterError("cannot subsample an empty dataset")
    rng = stream("subsample", seed, step)
    mask = rng.random(ds.n) < q
    return ds.take(np.flatnonzero(mask))


def save_dataset(ds: Dataset, path: str | Path) -> None:
    """Writes the line-oriented text format.

    A ``#`` comment line carries the generator metadata, then the header
    ``n d_x d_x2 num_classes modality`` and one ``label anchor... positive...``
    record per pair. Floats use the shortest round-tripping repr.
    """
    lines = [
        f"# seed={ds.seed} class_separation={ds.class_separation!r}",
        f"{ds.n} {ds.d_x} {ds.d_x2} {ds.num_classes} {ds.modality.value}",
    ]
    for label, a, p in zip(ds.labels.tolist(), ds.anchors.tolist(), ds.positives.tolist()):
        lines.append(" ".join([str(label), *map(repr, a), *map(repr, p)]))
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path: str | Path) -> Dataset:
    seed, separation = 0, 1.0
    header = None
    records = []
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            for item in line[1:].split():
                key, _, value = item.partition("=")
                if key == "seed":
                    seed = int(value)
                elif key == "class_separation":
                    separation = float(value)
            continue
        if header is None:
            header = line.split()
            continue
        records.append(line.split())
    if header is None or len(header) != 5:
        raise ParameterError(f"{path}: missing or malformed header")
    n, d_x, d_x2, num_classes = (int(v) for v in header[:4])
    modality = Modality(header[4])
    if len(records) != n:
        raise ParameterError(f"{path}: header says {n} records, found {len(records)}")
    labels = np.empty(n, dtype=np.int64)
    anchors = np.empty((n, d_x))
    positives = np.empty((n, d_x2))
    for i, rec in enumerate(records):
        if len(rec) != 1 + d_x + d_x2:
            raise ParameterError(f"{path}: record {i} has {len(rec)} fields")
        labels[i] = int(rec[0])
        anchors[i] = [float(v) for v in rec[1:1 + d_x]]
        positives[i] = [float(v) for v in rec[1 + d_x:]]
    return Dataset(anchors, positives, labels, modality, seed, num_classes, separation)
