"""Downstream evaluation of frozen encoders.

kNN classification and retrieval rank by cosine similarity, so both are
invariant to rescaling the embeddings. The linear probe trains a softmax
classifier with a bias on L2-normalized embeddings by full-batch gradient
descent from zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import log_softmax, softmax

from dpgcl.encoder import NORM_EPS, EncoderSpec, forward
from dpgcl.errors import ParameterError


@dataclass(frozen=True, eq=False)
class EmbedSet:
    embeddings: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        z = np.atleast_2d(np.asarray(self.embeddings, dtype=np.float64))
        y = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if z.shape[0] != y.shape[0]:
            raise ParameterError(f"{z.shape[0]} embeddings but {y.shape[0]} labels")
        if not np.all(np.isfinite(z)):
            raise ParameterError("embeddings must be finite")
        object.__setattr__(self, "embeddings", z)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.embeddings.shape[0]


def embed(params: np.ndarray, spec: EncoderSpec, x: np.ndarray, labels: Sequence[int] | None = None) -> EmbedSet:
    z, _ = forward(params, spec, x)
    if labels is None:
        labels = np.zeros(z.shape[0], dtype=np.int64)
    return EmbedSet(z, labels)


def _unit(z: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    return np.where(norms > NORM_EPS, z / np.maximum(norms, NORM_EPS), 0.0)


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Guarded cosine similarities; rows with (near) zero norm score 0."""
    return _unit(a) @ _unit(b).T


def knn_predict(train: EmbedSet, test: EmbedSet, k: int = 3) -> np.ndarray:
    """Majority vote over the ``k`` most similar training points.

    Equal similarities rank the lower training index first; vote ties go to
    the smallest class id.
    """
    if len(train) == 0 or len(test) == 0:
        raise ParameterError("kNN needs nonempty train and test sets")
    if not 1 <= k <= len(train):
        raise ParameterError(f"k must lie in [1, {len(train)}], got {k}")
    sims = cosine_matrix(test.embeddings, train.embeddings)
    order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    votes = train.labels[order]
    n_classes = int(train.labels.max()) + 1
    counts = np.zeros((len(test), n_classes), dtype=np.int64)
    np.add.at(counts, (np.repeat(np.arange(len(test)), k), votes.ravel()), 1)
    return np.argmax(counts, axis=1)  # first maximum = smallest class


def knn_accuracy(train: EmbedSet, test: EmbedSet, k: int = 3) -> float:
    return float(np.mean(knn_predict(train, test, k) == test.labels))


def linear_probe(
    train: EmbedSet,
    test: EmbedSet,
    epochs: int = 500,
    lr: float = 0.1,
    history: list | None = None,
) -> float:
    """Test accuracy of a multinomial logistic regression on the embeddings.

    Args:
        history: If given, receives the training loss before every epoch.
    """
    classes = np.unique(train.labels)
    if classes.size < 2:
        raise ParameterError("linear probe needs at least two classes")
    if len(test) == 0:
        raise ParameterError("empty test set")
    n_classes = int(max(train.labels.max(), test.labels.max())) + 1
    x = _unit(train.embeddings)
    n, d = x.shape
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), train.labels] = 1.0
    W = np.zeros((d, n_classes))
    b = np.zeros(n_classes)
    for _ in range(epochs):
        logits = x @ W + b
        if history is not None:
            history.append(float(-np.mean(np.sum(onehot * log_softmax(logits, axis=1), axis=1))))
        resid = (softmax(logits, axis=1) - onehot) / n
        W -= lr * (x.T @ resid)
        b -= lr * resid.sum(axis=0)
    pred = np.argmax(_unit(test.embeddings) @ W + b, axis=1)
    return float(np.mean(pred == test.labels))


def retrieval_at_k(queries: EmbedSet, gallery: EmbedSet, K: int, pairing: Sequence[int] | None = None) -> float:
    """Fraction of queries whose true gallery item ranks in the top ``K``.

    Items tied with the true match rank ahead of it only if their gallery
    index is lower. ``pairing`` defaults to the identity.
    """
    if len(queries) == 0 or len(gallery) == 0:
        raise ParameterError("retrieval needs nonempty queries and gallery")
    if not 1 <= K <= len(gallery):
        raise ParameterError(f"K must lie in [1, {len(gallery)}], got {K}")
    truth = np.arange(len(queries)) if pairing is None else np.asarray(pairing, dtype=np.int64)
    if truth.shape != (len(queries),) or truth.min() < 0 or truth.max() >= len(gallery):
        raise ParameterError("pairing must map every query to a gallery index")
    sims = cosine_matrix(queries.embeddings, gallery.embeddings)
    s_true = sims[np.arange(len(queries)), truth][:, None]
    ahead = (sims > s_true) | ((sims == s_true) & (np.arange(len(gallery))[None, :] < truth[:, None]))
    rank = ahead.sum(axis=1)
    return float(np.mean(rank < K))


def bidirectional_retrieval(first: np.ndarray, second: np.ndarray, K: int = 10) -> tuple[float, float]:
    """(first -> second, second -> first) top-K accuracy for aligned pairs."""
    a = EmbedSet(first, np.zeros(len(first)))
    b = EmbedSet(second, np.zeros(len(second)))
    return retrieval_at_k(a, b, K), retrieval_at_k(b, a, K)
