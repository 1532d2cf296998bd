import math
from collections import Counter

import numpy as np
import pytest

from dpgcl.encoder import EncoderSpec, forward, init_params
from dpgcl.errors import ParameterError
from dpgcl.evaluation import (
    EmbedSet,
    bidirectional_retrieval,
    embed,
    knn_accuracy,
    knn_predict,
    linear_probe,
    retrieval_at_k,
)


def _cos(a, b):
    na, nb = math.sqrt(sum(x * x for x in a)), math.sqrt(sum(x * x for x in b))
    return sum(x * y for x, y in zip(a, b)) / (na * nb)


def brute_knn(train_z, train_y, test_z, k):
    preds = []
    for q in test_z:
        scored = sorted(range(len(train_z)), key=lambda i: (-_cos(q, train_z[i]), i))
        votes = Counter(int(train_y[i]) for i in scored[:k])
        top = max(votes.values())
        preds.append(min(c for c, n in votes.items() if n == top))
    return np.array(preds)


def brute_rank(q, gallery, true_idx):
    scored = sorted(range(len(gallery)), key=lambda i: (-_cos(q, gallery[i]), i))
    return scored.index(true_idx)


def test_knn_picks_nearest_class():
    train = EmbedSet([[1, 0], [0.9, 0.1], [0, 1], [0.1, 0.9]], [0, 0, 1, 1])
    test = EmbedSet([[1, 0.05], [0.05, 1]], [0, 1])
    assert knn_accuracy(train, test, k=1) == 1.0
    assert knn_accuracy(train, test, k=2) == 1.0


def test_knn_vote_tie_goes_to_smallest_class():
    train = EmbedSet([[1, 0], [1, 0.01]], [3, 1])
    test = EmbedSet([[1, 0]], [1])
    assert knn_predict(train, test, k=2)[0] == 1


def test_knn_similarity_tie_prefers_lower_index():
    train = EmbedSet([[2, 0], [1, 0], [0, 1]], [2, 0, 1])
    assert knn_predict(train, EmbedSet([[1, 0]], [0]), k=1)[0] == 2


def test_knn_matches_brute_force():
    rng = np.random.default_rng(0)
    z = rng.standard_normal((40, 3))
    y = rng.integers(0, 4, 40)
    tz = rng.standard_normal((15, 3))
    for k in (1, 3, 5):
        got = knn_predict(EmbedSet(z, y), EmbedSet(tz, np.zeros(15)), k)
        assert np.array_equal(got, brute_knn(z, y, tz, k))


def test_knn_invariances():
    rng = np.random.default_rng(1)
    z, tz = rng.standard_normal((30, 4)), rng.standard_normal((10, 4))
    y, ty = rng.integers(0, 3, 30), rng.integers(0, 3, 10)
    base = knn_predict(EmbedSet(z, y), EmbedSet(tz, ty), 3)
    Q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    scales = rng.uniform(0.1, 10, (30, 1))
    assert np.array_equal(knn_predict(EmbedSet(z * scales, y), EmbedSet(tz * 7, ty), 3), base)
    assert np.array_equal(knn_predict(EmbedSet(z @ Q, y), EmbedSet(tz @ Q, ty), 3), base)


def test_knn_preconditions():
    train = EmbedSet([[1, 0]], [0])
    with pytest.raises(ParameterError):
        knn_predict(train, train, k=2)
    with pytest.raises(ParameterError):
        knn_predict(EmbedSet(np.zeros((0, 2)), []), train)
    with pytest.raises(ParameterError):
        EmbedSet([[1, 0], [0, 1]], [0])


def test_probe_separable_data():
    rng = np.random.default_rng(2)
    means = np.eye(3) * 4
    y = np.repeat(np.arange(3), 40)
    x = means[y] + 0.3 * rng.standard_normal((120, 3))
    ty = np.repeat(np.arange(3), 20)
    tx = means[ty] + 0.3 * rng.standard_normal((60, 3))
    assert linear_probe(EmbedSet(x, y), EmbedSet(tx, ty), epochs=300, lr=1.0) == 1.0


def test_probe_on_permuted_labels_is_near_chance():
    rng = np.random.default_rng(3)
    n = 400
    # features carry no label information, so predictions are independent of truth
    y, ty = np.repeat([0, 1], n // 2), np.repeat([0, 1], n // 2)
    x, tx = rng.standard_normal((n, 4)), rng.standard_normal((n, 4))
    acc = linear_probe(EmbedSet(x, rng.permutation(y)), EmbedSet(tx, ty))
    assert abs(acc - 0.5) < 3 * math.sqrt(0.25 / n)


def test_probe_rotation_invariant():
    rng = np.random.default_rng(10)
    x, y = rng.standard_normal((80, 4)), rng.integers(0, 3, 80)
    tx, ty = rng.standard_normal((40, 4)), rng.integers(0, 3, 40)
    Q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    base = linear_probe(EmbedSet(x, y), EmbedSet(tx, ty))
    assert linear_probe(EmbedSet(x @ Q, y), EmbedSet(tx @ Q, ty)) == base


def test_probe_loss_does_not_increase():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((60, 5))
    y = rng.integers(0, 3, 60)
    history = []
    linear_probe(EmbedSet(x, y), EmbedSet(x, y), epochs=100, lr=0.1, history=history)
    assert len(history) == 100
    assert history[0] == pytest.approx(math.log(3), abs=1e-12)
    assert np.all(np.diff(history) <= 1e-12)


def test_probe_needs_two_classes():
    e = EmbedSet(np.ones((3, 2)), [0, 0, 0])
    with pytest.raises(ParameterError):
        linear_probe(e, e)


def test_retrieval_identity_is_perfect():
    z = np.random.default_rng(5).standard_normal((12, 4))
    assert bidirectional_retrieval(z, z, K=1) == (1.0, 1.0)


def test_retrieval_with_k_equal_gallery_is_one():
    rng = np.random.default_rng(6)
    a, b = rng.standard_normal((9, 3)), rng.standard_normal((9, 3))
    assert retrieval_at_k(EmbedSet(a, np.zeros(9)), EmbedSet(b, np.zeros(9)), 9) == 1.0


def test_retrieval_matches_brute_force_rank():
    rng = np.random.default_rng(7)
    q, g = rng.standard_normal((30, 3)), rng.standard_normal((30, 3))
    ranks = np.array([brute_rank(q[i], g, i) for i in range(30)])
    accs = []
    for K in (1, 5, 10, 30):
        acc = retrieval_at_k(EmbedSet(q, np.zeros(30)), EmbedSet(g, np.zeros(30)), K)
        assert acc == np.mean(ranks < K)
        accs.append(acc)
    assert accs == sorted(accs)


def test_retrieval_tie_ranks_lower_index_first():
    g = EmbedSet([[1, 0], [2, 0]], [0, 0])
    q = EmbedSet([[1, 0], [1, 0]], [0, 0])
    assert retrieval_at_k(q, g, 1) == 0.5


def test_retrieval_custom_pairing_and_errors():
    g = EmbedSet([[1, 0], [0, 1]], [0, 0])
    q = EmbedSet([[0, 1]], [0])
    assert retrieval_at_k(q, g, 1, pairing=[1]) == 1.0
    with pytest.raises(ParameterError):
        retrieval_at_k(q, g, 3)
    with pytest.raises(ParameterError):
        retrieval_at_k(q, g, 1, pairing=[2])


def test_retrieval_rotation_invariant():
    rng = np.random.default_rng(8)
    a, b = rng.standard_normal((20, 4)), rng.standard_normal((20, 4))
    Q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    assert bidirectional_retrieval(a, b, 5) == bidirectional_retrieval(a @ Q, 3 * b @ Q, 5)


def test_embed_runs_encoder():
    spec = EncoderSpec(3, (4,), 2, init_seed=0)
    p = init_params(spec)
    x = np.random.default_rng(9).standard_normal((5, 3))
    e = embed(p, spec, x, labels=[0, 1, 0, 1, 0])
    assert np.array_equal(e.embeddings, forward(p, spec, x)[0])
    assert e.labels.tolist() == [0, 1, 0, 1, 0]
