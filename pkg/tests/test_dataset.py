import numpy as np
import pytest

from dpgcl.dataset import (
    Modality,
    PairBatch,
    generate_dualmodal,
    generate_unimodal,
    load_dataset,
    poisson_subsample,
    save_dataset,
    split_per_class,
)
from dpgcl.errors import ParameterError


def _cos(a, b):
    a = a / np.linalg.norm(a, axis=1, keepdims=True)
    b = b / np.linalg.norm(b, axis=1, keepdims=True)
    return a @ b.T


def test_tiny_unimodal_is_label_consistent():
    ds = generate_unimodal(2, 1, 4, 10.0, 0.1, 7)
    assert ds.n == 2
    assert [p.anchor.label == p.positive.label for p in ds.pairs] == [True, True]
    assert sorted(ds.labels.tolist()) == [0, 1]
    assert ds.modality is Modality.UNI


def test_generation_is_bit_identical_under_seed():
    a = generate_unimodal(3, 5, 4, 2.0, 0.5, 7)
    b = generate_unimodal(3, 5, 4, 2.0, 0.5, 7)
    assert np.array_equal(a.anchors, b.anchors) and np.array_equal(a.positives, b.positives)
    c = generate_unimodal(3, 5, 4, 2.0, 0.5, 8)
    assert not np.array_equal(a.anchors, c.anchors)


def test_within_class_similarity_exceeds_cross_class():
    ds = generate_unimodal(10, 100, 16, 5.0, 1.0, 1)
    sims = _cos(ds.anchors, ds.anchors)
    same = ds.labels[:, None] == ds.labels[None, :]
    off_diag = ~np.eye(ds.n, dtype=bool)
    assert sims[same & off_diag].mean() > sims[~same].mean()


def test_dualmodal_dims_and_pairing():
    ds = generate_dualmodal(2, 1, 4, 6, 10.0, 0.1, 3)
    assert (ds.n, ds.d_x, ds.d_x2) == (2, 4, 6)
    ds = generate_dualmodal(5, 50, 8, 8, 5.0, 1.0, 2)
    assert set(ds.labels.tolist()) == set(range(5))
    assert ds.modality is Modality.DUAL


@pytest.mark.parametrize("kwargs", [
    dict(num_classes=1), dict(per_class=0), dict(d_x=1), dict(separation=0.0), dict(noise_std=-1.0),
])
def test_generator_preconditions(kwargs):
    args = dict(num_classes=3, per_class=2, d_x=4, separation=1.0, noise_std=1.0, seed=0)
    args.update(kwargs)
    with pytest.raises(ParameterError):
        generate_unimodal(**args)


def test_dual_per_class_zero_rejected():
    with pytest.raises(ParameterError):
        generate_dualmodal(2, 0, 4, 6, 1.0, 1.0, 0)


def test_subsample_q1_is_whole_dataset_in_order():
    ds = generate_unimodal(3, 4, 4, 1.0, 1.0, 0)
    batch = poisson_subsample(ds, 1.0, 0, 0)
    assert np.array_equal(batch.source_indices, np.arange(ds.n))
    assert np.array_equal(batch.anchors, ds.anchors)


def test_subsample_replays_per_seed_and_step():
    ds = generate_unimodal(4, 25, 4, 1.0, 1.0, 0)
    a = poisson_subsample(ds, 0.3, 9, 42)
    b = poisson_subsample(ds, 0.3, 9, 42)
    assert np.array_equal(a.source_indices, b.source_indices)
    assert np.all(np.diff(a.source_indices) > 0)


def test_subsample_mean_size_binomial():
    ds = generate_unimodal(2, 5000, 2, 1.0, 1.0, 0)
    sizes = np.array([poisson_subsample(ds, 0.5, 1, t).realized_size for t in range(1000)])
    se = np.sqrt(10000 * 0.25) / np.sqrt(1000)
    assert abs(sizes.mean() - 5000) < 3 * se


def test_inclusion_indicators_uncorrelated():
    ds = generate_unimodal(2, 5, 2, 1.0, 1.0, 0)
    q, draws = 0.3, 10_000
    inc = np.zeros((draws, ds.n))
    for t in range(draws):
        inc[t, poisson_subsample(ds, q, 5, t).source_indices] = 1.0
    cov = np.cov(inc[:, 0], inc[:, 1])[0, 1]
    # var of the product-moment estimate is about q^2 (1-q)^2 / draws
    se = q * (1 - q) / np.sqrt(draws)
    assert abs(cov) < 3 * se


@pytest.mark.parametrize("q", [0.0, -0.1, 1.5])
def test_subsample_rejects_bad_q(q):
    ds = generate_unimodal(2, 2, 2, 1.0, 1.0, 0)
    with pytest.raises(ParameterError):
        poisson_subsample(ds, q, 0, 0)


@pytest.mark.parametrize("dual", [False, True])
def test_text_round_trip_is_exact(tmp_path, dual):
    ds = generate_dualmodal(3, 4, 3, 5, 2.0, 0.7, 11) if dual else generate_unimodal(3, 4, 3, 2.0, 0.7, 11)
    path = tmp_path / "d.txt"
    save_dataset(ds, path)
    back = load_dataset(path)
    assert np.array_equal(back.anchors, ds.anchors)
    assert np.array_equal(back.positives, ds.positives)
    assert np.array_equal(back.labels, ds.labels)
    assert (back.modality, back.seed, back.num_classes, back.class_separation) == (
        ds.modality, ds.seed, ds.num_classes, ds.class_separation)
    save_dataset(back, tmp_path / "e.txt")
    assert (tmp_path / "e.txt").read_bytes() == path.read_bytes()


def test_text_header_format(tmp_path):
    ds = generate_unimodal(2, 1, 2, 1.0, 1.0, 0)
    save_dataset(ds, tmp_path / "d.txt")
    lines = (tmp_path / "d.txt").read_text().splitlines()
    assert lines[1] == "2 2 2 2 uni"
    assert len(lines[2].split()) == 1 + 2 + 2


def test_load_rejects_truncated_file(tmp_path):
    ds = generate_unimodal(2, 2, 2, 1.0, 1.0, 0)
    save_dataset(ds, tmp_path / "d.txt")
    text = (tmp_path / "d.txt").read_text().splitlines()
    (tmp_path / "bad.txt").write_text("\n".join(text[:-1]) + "\n")
    with pytest.raises(ParameterError):
        load_dataset(tmp_path / "bad.txt")


def test_split_per_class_counts():
    ds = generate_unimodal(3, 10, 2, 1.0, 1.0, 0)
    tr, te = split_per_class(ds, 7)
    assert np.bincount(tr.labels).tolist() == [7, 7, 7]
    assert np.bincount(te.labels).tolist() == [3, 3, 3]
    assert np.array_equal(tr.anchors[:7], ds.anchors[:7])


def test_batch_rejects_mismatched_uni_dims():
    from dpgcl.dataset import Dataset
    with pytest.raises(ParameterError):
        Dataset(np.zeros((2, 3)), np.zeros((2, 4)), np.zeros(2, dtype=int), Modality.UNI, 0, 2, 1.0)
    with pytest.raises(ParameterError):
        Dataset(np.full((1, 2), np.nan), np.zeros((1, 2)), np.zeros(1, dtype=int), Modality.UNI, 0, 2, 1.0)


def test_pair_batch_subset():
    b = PairBatch.from_arrays(np.arange(8.0).reshape(4, 2), np.arange(8.0).reshape(4, 2) + 1)
    s = b.subset([1, 3])
    assert s.realized_size == 2
    assert np.array_equal(s.source_indices, [1, 3])
