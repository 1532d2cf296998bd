import math

import numpy as np
import pytest

from conftest import central_fd, dual_instance, rel_err, uni_instance
from dpgcl.augment import AugmentKind, AugmentOp, apply
from dpgcl.dataset import PairBatch
from dpgcl.encoder import EncoderSpec, cosine_similarity, forward, init_params
from dpgcl.grouping import GroupAssignment, assign_groups
from dpgcl.loss import (
    full_denominator_group_grads,
    group_infonce,
    group_infonce_aug,
    group_infonce_dual,
    infonce_full_batch,
    masked_xent,
    pairwise_similarity_grads,
)

IDENTITY = AugmentOp(AugmentKind.IDENTITY, 0.0)


def _embed(params, spec, x):
    z, _ = forward(params, spec, x)
    return z


def oracle_group_loss(za, zp, members, tau, extra=()):
    """Straight-line group InfoNCE; ``extra`` are lists of augmented positives."""
    total = 0.0
    for i in members:
        num = math.exp(cosine_similarity(za[i], zp[i]) / tau)
        den = sum(math.exp(cosine_similarity(za[i], zp[j]) / tau) for j in members)
        for block in extra:
            den += sum(math.exp(cosine_similarity(za[i], block[j]) / tau) for j in members)
        total += -math.log(num / den)
    return total


def test_single_pair_loss_is_zero():
    p, spec, batch = uni_instance(0, B=1)
    loss, grad = infonce_full_batch(p, spec, batch, 0.5)
    assert loss == 0.0
    assert np.all(np.abs(grad) < 1e-15)


def test_equal_similarities_give_b_log_b():
    spec = EncoderSpec(3, (4,), 2, init_seed=1)
    x = np.tile([0.2, -0.4, 1.0], (5, 1))
    batch = PairBatch.from_arrays(x, x)
    loss, _ = infonce_full_batch(init_params(spec), spec, batch, 0.7)
    assert loss == pytest.approx(5 * math.log(5), abs=1e-12)


def test_full_batch_matches_straight_line():
    p, spec, batch = uni_instance(3, B=3, d_x=2, hidden=(), d_z=2)
    za, zp = _embed(p, spec, batch.anchors), _embed(p, spec, batch.positives)
    loss, _ = infonce_full_batch(p, spec, batch, 0.3)
    assert loss == pytest.approx(oracle_group_loss(za, zp, range(3), 0.3), abs=1e-12)


def test_single_group_equals_full_batch():
    p, spec, batch = uni_instance(4, B=7)
    res = group_infonce(p, spec, batch, assign_groups(7, 7, 0, 0), 0.5)
    loss, grad = infonce_full_batch(p, spec, batch, 0.5)
    assert res.K == 1
    assert res.per_group_loss[0] == loss
    assert np.array_equal(res.per_group_grad[0], grad)


def test_singleton_groups_have_zero_loss():
    p, spec, batch = uni_instance(5, B=4)
    res = group_infonce(p, spec, batch, assign_groups(4, 1, 0, 0), 0.5)
    assert np.all(res.per_group_loss == 0)
    assert np.all(np.abs(res.per_group_grad) < 1e-15)


def test_group_losses_match_masked_oracle():
    p, spec, batch = uni_instance(6, B=4)
    g = GroupAssignment(((2, 0), (1, 3)), 2)
    res = group_infonce(p, spec, batch, g, 0.4)
    za, zp = _embed(p, spec, batch.anchors), _embed(p, spec, batch.positives)
    for k, members in enumerate(g.groups):
        assert res.per_group_loss[k] == pytest.approx(oracle_group_loss(za, zp, members, 0.4), abs=1e-12)


def test_no_augmentation_is_bitwise_group_loss():
    p, spec, batch = uni_instance(7, B=6)
    g = assign_groups(6, 3, 1, 0)
    a = group_infonce(p, spec, batch, g, 0.5)
    b = group_infonce_aug(p, spec, batch, g, 0.5, 0, AugmentOp("mask", 0.3))
    assert np.array_equal(a.per_group_loss, b.per_group_loss)
    assert np.array_equal(a.per_group_grad, b.per_group_grad)


def test_identity_augmentation_adds_log2_per_member():
    p, spec, batch = uni_instance(8, B=6)
    g = assign_groups(6, 4, 2, 0)
    a = group_infonce(p, spec, batch, g, 0.5)
    b = group_infonce_aug(p, spec, batch, g, 0.5, 1, IDENTITY)
    sizes = np.array([len(m) for m in g.groups])
    assert np.allclose(b.per_group_loss, a.per_group_loss + sizes * math.log(2), atol=1e-12)


def test_augmented_loss_matches_oracle():
    p, spec, batch = uni_instance(9, B=5)
    g = GroupAssignment(((4, 1, 0), (2, 3)), 3)
    op = AugmentOp("jitter", 0.4, 3)
    n_aug, step, tau = 2, 7, 0.6
    res = group_infonce_aug(p, spec, batch, g, tau, n_aug, op, step)
    za, zp = _embed(p, spec, batch.anchors), _embed(p, spec, batch.positives)
    canon = g.canonical()
    blocks = []
    for m in range(n_aug):
        xa = np.empty_like(batch.positives)
        for k, members in enumerate(canon.groups):
            for pos, j in enumerate(members):
                xa[j] = apply(op, batch.positives[j], step, k, m, pos)
        blocks.append(_embed(p, spec, xa))
    for members, got in zip(g.groups, res.per_group_loss):
        assert got == pytest.approx(oracle_group_loss(za, zp, members, tau, blocks), abs=1e-12)


def test_group_locality_bitwise():
    p, spec, batch = uni_instance(10, B=8)
    g = assign_groups(8, 3, 0, 0)
    op = AugmentOp("mask", 0.4, 1)
    base = group_infonce_aug(p, spec, batch, g, 0.5, 1, op)
    victim = g.groups[0]
    anchors, positives = batch.anchors.copy(), batch.positives.copy()
    anchors[list(victim)] += 3.0
    positives[list(victim)] -= 2.0
    moved = group_infonce_aug(p, spec, PairBatch.from_arrays(anchors, positives), g, 0.5, 1, op)
    assert not np.array_equal(moved.per_group_grad[0], base.per_group_grad[0])
    for k in range(1, g.K):
        assert np.array_equal(moved.per_group_grad[k], base.per_group_grad[k])


def test_temperature_rescaling_identity():
    rng = np.random.default_rng(0)
    sims = np.clip(rng.standard_normal((5, 5)), -1, 1)
    mask = np.ones((5, 5), dtype=bool)
    a, _ = masked_xent([sims], mask, 0.25)
    b, _ = masked_xent([sims / 0.25], mask, 1.0)
    assert np.allclose(a, b, atol=1e-12)


def test_stable_at_small_temperature():
    p, spec, batch = uni_instance(11, B=6)
    loss, grad = infonce_full_batch(p, spec, batch, 0.01)
    assert np.isfinite(loss) and np.all(np.isfinite(grad))


def test_dual_singletons_have_zero_loss():
    params, specs, batch = dual_instance(0, B=4)
    res = group_infonce_dual(*params, specs, batch, assign_groups(4, 1, 0, 0), 0.5)
    assert np.all(res.per_group_loss == 0)


def test_dual_with_shared_encoder_is_twice_uni_when_symmetric():
    # Symmetric similarities need anchors == positives.
    spec = EncoderSpec(3, (4,), 3, init_seed=2)
    p = init_params(spec)
    x = np.random.default_rng(1).standard_normal((6, 3))
    g = assign_groups(6, 3, 0, 0)
    uni = group_infonce(p, spec, PairBatch.from_arrays(x, x), g, 0.5)
    dual = group_infonce_dual(p, p, (spec, spec), PairBatch.from_arrays(x, x, modality="dual"), g, 0.5)
    assert np.allclose(dual.per_group_loss, 2 * uni.per_group_loss, atol=1e-12)


def test_dual_matches_straight_line():
    (p1, p2), (s1, s2), batch = dual_instance(2, B=4)
    g = GroupAssignment(((0, 3), (1, 2)), 2)
    tau = 0.5
    res = group_infonce_dual(p1, p2, (s1, s2), batch, g, tau)
    za, zp = _embed(p1, s1, batch.anchors), _embed(p2, s2, batch.positives)
    for members, got in zip(g.groups, res.per_group_loss):
        expect = oracle_group_loss(za, zp, members, tau) + oracle_group_loss(zp, za, members, tau)
        assert got == pytest.approx(expect, abs=1e-12)


def test_full_denominator_groups_sum_to_full_batch_gradient():
    p, spec, batch = uni_instance(12, B=7)
    losses, grads = full_denominator_group_grads(p, spec, batch, assign_groups(7, 3, 0, 0), 0.5)
    loss, grad = infonce_full_batch(p, spec, batch, 0.5)
    assert losses.sum() == pytest.approx(loss, abs=1e-12)
    assert np.allclose(grads.sum(axis=0), grad, atol=1e-12)


def test_pairwise_chain_rule_recovers_full_gradient():
    p, spec, batch = uni_instance(13, B=4)
    loss, pair_grads, weights = pairwise_similarity_grads(p, spec, batch, 0.5)
    full_loss, grad = infonce_full_batch(p, spec, batch, 0.5)
    assert pair_grads.shape == (16, spec.num_params)
    assert loss == pytest.approx(full_loss, abs=1e-12)
    assert np.allclose((pair_grads * weights.ravel()[:, None]).sum(axis=0), grad, atol=1e-12)


def test_pair_gradient_matches_fd_of_single_similarity():
    p, spec, batch = uni_instance(14, B=3)
    _, pair_grads, _ = pairwise_similarity_grads(p, spec, batch, 1.0)
    i, j = 2, 0
    f = lambda th: cosine_similarity(_embed(th, spec, batch.anchors[i:i + 1])[0],
                                     _embed(th, spec, batch.positives[j:j + 1])[0])
    coords = np.arange(spec.num_params)
    assert rel_err(pair_grads[i * 3 + j], central_fd(f, p, coords)).max() < 1e-6


def test_group_gradients_match_fd():
    p, spec, batch = uni_instance(15, B=6)
    g = assign_groups(6, 2, 3, 0)
    op = AugmentOp("jitter", 0.3, 0)
    res = group_infonce_aug(p, spec, batch, g, 0.5, 1, op, 4)
    coords = np.random.default_rng(0).choice(spec.num_params, 40, replace=False)
    for k in range(g.K):
        f = lambda th: group_infonce_aug(th, spec, batch, g, 0.5, 1, op, 4).per_group_loss[k]
        assert rel_err(res.per_group_grad[k][coords], central_fd(f, p, coords)).max() < 1e-4
