"""InfoNCE losses and their parameter gradients.

All variants are row-wise cross entropies over cosine-similarity logits
``s_ij / tau`` with the positive ``s_ii`` as target:

* ``infonce_full_batch``: every positive in the batch is a candidate.
* ``group_infonce``: candidates restricted to the sample's own group.
* ``group_infonce_aug``: the group's candidates plus ``n_aug`` augmented
  copies of every in-group positive (the anchor's own included).
* ``group_infonce_dual``: two encoders, and the symmetric sum of the
  anchor-to-positive and positive-to-anchor directions within a group.

Group-local losses are evaluated for all groups at once through a block mask
and per-row parameter gradients. Entries outside a group are hard zeros, so
a group's gradient is arithmetically independent of other groups' samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from dpgcl.augment import AugmentKind, AugmentOp, apply
from dpgcl.dataset import Modality, PairBatch
from dpgcl.encoder import (
    EncoderSpec,
    backward_batched,
    backward_per_example,
    forward,
    normalize_rows,
    normalize_rows_backward,
)
from dpgcl.errors import ParameterError
from dpgcl.grouping import GroupAssignment


@dataclass(frozen=True)
class LossConfig:
    tau: float = 1.0 / math.sqrt(2.0)
    S: int = 16
    n_aug: int = 0
    modality: Modality = Modality.UNI
    # Augments positives (uni-modal) or the second modality (dual-modal).
    augment: AugmentOp = field(default_factory=AugmentOp)
    # Augments the first modality; dual-modal only.
    augment_first: AugmentOp = field(default_factory=AugmentOp)

    def __post_init__(self):
        object.__setattr__(self, "modality", Modality(self.modality))
        if not self.tau > 0:
            raise ParameterError(f"temperature must be positive, got {self.tau}")
        if self.n_aug < 0:
            raise ParameterError(f"n_aug must be >= 0, got {self.n_aug}")
        if self.S < 1:
            raise ParameterError(f"group size must be >= 1, got {self.S}")


@dataclass(frozen=True, eq=False)
class GroupLossResult:
    """Per-group losses ``(K,)`` and gradients ``(K, P)`` in group-label order."""

    per_group_loss: np.ndarray
    per_group_grad: np.ndarray

    @property
    def K(self) -> int:
        return int(self.per_group_loss.shape[0])


# -- similarity and cross-entropy primitives -----------------------------------

class _Normed:
    __slots__ = ("hat", "norms", "ok")

    def __init__(self, z):
        self.hat, self.norms, self.ok = normalize_rows(z)

    def pull(self, dhat):
        return normalize_rows_backward(dhat, self.hat, self.norms, self.ok)


def masked_xent(blocks: Sequence[np.ndarray], mask: np.ndarray, tau: float):
    """Row-wise InfoNCE over logit blocks restricted to ``mask``.

    ``blocks[0][i, i]`` is row i's target; every block contributes the masked
    entries of row i to its denominator. Returns per-row losses and the
    gradient of their sum with respect to each similarity block.
    """
    logits = [b / tau for b in blocks]
    shift = np.max([np.where(mask, lg, -np.inf).max(axis=1) for lg in logits], axis=0)
    exps = [np.exp(np.where(mask, lg - shift[:, None], -np.inf)) for lg in logits]
    denom = exps[0].sum(axis=1)
    for e in exps[1:]:
        denom = denom + e.sum(axis=1)
    target = np.diagonal(logits[0]) - shift
    losses = np.log(denom) - target
    grads = [e / denom[:, None] / tau for e in exps]
    diag = np.arange(mask.shape[0])
    grads[0][diag, diag] -= 1.0 / tau
    return losses, grads


def _group_mask(groups: GroupAssignment, B: int) -> np.ndarray:
    owner = groups.membership()
    if owner.size != B:
        raise ParameterError(f"grouping covers {owner.size} positions but the batch has {B}")
    return owner[:, None] == owner[None, :]


def _augmented_rows(x: np.ndarray, op: AugmentOp, groups: GroupAssignment, n_aug: int, step: int):
    """``n_aug`` stacked ``(B, d)`` blocks; the copy of row j uses j's group key."""
    canon = groups.canonical()
    out = np.empty((n_aug, *x.shape))
    for m in range(n_aug):
        for k, members in enumerate(canon.groups):
            for pos, j in enumerate(members):
                out[m, j] = apply(op, x[j], step, k, m, pos)
    return out


def _sum_rows(per_row: np.ndarray, rows: np.ndarray) -> np.ndarray:
    return per_row[rows].sum(axis=0)


def _check_uni(batch: PairBatch):
    if batch.modality is not Modality.UNI:
        raise ParameterError("this loss expects a uni-modal batch")


# -- uni-modal group-local core -----------------------------------------------

def _uni_group_local(params, spec, batch, groups, tau, n_aug, aug, step):
    """Per-sample losses and per-group gradients for group-local InfoNCE."""
    B = batch.realized_size
    mask = _group_mask(groups, B)
    blocks_x = [batch.anchors, batch.positives]
    if n_aug:
        blocks_x.extend(_augmented_rows(batch.positives, aug, groups, n_aug, step))
    z, tape = forward(params, spec, np.concatenate(blocks_x))
    parts = [_Normed(z[t * B:(t + 1) * B]) for t in range(len(blocks_x))]
    u, v, ws = parts[0], parts[1], parts[2:]
    sims = [u.hat @ p.hat.T for p in parts[1:]]
    losses, grads = masked_xent(sims, mask, tau)
    du = sum(g @ p.hat for g, p in zip(grads, parts[1:]))
    upstream = [u.pull(du)] + [p.pull(g.T @ u.hat) for g, p in zip(grads, parts[1:])]
    per_row = backward_per_example(tape, np.concatenate(upstream))
    n_blocks = len(blocks_x)
    grads_k, losses_k = [], []
    for members in groups.groups:
        members = np.sort(np.asarray(members, dtype=np.int64))
        rows = np.concatenate([members + t * B for t in range(n_blocks)])
        grads_k.append(_sum_rows(per_row, rows))
        losses_k.append(losses[members].sum())
    return losses, np.asarray(losses_k), _stack(grads_k, spec.num_params)


def _stack(rows, width):
    return np.stack(rows) if rows else np.zeros((0, width))


def group_infonce(params, spec: EncoderSpec, batch: PairBatch, groups: GroupAssignment, tau: float) -> GroupLossResult:
    _check_uni(batch)
    _, losses, grads = _uni_group_local(params, spec, batch, groups, tau, 0, None, 0)
    return GroupLossResult(losses, grads)


def group_infonce_aug(
    params,
    spec: EncoderSpec,
    batch: PairBatch,
    groups: GroupAssignment,
    tau: float,
    n_aug: int,
    aug: AugmentOp,
    step: int = 0,
) -> GroupLossResult:
    """Group InfoNCE whose denominators also hold augmented in-group positives.

    The numerator keeps the clean ``s_ii``; the anchor's own augmented positive
    appears in the denominator like every other in-group candidate.
    """
    _check_uni(batch)
    if n_aug < 0:
        raise ParameterError(f"n_aug must be >= 0, got {n_aug}")
    _, losses, grads = _uni_group_local(params, spec, batch, groups, tau, n_aug, aug, step)
    return GroupLossResult(losses, grads)


def infonce_full_batch(params, spec: EncoderSpec, batch: PairBatch, tau: float) -> tuple[float, np.ndarray]:
    """Standard InfoNCE summed over the batch, with its parameter gradient."""
    _check_uni(batch)
    B = batch.realized_size
    if B == 0:
        return 0.0, np.zeros(spec.num_params)
    whole = GroupAssignment((tuple(range(B)),), max(B, 1))
    _, losses, grads = _uni_group_local(params, spec, batch, whole, tau, 0, None, 0)
    return float(losses[0]), grads[0]


# -- full-denominator per-group gradients (group clipping, sample level) -------

def full_denominator_group_grads(params, spec: EncoderSpec, batch: PairBatch, groups: GroupAssignment, tau: float):
    """Gradients of ``sum_{i in G_k} -log softmax_i`` with whole-batch denominators.

    Each group's loss touches every positive in the batch, so the K gradients
    are separate vector-Jacobian products over all rows.
    Returns ``(per_group_loss, per_group_grad)`` in group-label order.
    """
    _check_uni(batch)
    B = batch.realized_size
    K = groups.K
    if K == 0:
        return np.zeros(0), np.zeros((0, spec.num_params))
    z, tape = forward(params, spec, np.concatenate([batch.anchors, batch.positives]))
    u, v = _Normed(z[:B]), _Normed(z[B:])
    sims = u.hat @ v.hat.T
    losses, (dS,) = masked_xent([sims], np.ones((B, B), dtype=bool), tau)
    du_all = dS @ v.hat
    up = np.zeros((K, 2 * B, spec.output_dim))
    group_losses = np.empty(K)
    for k, members in enumerate(groups.groups):
        members = np.sort(np.asarray(members, dtype=np.int64))
        up[k, members] = du_all[members]
        up[k, B:] = dS[members].T @ u.hat[members]
        group_losses[k] = losses[members].sum()
    up[:, :B] = u.pull(up[:, :B])
    up[:, B:] = v.pull(up[:, B:])
    return group_losses, backward_batched(tape, up)


# -- pairwise similarity gradients (Logit-DP) ----------------------------------

def pairwise_similarity_grads(params, spec: EncoderSpec, batch: PairBatch, tau: float):
    """Per-pair gradients of every similarity plus the loss weights on them.

    Returns ``(loss, pair_grads, weights)`` where ``pair_grads[i*B + j]`` is
    the parameter gradient of ``s_ij`` and ``weights[i, j]`` is
    ``dL/ds_ij`` of the summed full-batch InfoNCE loss.
    """
    _check_uni(batch)
    B = batch.realized_size
    z, _ = forward(params, spec, np.concatenate([batch.anchors, batch.positives]))
    u, v = _Normed(z[:B]), _Normed(z[B:])
    sims = u.hat @ v.hat.T
    losses, (weights,) = masked_xent([sims], np.ones((B, B), dtype=bool), tau)
    ii, jj = np.divmod(np.arange(B * B), B)
    # Forward once per (i, j) on the two rows that s_ij touches.
    x_pair = np.empty((2 * B * B, spec.input_dim))
    x_pair[0::2] = batch.anchors[ii]
    x_pair[1::2] = batch.positives[jj]
    _, tape = forward(params, spec, x_pair)
    s = sims[ii, jj][:, None]
    du = (v.hat[jj] - s * u.hat[ii]) / np.where(u.ok, u.norms, 1.0)[ii][:, None]
    dv = (u.hat[ii] - s * v.hat[jj]) / np.where(v.ok, v.norms, 1.0)[jj][:, None]
    du[~u.ok[ii]] = 0.0
    dv[~v.ok[jj]] = 0.0
    up = np.empty((2 * B * B, spec.output_dim))
    up[0::2], up[1::2] = du, dv
    per_row = backward_per_example(tape, up)
    pair_grads = per_row[0::2] + per_row[1::2]
    return float(losses.sum()), pair_grads, weights


# -- dual-modal ----------------------------------------------------------------

def _dual_group_local(params1, params2, specs, batch, groups, tau, n_aug, aug_first, aug_second, step):
    spec1, spec2 = specs
    B = batch.realized_size
    mask = _group_mask(groups, B)
    x1 = [batch.anchors]
    x2 = [batch.positives]
    if n_aug:
        x1.extend(_augmented_rows(batch.anchors, aug_first, groups, n_aug, step))
        x2.extend(_augmented_rows(batch.positives, aug_second, groups, n_aug, step))
    z1, tape1 = forward(params1, spec1, np.concatenate(x1))
    z2, tape2 = forward(params2, spec2, np.concatenate(x2))
    if spec1.output_dim != spec2.output_dim:
        raise ParameterError("dual encoders must share the embedding dimension")
    a = [_Normed(z1[t * B:(t + 1) * B]) for t in range(len(x1))]
    b = [_Normed(z2[t * B:(t + 1) * B]) for t in range(len(x2))]
    u, v = a[0], b[0]
    # First direction: anchor i against positives j (and their augmentations).
    row_sims = [u.hat @ p.hat.T for p in b]
    row_loss, row_g = masked_xent(row_sims, mask, tau)
    # Second direction: positive j against anchors i (and their augmentations).
    col_sims = [v.hat @ p.hat.T for p in a]
    col_loss, col_g = masked_xent(col_sims, mask, tau)
    du = [sum(g @ p.hat for g, p in zip(row_g, b))] + [None] * (len(a) - 1)
    dv = [sum(g @ p.hat for g, p in zip(col_g, a))] + [None] * (len(b) - 1)
    du[0] = du[0] + col_g[0].T @ v.hat
    dv[0] = dv[0] + row_g[0].T @ u.hat
    for t in range(1, len(a)):
        du[t] = col_g[t].T @ v.hat
    for t in range(1, len(b)):
        dv[t] = row_g[t].T @ u.hat
    up1 = np.concatenate([p.pull(d) for p, d in zip(a, du)])
    up2 = np.concatenate([p.pull(d) for p, d in zip(b, dv)])
    rows1 = backward_per_example(tape1, up1)
    rows2 = backward_per_example(tape2, up2)
    losses = row_loss + col_loss
    grads_k, losses_k = [], []
    for members in groups.groups:
        members = np.sort(np.asarray(members, dtype=np.int64))
        r1 = np.concatenate([members + t * B for t in range(len(x1))])
        r2 = np.concatenate([members + t * B for t in range(len(x2))])
        grads_k.append(np.concatenate([_sum_rows(rows1, r1), _sum_rows(rows2, r2)]))
        losses_k.append(losses[members].sum())
    return np.asarray(losses_k), _stack(grads_k, spec1.num_params + spec2.num_params)


def group_infonce_dual(
    params1,
    params2,
    specs: tuple[EncoderSpec, EncoderSpec],
    batch: PairBatch,
    groups: GroupAssignment,
    tau: float,
    n_aug: int = 0,
    aug_first: AugmentOp | None = None,
    aug_second: AugmentOp | None = None,
    step: int = 0,
) -> GroupLossResult:
    """Symmetric two-encoder group InfoNCE; gradients over ``(theta1 || theta2)``.

    With ``n_aug > 0`` the first direction's denominators gain augmented
    second-modality items and the second direction's gain augmented
    first-modality items, both drawn from the same group.
    """
    if batch.modality is not Modality.DUAL:
        raise ParameterError("group_infonce_dual expects a dual-modal batch")
    identity = AugmentOp(AugmentKind.IDENTITY, 0.0)
    losses, grads = _dual_group_local(
        params1, params2, specs, batch, groups, tau, n_aug,
        aug_first or identity, aug_second or identity, step,
    )
    return GroupLossResult(losses, grads)
