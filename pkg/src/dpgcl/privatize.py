"""Gradient bounding strategies, Gaussian noise and the noisy update.

Noise convention: the Gaussian noise added to a bounded gradient sum has
standard deviation ``sensitivity * sigma``, where ``sigma`` is the accountant's
noise multiplier. For the group-negative family the sensitivity is ``2C``.
The baselines use their own sensitivities so that a shared ``sigma`` yields
the same privacy guarantee for every strategy:

==============  ==========================  ==============
strategy        noise sensitivity            update divisor
==============  ==========================  ==============
sample          (2B + 1) C                   B
batch           2 C                          B
group_clip      (2K + 1) C                   K
group_neg*      2 C                          K
logit_dp        (2 + 2 e^2) C                B
==============  ==========================  ==============
"""

from __future__ import annotations

import enum
import math
from collections import Counter
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from dpgcl.dataset import Modality, PairBatch
from dpgcl.errors import ParameterError
from dpgcl.grouping import GroupAssignment
from dpgcl.loss import (
    LossConfig,
    _dual_group_local,
    _uni_group_local,
    full_denominator_group_grads,
    pairwise_similarity_grads,
)
from dpgcl.rng import stream

LOGIT_DP_MAX_BATCH = 64


class Strategy(str, enum.Enum):
    SAMPLE = "sample"
    BATCH = "batch"
    GROUP_CLIP = "group_clip"
    GROUP_NEG = "group_neg"
    GROUP_NEG_AUG = "group_neg_aug"
    GROUP_NEG_DUAL = "group_neg_dual"
    LOGIT_DP = "logit_dp"


GROUP_NEG_FAMILY = (Strategy.GROUP_NEG, Strategy.GROUP_NEG_AUG, Strategy.GROUP_NEG_DUAL)


@dataclass(frozen=True)
class ClipStrategy:
    kind: Strategy
    C: float

    def __post_init__(self):
        object.__setattr__(self, "kind", Strategy(self.kind))
        if not self.C > 0:
            raise ParameterError(f"clipping norm must be positive, got {self.C}")


class BoundedGradient(NamedTuple):
    total: np.ndarray
    k_effective: int
    loss: float
    clip_fraction: float


@dataclass(frozen=True, eq=False)
class NoisySummary:
    clean_sum: np.ndarray
    noise: np.ndarray
    noisy_update: np.ndarray
    K: int
    snr: float


def clip(v: np.ndarray, C: float) -> np.ndarray:
    """Scales ``v`` into the L2 ball of radius ``C``; zero stays zero."""
    if not C > 0:
        raise ParameterError(f"clipping norm must be positive, got {C}")
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm == 0.0 or norm <= C:
        return v.copy()
    return v * (C / norm)


def _clip_and_sum(components: np.ndarray, C: float) -> tuple[np.ndarray, float]:
    total = np.zeros(components.shape[1])
    clipped = 0
    for row in components:
        if np.linalg.norm(row) > C:
            clipped += 1
        total = total + clip(row, C)
    frac = clipped / components.shape[0] if components.shape[0] else 0.0
    return total, frac


def _num_params(spec) -> int:
    if isinstance(spec, (tuple, list)):
        return sum(s.num_params for s in spec)
    return spec.num_params


def _check_modality(kind: Strategy, batch: PairBatch):
    dual = batch.modality is Modality.DUAL
    if dual != (kind is Strategy.GROUP_NEG_DUAL):
        raise ParameterError(f"strategy {kind.value} does not support {batch.modality.value}-modal batches")


def bounded_gradient(
    strategy: ClipStrategy,
    params,
    spec,
    batch: PairBatch,
    groups: GroupAssignment | None,
    loss_cfg: LossConfig,
    step: int = 0,
    counter: Counter | None = None,
) -> BoundedGradient:
    """Clipped gradient sum of one batch under ``strategy``.

    For the dual-modal strategy ``params`` and ``spec`` are pairs and the
    result is over ``(theta1 || theta2)``. ``groups`` is ignored by the
    strategies that do not group. ``counter`` (if given) accumulates
    ``pair_grad_evals`` for Logit-DP.
    """
    kind, C = strategy.kind, strategy.C
    _check_modality(kind, batch)
    B = batch.realized_size
    tau = loss_cfg.tau
    needs_groups = kind in GROUP_NEG_FAMILY or kind is Strategy.GROUP_CLIP
    if B == 0:
        return BoundedGradient(np.zeros(_num_params(spec)), 0 if needs_groups else 1, 0.0, 0.0)
    if needs_groups:
        if groups is None or groups.batch_size != B:
            raise ParameterError("grouping strategy needs an assignment covering the batch")
        groups = groups.canonical()

    if kind is Strategy.SAMPLE:
        singles = GroupAssignment(tuple((i,) for i in range(B)), 1)
        losses, comps = full_denominator_group_grads(params, spec, batch, singles, tau)
        total, frac = _clip_and_sum(comps, C)
        return BoundedGradient(total, 1, float(losses.sum()), frac)

    if kind is Strategy.BATCH:
        whole = GroupAssignment((tuple(range(B)),), B)
        _, losses, comps = _uni_group_local(params, spec, batch, whole, tau, 0, None, step)
        total, frac = _clip_and_sum(comps, C)
        return BoundedGradient(total, 1, float(losses.sum()), frac)

    if kind is Strategy.GROUP_CLIP:
        losses, comps = full_denominator_group_grads(params, spec, batch, groups, tau)
        total, frac = _clip_and_sum(comps, C)
        return BoundedGradient(total, groups.K, float(losses.sum()), frac)

    if kind is Strategy.GROUP_NEG:
        _, losses, comps = _uni_group_local(params, spec, batch, groups, tau, 0, None, step)
        total, frac = _clip_and_sum(comps, C)
        return BoundedGradient(total, groups.K, float(losses.sum()), frac)

    if kind is Strategy.GROUP_NEG_AUG:
        _, losses, comps = _uni_group_local(
            params, spec, batch, groups, tau, loss_cfg.n_aug, loss_cfg.augment, step
        )
        total, frac = _clip_and_sum(comps, C)
        return BoundedGradient(total, groups.K, float(losses.sum()), frac)

    if kind is Strategy.GROUP_NEG_DUAL:
        p1, p2 = params
        losses, comps = _dual_group_local(
            p1, p2, tuple(spec), batch, groups, tau, loss_cfg.n_aug,
            loss_cfg.augment_first, loss_cfg.augment, step,
        )
        total, frac = _clip_and_sum(comps, C)
        return BoundedGradient(total, groups.K, float(losses.sum()), frac)

    if kind is Strategy.LOGIT_DP:
        if B > LOGIT_DP_MAX_BATCH:
            raise ParameterError(
                f"logit_dp costs O(B^2) gradient evaluations; batches above {LOGIT_DP_MAX_BATCH} are rejected (got {B})"
            )
        loss, pair_grads, weights = pairwise_similarity_grads(params, spec, batch, tau)
        if counter is not None:
            counter["pair_grad_evals"] += pair_grads.shape[0]
        total = np.zeros(pair_grads.shape[1])
        clipped = 0
        for g, w in zip(pair_grads, weights.ravel()):
            if np.linalg.norm(g) > C:
                clipped += 1
            total = total + clip(g, C) * w
        return BoundedGradient(total, 1, loss, clipped / pair_grads.shape[0])

    raise ParameterError(f"unknown strategy {kind!r}")


def noise_sensitivity(kind: Strategy, B: int, K: int, C: float) -> float:
    """L2 sensitivity used to scale the noise of each strategy."""
    kind = Strategy(kind)
    if kind is Strategy.SAMPLE:
        return (2 * B + 1) * C
    if kind is Strategy.BATCH or kind in GROUP_NEG_FAMILY:
        return 2 * C
    if kind is Strategy.GROUP_CLIP:
        return (2 * K + 1) * C
    if kind is Strategy.LOGIT_DP:
        return (2 + 2 * math.e ** 2) * C
    raise ParameterError(f"unknown strategy {kind!r}")


def update_divisor(kind: Strategy, B: int, K: int) -> int:
    kind = Strategy(kind)
    if kind is Strategy.GROUP_CLIP or kind in GROUP_NEG_FAMILY:
        return max(K, 1)
    return max(B, 1)


def privatized_step(
    total: np.ndarray,
    K: int,
    C: float,
    sigma: float,
    seed: int,
    step: int,
    sensitivity: float | None = None,
) -> NoisySummary:
    """Adds ``N(0, (sensitivity * sigma)^2 I)`` and divides by ``K``.

    ``sensitivity`` defaults to ``2C``. The noise stream depends only on
    ``(seed, step)``.
    """
    if sigma < 0:
        raise ParameterError(f"sigma must be >= 0, got {sigma}")
    if K < 1:
        raise ParameterError(f"K must be >= 1, got {K}")
    total = np.asarray(total, dtype=np.float64)
    scale = (2.0 * C if sensitivity is None else sensitivity) * sigma
    draw = stream("noise", seed, step).standard_normal(total.shape[0])
    noise = scale * draw
    noise_norm = float(np.linalg.norm(noise))
    snr = math.inf if noise_norm == 0.0 else float(np.linalg.norm(total)) / noise_norm
    return NoisySummary(total, noise, (total + noise) / K, K, snr)


def gradient_snr(summary: NoisySummary) -> float:
    """``||clean_sum|| / ||noise||``; +inf when no noise was added."""
    noise_norm = float(np.linalg.norm(summary.noise))
    if noise_norm == 0.0:
        return math.inf
    return float(np.linalg.norm(summary.clean_sum)) / noise_norm
