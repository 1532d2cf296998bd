"""Empirical checks of the gradient-sensitivity bounds.

A trial draws a batch D of B pairs plus one extra pair, groups D at random and
extends that grouping to D' = D + {extra} so that every shared pair keeps its
group. Both batches get the same parameters; the trial records
``||g(D) - g(D')||_2`` next to the strategy's theoretical bound.

Adversarial trials shrink every parameter by ``ADVERSARIAL_SCALE``. Cosine
similarity is scale invariant, so shrinking the encoder inflates the
similarity gradients and every clipped component saturates at norm C.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from dpgcl.augment import AugmentKind, AugmentOp
from dpgcl.dataset import Modality, PairBatch
from dpgcl.encoder import EncoderSpec, init_params
from dpgcl.errors import ParameterError, SensitivityViolation
from dpgcl.grouping import GroupAssignment, assign_groups, couple_neighbor
from dpgcl.loss import LossConfig
from dpgcl.privatize import GROUP_NEG_FAMILY, ClipStrategy, Strategy, bounded_gradient
from dpgcl.rng import stream

TOLERANCE = 1e-9
ADVERSARIAL_SCALE = 1e-3
SMALL_CAP = 16  # sample-level and logit-dp trials
LARGE_CAP = 64

ALL_STRATEGIES = tuple(Strategy)


def theoretical_bound(strategy: Strategy, B: int, K: int, C: float) -> float:
    """Global L2 sensitivity of one bounded gradient sum.

    The Logit-DP value assumes temperature 1 (similarity logits in [-1, 1]).
    """
    kind = Strategy(strategy)
    if kind is Strategy.SAMPLE:
        return (2 * B + 1) * C
    if kind is Strategy.BATCH or kind in GROUP_NEG_FAMILY:
        return 2 * C
    if kind is Strategy.GROUP_CLIP:
        return (2 * K + 1) * C
    if kind is Strategy.LOGIT_DP:
        e2 = math.e ** 2
        return 2 * (1 + (B - 2) * e2 / (e2 + B - 1)) * C
    raise ParameterError(f"unknown strategy {strategy!r}")


@dataclass(frozen=True)
class TrialSeeds:
    encoder: int = 0
    data: int = 0
    grouping: int = 0


@dataclass(frozen=True)
class SensitivityTrial:
    strategy: Strategy
    B: int
    S: int
    C: float
    K: int
    K_neighbor: int
    seeds: TrialSeeds
    grouping: GroupAssignment
    neighbor_grouping: GroupAssignment
    adversarial: bool
    measured: float
    bound: float

    @property
    def ratio(self) -> float:
        return self.measured / self.bound


@dataclass(frozen=True)
class OracleSetup:
    """Encoder shapes and loss settings shared by all trials."""

    d_x: int = 4
    d_x2: int = 5
    hidden: tuple[int, ...] = (8,)
    d_z: int = 4
    tau: float = 1.0
    n_aug: int = 1
    augment: AugmentOp = field(default_factory=lambda: AugmentOp(AugmentKind.GAUSSIAN_JITTER, 0.5, 11))
    augment_first: AugmentOp = field(default_factory=lambda: AugmentOp(AugmentKind.CONTIGUOUS_MASK, 0.25, 12))


def _cap(kind: Strategy) -> int:
    return SMALL_CAP if kind in (Strategy.SAMPLE, Strategy.LOGIT_DP) else LARGE_CAP


def _bound_batch_size(kind: Strategy, B: int) -> int:
    # Logit-DP's bound grows with the batch it is evaluated on; the larger
    # neighbour has B + 1 pairs.
    return B + 1 if kind is Strategy.LOGIT_DP else B


def _check_coupling(g: GroupAssignment, g2: GroupAssignment, B: int):
    for k, members in enumerate(g.groups):
        extended = g2.groups[k]
        if extended[:len(members)] != members or any(i != B for i in extended[len(members):]):
            raise SensitivityViolation(f"coupling moved shared indices in group {k}")


def run_trial(
    strategy: Strategy,
    B: int,
    S: int,
    C: float,
    seeds: TrialSeeds,
    adversarial: bool = False,
    duplicate: bool = False,
    setup: OracleSetup | None = None,
    groups: GroupAssignment | None = None,
) -> SensitivityTrial:
    """One coupled-neighbour measurement of ``||g(D) - g(D')||_2``.

    ``duplicate`` makes the extra pair a copy of pair 0. ``groups`` overrides
    the random grouping of D (it must cover ``B`` positions).
    """
    kind = Strategy(strategy)
    setup = setup or OracleSetup()
    if B < 1 or S < 1:
        raise ParameterError(f"need B >= 1 and S >= 1, got B={B}, S={S}")
    if B > _cap(kind):
        raise ParameterError(f"{kind.value} trials are capped at B <= {_cap(kind)}, got {B}")
    if kind is Strategy.LOGIT_DP and setup.tau != 1.0:
        raise ParameterError("the Logit-DP bound is stated for temperature 1")
    dual = kind is Strategy.GROUP_NEG_DUAL
    d_x2 = setup.d_x2 if dual else setup.d_x

    rng = stream("oracle/data", seeds.data)
    anchors = rng.standard_normal((B + 1, setup.d_x))
    positives = rng.standard_normal((B + 1, d_x2))
    if duplicate:
        anchors[B], positives[B] = anchors[0], positives[0]
    modality = Modality.DUAL if dual else Modality.UNI
    full = PairBatch.from_arrays(anchors, positives, modality=modality)
    small = full.subset(range(B))

    g = groups if groups is not None else assign_groups(B, S, seeds.grouping, 0)
    g2 = couple_neighbor(g, B, S)
    _check_coupling(g, g2, B)

    spec1 = EncoderSpec(setup.d_x, setup.hidden, setup.d_z, "tanh", seeds.encoder)
    params = init_params(spec1)
    if dual:
        spec2 = EncoderSpec(d_x2, setup.hidden, setup.d_z, "tanh", seeds.encoder + 7919)
        params2 = init_params(spec2)
        if adversarial:
            params, params2 = params * ADVERSARIAL_SCALE, params2 * ADVERSARIAL_SCALE
        params, spec = (params, params2), (spec1, spec2)
    else:
        if adversarial:
            params = params * ADVERSARIAL_SCALE
        spec = spec1

    n_aug = setup.n_aug if kind in (Strategy.GROUP_NEG_AUG, Strategy.GROUP_NEG_DUAL) else 0
    loss_cfg = LossConfig(setup.tau, S, n_aug, modality, setup.augment, setup.augment_first)
    strat = ClipStrategy(kind, C)
    a = bounded_gradient(strat, params, spec, small, g, loss_cfg).total
    b = bounded_gradient(strat, params, spec, full, g2, loss_cfg).total
    measured = float(np.linalg.norm(a - b))
    bound = theoretical_bound(kind, _bound_batch_size(kind, B), g.K, C)
    return SensitivityTrial(kind, B, S, C, g.K, g2.K, seeds, g, g2, adversarial, measured, bound)


@dataclass(frozen=True)
class CellReport:
    strategy: Strategy
    B: int
    S: int
    C: float
    K: int
    trials: int
    max_measured: float
    bound: float

    @property
    def ratio(self) -> float:
        return self.max_measured / self.bound


def _trial_seeds(kind: Strategy, B: int, S: int, C: float, t: int, base_seed: int) -> TrialSeeds:
    key = stream("oracle/seeds", base_seed, list(Strategy).index(kind), B, S, round(C * 1e6), t)
    e, d, g = (int(x) for x in key.integers(0, 2**31, size=3))
    return TrialSeeds(e, d, g)


def sweep(
    strategy: Strategy,
    grid: Iterable[tuple[int, int, float]],
    trials_per_cell: int,
    base_seed: int = 0,
    setup: OracleSetup | None = None,
    adversarial: Sequence[bool] = (False, True),
) -> list[CellReport]:
    """Runs every cell of ``grid`` and fails hard on any bound violation.

    Each trial is measured once per entry of ``adversarial`` (random and
    shrunken encoder by default).
    """
    kind = Strategy(strategy)
    reports = []
    for B, S, C in grid:
        worst = 0.0
        bound = None
        for t in range(trials_per_cell):
            seeds = _trial_seeds(kind, B, S, C, t, base_seed)
            for adv in adversarial:
                trial = run_trial(kind, B, S, C, seeds, adversarial=adv, setup=setup)
                bound = trial.bound
                if trial.measured > trial.bound + TOLERANCE:
                    raise SensitivityViolation(
                        f"{kind.value} B={B} S={S} C={C}: measured {trial.measured!r} exceeds "
                        f"bound {trial.bound!r} (seeds={seeds}, adversarial={adv})"
                    )
                worst = max(worst, trial.measured)
        K = math.ceil(B / S)
        if bound is None:
            bound = theoretical_bound(kind, _bound_batch_size(kind, B), K, C)
        reports.append(CellReport(kind, B, S, C, K, trials_per_cell, worst, bound))
    return reports


def tightness_witness(C: float = 1.0, seed: int = 0, setup: OracleSetup | None = None) -> SensitivityTrial:
    """A group-negative trial where the extra pair joins a singleton group.

    The singleton's loss is constant, so on D its clipped gradient is zero;
    on D' the two-member group's gradient saturates at norm C. The measured
    change is therefore C, half of the 2C bound.
    """
    groups = GroupAssignment(((0, 1), (2,)), 2)
    return run_trial(Strategy.GROUP_NEG, 3, 2, C, TrialSeeds(seed, seed, seed), adversarial=True, setup=setup, groups=groups)


DEFAULT_GRID = tuple((B, S, C) for B in (4, 8, 16) for S in (1, 2, 4, 8) for C in (0.1, 1.0))
