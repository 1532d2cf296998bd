"""The private training loop.

Each step draws a Poisson batch, groups it, computes the strategy's bounded
gradient sum, adds calibrated Gaussian noise and hands the normalized noisy
sum to SGD or Adam as a pseudo-gradient. After the noise is added nothing
depends on the batch, so every parameter update is post-processing.

A batch that comes out empty still consumes a step: the update is pure noise.
Skipping it would reveal that the batch was empty.
"""

from __future__ import annotations

import csv
import dataclasses
import enum
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from dpgcl.accountant import PrivacySpec, certify
from dpgcl.dataset import Dataset, Modality, PairBatch, poisson_subsample
from dpgcl.encoder import EncoderSpec, init_params
from dpgcl.errors import ParameterError
from dpgcl.grouping import assign_groups
from dpgcl.loss import LossConfig
from dpgcl.privatize import (
    ClipStrategy,
    Strategy,
    bounded_gradient,
    noise_sensitivity,
    privatized_step,
    update_divisor,
)
from dpgcl.rng import stream

log = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "loss", "snr", "clip_fraction", "grad_norm", "noise_norm")


class Optimizer(str, enum.Enum):
    SGD = "sgd"
    ADAM = "adam"
    # Layer-wise adaptive scaling is accepted by name only.
    LARS = "lars"


@dataclass(frozen=True)
class TrainConfig:
    """Everything one training run needs.

    Attributes:
        strategy: Bounding strategy and clipping norm.
        loss_cfg: Temperature, group size and augmentation settings.
        specs: One encoder spec, or two for dual-modal runs.
        privacy: Certified privacy record. Must match ``(q, T, sigma)``
            unless ``nonprivate`` is set.
        nonprivate: Skips the certificate check (noise-free studies only).
    """

    strategy: ClipStrategy
    loss_cfg: LossConfig
    specs: tuple[EncoderSpec, ...]
    T: int = 100
    q: float = 0.05
    sigma: float = 1.0
    optimizer: Optimizer = Optimizer.ADAM
    lr: float = 1e-3
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    master_seed: int = 0
    privacy: PrivacySpec | None = None
    nonprivate: bool = False

    def __post_init__(self):
        object.__setattr__(self, "optimizer", Optimizer(self.optimizer))
        specs = (self.specs,) if isinstance(self.specs, EncoderSpec) else tuple(self.specs)
        object.__setattr__(self, "specs", specs)
        if not self.lr > 0:
            raise ParameterError(f"learning rate must be positive, got {self.lr}")
        if self.T < 0:
            raise ParameterError(f"T must be >= 0, got {self.T}")
        if not 0 < self.q <= 1:
            raise ParameterError(f"q must lie in (0, 1], got {self.q}")
        if self.sigma < 0:
            raise ParameterError(f"sigma must be >= 0, got {self.sigma}")
        b1, b2 = self.adam_betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1) or not self.adam_eps > 0:
            raise ParameterError("Adam needs betas in [0, 1) and eps > 0")
        if len(specs) not in (1, 2):
            raise ParameterError("expected one or two encoder specs")
        if (len(specs) == 2) != (self.strategy.kind is Strategy.GROUP_NEG_DUAL):
            raise ParameterError("two encoders go with the dual-modal strategy, one with the rest")

    @property
    def C(self) -> float:
        return self.strategy.C


@dataclass
class TrainState:
    step: int
    params: np.ndarray  # all encoders, concatenated
    m: np.ndarray
    v: np.ndarray
    metrics: list[dict] = field(default_factory=list)


@dataclass(frozen=True)
class TrainResult:
    params: list[np.ndarray]
    metrics: list[dict]
    loss_path: str


def loss_path(cfg: TrainConfig) -> str:
    """Name of the loss the strategy optimizes; logged once per run."""
    kind = cfg.strategy.kind
    if kind is Strategy.GROUP_NEG_AUG and cfg.loss_cfg.n_aug > 0:
        return "group_local+aug"
    if kind is Strategy.GROUP_NEG_DUAL:
        return "dual_group_local+aug" if cfg.loss_cfg.n_aug > 0 else "dual_group_local"
    if kind in (Strategy.GROUP_NEG, Strategy.GROUP_NEG_AUG):
        return "group_local"
    if kind is Strategy.LOGIT_DP:
        return "pairwise_similarity"
    return "full_batch"


def _split(flat: np.ndarray, specs: Sequence[EncoderSpec]) -> list[np.ndarray]:
    out, start = [], 0
    for s in specs:
        out.append(flat[start:start + s.num_params])
        start += s.num_params
    return out


def _model_args(flat, specs):
    parts = _split(flat, specs)
    if len(specs) == 1:
        return parts[0], specs[0]
    return tuple(parts), tuple(specs)


def init_state(cfg: TrainConfig) -> TrainState:
    params = np.concatenate([init_params(s) for s in cfg.specs])
    return TrainState(0, params, np.zeros_like(params), np.zeros_like(params))


def optimizer_step(state: TrainState, pseudo_grad: np.ndarray, cfg: TrainConfig) -> TrainState:
    """One SGD or Adam update using ``pseudo_grad`` in place of the gradient."""
    g = np.asarray(pseudo_grad, dtype=np.float64)
    if g.shape != state.params.shape:
        raise ParameterError(f"pseudo-gradient shape {g.shape} != params shape {state.params.shape}")
    if cfg.optimizer is Optimizer.SGD:
        return TrainState(state.step + 1, state.params - cfg.lr * g, state.m, state.v, state.metrics)
    if cfg.optimizer is Optimizer.LARS:
        raise NotImplementedError("LARS is not implemented; use sgd or adam")
    b1, b2 = cfg.adam_betas
    t = state.step + 1
    m = b1 * state.m + (1 - b1) * g
    v = b2 * state.v + (1 - b2) * g * g
    m_hat = m / (1 - b1 ** t)
    v_hat = v / (1 - b2 ** t)
    params = state.params - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    return TrainState(t, params, m, v, state.metrics)


def _loss_cfg_for_run(cfg: TrainConfig) -> LossConfig:
    # Fold the run seed into the augmentation streams so seeds differ.
    lc = cfg.loss_cfg

    def reseed(op):
        seed = int(stream("train/augment", cfg.master_seed, op.seed).integers(0, 2**31))
        return dataclasses.replace(op, seed=seed)

    return dataclasses.replace(lc, augment=reseed(lc.augment), augment_first=reseed(lc.augment_first))


def check_certificate(cfg: TrainConfig) -> None:
    """Refuses a run whose ``(q, T, sigma)`` the accountant did not certify."""
    if cfg.nonprivate:
        return
    p = cfg.privacy
    if p is None:
        raise ParameterError("no privacy record: calibrate sigma first or set nonprivate")
    if p.sigma is None or not math.isclose(p.sigma, cfg.sigma, rel_tol=0, abs_tol=1e-12):
        raise ParameterError(f"privacy record sigma {p.sigma} != configured sigma {cfg.sigma}")
    if p.q != cfg.q or p.steps != cfg.T:
        raise ParameterError(f"privacy record (q={p.q}, T={p.steps}) != run (q={cfg.q}, T={cfg.T})")
    if cfg.T and cfg.sigma > 0:
        eps, _ = certify(p.q, p.sigma, p.steps, p.delta, p.orders)
        if eps > p.epsilon:
            raise ParameterError(f"record claims epsilon={p.epsilon} but the accountant certifies {eps}")
    elif cfg.T:
        raise ParameterError("sigma = 0 gives no privacy; set nonprivate")


def _check_dataset(ds: Dataset, cfg: TrainConfig):
    dual = cfg.strategy.kind is Strategy.GROUP_NEG_DUAL
    if (ds.modality is Modality.DUAL) != dual:
        raise ParameterError(f"{cfg.strategy.kind.value} does not fit a {ds.modality.value}-modal dataset")
    if cfg.loss_cfg.modality is not ds.modality:
        raise ParameterError("loss config modality differs from the dataset's")
    if cfg.specs[0].input_dim != ds.d_x:
        raise ParameterError(f"encoder input {cfg.specs[0].input_dim} != feature dim {ds.d_x}")
    if dual and cfg.specs[1].input_dim != ds.d_x2:
        raise ParameterError(f"second encoder input {cfg.specs[1].input_dim} != feature dim {ds.d_x2}")


def train_step(state: TrainState, batch: PairBatch, cfg: TrainConfig, loss_cfg: LossConfig) -> TrainState:
    kind, C = cfg.strategy.kind, cfg.C
    t = state.step
    B = batch.realized_size
    groups = assign_groups(B, loss_cfg.S, cfg.master_seed, t)
    params, spec = _model_args(state.params, cfg.specs)
    bg = bounded_gradient(cfg.strategy, params, spec, batch, groups, loss_cfg, step=t)
    sens = noise_sensitivity(kind, B, bg.k_effective, C)
    divisor = update_divisor(kind, B, bg.k_effective)
    summary = privatized_step(bg.total, divisor, C, cfg.sigma, cfg.master_seed, t, sensitivity=sens)
    new = optimizer_step(state, summary.noisy_update, cfg)
    new.metrics.append({
        "step": t,
        "loss": bg.loss,
        "snr": summary.snr,
        "clip_fraction": bg.clip_fraction,
        "grad_norm": float(np.linalg.norm(bg.total)),
        "noise_norm": float(np.linalg.norm(summary.noise)),
    })
    return new


def train(ds: Dataset, cfg: TrainConfig) -> TrainResult:
    """Runs exactly ``cfg.T`` steps and returns final parameters and metrics."""
    _check_dataset(ds, cfg)
    check_certificate(cfg)
    path = loss_path(cfg)
    log.info("loss path: %s", path)
    loss_cfg = _loss_cfg_for_run(cfg)
    state = init_state(cfg)
    for t in range(cfg.T):
        batch = poisson_subsample(ds, cfg.q, cfg.master_seed, t)
        state = train_step(state, batch, cfg, loss_cfg)
    return TrainResult(_split(state.params, cfg.specs), state.metrics, path)


def first_step_snr(ds: Dataset, cfg: TrainConfig, B: int) -> float:
    """Gradient SNR of the first update on a fixed-size batch at initialization.

    The batch is ``B`` distinct pairs drawn uniformly from ``ds``.
    """
    _check_dataset(ds, cfg)
    if not 1 <= B <= ds.n:
        raise ParameterError(f"B must lie in [1, {ds.n}], got {B}")
    idx = np.sort(stream("snr/batch", cfg.master_seed).choice(ds.n, size=B, replace=False))
    batch = ds.take(idx)
    loss_cfg = _loss_cfg_for_run(cfg)
    state = init_state(cfg)
    groups = assign_groups(B, loss_cfg.S, cfg.master_seed, 0)
    params, spec = _model_args(state.params, cfg.specs)
    bg = bounded_gradient(cfg.strategy, params, spec, batch, groups, loss_cfg)
    sens = noise_sensitivity(cfg.strategy.kind, B, bg.k_effective, cfg.C)
    summary = privatized_step(bg.total, 1, cfg.C, cfg.sigma, cfg.master_seed, 0, sensitivity=sens)
    return summary.snr


def write_metrics(metrics: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for row in metrics:
            w.writerow([row["step"]] + [repr(float(row[k])) for k in METRIC_FIELDS[1:]])
