"""Command-line entry point: ``dpgcl <command> --config FILE [--seed N] [--out DIR]``.

Exit codes: 0 success, 2 configuration error, 3 infeasible calibration,
4 sensitivity bound breach. ``DPGCL_THREADS`` caps the worker processes used
by ``sensitivity-check`` and ``snr`` (unset: 1, 0: one per CPU).
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from dpgcl.accountant import PrivacySpec, calibrate_sigma, certify, default_delta
from dpgcl.augment import AugmentOp
from dpgcl.config import RunConfig, reference
from dpgcl.dataset import (
    Dataset,
    Modality,
    generate_dualmodal,
    generate_unimodal,
    load_dataset,
    save_dataset,
    split_per_class,
)
from dpgcl.encoder import EncoderSpec, load_checkpoint, save_checkpoint
from dpgcl.errors import CalibrationError, ConfigError, ParameterError, SensitivityViolation
from dpgcl.evaluation import bidirectional_retrieval, embed, knn_accuracy, linear_probe
from dpgcl.loss import LossConfig
from dpgcl.privatize import ClipStrategy, Strategy
from dpgcl.sensitivity import OracleSetup, sweep
from dpgcl.trainer import TrainConfig, first_step_snr, train, write_metrics

EXIT_CONFIG, EXIT_CALIBRATION, EXIT_BREACH = 2, 3, 4


# -- shared builders ------------------------------------------------------------

def _workers() -> int:
    raw = os.environ.get("DPGCL_THREADS", "1").strip() or "1"
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"DPGCL_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise ConfigError("DPGCL_THREADS must be >= 0")
    return n or (os.cpu_count() or 1)


def _pmap(fn, items):
    items = list(items)
    n = min(_workers(), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def _modality(cfg: RunConfig) -> Modality:
    try:
        return Modality(cfg["modality"])
    except ValueError:
        raise ConfigError(f"modality must be uni or dual, got {cfg['modality']!r}") from None


def _datasets(cfg: RunConfig) -> tuple[Dataset, Dataset | None]:
    """Training set and (if ``test_per_class`` > 0) a held-out set."""
    n_test = cfg["test_per_class"]
    if cfg["data_path"]:
        ds = load_dataset(cfg["data_path"])
        if n_test:
            cfg.require("per_class")
            return split_per_class(ds, cfg["per_class"])
        return ds, None
    cfg.require("per_class", "d_x")
    per_class = cfg["per_class"] + n_test
    if _modality(cfg) is Modality.DUAL:
        if cfg["d_x2"] < 2:
            raise ConfigError("dual-modal data needs d_x2 >= 2")
        ds = generate_dualmodal(cfg["num_classes"], per_class, cfg["d_x"], cfg["d_x2"],
                                cfg["separation"], cfg["noise_std"], cfg["data_seed"])
    else:
        ds = generate_unimodal(cfg["num_classes"], per_class, cfg["d_x"],
                               cfg["separation"], cfg["noise_std"], cfg["data_seed"])
    if n_test:
        return split_per_class(ds, cfg["per_class"])
    return ds, None


def _specs(cfg: RunConfig, ds: Dataset, seed: int) -> tuple[EncoderSpec, ...]:
    first = EncoderSpec(ds.d_x, cfg["hidden"], cfg["d_z"], cfg["activation"], 2 * seed)
    if ds.modality is Modality.DUAL:
        return first, EncoderSpec(ds.d_x2, cfg["hidden"], cfg["d_z"], cfg["activation"], 2 * seed + 1)
    return (first,)


def _loss_cfg(cfg: RunConfig, modality: Modality) -> LossConfig:
    kind = cfg["augment"] or ("swap" if modality is Modality.DUAL else "mask")
    return LossConfig(
        tau=cfg["tau"], S=cfg["S"], n_aug=cfg["n_aug"], modality=modality,
        augment=AugmentOp(kind, cfg["augment_strength"]),
        augment_first=AugmentOp(cfg["augment_first"], cfg["augment_first_strength"]),
    )


def _strategy(cfg: RunConfig, name: str | None = None) -> ClipStrategy:
    name = name or cfg["strategy"]
    try:
        return ClipStrategy(Strategy(name), cfg["C"])
    except ValueError:
        valid = ", ".join(s.value for s in Strategy)
        raise ConfigError(f"unknown strategy {name!r} (expected one of {valid})") from None


def _delta(cfg: RunConfig, N: int) -> float:
    return cfg["delta"] if cfg["delta"] > 0 else default_delta(N)


def _privacy(cfg: RunConfig, N: int) -> tuple[float, PrivacySpec | None]:
    """Noise multiplier and privacy record for a run on ``N`` pairs."""
    q, T, sigma = cfg["q"], cfg["T"], cfg["sigma"]
    delta = _delta(cfg, N)
    if sigma < 0:
        if not cfg["epsilon"] > 0:
            raise ConfigError("set epsilon > 0 to calibrate sigma, or give sigma")
        sigma = calibrate_sigma(PrivacySpec(cfg["epsilon"], delta, q, T))
    elif sigma == 0:
        if not cfg["nonprivate"]:
            raise ConfigError("sigma = 0 requires nonprivate = true")
        return 0.0, None
    eps, _ = certify(q, sigma, T, delta)
    if cfg["epsilon"] > 0 and eps > cfg["epsilon"]:
        raise ConfigError(f"sigma={sigma} certifies epsilon={eps:.6g}, above the target {cfg['epsilon']}")
    target = cfg["epsilon"] if cfg["epsilon"] > 0 else max(eps, 1e-300)
    return sigma, PrivacySpec(target, delta, q, T, sigma)


def _train_config(cfg: RunConfig, ds: Dataset, seed: int, strategy=None) -> TrainConfig:
    sigma, record = _privacy(cfg, ds.n)
    return TrainConfig(
        strategy=strategy or _strategy(cfg),
        loss_cfg=_loss_cfg(cfg, ds.modality),
        specs=_specs(cfg, ds, seed),
        T=cfg["T"], q=cfg["q"], sigma=sigma,
        optimizer=cfg["optimizer"], lr=cfg["lr"],
        adam_betas=(cfg["adam_beta1"], cfg["adam_beta2"]), adam_eps=cfg["adam_eps"],
        master_seed=seed, privacy=record, nonprivate=record is None,
    )


def _csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _emit(text: str, out: Path, name: str) -> None:
    sys.stdout.write(text)
    (out / name).write_text(text)


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


# -- commands -------------------------------------------------------------------

def cmd_gen(cfg: RunConfig, seed: int, out: Path) -> int:
    ds, test = _datasets(cfg)
    run = cfg["run_id"]
    save_dataset(ds, out / f"{run}.data.txt")
    if test is not None:
        save_dataset(test, out / f"{run}.test.txt")
    counts = np.bincount(ds.labels, minlength=ds.num_classes)
    print(f"n={ds.n} d_x={ds.d_x} d_x2={ds.d_x2} modality={ds.modality.value} classes={ds.num_classes}")
    print("class_counts=" + ",".join(str(c) for c in counts))
    if test is not None:
        print(f"test_n={test.n}")
    return 0


def cmd_calibrate(cfg: RunConfig, seed: int, out: Path) -> int:
    if not cfg["epsilon"] > 0:
        raise ConfigError("missing required key 'epsilon'")
    if cfg["delta"] > 0:
        delta = cfg["delta"]
    else:
        N = cfg["N"] or cfg["num_classes"] * cfg["per_class"]
        delta = default_delta(N)
    spec = PrivacySpec(cfg["epsilon"], delta, cfg["q"], cfg["T"])
    sigma = calibrate_sigma(spec)
    eps, alpha = certify(spec.q, sigma, spec.steps, delta)
    text = _csv([[_fmt(sigma), alpha, _fmt(eps), _fmt(delta), _fmt(spec.q), spec.steps]],
                ["sigma", "best_alpha", "epsilon", "delta", "q", "T"])
    _emit(text, out, f"{cfg['run_id']}.calibration.csv")
    return 0


def cmd_train(cfg: RunConfig, seed: int, out: Path) -> int:
    ds, _ = _datasets(cfg)
    tc = _train_config(cfg, ds, seed)
    run = cfg["run_id"]
    result = train(ds, tc)
    save_checkpoint(out / f"{run}.ckpt", result.params, tc.specs)
    write_metrics(result.metrics, out / f"{run}.metrics.csv")
    eps = tc.privacy.epsilon if tc.privacy else float("inf")
    text = _csv([[run, result.loss_path, _fmt(tc.sigma), _fmt(eps), tc.T, _fmt(tc.q), seed]],
                ["run_id", "loss_path", "sigma", "epsilon", "T", "q", "seed"])
    _emit(text, out, f"{run}.summary.csv")
    return 0


def cmd_eval(cfg: RunConfig, seed: int, out: Path) -> int:
    ds, test = _datasets(cfg)
    if test is None:
        raise ConfigError("eval needs held-out data: set test_per_class > 0")
    run = cfg["run_id"]
    path = Path(cfg["checkpoint"]) if cfg["checkpoint"] else out / f"{run}.ckpt"
    try:
        params, specs = load_checkpoint(path)
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc}") from None
    k = cfg["knn_k"]
    tr = embed(params[0], specs[0], ds.anchors, ds.labels)
    te = embed(params[0], specs[0], test.anchors, test.labels)
    rows = [
        ["knn_accuracy", _fmt(knn_accuracy(tr, te, k)), k, seed],
        ["linear_probe", _fmt(linear_probe(tr, te, cfg["probe_epochs"], cfg["probe_lr"])), "", seed],
    ]
    if ds.modality is Modality.DUAL:
        if len(specs) != 2:
            raise ConfigError("dual-modal evaluation needs a two-encoder checkpoint")
        z2 = embed(params[1], specs[1], test.positives).embeddings
        K = min(cfg["retrieval_k"], test.n)
        fwd, bwd = bidirectional_retrieval(te.embeddings, z2, K)
        rows += [["retrieval_first_to_second", _fmt(fwd), K, seed],
                 ["retrieval_second_to_first", _fmt(bwd), K, seed]]
    _emit(_csv(rows, ["metric", "value", "k", "seed"]), out, f"{run}.eval.csv")
    return 0


def _sens_cell(args):
    kind, B, S, C, trials, seed = args
    return sweep(kind, [(B, S, C)], trials, base_seed=seed, setup=OracleSetup())[0]


def cmd_sensitivity(cfg: RunConfig, seed: int, out: Path) -> int:
    names = cfg["sens_strategies"]
    kinds = list(Strategy) if names == ("all",) else [_strategy(cfg, n).kind for n in names]
    cells = [(k, B, S, C, cfg["sens_trials"], seed)
             for k in kinds for B in cfg["sens_B"] for S in cfg["sens_S"] for C in cfg["sens_C"]]
    reports = _pmap(_sens_cell, cells)
    rows = [[r.strategy.value, r.B, r.S, _fmt(r.C), r.K, _fmt(r.max_measured), _fmt(r.bound), _fmt(r.ratio)]
            for r in reports]
    _emit(_csv(rows, ["strategy", "B", "S", "C", "K", "max_measured", "bound", "ratio"]),
          out, f"{cfg['run_id']}.sensitivity.csv")
    return 0


def _snr_one(args):
    cfg, s = args
    ds, _ = _datasets(cfg)
    return first_step_snr(ds, _train_config(cfg, ds, s), cfg["snr_B"])


def cmd_snr(cfg: RunConfig, seed: int, out: Path) -> int:
    ds, _ = _datasets(cfg)
    if cfg["snr_B"] > ds.n:
        raise ConfigError(f"snr_B={cfg['snr_B']} exceeds the dataset size {ds.n}")
    n_seeds = cfg["snr_seeds"]
    jobs = [(cfg.with_values(S=S), seed + s) for S in cfg["snr_S"] for s in range(n_seeds)]
    values = _pmap(_snr_one, jobs)
    rows = []
    for i, S in enumerate(cfg["snr_S"]):
        chunk = values[i * n_seeds:(i + 1) * n_seeds]
        rows.append([S, cfg["snr_B"], cfg["n_aug"], cfg["strategy"], _fmt(np.mean(chunk)), n_seeds])
    _emit(_csv(rows, ["S", "B", "n_aug", "strategy", "mean_snr", "seeds"]), out, f"{cfg['run_id']}.snr.csv")
    return 0


COMMANDS = {
    "gen": cmd_gen,
    "calibrate": cmd_calibrate,
    "train": cmd_train,
    "eval": cmd_eval,
    "sensitivity-check": cmd_sensitivity,
    "snr": cmd_snr,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dpgcl", description=__doc__.split("\n\n")[0])
    p.add_argument("command", choices=[*COMMANDS, "keys"], help="what to run ('keys' lists config keys)")
    p.add_argument("--config", type=Path, help="flat key = value config file")
    p.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory (default ./out)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    if args.command == "keys":
        print(reference())
        return 0
    try:
        if args.seed < 0:
            raise ConfigError(f"--seed must be >= 0, got {args.seed}")
        if args.config is None:
            raise ConfigError("--config is required")
        text = args.config.read_text() if args.config.is_file() else None
        if text is None:
            raise ConfigError(f"cannot read config {args.config}")
        cfg = RunConfig.from_text(text, str(args.config))
        args.out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, args.seed, args.out)
    except (ConfigError, ParameterError) as exc:
        print(f"dpgcl: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CalibrationError as exc:
        print(f"dpgcl: calibration failed: {exc}", file=sys.stderr)
        return EXIT_CALIBRATION
    except SensitivityViolation as exc:
        print(f"dpgcl: sensitivity bound breached: {exc}", file=sys.stderr)
        return EXIT_BREACH


if __name__ == "__main__":
    sys.exit(main())
