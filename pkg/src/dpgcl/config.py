"""Flat ``key = value`` run configuration.

Blank lines and ``#`` comments are ignored. Every key must appear in
``SCHEMA``; values are parsed and validated before any command runs.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable

from dpgcl.errors import ConfigError

_REQUIRED = object()


def _bool(s: str) -> bool:
    low = s.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s: str) -> tuple[int, ...]:
    s = s.strip()
    if s in ("", "-"):
        return ()
    return tuple(int(p) for p in s.split(","))


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(p) for p in s.split(","))


def _strs(s: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in s.split(",") if p.strip())


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    doc: str


SCHEMA: dict[str, Key] = {
    "run_id": Key(str, "run", "name used for output files"),
    # dataset
    "modality": Key(str, "uni", "uni or dual"),
    "num_classes": Key(int, 10, "number of latent classes"),
    "per_class": Key(int, _REQUIRED, "training pairs per class"),
    "test_per_class": Key(int, 0, "held-out pairs per class"),
    "d_x": Key(int, _REQUIRED, "first-modality feature dimension"),
    "d_x2": Key(int, 0, "second-modality feature dimension (dual only)"),
    "separation": Key(float, 3.0, "norm of the class means"),
    "noise_std": Key(float, 1.0, "within-class noise"),
    "data_seed": Key(int, 0, "dataset generation seed"),
    "data_path": Key(str, "", "read this dataset file instead of generating"),
    # encoder
    "hidden": Key(_ints, (32,), "hidden widths, comma separated (- for none)"),
    "d_z": Key(int, 8, "embedding dimension"),
    "activation": Key(str, "tanh", "tanh or relu"),
    # loss and augmentation
    "tau": Key(float, 0.7071067811865476, "softmax temperature"),
    "S": Key(int, 4, "group size"),
    "n_aug": Key(int, 0, "augmented copies per in-group positive"),
    "augment": Key(str, "", "augmentation of positives: mask, jitter, swap, identity (empty: mask, swap if dual)"),
    "augment_strength": Key(float, 0.2, "augmentation strength"),
    "augment_first": Key(str, "mask", "dual only: augmentation of the first modality"),
    "augment_first_strength": Key(float, 0.2, "dual only: its strength"),
    # privatize
    "strategy": Key(str, "group_neg_aug", "bounding strategy"),
    "C": Key(float, 1.0, "clipping norm"),
    # accountant
    "epsilon": Key(float, 0.0, "target epsilon (0: derive from sigma)"),
    "delta": Key(float, 0.0, "target delta (0: 1/(N ln N))"),
    "N": Key(int, 0, "dataset size for the default delta in calibrate"),
    "q": Key(float, 0.02, "Poisson sampling ratio"),
    "T": Key(int, 100, "training steps"),
    "sigma": Key(float, -1.0, "noise multiplier (negative: calibrate)"),
    "nonprivate": Key(_bool, False, "allow training without a certificate"),
    # trainer
    "optimizer": Key(str, "adam", "sgd or adam"),
    "lr": Key(float, 1e-3, "learning rate"),
    "adam_beta1": Key(float, 0.9, "Adam first-moment decay"),
    "adam_beta2": Key(float, 0.999, "Adam second-moment decay"),
    "adam_eps": Key(float, 1e-8, "Adam epsilon"),
    # eval
    "knn_k": Key(int, 3, "neighbours for kNN accuracy"),
    "probe_epochs": Key(int, 500, "linear-probe epochs"),
    "probe_lr": Key(float, 0.1, "linear-probe learning rate"),
    "retrieval_k": Key(int, 10, "top-K for retrieval"),
    "checkpoint": Key(str, "", "checkpoint to evaluate (default: <out>/<run_id>.ckpt)"),
    # sensitivity-check
    "sens_strategies": Key(_strs, ("all",), "strategies to sweep, or all"),
    "sens_B": Key(_ints, (4, 8, 16), "batch sizes"),
    "sens_S": Key(_ints, (1, 2, 4, 8), "group sizes"),
    "sens_C": Key(_floats, (0.1, 1.0), "clipping norms"),
    "sens_trials": Key(int, 20, "trials per cell (each run random and adversarial)"),
    # snr
    "snr_B": Key(int, 256, "fixed batch size"),
    "snr_S": Key(_ints, (2, 4, 8, 16, 32), "group sizes"),
    "snr_seeds": Key(int, 20, "seeds averaged per row"),
}


class RunConfig:
    """Validated key/value settings with schema defaults."""

    def __init__(self, values: dict[str, Any] | None = None, present: Iterable[str] = ()):
        self._values = dict(values or {})
        self._present = set(present)

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "RunConfig":
        values: dict[str, Any] = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
            key, value = (p.strip() for p in line.split("=", 1))
            if key not in SCHEMA:
                raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
            if key in values:
                raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
            try:
                values[key] = SCHEMA[key].parse(value)
            except ValueError as exc:
                raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
        return cls(values, values.keys())

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_text(text, str(path))

    def require(self, *keys: str) -> None:
        for k in keys:
            if k not in self._values and SCHEMA[k].default is _REQUIRED:
                raise ConfigError(f"missing required key {k!r}")

    def with_values(self, **overrides) -> "RunConfig":
        values = dict(self._values)
        values.update(overrides)
        return RunConfig(values, self._present | set(overrides))

    def has(self, key: str) -> bool:
        return key in self._present

    def __getitem__(self, key: str) -> Any:
        if key not in SCHEMA:
            raise KeyError(key)
        if key in self._values:
            return self._values[key]
        default = SCHEMA[key].default
        if default is _REQUIRED:
            raise ConfigError(f"missing required key {key!r}")
        return default


def reference() -> str:
    """One line per key: name, default and description."""
    lines = []
    for name, key in SCHEMA.items():
        default = "(required)" if key.default is _REQUIRED else repr(key.default)
        lines.append(f"{name:24s} {default:24s} {key.doc}")
    return "\n".join(lines)
