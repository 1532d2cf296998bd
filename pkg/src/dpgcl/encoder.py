"""Multilayer-perceptron encoder with hand-written backpropagation.

Parameters live in one flat float64 vector; ``EncoderSpec.layout()`` says
which contiguous span holds which weight matrix or bias. The backward pass
comes in three flavours sharing one tape format:

* ``backward``: the usual summed vector-Jacobian product.
* ``backward_batched``: K independent upstream gradients over the same rows,
  giving K parameter gradients (one per group for full-batch losses).
* ``backward_per_example``: one parameter gradient per input row.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from dpgcl.errors import ParameterError, UsageError
from dpgcl.rng import stream

NORM_EPS = 1e-12


class Activation(str, enum.Enum):
    TANH = "tanh"
    RELU = "relu"


@dataclass(frozen=True)
class Span:
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return math.prod(self.shape)


@dataclass(frozen=True)
class EncoderSpec:
    input_dim: int
    hidden_dims: tuple[int, ...] = ()
    output_dim: int = 8
    activation: Activation = Activation.TANH
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        object.__setattr__(self, "activation", Activation(self.activation))
        for d in (self.input_dim, *self.hidden_dims, self.output_dim):
            if d < 1:
                raise ParameterError(f"encoder dimensions must be >= 1, got {d}")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.output_dim)

    @property
    def num_layers(self) -> int:
        return len(self.dims) - 1

    def layout(self) -> list[Span]:
        spans, offset = [], 0
        for layer, (fan_in, fan_out) in enumerate(zip(self.dims[:-1], self.dims[1:])):
            spans.append(Span(f"layer{layer}.weight", (fan_in, fan_out), offset))
            offset += fan_in * fan_out
            spans.append(Span(f"layer{layer}.bias", (fan_out,), offset))
            offset += fan_out
        return spans

    @property
    def num_params(self) -> int:
        return sum(s.size for s in self.layout())


def init_params(spec: EncoderSpec) -> np.ndarray:
    """He-style init: weights ~ N(0, 2/fan_in), zero biases."""
    rng = stream("encoder/init", spec.init_seed)
    params = np.zeros(spec.num_params)
    for span in spec.layout():
        if span.name.endswith(".weight"):
            fan_in = span.shape[0]
            block = rng.standard_normal(span.shape) * math.sqrt(2.0 / fan_in)
            params[span.offset:span.offset + span.size] = block.ravel()
    return params


def unpack(params: np.ndarray, spec: EncoderSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    """Views ``(W, b)`` per layer into the flat vector."""
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (spec.num_params,):
        raise ParameterError(f"expected {spec.num_params} parameters, got shape {params.shape}")
    spans = spec.layout()
    layers = []
    for w, b in zip(spans[0::2], spans[1::2]):
        W = params[w.offset:w.offset + w.size].reshape(w.shape)
        bias = params[b.offset:b.offset + b.size]
        layers.append((W, bias))
    return layers


@dataclass(eq=False)
class ForwardTape:
    """Layer inputs and pre-activations cached by ``forward``. Single use."""

    spec: EncoderSpec
    layers: list[tuple[np.ndarray, np.ndarray]]
    inputs: list[np.ndarray]
    preacts: list[np.ndarray]
    consumed: bool = field(default=False)

    @property
    def rows(self) -> int:
        return self.inputs[0].shape[0]

    def _consume(self):
        if self.consumed:
            raise UsageError("forward tape already consumed by a backward pass")
        self.consumed = True


def _act(kind: Activation, z: np.ndarray) -> np.ndarray:
    if kind is Activation.TANH:
        return np.tanh(z)
    return np.maximum(z, 0.0)


def _act_grad(kind: Activation, z: np.ndarray, h: np.ndarray) -> np.ndarray:
    if kind is Activation.TANH:
        return 1.0 - h * h
    return (z > 0.0).astype(np.float64)


def forward(params: np.ndarray, spec: EncoderSpec, inputs) -> tuple[np.ndarray, ForwardTape]:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ParameterError(f"inputs must have shape (B, {spec.input_dim}), got {x.shape}")
    layers = unpack(params, spec)
    h, ins, pres = x, [], []
    last = len(layers) - 1
    for l, (W, b) in enumerate(layers):
        ins.append(h)
        z = h @ W + b
        if l < last:
            pres.append(z)
            h = _act(spec.activation, z)
        else:
            h = z
    return h, ForwardTape(spec, layers, ins, pres)


def _check_upstream(tape: ForwardTape, upstream: np.ndarray, batched: bool) -> np.ndarray:
    upstream = np.asarray(upstream, dtype=np.float64)
    want = (tape.rows, tape.spec.output_dim)
    got = upstream.shape[1:] if batched else upstream.shape
    if tuple(got) != want or upstream.ndim != (3 if batched else 2):
        raise ParameterError(f"upstream shape {upstream.shape} does not match outputs {want}")
    return upstream


def _backprop(tape: ForwardTape, delta: np.ndarray, mode: str) -> np.ndarray:
    spec = tape.spec
    pieces: list[np.ndarray] = [None] * (2 * spec.num_layers)  # type: ignore[list-item]
    for l in range(spec.num_layers - 1, -1, -1):
        W, _ = tape.layers[l]
        h = tape.inputs[l]
        if mode == "sum":
            gW = h.T @ delta
            gb = delta.sum(axis=0)
            flat = (gW.ravel(), gb)
        elif mode == "batched":
            gW = np.matmul(h.T, delta)  # (K, in, out)
            gb = delta.sum(axis=1)
            flat = (gW.reshape(gW.shape[0], -1), gb)
        else:
            gW = h[:, :, None] * delta[:, None, :]  # (n, in, out)
            flat = (gW.reshape(gW.shape[0], -1), delta)
        pieces[2 * l], pieces[2 * l + 1] = flat
        if l > 0:
            delta = (delta @ W.T) * _act_grad(spec.activation, tape.preacts[l - 1], tape.inputs[l])
    return np.concatenate(pieces, axis=-1)


def backward(tape: ForwardTape, upstream) -> np.ndarray:
    """Returns ``sum_i J_i^T upstream_i`` as a flat parameter gradient."""
    upstream = _check_upstream(tape, upstream, batched=False)
    tape._consume()
    return _backprop(tape, upstream, "sum")


def backward_batched(tape: ForwardTape, upstreams) -> np.ndarray:
    """Returns a ``(K, P)`` array, row k being the VJP of ``upstreams[k]``."""
    upstreams = _check_upstream(tape, upstreams, batched=True)
    tape._consume()
    return _backprop(tape, upstreams, "batched")


def backward_per_example(tape: ForwardTape, upstream) -> np.ndarray:
    """Returns a ``(B, P)`` array, row i being ``J_i^T upstream_i``."""
    upstream = _check_upstream(tape, upstream, batched=False)
    tape._consume()
    return _backprop(tape, upstream, "per_example")


def cosine_similarity(z_a, z_b) -> float:
    """Cosine similarity, defined as 0 when either vector has norm < 1e-12."""
    z_a = np.asarray(z_a, dtype=np.float64)
    z_b = np.asarray(z_b, dtype=np.float64)
    na, nb = np.linalg.norm(z_a), np.linalg.norm(z_b)
    if na < NORM_EPS or nb < NORM_EPS:
        return 0.0
    return float(np.clip(np.dot(z_a, z_b) / (na * nb), -1.0, 1.0))


def normalize_rows(z: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unit-normalises rows; guarded rows become zero. Returns (zhat, norms, ok)."""
    norms = np.linalg.norm(z, axis=-1)
    ok = norms >= NORM_EPS
    safe = np.where(ok, norms, 1.0)
    zhat = np.where(ok[..., None], z / safe[..., None], 0.0)
    return zhat, norms, ok


def normalize_rows_backward(dzhat, zhat, norms, ok) -> np.ndarray:
    """Pulls a gradient w.r.t. normalised rows back to the raw rows.

    ``dzhat`` may carry a leading batch axis; the other arguments broadcast.
    Guarded rows receive zero gradient.
    """
    radial = np.sum(dzhat * zhat, axis=-1, keepdims=True)
    safe = np.where(ok, norms, 1.0)[..., None]
    return np.where(ok[..., None], (dzhat - radial * zhat) / safe, 0.0)


# -- checkpoints ---------------------------------------------------------------

_MAGIC = "DPGCL-CHECKPOINT 1"


def save_checkpoint(path: str | Path, params: Sequence[np.ndarray], specs: Sequence[EncoderSpec]) -> None:
    """Text layout header followed by the little-endian float64 payload."""
    if len(params) != len(specs):
        raise ParameterError("need one spec per parameter vector")
    lines = [_MAGIC, f"encoders {len(specs)}"]
    for e, (p, spec) in enumerate(zip(params, specs)):
        if np.asarray(p).shape != (spec.num_params,):
            raise ParameterError(f"encoder {e}: parameter count does not match its spec")
        hidden = ",".join(map(str, spec.hidden_dims)) or "-"
        lines.append(
            f"encoder {e} input={spec.input_dim} hidden={hidden} output={spec.output_dim} "
            f"activation={spec.activation.value} init_seed={spec.init_seed}"
        )
        for span in spec.layout():
            shape = "x".join(map(str, span.shape))
            lines.append(f"span {e} {span.name} {shape} {span.offset}")
    total = sum(spec.num_params for spec in specs)
    lines.append(f"data {total}")
    header = ("\n".join(lines) + "\n").encode("ascii")
    payload = np.concatenate([np.asarray(p, dtype="<f8") for p in params]).tobytes()
    Path(path).write_bytes(header + payload)


def load_checkpoint(path: str | Path) -> tuple[list[np.ndarray], list[EncoderSpec]]:
    blob = Path(path).read_bytes()
    if not blob.startswith(_MAGIC.encode("ascii") + b"\n"):
        raise ParameterError(f"{path}: not a checkpoint file")
    specs: list[EncoderSpec] = []
    pos = 0
    total = None
    while total is None:
        end = blob.index(b"\n", pos)
        line = blob[pos:end].decode("ascii")
        pos = end + 1
        if line.startswith("encoder "):
            fields = dict(item.split("=", 1) for item in line.split()[2:])
            hidden = () if fields["hidden"] == "-" else tuple(int(h) for h in fields["hidden"].split(","))
            specs.append(EncoderSpec(
                int(fields["input"]), hidden, int(fields["output"]),
                Activation(fields["activation"]), int(fields["init_seed"]),
            ))
        elif line.startswith("data "):
            total = int(line.split()[1])
        elif line == _MAGIC or line.startswith(("encoders ", "span ")):
            continue
        else:
            raise ParameterError(f"{path}: unexpected checkpoint line {line!r}")
    flat = np.frombuffer(blob[pos:], dtype="<f8").astype(np.float64)
    if flat.size != total or total != sum(s.num_params for s in specs):
        raise ParameterError(f"{path}: payload holds {flat.size} values, expected {total}")
    params, offset = [], 0
    for spec in specs:
        params.append(flat[offset:offset + spec.num_params].copy())
        offset += spec.num_params
    return params, specs
