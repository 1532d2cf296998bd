"""Vector-space augmentation operators.

Analogues of the usual view augmentations for feature vectors: a contiguous
zero mask stands in for cropping, additive Gaussian jitter for colour jitter,
and swapping two equal-length segments for sentence reordering. The random
draw is keyed by ``(seed, step, group, replica, member)`` so augmentations are
fresh at every step yet reproducible, and never shared across groups.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from dpgcl.errors import ParameterError
from dpgcl.rng import stream


class AugmentKind(str, enum.Enum):
    CONTIGUOUS_MASK = "mask"
    GAUSSIAN_JITTER = "jitter"
    SEGMENT_SWAP = "swap"
    IDENTITY = "identity"


@dataclass(frozen=True)
class AugmentOp:
    kind: AugmentKind = AugmentKind.CONTIGUOUS_MASK
    strength: float = 0.2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", AugmentKind(self.kind))
        if self.kind in (AugmentKind.CONTIGUOUS_MASK, AugmentKind.SEGMENT_SWAP):
            if not 0.0 <= self.strength <= 1.0:
                raise ParameterError(f"{self.kind.value} strength must lie in [0, 1]")
        elif self.strength < 0:
            raise ParameterError("jitter strength must be nonnegative")


def apply(op: AugmentOp, x, step: int, group: int, replica: int, member: int = 0) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if op.kind is AugmentKind.IDENTITY:
        return x.copy()
    rng = stream(f"augment/{op.kind.value}", op.seed, step, group, replica, member)
    d = x.shape[-1]
    out = x.copy()
    if op.kind is AugmentKind.CONTIGUOUS_MASK:
        width = min(d, math.ceil(op.strength * d))
        start = int(rng.integers(0, d - width + 1))
        out[start:start + width] = 0.0
    elif op.kind is AugmentKind.GAUSSIAN_JITTER:
        out += op.strength * rng.standard_normal(d)
    else:
        length = max(1, int(op.strength * d / 2))
        if 2 * length > d:
            return out
        # Segment starts a < b with b >= a + length; draw a uniform valid pair.
        n_pairs = (d - 2 * length + 1) * (d - 2 * length + 2) // 2
        r = int(rng.integers(0, n_pairs))
        a = 0
        row = d - 2 * length + 1
        while r >= row:
            r -= row
            row -= 1
            a += 1
        b = a + length + r
        out[a:a + length], out[b:b + length] = x[b:b + length], x[a:a + length]
    return out
