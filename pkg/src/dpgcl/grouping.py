"""Random partition of a batch into groups of at most S samples."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from dpgcl.errors import ParameterError
from dpgcl.rng import stream


@dataclass(frozen=True)
class GroupAssignment:
    """Disjoint groups of batch positions; only the last one may be short."""

    groups: tuple[tuple[int, ...], ...]
    S: int
    seed: int = 0
    step: int = 0

    @property
    def K(self) -> int:
        return len(self.groups)

    @property
    def batch_size(self) -> int:
        return sum(len(g) for g in self.groups)

    def canonical(self) -> "GroupAssignment":
        """Same partition with members sorted and groups ordered by first member.

        Group labels carry no meaning, so gradient code works on this form;
        it makes equal partitions produce bit-identical arithmetic.
        """
        groups = sorted((tuple(sorted(g)) for g in self.groups), key=lambda g: g[0])
        return GroupAssignment(tuple(groups), self.S, self.seed, self.step)

    def membership(self) -> np.ndarray:
        """Group label of each batch position."""
        owner = np.empty(self.batch_size, dtype=np.int64)
        for k, g in enumerate(self.groups):
            owner[list(g)] = k
        return owner


def assign_groups(B: int, S: int, seed: int, step: int) -> GroupAssignment:
    """Chunks a uniformly random permutation of ``0..B-1`` into blocks of ``S``."""
    if B < 0 or S < 1:
        raise ParameterError(f"need B >= 0 and S >= 1, got B={B}, S={S}")
    perm = stream("grouping", seed, step).permutation(B)
    groups = tuple(tuple(int(i) for i in perm[k:k + S]) for k in range(0, B, S))
    assert len(groups) == math.ceil(B / S)
    return GroupAssignment(groups, S, seed, step)


def couple_neighbor(g: GroupAssignment, B: int, S: int) -> GroupAssignment:
    """Grouping of the neighbouring batch with one extra pair at position ``B``.

    Existing positions keep their groups. The new position joins the last group
    when it has room, otherwise it opens a singleton group.
    """
    if g.batch_size != B:
        raise ParameterError(f"assignment covers {g.batch_size} positions, not B={B}")
    groups = list(g.groups)
    if groups and len(groups[-1]) < S:
        groups[-1] = (*groups[-1], B)
    else:
        groups.append((B,))
    return GroupAssignment(tuple(groups), S, g.seed, g.step)
