"""Fidelity spaces, free-observation sets and retained fidelity sets.

A fidelity vector lives in [0, 1]^m.  Each dimension is either a *trace*
dimension (evaluating at level s yields observations at every level <= s
for free, e.g. training iterations) or a *non-trace* dimension (observed
only at the requested level, e.g. training-data size).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_TOL = 1e-12


def as_fidelity(s, m: int) -> np.ndarray:
    """Validate and return a fidelity vector as a float array of length m."""
    arr = np.atleast_1d(np.asarray(s, dtype=float))
    if arr.shape != (m,):
        raise ValueError(f"fidelity vector has shape {arr.shape}, expected ({m},)")
    if not np.all(np.isfinite(arr)):
        raise ValueError("fidelity vector has non-finite components")
    if np.any(arr < -_TOL) or np.any(arr > 1.0 + _TOL):
        raise ValueError(f"fidelity components must lie in [0, 1], got {arr}")
    return np.clip(arr, 0.0, 1.0)


@dataclass(frozen=True)
class FidelitySpace:
    """Declares the m = m1 + m2 fidelity dimensions and which are trace.

    ``mask`` holds one bool per dimension, True for trace dimensions.  The
    free-observation set of an evaluation at fidelity s is the cross
    product of [0, s_i] over trace dimensions and {s_i} over non-trace
    dimensions.
    """

    mask: tuple[bool, ...]

    def __post_init__(self):
        if len(self.mask) < 1:
            raise ValueError("fidelity space needs at least one dimension")

    @classmethod
    def from_counts(cls, m1: int, m2: int) -> "FidelitySpace":
        """Trace dimensions first, then non-trace dimensions."""
        if m1 < 0 or m2 < 0 or m1 + m2 < 1:
            raise ValueError("need m1, m2 >= 0 with m1 + m2 >= 1")
        return cls(mask=tuple([True] * m1 + [False] * m2))

    @property
    def m(self) -> int:
        return len(self.mask)

    @property
    def m1(self) -> int:
        return sum(self.mask)

    @property
    def m2(self) -> int:
        return self.m - self.m1

    @property
    def trace_dims(self) -> np.ndarray:
        return np.flatnonzero(np.asarray(self.mask))

    @property
    def nontrace_dims(self) -> np.ndarray:
        return np.flatnonzero(~np.asarray(self.mask))

    def free_set_contains(self, s_eval, s_query) -> bool:
        """Membership test for the free-observation set of ``s_eval``."""
        se = as_fidelity(s_eval, self.m)
        sq = as_fidelity(s_query, self.m)
        for i, is_trace in enumerate(self.mask):
            if is_trace:
                if sq[i] > se[i] + _TOL:
                    return False
            else:
                if abs(sq[i] - se[i]) > _TOL:
                    return False
        return True

    def warm_compatible(self, parent, target) -> bool:
        """True when ``target`` can continue a cached run at ``parent``.

        Trace components may only grow; non-trace components must match.
        """
        p = as_fidelity(parent, self.m)
        t = as_fidelity(target, self.m)
        for i, is_trace in enumerate(self.mask):
            if is_trace:
                if t[i] < p[i] - _TOL:
                    return False
            else:
                if abs(t[i] - p[i]) > _TOL:
                    return False
        return True


@dataclass(frozen=True)
class FidelitySet:
    """The retained fidelities of one evaluation.

    Members all lie in the free-observation set of their elementwise
    maximum, and that maximum is itself a member (it is the fidelity the
    evaluation is actually run at).
    """

    space: FidelitySpace
    fidelities: tuple[tuple[float, ...], ...]
    max_s: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(self.fidelities) < 1:
            raise ValueError("a fidelity set needs at least one member")
        mat = np.array([as_fidelity(s, self.space.m) for s in self.fidelities])
        max_s = mat.max(axis=0)
        for row in mat:
            if not self.space.free_set_contains(max_s, row):
                raise ValueError(
                    f"member {row} is outside the free-observation set of max {max_s}"
                )
        if not any(np.allclose(row, max_s, atol=_TOL) for row in mat):
            raise ValueError("the elementwise maximum must be a member of the set")
        object.__setattr__(self, "max_s", max_s)

    @classmethod
    def of(cls, space: FidelitySpace, members) -> "FidelitySet":
        return cls(space=space, fidelities=tuple(tuple(float(v) for v in s) for s in members))

    def __len__(self) -> int:
        return len(self.fidelities)

    def as_array(self) -> np.ndarray:
        return np.array(self.fidelities, dtype=float)

    def zero_set(self) -> list[np.ndarray]:
        return zero_set(self.space, self.as_array())


def zero_set(space: FidelitySpace, members) -> list[np.ndarray]:
    """Fidelities obtained by zeroing one component of any member.

    Deduplicated, preserving first-occurrence order (members in the given
    order, zeroed component index ascending).  These are the near-free,
    near-worthless fidelities the zero-avoiding acquisition benchmarks
    against.
    """
    mat = np.atleast_2d(np.asarray(members, dtype=float))
    out: list[np.ndarray] = []
    seen: set[tuple[float, ...]] = set()
    for row in mat:
        for i in range(space.m):
            variant = row.copy()
            variant[i] = 0.0
            key = tuple(variant.tolist())
            if key not in seen:
                seen.add(key)
                out.append(variant)
    return out
