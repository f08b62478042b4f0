"""Synthetic multi-fidelity test problems with trace observations.

Each problem augments a classic global-optimization test function with
one or two fidelity controls in [0, 1]; at full fidelity (all ones) the
augmented function reproduces the classic function exactly.  The
synthetic evaluation cost is 0.01 + prod(s), and warm-started evaluations
are charged the difference of cold-start costs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .fidelity import FidelitySpace, as_fidelity

# Canonical Hartmann constants from the standard global-optimization
# test-function literature.
_HARTMANN_ALPHA = np.array([1.0, 1.2, 3.0, 3.2])
_HARTMANN3_A = np.array(
    [[3.0, 10.0, 30.0], [0.1, 10.0, 35.0], [3.0, 10.0, 30.0], [0.1, 10.0, 35.0]]
)
_HARTMANN3_P = 1e-4 * np.array(
    [[3689, 1170, 2673], [4699, 4387, 7470], [1091, 8732, 5547], [381, 5743, 8828]]
)
_HARTMANN6_A = np.array(
    [
        [10.0, 3.0, 17.0, 3.5, 1.7, 8.0],
        [0.05, 10.0, 17.0, 0.1, 8.0, 14.0],
        [3.0, 3.5, 1.7, 10.0, 17.0, 8.0],
        [17.0, 8.0, 0.05, 10.0, 0.1, 14.0],
    ]
)
_HARTMANN6_P = 1e-4 * np.array(
    [
        [1312, 1696, 5569, 124, 8283, 5886],
        [2329, 4135, 8307, 3736, 1004, 9991],
        [2348, 1451, 3522, 2883, 3047, 6650],
        [4047, 8828, 8732, 5743, 1091, 381],
    ]
)

# Full-fidelity minima, computed once by a dense-grid + local-polish
# oracle (tests/test_benchmarks.py re-derives them).
TRUE_MINIMA = {
    "branin2": 0.39788735772973816,
    "hartmann3": -3.8627797873326593,
    "hartmann6": -3.3223680114155125,
    "rosenbrock3": 0.0,
}


def augmented_branin(x, s) -> float:
    """2-d Branin with one trace fidelity perturbing the quadratic term."""
    x = np.asarray(x, dtype=float).reshape(2)
    s = as_fidelity(s, 1)
    a = 5.1 / (4.0 * math.pi**2) - 0.1 * (1.0 - s[0])
    val = (x[1] - a * x[0] ** 2 + (5.0 / math.pi) * x[0] - 6.0) ** 2
    return float(val + 10.0 * (1.0 - 1.0 / (8.0 * math.pi)) * math.cos(x[0]) + 10.0)


def _hartmann(x, s, A, P) -> float:
    """Negated-sum Hartmann; low fidelity shrinks the first basin weight."""
    x = np.asarray(x, dtype=float).reshape(A.shape[1])
    s = as_fidelity(s, 1)
    weights = _HARTMANN_ALPHA.copy()
    weights[0] -= 0.1 * (1.0 - s[0])
    inner = -np.sum(A * (x[None, :] - P) ** 2, axis=1)
    return float(-np.sum(weights * np.exp(inner)))


def augmented_hartmann3(x, s) -> float:
    return _hartmann(x, s, _HARTMANN3_A, _HARTMANN3_P)


def augmented_hartmann6(x, s) -> float:
    return _hartmann(x, s, _HARTMANN6_A, _HARTMANN6_P)


def augmented_rosenbrock(x, s) -> float:
    """3-d Rosenbrock with a trace and a non-trace fidelity control."""
    x = np.asarray(x, dtype=float).reshape(3)
    s = as_fidelity(s, 2)
    total = 0.0
    for i in range(2):
        total += 100.0 * (x[i + 1] - x[i] ** 2 + 0.1 * (1.0 - s[0])) ** 2
        total += (x[i] - 1.0 + 0.1 * (1.0 - s[1]) ** 2) ** 2
    return float(total)


def synthetic_cost(s) -> float:
    """Evaluation cost 0.01 + prod(s): per-datapoint work plus validation."""
    s = np.asarray(s, dtype=float).reshape(-1)
    return float(0.01 + np.prod(s))


def synthetic_cost_grad(s) -> np.ndarray:
    s = np.asarray(s, dtype=float).reshape(-1)
    out = np.empty_like(s)
    for i in range(len(s)):
        out[i] = np.prod(np.delete(s, i))
    return out


def batch_cost(costs) -> float:
    """Cost of a synchronous batch: the largest individual cost."""
    costs = list(costs)
    if not costs:
        raise ValueError("batch_cost needs at least one cost")
    return float(max(costs))


@dataclass(frozen=True)
class SyntheticProblem:
    name: str
    dim: int
    space: FidelitySpace
    bounds: tuple[tuple[float, float], ...]
    fn: Callable[[np.ndarray, np.ndarray], float]
    true_min: float
    noise_std: float = 0.0

    def full_fidelity(self, x) -> float:
        return self.fn(x, np.ones(self.space.m))

    def evaluator(self, seed: int = 0, noise_std: float | None = None) -> "TraceEvaluator":
        std = self.noise_std if noise_std is None else noise_std
        return TraceEvaluator(self, noise_std=std, seed=seed)


@dataclass(frozen=True)
class WarmToken:
    """Cached state of a previous evaluation, enabling warm starts."""

    point: tuple[float, ...]
    fidelity: tuple[float, ...]


class TraceEvaluator:
    """Objective adapter: (x, fidelities, token) -> (values, cost, token).

    Returns one observation per requested fidelity (all free members of
    the trace of the maximum), charges the synthetic cost of the maximum
    fidelity minus the warm-start credit when the token matches, and
    hands back a token for the now-cached state.
    """

    def __init__(self, problem: SyntheticProblem, noise_std: float = 0.0, seed: int = 0):
        self.problem = problem
        self.noise_std = float(noise_std)
        self._rng = np.random.default_rng(seed)

    def __call__(self, x, fidelities, token: Optional[WarmToken] = None):
        x = np.asarray(x, dtype=float).reshape(self.problem.dim)
        space = self.problem.space
        fids = [as_fidelity(s, space.m) for s in fidelities]
        if not fids:
            raise ValueError("need at least one fidelity to observe")
        max_s = np.max(fids, axis=0)
        for s in fids:
            if not space.free_set_contains(max_s, s):
                raise ValueError(f"fidelity {s} outside the trace of {max_s}")
        cost = synthetic_cost(max_s)
        if token is not None and np.allclose(token.point, x, atol=1e-12) and space.warm_compatible(
            token.fidelity, max_s
        ):
            cost = cost - synthetic_cost(token.fidelity)
        values = [self.problem.fn(x, s) for s in fids]
        if self.noise_std > 0:
            values = [v + self.noise_std * self._rng.standard_normal() for v in values]
        new_token = WarmToken(point=tuple(x.tolist()), fidelity=tuple(max_s.tolist()))
        return values, float(cost), new_token


def simple_regret(history, problem: SyntheticProblem) -> list[dict]:
    """Per-round regret of the recommendations in a run history.

    Each row reports the recommendation's true full-fidelity value minus
    the problem's true minimum, keyed by round and cumulative cost.
    ``history`` needs a ``recommendations`` sequence whose entries expose
    ``round_index``, ``cumulative_cost``, ``point`` and ``value``.
    """
    rows = []
    for rec in history.recommendations:
        true_val = problem.full_fidelity(np.asarray(rec.point, dtype=float))
        rows.append(
            {
                "round": rec.round_index,
                "cumulative_cost": rec.cumulative_cost,
                "recommended_value": rec.value,
                "true_value": true_val,
                "regret": true_val - problem.true_min,
            }
        )
    return rows


_REGISTRY: dict[str, SyntheticProblem] = {}


def _register(problem: SyntheticProblem):
    _REGISTRY[problem.name] = problem
    return problem


BRANIN2 = _register(
    SyntheticProblem(
        name="branin2",
        dim=2,
        space=FidelitySpace.from_counts(1, 0),
        bounds=((-5.0, 10.0), (0.0, 15.0)),
        fn=augmented_branin,
        true_min=TRUE_MINIMA["branin2"],
    )
)
HARTMANN3 = _register(
    SyntheticProblem(
        name="hartmann3",
        dim=3,
        space=FidelitySpace.from_counts(1, 0),
        bounds=((0.0, 1.0),) * 3,
        fn=augmented_hartmann3,
        true_min=TRUE_MINIMA["hartmann3"],
    )
)
HARTMANN6 = _register(
    SyntheticProblem(
        name="hartmann6",
        dim=6,
        space=FidelitySpace.from_counts(1, 0),
        bounds=((0.0, 1.0),) * 6,
        fn=augmented_hartmann6,
        true_min=TRUE_MINIMA["hartmann6"],
    )
)
ROSENBROCK3 = _register(
    SyntheticProblem(
        name="rosenbrock3",
        dim=3,
        space=FidelitySpace.from_counts(1, 1),
        bounds=((-2.0, 2.0),) * 3,
        fn=augmented_rosenbrock,
        true_min=TRUE_MINIMA["rosenbrock3"],
    )
)


def get_problem(name: str) -> SyntheticProblem:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown problem {name!r}; known: {sorted(_REGISTRY)}") from None


def problem_names() -> list[str]:
    return sorted(_REGISTRY)
