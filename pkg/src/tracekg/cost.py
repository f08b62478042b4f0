"""Evaluation-cost models with warm-start accounting.

The learned model is a GP on log cold-start cost over (x, s).  Costs of
warm-started evaluations are first converted to cold-start equivalents by
summing realized costs along the parent chain.  A warm-started prediction
is the difference of predicted cold-start costs at the target and parent
fidelities, floored at a small positive constant so that acquisition
ratios stay finite.

``ExactCostModel`` bypasses the GP with a known cost function; the
synthetic benchmark harness uses it to isolate acquisition behavior.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .fidelity import FidelitySpace
from .gp import GaussianProcess, sample_hyperparameters
from .kernels import KernelSpec

COST_FLOOR = 1e-6


@dataclass(frozen=True)
class CostObservation:
    """One realized evaluation cost, possibly continuing a cached run."""

    point: tuple[float, ...]
    fidelity: tuple[float, ...]
    cost: float
    parent: Optional["CostObservation"] = None

    def __post_init__(self):
        if not (np.isfinite(self.cost) and self.cost > 0):
            raise ValueError("realized cost must be finite and > 0")

    def cold_equivalent(self) -> float:
        """Total cost of the chain ending here, i.e. the cold-start cost."""
        total, node = 0.0, self
        while node is not None:
            total += node.cost
            node = node.parent
        return total


class GpCostModel:
    """GP on log cold-start cost, immutable after fit."""

    def __init__(self, gp: GaussianProcess, space: FidelitySpace):
        self.gp = gp
        self.space = space

    def cold_cost(self, x, s) -> float:
        Xq = np.atleast_2d(np.asarray(x, dtype=float))
        Sq = np.atleast_2d(np.asarray(s, dtype=float))
        return float(np.exp(self.gp.mean(Xq, Sq)[0]))

    def predict(self, x, s, parent_fidelity=None) -> float:
        cold = self.cold_cost(x, s)
        if parent_fidelity is None:
            return max(COST_FLOOR, cold)
        self._check_parent(s, parent_fidelity)
        return max(COST_FLOOR, cold - self.cold_cost(x, parent_fidelity))

    def value_and_grad(self, x, s, parent_fidelity=None):
        """Cost plus gradients w.r.t. x and s (parent held fixed).

        At the floor the prediction is constant, so the gradient is zero.
        """
        Xq = np.atleast_2d(np.asarray(x, dtype=float))
        Sq = np.atleast_2d(np.asarray(s, dtype=float))
        cold = float(np.exp(self.gp.mean(Xq, Sq)[0]))
        gx = cold * self.gp.mean_grad_x(Xq, Sq)[0]
        gs = cold * self.gp.mean_grad_s(Xq, Sq)[0]
        if parent_fidelity is None:
            value = cold
        else:
            self._check_parent(s, parent_fidelity)
            value = cold - self.cold_cost(x, parent_fidelity)
        if value <= COST_FLOOR:
            return COST_FLOOR, np.zeros_like(gx), np.zeros_like(gs)
        return value, gx, gs

    def _check_parent(self, s, parent_fidelity):
        if not self.space.warm_compatible(parent_fidelity, s):
            raise ValueError(
                f"warm-start parent {np.asarray(parent_fidelity)} incompatible with "
                f"target fidelity {np.asarray(s)}"
            )


class ExactCostModel:
    """Known cost function of the fidelity vector (independent of x)."""

    def __init__(
        self,
        space: FidelitySpace,
        fn: Callable[[np.ndarray], float],
        grad: Callable[[np.ndarray], np.ndarray],
    ):
        self.space = space
        self._fn = fn
        self._grad = grad

    def cold_cost(self, x, s) -> float:
        return float(self._fn(np.asarray(s, dtype=float).reshape(-1)))

    def predict(self, x, s, parent_fidelity=None) -> float:
        cold = self.cold_cost(x, s)
        if parent_fidelity is None:
            return max(COST_FLOOR, cold)
        if not self.space.warm_compatible(parent_fidelity, s):
            raise ValueError("warm-start parent incompatible with target fidelity")
        return max(COST_FLOOR, cold - self.cold_cost(x, parent_fidelity))

    def value_and_grad(self, x, s, parent_fidelity=None):
        s = np.asarray(s, dtype=float).reshape(-1)
        value = self.predict(x, s, parent_fidelity)
        d = len(np.asarray(x, dtype=float).reshape(-1))
        if value <= COST_FLOOR:
            return COST_FLOOR, np.zeros(d), np.zeros(self.space.m)
        return value, np.zeros(d), self._grad(s)


def fit_cost(
    observations: list[CostObservation],
    space: FidelitySpace,
    spec: KernelSpec | None = None,
    seed: int = 0,
) -> GpCostModel:
    """Fit the log-cost GP to cold-start-equivalent totals.

    Hyperparameters come from the marginal-likelihood maximizer when no
    spec is given and there are enough observations; a single observation
    falls back to a near-noiseless default spec (pure interpolation).
    """
    if not observations:
        raise ValueError("need at least one cost observation")
    X = np.array([obs.point for obs in observations], dtype=float)
    S = np.array([obs.fidelity for obs in observations], dtype=float)
    y = np.log([obs.cold_equivalent() for obs in observations])
    d = X.shape[1]
    if spec is None:
        if len(observations) >= 2 and float(np.std(y)) > 0:
            spec = sample_hyperparameters(
                (X, S), y, H=1, space=space, seed=seed, mode="map", map_restarts=8
            )[0]
        else:
            spec = KernelSpec.default(d, space, noise_var=1e-10)
    gp = GaussianProcess(spec, space, X, S, y)
    return GpCostModel(gp, space)
