"""Gaussian-process regression over joint (design point, fidelity) inputs.

A fitted :class:`GaussianProcess` is immutable: the Cholesky factor of the
training covariance and the target solve are computed once, and all
posterior queries read from them.  :class:`GpEnsemble` holds several
posteriors fitted with different sampled hyperparameter sets and averages
mean queries over them; acquisition code iterates over the members.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize

from .fidelity import FidelitySpace
from .kernels import (
    KernelSpec,
    NumericalError,
    chol_with_jitter,
    cov_grad_s1,
    cov_grad_x1,
    cov_matrix,
    cov_matrix_param_grads,
    spec_from_log_vector,
)

LOG_PARAM_LO = -15.0
LOG_PARAM_HI = 8.0


@dataclass(frozen=True)
class HyperPriors:
    """Independent log-normal priors, one (mean, sd) pair per log-parameter.

    Defaults assume design coordinates normalized to the unit box and
    targets standardized: unit-median amplitude and curve parameters, a
    sub-unit lengthscale median, and a small-median, wide noise prior.
    """

    amplitude: tuple[float, float] = (0.0, 1.0)
    lengthscale: tuple[float, float] = (np.log(0.3), 1.0)
    curve: tuple[float, float] = (0.0, 1.0)  # w, beta, alpha, c, delta
    noise_var: tuple[float, float] = (np.log(1e-4), 2.0)

    def means_and_sds(self, d: int, space: FidelitySpace) -> tuple[np.ndarray, np.ndarray]:
        rows = [self.amplitude] + [self.lengthscale] * d
        rows += [self.curve] * (3 * space.m1 + 2 * space.m2)
        rows.append(self.noise_var)
        arr = np.asarray(rows, dtype=float)
        return arr[:, 0], arr[:, 1]


class GaussianProcess:
    """Posterior for one kernel hyperparameter set.

    With no data the posterior is the prior: constant mean ``mu0`` and the
    prior kernel.  With data, mean and covariance follow the standard
    closed-form conditioning equations, backed by a single Cholesky
    factorization of K(Z, Z) + sigma^2 I.
    """

    def __init__(
        self,
        spec: KernelSpec,
        space: FidelitySpace,
        X: np.ndarray,
        S: np.ndarray,
        y: np.ndarray,
        mu0: float | None = None,
    ):
        X = np.asarray(X, dtype=float).reshape(-1, spec.d)
        S = np.asarray(S, dtype=float).reshape(-1, space.m)
        y = np.asarray(y, dtype=float).reshape(-1)
        if len(X) != len(y) or len(S) != len(y):
            raise ValueError("inputs and targets must have matching lengths")
        if not np.all(np.isfinite(y)):
            raise ValueError("targets must be finite")
        self.spec = spec
        self.space = space
        self.X = X
        self.S = S
        self.y = y
        self.n = len(y)
        self.mu0 = float(mu0) if mu0 is not None else (float(np.mean(y)) if self.n else 0.0)
        if self.n:
            K = cov_matrix(spec, space, X, S, X, S)
            self.L, self.jitter = chol_with_jitter(K + spec.noise_var * np.eye(self.n))
            self.alpha = cho_solve((self.L, True), y - self.mu0)
        else:
            self.L = np.zeros((0, 0))
            self.jitter = 0.0
            self.alpha = np.zeros(0)

    # -- batched queries ----------------------------------------------------

    def _cross(self, Xq, Sq) -> np.ndarray:
        """Prior covariance K0(query, train), shape (B, n)."""
        return cov_matrix(self.spec, self.space, Xq, Sq, self.X, self.S)

    def mean(self, Xq, Sq) -> np.ndarray:
        """Posterior mean at a batch of (x, s) inputs, shape (B,)."""
        Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
        B = Xq.shape[0]
        if self.n == 0:
            return np.full(B, self.mu0)
        return self.mu0 + self._cross(Xq, Sq) @ self.alpha

    def mean_grad_x(self, Xq, Sq) -> np.ndarray:
        """d mean / d(design coords) at a batch of inputs, shape (B, d)."""
        Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
        if self.n == 0:
            return np.zeros((Xq.shape[0], self.spec.d))
        k = self._cross(Xq, Sq)
        dk = cov_grad_x1(self.spec, self.space, Xq, Sq, self.X, self.S, K=k)
        return np.einsum("bnd,n->bd", dk, self.alpha)

    def mean_grad_s(self, Xq, Sq) -> np.ndarray:
        """d mean / d(fidelity coords) at a batch of inputs, shape (B, m)."""
        Sq = np.atleast_2d(np.asarray(Sq, dtype=float))
        if self.n == 0:
            return np.zeros((Sq.shape[0], self.space.m))
        k = self._cross(Xq, Sq)
        dk = cov_grad_s1(self.spec, self.space, Xq, Sq, self.X, self.S, K=k)
        return np.einsum("bnm,n->bm", dk, self.alpha)

    def _half_solve(self, Xq, Sq) -> np.ndarray:
        """L^{-1} K0(train, query), shape (n, B)."""
        if self.n == 0:
            Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
            return np.zeros((0, Xq.shape[0]))
        return solve_triangular(self.L, self._cross(Xq, Sq).T, lower=True)

    def cov(self, X1, S1, X2, S2) -> np.ndarray:
        """Posterior covariance between two batches, shape (B1, B2)."""
        prior = cov_matrix(self.spec, self.space, X1, S1, X2, S2)
        if self.n == 0:
            return prior
        return prior - self._half_solve(X1, S1).T @ self._half_solve(X2, S2)

    def var(self, Xq, Sq) -> np.ndarray:
        """Posterior variance at a batch, clamped at 0, shape (B,)."""
        Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
        Sq = np.atleast_2d(np.asarray(Sq, dtype=float))
        prior = cov_matrix(self.spec, self.space, Xq, Sq, Xq, Sq).diagonal().copy()
        if self.n:
            V = self._half_solve(Xq, Sq)
            prior -= np.sum(V * V, axis=0)
        return np.maximum(prior, 0.0)


def fit(inputs, targets, spec: KernelSpec, space: FidelitySpace, mu0=None) -> GaussianProcess:
    """Condition a GP with the given hyperparameters on (x, s) -> y data.

    ``inputs`` is a sequence of (point, fidelity) pairs or an (X, S) pair
    of arrays.  Distinct inputs or positive noise are required for a
    well-posed factorization; near-singular cases fall back to the
    escalating-jitter policy and raise NumericalError beyond it.
    """
    X, S = _split_inputs(inputs, spec.d, space.m)
    return GaussianProcess(spec, space, X, S, np.asarray(targets, dtype=float), mu0=mu0)


def _split_inputs(inputs, d: int, m: int) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(inputs, tuple) and len(inputs) == 2 and hasattr(inputs[0], "ndim"):
        X = np.asarray(inputs[0], dtype=float).reshape(-1, d)
        S = np.asarray(inputs[1], dtype=float).reshape(-1, m)
        return X, S
    X = np.array([np.asarray(p, dtype=float).reshape(d) for p, _ in inputs]).reshape(-1, d)
    S = np.array([np.asarray(s, dtype=float).reshape(m) for _, s in inputs]).reshape(-1, m)
    return X, S


# ---------------------------------------------------------------------------
# Marginal likelihood and hyperparameter inference
# ---------------------------------------------------------------------------

def log_marginal_likelihood(
    inputs, targets, spec: KernelSpec, space: FidelitySpace, mu0=None
) -> float:
    """Gaussian log marginal likelihood of the targets under ``spec``."""
    X, S = _split_inputs(inputs, spec.d, space.m)
    y = np.asarray(targets, dtype=float).reshape(-1)
    value, _ = _lml_and_grad(X, S, y, spec, space, mu0=mu0, want_grad=False)
    return value


def _lml_and_grad(X, S, y, spec, space, mu0=None, want_grad=True):
    n = len(y)
    center = float(mu0) if mu0 is not None else float(np.mean(y))
    r = y - center
    if want_grad:
        K, G = cov_matrix_param_grads(spec, space, X, S)
    else:
        K = cov_matrix(spec, space, X, S, X, S)
        G = None
    L, _ = chol_with_jitter(K + spec.noise_var * np.eye(n))
    alpha = cho_solve((L, True), r)
    value = float(
        -0.5 * r @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * n * np.log(2.0 * np.pi)
    )
    if not want_grad:
        return value, None
    Kinv = cho_solve((L, True), np.eye(n))
    grad = np.array([0.5 * (alpha @ Gp @ alpha - np.sum(Kinv * Gp)) for Gp in G])
    return value, grad


def sample_hyperparameters(
    inputs,
    targets,
    H: int,
    space: FidelitySpace,
    seed: int = 0,
    mode: str = "slice",
    priors: HyperPriors | None = None,
    burn: int = 30,
    thin: int = 2,
    map_restarts: int = 20,
    mu0=None,
) -> list[KernelSpec]:
    """Draw H kernel hyperparameter sets for the given data.

    ``mode="slice"`` runs a univariate slice sampler over log-parameters
    with log-normal priors; ``mode="map"`` returns H copies of the
    marginal-likelihood maximizer over random restarts.  Deterministic for
    a fixed seed.  Constant targets carry no information about the
    hyperparameters, so the sampler falls back to prior draws with a
    warning.
    """
    X, S = _dim_split(inputs, space)
    y = np.asarray(targets, dtype=float).reshape(-1)
    if len(y) < 2:
        raise ValueError("hyperparameter inference needs at least 2 observations")
    if H < 1:
        raise ValueError("H must be >= 1")
    priors = priors or HyperPriors()
    d = X.shape[1]
    mu, sd = priors.means_and_sds(d, space)
    rng = np.random.default_rng(seed)

    if float(np.std(y)) == 0.0:
        warnings.warn("constant targets: falling back to prior hyperparameter draws")
        thetas = mu[None, :] + sd[None, :] * rng.standard_normal((H, len(mu)))
        return [spec_from_log_vector(np.clip(t, LOG_PARAM_LO, LOG_PARAM_HI), d, space) for t in thetas]

    def log_lik(theta):
        try:
            spec = spec_from_log_vector(theta, d, space)
            val, _ = _lml_and_grad(X, S, y, spec, space, mu0=mu0, want_grad=False)
            return val
        except (NumericalError, FloatingPointError):
            return -np.inf

    if mode == "map":
        best = _map_estimate(X, S, y, space, mu, sd, rng, map_restarts, mu0=mu0)
        return [spec_from_log_vector(best, d, space)] * H

    def log_post(theta):
        if np.any(theta < LOG_PARAM_LO) or np.any(theta > LOG_PARAM_HI):
            return -np.inf
        return log_lik(theta) - 0.5 * float(np.sum(((theta - mu) / sd) ** 2))

    theta = _map_estimate(X, S, y, space, mu, sd, rng, restarts=4, mu0=mu0, regularized=True)
    draws = _slice_sample(log_post, theta, rng, n_draws=H, burn=burn, thin=thin)
    return [spec_from_log_vector(t, d, space) for t in draws]


def _dim_split(inputs, space: FidelitySpace):
    if isinstance(inputs, tuple) and len(inputs) == 2 and hasattr(inputs[0], "ndim"):
        X = np.atleast_2d(np.asarray(inputs[0], dtype=float))
        S = np.atleast_2d(np.asarray(inputs[1], dtype=float))
        return X, S
    X = np.array([np.asarray(p, dtype=float) for p, _ in inputs])
    S = np.array([np.asarray(s, dtype=float) for _, s in inputs])
    return np.atleast_2d(X), np.atleast_2d(S)


def _map_estimate(X, S, y, space, mu, sd, rng, restarts, mu0=None, regularized=False):
    """Best log-parameter vector over L-BFGS restarts.

    Plain maximum marginal likelihood by default; ``regularized`` adds the
    log-prior (used only to seed the slice sampler).
    """
    d = X.shape[1]

    def objective(theta):
        try:
            spec = spec_from_log_vector(theta, d, space)
            val, grad = _lml_and_grad(X, S, y, spec, space, mu0=mu0)
        except (NumericalError, FloatingPointError):
            return 1e12, np.zeros_like(theta)
        f = -val
        g = -grad
        if regularized:
            f += 0.5 * float(np.sum(((theta - mu) / sd) ** 2))
            g += (theta - mu) / sd**2
        return f, g

    starts = [mu.copy()]
    for _ in range(max(restarts - 1, 0)):
        starts.append(mu + sd * rng.standard_normal(len(mu)))
    best_theta, best_val = None, np.inf
    bounds = [(LOG_PARAM_LO, LOG_PARAM_HI)] * len(mu)
    for t0 in starts:
        res = minimize(
            objective,
            np.clip(t0, LOG_PARAM_LO, LOG_PARAM_HI),
            jac=True,
            method="L-BFGS-B",
            bounds=bounds,
            options={"maxiter": 200},
        )
        if res.fun < best_val:
            best_val, best_theta = res.fun, res.x
    return best_theta


def _slice_sample(log_post, theta0, rng, n_draws, burn, thin, width=1.0, max_steps=8):
    """Coordinate-wise slice sampler with stepping out and shrinkage."""
    theta = np.asarray(theta0, dtype=float).copy()
    lp = log_post(theta)
    draws = []
    total = burn + n_draws * thin
    for it in range(total):
        for k in range(len(theta)):
            level = lp + np.log(rng.uniform())
            lo = theta[k] - width * rng.uniform()
            hi = lo + width
            steps = max_steps
            while steps > 0 and _lp_at(log_post, theta, k, lo) > level:
                lo -= width
                steps -= 1
            steps = max_steps
            while steps > 0 and _lp_at(log_post, theta, k, hi) > level:
                hi += width
                steps -= 1
            while True:
                prop = rng.uniform(lo, hi)
                cand_lp = _lp_at(log_post, theta, k, prop)
                if cand_lp > level:
                    theta[k] = prop
                    lp = cand_lp
                    break
                if prop < theta[k]:
                    lo = prop
                else:
                    hi = prop
                if hi - lo < 1e-12:
                    break
        if it >= burn and (it - burn) % thin == 0:
            draws.append(theta.copy())
    return draws[:n_draws]


def _lp_at(log_post, theta, k, value):
    t = theta.copy()
    t[k] = value
    return log_post(t)


# ---------------------------------------------------------------------------
# Ensemble
# ---------------------------------------------------------------------------

@dataclass
class GpEnsemble:
    """Several posteriors with sampled hyperparameters over shared data.

    Mean queries average the members' means.  Covariance queries average
    the members' covariances (the dispersion between member means is not
    added); acquisition computations instead loop over ``members`` and
    average acquisition values.  ``x_bounds`` is the design box used by
    inner optimizations; ``y_shift``/``y_scale`` restore raw target units
    when the members were fitted on standardized targets.
    """

    members: list[GaussianProcess]
    x_bounds: np.ndarray
    space: FidelitySpace
    y_shift: float = 0.0
    y_scale: float = 1.0
    # cache of seeded posterior-mean minimizers; safe because members are
    # immutable after fit
    _min_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.x_bounds = np.asarray(self.x_bounds, dtype=float).reshape(-1, 2)
        if not self.members:
            raise ValueError("ensemble needs at least one member")

    @property
    def d(self) -> int:
        return self.x_bounds.shape[0]

    @property
    def H(self) -> int:
        return len(self.members)

    def posterior_mean(self, x, s) -> float:
        Xq = np.atleast_2d(np.asarray(x, dtype=float))
        Sq = np.atleast_2d(np.asarray(s, dtype=float))
        vals = [m.mean(Xq, Sq)[0] for m in self.members]
        return self.y_shift + self.y_scale * float(np.mean(vals))

    def posterior_cov(self, x, s, x2=None, s2=None) -> float:
        X1 = np.atleast_2d(np.asarray(x, dtype=float))
        S1 = np.atleast_2d(np.asarray(s, dtype=float))
        X2 = X1 if x2 is None else np.atleast_2d(np.asarray(x2, dtype=float))
        S2 = S1 if s2 is None else np.atleast_2d(np.asarray(s2, dtype=float))
        same = x2 is None or (np.array_equal(X1, X2) and np.array_equal(S1, S2))
        if same:
            vals = [m.var(X1, S1)[0] for m in self.members]
        else:
            vals = [m.cov(X1, S1, X2, S2)[0, 0] for m in self.members]
        return self.y_scale**2 * float(np.mean(vals))

    @classmethod
    def from_data(
        cls,
        X,
        S,
        y,
        specs: list[KernelSpec],
        space: FidelitySpace,
        x_bounds,
        standardize: bool = True,
    ) -> "GpEnsemble":
        y = np.asarray(y, dtype=float).reshape(-1)
        if standardize and len(y) >= 2 and float(np.std(y)) > 0:
            shift = float(np.mean(y))
            scale = float(np.std(y))
        else:
            shift, scale = 0.0, 1.0
        ys = (y - shift) / scale
        members = [GaussianProcess(spec, space, X, S, ys) for spec in specs]
        return cls(members=members, x_bounds=x_bounds, space=space, y_shift=shift, y_scale=scale)
