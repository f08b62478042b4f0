"""Product covariance over (design point, fidelity vector) inputs.

The covariance factorizes as

    K((x, s), (x', s')) = SE(x, x') * prod_i K1(s_i, s'_i) * prod_j K2(s_j, s'_j)

with a squared-exponential design factor, a learning-curve factor K1 on
every trace dimension and a data-fraction factor K2 on every non-trace
dimension:

    K1(a, b) = w + beta^alpha / (a + b + beta^alpha)
    K2(a, b) = c + (1-a)^(1+delta) * (1-b)^(1+delta)

All hyperparameters are strictly positive; the noise variance may be 0.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .fidelity import FidelitySpace


class NumericalError(RuntimeError):
    """Linear algebra failed beyond repair (non-PD matrix after jitter)."""


@dataclass(frozen=True)
class KernelSpec:
    """Hyperparameters of the product kernel plus observation noise.

    ``trace_params`` has one (w, beta, alpha) row per trace dimension,
    ``nontrace_params`` one (c, delta) row per non-trace dimension.
    """

    amplitude: float
    lengthscales: tuple[float, ...]
    trace_params: tuple[tuple[float, float, float], ...]
    nontrace_params: tuple[tuple[float, float], ...]
    noise_var: float = 0.0

    def __post_init__(self):
        vals = [self.amplitude, *self.lengthscales]
        for row in self.trace_params:
            vals.extend(row)
        for row in self.nontrace_params:
            vals.extend(row)
        if not all(np.isfinite(v) and v > 0 for v in vals):
            raise ValueError("kernel hyperparameters must be finite and > 0")
        if not (np.isfinite(self.noise_var) and self.noise_var >= 0):
            raise ValueError("noise variance must be finite and >= 0")

    @property
    def d(self) -> int:
        return len(self.lengthscales)

    def with_noise(self, noise_var: float) -> "KernelSpec":
        return replace(self, noise_var=noise_var)

    @classmethod
    def default(cls, d: int, space: FidelitySpace, noise_var: float = 1e-6) -> "KernelSpec":
        return cls(
            amplitude=1.0,
            lengthscales=(0.5,) * d,
            trace_params=((1.0, 1.0, 1.0),) * space.m1,
            nontrace_params=((1.0, 1.0),) * space.m2,
            noise_var=noise_var,
        )


def k1_factor(a, b, w: float, beta: float, alpha: float):
    """Learning-curve covariance between two trace-fidelity levels."""
    ba = beta**alpha
    return w + ba / (np.asarray(a) + np.asarray(b) + ba)


def k2_factor(a, b, c: float, delta: float):
    """Data-fraction covariance between two non-trace fidelity levels."""
    e = 1.0 + delta
    return c + np.power(1.0 - np.asarray(a), e) * np.power(1.0 - np.asarray(b), e)


def _check_inputs(X: np.ndarray, S: np.ndarray):
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(S))):
        raise ValueError("kernel inputs must be finite")


def cov_matrix(
    spec: KernelSpec,
    space: FidelitySpace,
    X1: np.ndarray,
    S1: np.ndarray,
    X2: np.ndarray,
    S2: np.ndarray,
) -> np.ndarray:
    """Dense covariance matrix between two batches of (x, s) inputs."""
    X1 = np.atleast_2d(np.asarray(X1, dtype=float))
    X2 = np.atleast_2d(np.asarray(X2, dtype=float))
    S1 = np.atleast_2d(np.asarray(S1, dtype=float))
    S2 = np.atleast_2d(np.asarray(S2, dtype=float))
    _check_inputs(X1, S1)
    _check_inputs(X2, S2)
    ls = np.asarray(spec.lengthscales)
    diff = X1[:, None, :] - X2[None, :, :]
    K = spec.amplitude * np.exp(-0.5 * np.sum((diff / ls) ** 2, axis=-1))
    for i, dim in enumerate(space.trace_dims):
        w, beta, alpha = spec.trace_params[i]
        K = K * k1_factor(S1[:, None, dim], S2[None, :, dim], w, beta, alpha)
    for j, dim in enumerate(space.nontrace_dims):
        c, delta = spec.nontrace_params[j]
        K = K * k2_factor(S1[:, None, dim], S2[None, :, dim], c, delta)
    return K


def kernel_eval(spec: KernelSpec, space: FidelitySpace, z1, z2) -> float:
    """Covariance between two single (point, fidelity) pairs."""
    x1, s1 = z1
    x2, s2 = z2
    return float(
        cov_matrix(
            spec,
            space,
            np.atleast_2d(np.asarray(x1, dtype=float)),
            np.atleast_2d(np.asarray(s1, dtype=float)),
            np.atleast_2d(np.asarray(x2, dtype=float)),
            np.atleast_2d(np.asarray(s2, dtype=float)),
        )[0, 0]
    )


def cov_grad_x1(
    spec: KernelSpec,
    space: FidelitySpace,
    X1,
    S1,
    X2,
    S2,
    K: np.ndarray | None = None,
) -> np.ndarray:
    """d cov / d(first-argument design coordinates), shape (n1, n2, d)."""
    X1 = np.atleast_2d(np.asarray(X1, dtype=float))
    X2 = np.atleast_2d(np.asarray(X2, dtype=float))
    if K is None:
        K = cov_matrix(spec, space, X1, S1, X2, S2)
    ls = np.asarray(spec.lengthscales)
    diff = X1[:, None, :] - X2[None, :, :]
    return K[:, :, None] * (-diff / ls**2)


def _k1_ds1(a, b, w: float, beta: float, alpha: float):
    ba = beta**alpha
    return -ba / (np.asarray(a) + np.asarray(b) + ba) ** 2


def _k2_ds1(a, b, c: float, delta: float):
    e = 1.0 + delta
    return -e * np.power(np.maximum(1.0 - np.asarray(a), 0.0), delta) * np.power(
        1.0 - np.asarray(b), e
    )


def cov_grad_s1(
    spec: KernelSpec,
    space: FidelitySpace,
    X1,
    S1,
    X2,
    S2,
    K: np.ndarray | None = None,
) -> np.ndarray:
    """d cov / d(first-argument fidelity coordinates), shape (n1, n2, m).

    Factor values are strictly positive under the spec invariants, so the
    per-dimension derivative is recovered as K / factor * dfactor.
    """
    S1 = np.atleast_2d(np.asarray(S1, dtype=float))
    S2 = np.atleast_2d(np.asarray(S2, dtype=float))
    if K is None:
        K = cov_matrix(spec, space, X1, S1, X2, S2)
    out = np.zeros(K.shape + (space.m,))
    for i, dim in enumerate(space.trace_dims):
        w, beta, alpha = spec.trace_params[i]
        a = S1[:, None, dim]
        b = S2[None, :, dim]
        factor = k1_factor(a, b, w, beta, alpha)
        out[:, :, dim] = K / factor * _k1_ds1(a, b, w, beta, alpha)
    for j, dim in enumerate(space.nontrace_dims):
        c, delta = spec.nontrace_params[j]
        a = S1[:, None, dim]
        b = S2[None, :, dim]
        factor = k2_factor(a, b, c, delta)
        out[:, :, dim] = K / factor * _k2_ds1(a, b, c, delta)
    return out


# ---------------------------------------------------------------------------
# Hyperparameter vectorization (used by marginal-likelihood inference)
# ---------------------------------------------------------------------------

def log_param_names(d: int, space: FidelitySpace) -> list[str]:
    names = ["log_amplitude"] + [f"log_lengthscale_{k}" for k in range(d)]
    for i in range(space.m1):
        names += [f"log_w_{i}", f"log_beta_{i}", f"log_alpha_{i}"]
    for j in range(space.m2):
        names += [f"log_c_{j}", f"log_delta_{j}"]
    names.append("log_noise_var")
    return names


def spec_to_log_vector(spec: KernelSpec, noise_floor: float = 1e-12) -> np.ndarray:
    vals = [spec.amplitude, *spec.lengthscales]
    for row in spec.trace_params:
        vals.extend(row)
    for row in spec.nontrace_params:
        vals.extend(row)
    vals.append(max(spec.noise_var, noise_floor))
    return np.log(np.asarray(vals, dtype=float))


def spec_from_log_vector(theta: np.ndarray, d: int, space: FidelitySpace) -> KernelSpec:
    vals = np.exp(np.asarray(theta, dtype=float))
    expected = 1 + d + 3 * space.m1 + 2 * space.m2 + 1
    if vals.shape != (expected,):
        raise ValueError(f"expected {expected} log-parameters, got {vals.shape}")
    pos = 1 + d
    trace = []
    for _ in range(space.m1):
        trace.append(tuple(vals[pos : pos + 3]))
        pos += 3
    nontrace = []
    for _ in range(space.m2):
        nontrace.append(tuple(vals[pos : pos + 2]))
        pos += 2
    return KernelSpec(
        amplitude=float(vals[0]),
        lengthscales=tuple(vals[1 : 1 + d]),
        trace_params=tuple(trace),
        nontrace_params=tuple(nontrace),
        noise_var=float(vals[-1]),
    )


def cov_matrix_param_grads(
    spec: KernelSpec, space: FidelitySpace, X: np.ndarray, S: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Covariance of one batch with itself plus d K / d(log params).

    Returns (K, G) with G of shape (n_params, n, n); the trailing noise
    parameter contributes sigma^2 * I.  Used by the marginal-likelihood
    gradient.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    S = np.atleast_2d(np.asarray(S, dtype=float))
    n = X.shape[0]
    d = spec.d
    ls = np.asarray(spec.lengthscales)
    diff = X[:, None, :] - X[None, :, :]
    sq = (diff / ls) ** 2
    design = spec.amplitude * np.exp(-0.5 * np.sum(sq, axis=-1))

    factors = [design]
    for i, dim in enumerate(space.trace_dims):
        w, beta, alpha = spec.trace_params[i]
        factors.append(k1_factor(S[:, None, dim], S[None, :, dim], w, beta, alpha))
    for j, dim in enumerate(space.nontrace_dims):
        c, delta = spec.nontrace_params[j]
        factors.append(k2_factor(S[:, None, dim], S[None, :, dim], c, delta))
    K = np.prod(factors, axis=0)

    n_params = 1 + d + 3 * space.m1 + 2 * space.m2 + 1
    G = np.zeros((n_params, n, n))
    G[0] = K  # d/d log amplitude
    for k in range(d):
        G[1 + k] = K * sq[:, :, k]  # d/d log lengthscale_k
    pos = 1 + d
    for i, dim in enumerate(space.trace_dims):
        w, beta, alpha = spec.trace_params[i]
        ba = beta**alpha
        ssum = S[:, None, dim] + S[None, :, dim]
        denom = ssum + ba
        factor = w + ba / denom
        rest = K / factor
        dK1_dB = ssum / denom**2
        G[pos] = rest * w
        G[pos + 1] = rest * dK1_dB * (alpha * ba)  # d ba / d log beta
        G[pos + 2] = rest * dK1_dB * (alpha * ba * np.log(beta))  # d ba / d log alpha
        pos += 3
    for j, dim in enumerate(space.nontrace_dims):
        c, delta = spec.nontrace_params[j]
        e = 1.0 + delta
        one_a = np.maximum(1.0 - S[:, dim], 0.0)
        u = np.power(one_a, e)
        # u * log(1-s) -> 0 as s -> 1
        du = np.where(one_a > 0.0, u * np.log(np.maximum(one_a, 1e-300)), 0.0)
        factor = c + u[:, None] * u[None, :]
        rest = K / factor
        G[pos] = rest * c
        G[pos + 1] = rest * delta * (du[:, None] * u[None, :] + u[:, None] * du[None, :])
        pos += 2
    G[-1] = spec.noise_var * np.eye(n)
    return K, G


# ---------------------------------------------------------------------------
# Cholesky with escalating jitter
# ---------------------------------------------------------------------------

JITTER_START = 1e-10
JITTER_MAX = 1e-6


def chol_with_jitter(A: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of A, escalating diagonal jitter 1e-10 -> 1e-6.

    Raises NumericalError with a diagnostic if the matrix stays non-PD.
    """
    A = np.asarray(A, dtype=float)
    try:
        return np.linalg.cholesky(A), 0.0
    except np.linalg.LinAlgError:
        pass
    jitter = JITTER_START
    eye = np.eye(A.shape[0])
    while jitter <= JITTER_MAX * (1 + 1e-12):
        try:
            return np.linalg.cholesky(A + jitter * eye), jitter
        except np.linalg.LinAlgError:
            jitter *= 10.0
    eigs = np.linalg.eigvalsh(A)
    raise NumericalError(
        f"covariance not positive definite after jitter up to {JITTER_MAX:g}; "
        f"eigenvalue range [{eigs.min():.3e}, {eigs.max():.3e}], n={A.shape[0]}"
    )
