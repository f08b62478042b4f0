"""Value-of-information acquisition functions over trace observations.

The central quantity is the expected post-observation minimum: after
hypothetically observing a point x at a set of fidelities, the posterior
mean at full fidelity shifts linearly in a standard normal vector W, with
coefficient row sigma_tilde(x', x, S).  Averaging the inner minimum of
``mean + sigma_tilde @ W`` over W draws yields a Monte-Carlo estimate,
and differences of such estimates give the value of information.

The inner minimization is a multistart projected first-order descent with
analytic gradients, vectorized across draws, starts and independent
problem groups so that one call batches everything into dense matmuls.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.stats import norm

from .fidelity import FidelitySet, FidelitySpace, zero_set
from .gp import GaussianProcess, GpEnsemble
from .kernels import chol_with_jitter, cov_matrix


@dataclass(frozen=True)
class InnerConfig:
    """Settings of the inner minimization over candidate solutions.

    ``multistart`` runs full descent from every start (uniform draws plus
    jittered copies of the posterior-mean minimizer).  ``coarse-polish``
    scores a shared candidate cloud per draw and polishes the two best,
    which is much cheaper inside stochastic-gradient iterations.
    """

    mode: str = "multistart"
    uniform_starts: int = 4
    center_starts: int = 4
    iters: int = 60
    coarse_points: int = 32
    polish_iters: int = 15
    step0: float = 0.2
    tie_value_tol: float = 1e-6
    tie_dist_tol: float = 1e-2


@dataclass(frozen=True)
class LossEstimate:
    value: float
    std_error: float
    reps: int


def _as_members(gp) -> tuple[list[GaussianProcess], float, float, np.ndarray]:
    """Normalize a GpEnsemble or bare GaussianProcess plus bounds/scaling."""
    if isinstance(gp, GpEnsemble):
        return gp.members, gp.y_shift, gp.y_scale, gp.x_bounds
    raise TypeError("expected a GpEnsemble (wrap a single posterior with ensemble_of)")


def ensemble_of(member: GaussianProcess, x_bounds) -> GpEnsemble:
    """Wrap one fitted posterior as a trivial ensemble with a design box."""
    return GpEnsemble(
        members=[member], x_bounds=np.asarray(x_bounds, dtype=float), space=member.space
    )


# ---------------------------------------------------------------------------
# Per-member simulation context over grouped observation inputs
# ---------------------------------------------------------------------------

class GroupContext:
    """Posterior pieces for G independent observation plans of one member.

    Every plan holds p observation inputs (x_o, s_o).  Queries are always
    at full fidelity, so the query-side kernel splits into a squared
    exponential in x times a fixed per-column fidelity factor, and all
    batched evaluations reduce to matrix products.
    """

    def __init__(self, member: GaussianProcess, Xo: np.ndarray, So: np.ndarray):
        self.member = member
        spec, space = member.spec, member.space
        Xo = np.asarray(Xo, dtype=float)
        So = np.asarray(So, dtype=float)
        if Xo.ndim == 2:
            Xo, So = Xo[None], So[None]
        self.Xo, self.So = Xo, So
        self.G, self.p, _ = Xo.shape
        self.inv_ls2 = 1.0 / np.asarray(spec.lengthscales) ** 2
        n = member.n
        # fidelity factor of K0((., 1), (x_i, s_i)) per training row
        self.f_train = self._fid_factor(member.S) if n else np.zeros(0)
        self.amp = spec.amplitude

        # K0(train, obs) and A0^{-1} K0(train, obs), grouped
        if n:
            flat_obs_X = Xo.reshape(-1, Xo.shape[-1])
            flat_obs_S = So.reshape(-1, So.shape[-1])
            k_to = cov_matrix(spec, space, member.X, member.S, flat_obs_X, flat_obs_S)
            W = cho_solve((member.L, True), k_to)
            self.k_train_obs = k_to.reshape(n, self.G, self.p).transpose(1, 0, 2)
            self.Wmat = W.reshape(n, self.G, self.p).transpose(1, 0, 2)  # (G, n, p)
        else:
            self.k_train_obs = np.zeros((self.G, 0, self.p))
            self.Wmat = np.zeros((self.G, 0, self.p))

        # A = K_n(obs, obs) + noise, factorized per group
        self.A = np.empty((self.G, self.p, self.p))
        self.D = np.empty_like(self.A)
        self.Dinv = np.empty_like(self.A)
        eye = np.eye(self.p)
        for g in range(self.G):
            K_oo = cov_matrix(spec, space, Xo[g], So[g], Xo[g], So[g])
            if n:
                K_oo = K_oo - self.k_train_obs[g].T @ self.Wmat[g]
            A = K_oo + spec.noise_var * eye
            D, _ = chol_with_jitter(A)
            self.A[g] = A
            self.D[g] = D
            self.Dinv[g] = solve_triangular(D, eye, lower=True)

        # fidelity factor of K0((., 1), (x_o, s_o)) per observation column
        self.f_obs = self._fid_factor(So.reshape(-1, space.m)).reshape(self.G, self.p)

    def _fid_factor(self, S2: np.ndarray) -> np.ndarray:
        """prod of fidelity kernel factors between full fidelity and rows of S2."""
        spec, space = self.member.spec, self.member.space
        S2 = np.atleast_2d(S2)
        ones = np.ones((1, space.m))
        x0 = np.zeros((1, spec.d))
        return cov_matrix(spec, space, x0, ones, np.zeros((S2.shape[0], spec.d)), S2)[0] / spec.amplitude

    # -- query-side evaluations ---------------------------------------------

    def _se_train(self, Xq_flat: np.ndarray) -> np.ndarray:
        """Squared-exponential design factor vs training inputs, (B, n)."""
        X = self.member.X
        sq = (
            ((Xq_flat**2) @ self.inv_ls2)[:, None]
            + ((X**2) @ self.inv_ls2)[None, :]
            - 2.0 * (Xq_flat * self.inv_ls2) @ X.T
        )
        return self.amp * np.exp(-0.5 * np.maximum(sq, 0.0))

    def _se_obs(self, Xq: np.ndarray) -> np.ndarray:
        """Design factor vs grouped observation inputs, (G, B, p)."""
        sq = (
            np.einsum("gbd,d->gb", Xq**2, self.inv_ls2)[:, :, None]
            + np.einsum("gpd,d->gp", self.Xo**2, self.inv_ls2)[:, None, :]
            - 2.0 * np.einsum("gbd,gpd->gbp", Xq * self.inv_ls2, self.Xo)
        )
        return self.amp * np.exp(-0.5 * np.maximum(sq, 0.0))

    def mean_parts(self, Xq: np.ndarray, want_grad: bool):
        """Posterior mean at (Xq, 1) and optionally its x-gradient."""
        G, B, d = Xq.shape
        member = self.member
        if member.n == 0:
            mean = np.full((G, B), member.mu0)
            grad = np.zeros((G, B, d)) if want_grad else None
            return mean, grad, None
        flat = Xq.reshape(-1, d)
        kq = self._se_train(flat) * self.f_train[None, :]
        a = member.alpha
        mean = (member.mu0 + kq @ a).reshape(G, B)
        if not want_grad:
            return mean, None, kq
        wa = kq * a[None, :]
        grad = (-flat * self.inv_ls2) * (wa.sum(axis=1, keepdims=True)) + (
            wa @ (member.X * self.inv_ls2)
        )
        return mean, grad.reshape(G, B, d), kq

    def cross_cov(self, Xq: np.ndarray, kq_flat: np.ndarray | None = None) -> np.ndarray:
        """Posterior covariance K_n((Xq, 1), obs), shape (G, B, p)."""
        G, B, d = Xq.shape
        k_obs = self._se_obs(Xq) * self.f_obs[:, None, :]
        if self.member.n == 0:
            return k_obs
        if kq_flat is None:
            kq_flat = self._se_train(Xq.reshape(-1, d)) * self.f_train[None, :]
        kq = kq_flat.reshape(G, B, -1)
        return k_obs - np.einsum("gbn,gnp->gbp", kq, self.Wmat)

    def sigma_tilde(self, Xq: np.ndarray) -> np.ndarray:
        """sigma_tilde rows at (Xq, 1): cross @ D^{-T}, shape (G, B, p)."""
        cross = self.cross_cov(Xq)
        return np.einsum("gbp,gqp->gbq", cross, self.Dinv)

    def objective(self, Xq: np.ndarray, U: np.ndarray | None, want_grad: bool):
        """mean + cross . U and its x-gradient, batched.

        ``U`` (G, B, p) is D^{-T} W per row; passing None evaluates the
        bare posterior mean (used for the no-observation benchmark).
        """
        G, B, d = Xq.shape
        mean, dmean, kq_flat = self.mean_parts(Xq, want_grad)
        if U is None or self.p == 0:
            return mean, dmean
        k_obs = self._se_obs(Xq) * self.f_obs[:, None, :]
        if self.member.n:
            kq = kq_flat.reshape(G, B, -1)
            cross = k_obs - np.einsum("gbn,gnp->gbp", kq, self.Wmat)
        else:
            cross = k_obs
        h = mean + np.einsum("gbp,gbp->gb", cross, U)
        if not want_grad:
            return h, None
        # obs part: sum_e U_e k_obs_e * (-(x - x_e)/l^2)
        uk = U * k_obs
        grad = dmean.copy()
        grad += (-Xq * self.inv_ls2) * uk.sum(axis=2, keepdims=True) + np.einsum(
            "gbp,gpd->gbd", uk, self.Xo * self.inv_ls2
        )
        if self.member.n:
            wu = np.einsum("gnp,gbp->gbn", self.Wmat, U)
            vk = kq * wu
            grad -= (-Xq * self.inv_ls2) * vk.sum(axis=2, keepdims=True) + np.einsum(
                "gbn,nd->gbd", vk, self.member.X * self.inv_ls2
            )
        return h, grad


# ---------------------------------------------------------------------------
# Batched projected first-order descent
# ---------------------------------------------------------------------------

def batch_descend(fun, P0: np.ndarray, bounds: np.ndarray, iters: int, step0: float = 0.2):
    """Armijo backtracking projected descent, vectorized over problems.

    ``fun(P, want_grad)`` evaluates rows of P independently.  Steps grow
    on success and shrink on rejection; rows stop moving once the step
    underflows or the projected step stalls on the box boundary.
    """
    lo, hi = bounds[:, 0], bounds[:, 1]
    P = np.clip(P0, lo, hi)
    f, g = fun(P, True)
    t = np.full(f.shape, step0)
    for _ in range(iters):
        C = np.clip(P - t[..., None] * g, lo, hi)
        move = C - P
        pred = -np.sum(g * move, axis=-1)
        fc, gc = fun(C, True)
        accept = fc <= f - 1e-4 * pred
        stalled = np.max(np.abs(move), axis=-1) < 1e-12
        upd = accept & ~stalled
        P = np.where(upd[..., None], C, P)
        f = np.where(upd, fc, f)
        g = np.where(upd[..., None], gc, g)
        t = np.where(accept, np.minimum(t * 1.5, 2.0), t * 0.4)
        if np.all(stalled | (t < 1e-10)):
            break
    return P, f


@dataclass
class InnerResult:
    values: np.ndarray  # (G, R)
    argmins: np.ndarray  # (G, R, d)
    ties: np.ndarray  # (G, R) bool


def minimize_inner(
    contexts: list[GroupContext],
    weights: np.ndarray,
    W: np.ndarray | None,
    bounds: np.ndarray,
    rng: np.random.Generator,
    cfg: InnerConfig,
    center: np.ndarray | None = None,
) -> InnerResult:
    """Minimize mean + sigma_tilde.W over the design box for every draw.

    ``contexts`` hold one GroupContext per ensemble member sharing plan
    shapes; the objective averages members with the given weights (the
    hyperparameter-ensemble average).  W has shape (G, R, p); None means
    the deterministic no-observation problem (R = 1).
    """
    G = contexts[0].G
    p = contexts[0].p
    d = bounds.shape[0]
    R = 1 if W is None else W.shape[1]
    Us = None
    if W is not None:
        Us = [np.einsum("gqp,grq->grp", c.Dinv, W) for c in contexts]

    def eval_at(P, want_grad, take):
        """P: (G, B, d); take maps each of the B columns to a draw index."""
        h = None
        g = None
        for wgt, ctx, U in zip(weights, contexts, Us or [None] * len(contexts)):
            Up = None if U is None else U[:, take, :]
            hv, gv = ctx.objective(P, Up, want_grad)
            h = wgt * hv if h is None else h + wgt * hv
            if want_grad:
                g = wgt * gv if g is None else g + wgt * gv
        return h, g

    lo, hi = bounds[:, 0], bounds[:, 1]
    span = hi - lo

    if cfg.mode == "coarse-polish" and W is not None:
        M = cfg.coarse_points
        cands = lo + span * rng.uniform(size=(M, d))
        if center is not None:
            extra = np.clip(
                center[None, :] + 0.05 * span * rng.standard_normal((max(M // 4, 2), d)), lo, hi
            )
            cands = np.vstack([cands, center[None, :], extra])
        Mq = cands.shape[0]
        Pc = np.broadcast_to(cands, (G, Mq, d))
        hc = None
        for wgt, ctx, U in zip(weights, contexts, Us):
            mean, _, _ = ctx.mean_parts(Pc, False)
            st = ctx.sigma_tilde(Pc)  # (G, Mq, p)
            vals = mean[:, :, None] + np.einsum("gmp,grp->gmr", st, W)
            hc = wgt * vals if hc is None else hc + wgt * vals
        order = np.argsort(hc, axis=1)  # (G, Mq, R)
        best1 = order[:, 0, :]  # (G, R)
        best2 = order[:, 1, :] if Mq > 1 else best1
        starts = np.stack([cands[best1], cands[best2]], axis=2)  # (G, R, 2, d)
        K = 2
    else:
        Ku, Kc = cfg.uniform_starts, (cfg.center_starts if center is not None else 0)
        uni = lo + span * rng.uniform(size=(Ku, d))
        pieces = [uni]
        if Kc:
            jit = center[None, :] + 0.05 * span * rng.standard_normal((Kc, d))
            pieces.append(np.clip(jit, lo, hi))
        base = np.vstack(pieces)
        if base.shape[0] == 0:
            base = (0.5 * (lo + hi))[None, :]
        K = base.shape[0]
        starts = np.broadcast_to(base[None, None], (G, R, K, d)).copy()

    take = np.repeat(np.arange(R), starts.shape[2])
    P0 = starts.reshape(G, R * starts.shape[2], d)
    iters = cfg.polish_iters if cfg.mode == "coarse-polish" and W is not None else cfg.iters
    P, f = batch_descend(lambda P, wg: eval_at(P, wg, take), P0, np.column_stack([lo, hi]), iters, cfg.step0)
    K = starts.shape[2]
    f = f.reshape(G, R, K)
    P = P.reshape(G, R, K, d)
    best = np.argmin(f, axis=2)
    gi, ri = np.meshgrid(np.arange(G), np.arange(R), indexing="ij")
    values = f[gi, ri, best]
    argmins = P[gi, ri, best]

    # near-tied distinct minimizers make the envelope gradient ill-defined
    ties = np.zeros((G, R), dtype=bool)
    if K > 1:
        dist = np.max(np.abs(P - argmins[:, :, None, :]), axis=3)
        distinct = dist > cfg.tie_dist_tol
        close = (f - values[:, :, None]) < cfg.tie_value_tol
        ties = np.any(distinct & close, axis=2)
    return InnerResult(values=values, argmins=argmins, ties=ties)


def minimize_posterior_mean(gp: GpEnsemble, seed: int = 0, cfg: InnerConfig | None = None):
    """Multistart minimizer of the ensemble-averaged posterior mean at s=1."""
    cached = gp._min_cache.get(seed)
    if cached is not None:
        return cached
    members, shift, scale, bounds = _as_members(gp)
    cfg = cfg or InnerConfig(uniform_starts=12, center_starts=0, iters=80)
    rng = np.random.default_rng(seed)
    contexts = [GroupContext(m, np.zeros((1, 0, gp.d)), np.zeros((1, 0, gp.space.m))) for m in members]
    weights = np.full(len(members), 1.0 / len(members))
    res = minimize_inner(contexts, weights, None, bounds, rng, cfg, center=None)
    out = (res.argmins[0, 0].copy(), shift + scale * float(res.values[0, 0]))
    gp._min_cache[seed] = out
    return out


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------

def sigma_tilde(member: GaussianProcess, x_query, x, S: FidelitySet | np.ndarray) -> np.ndarray:
    """Row vector mapping a standard normal draw to the shift of the
    full-fidelity posterior mean at ``x_query`` after observing ``x`` at
    the given fidelities."""
    fids = S.as_array() if isinstance(S, FidelitySet) else np.atleast_2d(np.asarray(S, float))
    p = len(fids)
    Xo = np.broadcast_to(np.asarray(x, dtype=float), (p, member.spec.d))
    ctx = GroupContext(member, Xo[None], fids[None])
    xq = np.asarray(x_query, dtype=float).reshape(1, 1, -1)
    return ctx.sigma_tilde(xq)[0, 0]


def _plan_arrays(x, fids, d: int):
    fids = np.atleast_2d(np.asarray(fids, dtype=float))
    p = len(fids)
    Xo = np.broadcast_to(np.asarray(x, dtype=float).reshape(d), (p, d)).copy()
    return Xo, fids


def simulate_expected_min(
    gp: GpEnsemble,
    x,
    fidelities,
    reps: int = 1024,
    seed: int = 0,
    inner: InnerConfig | None = None,
) -> LossEstimate:
    """Monte-Carlo estimate of the expected post-observation minimum.

    With an empty fidelity list this is the deterministic minimum of the
    posterior mean (the no-observation benchmark), with zero standard
    error.  Estimates average the hyperparameter-ensemble members, which
    share the W draws; deterministic for a fixed seed.
    """
    members, shift, scale, bounds = _as_members(gp)
    inner = inner or InnerConfig()
    weights = np.full(len(members), 1.0 / len(members))
    rng = np.random.default_rng(seed)
    fids = [] if fidelities is None else list(np.atleast_2d(np.asarray(fidelities, dtype=float)))
    center, center_val = minimize_posterior_mean(gp, seed=seed)
    if not fids:
        return LossEstimate(value=center_val, std_error=0.0, reps=1)
    if reps < 1:
        raise ValueError("reps must be >= 1")
    Xo, So = _plan_arrays(x, fids, gp.d)
    contexts = [GroupContext(m, Xo[None], So[None]) for m in members]
    W = rng.standard_normal((1, reps, len(fids)))
    res = minimize_inner(contexts, weights, W, bounds, rng, inner, center=center)
    vals = shift + scale * res.values[0]
    se = float(np.std(vals, ddof=1) / np.sqrt(reps)) if reps > 1 else 0.0
    return LossEstimate(value=float(np.mean(vals)), std_error=se, reps=reps)


def _coupled_zero_avoiding(gp, x, S: FidelitySet, reps, seed, inner):
    """(L(C) - L(S u C)) draws under coupled W, plus standard error."""
    members, shift, scale, bounds = _as_members(gp)
    inner = inner or InnerConfig()
    weights = np.full(len(members), 1.0 / len(members))
    rng = np.random.default_rng(seed)
    center, _ = minimize_posterior_mean(gp, seed=seed)
    c_list = S.zero_set()
    sc_list = c_list + list(S.as_array())
    Xc, Sc = _plan_arrays(x, c_list, gp.d)
    Xsc, Ssc = _plan_arrays(x, sc_list, gp.d)
    ctx_c = [GroupContext(m, Xc[None], Sc[None]) for m in members]
    ctx_sc = [GroupContext(m, Xsc[None], Ssc[None]) for m in members]
    W = rng.standard_normal((1, reps, len(sc_list)))
    res_c = minimize_inner(ctx_c, weights, W[:, :, : len(c_list)], bounds, rng, inner, center=center)
    res_sc = minimize_inner(ctx_sc, weights, W, bounds, rng, inner, center=center)
    diffs = scale * (res_c.values[0] - res_sc.values[0])
    se = float(np.std(diffs, ddof=1) / np.sqrt(reps)) if reps > 1 else 0.0
    return float(np.mean(diffs)), se


def voi(gp: GpEnsemble, x, S, reps: int = 1024, seed: int = 0, inner=None) -> LossEstimate:
    """Value of information: benchmark minimum minus post-observation minimum."""
    fids = S.as_array() if isinstance(S, FidelitySet) else np.atleast_2d(np.asarray(S, float))
    base = simulate_expected_min(gp, x, None, reps=1, seed=seed, inner=inner)
    est = simulate_expected_min(gp, x, fids, reps=reps, seed=seed, inner=inner)
    return LossEstimate(value=base.value - est.value, std_error=est.std_error, reps=reps)


def voi_zero_avoiding(
    gp: GpEnsemble, x, S: FidelitySet, reps: int = 1024, seed: int = 0, inner=None
) -> LossEstimate:
    """Zero-avoiding value of information.

    Exactly 0 (no simulation) when the elementwise maximum fidelity has a
    zero component: every retained fidelity then lies in its own zeroed
    set and the free observations already contain everything offered.
    """
    if float(np.min(S.max_s)) == 0.0:
        return LossEstimate(value=0.0, std_error=0.0, reps=0)
    value, se = _coupled_zero_avoiding(gp, x, S, reps, seed, inner)
    return LossEstimate(value=value, std_error=se, reps=reps)


def takg(gp, cost_model, x, S, reps: int = 1024, seed: int = 0, inner=None) -> float:
    """Value of information per unit predicted cost at the maximum fidelity."""
    est = voi(gp, x, S, reps=reps, seed=seed, inner=inner)
    max_s = S.max_s if isinstance(S, FidelitySet) else np.max(np.atleast_2d(np.asarray(S, float)), axis=0)
    return est.value / cost_model.predict(x, max_s)


def takg_zero_avoiding(
    gp, cost_model, x, S: FidelitySet, reps: int = 1024, seed: int = 0, inner=None
) -> float:
    est = voi_zero_avoiding(gp, x, S, reps=reps, seed=seed, inner=inner)
    if est.reps == 0:
        return 0.0
    return est.value / cost_model.predict(x, S.max_s)


def knowledge_gradient(gp: GpEnsemble, x, reps: int = 1024, seed: int = 0, inner=None) -> float:
    """Single-fidelity knowledge gradient: VOI of a full-fidelity observation."""
    ones = np.ones((1, gp.space.m))
    return voi(gp, x, ones, reps=reps, seed=seed, inner=inner).value


def expected_improvement(gp: GpEnsemble, x) -> float:
    """Closed-form expected improvement at full fidelity.

    The incumbent is the best posterior mean among training inputs
    observed at full fidelity; improvement is averaged over ensemble
    members.  Requires at least one full-fidelity observation.
    """
    members, shift, scale, _ = _as_members(gp)
    vals = []
    for m in members:
        inc = _member_incumbent(m)
        mu = float(m.mean(np.atleast_2d(np.asarray(x, float)), np.ones((1, m.space.m)))[0])
        var = float(m.var(np.atleast_2d(np.asarray(x, float)), np.ones((1, m.space.m)))[0])
        vals.append(_ei_closed_form(inc, mu, np.sqrt(var)))
    return scale * float(np.mean(vals))


def _member_incumbent(m: GaussianProcess) -> float:
    full = np.all(np.abs(m.S - 1.0) < 1e-12, axis=1)
    if not np.any(full):
        raise ValueError("expected improvement needs at least one full-fidelity observation")
    X_full = m.X[full]
    return float(np.min(m.mean(X_full, np.ones((X_full.shape[0], m.space.m)))))


def _ei_closed_form(incumbent: float, mu: float, sigma: float) -> float:
    if sigma <= 1e-14:
        return max(incumbent - mu, 0.0)
    z = (incumbent - mu) / sigma
    return (incumbent - mu) * norm.cdf(z) + sigma * norm.pdf(z)


def maximize_expected_improvement(gp: GpEnsemble, seed: int = 0, starts: int = 12, iters: int = 80):
    """Multistart first-order maximization of EI over the design box."""
    members, shift, scale, bounds = _as_members(gp)
    lo, hi = bounds[:, 0], bounds[:, 1]
    d = bounds.shape[0]
    rng = np.random.default_rng(seed)
    incs = [_member_incumbent(m) for m in members]
    ones = None

    def neg_ei(P, want_grad):
        # P: (1, B, d) to reuse batch_descend's group layout
        flat = P.reshape(-1, d)
        B = flat.shape[0]
        total = np.zeros(B)
        grad = np.zeros((B, d))
        for m, inc in zip(members, incs):
            S1 = np.ones((B, m.space.m))
            mu = m.mean(flat, S1)
            dmu = m.mean_grad_x(flat, S1)
            var = m.var(flat, S1)
            sig = np.sqrt(np.maximum(var, 1e-18))
            dvar = _var_grad_x(m, flat)
            dsig = dvar / (2.0 * sig[:, None])
            z = (inc - mu) / sig
            pdf, cdf = norm.pdf(z), norm.cdf(z)
            total += (inc - mu) * cdf + sig * pdf
            grad += -dmu * cdf[:, None] + dsig * pdf[:, None]
        k = len(members)
        return -(total / k).reshape(P.shape[:2]), -(grad / k).reshape(P.shape)

    P0 = (lo + (hi - lo) * rng.uniform(size=(starts, d)))[None]
    P, f = batch_descend(neg_ei, P0, bounds, iters)
    best = int(np.argmin(f[0]))
    return P[0, best], scale * float(-f[0, best])


def _var_grad_x(m: GaussianProcess, X_flat: np.ndarray) -> np.ndarray:
    """d Var / dx at full fidelity: the prior term is x-independent."""
    if m.n == 0:
        return np.zeros_like(X_flat)
    S1 = np.ones((X_flat.shape[0], m.space.m))
    k = cov_matrix(m.spec, m.space, X_flat, S1, m.X, m.S)
    w = cho_solve((m.L, True), k.T).T  # (B, n)
    inv_ls2 = 1.0 / np.asarray(m.spec.lengthscales) ** 2
    kw = k * w
    term = (-X_flat * inv_ls2) * kw.sum(axis=1, keepdims=True) + kw @ (m.X * inv_ls2)
    return -2.0 * term
