"""Stochastic-gradient maximization of the acquisition functions.

A candidate is parameterized by d + ell*m1 + m2 numbers per evaluation
block: the design point, the fidelity vector actually evaluated (the
elementwise maximum of the retained set), and the trace coordinates of
each additional retained fidelity.  Non-trace coordinates are shared by
every member of the set.

For a fixed standard normal draw W, the envelope theorem gives an
unbiased gradient draw of the expected post-observation minimum: the
derivative of sigma_tilde at the inner minimizer, contracted with W,
holding the minimizer fixed.  The derivative flows through both the
cross-covariance vector and the Cholesky factor of the observation
covariance.  Projected stochastic gradient ascent with a diminishing step
sequence then climbs the cost-normalized acquisition from several
restarts, and the final candidates are ranked by a common-seed
high-replication evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve

from .acquisition import GroupContext, InnerConfig, minimize_inner, minimize_posterior_mean
from .cost import COST_FLOOR
from .fidelity import FidelitySet, FidelitySpace
from .gp import GpEnsemble
from .kernels import cov_grad_s1, cov_grad_x1, cov_matrix


class TiedMinimizersError(RuntimeError):
    """The inner problem had two distant near-optimal minimizers; the
    envelope gradient is ill-defined for this draw."""


# ---------------------------------------------------------------------------
# Candidate parameterization
# ---------------------------------------------------------------------------

@dataclass
class CandidateStructure:
    """Maps decision vectors to evaluation blocks and observation plans.

    ``fid_bounds`` (q, m, 2) box-constrains each block's maximum fidelity;
    equal bounds pin a coordinate (used for single-fidelity strategies and
    for warm-start continuation, where non-trace coordinates must equal
    the parent's and trace coordinates may only grow).  ``x_fixed`` pins a
    block's design point.
    """

    space: FidelitySpace
    d: int
    ell: int
    x_bounds: np.ndarray
    q: int = 1
    fid_bounds: np.ndarray | None = None
    x_fixed: list | None = None

    def __post_init__(self):
        self.x_bounds = np.asarray(self.x_bounds, dtype=float).reshape(self.d, 2)
        m = self.space.m
        if self.fid_bounds is None:
            fb = np.zeros((self.q, m, 2))
            fb[:, :, 1] = 1.0
            self.fid_bounds = fb
        else:
            self.fid_bounds = np.asarray(self.fid_bounds, dtype=float).reshape(self.q, m, 2)
        if self.ell < 1:
            raise ValueError("ell must be >= 1")
        if self.space.m1 == 0 and self.ell != 1:
            raise ValueError("without trace dimensions the retained set is a single fidelity")

    @property
    def block_size(self) -> int:
        return self.d + self.space.m + (self.ell - 1) * self.space.m1

    @property
    def n_params(self) -> int:
        return self.q * self.block_size

    def _block_slices(self, b: int):
        off = b * self.block_size
        x_idx = np.arange(off, off + self.d)
        smax_idx = np.arange(off + self.d, off + self.d + self.space.m)
        t_idx = [
            np.arange(
                off + self.d + self.space.m + j * self.space.m1,
                off + self.d + self.space.m + (j + 1) * self.space.m1,
            )
            for j in range(self.ell - 1)
        ]
        return x_idx, smax_idx, t_idx

    def bounds(self) -> np.ndarray:
        out = np.zeros((self.n_params, 2))
        trace = self.space.trace_dims
        for b in range(self.q):
            x_idx, smax_idx, t_idx = self._block_slices(b)
            if self.x_fixed is not None and self.x_fixed[b] is not None:
                xf = np.asarray(self.x_fixed[b], dtype=float)
                out[x_idx, 0] = xf
                out[x_idx, 1] = xf
            else:
                out[x_idx] = self.x_bounds
            out[smax_idx] = self.fid_bounds[b]
            for idx in t_idx:
                out[idx, 0] = self.fid_bounds[b, trace, 0]
                out[idx, 1] = self.fid_bounds[b, trace, 1]
        return out

    def project(self, theta: np.ndarray) -> np.ndarray:
        """Clip to the box and repair the trace ordering t <= s_max."""
        bounds = self.bounds()
        theta = np.clip(theta, bounds[:, 0], bounds[:, 1])
        trace = self.space.trace_dims
        for b in range(self.q):
            _, smax_idx, t_idx = self._block_slices(b)
            smax_trace = theta[..., smax_idx[trace]]
            for idx in t_idx:
                theta[..., idx] = np.minimum(theta[..., idx], smax_trace)
        return theta

    def initial(self, rng: np.random.Generator, P: int, fid_floor: float = 0.15) -> np.ndarray:
        """Feasible random starting points, fidelities away from zero."""
        bounds = self.bounds()
        lo, hi = bounds[:, 0].copy(), bounds[:, 1]
        trace = self.space.trace_dims
        for b in range(self.q):
            _, smax_idx, t_idx = self._block_slices(b)
            for idx in np.concatenate([smax_idx[trace], *t_idx]) if len(trace) else smax_idx[:0]:
                lo[idx] = min(max(lo[idx], fid_floor), hi[idx])
            for idx in smax_idx[self.space.nontrace_dims]:
                lo[idx] = min(max(lo[idx], fid_floor), hi[idx])
        theta = lo + (hi - lo) * rng.uniform(size=(P, self.n_params))
        return self.project(theta)

    # -- decoding -------------------------------------------------------------

    def decode(self, theta: np.ndarray):
        """Decision vector -> [(x, member fidelities (ell, m))] per block."""
        theta = np.asarray(theta, dtype=float).reshape(self.n_params)
        out = []
        trace = self.space.trace_dims
        for b in range(self.q):
            x_idx, smax_idx, t_idx = self._block_slices(b)
            x = theta[x_idx]
            smax = theta[smax_idx]
            fids = [smax]
            for idx in t_idx:
                member = smax.copy()
                member[trace] = theta[idx]
                fids.append(member)
            out.append((x, np.array(fids)))
        return out

    def fidelity_set(self, theta: np.ndarray, block: int = 0) -> FidelitySet:
        _, fids = self.decode(theta)[block]
        return FidelitySet.of(self.space, fids)

    def member_theta_maps(self, b: int) -> list[np.ndarray]:
        """Per retained fidelity, the decision index of each coordinate."""
        _, smax_idx, t_idx = self._block_slices(b)
        trace = self.space.trace_dims
        maps = [smax_idx.copy()]
        for idx in t_idx:
            mp = smax_idx.copy()
            mp[trace] = idx
            maps.append(mp)
        return maps

    def smax_theta(self, b: int) -> np.ndarray:
        _, smax_idx, _ = self._block_slices(b)
        return smax_idx

    def x_theta(self, b: int) -> np.ndarray:
        x_idx, _, _ = self._block_slices(b)
        return x_idx

    def plan(self, kind: str) -> "ObsPlan":
        """Structural observation plan shared by all decision vectors.

        ``kind`` is "s" (the retained set), "c" (the zeroed variants) or
        "sc" (variants first, then the set, so that a W prefix drives the
        variant observations identically in both coupled terms).
        Zero-variant deduplication is structural: with a single trace
        dimension, zeroing it maps every member to the same fidelity.
        """
        elements = []  # (block, member_index or (member, zeroed dim))
        for b in range(self.q):
            c_elems, s_elems = [], []
            seen_shared_zero = False
            for j in range(self.ell):
                s_elems.append((b, j, None))
                for i in range(self.space.m):
                    if self.space.m1 == 1 and i == int(self.space.trace_dims[0]):
                        if seen_shared_zero:
                            continue
                        seen_shared_zero = True
                    c_elems.append((b, j, i))
            if kind == "s":
                elements.extend(s_elems)
            elif kind == "c":
                elements.extend(c_elems)
            elif kind == "sc":
                elements.extend(c_elems)
                elements.extend(s_elems)
            else:
                raise ValueError(f"unknown plan kind {kind!r}")
        return ObsPlan(structure=self, entries=tuple(elements))


@dataclass(frozen=True)
class ObsPlan:
    """Observation inputs as functions of the decision vector."""

    structure: CandidateStructure
    entries: tuple

    @property
    def p(self) -> int:
        return len(self.entries)

    def arrays(self, thetas: np.ndarray):
        """Grouped observation inputs (G, p, d) and (G, p, m)."""
        st = self.structure
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        G = thetas.shape[0]
        Xo = np.empty((G, self.p, st.d))
        So = np.empty((G, self.p, st.space.m))
        for g in range(G):
            blocks = st.decode(thetas[g])
            for e, (b, j, zeroed) in enumerate(self.entries):
                x, fids = blocks[b]
                Xo[g, e] = x
                fid = fids[j].copy()
                if zeroed is not None:
                    fid[zeroed] = 0.0
                So[g, e] = fid
        return Xo, So

    def fid_theta(self) -> np.ndarray:
        """Decision index per (element, fidelity dim); -1 when absent."""
        st = self.structure
        out = np.full((self.p, st.space.m), -1, dtype=int)
        for e, (b, j, zeroed) in enumerate(self.entries):
            mp = st.member_theta_maps(b)[j].copy()
            if zeroed is not None:
                mp[zeroed] = -1
            out[e] = mp
        return out

    def block_of(self) -> np.ndarray:
        return np.array([b for b, _, _ in self.entries], dtype=int)


# ---------------------------------------------------------------------------
# Gradient draws
# ---------------------------------------------------------------------------

def _phi_half(M: np.ndarray) -> np.ndarray:
    """Lower-half operator of Cholesky differentiation (strict lower + half diag)."""
    out = np.tril(M)
    diag = np.einsum("...ii->...i", out)
    diag *= 0.5
    return out


class _TermGradient:
    """Per-member gradient machinery for one observation plan."""

    def __init__(self, ctx: GroupContext, plan: ObsPlan, thetas: np.ndarray):
        self.ctx = ctx
        self.plan = plan
        st = plan.structure
        member = ctx.member
        spec, space = member.spec, member.space
        G, p = ctx.G, ctx.p
        self.G, self.p = G, p
        self.D_total = st.n_params

        Xo, So = ctx.Xo, ctx.So
        flatX = Xo.reshape(-1, st.d)
        flatS = So.reshape(-1, space.m)
        n = member.n

        # d/d(first argument) of the posterior kernel between observation rows
        K_oo = np.stack(
            [cov_matrix(spec, space, Xo[g], So[g], Xo[g], So[g]) for g in range(G)]
        )
        gx_oo = np.stack(
            [cov_grad_x1(spec, space, Xo[g], So[g], Xo[g], So[g], K=K_oo[g]) for g in range(G)]
        )
        gs_oo = np.stack(
            [cov_grad_s1(spec, space, Xo[g], So[g], Xo[g], So[g], K=K_oo[g]) for g in range(G)]
        )
        if n:
            k_ot = cov_matrix(spec, space, flatX, flatS, member.X, member.S)
            gx_ot = cov_grad_x1(spec, space, flatX, flatS, member.X, member.S, K=k_ot)
            gs_ot = cov_grad_s1(spec, space, flatX, flatS, member.X, member.S, K=k_ot)
            self.gx_ot = gx_ot.reshape(G, p, n, st.d)
            self.gs_ot = gs_ot.reshape(G, p, n, space.m)
            Wm = ctx.Wmat  # (G, n, p)
            self.Gx_oo = gx_oo - np.einsum("gend,gnj->gejd", self.gx_ot, Wm)
            self.Gs_oo = gs_oo - np.einsum("genm,gnj->gejm", self.gs_ot, Wm)
        else:
            self.gx_ot = np.zeros((G, p, 0, st.d))
            self.gs_ot = np.zeros((G, p, 0, space.m))
            self.Gx_oo = gx_oo
            self.Gs_oo = gs_oo

        # derivative of the observation fidelity factor vs full fidelity
        ones = np.ones((1, space.m))
        df = cov_grad_s1(
            spec, space, np.zeros((flatS.shape[0], spec.d)), flatS, np.zeros((1, spec.d)), ones
        )[:, 0, :] / spec.amplitude
        self.df_obs = df.reshape(G, p, space.m)

    def gradient(self, W: np.ndarray, xstars: np.ndarray) -> np.ndarray:
        """Mapped gradient draws (G, R, D_total) of the min-value estimate."""
        ctx, plan = self.ctx, self.plan
        st = plan.structure
        member = ctx.member
        G, p = self.G, self.p
        R = W.shape[1]
        d, m = st.d, st.space.m
        n = member.n
        inv_ls2 = ctx.inv_ls2

        # cross pieces at the per-draw minimizers (full fidelity queries)
        se_ox = np.empty((G, p, R))
        for g in range(G):
            sq = (
                ((ctx.Xo[g] ** 2) @ inv_ls2)[:, None]
                + ((xstars[g] ** 2) @ inv_ls2)[None, :]
                - 2.0 * (ctx.Xo[g] * inv_ls2) @ xstars[g].T
            )
            se_ox[g] = ctx.amp * np.exp(-0.5 * np.maximum(sq, 0.0))
        k0_ox = se_ox * ctx.f_obs[:, :, None]  # (G, p, R)

        if n:
            flat_star = xstars.reshape(-1, d)
            se_tr = ctx._se_train(flat_star) * ctx.f_train[None, :]  # (G*R, n)
            Vstar = cho_solve((member.L, True), se_tr.T).reshape(n, G, R).transpose(1, 0, 2)
            kn_ox = k0_ox - np.einsum("gnp,gnr->gpr", ctx.Wmat, se_tr.reshape(G, R, n).transpose(0, 2, 1))
        else:
            Vstar = np.zeros((G, 0, R))
            kn_ox = k0_ox
        Sig = np.einsum("gab,gbr->gar", ctx.Dinv, kn_ox)  # (G, p, R)

        # d k_n(obs_e, (x*,1)) / d(obs_e design coord c): (G, p, R, d)
        diff = ctx.Xo[:, :, None, :] - xstars[:, None, :, :]  # (G, p, R, d)
        gx_k = k0_ox[..., None] * (-diff * inv_ls2)
        if n:
            gx_k -= np.einsum("gpnc,gnr->gprc", self.gx_ot, Vstar)
        # d k_n(obs_e, (x*,1)) / d(obs_e fidelity coord i): (G, p, R, m)
        gs_k = se_ox[..., None] * self.df_obs[:, :, None, :]
        if n:
            gs_k -= np.einsum("gpni,gnr->gpri", self.gs_ot, Vstar)

        # raw coordinates: x coords per block, then mapped fidelity coords
        fid_theta = plan.fid_theta()
        block_of = plan.block_of()
        raw_dA = []
        raw_dk = []
        raw_targets = []
        for b in range(st.q):
            in_b = block_of == b
            x_idx = st.x_theta(b)
            for c in range(d):
                Gxc = self.Gx_oo[..., c]  # (G, p, p)
                dA = np.zeros((G, p, p))
                dA[:, in_b, :] += Gxc[:, in_b, :]
                dA[:, :, in_b] += np.transpose(Gxc[:, in_b, :], (0, 2, 1))
                dk = np.where(in_b[None, :, None], gx_k[..., c], 0.0)  # (G, p, R)
                raw_dA.append(dA)
                raw_dk.append(dk)
                raw_targets.append(x_idx[c])
        for e in range(p):
            for i in range(m):
                tgt = fid_theta[e, i]
                if tgt < 0:
                    continue
                dA = np.zeros((G, p, p))
                dA[:, e, :] += self.Gs_oo[:, e, :, i]
                dA[:, :, e] += self.Gs_oo[:, e, :, i]
                dk = np.zeros((G, p, R))
                dk[:, e, :] = gs_k[:, e, :, i]
                raw_dA.append(dA)
                raw_dk.append(dk)
                raw_targets.append(tgt)

        if not raw_dA:
            return np.zeros((G, R, self.D_total))
        dA = np.stack(raw_dA, axis=1)  # (G, T, p, p)
        dk = np.stack(raw_dk, axis=1)  # (G, T, p, R)
        M = np.einsum("gab,gtbc,gdc->gtad", ctx.Dinv, dA, ctx.Dinv)
        dD = np.einsum("gab,gtbc->gtac", ctx.D, _phi_half(M))
        u = dk - np.einsum("gtab,gbr->gtar", dD, Sig)
        v = np.einsum("gab,gtbr->gtar", ctx.Dinv, u)
        g_raw = np.einsum("gtpr,grp->gtr", v, W)

        out = np.zeros((G, R, self.D_total))
        for t_idx, tgt in enumerate(raw_targets):
            out[:, :, tgt] += g_raw[:, t_idx, :]
        return out


def _term_minimize(contexts, weights, W, bounds, rng, inner, center):
    return minimize_inner(contexts, weights, W, bounds, rng, inner, center=center)


def acquisition_draws(
    gp: GpEnsemble,
    cost_model,
    structure: CandidateStructure,
    thetas: np.ndarray,
    W: np.ndarray,
    zero_avoiding: bool = True,
    inner: InnerConfig | None = None,
    rng: np.random.Generator | None = None,
    parents: list | None = None,
    want_grad: bool = True,
    max_tie_retries: int = 5,
    on_tie: str = "redraw",
):
    """Per-draw acquisition values and gradient draws for grouped decisions.

    Returns (values (G, R), grads (G, R, D) or None, W) where values are
    cost-normalized value-of-information draws.  Draws whose inner problem
    has distant near-tied minimizers are redrawn (bounded retries) or, for
    ``on_tie="raise"``, reported via TiedMinimizersError.
    """
    members = gp.members
    weights = np.full(len(members), 1.0 / len(members))
    scale = gp.y_scale
    inner = inner or InnerConfig()
    rng = rng or np.random.default_rng(0)
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    G = thetas.shape[0]
    R = W.shape[1]
    bounds = gp.x_bounds
    center, base_val = minimize_posterior_mean(gp, seed=0)

    plan_s = structure.plan("s")
    if zero_avoiding:
        plan_c = structure.plan("c")
        plan_sc = structure.plan("sc")
        Xc, Sc = plan_c.arrays(thetas)
        Xsc, Ssc = plan_sc.arrays(thetas)
        ctx_c = [GroupContext(mb, Xc, Sc) for mb in members]
        ctx_sc = [GroupContext(mb, Xsc, Ssc) for mb in members]
        pc = plan_c.p
        if W.shape[2] != plan_sc.p:
            raise ValueError(f"W must have {plan_sc.p} columns, got {W.shape[2]}")
    else:
        Xs, Ss = plan_s.arrays(thetas)
        ctx_s = [GroupContext(mb, Xs, Ss) for mb in members]
        if W.shape[2] != plan_s.p:
            raise ValueError(f"W must have {plan_s.p} columns, got {W.shape[2]}")

    for attempt in range(max_tie_retries + 1):
        if zero_avoiding:
            res_c = _term_minimize(ctx_c, weights, W[:, :, :pc], bounds, rng, inner, center)
            res_sc = _term_minimize(ctx_sc, weights, W, bounds, rng, inner, center)
            ties = res_c.ties | res_sc.ties
            voi_draws = scale * (res_c.values - res_sc.values)
        else:
            res_s = _term_minimize(ctx_s, weights, W, bounds, rng, inner, center)
            ties = res_s.ties
            voi_draws = base_val - (gp.y_shift + scale * res_s.values)
        if not ties.any():
            break
        if on_tie == "raise":
            raise TiedMinimizersError(
                f"{int(ties.sum())} draws with near-tied distant inner minimizers"
            )
        if attempt == max_tie_retries:
            break
        W = W.copy()
        W[ties] = rng.standard_normal(W[ties].shape)

    # cost normalization per block; a batch is charged its most expensive member
    costs = np.empty((G, structure.q))
    grad_cost = np.zeros((G, structure.n_params))
    for g in range(G):
        blocks = structure.decode(thetas[g])
        block_costs = []
        block_grads = []
        for b, (x, fids) in enumerate(blocks):
            parent = parents[b] if parents is not None else None
            c, gx, gs = cost_model.value_and_grad(x, fids[0], parent_fidelity=parent)
            block_costs.append(c)
            block_grads.append((gx, gs))
        costs[g] = block_costs
        win = int(np.argmax(block_costs))
        gx, gs = block_grads[win]
        grad_cost[g, structure.x_theta(win)] = gx
        grad_cost[g, structure.smax_theta(win)] = gs
    cost = costs.max(axis=1)  # (G,)
    values = voi_draws / cost[:, None]

    if not want_grad:
        return values, None, W

    grads_voi = np.zeros((G, R, structure.n_params))
    if zero_avoiding:
        for wgt, mb, cc, csc in zip(weights, members, ctx_c, ctx_sc):
            tg_c = _TermGradient(cc, plan_c, thetas)
            tg_sc = _TermGradient(csc, plan_sc, thetas)
            grads_voi += wgt * scale * (
                tg_c.gradient(W[:, :, :pc], res_c.argmins) - tg_sc.gradient(W, res_sc.argmins)
            )
    else:
        for wgt, mb, cs in zip(weights, members, ctx_s):
            tg_s = _TermGradient(cs, plan_s, thetas)
            grads_voi += wgt * scale * (-tg_s.gradient(W, res_s.argmins))

    grads = (
        grads_voi * cost[:, None, None] - voi_draws[:, :, None] * grad_cost[:, None, :]
    ) / cost[:, None, None] ** 2
    return values, grads, W


def stochastic_gradient(
    gp: GpEnsemble,
    cost_model,
    x,
    S: FidelitySet,
    W: np.ndarray,
    zero_avoiding: bool = True,
    inner: InnerConfig | None = None,
    seed: int = 0,
) -> np.ndarray:
    """One unbiased gradient draw of the cost-normalized acquisition.

    The decision coordinates are (x, max fidelity, extra trace levels);
    raises TiedMinimizersError when the inner minimizer is ambiguous for
    this draw, in which case the caller should discard W and redraw.
    """
    structure, theta = structure_for(gp, x, S)
    W = np.asarray(W, dtype=float).reshape(1, 1, -1)
    values, grads, _ = acquisition_draws(
        gp,
        cost_model,
        structure,
        theta[None],
        W,
        zero_avoiding=zero_avoiding,
        inner=inner,
        rng=np.random.default_rng(seed),
        want_grad=True,
        on_tie="raise",
        max_tie_retries=0,
    )
    return grads[0, 0]


def structure_for(gp: GpEnsemble, x, S: FidelitySet) -> tuple[CandidateStructure, np.ndarray]:
    """Structure and decision vector matching one (x, fidelity set) pair."""
    space = gp.space
    fids = S.as_array()
    max_s = S.max_s
    order = [int(np.argmax([np.allclose(f, max_s) for f in fids]))]
    rest = [j for j in range(len(fids)) if j != order[0]]
    structure = CandidateStructure(
        space=space, d=gp.d, ell=len(fids), x_bounds=gp.x_bounds
    )
    theta = np.concatenate(
        [np.asarray(x, dtype=float).reshape(gp.d), max_s]
        + [fids[j][space.trace_dims] for j in rest]
    )
    return structure, theta


# ---------------------------------------------------------------------------
# Stochastic gradient ascent
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SgaConfig:
    """Multistart projected SGA settings.

    The step sequence a/(t+A)^kappa satisfies the divergent-sum /
    square-summable conditions for almost-sure convergence to stationary
    points.  ``reps`` draws are averaged per step for variance reduction
    (a single draw is already unbiased); ranking of restart finals uses
    ``rank_reps`` common-seed replications.
    """

    restarts: int = 10
    iters: int = 60
    reps: int = 64
    rank_reps: int = 2048
    step_a: float = 0.3
    step_A: float = 10.0
    step_kappa: float = 0.7
    grad_clip: float = 1e4
    inner: InnerConfig = field(default_factory=InnerConfig)
    record_iterates: bool = False


@dataclass
class AcquisitionCandidate:
    """Winner of one acquisition maximization."""

    x: np.ndarray
    fidelity_set: FidelitySet
    value: float
    cost: float
    theta: np.ndarray
    source: str = "unconstrained"
    parent_id: int | None = None
    iterates: np.ndarray | None = None

    def batch_blocks(self, structure: CandidateStructure):
        return structure.decode(self.theta)


def acquisition_values(
    gp: GpEnsemble,
    cost_model,
    structure: CandidateStructure,
    thetas: np.ndarray,
    reps: int,
    seed: int,
    zero_avoiding: bool = True,
    inner: InnerConfig | None = None,
    parents: list | None = None,
) -> np.ndarray:
    """Common-seed Monte-Carlo acquisition values for grouped decisions."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    plan = structure.plan("sc" if zero_avoiding else "s")
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((thetas.shape[0], reps, plan.p))
    values, _, _ = acquisition_draws(
        gp,
        cost_model,
        structure,
        thetas,
        W,
        zero_avoiding=zero_avoiding,
        inner=inner,
        rng=rng,
        parents=parents,
        want_grad=False,
    )
    return values.mean(axis=1)


def optimize_acquisition(
    gp: GpEnsemble,
    cost_model,
    structure: CandidateStructure,
    cfg: SgaConfig,
    seed: int = 0,
    zero_avoiding: bool = True,
    parents: list | None = None,
    rank_seed: int | None = None,
    source: str = "unconstrained",
    parent_id: int | None = None,
) -> AcquisitionCandidate:
    """Maximize the acquisition by multistart projected SGA.

    All restarts advance in lockstep so each step is one batched gradient
    evaluation; feasibility (box bounds, trace ordering, pinned
    coordinates) is restored by projection after every step.  Restart
    finals are ranked by a common-seed high-replication evaluation.
    """
    ss = np.random.SeedSequence(seed)
    sga_rng, init_rng = [np.random.default_rng(c) for c in ss.spawn(2)]
    if rank_seed is None:
        rank_seed = int(ss.generate_state(1)[0])
    P = cfg.restarts
    theta = structure.initial(init_rng, P)
    plan = structure.plan("sc" if zero_avoiding else "s")
    history = [theta.copy()] if cfg.record_iterates else None

    for it in range(cfg.iters):
        W = sga_rng.standard_normal((P, cfg.reps, plan.p))
        _, grads, _ = acquisition_draws(
            gp,
            cost_model,
            structure,
            theta,
            W,
            zero_avoiding=zero_avoiding,
            inner=cfg.inner,
            rng=sga_rng,
            parents=parents,
            want_grad=True,
        )
        g = grads.mean(axis=1)
        g = np.clip(g, -cfg.grad_clip, cfg.grad_clip)
        step = cfg.step_a / (it + cfg.step_A) ** cfg.step_kappa
        theta = structure.project(theta + step * g)
        if history is not None:
            history.append(theta.copy())

    values = acquisition_values(
        gp,
        cost_model,
        structure,
        theta,
        reps=cfg.rank_reps,
        seed=rank_seed,
        zero_avoiding=zero_avoiding,
        inner=cfg.inner,
        parents=parents,
    )
    best = int(np.argmax(values))
    theta_best = theta[best]
    blocks = structure.decode(theta_best)
    x, fids = blocks[0]
    fset = FidelitySet.of(structure.space, fids)
    cost = max(
        cost_model.predict(bx, bf[0], parent_fidelity=(parents[b] if parents is not None else None))
        for b, (bx, bf) in enumerate(blocks)
    )
    return AcquisitionCandidate(
        x=x,
        fidelity_set=fset,
        value=float(values[best]),
        cost=float(cost),
        theta=theta_best,
        source=source,
        parent_id=parent_id,
        iterates=np.stack([h[best] for h in history]) if history is not None else None,
    )
