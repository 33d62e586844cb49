"""Time stepping of the hierarchies and the Glauber approximation chain."""
from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .bounds import beta_tau, compute_bounds
from .gamma import TruncatedGammaFunction, vec_norm_KC, vec_norm_LC
from .grid import ConfigSpace, GridGeometry
from .hierarchy import OperatorContext, _Triplets
from .rates import Kernel, glauber


@dataclass
class EvolutionConfig:
    C: float = 2.0
    n_max: int = 3
    zeta_trunc: int | None = None
    dt: float = 1e-3
    delta: float = 0.01
    t_end: float = 1.0
    stepper: str = "rk4"
    closure: str = "transpose"     # 'transpose' or 'balanced' top-level closure of L̂*

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if self.t_end < 0:
            raise ValueError("t_end must be >= 0")
        if self.stepper not in ("rk4", "euler"):
            raise ValueError(f"unknown stepper {self.stepper!r}")
        if self.closure not in ("transpose", "balanced"):
            raise ValueError(f"unknown closure {self.closure!r}")


@dataclass
class EvolutionResult:
    times: list
    snapshots: list
    norms: list
    kind: str                      # 'quasi' (norm_LC) or 'correlation' (norm_KC)
    warnings: list = field(default_factory=list)
    allowance: float = 0.0

    def rows(self, space: ConfigSpace, C: float, h_d: float):
        """CSV rows (t, level, l1_mass, norm, residual_bound)."""
        out = []
        for t, snap, nrm in zip(self.times, self.snapshots, self.norms):
            vec = snap.to_vector(space)
            for n in range(space.n_max + 1):
                mass = float(np.abs(vec[space.level_slice(n)]).sum() * h_d ** n)
                out.append((t, n, mass, nrm, self.allowance))
        return out


def _stepper(A: sp.csr_matrix, kind: str, dt: float):
    if kind == "euler":
        return lambda v: v + dt * (A @ v)

    def rk4(v):
        k1 = A @ v
        k2 = A @ (v + 0.5 * dt * k1)
        k3 = A @ (v + 0.5 * dt * k2)
        k4 = A @ (v + dt * k3)
        return v + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)

    return rk4


def _evolve(ctx: OperatorContext, f0, cfg: EvolutionConfig, A, times, norm_fn, kind):
    space = ctx.space
    Dmax = float(ctx.D.max()) if ctx.D.size else 0.0
    if cfg.dt * Dmax > 0.5:
        raise ValueError(f"stability guard: dt*max D = {cfg.dt * Dmax:.3g} > 0.5")
    notes = []
    try:
        rep = compute_bounds(ctx.model, cfg.C, ctx.grid, n_max=min(ctx.n_max, 3))
        if not rep.asmall_ok:
            notes.append(f"asmall: a1+a2/C = {rep.asmall_value:.6g} >= 1.5")
    except Exception as exc:  # bounds are advisory here
        notes.append(f"bounds unavailable: {exc}")
    for w in notes:
        warnings.warn(w)
    times = sorted(set([0.0, cfg.t_end] if times is None else list(times)))
    targets = [int(round(t / cfg.dt)) for t in times]
    step = _stepper(A, cfg.stepper, cfg.dt)
    v = f0.to_vector(space)
    snaps, norms, out_t = [], [], []
    n_steps = max(targets) if targets else 0
    ti = 0
    for i in range(n_steps + 1):
        while ti < len(targets) and targets[ti] == i:
            snaps.append(TruncatedGammaFunction.from_vector(space, v))
            norms.append(norm_fn(v))
            out_t.append(i * cfg.dt)
            ti += 1
        if i == n_steps:
            break
        v = step(v)
        if not np.all(np.isfinite(v)):
            raise FloatingPointError(f"non-finite value at step {i + 1}")
    return EvolutionResult(out_t, snaps, norms, kind, notes, ctx.zeta_tail_bound(cfg.C) if ctx.zeta_trunc < ctx.n_max else 0.0)


def evolve_quasi(ctx: OperatorContext, G0: TruncatedGammaFunction, cfg: EvolutionConfig, times=None) -> EvolutionResult:
    """dG/dt = L̂G."""
    h = ctx.grid.cell_volume
    return _evolve(ctx, G0, cfg, ctx.L_hat_matrix, times,
                   lambda v: vec_norm_LC(ctx.space, v, cfg.C, h), "quasi")


def evolve_correlation(ctx: OperatorContext, k0: TruncatedGammaFunction, cfg: EvolutionConfig, times=None) -> EvolutionResult:
    """dk/dt = L̂*k."""
    A = ctx.L_hat_star_balanced if cfg.closure == "balanced" else ctx.L_hat_star_matrix
    return _evolve(ctx, k0, cfg, A, times,
                   lambda v: vec_norm_KC(ctx.space, v, cfg.C), "correlation")


def surgailis_solution(m, z, k0: TruncatedGammaFunction, t: float, grid: GridGeometry | None = None) -> TruncatedGammaFunction:
    """Closed-form solution for constant-rate births and deaths.

    k_t(η) = e_λ(e^{-tm}, η) Σ_{ξ⊆η} e_λ((z/m)(e^{tm}-1), ξ) k0(η∖ξ).
    ``m`` and ``z`` may be scalars or per-cell arrays (then ``grid`` is needed
    only to size them).
    """
    n_cells = grid.n_cells if grid is not None else None
    m_arr = np.asarray(m, dtype=float)
    z_arr = np.asarray(z, dtype=float)
    if n_cells is not None:
        m_arr = np.broadcast_to(m_arr, (n_cells,))
        z_arr = np.broadcast_to(z_arr, (n_cells,))
    if np.any(m_arr <= 0):
        raise ValueError("m must be positive")
    decay = np.exp(-t * m_arr)
    grow = z_arr / m_arr * np.expm1(t * m_arr)

    def at(arr, x):
        return float(arr) if arr.ndim == 0 else float(arr[x])

    levels = []
    # every key that can be nonzero is a key of k0 or a superset built from
    # birth terms; we evaluate on the support of k0's levels plus all keys of
    # equal length that k0 stores at any level (callers pass a full k0)
    for n in range(k0.n_max + 1):
        tab = {}
        for key in _level_keys(k0, n, n_cells):
            s = 0.0
            for r in range(n + 1):
                for xi in itertools.combinations(key, r):
                    rest = tuple(c for c in key if c not in xi)
                    kv = k0(rest)
                    if kv == 0.0:
                        continue
                    s += math.prod(at(grow, x) for x in xi) * kv
            tab[key] = math.prod(at(decay, x) for x in key) * s
        levels.append(tab)
    return TruncatedGammaFunction(k0.n_max, levels)


def _level_keys(k0, n, n_cells):
    if n_cells is None:
        keys = set(k0.levels[n])
        return sorted(keys)
    return itertools.combinations(range(n_cells), n)


# -- Glauber chain ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GlauberParams:
    """Glauber dynamics with s = 0, m ≡ 1: d = 1, b = z exp(-Σφ)."""

    z: float
    phi: Kernel
    C: float
    volume: tuple | None = None

    def __post_init__(self):
        if not self.z > 0:
            raise ValueError("z must be positive")
        if (self.phi.table < 0).any():
            raise ValueError("phi must be non-negative")

    @property
    def grid(self) -> GridGeometry:
        return self.phi.grid

    @property
    def C_phi(self) -> float:
        return beta_tau(self.phi, -1.0)

    @property
    def smallparam_ok(self) -> bool:
        return self.z * math.exp(self.C * self.C_phi) <= self.C

    def model(self):
        return glauber(self.grid, self.z, self.phi, s=0.0, m=1.0)


@lru_cache(maxsize=64)
def _space(n_cells, n_max):
    return ConfigSpace(n_cells, n_max)


def _split_terms(params: GlauberParams, n_max: int, zeta_trunc: int, volume, inner_max):
    """Enumerate (outer row, split ω ⊆ outer, inner configuration) triples.

    For every configuration α (the 'outer' one) and every ω ⊆ α with
    |ω| <= zeta_trunc and ω inside the volume, the inner configurations ρ are
    disjoint from α, satisfy E(y, ω) > 0 for all y ∈ ρ and |ρ| <= inner_max(n, r).
    Yields arrays (outer_idx, outer_rows, W positions, rho rows, prod_rest, prod_rho)
    where prod_rest = Π_{y∈α∖ω} e^{-E(y,ω)} and prod_rho = Π_{y∈ρ}(e^{-E(y,ω)}-1).
    """
    grid = params.grid
    N = grid.n_cells
    space = _space(N, n_max)
    Phi = params.phi.pair
    interacts = Phi > 0
    vol_mask = None
    if volume is not None:
        vol_mask = np.zeros(N, dtype=bool)
        vol_mask[list(volume)] = True
    for n in range(n_max + 1):
        rows = space.levels[n]
        oidx = np.arange(space.offsets[n], space.offsets[n + 1])
        for r in range(0, min(n, zeta_trunc) + 1):
            for W in itertools.combinations(range(n), r):
                notW = [j for j in range(n) if j not in W]
                om, rest = rows[:, list(W)], rows[:, notW]
                sel = np.ones(len(rows), dtype=bool)
                if vol_mask is not None and r:
                    sel = vol_mask[om].all(axis=1)
                if not sel.any():
                    continue
                om_s, rest_s, idx_s, rows_s = om[sel], rest[sel], oidx[sel], rows[sel]
                E_rest = Phi[rest_s[:, :, None], om_s[:, None, :]].sum(axis=2)     # (K, n-r)
                prod_rest = np.exp(-E_rest.sum(axis=1))
                smax = inner_max(n, r)
                cache = {}

                def allowed_cells():
                    # cells interacting with ω and outside α, packed to the left
                    if "c" not in cache:
                        allowed = interacts[om_s].any(axis=1)
                        allowed[np.arange(len(rows_s))[:, None], rows_s] = False
                        cnt = allowed.sum(axis=1)
                        order = np.argsort(~allowed, axis=1, kind="stable")[:, :max(1, int(cnt.max()))]
                        cache["c"] = (order, cnt)
                    return cache["c"]
                for s in range(0, smax + 1):
                    if s == 0:
                        yield idx_s, rows_s, W, np.zeros((len(idx_s), 0), dtype=np.int64), prod_rest, np.ones(len(idx_s))
                        continue
                    if r == 0:
                        break
                    for rr, rho in _footprint_combos(allowed_cells(), s):
                        E_rho = Phi[rho[:, :, None], om_s[rr][:, None, :]].sum(axis=2)
                        yield (idx_s[rr], rows_s[rr], W, rho, prod_rest[rr], np.expm1(-E_rho).prod(axis=1))


def _footprint_combos(cand_cnt, s):
    """All s-subsets of each row's candidate cells, as (row ids, sorted cell rows)."""
    cand, cnt = cand_cnt
    out_r, out_c = [], []
    for P in itertools.combinations(range(cand.shape[1]), s):
        rr = np.nonzero(cnt > P[-1])[0]
        if len(rr):
            out_r.append(rr)
            out_c.append(cand[rr][:, list(P)])
    if out_r:
        yield np.concatenate(out_r), np.concatenate(out_c)


def _assemble(params: GlauberParams, delta: float, n_max: int, zeta_trunc: int, volume, dual: bool):
    space = _space(params.grid.n_cells, n_max)
    h = params.grid.cell_volume
    z = params.z
    trip = _Triplets()
    if dual:
        # row η, ω ⊆ η, inner ξ (the integration variable), column ξ ∪ η∖ω
        inner_max = lambda n, r: min(zeta_trunc, n_max - (n - r))
    else:
        # column α = ξ ∪ ω, inner ρ = η∖ξ, row η = ξ ∪ ρ
        inner_max = lambda n, r: n_max - (n - r)
    for oidx, orows, W, inner, prod_rest, prod_inner in _split_terms(params, n_max, zeta_trunc, volume, inner_max):
        n, r, s = orows.shape[1], len(W), inner.shape[1]
        notW = [j for j in range(n) if j not in W]
        keep = orows[:, notW]
        other = space.index_rows(np.sort(np.concatenate([keep, inner], axis=1), axis=1)) if (keep.shape[1] + s) else np.zeros(len(oidx), dtype=np.int64)
        coef = (1 - delta) ** (n - r) * (z * delta) ** r * prod_rest * prod_inner
        if dual:
            trip.add(oidx, other, coef * h ** s)
        else:
            trip.add(other, oidx, coef * h ** r)
    return trip.matrix(space.size)


@lru_cache(maxsize=32)
def _matrix(params: GlauberParams, delta: float, n_max: int, zeta_trunc: int, volume, dual: bool):
    return _assemble(params, delta, n_max, zeta_trunc, volume, dual)


def P_delta_matrix(params: GlauberParams, delta: float, n_max: int, zeta_trunc: int | None = None,
                   dual: bool = False, volume=None) -> sp.csr_matrix:
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    zt = n_max if zeta_trunc is None else zeta_trunc
    vol = tuple(sorted(volume)) if volume is not None else (params.volume if params.volume is not None else None)
    return _matrix(params, float(delta), int(n_max), int(zt), vol, bool(dual))


def glauber_P_delta(G: TruncatedGammaFunction, delta: float, params: GlauberParams, grid=None,
                    zeta_trunc: int | None = None) -> TruncatedGammaFunction:
    space = _space(params.grid.n_cells, G.n_max)
    A = P_delta_matrix(params, delta, G.n_max, zeta_trunc)
    return TruncatedGammaFunction.from_vector(space, A @ G.to_vector(space))


def glauber_P_delta_star(k: TruncatedGammaFunction, delta: float, params: GlauberParams, grid=None,
                         zeta_trunc: int | None = None) -> TruncatedGammaFunction:
    space = _space(params.grid.n_cells, k.n_max)
    A = P_delta_matrix(params, delta, k.n_max, zeta_trunc, dual=True)
    return TruncatedGammaFunction.from_vector(space, A @ k.to_vector(space))


def glauber_P_delta_volume(f, delta: float, Lambda, params: GlauberParams, observable: bool = False,
                           n_max: int | None = None):
    """Finite-volume operator: ω restricted to the cell set Λ.

    With ``observable=False`` ``f`` is a quasi-observable and the result is
    P̂δ^Λ f.  With ``observable=True`` ``f`` is a callable observable and a
    callable γ ↦ (P_δ^Λ f)(γ) is returned: every point of γ dies with
    probability δ, new points occupy free cells of Λ with weights
    (zδ h^d e^{-E(y,γ)}) normalised by Ξ_δ^Λ(γ).
    """
    if not observable:
        space = _space(params.grid.n_cells, f.n_max)
        A = P_delta_matrix(params, delta, f.n_max, dual=False, volume=Lambda)
        return TruncatedGammaFunction.from_vector(space, A @ f.to_vector(space))
    Lambda = tuple(sorted(Lambda))
    Phi = params.phi.pair
    h = params.grid.cell_volume

    def Pf(gamma):
        gamma = tuple(sorted(gamma))
        free = [y for y in Lambda if y not in gamma]
        wts = np.array([params.z * delta * h * math.exp(-Phi[y, list(gamma)].sum()) for y in free])
        Xi = float(np.prod(1 + wts))
        total = 0.0
        for nd in range(len(gamma) + 1):
            for died in itertools.combinations(gamma, nd):
                surv = tuple(c for c in gamma if c not in died)
                pdie = delta ** nd * (1 - delta) ** (len(gamma) - nd)
                inner = 0.0
                for nb in range(len(free) + 1 if n_max is None else min(len(free), n_max) + 1):
                    for pos in itertools.combinations(range(len(free)), nb):
                        om = tuple(free[i] for i in pos)
                        inner += math.prod(wts[i] for i in pos) * f(tuple(sorted(surv + om)))
                total += pdie * inner / Xi
        return total

    return Pf, (lambda gamma: float(np.prod(1 + np.array(
        [params.z * delta * h * math.exp(-Phi[y, list(gamma)].sum()) for y in Lambda if y not in gamma]))))


def P_delta_pointwise(G: TruncatedGammaFunction, eta, delta: float, params: GlauberParams, volume=None) -> float:
    """Direct evaluation of (P̂δG)(η) from the defining sum (small grids only)."""
    eta = tuple(sorted(eta))
    N = params.grid.n_cells
    h = params.grid.cell_volume
    Phi = params.phi.pair
    cells = [c for c in range(N) if c not in eta and (volume is None or c in volume)]
    total = 0.0
    for p in range(len(eta) + 1):
        for xi in itertools.combinations(eta, p):
            rho = [y for y in eta if y not in xi]
            for r in range(0, G.n_max - p + 1):
                for om in itertools.combinations(cells, r):
                    g = G(tuple(sorted(xi + om)))
                    if g == 0.0:
                        continue
                    E = lambda y: Phi[y, list(om)].sum() if om else 0.0
                    term = (1 - delta) ** p * (params.z * delta * h) ** r * g
                    term *= math.prod(math.exp(-E(y)) for y in xi)
                    term *= math.prod(math.expm1(-E(y)) for y in rho)
                    total += term
    return total


def chain_evolve(f: TruncatedGammaFunction, t: float, delta: float, params: GlauberParams, dual: bool = False,
                 zeta_trunc: int | None = None) -> TruncatedGammaFunction:
    """Apply P̂δ (or P̂*δ) exactly ⌊t/δ⌋ times."""
    steps = int(math.floor(t / delta + 1e-9))
    space = _space(params.grid.n_cells, f.n_max)
    v = f.to_vector(space)
    if steps:
        A = P_delta_matrix(params, delta, f.n_max, zeta_trunc, dual=dual)
        for _ in range(steps):
            v = A @ v
    return TruncatedGammaFunction.from_vector(space, v)


def chain_trajectory(f: TruncatedGammaFunction, times, delta: float, params: GlauberParams, dual: bool = False,
                     zeta_trunc: int | None = None):
    """Snapshots of the chain at the given times (⌊t/δ⌋ applications each)."""
    space = _space(params.grid.n_cells, f.n_max)
    A = P_delta_matrix(params, delta, f.n_max, zeta_trunc, dual=dual)
    v = f.to_vector(space)
    done = 0
    out = []
    for t in sorted(times):
        steps = int(math.floor(t / delta + 1e-9))
        for _ in range(steps - done):
            v = A @ v
        done = steps
        out.append((t, v.copy()))
    return out


@dataclass
class ResidualReport:
    delta: float
    residual: float
    bound: float
    allowance: float

    @property
    def ok(self) -> bool:
        return self.residual <= self.bound + self.allowance


def generator_residual(G: TruncatedGammaFunction, delta: float, params: GlauberParams,
                       ctx: OperatorContext | None = None) -> ResidualReport:
    """‖(P̂δG - G)/δ - L̂G‖_C against 3δ‖G‖_{2C}."""
    n_max = G.n_max
    ctx = ctx or OperatorContext(params.model(), params.grid, n_max)
    space = ctx.space
    vec = G.to_vector(space)
    top = space.level_of > n_max - 2
    if np.any(vec[top] != 0):
        raise ValueError("G must vanish above level n_max - 2")
    h = params.grid.cell_volume
    P = P_delta_matrix(params, delta, n_max, ctx.zeta_trunc)
    res = (P @ vec - vec) / delta - ctx.L_hat_matrix @ vec
    r = vec_norm_LC(space, res, params.C, h)
    bound = 3 * delta * vec_norm_LC(space, vec, 2 * params.C, h)
    allowance = 0.0
    if ctx.zeta_trunc < n_max:
        x = params.z * delta * params.grid.volume * params.C
        allowance = vec_norm_LC(space, vec, params.C, h) * max(
            0.0, math.exp(x) - sum(x ** j / math.factorial(j) for j in range(ctx.zeta_trunc + 1))) / delta
    return ResidualReport(delta, r, bound, allowance)


@dataclass
class RestrictedNormReport:
    delta: float
    nu: float
    bound_factor: float
    max_ratio: float
    trials: int
    precondition_ok: bool
    message: str = ""

    @property
    def ok(self) -> bool:
        return self.precondition_ok and self.max_ratio <= self.bound_factor


def restricted_norm_check(delta: float, params: GlauberParams, nu: float, trials: int = 100, n_max: int = 3,
                          rng=None, zeta_trunc: int | None = None) -> RestrictedNormReport:
    """Check ‖P̂*δ k‖_KC <= (1-(1-ν)δ)‖k‖_KC on random k with k(∅) = 0."""
    C, z, Cphi = params.C, params.z, params.C_phi
    limit = min(nu * C * math.exp(-C * Cphi), 2 * C * math.exp(-2 * C * Cphi))
    factor = 1 - (1 - nu) * delta
    if not (0 < nu < 1 and z <= limit):
        msg = f"nu-verysmallparam: z = {z:.6g} > min(nu C e^(-C C_phi), 2C e^(-2C C_phi)) = {limit:.6g}"
        return RestrictedNormReport(delta, nu, factor, float("nan"), 0, False, msg)
    rng = np.random.default_rng(rng)
    space = _space(params.grid.n_cells, n_max)
    A = P_delta_matrix(params, delta, n_max, zeta_trunc, dual=True)
    scale = C ** space.level_of.astype(float)
    worst = 0.0
    for _ in range(trials):
        k = rng.uniform(-1, 1, space.size) * scale
        k[0] = 0.0
        ratio = vec_norm_KC(space, A @ k, C) / vec_norm_KC(space, k, C)
        worst = max(worst, ratio)
    return RestrictedNormReport(delta, nu, factor, worst, trials, True)


def lenard_pairing(F_on_window, window, k: TruncatedGammaFunction, grid: GridGeometry) -> float:
    """⟨⟨K⁻¹F, k⟩⟩ for an observable F that depends only on γ ∩ window."""
    from .gamma import k_inverse
    window = tuple(sorted(window))
    total = 0.0
    h = grid.cell_volume
    for n in range(min(len(window), k.n_max) + 1):
        for eta in itertools.combinations(window, n):
            total += k_inverse(F_on_window, eta) * k(eta) * h ** n
    return total
