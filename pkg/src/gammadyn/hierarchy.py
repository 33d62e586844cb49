"""Generator on observables, and the operators L̂ (quasi-observables) and L̂* (correlation functions).

The two hierarchy operators are assembled once per context as sparse
matrices over the configuration index of :class:`ConfigSpace`, then
applied by matrix-vector products.  Rows are built level by level with the
batched K^{-1} evaluators from :mod:`gammadyn.rates`.
"""
from __future__ import annotations

import itertools
import math
from functools import cached_property
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .gamma import TruncatedGammaFunction
from .grid import ConfigSpace, GridGeometry
from .rates import BirthDeathModel, death_energy_rows


class OperatorContext:
    def __init__(self, model: BirthDeathModel, grid: GridGeometry | None = None, n_max: int = 3,
                 zeta_trunc: int | None = None):
        grid = grid or model.grid
        if grid != model.grid:
            raise ValueError("model and context use different grids")
        if n_max < 1:
            raise ValueError("n_max must be >= 1")
        zeta_trunc = n_max if zeta_trunc is None else zeta_trunc
        if zeta_trunc < 0:
            raise ValueError("zeta_trunc must be >= 0")
        self.model, self.grid, self.n_max, self.zeta_trunc = model, grid, int(n_max), int(zeta_trunc)

    @cached_property
    def space(self) -> ConfigSpace:
        return ConfigSpace(self.grid.n_cells, self.n_max)

    @cached_property
    def D(self) -> np.ndarray:
        """Death energy D(η) for every configuration in the index."""
        out = np.zeros(self.space.size)
        for n in range(1, self.n_max + 1):
            out[self.space.level_slice(n)] = death_energy_rows(self.model, self.space.levels[n])
        return out

    @cached_property
    def L_hat_matrix(self) -> sp.csr_matrix:
        return assemble_L_hat(self)

    @cached_property
    def L_hat_star_matrix(self) -> sp.csr_matrix:
        return assemble_L_hat_star(self)

    @cached_property
    def L_hat_star_balanced(self) -> sp.csr_matrix:
        return assemble_L_hat_star(self, balanced=True)

    def zeta_tail_bound(self, C: float) -> float:
        """Σ_{j > zeta_trunc} (C β)^j / j!, with β the largest ℓ¹ mass of e^{c}-1 in the rates."""
        beta = 0.0
        for spec in (self.model.birth, self.model.death):
            for name in ("_Q", "_Q2"):
                Q = getattr(spec, name, None) if hasattr(type(spec), name) else None
                if Q is not None:
                    beta = max(beta, float(np.abs(Q).sum(axis=1).max() * self.grid.cell_volume))
        x = C * beta
        return max(0.0, math.exp(x) - sum(x ** j / math.factorial(j) for j in range(self.zeta_trunc + 1)))


class _Triplets:
    def __init__(self):
        self.r, self.c, self.v = [], [], []

    def add(self, rows, cols, vals):
        vals = np.asarray(vals, dtype=float)
        keep = vals != 0
        if keep.any():
            self.r.append(np.broadcast_to(rows, vals.shape)[keep])
            self.c.append(np.broadcast_to(cols, vals.shape)[keep])
            self.v.append(vals[keep])

    def matrix(self, size) -> sp.csr_matrix:
        if not self.v:
            return sp.csr_matrix((size, size))
        r = np.concatenate(self.r)
        c = np.concatenate(self.c)
        v = np.concatenate(self.v)
        # csr conversion sums duplicates; sorting first keeps the summation order fixed
        order = np.lexsort((c, r))
        return sp.csr_matrix((v[order], (r[order], c[order])), shape=(size, size))


def _occupancy(rows: np.ndarray, n_cells: int) -> np.ndarray:
    occ = np.zeros((len(rows), n_cells), dtype=bool)
    if rows.shape[1]:
        occ[np.arange(len(rows))[:, None], rows] = True
    return occ


def _level_ok(spec, q: int) -> bool:
    return spec.max_level is None or q <= spec.max_level


def assemble_L_hat(ctx: OperatorContext) -> sp.csr_matrix:
    """(L̂G)(η) = -Σ_{ξ⊆η} G(ξ) Σ_{x∈ξ} K⁻¹d(x, ·∪ξ∖x)(η∖ξ) + Σ_{ξ⊆η} Σ_{x∉η} G(ξ∪x) K⁻¹b(x, ·∪ξ)(η∖ξ) h^d."""
    space, model = ctx.space, ctx.model
    N, h = ctx.grid.n_cells, ctx.grid.cell_volume
    trip = _Triplets()
    for n in range(ctx.n_max + 1):
        rows = space.levels[n]
        ridx = np.arange(space.offsets[n], space.offsets[n + 1])
        occ = _occupancy(rows, N)
        for p in range(n + 1):
            q = n - p
            for S in itertools.combinations(range(n), p):
                notS = [j for j in range(n) if j not in S]
                xi, zeta = rows[:, list(S)], rows[:, notS]
                # death part: column ξ
                if p and _level_ok(model.death, q):
                    col = space.index_rows(xi)
                    for jj, j in enumerate(S):
                        rest = np.delete(xi, jj, axis=1)
                        vals = -model.death.kinv_general(rows[:, j], rest, zeta)
                        trip.add(ridx, col, vals)
                # birth part: column ξ ∪ x, x over empty cells
                if p < ctx.n_max and _level_ok(model.birth, q):
                    K = len(rows)
                    xs = np.tile(np.arange(N), K)
                    rep = np.repeat(np.arange(K), N)
                    free = ~occ.reshape(-1)
                    xs, rep = xs[free], rep[free]
                    vals = model.birth.kinv_general(xs, xi[rep], zeta[rep]) * h
                    cols = space.index_rows(np.sort(np.concatenate([xi[rep], xs[:, None]], axis=1), axis=1))
                    trip.add(ridx[rep], cols, vals)
    return trip.matrix(space.size)


def assemble_L_hat_star(ctx: OperatorContext, include_empty_death: bool = True,
                        balanced: bool = False) -> sp.csr_matrix:
    """(L̂*k)(η) = -Σ_{x∈η} ∫ k(ζ∪η) K⁻¹d(x,·∪η∖x)(ζ) dλ(ζ) + Σ_{x∈η} ∫ k(ζ∪η∖x) K⁻¹b(x,·∪η∖x)(ζ) dλ(ζ).

    ζ runs over configurations disjoint from η with |ζ| <= zeta_trunc.
    With ``include_empty_death=False`` the ζ = ∅ death term (which is
    -D(η)k(η)) is left out; the Kirkwood-Salzburg operator uses that form.

    By default birth terms run up to |ζ| = n_max - |η| + 1, which makes the
    matrix the exact transpose of L̂ in the pairing.  ``balanced=True`` cuts
    births at the same |ζ| <= n_max - |η| as deaths, so each birth term keeps
    its death partner; then b = z d gives L̂* z^{|η|} = 0 at every level.
    """
    space, model = ctx.space, ctx.model
    N, h = ctx.grid.n_cells, ctx.grid.cell_volume
    trip = _Triplets()
    for n in range(1, ctx.n_max + 1):
        rows = space.levels[n]
        ridx = np.arange(space.offsets[n], space.offsets[n + 1])
        occ = _occupancy(rows, N)
        K = len(rows)
        for q in range(0, min(ctx.zeta_trunc, ctx.n_max - n + 1) + 1):
            Z = space.levels[q]
            if q:
                ok = ~occ[:, Z].any(axis=2)          # (K, len(Z)) disjointness
                rr, zz = np.nonzero(ok)
            else:
                rr, zz = np.arange(K), np.zeros(K, dtype=np.int64)
            if len(rr) == 0:
                continue
            zeta = Z[zz]
            eta = rows[rr]
            w = h ** q
            death_on = q <= ctx.n_max - n and _level_ok(model.death, q) and (q > 0 or include_empty_death)
            birth_on = _level_ok(model.birth, q) and (q <= ctx.n_max - n or not balanced)
            if death_on:
                col_d = space.index_rows(np.sort(np.concatenate([zeta, eta], axis=1), axis=1))
            for j in range(n):
                xs = eta[:, j]
                rest = np.delete(eta, j, axis=1)
                if death_on:
                    trip.add(ridx[rr], col_d, -model.death.kinv_general(xs, rest, zeta) * w)
                if birth_on:
                    col_b = space.index_rows(np.sort(np.concatenate([zeta, rest], axis=1), axis=1))
                    trip.add(ridx[rr], col_b, model.birth.kinv_general(xs, rest, zeta) * w)
    return trip.matrix(space.size)


def _check(ctx: OperatorContext, f: TruncatedGammaFunction):
    if f.n_max != ctx.n_max:
        raise ValueError(f"n_max mismatch: function {f.n_max}, context {ctx.n_max}")


def apply_L_hat(ctx: OperatorContext, G: TruncatedGammaFunction) -> TruncatedGammaFunction:
    _check(ctx, G)
    return TruncatedGammaFunction.from_vector(ctx.space, ctx.L_hat_matrix @ G.to_vector(ctx.space))


def apply_L_hat_star(ctx: OperatorContext, k: TruncatedGammaFunction) -> TruncatedGammaFunction:
    _check(ctx, k)
    return TruncatedGammaFunction.from_vector(ctx.space, ctx.L_hat_star_matrix @ k.to_vector(ctx.space))


def apply_L_direct(ctx: OperatorContext, F: Callable[[tuple], float], gamma) -> float:
    """Grid generator on observables.

    Deaths: Σ_{x∈γ} d(x, γ∖x)[F(γ∖x) - F(γ)].  Births: h^d Σ_x b(x, γ∖x)[F((γ∖x)∪x) - F(γ∖x)]
    over every cell x.  For empty cells this is the usual birth term; for an
    occupied cell it adds b(x, γ∖x)[F(γ) - F(γ∖x)] h^d, an O(h^d) term that
    makes the grid generator exactly conjugate to L̂ under K.
    """
    gamma = tuple(sorted(int(c) for c in gamma))
    if len(gamma) + 1 > ctx.n_max:
        raise ValueError(f"|gamma|+1 = {len(gamma) + 1} exceeds n_max = {ctx.n_max}")
    model, h = ctx.model, ctx.grid.cell_volume
    Fg = F(gamma)
    out = 0.0
    for x in gamma:
        rest = tuple(c for c in gamma if c != x)
        dr = model.death.eval_rate(x, rest)
        br = model.birth.eval_rate(x, rest)
        out += dr * (F(rest) - Fg) + h * br * (Fg - F(rest))
    b = model.birth.eval_all(gamma)
    occupied = set(gamma)
    for x in range(ctx.grid.n_cells):
        if x in occupied:
            continue
        out += h * b[x] * (F(tuple(sorted(gamma + (x,)))) - Fg)
    return float(out)


def operator_blocks(ctx: OperatorContext, which: str, f: TruncatedGammaFunction, dual: bool = False):
    """Contribution of one level-band of L̂ (or L̂* when ``dual``).

    ``which`` is 'diag' (same level), 'upper' (input one level above the
    output), 'lower' (input one level below) or 'residual' (everything else).
    """
    _check(ctx, f)
    A = (ctx.L_hat_star_matrix if dual else ctx.L_hat_matrix).tocoo()
    lev = ctx.space.level_of
    diff = lev[A.col] - lev[A.row]
    sel = {"diag": diff == 0, "upper": diff == 1, "lower": diff == -1,
           "residual": np.abs(diff) > 1}.get(which)
    if sel is None:
        raise ValueError(f"unknown block {which!r}")
    B = sp.csr_matrix((A.data[sel], (A.row[sel], A.col[sel])), shape=A.shape)
    return TruncatedGammaFunction.from_vector(ctx.space, B @ f.to_vector(ctx.space))
