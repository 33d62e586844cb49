"""Stationary correlation functions through the Kirkwood-Salzburg fixed point."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .bounds import beta_tau, compute_bounds
from .gamma import TruncatedGammaFunction, vec_norm_KC
from .hierarchy import OperatorContext, assemble_L_hat_star
from .rates import BirthDeathModel, Kernel, glauber


class ConvergenceError(RuntimeError):
    pass


class KSContext:
    """Kirkwood-Salzburg operator S = D⁻¹ (L̂* without the -D diagonal).

    The hierarchy is closed with the balanced truncation (birth and death
    ζ-sums both stop at |ζ| <= n_max - |η|), see
    :func:`gammadyn.hierarchy.assemble_L_hat_star`.
    """

    def __init__(self, model: BirthDeathModel, ctx: OperatorContext | None = None, C: float = 2.0,
                 max_iter: int = 10_000, tol: float = 1e-10, norm_bound: float | None = None):
        if not tol > 0:
            raise ValueError("tol must be positive")
        self.model = model
        self.ctx = ctx or OperatorContext(model, model.grid, 3)
        self.C, self.max_iter, self.tol = float(C), int(max_iter), float(tol)
        if norm_bound is None:
            rep = compute_bounds(model, C, self.ctx.grid, n_max=min(self.ctx.n_max, 3))
            norm_bound = rep.a1 + rep.a2 / C - 1
            self.report = rep
        else:
            self.report = None
        self.norm_bound = float(norm_bound)
        space = self.ctx.space
        D = self.ctx.D
        bad = np.nonzero((D <= 0) & (space.level_of > 0))[0]
        if len(bad):
            raise ZeroDivisionError(f"death energy vanishes at eta = {space.config(int(bad[0]))}")
        self._D = D

    @property
    def space(self):
        return self.ctx.space

    @property
    def S(self) -> sp.csr_matrix:
        if not hasattr(self, "_S"):
            R = assemble_L_hat_star(self.ctx, include_empty_death=False, balanced=True)
            inv = np.zeros_like(self._D)
            nz = self.space.level_of > 0
            inv[nz] = 1.0 / self._D[nz]
            self._S = (sp.diags(inv) @ R).tocsr()
        return self._S

    @property
    def E(self) -> np.ndarray:
        """1_{|η|=1} b(x,∅)/d(x,∅)."""
        E = np.zeros(self.space.size)
        sl = self.space.level_slice(1)
        empty = np.zeros(0, dtype=np.int64)
        b = self.model.birth.eval_all(empty)
        d = self.model.death.eval_all(empty)
        E[sl] = b / d
        return E


def ks_apply(ks: KSContext, k_tilde: TruncatedGammaFunction) -> TruncatedGammaFunction:
    v = ks.S @ k_tilde.to_vector(ks.space)
    v[0] = 0.0
    return TruncatedGammaFunction.from_vector(ks.space, v)


@dataclass
class StationaryResult:
    k: TruncatedGammaFunction
    iterations: int
    residual: float
    factors: list = field(default_factory=list)
    changes: list = field(default_factory=list)
    norm_bound: float = float("nan")
    L_star_residual: float = float("nan")
    closure_defect: float = float("nan")
    ruelle_const: float = float("nan")

    def rows(self):
        """Convergence CSV rows (iter, residual, contraction_factor)."""
        return [(i + 1, c, f) for i, (c, f) in enumerate(zip(self.changes, self.factors))]


def solve_stationary(ks: KSContext, check_bound: bool = True) -> StationaryResult:
    if check_bound and not ks.norm_bound < 1:
        raise ValueError(f"statior-est: a1+a2/C = {ks.norm_bound + 1:.6g} >= 2")
    S, E, C = ks.S, ks.E, ks.C
    space = ks.space
    kt = np.zeros(space.size)
    changes, factors = [], []
    prev = None
    for it in range(1, ks.max_iter + 1):
        new = S @ kt + E
        new[0] = 0.0
        change = vec_norm_KC(space, new - kt, C)
        changes.append(change)
        factors.append(change / prev if prev else 0.0)
        prev = change
        kt = new
        if change <= ks.tol:
            break
    else:
        res = vec_norm_KC(space, kt - S @ kt - E, C)
        raise ConvergenceError(f"no convergence in {ks.max_iter} iterations, residual {res:.3g}")
    residual = vec_norm_KC(space, kt - S @ kt - E, C)
    k = kt.copy()
    k[0] = 1.0
    Lres = vec_norm_KC(space, ks.ctx.L_hat_star_balanced @ k, C)
    defect = vec_norm_KC(space, ks.ctx.L_hat_star_matrix @ k, C)
    lev = space.level_of
    nz = (lev > 0) & (k > 0)
    ruelle = float(np.max(k[nz] ** (1.0 / lev[nz]))) if nz.any() else 0.0
    return StationaryResult(TruncatedGammaFunction.from_vector(space, k), len(changes), residual,
                            factors, changes, ks.norm_bound, Lres, defect, ruelle)


def gibbs_correlation(z: float, phi: Kernel, C: float, grid=None, n_max: int = 3, tol: float = 1e-10,
                      max_iter: int = 10_000) -> StationaryResult:
    """Stationary correlation function of Glauber dynamics (s = 0, m = 1)."""
    grid = grid or phi.grid
    beta = beta_tau(phi, -1.0)
    val = z / C * math.exp(C * beta)
    if not val < 1:
        raise ValueError(f"gibbs: (z/C) exp(C beta_-1) = {val:.6g} >= 1")
    model = glauber(grid, z, phi, s=0.0, m=1.0)
    ctx = OperatorContext(model, grid, n_max)
    ks = KSContext(model, ctx, C, max_iter, tol, norm_bound=val)
    return solve_stationary(ks)
