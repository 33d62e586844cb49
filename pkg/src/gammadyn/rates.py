"""Rate families on the grid, with closed-form K^{-1} evaluators.

Every rate a(x, gamma) below is a function of a cell x and a configuration
gamma not containing x.  Kernels are tabulated on periodic grid offsets, so
all convolutions are plain sums over cells.
"""
from __future__ import annotations

from functools import cached_property

import numpy as np

from .grid import GridGeometry


class Kernel:
    """Even function on grid displacements, stored flat (index = offset mod M)."""

    def __init__(self, grid: GridGeometry, table, support_radius: float | None = None, check: bool = True):
        self.grid = grid
        self.table = np.asarray(table, dtype=float).reshape(grid.n_cells).copy()
        self.table.setflags(write=False)
        lengths = grid.offset_lengths()
        nz = self.table != 0
        if support_radius is None:
            support_radius = float(lengths[nz].max()) if nz.any() else 0.0
        self.support_radius = float(support_radius)
        if check:
            neg = grid.flat_index(-grid.multi_index(np.arange(grid.n_cells)))
            if not np.allclose(self.table, self.table[neg], rtol=0, atol=1e-14):
                raise ValueError("kernel must be even")
            if nz.any() and lengths[nz].max() > self.support_radius + 1e-12:
                raise ValueError("kernel has values beyond its support radius")
            if self.support_radius >= grid.side_length / 2:
                raise ValueError("kernel support radius must be < L/2")

    # constructors
    @classmethod
    def zero(cls, grid):
        return cls(grid, np.zeros(grid.n_cells), 0.0)

    @classmethod
    def from_offsets(cls, grid, values: dict, support_radius=None):
        """``values`` maps an integer offset (int in 1-d, tuple in 2-d) to a value."""
        tab = np.zeros(grid.n_cells)
        for off, v in values.items():
            off = np.atleast_1d(np.asarray(off, dtype=int))
            if off.size != grid.dim:
                raise ValueError(f"offset {off} has wrong dimension")
            tab[grid.flat_index(off)] = v
        return cls(grid, tab, support_radius)

    @classmethod
    def from_function(cls, grid, fn, radius: float):
        """Sample a radial function fn(r) at cell-centre displacements with r <= radius."""
        r = grid.offset_lengths()
        tab = np.where(r <= radius + 1e-12, np.vectorize(fn, otypes=[float])(r), 0.0)
        return cls(grid, tab, radius)

    @classmethod
    def tophat(cls, grid, radius: float, height: float = 1.0, normalize: bool = False, exclude_origin=False):
        r = grid.offset_lengths()
        tab = np.where(r <= radius + 1e-12, height, 0.0)
        if exclude_origin:
            tab[0] = 0.0
        if normalize:
            if tab.sum() == 0:
                raise ValueError(f"tophat of radius {radius} covers no grid offset; cannot normalize")
            tab = tab / (tab.sum() * grid.cell_volume)
        return cls(grid, tab, radius)

    @cached_property
    def pair(self) -> np.ndarray:
        """pair[x, y] = c(x - y)."""
        return self.table[self.grid.offset_table]

    @property
    def mass(self) -> float:
        return float(np.abs(self.table).sum() * self.grid.cell_volume)

    @property
    def integral(self) -> float:
        return float(self.table.sum() * self.grid.cell_volume)

    @property
    def sup(self) -> float:
        return float(self.table.max()) if self.table.size else 0.0

    def scaled(self, factor: float) -> "Kernel":
        return Kernel(self.grid, self.table * factor, self.support_radius, check=False)

    def to_dict(self):
        nz = np.nonzero(self.table)[0]
        offs = self.grid.min_image(self.grid.multi_index(nz))
        return {
            "offsets": [
                [int(o[0]) if self.grid.dim == 1 else [int(v) for v in o], float(self.table[i])]
                for o, i in zip(offs, nz)
            ]
        }


def _cells(eta) -> np.ndarray:
    return np.asarray(tuple(eta), dtype=np.int64)


def _per_cell(grid, value) -> np.ndarray:
    arr = np.broadcast_to(np.asarray(value, dtype=float), (grid.n_cells,)).copy()
    arr.setflags(write=False)
    return arr


def _prod_except(q: np.ndarray, j: int) -> np.ndarray:
    """Row-wise product of all columns of q except column j."""
    if q.shape[1] == 1:
        return np.ones(q.shape[0])
    return np.prod(np.delete(q, j, axis=1), axis=1)


class RateSpec:
    """Common interface of the five rate families.

    Subclasses provide
      eval_pairs(xs, rests)          a(xs[i], rests[i]) for a batch,
      kinv_general(xs, xis, etas)    (K^{-1} a(xs[i], . ∪ xis[i]))(etas[i]) for a batch,
      abs_integral(x, xi, C)         ∫|K^{-1} a(x, . ∪ xi)| C^{|eta|} dλ(eta), exact or an upper bound.
    All batch arguments are integer arrays with one row per item.
    """

    family = "abstract"
    max_level: int | None = None   # K^{-1} vanishes on levels above this
    abs_integral_exact = True

    def __init__(self, grid: GridGeometry):
        self.grid = grid

    def eval_rate(self, x: int, eta) -> float:
        eta = _cells(eta)
        if x in set(eta.tolist()):
            raise ValueError(f"cell {x} belongs to the configuration")
        return float(self.eval_pairs(np.array([x]), eta[None, :])[0])

    def eval_all(self, eta) -> np.ndarray:
        """a(x, eta) for every cell x (values at x in eta are not meaningful)."""
        eta = _cells(eta)
        xs = np.arange(self.grid.n_cells)
        return self.eval_pairs(xs, np.broadcast_to(eta, (len(xs), len(eta))))

    def k_inverse_rate(self, x: int, xi, eta) -> float:
        xi, eta = _cells(xi), _cells(eta)
        sx, se = set(xi.tolist()), set(eta.tolist())
        if x in sx or x in se or sx & se:
            raise ValueError("x, xi and eta must be pairwise disjoint")
        return float(self.kinv_batch(x, xi, eta[None, :])[0])

    def kinv_batch(self, x, xi, etas):
        """Fixed x and xi, one eta per row of ``etas``."""
        etas = np.asarray(etas, dtype=np.int64)
        K = len(etas)
        xi = _cells(xi)
        return self.kinv_general(np.full(K, x, dtype=np.int64), np.broadcast_to(xi, (K, len(xi))), etas)

    def kinv_cells(self, xi, eta):
        """Fixed xi and eta, every cell x at once (entries with x in xi ∪ eta are junk)."""
        N = self.grid.n_cells
        xi, eta = _cells(xi), _cells(eta)
        return self.kinv_general(np.arange(N), np.broadcast_to(xi, (N, len(xi))), np.broadcast_to(eta, (N, len(eta))))

    def exclusion_mask(self, x, xi):
        keep = np.ones(self.grid.n_cells, dtype=bool)
        keep[x] = False
        keep[_cells(xi)] = False
        return keep

    def to_dict(self):  # pragma: no cover - overridden
        raise NotImplementedError


class Constant(RateSpec):
    family = "Constant"
    max_level = 0

    def __init__(self, grid, m):
        super().__init__(grid)
        self.m = _per_cell(grid, m)

    def eval_pairs(self, xs, rests):
        return self.m[xs].astype(float)

    def kinv_general(self, xs, xis, etas):
        if etas.shape[1] == 0:
            return self.m[xs].astype(float)
        return np.zeros(len(xs))

    def abs_integral(self, x, xi, C):
        return abs(self.m[x])

    def to_dict(self):
        return {"family": self.family, "m": self.m.tolist()}


class Linear(RateSpec):
    """a(x, γ) = base(x) + scale(x) Σ_{y∈γ} c(x-y)."""

    family = "Linear"
    max_level = 1

    def __init__(self, grid, c: Kernel, scale=1.0, base=0.0):
        super().__init__(grid)
        self.c = c
        self.scale = _per_cell(grid, scale)
        self.base = _per_cell(grid, base)

    def eval_pairs(self, xs, rests):
        P = self.c.pair
        return self.base[xs] + self.scale[xs] * P[xs[:, None], rests].sum(axis=1)

    def kinv_general(self, xs, xis, etas):
        q = etas.shape[1]
        if q == 0:
            return self.eval_pairs(xs, xis)
        if q == 1:
            return self.scale[xs] * self.c.pair[xs, etas[:, 0]]
        return np.zeros(len(xs))

    def abs_integral(self, x, xi, C):
        keep = self.exclusion_mask(x, xi)
        a = self.base[x] + self.scale[x] * self.c.pair[x, _cells(xi)].sum()
        h = self.grid.cell_volume
        return abs(a) + C * h * abs(self.scale[x]) * np.abs(self.c.pair[x, keep]).sum()

    def to_dict(self):
        return {"family": self.family, "c": self.c.to_dict(), "scale": self.scale.tolist(), "base": self.base.tolist()}


class Exponential(RateSpec):
    """a(x, γ) = prefactor(x) exp(s Σ_{y∈γ} c(x-y))."""

    family = "Exponential"

    def __init__(self, grid, prefactor, c: Kernel, s: float = 1.0):
        super().__init__(grid)
        self.prefactor = _per_cell(grid, prefactor)
        self.c = c
        self.s = float(s)

    @cached_property
    def _S(self):
        return self.s * self.c.pair

    @cached_property
    def _Q(self):
        return np.expm1(self._S)

    def eval_pairs(self, xs, rests):
        return self.prefactor[xs] * np.exp(self._S[xs[:, None], rests].sum(axis=1))

    def kinv_general(self, xs, xis, etas):
        return self.eval_pairs(xs, xis) * self._Q[xs[:, None], etas].prod(axis=1)

    def abs_integral(self, x, xi, C):
        keep = self.exclusion_mask(x, xi)
        a = self.prefactor[x] * np.exp(self._S[x, _cells(xi)].sum())
        h = self.grid.cell_volume
        return abs(a) * np.prod(1.0 + C * h * np.abs(self._Q[x, keep]))

    def to_dict(self):
        return {"family": self.family, "prefactor": self.prefactor.tolist(), "c": self.c.to_dict(), "s": self.s}


class LinearTimesExponential(RateSpec):
    """a(x, γ) = scale(x) Σ_{y∈γ} c1(x-y) · exp(Σ_{y∈γ} c2(x-y))."""

    family = "LinearTimesExponential"
    abs_integral_exact = False

    def __init__(self, grid, c1: Kernel, c2: Kernel, scale=1.0):
        super().__init__(grid)
        self.c1, self.c2 = c1, c2
        self.scale = _per_cell(grid, scale)

    @cached_property
    def _Q2(self):
        return np.expm1(self.c2.pair)

    def eval_pairs(self, xs, rests):
        P1, P2 = self.c1.pair, self.c2.pair
        idx = (xs[:, None], rests)
        return self.scale[xs] * P1[idx].sum(axis=1) * np.exp(P2[idx].sum(axis=1))

    def kinv_general(self, xs, xis, etas):
        P1, P2 = self.c1.pair, self.c2.pair
        e_xi = np.exp(P2[xs[:, None], xis].sum(axis=1))
        q = self._Q2[xs[:, None], etas]
        out = self.eval_pairs(xs, xis) * q.prod(axis=1)
        for j in range(etas.shape[1]):
            out = out + self.scale[xs] * e_xi * P1[xs, etas[:, j]] * (1.0 + q[:, j]) * _prod_except(q, j)
        return out

    def abs_integral(self, x, xi, C):
        # triangle-inequality bound; exact when c1 and e^{c2}-1 keep one sign
        xi = _cells(xi)
        keep = self.exclusion_mask(x, xi)
        h = self.grid.cell_volume
        P1, P2, Q2 = self.c1.pair, self.c2.pair, self._Q2
        e_xi = np.exp(P2[x, xi].sum())
        a = self.scale[x] * P1[x, xi].sum() * e_xi
        fac = 1.0 + C * h * np.abs(Q2[x, keep])
        R = np.prod(fac)
        first = C * h * np.sum(np.abs(P1[x, keep]) * (1.0 + Q2[x, keep]) / fac) * R
        return abs(self.scale[x]) * e_xi * first + abs(a) * R

    def to_dict(self):
        return {"family": self.family, "c1": self.c1.to_dict(), "c2": self.c2.to_dict(), "scale": self.scale.tolist()}


class Mixed(RateSpec):
    """a(x, γ) = scale(x) Σ_{y∈γ} c1(x-y) exp(Σ_{w∈γ∖y} c2(y-w))."""

    family = "Mixed"
    abs_integral_exact = False

    def __init__(self, grid, c1: Kernel, c2: Kernel, scale=1.0):
        super().__init__(grid)
        self.c1, self.c2 = c1, c2
        self.scale = _per_cell(grid, scale)

    @cached_property
    def _Q2(self):
        return np.expm1(self.c2.pair)

    def eval_pairs(self, xs, rests):
        P1, P2 = self.c1.pair, self.c2.pair
        out = np.zeros(len(xs))
        for j in range(rests.shape[1]):
            y = rests[:, j]
            others = np.delete(rests, j, axis=1)
            out += P1[xs, y] * np.exp(P2[y[:, None], others].sum(axis=1))
        return self.scale[xs] * out

    def kinv_general(self, xs, xis, etas):
        P1, P2, Q2 = self.c1.pair, self.c2.pair, self._Q2
        out = np.zeros(len(xs))
        for j in range(etas.shape[1]):
            y = etas[:, j][:, None]
            others = np.delete(etas, j, axis=1)
            out += P1[xs, y[:, 0]] * Q2[y, others].prod(axis=1) * np.exp(P2[y, xis].sum(axis=1))
        for i in range(xis.shape[1]):
            y = xis[:, i][:, None]
            rest = np.delete(xis, i, axis=1)
            out += P1[xs, y[:, 0]] * Q2[y, etas].prod(axis=1) * np.exp(P2[y, rest].sum(axis=1))
        return self.scale[xs] * out

    def abs_integral(self, x, xi, C):
        # triangle-inequality upper bound
        xi = _cells(xi)
        keep = self.exclusion_mask(x, xi)
        h = self.grid.cell_volume
        P1, P2, Q2 = self.c1.pair, self.c2.pair, self._Q2
        logR = np.log1p(C * h * np.abs(Q2[:, keep])).sum(axis=1)   # per y
        first = C * h * np.sum(np.abs(P1[x, keep]) * np.exp(logR[keep] + P2[keep][:, xi].sum(axis=1)))
        second = 0.0
        for y in xi:
            rest = xi[xi != y]
            second += abs(P1[x, y]) * np.exp(P2[y, rest].sum() + logR[y])
        return abs(self.scale[x]) * (first + second)

    def to_dict(self):
        return {"family": self.family, "c1": self.c1.to_dict(), "c2": self.c2.to_dict(), "scale": self.scale.tolist()}


FAMILIES = {cls.family: cls for cls in (Constant, Linear, Exponential, LinearTimesExponential, Mixed)}


def eval_rate(spec: RateSpec, x: int, eta) -> float:
    return spec.eval_rate(x, eta)


def k_inverse_rate(spec: RateSpec, x: int, xi, eta) -> float:
    return spec.k_inverse_rate(x, xi, eta)


class BirthDeathModel:
    """Birth rate b(x, γ) and death rate d(x, γ∖x) on a grid.

    ``params`` keeps the physical parameters of a preset (used for the
    closed-form constants in :func:`gammadyn.bounds.compute_bounds`).
    """

    PRESETS = ("surgailis", "glauber", "bdlp", "bdlp_modified", "contact")

    def __init__(self, birth: RateSpec, death: RateSpec, preset: str | None = None, params: dict | None = None):
        if birth.grid != death.grid:
            raise ValueError("birth and death rates live on different grids")
        if preset is not None and preset not in self.PRESETS:
            raise ValueError(f"unknown preset {preset!r}")
        self.birth, self.death = birth, death
        self.preset = preset
        self.params = dict(params or {})

    @property
    def grid(self) -> GridGeometry:
        return self.birth.grid

    def __repr__(self):
        return f"BirthDeathModel(preset={self.preset}, birth={self.birth.family}, death={self.death.family})"


def death_energy(model: BirthDeathModel, eta) -> float:
    eta = tuple(int(c) for c in eta)
    if not eta:
        return 0.0
    arr = np.asarray(eta, dtype=np.int64)
    return float(death_energy_rows(model, arr[None, :])[0])


def death_energy_rows(model: BirthDeathModel, rows: np.ndarray) -> np.ndarray:
    """D(η) for every row of a (K, n) array of configurations."""
    rows = np.asarray(rows, dtype=np.int64)
    K, n = rows.shape
    out = np.zeros(K)
    for j in range(n):
        out += model.death.eval_pairs(rows[:, j], np.delete(rows, j, axis=1))
    return out


# -- presets ---------------------------------------------------------------

def surgailis(grid, m=1.0, z=1.0) -> BirthDeathModel:
    """Independent births with intensity z and deaths with rate m."""
    return BirthDeathModel(Constant(grid, z), Constant(grid, m), "surgailis", {"m": m, "z": z})


def glauber(grid, z, phi: Kernel, s: float = 0.0, m=1.0) -> BirthDeathModel:
    if (phi.table < 0).any():
        raise ValueError("Glauber potential must be non-negative")
    death = Exponential(grid, m, phi, s)
    birth = Exponential(grid, z, phi, s - 1.0)
    return BirthDeathModel(birth, death, "glauber", {"z": z, "m": m, "s": s, "phi": phi})


def _check_probability_kernel(a: Kernel, name):
    if abs(a.integral - 1.0) > 1e-8 or (a.table < 0).any():
        raise ValueError(f"{name} must be a non-negative kernel with unit integral")


def bdlp(grid, m, kappa_minus, a_minus: Kernel, kappa_plus, a_plus: Kernel) -> BirthDeathModel:
    _check_probability_kernel(a_minus, "a_minus")
    _check_probability_kernel(a_plus, "a_plus")
    death = Linear(grid, a_minus, scale=kappa_minus, base=m)
    birth = Linear(grid, a_plus, scale=kappa_plus)
    params = dict(m=m, kappa_minus=kappa_minus, a_minus=a_minus, kappa_plus=kappa_plus, a_plus=a_plus)
    return BirthDeathModel(birth, death, "bdlp", params)


def bdlp_modified(grid, m, kappa_minus, a_minus: Kernel, kappa_plus, a_plus: Kernel, kappa) -> BirthDeathModel:
    _check_probability_kernel(a_minus, "a_minus")
    _check_probability_kernel(a_plus, "a_plus")
    death = Linear(grid, a_minus, scale=kappa_minus, base=m)
    birth = Linear(grid, a_plus, scale=kappa_plus, base=kappa)
    params = dict(m=m, kappa_minus=kappa_minus, a_minus=a_minus, kappa_plus=kappa_plus, a_plus=a_plus, kappa=kappa)
    return BirthDeathModel(birth, death, "bdlp_modified", params)


def contact(grid, m, kappa, a: Kernel, phi: Kernel) -> BirthDeathModel:
    """Contact model with establishment factor: b = κ e^{Σφ} Σ a, d = m."""
    birth = LinearTimesExponential(grid, a, phi, scale=kappa)
    return BirthDeathModel(birth, Constant(grid, m), "contact", {"m": m, "kappa": kappa, "a": a, "phi": phi})
