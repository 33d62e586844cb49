"""Hypothesis checkers: the constants a1, a2, nu and the smallness flags."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.optimize import bisect

from .grid import ConfigSpace, GridGeometry
from .rates import BirthDeathModel, Kernel, death_energy_rows


def beta_tau(phi: Kernel, tau: float, grid: GridGeometry | None = None) -> float:
    """β_τ = Σ_offsets |e^{τφ} - 1| h^d."""
    if abs(tau) > 1:
        raise ValueError("|tau| must be <= 1")
    grid = grid or phi.grid
    return float(np.abs(np.expm1(tau * phi.table)).sum() * grid.cell_volume)


def glauber_alpha0(z: float, C: float, C_phi: float) -> float:
    """Lower end α₀ of the invariant-subspace interval for the Glauber chain."""
    target = z * C_phi
    if target >= math.exp(-1):
        raise ValueError(f"less_e-1: z*C_phi = {target:.6g} >= 1/e")
    if C_phi == 0 or target == 0:
        return max(0.5, 1.0 / C)
    x1 = glauber_x1(target)
    CC = C * C_phi
    if CC > 1:
        return max(0.5, 1.0 / CC, 1.0 / C)
    return max(0.5, x1 / CC, 1.0 / C)


def glauber_x1(target: float) -> float:
    """Smaller root of x e^{-x} = target on (0, 1), by bisection."""
    if target <= 0:
        return 0.0
    return bisect(lambda x: x * math.exp(-x) - target, 0.0, 1.0, xtol=1e-12, rtol=4 * np.finfo(float).eps)


@dataclass
class GlauberFlags:
    C_phi: float
    smallparam_ok: bool
    verysmallparam_ok: bool
    nu_param: float
    nu_verysmall_ok: bool
    new_z_ok: bool
    laht_ok: bool
    alpha0: float | None


@dataclass
class BoundsReport:
    a1: float
    a2: float
    C: float
    asmall_ok: bool
    stationary_ok: bool
    A: float
    N_poly: int
    nu: float
    nusmall_ok: bool
    alpha_lo: float
    alpha_hi: float
    source: str = "numeric"
    numeric_a1: float = float("nan")
    numeric_a2: float = float("nan")
    glauber: GlauberFlags | None = None
    notes: list = field(default_factory=list)

    @property
    def asmall_value(self) -> float:
        return self.a1 + self.a2 / self.C

    def flags(self) -> dict:
        out = {"asmall": self.asmall_ok, "statior-est": self.stationary_ok, "nusmall": self.nusmall_ok}
        if self.glauber is not None:
            g = self.glauber
            out.update({
                "smallparam": g.smallparam_ok,
                "verysmallparam": g.verysmallparam_ok,
                "nu-verysmallparam": g.nu_verysmall_ok,
                "new_z": g.new_z_ok,
                "LAHT": g.laht_ok,
            })
        return out

    def to_dict(self):
        return asdict(self)


def glauber_flags(z: float, C: float, C_phi: float, nu: float | None = None) -> GlauberFlags:
    CC = C * C_phi
    small = z * math.exp(CC) <= C
    very = z <= min(C * math.exp(-CC), 2 * C * math.exp(-2 * CC))
    nu_param = z * math.exp(CC) / C
    second = z <= 2 * C * math.exp(-2 * CC)
    if nu is None:
        # the smallest admissible nu satisfies the first inequality with equality
        nu_ok = nu_param < 1 and second
    else:
        nu_ok = 0 < nu < 1 and z <= nu * C * math.exp(-CC) and second
    new_z = (z < C * math.exp(-CC)) if CC <= math.log(2) else True
    laht = z * C_phi < 1 / (2 * math.e)
    try:
        a0 = glauber_alpha0(z, C, C_phi) if very and new_z else None
    except ValueError:
        a0 = None
    return GlauberFlags(C_phi, small, very, nu_param, nu_ok, new_z, laht, a0)


def numeric_constants(model: BirthDeathModel, C: float, n_sup: int = 3):
    """Suprema of I_d/D and I_b/D over configurations with 1 <= |ξ| <= n_sup.

    Returns (a1, a2, dmax) where dmax[n] is the largest death rate seen with
    n neighbours.  Unbounded ratios (D = 0 with I > 0) come back as inf.
    """
    grid = model.grid
    space = ConfigSpace(grid.n_cells, n_sup)
    a1 = a2 = 0.0
    dmax = np.zeros(n_sup)
    for n in range(1, n_sup + 1):
        rows = space.levels[n]
        D = death_energy_rows(model, rows)
        for r, row in enumerate(rows):
            Id = Ib = 0.0
            for j in range(n):
                x = int(row[j])
                rest = np.delete(row, j)
                Id += model.death.abs_integral(x, rest, C)
                Ib += model.birth.abs_integral(x, rest, C)
            if D[r] > 0:
                a1 = max(a1, Id / D[r])
                a2 = max(a2, Ib / D[r])
            else:
                if Id > 0:
                    a1 = math.inf
                if Ib > 0:
                    a2 = math.inf
        for j in range(n):
            d = model.death.eval_pairs(rows[:, j], np.delete(rows, j, axis=1))
            dmax[n - 1] = max(dmax[n - 1], float(d.max()))
    return a1, a2, dmax


def _arr(v):
    return np.atleast_1d(np.asarray(v, dtype=float))


def compute_bounds(model: BirthDeathModel, C: float, grid: GridGeometry | None = None, n_max: int = 3,
                   nu_glauber: float | None = None) -> BoundsReport:
    grid = grid or model.grid
    if not C > 0:
        raise ValueError("C must be positive")
    na1, na2, dmax = numeric_constants(model, C, n_max)
    a1, a2, source = na1, na2, "numeric"
    A = float(dmax[0])
    N_poly = 0
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = [(dmax[n] / A) ** (1.0 / n) if A > 0 else math.inf for n in range(1, len(dmax))]
    nu = max([1.0] + ratios)
    notes = []
    glauber_part = None
    p = model.params
    if model.preset == "surgailis":
        m, z = _arr(p["m"]), _arr(p["z"])
        a1, a2, source = 1.0, float(np.max(z / m)), "closed-form"
        A, N_poly, nu = float(m.max()), 0, 1.0
    elif model.preset == "glauber":
        phi: Kernel = p["phi"]
        s = float(p["s"])
        m, z = _arr(p["m"]), _arr(p["z"])
        sigma = float(np.max(z / m))
        a1 = math.exp(C * beta_tau(phi, s))
        a2 = sigma * math.exp(C * beta_tau(phi, s - 1))
        source = "closed-form"
        A, N_poly, nu = float(m.max()), 0, math.exp(s * phi.sup)
        zz = float(z.max())
        glauber_part = glauber_flags(zz, C, beta_tau(phi, -1.0), nu_glauber)
    elif model.preset in ("bdlp", "bdlp_modified"):
        m, km, kp = _arr(p["m"]), _arr(p["kappa_minus"]), _arr(p["kappa_plus"])
        am, ap = p["a_minus"], p["a_plus"]
        with np.errstate(divide="ignore"):
            r1 = float(np.min(m / (C * km))) if (km > 0).any() else math.inf
            r2 = float(np.min(m / kp)) if (kp > 0).any() else math.inf
        A = float(max(m.max(), km.max() * am.sup))
        N_poly, nu = 1, 1.0
        if model.preset == "bdlp":
            cond3 = np.all(4 * kp.max() * ap.table <= C * km.min() * am.table + 1e-15)
            delta = min(r1, r2) - 4
            if delta > 0 and cond3:
                a1, a2, source = 1 + 1 / (4 + delta), C / 4, "closed-form"
            else:
                notes.append("smallparBDLP conditions fail; numeric constants used")
        else:
            kap = _arr(p["kappa"])
            aaa1 = 2 * max(float((km * C / m).max()), float((2 * kap / (C * m)).max())) < 1
            aaa2 = np.all(2 * kp.max() * ap.table <= C * km.min() * am.table + 1e-15)
            if aaa1 and aaa2:
                a1, a2, source = 1 + float((C * km / m).max()), C / 2, "closed-form"
            else:
                notes.append("aaa1/aaa2 fail; numeric constants used")
    if model.preset == "contact":
        notes.append("no closed form for the contact model; numeric estimates only")
    if not model.death.abs_integral_exact or not model.birth.abs_integral_exact:
        notes.append("numeric I_d/I_b use a triangle-inequality bound for product-type families")
    s_val = a1 + a2 / C
    asmall_ok = bool(s_val < 1.5)
    stationary_ok = bool(s_val < 2.0)
    if a1 < 1.5 and a2 > 0:
        alpha_lo = a2 / (C * (1.5 - a1))
        nusmall_ok = bool(1 <= nu < (C / a2) * (1.5 - a1))
    elif a1 < 1.5:
        alpha_lo, nusmall_ok = 0.0, bool(nu >= 1)
    else:
        alpha_lo, nusmall_ok = math.inf, False
    alpha_hi = 1.0 / nu
    return BoundsReport(
        a1=float(a1), a2=float(a2), C=float(C), asmall_ok=asmall_ok, stationary_ok=stationary_ok,
        A=float(A), N_poly=int(N_poly), nu=float(nu), nusmall_ok=nusmall_ok,
        alpha_lo=float(alpha_lo), alpha_hi=float(alpha_hi), source=source,
        numeric_a1=float(na1), numeric_a2=float(na2), glauber=glauber_part, notes=notes,
    )


def describe_failure(report: BoundsReport, flag: str) -> str:
    """Message naming a violated inequality, e.g. 'asmall: a1+a2/C = 1.62 >= 1.5'."""
    v = report.asmall_value
    if flag == "asmall":
        return f"asmall: a1+a2/C = {v:.6g} >= 1.5"
    if flag == "statior-est":
        return f"statior-est: a1+a2/C = {v:.6g} >= 2"
    if flag == "nusmall":
        return f"nusmall: nu = {report.nu:.6g} not in [1, (C/a2)(3/2-a1))"
    g = report.glauber
    if g is None:
        return flag
    CC = report.C * g.C_phi
    if flag == "smallparam":
        return f"smallparam: z*exp(C*C_phi) = {g.nu_param * report.C:.6g} > C = {report.C:.6g}"
    if flag == "verysmallparam":
        return f"verysmallparam: z > min(C e^(-C C_phi), 2C e^(-2 C C_phi)) = {min(report.C * math.exp(-CC), 2 * report.C * math.exp(-2 * CC)):.6g}"
    if flag == "nu-verysmallparam":
        return f"nu-verysmallparam: smallest admissible nu = {g.nu_param:.6g}"
    if flag == "LAHT":
        return f"LAHT: z*C_phi >= 1/(2e)"
    if flag == "new_z":
        return "new_z: z >= C e^(-C C_phi) while C C_phi <= ln 2"
    return flag
