"""Continuum Monte Carlo for the birth-and-death processes on the torus [0, L)^d.

The simulator does not use the grid of the hierarchy code; it only borrows
the grid when ensemble estimates are binned per cell.
"""
from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .grid import GridGeometry


class RateOverflowError(RuntimeError):
    pass


class AuditError(RuntimeError):
    pass


# -- kernels ----------------------------------------------------------------------

@dataclass(frozen=True)
class ContinuumKernel:
    """Radial kernel c(|x-y|): 'tophat' (height on |r| <= radius) or 'zero'.

    With ``normalize`` the height is chosen so that ∫ c = 1.
    """

    kind: str = "tophat"
    radius: float = 1.0
    height: float = 1.0
    normalize: bool = False
    dim: int = 1

    def __post_init__(self):
        if self.kind not in ("tophat", "zero"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.radius < 0:
            raise ValueError("radius must be >= 0")

    @property
    def ball_volume(self) -> float:
        r = self.radius
        return 2 * r if self.dim == 1 else math.pi * r * r

    @property
    def value(self) -> float:
        if self.kind == "zero":
            return 0.0
        return 1.0 / self.ball_volume if self.normalize else self.height

    @property
    def support(self) -> float:
        return 0.0 if self.kind == "zero" else self.radius

    def __call__(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        if self.kind == "zero":
            return np.zeros_like(r)
        return np.where(r <= self.radius, self.value, 0.0)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        """Displacement distributed with density c/∫c (uniform in the ball)."""
        if self.kind == "zero":
            raise ValueError("cannot sample from the zero kernel")
        if self.dim == 1:
            return np.array([rng.uniform(-self.radius, self.radius)])
        rad = self.radius * math.sqrt(rng.uniform())
        ang = rng.uniform(0, 2 * math.pi)
        return np.array([rad * math.cos(ang), rad * math.sin(ang)])

    def to_dict(self):
        return {"kind": self.kind, "radius": self.radius, "height": self.height, "normalize": self.normalize}


@dataclass
class PointConfiguration:
    points: np.ndarray
    L: float
    dim: int = 1

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, self.dim)
        if pts.size and (pts.min() < 0 or pts.max() >= self.L):
            raise ValueError("coordinates must lie in [0, L)")
        if len(np.unique(pts, axis=0)) != len(pts):
            raise ValueError("points must be pairwise distinct")
        self.points = pts

    def __len__(self):
        return len(self.points)


@dataclass
class SimConfig:
    """Simulation set-up.

    ``model`` is one of surgailis, glauber, bdlp, bdlp_modified, contact.
    ``params`` holds the scalar rates (m, z, s, kappa, kappa_minus, kappa_plus)
    and the kernels (phi, a, a_minus, a_plus) as :class:`ContinuumKernel`.
    """

    model: str
    params: dict
    L: float = 10.0
    dim: int = 1
    t_end: float = 1.0
    replicas: int = 100
    seed: int = 0
    record_times: tuple | None = None
    audit_every: int = 1000
    threads: int = 1

    def __post_init__(self):
        if self.model not in ("surgailis", "glauber", "bdlp", "bdlp_modified", "contact"):
            raise ValueError(f"unknown model {self.model!r}")
        if self.replicas < 1:
            raise ValueError("replicas must be >= 1")
        if self.dim not in (1, 2):
            raise ValueError("dim must be 1 or 2")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        for name in ("phi", "a", "a_minus", "a_plus"):
            k = self.params.get(name)
            if k is not None and k.support >= self.L / 2:
                raise ValueError(f"{name} support radius must be < L/2")
        if self.model == "glauber":
            if self.params["phi"](0.0) < 0 or self.params["phi"].height < 0:
                raise ValueError("Glauber thinning needs phi >= 0")
            if self.params.get("s", 0.0) > 1:
                raise ValueError("Glauber thinning needs s <= 1")
        if self.model == "contact" and self.params["phi"].kind != "zero" and self.params["phi"].height > 0:
            raise ValueError("contact thinning needs phi <= 0")

    @property
    def times(self) -> tuple:
        return tuple(sorted(set(self.record_times or ()) | {self.t_end}))

    @property
    def thinning_envelope(self) -> float:
        """Intensity of uniform birth proposals (per unit volume)."""
        p = self.params
        return {"surgailis": p.get("z", 0.0), "glauber": p.get("z", 0.0),
                "bdlp_modified": p.get("kappa", 0.0)}.get(self.model, 0.0)


# -- cell lists -------------------------------------------------------------------

class CellList:
    """Uniform cell list on the torus with cell side >= the interaction range."""

    def __init__(self, L: float, dim: int, rng_radius: float):
        self.L, self.dim = L, dim
        self.nc = max(1, int(L // max(rng_radius, 1e-12))) if rng_radius > 0 else 1
        self.nc = min(self.nc, 1024)
        self.side = L / self.nc
        self.cells: dict = {}

    def key(self, x) -> tuple:
        return tuple(int(c) % self.nc for c in np.floor(np.asarray(x) / self.side))

    def add(self, i, x):
        self.cells.setdefault(self.key(x), set()).add(i)

    def remove(self, i, x):
        s = self.cells[self.key(x)]
        s.discard(i)

    def near(self, x) -> list:
        k = self.key(x)
        span = range(-1, 2) if self.nc >= 3 else range(self.nc)
        out = set()
        if self.dim == 1:
            for a in span:
                out |= self.cells.get(((k[0] + a) % self.nc,), set())
        else:
            for a in span:
                for b in span:
                    out |= self.cells.get(((k[0] + a) % self.nc, (k[1] + b) % self.nc), set())
        return list(out)


def _dist(x, Y, L):
    d = np.abs(Y - x)
    d = np.minimum(d, L - d)
    return np.sqrt((d * d).sum(axis=-1))


# -- one replica ------------------------------------------------------------------

class _Replica:
    def __init__(self, cfg: SimConfig, rng: np.random.Generator, initial: np.ndarray):
        self.cfg, self.rng = cfg, rng
        p = cfg.params
        self.kind = cfg.model
        self.L, self.dim = cfg.L, cfg.dim
        # kernel that feeds the per-particle death modifier
        self.dk = {"glauber": p.get("phi"), "bdlp": p.get("a_minus"), "bdlp_modified": p.get("a_minus")}.get(self.kind)
        rad = max([k.support for k in (p.get(n) for n in ("phi", "a", "a_minus", "a_plus")) if k is not None] + [0.0])
        self.cl = CellList(self.L, self.dim, rad)
        cap = max(16, 2 * len(initial))
        self.pos = np.zeros((cap, self.dim))
        self.acc = np.zeros(cap)      # Σ_j c(x_i - x_j) for the death kernel
        self.n = 0
        for x in initial:
            self._insert(np.asarray(x, dtype=float))
        self.events = 0
        self.proposals = 0

    # neighbour sums
    def _neigh(self, x, kernel, exclude=None):
        if kernel is None or kernel.kind == "zero":
            return np.zeros(0, dtype=np.int64), np.zeros(0)
        idx = [j for j in self.cl.near(x) if j != exclude]
        if not idx:
            return np.zeros(0, dtype=np.int64), np.zeros(0)
        idx = np.array(idx, dtype=np.int64)
        vals = kernel(_dist(x, self.pos[idx], self.L))
        keep = vals != 0
        return idx[keep], vals[keep]

    def _insert(self, x):
        if self.n == len(self.pos):
            self.pos = np.vstack([self.pos, np.zeros_like(self.pos)])
            self.acc = np.concatenate([self.acc, np.zeros_like(self.acc)])
        i = self.n
        idx, vals = self._neigh(x, self.dk)
        self.acc[idx] += vals
        self.pos[i] = x
        self.acc[i] = vals.sum()
        self.cl.add(i, x)
        self.n += 1

    def _delete(self, i):
        x = self.pos[i].copy()
        idx, vals = self._neigh(x, self.dk, exclude=i)
        self.acc[idx] -= vals
        self.cl.remove(i, x)
        last = self.n - 1
        if i != last:
            self.cl.remove(last, self.pos[last])
            self.pos[i] = self.pos[last]
            self.acc[i] = self.acc[last]
            self.cl.add(i, self.pos[i])
        self.n -= 1

    def death_rates(self) -> np.ndarray:
        p = self.cfg.params
        a = self.acc[:self.n]
        m = p.get("m", 1.0)
        if self.kind == "glauber":
            return m * np.exp(p.get("s", 0.0) * a)
        if self.kind in ("bdlp", "bdlp_modified"):
            return m + p["kappa_minus"] * a
        return np.full(self.n, m)

    def audit(self):
        """Recompute the neighbour sums from scratch and compare."""
        if self.dk is None:
            return
        for i in range(self.n):
            _, vals = self._neigh(self.pos[i], self.dk, exclude=i)
            full = vals.sum()
            if abs(full - self.acc[i]) > 1e-9 * max(1.0, abs(full)):
                raise AuditError(f"incremental rate drift at particle {i}: {self.acc[i]} vs {full}")
            self.acc[i] = full

    def offspring_rate(self) -> float:
        p = self.cfg.params
        if self.kind in ("bdlp", "bdlp_modified"):
            return p["kappa_plus"] * self.n
        if self.kind == "contact":
            return p["kappa"] * self.n
        return 0.0

    def accept_uniform(self, x) -> float:
        if self.kind != "glauber":
            return 1.0
        p = self.cfg.params
        _, vals = self._neigh(x, p["phi"])
        return math.exp((p.get("s", 0.0) - 1.0) * vals.sum())

    def run(self, times) -> list:
        cfg, rng = self.cfg, self.rng
        vol = self.L ** self.dim
        u_rate = cfg.thinning_envelope * vol
        out = []
        t = 0.0
        ti = 0
        while ti < len(times):
            dr = self.death_rates()
            D = float(dr.sum())
            o_rate = self.offspring_rate()
            total = D + u_rate + o_rate
            dt = rng.exponential(1.0 / total) if total > 0 else math.inf
            while ti < len(times) and t + dt > times[ti]:
                out.append(self.pos[:self.n].copy())
                ti += 1
            if ti == len(times):
                break
            t += dt
            u = rng.uniform() * total
            if u < D:
                i = int(np.searchsorted(np.cumsum(dr), u, side="right"))
                self._delete(min(i, self.n - 1))
                self.events += 1
            elif u < D + u_rate:
                self.proposals += 1
                x = rng.uniform(0, self.L, self.dim)
                acc = self.accept_uniform(x)
                if acc > 1 + 1e-12:
                    raise RateOverflowError(f"birth acceptance {acc} > 1 at t={t}: envelope violated")
                if rng.uniform() < acc:
                    self._insert(x)
                    self.events += 1
            else:
                self.proposals += 1
                par = int(rng.integers(self.n))
                kern = cfg.params["a_plus"] if self.kind != "contact" else cfg.params["a"]
                x = np.mod(self.pos[par] + kern.sample(rng), self.L)
                acc = 1.0
                if self.kind == "contact" and cfg.params["phi"].kind != "zero":
                    _, vals = self._neigh(x, cfg.params["phi"])
                    acc = math.exp(vals.sum())
                    if acc > 1 + 1e-12:
                        raise RateOverflowError(f"contact acceptance {acc} > 1 at t={t}")
                if rng.uniform() < acc:
                    self._insert(x)
                    self.events += 1
            if cfg.audit_every and self.events and self.events % cfg.audit_every == 0:
                self.audit()
        return out


@dataclass
class SimResult:
    times: tuple
    states: list                 # states[r][j]: replica r at times[j]
    events: list
    proposals: list
    cpu_ms: list
    cfg: SimConfig | None = None

    def at(self, t) -> list:
        j = list(self.times).index(t)
        return [s[j] for s in self.states]

    def summary_rows(self):
        return [(r, len(s[-1]), e, c) for r, (s, e, c) in enumerate(zip(self.states, self.events, self.cpu_ms))]


def replica_rng(seed: int, r: int) -> np.random.Generator:
    """Counter-based stream for replica r.

    The 128-bit Philox key is (seed xor r, r).  The second word keeps streams
    of different seeds apart: with seed xor r alone, seeds 1 and 2 would
    produce the same set of streams in a different replica order.
    """
    key = np.array([(int(seed) ^ int(r)) & (2 ** 64 - 1), int(r)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def poisson_sample(rng: np.random.Generator, z: float, L: float, dim: int = 1) -> np.ndarray:
    n = rng.poisson(z * L ** dim)
    return rng.uniform(0, L, (n, dim))


def simulate(cfg: SimConfig, initial=None) -> SimResult:
    """Run ``cfg.replicas`` independent exact trajectories.

    ``initial`` is a PointConfiguration, ('poisson', z0) or None (empty).
    """
    times = cfg.times

    def one(r):
        rng = replica_rng(cfg.seed, r)
        if initial is None:
            init = np.zeros((0, cfg.dim))
        elif isinstance(initial, PointConfiguration):
            init = initial.points
        elif isinstance(initial, tuple) and initial[0] == "poisson":
            init = poisson_sample(rng, float(initial[1]), cfg.L, cfg.dim)
        else:
            raise ValueError("initial must be a PointConfiguration or ('poisson', z0)")
        t0 = time.process_time()
        rep = _Replica(cfg, rng, init)
        states = rep.run(times)
        return states, rep.events, rep.proposals, 1000 * (time.process_time() - t0)

    threads = max(1, int(cfg.threads))
    if threads == 1:
        res = [one(r) for r in range(cfg.replicas)]
    else:
        with ThreadPoolExecutor(threads) as ex:
            res = list(ex.map(one, range(cfg.replicas)))
    return SimResult(times, [r[0] for r in res], [r[1] for r in res], [r[2] for r in res],
                     [r[3] for r in res], cfg)


# -- estimators -------------------------------------------------------------------

def jackknife(samples: np.ndarray):
    """Mean and leave-one-out jackknife standard error along axis 0."""
    x = np.asarray(samples, dtype=float)
    R = x.shape[0]
    mean = x.mean(axis=0)
    if R < 2:
        return mean, np.full_like(mean, np.nan)
    loo = (x.sum(axis=0) - x) / (R - 1)
    se = np.sqrt((R - 1) / R * ((loo - loo.mean(axis=0)) ** 2).sum(axis=0))
    return mean, se


@dataclass
class EnsembleEstimate:
    k1: np.ndarray
    k1_se: np.ndarray
    bins: np.ndarray
    k2: np.ndarray
    k2_se: np.ndarray
    replica_count: int
    density: float = float("nan")
    density_se: float = float("nan")

    def rows(self):
        out = [("cell", i, v, s) for i, (v, s) in enumerate(zip(self.k1, self.k1_se))]
        out += [("bin", i, v, s) for i, (v, s) in enumerate(zip(self.k2, self.k2_se))]
        return out


def _shell_volume(a, b, dim):
    return 2 * (b - a) if dim == 1 else math.pi * (b * b - a * a)


def estimate_correlations(states, grid: GridGeometry, radial_bins) -> EnsembleEstimate:
    """k1 per grid cell and radially binned k2 for a homogeneous ensemble."""
    R = len(states)
    if R < 2:
        raise ValueError("need at least two replicas for standard errors")
    L, dim = grid.side_length, grid.dim
    bins = np.asarray(radial_bins, dtype=float)
    vol = L ** dim
    counts = np.zeros((R, grid.n_cells))
    pairs = np.zeros((R, len(bins) - 1))
    totals = np.zeros(R)
    for r, pts in enumerate(states):
        pts = np.asarray(pts, dtype=float).reshape(-1, dim)
        totals[r] = len(pts)
        if len(pts):
            mi = np.floor(pts / grid.cell_width).astype(np.int64) % grid.cells_per_side
            cells = grid.flat_index(mi)
            counts[r] = np.bincount(cells, minlength=grid.n_cells)
        if len(pts) > 1:
            d = np.abs(pts[:, None, :] - pts[None, :, :])
            d = np.minimum(d, L - d)
            dist = np.sqrt((d * d).sum(axis=-1))
            iu = ~np.eye(len(pts), dtype=bool)
            pairs[r] = np.histogram(dist[iu], bins=bins)[0]
    k1, k1_se = jackknife(counts / grid.cell_volume)
    norm = np.array([vol * _shell_volume(a, b, dim) for a, b in zip(bins[:-1], bins[1:])])
    k2, k2_se = jackknife(pairs / norm)
    dens, dens_se = jackknife(totals / vol)
    return EnsembleEstimate(k1, k1_se, bins, k2, k2_se, R, float(dens), float(dens_se))


# -- Mecke identity ------------------------------------------------------------------

@dataclass
class MeckeResult:
    lhs: float
    rhs: float
    stderr: float

    @property
    def ok(self) -> bool:
        return abs(self.lhs - self.rhs) <= 3 * self.stderr


def mecke_check(z: float, h: Callable, R: int = 1000, L: float = 10.0, dim: int = 1, seed: int = 0,
                n_quad: int = 8) -> MeckeResult:
    """E Σ_{x∈γ} h(x, γ) against z ∫ E h(x, γ ∪ x) dx for Poisson(z) samples.

    ``h(x, pts)`` receives a point and the (n, dim) array of the configuration
    containing it.  The x-integral is estimated with ``n_quad`` uniform points
    per replica; the standard error is that of the paired difference.
    """
    vol = L ** dim
    lhs = np.zeros(R)
    rhs = np.zeros(R)
    for r in range(R):
        rng = replica_rng(seed, r)
        pts = poisson_sample(rng, z, L, dim)
        lhs[r] = sum(h(pts[i], pts) for i in range(len(pts)))
        xs = rng.uniform(0, L, (n_quad, dim))
        rhs[r] = z * vol * np.mean([h(x, np.vstack([pts, x[None, :]])) for x in xs]) if z > 0 else 0.0
    diff = lhs - rhs
    se = float(diff.std(ddof=1) / math.sqrt(R)) if R > 1 else float("nan")
    return MeckeResult(float(lhs.mean()), float(rhs.mean()), se)


# -- ergodicity ---------------------------------------------------------------------

@dataclass
class DecayReport:
    times: list
    norms: list
    level1: list
    slope: float
    level1_slope: float
    target: float
    window: tuple
    ok: bool
    message: str = ""

    def rows(self):
        return list(zip(self.times, self.norms, self.level1))


def _fit_slope(ts, vals):
    ts, vals = np.asarray(ts), np.asarray(vals)
    keep = vals > 0
    if keep.sum() < 2:
        return float("nan")
    return float(np.polyfit(ts[keep], np.log(vals[keep]), 1)[0])


def ergodicity_experiment(params, k0, times, delta: float, nu: float, window=None, k_mu=None,
                          tol: float = 1e-12) -> DecayReport:
    """Evolve k0 by the dual chain and record ‖k_t - k_μ‖_KC.

    ``params`` is a :class:`gammadyn.evolution.GlauberParams`; ``k_mu`` is
    computed with :func:`gammadyn.stationary.gibbs_correlation` unless given.
    """
    from .bounds import glauber_flags
    from .evolution import _space, chain_trajectory
    from .gamma import vec_norm_KC
    from .stationary import gibbs_correlation

    C, z = params.C, params.z
    flags = glauber_flags(z, C, params.C_phi, nu)
    if not flags.laht_ok:
        raise ValueError(f"LAHT: z*C_phi = {z * params.C_phi:.6g} >= 1/(2e)")
    if not flags.nu_verysmall_ok:
        lim = min(nu * C * math.exp(-C * params.C_phi), 2 * C * math.exp(-2 * C * params.C_phi))
        raise ValueError(f"nu-verysmallparam: z = {z:.6g} > {lim:.6g}")
    space = _space(params.grid.n_cells, k0.n_max)
    if k_mu is None:
        k_mu = gibbs_correlation(z, params.phi, C, params.grid, k0.n_max, tol=tol).k
    kmu = k_mu.to_vector(space)
    traj = chain_trajectory(k0, times, delta, params, dual=True)
    ts = [t for t, _ in traj]
    diffs = [v - kmu for _, v in traj]
    norms = [vec_norm_KC(space, d, C) for d in diffs]
    sl1 = space.level_slice(1)
    lev1 = [float(np.abs(d[sl1]).max()) for d in diffs]
    window = window or (ts[0], ts[-1])
    sel = [i for i, t in enumerate(ts) if window[0] <= t <= window[1]]
    slope = _fit_slope([ts[i] for i in sel], [norms[i] for i in sel])
    slope1 = _fit_slope([ts[i] for i in sel], [lev1[i] for i in sel])
    target = -(1 - nu) * 0.9
    return DecayReport(ts, norms, lev1, slope, slope1, target, tuple(window), bool(slope <= target))
