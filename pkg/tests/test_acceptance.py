"""Acceptance criteria, one test each.  Every test prints a PASS/FAIL line,
and the lines are repeated in the terminal summary (see conftest.py)."""
import itertools
import math
import time
import warnings

import numpy as np
import pytest

from gammadyn import rates
from gammadyn.config import build_model, load_config
from gammadyn.evolution import (EvolutionConfig, GlauberParams, P_delta_matrix, chain_trajectory,
                                evolve_correlation, generator_residual, lenard_pairing, restricted_norm_check,
                                surgailis_solution)
from gammadyn.gamma import (TruncatedGammaFunction, k_inverse, k_transform, minlos_check, vec_norm_KC,
                            vec_norm_LC)
from gammadyn.grid import ConfigSpace, GridGeometry
from gammadyn.hierarchy import OperatorContext
from gammadyn.particles import (SimConfig, ergodicity_experiment, estimate_correlations, mecke_check,
                                poisson_sample, replica_rng, simulate)
from gammadyn.stationary import KSContext, solve_stationary
from gammadyn.validation import check_conjugacy

RESULTS = []
GRID = GridGeometry(1, 32, 10.0)


def report(n, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def _preset(name):
    cfg, _ = load_config(name)
    spec = cfg.model
    return cfg, spec, build_model(spec, cfg.grid.build())


def test_criterion_01_k_roundtrip():
    space = ConfigSpace(8, 4)
    rng = np.random.default_rng(101)
    worst = 0.0
    for _ in range(100):
        G = TruncatedGammaFunction.from_vector(space, rng.normal(size=space.size))
        KG = lambda g: k_transform(G, g)
        for i in range(space.size):
            eta = space.config(i)
            worst = max(worst, abs(k_inverse(KG, eta) - G(eta)))
    report(1, worst <= 1e-12, f"K round trip, 100 functions, n_max=4, M=8: max entry error {worst:.3g} <= 1e-12")


def test_criterion_02_minlos():
    rng = np.random.default_rng(102)
    worst = 0.0
    for trial in range(20):
        n_max = 2 if trial < 10 else 3
        grid = GRID if n_max == 2 else GridGeometry(1, 8, 10.0)
        N = grid.n_cells
        a, b = rng.normal(size=(N, N)), rng.normal(size=N)
        # H(ξ, η, ξ∪η) vanishes once |ξ∪η| > n_max
        H = lambda xi, eta, un: (b[list(xi)].sum() + a[np.ix_(list(xi), list(eta))].sum()) if len(un) <= n_max else 0.0
        lhs, rhs = minlos_check(H, n_max, grid)
        worst = max(worst, abs(lhs - rhs))
    report(2, worst <= 1e-12, f"Minlos identity, 20 admissible H: max |lhs-rhs| {worst:.3g} <= 1e-12")


@pytest.mark.parametrize("name", ["surgailis", "glauber_free", "glauber_bump", "bdlp", "bdlp_modified", "contact"])
def test_criterion_03_conjugacy(name):
    _, _, model = _preset(name)
    conj, dual = check_conjugacy(model, np.random.default_rng(103), n_max=3)
    report(3, conj <= 1e-9 and dual <= 1e-9,
           f"[{name}] K(L̂G) vs L(KG) max dev {conj:.3g}, duality dev {dual:.3g} (both <= 1e-9)")


def test_criterion_04_kinv_closed_forms():
    rng = np.random.default_rng(104)
    grid = GRID
    c1 = rates.Kernel.tophat(grid, 1.0, 0.7)
    c2 = rates.Kernel.from_offsets(grid, {1: 0.5, -1: 0.5, 2: -0.8, -2: -0.8, 3: 0.3, -3: 0.3})
    sc = rng.uniform(0.5, 1.5, grid.n_cells)
    fams = [rates.Constant(grid, sc), rates.Linear(grid, c1, scale=sc, base=0.3),
            rates.Exponential(grid, sc, c2, s=-0.7), rates.LinearTimesExponential(grid, c1, c2, scale=sc),
            rates.Mixed(grid, c1, c2, scale=sc)]
    worst = {}
    for spec in fams:
        w = 0.0
        for nxi, neta in itertools.product(range(4), range(4)):
            for _ in range(8):
                # cells clustered so that kernels actually overlap
                start = int(rng.integers(grid.n_cells))
                cells = [(start + int(o)) % grid.n_cells for o in rng.permutation(7)]
                x, xi, eta = cells[0], tuple(sorted(cells[1:1 + nxi])), tuple(sorted(cells[4:4 + neta]))
                a = lambda sub: spec.eval_rate(x, tuple(sorted(xi + tuple(sub))))
                brute = k_inverse(a, eta)
                fast = spec.k_inverse_rate(x, xi, eta)
                # relative to the largest rate entering the alternating sum, so that
                # an exact zero computed as 1e-17 does not count as a relative error of 1
                scale = max([abs(brute)] + [abs(a(sub)) for n in range(neta + 1)
                                            for sub in itertools.combinations(eta, n)])
                w = max(w, abs(fast - brute) / scale if scale else abs(fast))
        worst[spec.family] = w
    ok = all(v <= 1e-10 for v in worst.values())
    report(4, ok, "K^-1 closed forms vs inclusion-exclusion, |xi|,|eta| <= 3: " +
           ", ".join(f"{k} {v:.2g}" for k, v in worst.items()) + " (<= 1e-10 rel)")


def test_criterion_05_surgailis():
    m, z = 1.0, 0.5
    ctx = OperatorContext(rates.surgailis(GRID, m, z), GRID, 3)
    rng = np.random.default_rng(105)
    k0 = TruncatedGammaFunction.from_vector(ctx.space, rng.uniform(0.5, 2.0, ctx.space.size))
    res = evolve_correlation(ctx, k0, EvolutionConfig(2.0, 3, dt=1e-3, t_end=1.0, stepper="rk4"), [1.0])
    got = res.snapshots[-1].to_vector(ctx.space)
    exact = surgailis_solution(m, z, k0, 1.0, GRID).to_vector(ctx.space)
    rel = float(np.max(np.abs(got - exact) / np.abs(exact)))
    report(5, rel <= 1e-6, f"Surgailis rk4 vs closed form at t=1, {ctx.space.size} keys: max rel err {rel:.3g} <= 1e-6")


def test_criterion_06_glauber_contraction_and_residual():
    _, spec, _ = _preset("glauber_bump")
    params = GlauberParams(spec.z, spec.phi.build(GRID), 2.0)
    assert params.smallparam_ok
    space = ConfigSpace(GRID.n_cells, 3)
    h = GRID.cell_volume
    rng = np.random.default_rng(106)
    P = P_delta_matrix(params, 0.1, 3)
    ratio = max(vec_norm_LC(space, P @ G, 2.0, h) / vec_norm_LC(space, G, 2.0, h)
                for G in (rng.normal(size=space.size) for _ in range(100)))
    # residual on G supported on levels <= 2 of a 4-level truncation
    ctx = OperatorContext(params.model(), GRID, 4)
    v = np.zeros(ctx.space.size)
    low = ctx.space.level_of <= 2
    v[low] = rng.normal(size=low.sum()) * (0.5 ** ctx.space.level_of[low])
    G = TruncatedGammaFunction.from_vector(ctx.space, v)
    deltas = (0.1, 0.05, 0.01)
    reps = [generator_residual(G, d, params, ctx) for d in deltas]
    order = float(np.polyfit(np.log(deltas), np.log([r.residual for r in reps]), 1)[0])
    ok = ratio <= 1 + 1e-12 and all(r.ok for r in reps) and 0.8 <= order <= 1.2
    report(6, ok, f"contraction max ratio {ratio:.6f} <= 1+1e-12; residuals " +
           ", ".join(f"{r.residual:.3g}<={r.bound:.3g}+{r.allowance:.2g}" for r in reps) + f"; order {order:.3f} in [0.8,1.2]")


def test_criterion_07_restricted_contraction():
    _, spec, _ = _preset("glauber_bump")
    params = GlauberParams(spec.z, spec.phi.build(GRID), 2.0)
    lines, ok = [], True
    for delta in (0.1, 0.01):
        rep = restricted_norm_check(delta, params, 0.5, trials=100, rng=107)
        ok &= rep.ok
        lines.append(f"delta {delta}: max ratio {rep.max_ratio:.6f} <= {rep.bound_factor:.6f}")
    report(7, ok, "restricted KC contraction, nu=0.5, 100 k with k(∅)=0: " + "; ".join(lines))


def test_criterion_08_stationary():
    parts, ok = [], True
    for name in ("bdlp", "bdlp_modified", "glauber_bump"):
        _, spec, model = _preset(name)
        ks = KSContext(model, OperatorContext(model, GRID, 3), 2.0, tol=1e-11)
        res = solve_stationary(ks)
        v = res.k.to_vector(ks.space)
        fac = max(res.factors)
        good = fac <= ks.norm_bound + 1e-6 and v[0] == 1.0 and res.L_star_residual <= 1e-9
        extra = ""
        if name == "bdlp":
            good &= not np.any(v[1:])
            extra = ", k^(n)=0 for n>=1 exactly" if not np.any(v[1:]) else ", nonzero levels"
        if name == "bdlp_modified":
            z = spec.kappa / spec.m
            err = float(np.max(np.abs(v - z ** ks.space.level_of)))
            good &= err <= 1e-9
            extra = f", |k - z^n| {err:.2g}"
        ok &= good
        parts.append(f"{name}: factor {fac:.3f} <= {ks.norm_bound:.3f}, L*k {res.L_star_residual:.2g}{extra}")
    report(8, ok, "; ".join(parts))


def test_criterion_09_ergodicity():
    cfg, spec, _ = _preset("glauber_free")
    ev = cfg.evolution
    space = ConfigSpace(GRID.n_cells, ev.n_max)
    k0 = TruncatedGammaFunction.from_vector(space, ev.initial.z ** space.level_of.astype(float))
    free = ergodicity_experiment(GlauberParams(spec.z, spec.phi.build(GRID), ev.C), k0, ev.times, ev.delta, ev.nu,
                                 window=ev.window)
    cfg, spec, _ = _preset("glauber_bump")
    ev = cfg.evolution
    bump = ergodicity_experiment(GlauberParams(spec.z, spec.phi.build(GRID), ev.C), k0, ev.times, ev.delta, ev.nu,
                                 window=(1.0, 3.0))
    ok = abs(free.level1_slope + 1) <= 0.05 and bump.slope <= -0.45
    report(9, ok, f"free level-1 slope {free.level1_slope:.4f} (within 5% of -1); "
                  f"bump slope {bump.slope:.4f} <= -0.45 on [1,3]")


def test_criterion_10_simulator():
    t0 = time.perf_counter()
    cfg, spec, _ = _preset("surgailis")
    s = cfg.sim
    scfg = SimConfig("surgailis", {"m": spec.m, "z": spec.z}, 10.0, 1, s.t_end, 200, cfg.seed, tuple(s.record_times))
    res = simulate(scfg, ("poisson", s.initial.z))
    dens_ok, zs = True, []
    for t in s.record_times:
        est = estimate_correlations(res.at(t), GRID, [0.0, 1.0])
        exact = spec.z / spec.m + (s.initial.z - spec.z / spec.m) * math.exp(-spec.m * t)
        zs.append((est.density - exact) / est.density_se)
        dens_ok &= abs(est.density - exact) <= 3 * est.density_se
    z = 0.5
    states = [poisson_sample(replica_rng(110, r), z, 10.0) for r in range(1000)]
    est = estimate_correlations(states, GRID, [0.0, 0.5, 1.0, 2.0, 3.0])
    pois_ok = abs(est.density - z) <= 3 * est.density_se and bool(np.all(np.abs(est.k2 - z * z) <= 3 * est.k2_se))
    cell_frac = float(np.mean(np.abs(est.k1 - z) <= 3 * est.k1_se))
    hs = [lambda x, p: float(2.0 <= x[0] < 6.0),
          lambda x, p: float(x[0] < 5.0) * float(np.sum(np.minimum(np.abs(p[:, 0] - x[0]), 10 - np.abs(p[:, 0] - x[0])) <= 1.0)),
          lambda x, p: math.cos(x[0]) ** 2 * len(p)]
    mecke = [mecke_check(0.7, h, R=1000, seed=111 + i) for i, h in enumerate(hs)]
    elapsed = time.perf_counter() - t0
    ok = dens_ok and pois_ok and all(m.ok for m in mecke) and elapsed <= 120
    report(10, ok, "Surgailis density z-scores " + ", ".join(f"{v:+.2f}" for v in zs) +
           f"; Poisson k1 {est.density:.4f}±{est.density_se:.4f} (cells within 3se: {cell_frac:.0%}), "
           f"k2 {np.round(est.k2, 4).tolist()}; Mecke " +
           ", ".join(f"{m.lhs:.3f}/{m.rhs:.3f}" for m in mecke) + f"; {elapsed:.1f}s <= 120s")


def test_criterion_11_positivity():
    _, spec, _ = _preset("glauber_bump")
    params = GlauberParams(spec.z, spec.phi.build(GRID), 2.0)
    space = ConfigSpace(GRID.n_cells, 3)
    k0 = TruncatedGammaFunction.from_vector(space, 0.5 ** space.level_of.astype(float))
    traj = chain_trajectory(k0, [0.0, 0.5, 1.0], 0.01, params, dual=True)
    rng = np.random.default_rng(112)
    worst = math.inf
    for t, v in traj:
        k = TruncatedGammaFunction.from_vector(space, v)
        for _ in range(100):
            size = int(rng.integers(1, 4))
            start = int(rng.integers(GRID.n_cells))
            window = tuple(sorted({(start + int(o)) % GRID.n_cells for o in rng.choice(4, size, replace=False)}))
            table = {sub: float(rng.exponential()) if rng.uniform() < 0.7 else 0.0
                     for n in range(len(window) + 1) for sub in itertools.combinations(window, n)}
            F = lambda g, w=window, tab=table: tab[tuple(c for c in g if c in w)]
            worst = min(worst, lenard_pairing(F, window, k, GRID))
    report(11, worst >= -1e-9, f"Lenard positivity, 300 tests at t in (0, 0.5, 1): min pairing {worst:.4g} >= -1e-9")
