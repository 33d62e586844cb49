"""Invariant checks run by ``gammadyn validate``.

Each check returns a row (name, PASS/FAIL/SKIP/flag value, detail).  The
model-free checks (round trip, Minlos) run on a coarse grid.
"""
from __future__ import annotations

import itertools

import numpy as np

from .bounds import compute_bounds, describe_failure
from .gamma import (TruncatedGammaFunction, k_inverse, k_transform, minlos_check, vec_pairing)
from .grid import ConfigSpace, GridGeometry
from .hierarchy import OperatorContext, apply_L_direct, apply_L_hat


def _row(name, ok, detail):
    return (name, "PASS" if ok else "FAIL", detail)


def _small_grid(grid: GridGeometry) -> GridGeometry:
    M = 8 if grid.dim == 1 else 4
    return GridGeometry(grid.dim, min(M, grid.cells_per_side), grid.side_length)


def check_roundtrip(space, rng, trials=20):
    worst = 0.0
    for _ in range(trials):
        G = TruncatedGammaFunction.from_vector(space, rng.normal(size=space.size))
        KG = lambda g: k_transform(G, g)
        for i in range(space.size):
            key = space.config(i)
            worst = max(worst, abs(k_inverse(KG, key) - G(key)))
    return worst


def check_minlos(grid, rng, n_max=2, trials=3):
    worst = 0.0
    N = grid.n_cells
    for _ in range(trials):
        a = rng.normal(size=(N, N))
        b = rng.normal(size=N)
        # H(ξ, η, ξ∪η) built from pair sums; it vanishes once |ξ∪η| > n_max
        H = lambda xi, eta, un: (b[list(xi)].sum() + a[np.ix_(list(xi), list(eta))].sum()) if len(un) <= n_max else 0.0
        lhs, rhs = minlos_check(H, n_max, grid)
        worst = max(worst, abs(lhs - rhs) / max(1.0, abs(lhs)))
    return worst


def check_kinv(model, rng, trials=40):
    N = model.grid.n_cells
    worst = 0.0
    for spec in (model.birth, model.death):
        for _ in range(trials):
            cells = rng.permutation(N)[: 1 + 2 + 2]
            x = int(cells[0])
            nxi, neta = rng.integers(0, 3, size=2)
            xi = tuple(sorted(int(c) for c in cells[1:1 + nxi]))
            eta = tuple(sorted(int(c) for c in cells[3:3 + neta]))
            brute = k_inverse(lambda sub: spec.eval_rate(x, tuple(sorted(xi + tuple(sub)))), eta)
            fast = spec.k_inverse_rate(x, xi, eta)
            worst = max(worst, abs(fast - brute) / max(1.0, abs(brute)))
    return worst


def check_conjugacy(model, rng, n_max=3):
    ctx = OperatorContext(model, model.grid, n_max)
    space = ctx.space
    G = TruncatedGammaFunction.from_vector(space, rng.normal(size=space.size))
    LG = apply_L_hat(ctx, G)
    KG = lambda g: k_transform(G, g)
    worst = 0.0
    for n in range(n_max):
        for gam in itertools.combinations(range(model.grid.n_cells), n):
            worst = max(worst, abs(k_transform(LG, gam) - apply_L_direct(ctx, KG, gam)))
    Gv = rng.normal(size=space.size)
    kv = rng.normal(size=space.size)
    h = model.grid.cell_volume
    dual = abs(vec_pairing(space, ctx.L_hat_matrix @ Gv, kv, h) - vec_pairing(space, Gv, ctx.L_hat_star_matrix @ kv, h))
    return worst, dual


def run_validation(cfg, spec, grid, model, seed=0) -> list:
    rng = np.random.default_rng(seed)
    rows = []
    C = cfg.evolution.C
    small = _small_grid(grid)
    rep = compute_bounds(model, C, grid, n_max=min(cfg.evolution.n_max, 3))
    for flag, val in rep.flags().items():
        rows.append((f"flag:{flag}", "true" if val else "false",
                     f"a1={rep.a1:.6g} a2={rep.a2:.6g}" if val else describe_failure(rep, flag)))

    space = ConfigSpace(small.n_cells, 3)
    err = check_roundtrip(space, rng, trials=5)
    rows.append(_row("k_roundtrip", err <= 1e-12, f"max err {err:.3g}"))
    err = check_minlos(GridGeometry(small.dim, min(6, small.cells_per_side), small.side_length), rng)
    rows.append(_row("minlos", err <= 1e-12, f"rel err {err:.3g}"))
    err = check_kinv(model, rng)
    rows.append(_row("kinv_closed_form", err <= 1e-10, f"rel err {err:.3g}"))
    conj, dual = check_conjugacy(model, rng)
    rows.append(_row("conjugacy", conj <= 1e-9, f"max dev {conj:.3g}"))
    rows.append(_row("duality", dual <= 1e-9, f"dev {dual:.3g}"))

    if spec.preset == "surgailis":
        from .evolution import EvolutionConfig, evolve_correlation, surgailis_solution
        ctx = OperatorContext(model, grid, 3)
        k0 = TruncatedGammaFunction.from_vector(ctx.space, 2.0 ** ctx.space.level_of.astype(float))
        res = evolve_correlation(ctx, k0, EvolutionConfig(C, 3, None, 1e-3, 0.01, 1.0, "rk4"), [1.0])
        exact = surgailis_solution(spec.m, spec.z, k0, 1.0, grid).to_vector(ctx.space)
        got = res.snapshots[-1].to_vector(ctx.space)
        rel = float(np.max(np.abs(got - exact) / np.abs(exact)))
        rows.append(_row("surgailis_closed_form", rel <= 1e-6, f"rel err {rel:.3g}"))

    if rep.stationary_ok:
        from .stationary import KSContext, solve_stationary
        try:
            ctx = OperatorContext(model, grid, min(cfg.evolution.n_max, 3))
            ks = KSContext(model, ctx, C, tol=1e-11)
            res = solve_stationary(ks)
            worst_f = max(res.factors) if res.factors else 0.0
            ok = res.L_star_residual <= 1e-9 and res.k(()) == 1.0 and worst_f <= ks.norm_bound + 1e-6
            rows.append(_row("stationary", ok, f"iters {res.iterations}, L*k {res.L_star_residual:.3g}, "
                                               f"factor {worst_f:.3g} <= {ks.norm_bound:.3g}"))
        except ZeroDivisionError as exc:
            rows.append(("stationary", "SKIP", str(exc)))
    else:
        rows.append(("stationary", "SKIP", describe_failure(rep, "statior-est")))

    if spec.preset == "glauber" and spec.s == 0 and spec.m == 1:
        from .evolution import GlauberParams, P_delta_matrix
        from .gamma import vec_norm_LC
        params = GlauberParams(spec.z, spec.phi.build(grid), C)
        if params.smallparam_ok:
            n_max = min(cfg.evolution.n_max, 3)
            space = ConfigSpace(grid.n_cells, n_max)
            P = P_delta_matrix(params, 0.1, n_max)
            Ps = P_delta_matrix(params, 0.1, n_max, dual=True)
            h = grid.cell_volume
            worst = 0.0
            for _ in range(10):
                G = rng.normal(size=space.size)
                worst = max(worst, vec_norm_LC(space, P @ G, C, h) / vec_norm_LC(space, G, C, h))
            rows.append(_row("chain_contraction", worst <= 1 + 1e-12, f"max ratio {worst:.6g}"))
            G, k = rng.normal(size=space.size), rng.normal(size=space.size)
            adj = abs(vec_pairing(space, P @ G, k, h) - vec_pairing(space, G, Ps @ k, h))
            rows.append(_row("chain_adjoint", adj <= 1e-9, f"dev {adj:.3g}"))
        else:
            rows.append(("chain_contraction", "SKIP", describe_failure(rep, "smallparam")))

    from .particles import mecke_check
    res = mecke_check(0.5, lambda x, p: float(x[0] < grid.side_length / 2), R=200, L=grid.side_length,
                      dim=grid.dim, seed=seed)
    rows.append(_row("mecke_poisson", res.ok, f"lhs {res.lhs:.4g} rhs {res.rhs:.4g} se {res.stderr:.3g}"))
    return rows
