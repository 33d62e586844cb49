import math

import numpy as np
import pytest

from gammadyn import rates
from gammadyn.grid import GridGeometry
from gammadyn.particles import (AuditError, ContinuumKernel, PointConfiguration, RateOverflowError, SimConfig, _Replica,
                                estimate_correlations, jackknife, mecke_check, poisson_sample, replica_rng, simulate)
from gammadyn.stationary import gibbs_correlation


def _sem(x):
    x = np.asarray(x, dtype=float)
    return x.std(ddof=1) / math.sqrt(len(x))


def test_pure_death_expectation():
    L = 10.0
    init = PointConfiguration(np.linspace(0.05, 9.95, 40), L)
    cfg = SimConfig("surgailis", {"m": 1.0, "z": 0.0}, L=L, t_end=1.0, replicas=500, seed=11)
    counts = [len(s[-1]) for s in simulate(cfg, init).states]
    assert abs(np.mean(counts) - 40 * math.exp(-1.0)) <= 3 * _sem(counts)


def test_single_point_survival():
    init = PointConfiguration([[3.0]], 10.0)
    cfg = SimConfig("surgailis", {"m": 2.0, "z": 0.0}, t_end=0.5, replicas=500, seed=5)
    alive = [len(s[-1]) for s in simulate(cfg, init).states]
    assert abs(np.mean(alive) - math.exp(-1.0)) <= 3 * _sem(alive)


def test_surgailis_density_follows_ode():
    m, z, k0, L = 1.0, 0.5, 2.0, 10.0
    times = (0.25, 0.5, 1.0, 1.5, 2.0)
    cfg = SimConfig("surgailis", {"m": m, "z": z}, L=L, t_end=2.0, replicas=200, seed=20240601, record_times=times)
    res = simulate(cfg, ("poisson", k0))
    for t in times:
        dens = [len(p) / L for p in res.at(t)]
        exact = z / m + (k0 - z / m) * math.exp(-m * t)
        assert abs(np.mean(dens) - exact) <= 3 * _sem(dens)


def test_poisson_estimator():
    z, L = 0.5, 10.0
    grid = GridGeometry(1, 10, L)
    states = [poisson_sample(replica_rng(3, r), z, L) for r in range(2000)]
    est = estimate_correlations(states, grid, [0.0, 1.0, 2.0, 3.0])
    assert abs(est.density - z) <= 3 * est.density_se
    assert np.all(np.abs(est.k2 - z * z) <= 3 * est.k2_se)
    assert np.mean(np.abs(est.k1 - z) <= 3 * est.k1_se) > 0.8
    assert np.all(est.k1_se >= 0) and np.all(est.k2 >= 0)


def test_estimator_on_deterministic_point():
    grid = GridGeometry(1, 5, 10.0)
    states = [np.array([[4.5]]), np.array([[4.5]])]
    est = estimate_correlations(states, grid, [0.0, 1.0])
    want = np.zeros(5)
    want[2] = 1 / grid.cell_volume
    assert np.array_equal(est.k1, want)
    assert np.array_equal(est.k1_se, np.zeros(5))
    assert est.k2.tolist() == [0.0]
    with pytest.raises(ValueError):
        estimate_correlations(states[:1], grid, [0.0, 1.0])


def test_jackknife_mean_and_error():
    x = np.array([1.0, 2.0, 4.0, 7.0])
    mean, se = jackknife(x)
    assert mean == 3.5
    # for the sample mean the jackknife error equals s/√R
    assert se == pytest.approx(x.std(ddof=1) / 2, rel=1e-14)


@pytest.mark.parametrize("h", [
    lambda x, p: float(2.0 <= x[0] < 6.0),
    lambda x, p: float(x[0] < 5.0) * float(np.sum(np.minimum(np.abs(p[:, 0] - x[0]), 10 - np.abs(p[:, 0] - x[0])) <= 1.0)),
    lambda x, p: math.cos(x[0]) ** 2 * len(p),
])
def test_mecke_identity(h):
    res = mecke_check(0.7, h, R=1000, seed=9)
    assert res.ok, (res.lhs, res.rhs, res.stderr)


def test_mecke_empty_process():
    res = mecke_check(0.0, lambda x, p: 1.0, R=50)
    assert res.lhs == 0.0 and res.rhs == 0.0


def test_deterministic_across_threads_and_seeds():
    phi = ContinuumKernel("tophat", 0.5, 1.0)
    cfg = dict(model="glauber", params={"z": 0.5, "phi": phi}, t_end=2.0, replicas=8)
    a = simulate(SimConfig(**cfg, seed=42, threads=1))
    b = simulate(SimConfig(**cfg, seed=42, threads=4))
    for s, t in zip(a.states, b.states):
        assert np.array_equal(s[-1], t[-1])
    assert a.events == b.events
    c = simulate(SimConfig(**cfg, seed=43))
    d = simulate(SimConfig(**cfg, seed=1))
    e = simulate(SimConfig(**cfg, seed=2))
    assert any(not np.array_equal(s[-1], t[-1]) for s, t in zip(a.states, c.states))
    # seeds 1 and 2 must not share replica streams
    assert {tuple(np.round(s[-1].ravel(), 12)) for s in d.states}.isdisjoint(
        {tuple(np.round(s[-1].ravel(), 12)) for s in e.states if len(s[-1])})


def test_audit_catches_drift():
    a = ContinuumKernel("tophat", 1.0, normalize=True)
    cfg = SimConfig("bdlp", {"m": 1.0, "kappa_minus": 0.2, "a_minus": a, "kappa_plus": 0.5, "a_plus": a},
                    t_end=1.0, replicas=1, audit_every=1)
    rep = _Replica(cfg, replica_rng(0, 0), np.array([[1.0], [1.5], [7.0]]))
    rep.run((1.0,))
    rep.audit()
    if rep.n:
        rep.acc[0] += 0.1
        with pytest.raises(AuditError):
            rep.audit()


def test_contact_and_bdlp_runs_with_audits():
    a = ContinuumKernel("tophat", 1.0, normalize=True)
    phi = ContinuumKernel("tophat", 0.5, -0.5)
    for model, params in [
        ("contact", {"m": 1.0, "kappa": 0.9, "a": a, "phi": phi}),
        ("bdlp_modified", {"m": 1.0, "kappa_minus": 0.2, "a_minus": a, "kappa_plus": 0.06, "a_plus": a,
                           "kappa": 0.3}),
    ]:
        res = simulate(SimConfig(model, params, t_end=3.0, replicas=4, audit_every=5), ("poisson", 0.5))
        assert len(res.states) == 4 and all(e > 0 for e in res.events)


def test_config_validation():
    phi = ContinuumKernel("tophat", 0.5, 1.0)
    with pytest.raises(ValueError):
        SimConfig("ising", {})
    with pytest.raises(ValueError):
        SimConfig("glauber", {"z": 1.0, "phi": phi}, replicas=0)
    with pytest.raises(ValueError, match="L/2"):
        SimConfig("glauber", {"z": 1.0, "phi": ContinuumKernel("tophat", 6.0)}, L=10.0)
    with pytest.raises(ValueError, match="phi >= 0"):
        SimConfig("glauber", {"z": 1.0, "phi": ContinuumKernel("tophat", 0.5, -1.0)})
    with pytest.raises(ValueError, match="s <= 1"):
        SimConfig("glauber", {"z": 1.0, "phi": phi, "s": 2.0})
    with pytest.raises(ValueError, match="phi <= 0"):
        SimConfig("contact", {"m": 1.0, "kappa": 1.0, "a": phi, "phi": phi})
    with pytest.raises(ValueError):
        SimConfig("surgailis", {"m": 1.0, "z": 1.0}, seed=-1)


def test_envelope_violation_aborts():
    # s > 1 slips past validation only if set after construction
    phi = ContinuumKernel("tophat", 0.5, 1.0)
    cfg = SimConfig("glauber", {"z": 2.0, "phi": phi}, t_end=5.0, replicas=1)
    cfg.params["s"] = 3.0
    with pytest.raises(RateOverflowError):
        simulate(cfg, ("poisson", 2.0))


def test_point_configuration_validation():
    with pytest.raises(ValueError):
        PointConfiguration([[10.0]], 10.0)
    with pytest.raises(ValueError):
        PointConfiguration([[1.0], [1.0]], 10.0)
    assert len(PointConfiguration(np.zeros((0, 2)), 5.0, 2)) == 0


@pytest.mark.parametrize("dim", [1, 2])
def test_kernel_sampler_uniform_in_ball(dim):
    k = ContinuumKernel("tophat", 0.8, dim=dim, normalize=True)
    rng = np.random.default_rng(0)
    xs = np.array([k.sample(rng) for _ in range(20000)])
    r = np.sqrt((xs ** 2).sum(axis=1))
    assert r.max() <= 0.8
    # mean radius of a uniform ball: r/2 in 1-d, 2r/3 in 2-d
    want = 0.4 if dim == 1 else 0.8 * 2 / 3
    assert abs(r.mean() - want) < 0.01
    assert k.value * k.ball_volume == pytest.approx(1.0)
    with pytest.raises(ValueError):
        ContinuumKernel("zero").sample(rng)


def test_detailed_balance_holds_density():
    # b = z d: κ = z m, κ⁺ = z κ⁻, a⁺ = a⁻  leaves Poisson(z) invariant
    z = 0.4
    a = ContinuumKernel("tophat", 1.0, normalize=True)
    params = {"m": 1.0, "kappa_minus": 0.5, "a_minus": a, "kappa_plus": 0.5 * z, "a_plus": a, "kappa": z}
    times = (1.0, 3.0, 5.0)
    res = simulate(SimConfig("bdlp_modified", params, t_end=5.0, replicas=300, seed=7, record_times=times),
                   ("poisson", z))
    for t in times:
        dens = [len(p) / 10.0 for p in res.at(t)]
        assert abs(np.mean(dens) - z) <= 3 * _sem(dens)


def test_glauber_relaxes_to_gibbs_density():
    z, L = 0.3, 10.0
    phi = ContinuumKernel("tophat", 0.5, 1.0)
    res = simulate(SimConfig("glauber", {"z": z, "phi": phi}, L=L, t_end=6.0, replicas=400, seed=3))
    dens = [len(s[-1]) / L for s in res.states]
    grid = GridGeometry(1, 64, L)
    k1 = gibbs_correlation(z, rates.Kernel.tophat(grid, 0.5, 1.0), 2.0, n_max=3).k((0,))
    # sampling error plus the O(h) grid error of the Gibbs reference
    assert abs(np.mean(dens) - k1) <= 3 * _sem(dens) + z * z * grid.cell_volume
    assert np.mean(dens) < z
