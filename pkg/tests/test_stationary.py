import numpy as np
import pytest

from gammadyn import rates
from gammadyn.bounds import beta_tau
from gammadyn.gamma import TruncatedGammaFunction, vec_norm_KC
from gammadyn.grid import GridGeometry
from gammadyn.hierarchy import OperatorContext
from gammadyn.stationary import ConvergenceError, KSContext, gibbs_correlation, ks_apply, solve_stationary

GRID = GridGeometry(1, 16, 8.0)


def _a(grid=GRID, exclude=False):
    return rates.Kernel.tophat(grid, 1.0, normalize=True, exclude_origin=exclude)


def test_ks_apply_zero():
    ks = KSContext(rates.surgailis(GRID, 1.0, 0.5))
    out = ks_apply(ks, TruncatedGammaFunction(3))
    assert not np.any(out.to_vector(ks.space))


def test_ks_apply_free_glauber_formula():
    grid = GridGeometry(1, 8, 4.0)
    z, m = 0.3, 1.7
    model = rates.glauber(grid, z, rates.Kernel.zero(grid), s=0.0, m=m)
    ks = KSContext(model)
    rng = np.random.default_rng(0)
    k = TruncatedGammaFunction.from_vector(ks.space, rng.normal(size=ks.space.size))
    Sk = ks_apply(ks, k)
    assert Sk(()) == 0.0
    for i in range(1, ks.space.size):
        eta = ks.space.config(i)
        want = z / (m * len(eta)) * sum(k(tuple(c for c in eta if c != x)) for x in eta)
        assert Sk(eta) == pytest.approx(want, abs=1e-14)


@pytest.mark.parametrize("which", ["bdlp", "glauber"])
def test_ks_norm_bound(which):
    if which == "bdlp":
        model = rates.bdlp(GRID, 1.0, 0.1, _a(exclude=True), 0.04, _a(exclude=True))
    else:
        model = rates.glauber(GRID, 0.2, rates.Kernel.tophat(GRID, 0.5, 1.0))
    ks = KSContext(model)
    assert ks.norm_bound < 1
    rng = np.random.default_rng(1)
    scale = 2.0 ** ks.space.level_of.astype(float)
    for _ in range(50):
        v = rng.uniform(-1, 1, ks.space.size) * scale
        k = TruncatedGammaFunction.from_vector(ks.space, v)
        lhs = vec_norm_KC(ks.space, ks_apply(ks, k).to_vector(ks.space), 2.0)
        assert lhs <= ks.norm_bound * vec_norm_KC(ks.space, v, 2.0) * (1 + 1e-12)


def test_pure_bdlp_has_trivial_stationary_state():
    model = rates.bdlp(GRID, 1.0, 0.1, _a(exclude=True), 0.04, _a(exclude=True))
    res = solve_stationary(KSContext(model))
    v = res.k.to_vector(KSContext(model).space)
    assert v[0] == 1.0 and not np.any(v[1:])


def test_modified_bdlp_detailed_balance_gives_poisson():
    z = 0.4
    d = rates.Linear(GRID, _a(), scale=0.2, base=1.0)
    b = rates.Linear(GRID, _a(), scale=0.2 * z, base=z)
    model = rates.BirthDeathModel(b, d, "bdlp_modified",
                                  dict(m=1.0, kappa_minus=0.2, a_minus=_a(), kappa_plus=0.2 * z, a_plus=_a(), kappa=z))
    ks = KSContext(model, tol=1e-12)
    res = solve_stationary(ks)
    want = z ** ks.space.level_of.astype(float)
    assert np.max(np.abs(res.k.to_vector(ks.space) - want)) < 1e-10
    assert max(res.factors) <= ks.norm_bound + 1e-6
    assert res.L_star_residual <= 10 * ks.tol


def test_free_glauber_gives_poisson():
    model = rates.glauber(GRID, 0.3, rates.Kernel.zero(GRID))
    ks = KSContext(model, tol=1e-12)
    res = solve_stationary(ks)
    assert np.max(np.abs(res.k.to_vector(ks.space) - 0.3 ** ks.space.level_of)) < 1e-11
    assert res.ruelle_const == pytest.approx(0.3, abs=1e-10)


def test_gibbs_level_one_second_order():
    # two points never share a cell, so the grid coefficient of z² omits the offset-0 term of β₋₁
    grid = GridGeometry(1, 16, 10.0)
    phi = rates.Kernel.tophat(grid, 0.7, 1.0)
    Cq = beta_tau(phi, -1.0) - grid.cell_volume * (1 - np.exp(-1.0))
    rem = []
    for z in (0.1, 0.05, 0.025):
        res = gibbs_correlation(z, phi, 2.0)
        k1 = res.k((3,))
        rem.append((k1 - z * (1 - z * Cq)) / z ** 3)
        assert res.k(()) == 1.0
        assert res.L_star_residual <= 1e-9
        assert res.k((3, 4)) <= res.ruelle_const ** 2 * (1 + 1e-12)
    # the remainder is O(z³): the rescaled values settle to a constant
    assert abs(rem[1] - rem[2]) < abs(rem[0] - rem[1])
    assert 0.5 < rem[2] < 1.0


def test_gibbs_free_case_is_poisson():
    res = gibbs_correlation(0.2, rates.Kernel.zero(GRID), 2.0)
    assert res.k((1, 5)) == pytest.approx(0.04, abs=1e-11)


def test_gibbs_precondition():
    phi = rates.Kernel.tophat(GRID, 1.0, 1.0)
    with pytest.raises(ValueError, match="gibbs"):
        gibbs_correlation(2.0, phi, 2.0)


def test_stationary_rejects_large_norm_bound():
    ks = KSContext(rates.surgailis(GRID, 1.0, 0.5), norm_bound=1.3)
    with pytest.raises(ValueError, match="statior-est"):
        solve_stationary(ks)


def test_zero_death_energy_names_configuration():
    grid = GridGeometry(1, 8, 4.0)
    model = rates.BirthDeathModel(rates.Constant(grid, 0.1), rates.Constant(grid, 0.0))
    with pytest.raises(ZeroDivisionError, match=r"eta = \(0,\)"):
        KSContext(model, norm_bound=0.5)


def test_nonconvergence_reports_residual():
    ks = KSContext(rates.glauber(GRID, 0.3, rates.Kernel.tophat(GRID, 0.5, 1.0)), max_iter=2, tol=1e-14)
    with pytest.raises(ConvergenceError, match="residual"):
        solve_stationary(ks)


def test_rows_shape():
    res = solve_stationary(KSContext(rates.surgailis(GRID, 1.0, 0.5)))
    rows = res.rows()
    assert len(rows) == res.iterations and rows[0][0] == 1 and rows[0][2] == 0.0


def test_tol_validation():
    with pytest.raises(ValueError):
        KSContext(rates.surgailis(GRID, 1.0, 0.5), tol=0.0)


def test_context_on_custom_truncation():
    model = rates.surgailis(GRID, 1.0, 0.5)
    ks = KSContext(model, OperatorContext(model, GRID, 2))
    res = solve_stationary(ks)
    assert res.k((0, 1)) == pytest.approx(0.25, abs=1e-10)
