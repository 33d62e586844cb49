import itertools

import numpy as np
import pytest

from gammadyn import rates
from gammadyn.gamma import TruncatedGammaFunction, k_transform, vec_pairing
from gammadyn.grid import ConfigSpace, GridGeometry
from gammadyn.hierarchy import (OperatorContext, apply_L_direct, apply_L_hat, apply_L_hat_star,
                                assemble_L_hat_star, operator_blocks)


def _models(grid):
    a = rates.Kernel.tophat(grid, 1.0, normalize=True)
    phi = rates.Kernel.tophat(grid, 1.0, 0.6)
    return {
        "surgailis": rates.surgailis(grid, 1.3, 0.4),
        "glauber": rates.glauber(grid, 0.3, phi, s=0.5),
        "bdlp": rates.bdlp(grid, 1.0, 0.1, a, 0.04, a),
        "bdlp_modified": rates.bdlp_modified(grid, 1.0, 0.2, a, 0.06, a, 0.3),
        "contact": rates.contact(grid, 1.0, 0.3, a, phi.scaled(-1.0)),
    }


GRID = GridGeometry(1, 7, 7.0)


@pytest.mark.parametrize("name", sorted(_models(GRID)))
def test_K_conjugacy(name):
    model = _models(GRID)[name]
    rng = np.random.default_rng(3)
    ctx = OperatorContext(model, GRID, 3)
    G = TruncatedGammaFunction.from_vector(ctx.space, rng.normal(size=ctx.space.size))
    LG = apply_L_hat(ctx, G)
    KG = lambda g: k_transform(G, g)
    for n in range(3):
        for gam in itertools.combinations(range(GRID.n_cells), n):
            assert k_transform(LG, gam) == pytest.approx(apply_L_direct(ctx, KG, gam), abs=1e-10)


@pytest.mark.parametrize("name", sorted(_models(GRID)))
def test_duality(name):
    model = _models(GRID)[name]
    rng = np.random.default_rng(4)
    ctx = OperatorContext(model, GRID, 3)
    h = GRID.cell_volume
    G, k = rng.normal(size=ctx.space.size), rng.normal(size=ctx.space.size)
    lhs = vec_pairing(ctx.space, ctx.L_hat_matrix @ G, k, h)
    rhs = vec_pairing(ctx.space, G, ctx.L_hat_star_matrix @ k, h)
    assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)


def test_surgailis_operators_against_hand_formula():
    grid = GridGeometry(1, 6, 3.0)
    m, z, h = 1.3, 0.4, grid.cell_volume
    ctx = OperatorContext(rates.surgailis(grid, m, z), grid, 3)
    sp_ = ctx.space
    rng = np.random.default_rng(5)
    k = TruncatedGammaFunction.from_vector(sp_, rng.normal(size=sp_.size))
    G = TruncatedGammaFunction.from_vector(sp_, rng.normal(size=sp_.size))
    Lk = apply_L_hat_star(ctx, k)
    LG = apply_L_hat(ctx, G)
    for i in range(sp_.size):
        eta = sp_.config(i)
        want = -m * len(eta) * k(eta) + z * sum(k(tuple(c for c in eta if c != x)) for x in eta)
        assert Lk(eta) == pytest.approx(want, abs=1e-13)
        up = 0.0
        if len(eta) < 3:
            up = z * h * sum(G(tuple(sorted(eta + (x,)))) for x in range(6) if x not in eta)
        assert LG(eta) == pytest.approx(-m * len(eta) * G(eta) + up, abs=1e-13)


def test_blocks_sum_to_operator():
    model = _models(GRID)["glauber"]
    ctx = OperatorContext(model, GRID, 3)
    rng = np.random.default_rng(6)
    f = TruncatedGammaFunction.from_vector(ctx.space, rng.normal(size=ctx.space.size))
    for dual in (False, True):
        total = sum(operator_blocks(ctx, w, f, dual).to_vector(ctx.space) for w in ("diag", "upper", "lower", "residual"))
        full = (ctx.L_hat_star_matrix if dual else ctx.L_hat_matrix) @ f.to_vector(ctx.space)
        assert np.allclose(total, full, atol=1e-13)
    # for independent births and deaths L̂ has no band below the diagonal
    free = OperatorContext(_models(GRID)["surgailis"], GRID, 3)
    assert np.all(operator_blocks(free, "lower", f).to_vector(ctx.space) == 0)
    assert np.all(operator_blocks(free, "residual", f).to_vector(ctx.space) == 0)
    with pytest.raises(ValueError):
        operator_blocks(ctx, "sideways", f)


def test_L_direct_precondition():
    ctx = OperatorContext(_models(GRID)["surgailis"], GRID, 2)
    with pytest.raises(ValueError, match="exceeds n_max"):
        apply_L_direct(ctx, lambda g: 1.0, (0, 1))


def test_context_validation():
    model = _models(GRID)["surgailis"]
    with pytest.raises(ValueError):
        OperatorContext(model, GridGeometry(1, 8, 7.0), 2)
    with pytest.raises(ValueError):
        OperatorContext(model, GRID, 0)
    ctx = OperatorContext(model, GRID, 2)
    with pytest.raises(ValueError, match="n_max mismatch"):
        apply_L_hat(ctx, TruncatedGammaFunction.indicator_empty(3))


def test_constants_are_annihilated_by_L_hat_star_with_birth_poisson():
    # Surgailis: k = (z/m)^{|η|} is stationary at every level
    grid = GridGeometry(1, 8, 4.0)
    ctx = OperatorContext(rates.surgailis(grid, 2.0, 0.5), grid, 3)
    k = 0.25 ** ctx.space.level_of.astype(float)
    assert np.max(np.abs(ctx.L_hat_star_matrix @ k)) < 1e-14


def test_balanced_closure_keeps_free_glauber_poisson_exact():
    grid = GridGeometry(1, 8, 4.0)
    z = 0.3
    ctx = OperatorContext(rates.glauber(grid, z, rates.Kernel.zero(grid)), grid, 3)
    k = z ** ctx.space.level_of.astype(float)
    assert np.max(np.abs(ctx.L_hat_star_balanced @ k)) < 1e-14


def test_balanced_closure_fixes_top_level_defect():
    grid = GridGeometry(1, 16, 8.0)
    a = rates.Kernel.tophat(grid, 1.0, normalize=True)
    z = 0.5
    # b = z d: Poisson(z) is reversible
    d = rates.Linear(grid, a, scale=0.2, base=1.0)
    b = rates.Linear(grid, a, scale=0.2 * z, base=z)
    model = rates.BirthDeathModel(b, d)
    ctx = OperatorContext(model, grid, 3)
    k = z ** ctx.space.level_of.astype(float)
    bal = ctx.L_hat_star_balanced @ k
    tr = ctx.L_hat_star_matrix @ k
    assert np.max(np.abs(bal)) < 1e-13
    top = ctx.space.level_slice(3)
    assert np.max(np.abs(tr[top])) > 1e-4
    assert np.max(np.abs(np.delete(tr, np.arange(ctx.space.size)[top]))) < 1e-13


def test_balanced_equals_transpose_without_birth_interaction():
    grid = GridGeometry(1, 6, 3.0)
    ctx = OperatorContext(rates.surgailis(grid, 1.0, 0.5), grid, 2)
    diff = ctx.L_hat_star_balanced - ctx.L_hat_star_matrix
    assert abs(diff).max() == 0
    no_empty = assemble_L_hat_star(ctx, include_empty_death=False)
    assert no_empty.shape == diff.shape
