"""Energy evaluation, exact discrete gradient, subgradient selection and caching."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from transport_energy import (
    Density,
    DensityError,
    RegParams,
    ScalarField,
    SolveCache,
    SourcePiece,
    build_grid,
    eval_energy,
    evaluate,
    grad_E,
    make_source,
    mass_balance,
    minimal_subgradient,
    p_laplacian,
)
from transport_energy.energy import gradient_p_norm

TENT = [SourcePiece((-1.0,), (0.0,), 1.0), SourcePiece((0.0,), (1.0,), -1.0)]


def tent_problem(n_nodes=61, lo=-1.5, hi=1.5):
    grid = build_grid(1, lo, hi, n_nodes)
    return grid, make_source(grid, TENT)


def random_density(grid, rng, low=0.0, high=1.0):
    return Density.project(grid, rng.uniform(low, high, grid.shape))


# ---------------------------------------------------------------------------
# Densities
# ---------------------------------------------------------------------------


def test_density_rejects_negative_values_and_boundary_trace():
    grid = build_grid(1, 0.0, 1.0, 6)
    with pytest.raises(DensityError):
        Density(grid, [0.0, 0.1, -0.1, 0.2, 0.1, 0.0])
    with pytest.raises(DensityError):
        Density(grid, [0.1, 0.1, 0.1, 0.1, 0.1, 0.0])
    projected = Density.project(grid, [0.3, -0.1, 0.2, 0.4, 0.1, 0.5])
    assert projected.values.tolist() == [0.0, 0.0, 0.2, 0.4, 0.1, 0.0]


def test_support_threshold_defaults_to_relative():
    grid = build_grid(1, 0.0, 1.0, 6)
    mu = Density(grid, [0.0, 1e-12, 0.5, 1.0, 0.0, 0.0])
    assert mu.support_mask.tolist() == [False, False, True, True, False, False]
    assert Density(grid, mu.values, eps_supp=1e-13).support_mask[1]


# ---------------------------------------------------------------------------
# Energy values
# ---------------------------------------------------------------------------


def test_zero_source_energy_is_mass_plus_penalty():
    grid = build_grid(1, -1.0, 1.0, 21)
    mu = Density.constant(grid, 0.5)
    params = RegParams(0.1, 1e-2, 2.0)
    energy = eval_energy(mu, params, make_source(grid, []))
    assert energy.L == 0.0
    assert energy.M == pytest.approx(0.5 * 2.0 - 0.5 * 0.1, rel=1e-12)
    assert energy.total == pytest.approx(energy.M + energy.sobolev, rel=1e-14)
    # the jumps to zero at the boundary are the only gradient
    assert energy.sobolev == pytest.approx(1e-2 * 2 * 0.1 * (0.5 / 0.1) ** 2, rel=1e-12)


def test_energy_is_one_homogeneous_in_transport_term():
    grid, f = tent_problem()
    params = RegParams(1e-8, 0.0, 2.0)
    mu = Density.constant(grid, 0.5)
    L = eval_energy(mu, params, f, tol=1e-12).L
    for t in (0.5, 2.0, 4.0):
        scaled = eval_energy(Density(grid, t * mu.values), params, f, tol=1e-12).L
        assert scaled * t == pytest.approx(L, rel=1e-6), f"t={t}: {scaled * t} vs {L}"


def test_energy_is_convex_along_segments():
    grid, f = tent_problem(31)
    params = RegParams(1e-2, 1e-3, 2.0)
    rng = np.random.default_rng(1)
    for _ in range(10):
        a, b = random_density(grid, rng), random_density(grid, rng)
        mid = Density(grid, 0.5 * (a.values + b.values))
        e_mid = eval_energy(mid, params, f).total
        bound = 0.5 * (eval_energy(a, params, f).total + eval_energy(b, params, f).total)
        assert e_mid <= bound + 1e-12, f"{e_mid} > {bound}"


def test_energy_increases_with_delta():
    grid, f = tent_problem(31)
    mu = random_density(grid, np.random.default_rng(4))
    energies = [eval_energy(mu, RegParams(1e-2, d, 2.0), f).total for d in (0.0, 1e-4, 1e-2)]
    assert energies == sorted(energies), energies


# ---------------------------------------------------------------------------
# Gradient and subgradient
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("p", [2.0, 3.0])
def test_gradient_matches_central_differences(p):
    grid, f = tent_problem(11, -1.25, 1.25)
    params = RegParams(0.1, 1e-2, p)
    rng = np.random.default_rng(20)
    w = grid.node_weights
    eps = 1e-4
    for _ in range(20):
        mu = random_density(grid, rng, 0.2, 1.0)
        direction = np.where(grid.interior_mask, rng.standard_normal(grid.shape), 0.0)
        analytic = float(np.sum(w * grad_E(mu, params, f, tol=1e-13).values * direction))
        plus = eval_energy(Density(grid, mu.values + eps * direction), params, f, tol=1e-13).total
        minus = eval_energy(Density(grid, mu.values - eps * direction), params, f, tol=1e-13).total
        numeric = (plus - minus) / (2.0 * eps)
        assert abs(analytic - numeric) <= 1e-5 * max(abs(numeric), 1.0), f"{analytic} vs {numeric}"


def test_gradient_vanishes_on_boundary_and_is_one_without_source():
    grid = build_grid(1, -1.0, 1.0, 21)
    mu = Density.constant(grid, 0.5)
    g = grad_E(mu, RegParams(0.1, 0.0, 2.0), make_source(grid, [])).values
    assert g[0] == 0.0 and g[-1] == 0.0
    assert np.allclose(g[1:-1], 1.0)


def test_subgradient_off_support_is_negative_eikonal_excess():
    grid, f = tent_problem(31)
    evaluation = evaluate(Density.zeros(grid), RegParams(0.1, 1e-2, 2.0), f)
    xi = evaluation.subgradient.values
    expected = np.where(grid.interior_mask, np.minimum(1.0 - evaluation.grad_u_sq.values, 0.0), 0.0)
    assert np.allclose(xi, expected, atol=1e-14)
    assert xi.min() < -1.0, "the zero density is far from optimal for a non-zero source"
    assert np.all(minimal_subgradient(Density.zeros(grid), RegParams(0.1, 1e-2, 2.0), f).values <= 0.0)


def test_subgradient_on_support_equals_gradient():
    grid, f = tent_problem(31)
    mu = random_density(grid, np.random.default_rng(8), 0.1, 1.0)
    evaluation = evaluate(mu, RegParams(0.05, 1e-3, 2.0), f)
    assert np.array_equal(evaluation.subgradient.values, evaluation.gradient.values)
    assert evaluation.xi_norm > 0.0


def test_gradient_p_norm_of_constant_interior():
    grid = build_grid(1, 0.0, 1.0, 11)
    # only the two boundary edges carry a slope of 0.5 / 0.1
    assert gradient_p_norm(Density.constant(grid, 0.5), 2.0) == pytest.approx(np.sqrt(2 * 0.1 * 25.0))


def test_p_laplacian_of_parabola():
    grid = build_grid(1, -1.0, 1.0, 41)
    x = grid.coords[0]
    parabola = ScalarField(grid, 1.0 - x**2)
    interior = grid.interior_mask

    quadratic = p_laplacian(parabola, 2.0).values
    assert np.max(np.abs(quadratic[interior] + 2.0)) <= 1e-9
    assert np.all(quadratic[grid.boundary_mask] == 0.0)

    # the flux -4 x|x| is quadratic on each side of the kink at x = 0
    cubic = p_laplacian(parabola, 3.0).values
    error = np.abs(cubic - (-8.0 * np.abs(x)))
    assert np.max(error[interior]) <= 2.0 * grid.h[0] + 1e-9
    away = interior & (np.abs(x) > 1.5 * grid.h[0])
    assert np.max(error[away]) <= 1e-9


def test_p_laplacian_vanishes_on_linear_pieces():
    grid = build_grid(1, -1.5, 1.5, 31)
    x = grid.coords[0]
    tent = ScalarField(grid, np.maximum(1.0 - np.abs(x), 0.0))
    # kinks at -1, 0 and 1
    flat = grid.interior_mask & (np.min(np.abs(x[:, None] - np.array([-1.0, 0.0, 1.0])), axis=1) > 1.5 * grid.h[0])
    for p in (2.0, 3.0, 4.5):
        assert np.max(np.abs(p_laplacian(tent, p).values[flat])) <= 1e-9


# ---------------------------------------------------------------------------
# Mass balance and caching
# ---------------------------------------------------------------------------


def test_mass_balance_of_closed_form_density():
    grid, f = tent_problem(301)
    x = grid.coords[0]
    tent = Density.project(grid, np.maximum(1.0 - np.abs(x), 0.0))
    assert tent.mass == pytest.approx(1.0, abs=1e-12)
    balance = mass_balance(tent, RegParams(1e-2, 0.0, 2.0), f)
    assert 0.0 < balance.gap < 0.05, f"gap {balance.gap}"
    assert balance.L < balance.M
    assert balance.t_opt == pytest.approx(np.sqrt(balance.L / balance.M))
    assert balance.rescaled_energy <= balance.L + balance.M


def test_solve_cache_hits_and_eviction():
    grid, f = tent_problem(31)
    params = RegParams(0.1, 0.0, 2.0)
    cache = SolveCache(maxsize=2)
    mu = Density.constant(grid, 0.5)
    first = evaluate(mu, params, f, cache=cache)
    second = evaluate(Density(grid, mu.values.copy()), params, f, cache=cache)
    assert cache.hits == 1 and cache.misses == 1
    assert second.potential is first.potential
    for value in (0.2, 0.3, 0.4):
        evaluate(Density.constant(grid, value), params, f, cache=cache)
    assert len(cache) == 2


def test_solve_cache_concurrent_readers():
    grid, f = tent_problem(31)
    params = RegParams(0.1, 0.0, 2.0)
    cache = SolveCache()
    mu = Density.constant(grid, 0.5)
    with ThreadPoolExecutor(max_workers=4) as pool:
        energies = list(pool.map(lambda _: eval_energy(mu, params, f, cache=cache).total, range(8)))
    assert len(set(energies)) == 1, energies
    assert len(cache) == 1
    assert cache.hits + cache.misses == 8
