"""Weak-* distance, minimizing movements and the EVI residual."""

from __future__ import annotations

import math

import numpy as np
import pytest

from transport_energy import (
    Density,
    FlowConfig,
    GridError,
    JkoConfig,
    ParameterError,
    RegParams,
    ScalarField,
    SourcePiece,
    build_dw_basis,
    build_grid,
    dw,
    dw_tail_bound,
    eval_energy,
    evi_residual,
    jko_step,
    make_source,
    moments,
    run_flow,
    run_jko,
)
from transport_energy.metric import JKO_COLUMNS, dw_squared

TENT = [SourcePiece((-1.0,), (0.0,), 1.0), SourcePiece((0.0,), (1.0,), -1.0)]


def small_problem():
    grid = build_grid(1, -1.25, 1.25, 11)
    return grid, make_source(grid, TENT)


def tent_density(grid):
    return Density.project(grid, np.maximum(1.0 - np.abs(grid.coords[0]), 0.0))


# ---------------------------------------------------------------------------
# Basis
# ---------------------------------------------------------------------------


def test_first_mode_is_constant_and_measures_mass():
    grid = build_grid(1, -1.5, 1.5, 61)
    basis = build_dw_basis(grid, 1)
    assert np.all(basis.functions == 1.0)
    assert dw(tent_density(grid), Density.zeros(grid), basis) == pytest.approx(1.0, rel=1e-12)


def test_cosine_modes_have_unit_sup_norm():
    grid = build_grid(1, 0.0, 2.0, 41)
    basis = build_dw_basis(grid, 3)
    x = grid.coords[0]
    assert np.allclose(basis.functions[1], np.cos(np.pi * x / 2.0), atol=1e-15)
    assert np.all(np.max(np.abs(basis.functions), axis=1) == 1.0)
    assert basis.weights.tolist() == [1.0, 0.5, 0.25]


def test_default_orders_and_2d_mode_ordering():
    square = build_grid(2, 0.0, 1.0, 9)
    assert build_dw_basis(build_grid(1, 0.0, 1.0, 9)).K == 64
    assert build_dw_basis(square).K == 128
    assert build_dw_basis(square, 4).frequencies == ((0, 0), (1, 0), (0, 1), (2, 0))


def test_invalid_order_and_grid_mismatch():
    grid = build_grid(1, 0.0, 1.0, 9)
    with pytest.raises(ParameterError):
        build_dw_basis(grid, 0)
    basis = build_dw_basis(grid, 4)
    with pytest.raises(GridError):
        moments(ScalarField.zeros(build_grid(1, 0.0, 1.0, 10)), basis)


# ---------------------------------------------------------------------------
# Metric properties
# ---------------------------------------------------------------------------


def test_metric_axioms():
    grid = build_grid(1, -1.0, 1.0, 31)
    basis = build_dw_basis(grid)
    rng = np.random.default_rng(0)
    for _ in range(20):
        a, b, c = (Density.project(grid, rng.uniform(0.0, 1.0, grid.shape)) for _ in range(3))
        assert dw(a, a, basis) == 0.0
        assert dw(a, b, basis) == dw(b, a, basis)
        assert dw(a, c, basis) <= dw(a, b, basis) + dw(b, c, basis) + 1e-15


def test_squared_distance_is_exactly_two_convex():
    grid = build_grid(2, -1.0, 1.0, 11)
    basis = build_dw_basis(grid)
    rng = np.random.default_rng(3)
    for _ in range(100):
        a, b, c = (ScalarField(grid, rng.standard_normal(grid.shape)) for _ in range(3))
        t = rng.uniform()
        mix = ScalarField(grid, (1.0 - t) * a.values + t * b.values)
        lhs = dw_squared(mix, c, basis)
        rhs = (1.0 - t) * dw_squared(a, c, basis) + t * dw_squared(b, c, basis) - t * (1.0 - t) * dw_squared(a, b, basis)
        assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs)), f"t={t:.3f}: {lhs} vs {rhs}"


def test_truncation_tail_bound():
    grid = build_grid(1, -1.0, 1.0, 41)
    rng = np.random.default_rng(9)
    mu = Density.project(grid, rng.uniform(0.0, 2.0, grid.shape))
    nu = Density.project(grid, rng.uniform(0.0, 1.0, grid.shape))
    coarse, fine = build_dw_basis(grid, 8), build_dw_basis(grid, 64)
    dropped = dw_squared(mu, nu, fine) - dw_squared(mu, nu, coarse)
    assert 0.0 <= dropped <= dw_tail_bound(mu, nu, coarse)


# ---------------------------------------------------------------------------
# Minimizing movements
# ---------------------------------------------------------------------------


def test_jko_rejects_bad_steps():
    grid, f = small_problem()
    basis = build_dw_basis(grid)
    with pytest.raises(ParameterError):
        jko_step(Density.constant(grid, 0.5), -1.0, RegParams(0.1, 1e-2, 2.0), f, basis)
    with pytest.raises(ParameterError):
        JkoConfig(tau_schedule=())
    with pytest.raises(ParameterError):
        JkoConfig(tau_schedule=(0.1, 0.0))


def test_jko_chain_respects_competitor_bound():
    grid, f = small_problem()
    params = RegParams(0.1, 1e-2, 2.0)
    basis = build_dw_basis(grid)
    config = JkoConfig(tau_schedule=(0.1,) * 50, inner_max_iter=200)
    result = run_jko(Density.constant(grid, 0.5), params, f, basis, config, tol=1e-12)

    assert list(result.trajectory.columns) == JKO_COLUMNS
    assert len(result.iterates) == 51
    tails = result.trajectory["dw_tail_bound"]
    assert tails.iloc[0] == 0.0
    assert np.all(np.isfinite(tails)) and np.all(tails.iloc[1:] > 0.0)
    assert result.times[-1] == pytest.approx(5.0)
    for k, step in enumerate(result.steps):
        previous = result.energies[k].total
        assert step.objective <= previous + 1e-12 * max(1.0, abs(previous)), f"step {k}"
        assert step.mu.values.min() >= 0.0
    totals = [e.total for e in result.energies]
    assert totals[-1] < totals[0]


def test_tiny_step_moves_by_at_most_root_energy_drop():
    grid, f = small_problem()
    params = RegParams(0.1, 1e-2, 2.0)
    mu0 = Density.constant(grid, 0.5)
    tau = 1e-6
    step = jko_step(mu0, tau, params, f, build_dw_basis(grid), JkoConfig(inner_max_iter=100), tol=1e-12)
    drop = eval_energy(mu0, params, f, tol=1e-12).total - step.energy.total
    assert drop >= -1e-12
    assert step.dw > 0.0
    assert step.dw <= math.sqrt(2.0 * tau * max(drop, 0.0)) + 1e-10


def test_chain_started_at_minimizer_stays_there():
    grid, f = small_problem()
    params = RegParams(0.1, 0.0, 2.0)
    flow = run_flow(Density.constant(grid, 0.5), params, f, FlowConfig(xi_tol=1e-10, dt_growth=2.0), tol=1e-12)
    assert flow.converged
    mu_star = flow.final.mu
    config = JkoConfig(tau_schedule=(0.1,) * 5, inner_tol=1e-8)
    result = run_jko(mu_star, params, f, build_dw_basis(grid), config, tol=1e-12)
    for iterate in result.iterates:
        assert np.max(np.abs(iterate.values - mu_star.values)) <= 1e-8


def test_evi_residual_against_first_iterate():
    grid, f = small_problem()
    params = RegParams(0.1, 1e-2, 2.0)
    basis = build_dw_basis(grid)
    config = JkoConfig(tau_schedule=(0.2,) * 5, inner_max_iter=200)
    result = run_jko(Density.constant(grid, 0.5), params, f, basis, config, tol=1e-12)
    report = evi_residual(result, result.iterates[1], basis)
    assert len(report.residuals) == 5
    assert report.residuals[0] <= 1e-12
    frame = report.to_frame()
    assert list(frame.columns) == ["step", "evi_residual", "violated"]
    assert frame["step"].tolist() == [1, 2, 3, 4, 5]


def test_tight_steps_satisfy_discrete_evi():
    grid, f = small_problem()
    params = RegParams(0.1, 1e-2, 2.0)
    basis = build_dw_basis(grid)
    config = JkoConfig(tau_schedule=(0.2,) * 8, inner_tol=1e-10, inner_max_iter=5000)
    result = run_jko(Density.constant(grid, 0.5), params, f, basis, config, tol=1e-12)
    report = evi_residual(result, tent_density(grid), basis, tol=1e-6)
    assert report.violation_fraction == 0.0
    # exact proximal steps also pay the squared distance they travelled
    for k, tau in enumerate(result.taus):
        travelled = 0.5 * dw_squared(result.iterates[k], result.iterates[k + 1], basis) / tau
        assert report.residuals[k] <= -travelled + 1e-6, f"step {k}"
