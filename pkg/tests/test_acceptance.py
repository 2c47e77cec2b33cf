"""Desk-scale runs of the 1D tent problem. Run with ``pytest -m slow``."""

from __future__ import annotations

import numpy as np
import pytest

from transport_energy import (
    Density,
    FlowConfig,
    RegParams,
    SourcePiece,
    build_grid,
    make_source,
    mass_balance,
    oracle_1d,
    regularized_residuals,
    run_flow,
)

pytestmark = pytest.mark.slow

PARAMS = RegParams(1e-3, 1e-6, 2.0)
# h, lambda and delta each ten times larger
COARSE_NODES, COARSE_PARAMS = 31, RegParams(1e-2, 1e-5, 2.0)
SOLVER_TOL = 1e-10


def run_tent(n_nodes, params):
    grid = build_grid(1, -1.5, 1.5, n_nodes)
    f = make_source(grid, [SourcePiece((-1.0,), (0.0,), 1.0), SourcePiece((0.0,), (1.0,), -1.0)])
    config = FlowConfig(xi_tol=1e-6, t_max=200.0, dt_growth=2.0, record_every=50)
    result = run_flow(Density.constant(grid, 0.5), params, f, config, tol=SOLVER_TOL)
    return grid, f, result


@pytest.fixture(scope="module")
def tent_run():
    return run_tent(301, PARAMS)


@pytest.fixture(scope="module")
def coarse_run():
    return run_tent(COARSE_NODES, COARSE_PARAMS)


def test_flow_reproduces_closed_form(tent_run):
    grid, f, result = tent_run
    assert result.converged, f"|xi|={result.final.xi_norm:.3e} at t={result.final.t}"
    error = np.max(np.abs(result.final.mu.values - oracle_1d(f).values))
    # conductivity floor plus the O(h) flux error next to the jumps of f
    assert error <= 2.0 * PARAMS.lam + grid.h[0], f"L-inf error {error:.3e}"


def test_converged_state_satisfies_optimality_system(tent_run):
    _, f, result = tent_run
    report = regularized_residuals(result.final.mu, result.final.u, PARAMS, f)
    assert report.stationarity <= 1e-4
    assert report.eikonal_excess <= 1e-4
    assert report.pde_residual <= 1e-8


def test_converged_state_balances_mass_and_transport(tent_run):
    _, f, result = tent_run
    balance = mass_balance(result.final.mu, PARAMS, f, tol=SOLVER_TOL)
    assert balance.gap <= 0.05, f"|L - M| / M = {balance.gap:.3e}"
    assert balance.t_opt == pytest.approx(1.0, abs=0.05)


def test_error_shrinks_under_joint_refinement(tent_run, coarse_run):
    _, coarse_f, coarse = coarse_run
    _, f, fine = tent_run
    assert coarse.converged and fine.converged
    coarse_error = np.max(np.abs(coarse.final.mu.values - oracle_1d(coarse_f).values))
    fine_error = np.max(np.abs(fine.final.mu.values - oracle_1d(f).values))
    assert fine_error < 0.5 * coarse_error, f"{coarse_error:.3e} -> {fine_error:.3e}"


def test_mass_energy_gap_shrinks_under_refinement(tent_run, coarse_run):
    _, coarse_f, coarse = coarse_run
    _, f, fine = tent_run
    coarse_gap = mass_balance(coarse.final.mu, COARSE_PARAMS, coarse_f, tol=SOLVER_TOL).gap
    fine_gap = mass_balance(fine.final.mu, PARAMS, f, tol=SOLVER_TOL).gap
    assert fine_gap < coarse_gap, f"{coarse_gap:.3e} -> {fine_gap:.3e}"
