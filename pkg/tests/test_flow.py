"""Gradient flow: clamped Euler steps, descent, energy identity and contraction."""

from __future__ import annotations

import numpy as np
import pytest

from transport_energy import (
    Density,
    FlowConfig,
    FlowState,
    ParameterError,
    RegParams,
    SourcePiece,
    StiffStateError,
    build_grid,
    flow_step,
    make_source,
    paired_distance,
    run_flow,
)
from transport_energy.flow import TRAJECTORY_COLUMNS

TENT = [SourcePiece((-1.0,), (0.0,), 1.0), SourcePiece((0.0,), (1.0,), -1.0)]


def tent_problem(n_nodes=61):
    grid = build_grid(1, -1.5, 1.5, n_nodes)
    return grid, make_source(grid, TENT)


def assert_non_increasing(values, slack=1e-12):
    increases = np.diff(np.asarray(values))
    assert np.all(increases <= slack * np.maximum(1.0, np.abs(values[:-1]))), f"max increase {increases.max():.3e}"


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@pytest.mark.parametrize(
    "kwargs",
    [
        {"dt0": 0.0},
        {"xi_tol": -1.0},
        {"dt_control": "adaptive"},
        {"dynamics": "wasserstein"},
        {"sigma": 1.0},
        {"dt_growth": 0.5},
        {"record_every": 0},
        {"max_steps": 0},
    ],
)
def test_invalid_flow_config(kwargs):
    with pytest.raises(ParameterError):
        FlowConfig(**kwargs)


# ---------------------------------------------------------------------------
# Zero source
# ---------------------------------------------------------------------------


def test_zero_source_step_lowers_density_uniformly():
    grid = build_grid(1, -1.0, 1.0, 11)
    f = make_source(grid, [])
    params = RegParams(0.1, 0.0, 2.0)
    state = FlowState.initial(Density.constant(grid, 0.5), params, f)
    assert state.xi_norm > 0.0
    nxt = flow_step(state, 0.1, params, f, FlowConfig(dt_control="fixed"))
    assert nxt.t == pytest.approx(0.1)
    assert np.allclose(nxt.mu.values[1:-1], 0.4, atol=1e-15)
    assert nxt.energy.total < state.energy.total


def test_zero_source_flow_reaches_zero_density():
    grid = build_grid(1, -1.0, 1.0, 11)
    f = make_source(grid, [])
    result = run_flow(Density.constant(grid, 0.5), RegParams(0.1, 0.0, 2.0), f)
    assert result.converged
    assert result.steps <= 7, f"took {result.steps} steps"
    assert np.all(result.final.mu.values == 0.0)
    assert result.final.energy.total == 0.0


# ---------------------------------------------------------------------------
# Tent source
# ---------------------------------------------------------------------------


def test_backtracking_flow_decreases_energy_and_stays_in_cone():
    grid, f = tent_problem()
    params = RegParams(0.1, 1e-3, 2.0)
    config = FlowConfig(t_max=2.0, snapshot_every=5)
    result = run_flow(Density.constant(grid, 0.5), params, f, config)

    trajectory = result.trajectory
    assert list(trajectory.columns) == TRAJECTORY_COLUMNS
    assert trajectory["t"].iloc[-1] == pytest.approx(2.0)
    assert_non_increasing(trajectory["E_total"].to_numpy())
    assert result.snapshots, "snapshot_every=5 should keep some densities"
    for mu in result.snapshots.values():
        assert mu.values.min() >= 0.0
        assert np.all(mu.values[grid.boundary_mask] == 0.0)
    assert trajectory["xi_norm"].iloc[-1] < trajectory["xi_norm"].iloc[0]


def test_record_every_thins_trajectory_but_keeps_last_state():
    grid, f = tent_problem(31)
    params = RegParams(0.1, 1e-3, 2.0)
    result = run_flow(Density.constant(grid, 0.5), params, f, FlowConfig(max_steps=7, record_every=3))
    assert result.steps == 7
    # initial row, steps 3 and 6, then the final state
    assert len(result.trajectory) == 4
    assert result.trajectory["t"].iloc[-1] == result.final.t


def test_energy_identity_defect_is_first_order():
    grid, f = tent_problem()
    params = RegParams(0.1, 1e-3, 2.0)
    mu0 = Density.constant(grid, 0.5)
    defects = []
    for dt in (0.01, 0.005, 0.0025):
        config = FlowConfig(dt0=dt, dt_control="fixed", t_max=0.2, xi_tol=1e-12)
        result = run_flow(mu0, params, f, config, tol=1e-12)
        assert result.final.t == pytest.approx(0.2)
        defects.append(result.energy_identity_defect)
    assert all(d > 0.0 for d in defects), defects
    ratios = [b / a for a, b in zip(defects, defects[1:])]
    assert all(0.4 <= r <= 0.6 for r in ratios), f"defects {defects}, ratios {ratios}"


def test_fixed_step_trajectories_contract():
    grid, f = tent_problem()
    params = RegParams(0.1, 1e-3, 2.0)
    rng = np.random.default_rng(12)
    mu0 = Density.constant(grid, 0.5)
    nu0 = Density.project(grid, rng.uniform(0.3, 0.8, grid.shape))
    dt = 0.01
    profile = paired_distance(mu0, nu0, params, f, dt=dt, n_steps=50, tol=1e-12)
    distance = profile["distance"].to_numpy()
    assert len(profile) == 51
    slack = 0.05 * dt * distance[0]
    assert np.all(np.diff(distance) <= slack), f"max increase {np.diff(distance).max():.3e}"
    assert distance[-1] < distance[0]


def test_limit_does_not_depend_on_initial_density():
    grid, f = tent_problem(21)
    params = RegParams(0.1, 1e-2, 2.0)
    config = FlowConfig(xi_tol=1e-8, t_max=200.0, dt_growth=2.0)
    rng = np.random.default_rng(5)
    starts = [Density.constant(grid, 0.5), Density.project(grid, rng.uniform(0.2, 1.0, grid.shape))]
    finals = []
    for mu0 in starts:
        result = run_flow(mu0, params, f, config, tol=1e-12)
        assert result.converged, f"stopped at t={result.final.t} with |xi|={result.final.xi_norm:.3e}"
        finals.append(result.final.mu.values)
    assert np.max(np.abs(finals[0] - finals[1])) <= 1e-5


def test_conductivity_dynamics_decrease_energy():
    grid, f = tent_problem()
    params = RegParams(0.1, 0.0, 2.0)
    result = run_flow(Density.constant(grid, 0.5), params, f, FlowConfig(dynamics="dmk", max_steps=30))
    assert result.steps == 30
    energies = result.trajectory["E_total"].to_numpy()
    assert_non_increasing(energies)
    assert energies[-1] < energies[0]


def test_huge_step_raises_stiff_state():
    grid, f = tent_problem()
    params = RegParams(1e-3, 0.0, 2.0)
    state = FlowState.initial(Density.constant(grid, 0.5), params, f)
    config = FlowConfig(dt0=1000.0, dt_min=100.0)
    with pytest.raises(StiffStateError) as info:
        flow_step(state, 1000.0, params, f, config)
    assert info.value.dt < 100.0
    assert info.value.t == 0.0
