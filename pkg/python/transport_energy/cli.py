"""Command-line experiment runner.

Usage::

    transport-energy run experiment.toml [--output-dir DIR] [--seed N]
                         [--mode-override MODE] [--log-level LEVEL]

Exit status: 0 on success, 1 for an invalid configuration, 2 for a numerical
failure (including a sweep in which at least one cell failed; the sweep table
is still written).
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import pandas as pd

from .config import MODES, ExperimentConfig, load_config
from .diagnostics import brute_force_minimize, compare_minimizers, oracle_1d, regularized_residuals
from .energy import Density, SolveCache
from .errors import ConfigError, GridError, SourceError, TransportEnergyError
from .export import append_residual_csv, write_field_csv, write_frame_csv
from .flow import run_flow
from .grid import Grid, SourceData, build_grid
from .metric import JkoConfig, build_dw_basis, dw, dw_tail_bound, evi_residual, run_jko

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERICAL = 2

SWEEP_COLUMNS = [
    "lambda",
    "delta",
    "status",
    "E_total",
    "L",
    "M",
    "sobolev",
    "xi_norm",
    "converged",
    "steps",
    "dw_to_oracle",
    "dw_tail_bound",
    "pde_residual",
    "eikonal_excess",
    "stationarity",
    "complementarity",
]


def _build_problem(config: ExperimentConfig) -> tuple[Grid, SourceData]:
    try:
        return config.build()
    except (GridError, SourceError) as exc:
        raise ConfigError(str(exc)) from exc


def _run_flow_mode(config: ExperimentConfig) -> int:
    grid, f = _build_problem(config)
    out = config.output_dir
    cache = SolveCache()
    mu0 = config.initial.build(grid, f, config.seed)
    result = run_flow(mu0, config.params, f, config.flow, tol=config.tol, cache=cache)

    write_frame_csv(result.trajectory, out / "trajectory.csv")
    write_field_csv(result.final.mu, out / "final_mu.csv")
    write_field_csv(result.final.u, out / "final_u.csv")
    for i, (_, snapshot) in enumerate(sorted(result.snapshots.items())):
        write_field_csv(snapshot, out / "snapshots" / f"mu_{i:04d}.csv")
    report = regularized_residuals(result.final.mu, result.final.u, config.params, f)
    append_residual_csv(report, out / "residuals.csv", mode="flow", t=result.final.t, converged=result.converged)
    logger.info("flow artifacts written to %s", out)
    return EXIT_OK


def _run_jko_mode(config: ExperimentConfig) -> int:
    grid, f = _build_problem(config)
    out = config.output_dir
    cache = SolveCache()
    basis = build_dw_basis(grid, config.basis_order)
    mu0 = config.initial.build(grid, f, config.seed)
    result = run_jko(mu0, config.params, f, basis, config.jko, tol=config.tol, cache=cache)

    write_frame_csv(result.trajectory, out / "jko_trajectory.csv")
    write_field_csv(result.final, out / "final_mu.csv")
    final = result.steps[-1].evaluation
    report = regularized_residuals(final.mu, final.potential, config.params, f)
    converged = all(step.converged for step in result.steps)
    append_residual_csv(report, out / "residuals.csv", mode="jko", t=result.times[-1], converged=converged)
    # EVI against the closed-form density in 1D, against the last iterate otherwise
    reference = oracle_1d(f) if grid.dim == 1 else result.final
    evi = evi_residual(result, reference, basis)
    write_frame_csv(evi.to_frame(), out / "evi.csv")
    logger.info("JKO artifacts written to %s (EVI violation fraction %.3f)", out, evi.violation_fraction)
    return EXIT_OK


def _sweep_chain(
    config: ExperimentConfig, grid: Grid, f: SourceData, lam: float, oracle: Density | None
) -> list[dict]:
    """Inner delta sweep at fixed lambda, each run warm-started from the previous minimizer."""
    basis = build_dw_basis(grid) if oracle is not None else None
    mu = config.initial.build(grid, f, config.seed)
    rows = []
    for delta in config.sweep.deltas:
        params = config.params.with_values(lam=lam, delta=delta)
        row: dict = {"lambda": lam, "delta": delta}
        try:
            result = run_flow(mu, params, f, config.flow, tol=config.tol)
        except TransportEnergyError:
            logger.exception("sweep cell lambda=%g delta=%g failed", lam, delta)
            row["status"] = "failed"
            rows.append(row)
            continue
        mu = result.final.mu
        energy = result.final.energy
        report = regularized_residuals(mu, result.final.u, params, f)
        row.update(
            status="ok",
            E_total=energy.total,
            L=energy.L,
            M=energy.M,
            sobolev=energy.sobolev,
            xi_norm=result.final.xi_norm,
            converged=result.converged,
            steps=result.steps,
            dw_to_oracle=dw(mu, oracle, basis) if oracle is not None else math.nan,
            dw_tail_bound=dw_tail_bound(mu, oracle, basis) if oracle is not None else math.nan,
            pde_residual=report.pde_residual,
            eikonal_excess=report.eikonal_excess,
            stationarity=report.stationarity,
            complementarity=report.complementarity,
        )
        rows.append(row)
        logger.info("sweep cell lambda=%g delta=%g: E=%.10g steps=%d", lam, delta, energy.total, result.steps)
    return rows


def _run_sweep_mode(config: ExperimentConfig) -> int:
    grid, f = _build_problem(config)
    oracle = oracle_1d(f) if grid.dim == 1 else None
    lambdas = config.sweep.lambdas
    with ThreadPoolExecutor(max_workers=config.sweep.workers) as pool:
        chains = list(pool.map(lambda lam: _sweep_chain(config, grid, f, lam, oracle), lambdas))
    table = pd.DataFrame([row for chain in chains for row in chain], columns=SWEEP_COLUMNS)
    write_frame_csv(table, config.output_dir / "sweep.csv")
    failed = int((table["status"] == "failed").sum())
    if failed:
        logger.error("%d of %d sweep cells failed", failed, len(table))
        return EXIT_NUMERICAL
    logger.info("sweep of %d cells written to %s", len(table), config.output_dir)
    return EXIT_OK


def _run_oracle_check_mode(config: ExperimentConfig) -> int:
    check = config.oracle_check
    grid, _ = _build_problem(config)
    try:
        tiny = build_grid(1, grid.lo, grid.hi, check.n_nodes)
        f = config.source.build(tiny)
    except (GridError, SourceError) as exc:
        raise ConfigError(f"oracle_check: {exc}") from exc
    params = config.params.with_values(lam=check.lam, delta=check.delta)
    tol = min(config.tol, 1e-12)
    out = config.output_dir
    mu0 = config.initial.build(tiny, f, config.seed)

    flow = run_flow(mu0, params, f, replace(config.flow, xi_tol=check.xi_tol), tol=tol)
    jko_config = JkoConfig((check.tau,) * check.jko_steps, inner_tol=check.xi_tol, inner_max_iter=2000)
    jko = run_jko(mu0, params, f, build_dw_basis(tiny), jko_config, tol=tol)
    brute = brute_force_minimize(
        params, f, n_starts=check.n_starts, max_starts=check.max_starts, seed=config.seed, tol=tol, workers=check.workers
    )
    minimizers = {"flow": flow.final.mu, "jko": jko.final, "brute_force": brute, "oracle": oracle_1d(f)}
    table = compare_minimizers(minimizers)
    solvers = ~((table["a"] == "oracle") | (table["b"] == "oracle"))
    table["within_tol"] = (table["linf"] <= check.agreement_tol) | ~solvers
    write_frame_csv(table, out / "oracle_check.csv")
    for name, mu in minimizers.items():
        write_field_csv(mu, out / f"{name}_mu.csv")

    worst = float(table.loc[solvers, "linf"].max())
    if worst > check.agreement_tol:
        logger.error("minimizers disagree: max L-inf distance %.3e > %.1e", worst, check.agreement_tol)
        return EXIT_NUMERICAL
    logger.info("flow, JKO and brute force agree within %.3e", worst)
    return EXIT_OK


_RUNNERS = {
    "flow": _run_flow_mode,
    "jko": _run_jko_mode,
    "sweep": _run_sweep_mode,
    "oracle-check": _run_oracle_check_mode,
}


def run_experiment(config: ExperimentConfig) -> int:
    """Run one configured experiment and return its exit status."""
    logger.info("running %s experiment, output in %s", config.mode, config.output_dir)
    try:
        return _RUNNERS[config.mode](config)
    except ConfigError as exc:
        logger.error("invalid configuration: %s", exc)
        return EXIT_CONFIG
    except TransportEnergyError as exc:
        logger.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="transport-energy",
        description="Compute optimal transport densities by minimizing the regularized transport energy.",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    run = subparsers.add_parser("run", help="run the experiment described by a TOML config")
    run.add_argument("config", type=Path, help="experiment config (TOML, schema_version = 1)")
    run.add_argument("--output-dir", type=Path, default=None, help="override output_dir")
    run.add_argument("--seed", type=int, default=None, help="override seed")
    run.add_argument("--mode-override", choices=MODES, default=None, help="override mode")
    run.add_argument(
        "--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="logging threshold"
    )
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        config = load_config(args.config).with_overrides(
            mode=args.mode_override, seed=args.seed, output_dir=args.output_dir
        )
    except ConfigError as exc:
        logger.error("invalid configuration: %s", exc)
        print(f"transport-energy: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return run_experiment(config)


if __name__ == "__main__":
    sys.exit(main())
