"""Optimality-system residuals, the one-dimensional oracle and a brute-force minimizer.

The unregularized optimality system for a transport density ``mu`` and its
potential ``u`` reads ``-div(mu grad u) = f``, ``|grad u| <= 1`` everywhere
and ``|grad u| = 1`` ``mu``-almost everywhere. The regularized system
replaces the conductivity by ``mu + lambda`` and the eikonal equality on the
support by ``1 - |grad u|^2 - delta p Δ_p mu = 0``.
"""

from __future__ import annotations

import itertools
import logging
from collections.abc import Mapping
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np
import pandas as pd
from scipy import integrate as spi
from scipy import optimize as spo

from .elliptic import DEFAULT_TOL, RegParams, flux_residual
from .energy import Density, evaluate, node_grad_sq, p_laplacian
from .errors import GridError, NonReproducibleOptimumError, ParameterError
from .grid import ScalarField, SourceData, check_same_grid

logger = logging.getLogger(__name__)

BRUTE_FORCE_MAX_NODES = 25
REPRODUCE_COUNT = 3
REPRODUCE_TOL = 1e-9


@dataclass(frozen=True)
class ResidualReport:
    """Non-negative defects of the optimality system.

    ``pde_residual`` is relative to ``|w f|`` (absolute when ``f = 0``).
    ``complementarity`` adds ``∫ mu (1 - |grad u|)^+`` and ``∫ mu (|grad u| - 1)^+``.
    """

    pde_residual: float
    eikonal_excess: float
    stationarity: float
    complementarity: float

    def to_frame(self, **labels: object) -> pd.DataFrame:
        """One-row frame, optional ``labels`` prepended as extra columns."""
        return pd.DataFrame([{**labels, **asdict(self)}])


def _masked_max(values: np.ndarray, mask: np.ndarray) -> float:
    return float(values[mask].max()) if np.any(mask) else 0.0


def _report(mu: Density, lam: float, u: ScalarField, f: SourceData, defect: np.ndarray) -> ResidualReport:
    grid = check_same_grid(mu, u, f.field)
    grad_sq = node_grad_sq(u).values
    grad_norm = np.sqrt(grad_sq)
    support = mu.support_mask
    w = grid.node_weights
    complementarity = float(
        np.sum(w * mu.values * np.maximum(1.0 - grad_norm, 0.0)) + np.sum(w * mu.values * np.maximum(grad_norm - 1.0, 0.0))
    )
    return ResidualReport(
        pde_residual=flux_residual(mu, lam, u, f),
        eikonal_excess=_masked_max(np.maximum(grad_sq - 1.0, 0.0), ~support),
        stationarity=_masked_max(np.abs(defect), support),
        complementarity=complementarity,
    )


def mk_residuals(mu: Density, u: ScalarField, f: SourceData) -> ResidualReport:
    """Residuals of the unregularized system; stationarity is ``|1 - |grad u|^2|`` on the support."""
    return _report(mu, 0.0, u, f, 1.0 - node_grad_sq(u).values)


def regularized_residuals(mu: Density, u: ScalarField, params: RegParams, f: SourceData) -> ResidualReport:
    defect = 1.0 - node_grad_sq(u).values
    if params.delta > 0.0:
        defect = defect - params.delta * params.p * p_laplacian(mu, params.p).values
    return _report(mu, params.lam, u, f, defect)


def oracle_1d(f: SourceData) -> Density:
    """Transport density of a 1D problem: ``|F|`` with ``F`` the running integral of ``f``.

    ``F`` is evaluated exactly at the nodes from the continuum source carried
    by ``f``. Sources without one fall back to the trapezoid running integral
    of the samples, which is off by up to ``h/2`` next to jumps of ``f``.
    """
    grid = f.grid
    if grid.dim != 1:
        raise GridError(f"the closed-form transport density is one-dimensional, grid has dim={grid.dim}")
    x = grid.coords[0]
    if f.primitive is not None:
        running = f.primitive(x)
    else:
        running = spi.cumulative_trapezoid(f.field.values, x, initial=0.0)
    return Density.project(grid, np.abs(running))


# ---------------------------------------------------------------------------
# Brute force
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _Start:
    value: float
    x: np.ndarray
    iterations: int


def _minimize_from(x0: np.ndarray, params: RegParams, f: SourceData, tol: float) -> _Start:
    grid = f.grid
    interior = grid.interior_mask.ravel()
    w = grid.node_weights.ravel()[interior]

    def objective(x: np.ndarray) -> tuple[float, np.ndarray]:
        values = np.zeros(grid.size)
        values[interior] = np.maximum(x, 0.0)
        evaluation = evaluate(Density(grid, values.reshape(grid.shape)), params, f, tol=tol)
        # Euclidean gradient of E in the interior coordinates
        return evaluation.energy.total, w * evaluation.gradient.flat[interior]

    result = spo.minimize(
        objective,
        x0,
        jac=True,
        method="L-BFGS-B",
        bounds=[(0.0, None)] * x0.size,
        options={"ftol": 1e-15, "gtol": 1e-12, "maxiter": 50_000, "maxfun": 100_000},
    )
    return _Start(float(result.fun), np.maximum(result.x, 0.0), int(result.nit))


def brute_force_minimize(
    params: RegParams,
    f: SourceData,
    *,
    n_starts: int = 6,
    max_starts: int = 24,
    seed: int = 0,
    tol: float = DEFAULT_TOL,
    workers: int | None = None,
) -> Density:
    """Minimize the regularized energy over the cone from random starts.

    Starts are added in batches of ``n_starts`` until the best value is
    reproduced by three starts within ``1e-9 max(1, |E|)``.

    Raises:
        ParameterError: the grid has more than 25 nodes, ``delta = 0``, or fewer
            than three starts are allowed.
        NonReproducibleOptimumError: ``max_starts`` starts never agreed.
    """
    grid = f.grid
    if grid.size > BRUTE_FORCE_MAX_NODES:
        raise ParameterError(f"brute force is limited to {BRUTE_FORCE_MAX_NODES} nodes, grid has {grid.size}")
    if params.delta <= 0.0:
        raise ParameterError("brute force needs delta > 0")
    params.check_dim(grid.dim)
    if n_starts < 1:
        raise ParameterError(f"n_starts must be >= 1, got {n_starts}")
    if max_starts < REPRODUCE_COUNT:
        raise ParameterError(f"max_starts must be >= {REPRODUCE_COUNT}, got {max_starts}")

    rng = np.random.default_rng(seed)
    n_interior = int(grid.interior_mask.sum())
    starts: list[_Start] = []

    with ThreadPoolExecutor(max_workers=workers) as pool:
        while len(starts) < max_starts:
            batch = [rng.uniform(0.0, 1.0, n_interior) for _ in range(min(n_starts, max_starts - len(starts)))]
            starts.extend(pool.map(lambda x0: _minimize_from(x0, params, f, tol), batch))
            values = np.array([s.value for s in starts])
            best = int(np.argmin(values))
            agreeing = np.abs(values - values[best]) <= REPRODUCE_TOL * max(1.0, abs(values[best]))
            if agreeing.sum() >= REPRODUCE_COUNT:
                logger.info(
                    "brute force: E=%.12g reproduced by %d of %d starts", values[best], agreeing.sum(), len(starts)
                )
                minimizer = np.zeros(grid.size)
                minimizer[grid.interior_mask.ravel()] = starts[best].x
                return Density(grid, minimizer.reshape(grid.shape))

    raise NonReproducibleOptimumError(
        f"best value not reproduced by {REPRODUCE_COUNT} of {len(starts)} starts", values=values.tolist()
    )


def compare_minimizers(minimizers: Mapping[str, ScalarField]) -> pd.DataFrame:
    """Pairwise L∞ and L² distances between named densities on one grid."""
    rows = []
    for (name_a, a), (name_b, b) in itertools.combinations(minimizers.items(), 2):
        grid = check_same_grid(a, b)
        diff = a.values - b.values
        rows.append(
            {
                "a": name_a,
                "b": name_b,
                "linf": float(np.max(np.abs(diff))),
                "l2": float(np.sqrt(np.sum(grid.node_weights * diff * diff))),
            }
        )
    return pd.DataFrame(rows, columns=["a", "b", "linf", "l2"])
