"""Weighted Neumann problem ``-div((mu + lambda) grad u) = f`` with zero-mean ``u``.

The discrete operator is ``K = G^T diag(W k) G`` where ``G`` is the edge
gradient, ``W`` the edge quadrature weights and ``k`` the edge conductivity
(arithmetic mean of ``mu + lambda`` over the two endpoints). ``K`` is
symmetric positive semidefinite with the constants as its kernel, and the
right-hand side ``w * f`` (``w`` the trapezoid weights) is orthogonal to that
kernel whenever ``f`` has zero mean, so Jacobi-preconditioned conjugate
gradients converge to a solution that is then shifted to zero mean.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sps
import scipy.sparse.linalg as spla
from numpy.typing import NDArray

from .errors import ConvergenceError, DensityError, ParameterError
from .grid import Grid, ScalarField, SourceData, check_same_grid

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-10


@dataclass(frozen=True)
class RegParams:
    """Regularization triple: conductivity floor ``lam``, Sobolev weight ``delta``, exponent ``p``."""

    lam: float
    delta: float
    p: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.lam) and self.lam > 0.0):
            raise ParameterError(f"lambda must be positive, got {self.lam}")
        if not (math.isfinite(self.delta) and self.delta >= 0.0):
            raise ParameterError(f"delta must be non-negative, got {self.delta}")
        if not (math.isfinite(self.p) and self.p > 1.0):
            raise ParameterError(f"p must be a finite exponent > 1, got {self.p}")

    @property
    def q(self) -> float:
        return self.p / (self.p - 1.0)

    def check_dim(self, dim: int) -> None:
        if not self.p > dim:
            raise ParameterError(f"p must exceed the space dimension {dim}, got {self.p}")

    def with_values(self, **changes: float) -> RegParams:
        return RegParams(
            lam=changes.get("lam", self.lam),
            delta=changes.get("delta", self.delta),
            p=changes.get("p", self.p),
        )


class Potential(ScalarField):
    """Zero-mean solution of the weighted Neumann problem."""


@dataclass(frozen=True)
class SolveReport:
    iterations: int
    residual_norm: float
    dirichlet_energy: float


def edge_conductivity(mu: ScalarField, lam: float) -> NDArray[np.float64]:
    return mu.grid.averaging_matrix @ (mu.flat + lam)


def weighted_laplacian(grid: Grid, conductivity: NDArray[np.float64]) -> sps.csr_matrix:
    """Assemble ``G^T diag(W k) G`` for an edge conductivity ``k``."""
    G = grid.gradient_matrix
    return (G.T @ sps.diags(grid.edge_weights * conductivity) @ G).tocsr()


def flux_residual(mu: ScalarField, lam: float, u: ScalarField, f: SourceData) -> float:
    """Relative residual ``|K u - w f| / |w f|`` of the flux balance.

    ``lam`` may be 0 here; this only evaluates the operator. With ``f = 0``
    the absolute residual is returned.
    """
    grid = check_same_grid(mu, u, f.field)
    K = weighted_laplacian(grid, edge_conductivity(mu, lam))
    b = grid.node_weights.ravel() * f.field.flat
    residual = float(np.linalg.norm(b - K @ u.flat))
    scale = float(np.linalg.norm(b))
    return residual / scale if scale > 0.0 else residual


def dirichlet_energy(mu: ScalarField, params: RegParams, u: ScalarField) -> float:
    """``∫ (mu + lambda) |grad u|^2`` with the operator's own edge stencil."""
    grid = check_same_grid(mu, u)
    g = grid.gradient_matrix @ u.flat
    k = edge_conductivity(mu, params.lam)
    return float(np.sum(grid.edge_weights * k * g * g))


def solve_weighted_neumann(
    mu: ScalarField,
    params: RegParams,
    f: SourceData,
    tol: float = DEFAULT_TOL,
    *,
    max_iter: int | None = None,
    x0: ScalarField | None = None,
) -> tuple[Potential, SolveReport]:
    """Solve ``-div((mu + lambda) grad u) = f``, ``∫u = 0``, by preconditioned CG.

    Args:
        mu: non-negative nodal density.
        params: regularization triple; only ``lam`` enters the operator.
        f: zero-mean source on the same grid.
        tol: relative residual target ``|b - K u| <= tol |b|``.
        max_iter: CG iteration cap, defaults to ten times the number of nodes.
        x0: optional warm start (e.g. the potential of the previous flow step).

    Raises:
        DensityError: ``mu`` has negative entries.
        ConvergenceError: CG did not reach ``tol`` within ``max_iter``.
    """
    grid = check_same_grid(mu, f.field)
    if np.any(mu.values < 0.0):
        raise DensityError(f"conductivity density has negative entries (min {mu.values.min():.3e})")

    weights = grid.node_weights.ravel()
    b = weights * f.field.flat
    b -= b.mean()
    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        return Potential.zeros(grid), SolveReport(0, 0.0, 0.0)

    K = weighted_laplacian(grid, edge_conductivity(mu, params.lam))
    preconditioner = sps.diags(1.0 / K.diagonal())
    start = None
    if x0 is not None:
        check_same_grid(x0, mu)
        start = x0.flat - np.sum(weights * x0.flat) / np.sum(weights)

    iterations = 0

    def count(_xk: NDArray[np.float64]) -> None:
        nonlocal iterations
        iterations += 1

    solution, info = spla.cg(
        K,
        b,
        x0=start,
        rtol=tol,
        atol=0.0,
        maxiter=max_iter or 10 * grid.size,
        M=preconditioner,
        callback=count,
    )
    solution = solution - np.sum(weights * solution) / np.sum(weights)
    residual = float(np.linalg.norm(b - K @ solution)) / b_norm
    if info != 0:
        raise ConvergenceError(
            f"weighted Neumann solve stopped after {iterations} iterations at relative residual {residual:.3e}",
            iterations=iterations,
            residual_norm=residual,
        )

    u = Potential(grid, solution)
    report = SolveReport(iterations, residual, dirichlet_energy(mu, params, u))
    if logger.isEnabledFor(logging.DEBUG):
        logger.debug("CG converged in %d iterations, residual %.2e", iterations, residual)
    return u, report
