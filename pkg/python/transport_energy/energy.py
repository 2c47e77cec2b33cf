"""Regularized transport energy, its gradient and its minimal subgradient.

For a density ``mu`` in the discrete cone (non-negative, zero on the boundary)
and ``u_mu`` the zero-mean solution of ``-div((mu + lambda) grad u) = f``::

    L_lambda(mu) = 2 ∫ f u_mu - ∫ (mu + lambda) |grad u_mu|^2
    M(mu)        = ∫ mu
    S(mu)        = delta * sum_edges W_e |grad mu|_e^p
    E            = L_lambda + M + S

The nodal field ``1 - |grad u_mu|^2 - delta p Δ_p mu`` is the exact gradient
of this discrete ``E`` with respect to the trapezoid inner product on the
interior nodes, because ``|grad u|^2`` at a node is assembled as the
derivative of the edge conductivity average, and ``Δ_p`` uses the same
``div``/``grad`` pair as the Sobolev term.
"""

from __future__ import annotations

import hashlib
import logging
import math
import threading
from collections import OrderedDict
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from numpy.typing import NDArray

from .elliptic import (
    DEFAULT_TOL,
    Potential,
    RegParams,
    SolveReport,
    dirichlet_energy,
    solve_weighted_neumann,
)
from .errors import DensityError
from .grid import EdgeField, Grid, ScalarField, SourceData, check_same_grid, div, integrate

logger = logging.getLogger(__name__)

DEFAULT_SUPPORT_RATIO = 1e-10


@dataclass(frozen=True, eq=False)
class Density(ScalarField):
    """Non-negative nodal density with zero boundary trace.

    ``eps_supp`` is the threshold defining the discrete support ``{mu > eps}``;
    when unset it is ``1e-10 * max(mu)``.
    """

    eps_supp: float | None = None

    def __post_init__(self) -> None:
        super().__post_init__()
        values = self.values
        if np.any(values < 0.0):
            raise DensityError(f"density has negative entries (min {values.min():.3e})")
        if np.any(values[self.grid.boundary_mask] != 0.0):
            raise DensityError("density must vanish on boundary nodes")
        if self.eps_supp is not None and not self.eps_supp > 0.0:
            raise DensityError(f"support threshold must be positive, got {self.eps_supp}")

    @classmethod
    def project(cls, grid: Grid, values: NDArray[np.float64], eps_supp: float | None = None) -> Density:
        """Clamp ``values`` into the cone: negatives and boundary nodes set to 0."""
        projected = np.maximum(np.asarray(values, dtype=float).reshape(grid.shape), 0.0)
        projected[grid.boundary_mask] = 0.0
        return cls(grid, projected, eps_supp)

    @classmethod
    def constant(cls, grid: Grid, value: float, eps_supp: float | None = None) -> Density:
        return cls.project(grid, np.full(grid.shape, float(value)), eps_supp)

    @property
    def support_threshold(self) -> float:
        if self.eps_supp is not None:
            return self.eps_supp
        return DEFAULT_SUPPORT_RATIO * float(self.values.max())

    @property
    def support_mask(self) -> NDArray[np.bool_]:
        return self.values > self.support_threshold

    @property
    def mass(self) -> float:
        return integrate(self)


@dataclass(frozen=True)
class EnergyBreakdown:
    L: float
    M: float
    sobolev: float
    total: float

    @classmethod
    def from_terms(cls, L: float, M: float, sobolev: float) -> EnergyBreakdown:
        return cls(L=L, M=M, sobolev=sobolev, total=L + M + sobolev)


def node_grad_sq(u: ScalarField) -> ScalarField:
    """Nodal ``|grad u|^2``: adjacent squared edge gradients averaged per axis."""
    grid = u.grid
    g = grid.gradient_matrix @ u.flat
    values = (grid.averaging_matrix.T @ (grid.edge_weights * g * g)) / grid.node_weights.ravel()
    return ScalarField(grid, values)


def _p_flux(mu: ScalarField, p: float) -> NDArray[np.float64]:
    g = mu.grid.gradient_matrix @ mu.flat
    # |g|^(p-2) g written so that g = 0 is well defined for every p > 1
    return np.sign(g) * np.abs(g) ** (p - 1.0)


def p_laplacian(mu: ScalarField, p: float) -> ScalarField:
    """Nodal ``div(|grad mu|^(p-2) grad mu)``, zero on boundary nodes."""
    grid = mu.grid
    values = div(EdgeField(grid, _p_flux(mu, p))).values.copy()
    values[grid.boundary_mask] = 0.0
    return ScalarField(grid, values)


def sobolev_term(mu: ScalarField, params: RegParams) -> float:
    if params.delta == 0.0:
        return 0.0
    grid = mu.grid
    g = grid.gradient_matrix @ mu.flat
    return params.delta * float(np.sum(grid.edge_weights * np.abs(g) ** params.p))


def gradient_p_norm(mu: ScalarField, p: float) -> float:
    """``||grad mu||_p`` over the edges."""
    grid = mu.grid
    g = grid.gradient_matrix @ mu.flat
    return float(np.sum(grid.edge_weights * np.abs(g) ** p)) ** (1.0 / p)


class SolveCache:
    """Thread-safe LRU cache of elliptic solves keyed by content hash."""

    def __init__(self, maxsize: int = 64):
        self.maxsize = maxsize
        self.hits = 0
        self.misses = 0
        self._entries: OrderedDict[str, tuple[Potential, SolveReport]] = OrderedDict()
        self._lock = threading.Lock()

    @staticmethod
    def key(mu: ScalarField, lam: float, f: SourceData, tol: float) -> str:
        digest = hashlib.sha1()
        digest.update(mu.grid.describe().encode())
        digest.update(np.ascontiguousarray(mu.values).tobytes())
        digest.update(np.ascontiguousarray(f.field.values).tobytes())
        digest.update(f"{lam!r}|{tol!r}".encode())
        return digest.hexdigest()

    def solve(
        self,
        mu: ScalarField,
        params: RegParams,
        f: SourceData,
        tol: float = DEFAULT_TOL,
        x0: ScalarField | None = None,
    ) -> tuple[Potential, SolveReport]:
        key = self.key(mu, params.lam, f, tol)
        with self._lock:
            entry = self._entries.get(key)
            if entry is not None:
                self._entries.move_to_end(key)
                self.hits += 1
                return entry
        entry = solve_weighted_neumann(mu, params, f, tol, x0=x0)
        with self._lock:
            self.misses += 1
            self._entries[key] = entry
            while len(self._entries) > self.maxsize:
                self._entries.popitem(last=False)
        return entry

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)


@dataclass(frozen=True, eq=False)
class Evaluation:
    """Everything one elliptic solve gives about a density."""

    mu: Density
    params: RegParams
    source: SourceData
    potential: Potential
    report: SolveReport
    energy: EnergyBreakdown
    grad_u_sq: ScalarField

    @cached_property
    def gradient(self) -> ScalarField:
        grid = self.mu.grid
        values = 1.0 - self.grad_u_sq.values
        if self.params.delta > 0.0:
            values = values - self.params.delta * self.params.p * p_laplacian(self.mu, self.params.p).values
        values = np.where(grid.boundary_mask, 0.0, values)
        return ScalarField(grid, values)

    @cached_property
    def subgradient(self) -> ScalarField:
        grid = self.mu.grid
        excess = np.maximum(self.grad_u_sq.values - 1.0, 0.0)
        values = np.where(self.mu.support_mask, self.gradient.values, -excess)
        values = np.where(grid.boundary_mask, 0.0, values)
        return ScalarField(grid, values)

    @cached_property
    def xi_norm(self) -> float:
        xi = self.subgradient
        return math.sqrt(float(np.sum(xi.grid.node_weights * xi.values**2)))


def evaluate(
    mu: Density,
    params: RegParams,
    f: SourceData,
    *,
    tol: float = DEFAULT_TOL,
    x0: ScalarField | None = None,
    cache: SolveCache | None = None,
) -> Evaluation:
    """Solve once and collect energy, potential, ``|grad u|^2`` and gradients."""
    grid = check_same_grid(mu, f.field)
    params.check_dim(grid.dim)
    if cache is not None:
        u, report = cache.solve(mu, params, f, tol, x0)
    else:
        u, report = solve_weighted_neumann(mu, params, f, tol, x0=x0)
    dirichlet = dirichlet_energy(mu, params, u)
    L = 2.0 * float(np.sum(grid.node_weights * f.field.values * u.values)) - dirichlet
    energy = EnergyBreakdown.from_terms(L, mu.mass, sobolev_term(mu, params))
    return Evaluation(mu, params, f, u, report, energy, node_grad_sq(u))


def eval_energy(
    mu: Density, params: RegParams, f: SourceData, *, tol: float = DEFAULT_TOL, cache: SolveCache | None = None
) -> EnergyBreakdown:
    return evaluate(mu, params, f, tol=tol, cache=cache).energy


def grad_E(
    mu: Density, params: RegParams, f: SourceData, *, tol: float = DEFAULT_TOL, cache: SolveCache | None = None
) -> ScalarField:
    """``1 - |grad u_mu|^2 - delta p Δ_p mu`` on interior nodes, 0 on the boundary."""
    return evaluate(mu, params, f, tol=tol, cache=cache).gradient


def minimal_subgradient(
    mu: Density, params: RegParams, f: SourceData, *, tol: float = DEFAULT_TOL, cache: SolveCache | None = None
) -> ScalarField:
    """Least-norm element of the subdifferential.

    ``grad_E`` on the support, ``-(|grad u|^2 - 1)^+`` where ``mu`` vanishes.
    """
    return evaluate(mu, params, f, tol=tol, cache=cache).subgradient


@dataclass(frozen=True)
class MassBalance:
    L: float
    M: float
    t_opt: float
    rescaled_energy: float
    gap: float


def mass_balance(
    mu: Density, params: RegParams, f: SourceData, *, tol: float = DEFAULT_TOL, cache: SolveCache | None = None
) -> MassBalance:
    """Scaling diagnostics along the ray ``t -> t mu``.

    With ``delta = 0`` and ``lambda -> 0`` the energy of ``t mu`` is
    ``L/t + t M``, minimized at ``t = sqrt(L/M)`` with value ``2 sqrt(L M)``;
    a minimizer therefore has ``L = M``. ``gap`` is ``|L - M| / M``.
    """
    energy = eval_energy(mu, params, f, tol=tol, cache=cache)
    L, M = energy.L, energy.M
    if M <= 0.0:
        return MassBalance(L, M, math.inf, math.inf if L > 0.0 else 0.0, math.inf)
    return MassBalance(L, M, math.sqrt(max(L, 0.0) / M), 2.0 * math.sqrt(max(L, 0.0) * M), abs(L - M) / M)
