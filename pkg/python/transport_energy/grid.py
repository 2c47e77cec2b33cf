"""Uniform tensor grids, staggered discrete calculus and source data.

Node values live on a uniform node-centred grid over a box Ω (an interval or
a rectangle). Gradients live on edge midpoints, one array per axis, and the
divergence brings edge fluxes back to the nodes. ``div`` is defined as the
negative adjoint of ``grad`` with respect to the trapezoid-weighted inner
products, so summation by parts (with the homogeneous Neumann closure built
in) holds to machine precision and every weighted operator assembled from
these pieces is symmetric positive semidefinite.

Layout of a flattened edge vector: all axis-0 edges first (C order over the
edge array of shape ``(n0 - 1, n1)``), then all axis-1 edges.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from functools import cached_property
from typing import Literal, Union

import numpy as np
import scipy.sparse as sps
from numpy.typing import NDArray
from scipy import integrate as spi

from .errors import GridError, SourceError

logger = logging.getLogger(__name__)

Box = tuple[tuple[float, ...], tuple[float, ...]]
MeanPolicy = Literal["reject", "correct"]

# relative tolerance used to decide whether a coordinate sits on a piece face
_FACE_TOL = 1e-9
# a source whose continuum integral is below this (relative) is balanced
_BALANCE_TOL = 1e-9
# discrete zero-mean acceptance, relative to ||f||_inf * |Omega|
_ZERO_MEAN_TOL = 1e-14


def _as_axis_tuple(value: float | Sequence[float], dim: int, name: str, cast=float) -> tuple:
    if np.ndim(value) == 0:
        values = (cast(value),) * dim
    else:
        values = tuple(cast(v) for v in value)
    if len(values) != dim:
        raise GridError(f"{name} has {len(values)} entries, expected {dim}")
    return values


@dataclass(frozen=True)
class Grid:
    """Uniform node-centred discretization of a box domain."""

    dim: int
    lo: tuple[float, ...]
    hi: tuple[float, ...]
    n_nodes: tuple[int, ...]

    def __post_init__(self) -> None:
        if self.dim not in (1, 2):
            raise GridError(f"dim must be 1 or 2, got {self.dim}")
        for name in ("lo", "hi", "n_nodes"):
            if len(getattr(self, name)) != self.dim:
                raise GridError(f"{name} must have {self.dim} entries, got {getattr(self, name)!r}")
        for axis in range(self.dim):
            lo, hi, n = self.lo[axis], self.hi[axis], self.n_nodes[axis]
            if not (math.isfinite(lo) and math.isfinite(hi)):
                raise GridError(f"non-finite extent on axis {axis}: ({lo}, {hi})")
            if not hi > lo:
                raise GridError(f"empty extent on axis {axis}: hi={hi} <= lo={lo}")
            if n < 3:
                raise GridError(f"axis {axis} needs at least 3 nodes, got {n}")

    # ---- geometry ----

    @property
    def shape(self) -> tuple[int, ...]:
        return self.n_nodes

    @property
    def size(self) -> int:
        return int(np.prod(self.n_nodes))

    @cached_property
    def h(self) -> tuple[float, ...]:
        return tuple((hi - lo) / (n - 1) for lo, hi, n in zip(self.lo, self.hi, self.n_nodes))

    @property
    def volume(self) -> float:
        return float(np.prod([hi - lo for lo, hi in zip(self.lo, self.hi)]))

    @cached_property
    def coords(self) -> tuple[NDArray[np.float64], ...]:
        return tuple(np.linspace(lo, hi, n) for lo, hi, n in zip(self.lo, self.hi, self.n_nodes))

    @cached_property
    def mesh(self) -> tuple[NDArray[np.float64], ...]:
        """Node coordinates broadcast to the grid shape, one array per axis."""
        return tuple(np.meshgrid(*self.coords, indexing="ij"))

    @cached_property
    def boundary_mask(self) -> NDArray[np.bool_]:
        mask = np.zeros(self.shape, dtype=bool)
        for axis in range(self.dim):
            index = [slice(None)] * self.dim
            index[axis] = 0
            mask[tuple(index)] = True
            index[axis] = -1
            mask[tuple(index)] = True
        mask.flags.writeable = False
        return mask

    @cached_property
    def interior_mask(self) -> NDArray[np.bool_]:
        mask = ~self.boundary_mask
        mask.flags.writeable = False
        return mask

    def describe(self) -> str:
        """One-line metadata string, used as the header of field CSV files."""

        def fmt(values: Sequence) -> str:
            return ",".join(repr(v) for v in values)

        return f"dim={self.dim} lo={fmt(self.lo)} hi={fmt(self.hi)} n_nodes={fmt(self.n_nodes)}"

    # ---- quadrature weights ----

    def _trapezoid_1d(self, axis: int) -> NDArray[np.float64]:
        w = np.full(self.n_nodes[axis], self.h[axis])
        w[0] = w[-1] = 0.5 * self.h[axis]
        return w

    @cached_property
    def node_weights(self) -> NDArray[np.float64]:
        weights = self._trapezoid_1d(0)
        if self.dim == 2:
            weights = np.multiply.outer(weights, self._trapezoid_1d(1))
        weights.flags.writeable = False
        return weights

    @cached_property
    def edge_shapes(self) -> tuple[tuple[int, ...], ...]:
        shapes = []
        for axis in range(self.dim):
            shape = list(self.n_nodes)
            shape[axis] -= 1
            shapes.append(tuple(shape))
        return tuple(shapes)

    @property
    def n_edges(self) -> int:
        return int(sum(np.prod(s) for s in self.edge_shapes))

    @cached_property
    def edge_weights(self) -> NDArray[np.float64]:
        """Flattened quadrature weights of the edge inner product."""
        if self.dim == 1:
            weights = np.full(self.n_nodes[0] - 1, self.h[0])
        else:
            w0, w1 = self._trapezoid_1d(0), self._trapezoid_1d(1)
            weights = np.concatenate(
                [
                    np.multiply.outer(np.full(self.n_nodes[0] - 1, self.h[0]), w1).ravel(),
                    np.multiply.outer(w0, np.full(self.n_nodes[1] - 1, self.h[1])).ravel(),
                ]
            )
        weights.flags.writeable = False
        return weights

    # ---- sparse operators ----

    def _axis_operators(self, stencil: tuple[float, float], scaled: bool) -> sps.csr_matrix:
        blocks = []
        for axis in range(self.dim):
            n = self.n_nodes[axis]
            op = sps.diags(list(stencil), [0, 1], shape=(n - 1, n))
            if scaled:
                op = op / self.h[axis]
            if self.dim == 2:
                eye = [sps.identity(m) for m in self.n_nodes]
                eye[axis] = op
                op = sps.kron(eye[0], eye[1])
            blocks.append(op)
        return sps.vstack(blocks).tocsr()

    @cached_property
    def gradient_matrix(self) -> sps.csr_matrix:
        """Edge differences divided by the spacing, shape ``(n_edges, size)``."""
        return self._axis_operators((-1.0, 1.0), scaled=True)

    @cached_property
    def averaging_matrix(self) -> sps.csr_matrix:
        """Arithmetic mean of the two endpoint values of every edge."""
        return self._axis_operators((0.5, 0.5), scaled=False)


def build_grid(
    dim: int,
    lo: float | Sequence[float],
    hi: float | Sequence[float],
    n_nodes: int | Sequence[int],
) -> Grid:
    """Build a :class:`Grid`; scalar extents and counts are broadcast to every axis."""
    if dim not in (1, 2):
        raise GridError(f"dim must be 1 or 2, got {dim}")
    return Grid(
        dim=int(dim),
        lo=_as_axis_tuple(lo, dim, "lo"),
        hi=_as_axis_tuple(hi, dim, "hi"),
        n_nodes=_as_axis_tuple(n_nodes, dim, "n_nodes", cast=int),
    )


def domain_for_support(support_box: Box, margin: float | None = None) -> Box:
    """Box containing ``support_box`` with ``margin`` on every side.

    The default margin is half the diameter of the support box.
    """
    lo, hi = (np.asarray(b, dtype=float) for b in support_box)
    diameter = float(np.linalg.norm(hi - lo))
    if diameter <= 0.0:
        raise GridError("support box has zero diameter")
    if margin is None:
        margin = 0.5 * diameter
    if margin <= 0.0:
        raise GridError(f"margin must be positive, got {margin}")
    return tuple((lo - margin).tolist()), tuple((hi + margin).tolist())


# ---------------------------------------------------------------------------
# Fields
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ScalarField:
    """One finite real value per grid node. The value array is read-only."""

    grid: Grid
    values: NDArray[np.float64]

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=float)
        if values.shape != self.grid.shape:
            if values.size != self.grid.size:
                raise GridError(f"field of shape {values.shape} does not fit grid of shape {self.grid.shape}")
            values = values.reshape(self.grid.shape)
        if not np.all(np.isfinite(values)):
            raise GridError("field values must be finite")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @property
    def flat(self) -> NDArray[np.float64]:
        return self.values.ravel()

    @classmethod
    def zeros(cls, grid: Grid, **kwargs):
        return cls(grid, np.zeros(grid.shape), **kwargs)


@dataclass(frozen=True, eq=False)
class EdgeField:
    """Values on edge midpoints, flattened axis by axis."""

    grid: Grid
    values: NDArray[np.float64]

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=float).ravel()
        if values.size != self.grid.n_edges:
            raise GridError(f"edge field has {values.size} values, grid has {self.grid.n_edges} edges")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @property
    def components(self) -> tuple[NDArray[np.float64], ...]:
        parts, start = [], 0
        for shape in self.grid.edge_shapes:
            stop = start + int(np.prod(shape))
            parts.append(self.values[start:stop].reshape(shape))
            start = stop
        return tuple(parts)


def check_same_grid(*items: ScalarField | EdgeField | Grid) -> Grid:
    grids = [item if isinstance(item, Grid) else item.grid for item in items]
    first = grids[0]
    for other in grids[1:]:
        if other != first:
            raise GridError(f"grid mismatch: {first.describe()} vs {other.describe()}")
    return first


def grad(field: ScalarField) -> EdgeField:
    """Midpoint gradient, one difference quotient per edge."""
    grid = field.grid
    return EdgeField(grid, grid.gradient_matrix @ field.flat)


def div(vector: EdgeField) -> ScalarField:
    """Nodal divergence, the negative adjoint of :func:`grad`."""
    grid = vector.grid
    flux = grid.gradient_matrix.T @ (grid.edge_weights * vector.values)
    return ScalarField(grid, -flux / grid.node_weights.ravel())


def integrate(field: ScalarField) -> float:
    """Trapezoid rule over Ω."""
    return float(np.sum(field.grid.node_weights * field.values))


def inner(a: ScalarField, b: ScalarField) -> float:
    grid = check_same_grid(a, b)
    return float(np.sum(grid.node_weights * a.values * b.values))


def edge_inner(a: EdgeField, b: EdgeField) -> float:
    grid = check_same_grid(a, b)
    return float(np.sum(grid.edge_weights * a.values * b.values))


def l2_norm(field: ScalarField) -> float:
    return math.sqrt(max(inner(field, field), 0.0))


# ---------------------------------------------------------------------------
# Source data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SourcePiece:
    """Constant ``value`` on the axis-aligned box ``[lo, hi]``."""

    lo: tuple[float, ...]
    hi: tuple[float, ...]
    value: float


ClosedForm = Callable[..., Union[NDArray[np.float64], float]]
SourceSpec = Union[Sequence[SourcePiece], ClosedForm, None]
Primitive = Callable[[NDArray[np.float64]], NDArray[np.float64]]
_Sampled = tuple[NDArray[np.float64], Union[Box, None], float, Union[Primitive, None]]


@dataclass(frozen=True, eq=False)
class SourceData:
    """Zero-mean source term ``f`` with compact support strictly inside Ω."""

    field: ScalarField
    support_box: Box | None
    mean_correction: float = 0.0
    # running integral of the continuum source from lo, 1D only
    primitive: Primitive | None = None

    @property
    def grid(self) -> Grid:
        return self.field.grid

    @property
    def is_zero(self) -> bool:
        return not np.any(self.field.values)


def _axis_indicator(x: NDArray[np.float64], a: float, b: float, tol: float) -> NDArray[np.float64]:
    # faces get half weight so the trapezoid rule integrates boxes exactly
    inside = (x > a + tol) & (x < b - tol)
    on_face = (np.abs(x - a) <= tol) | (np.abs(x - b) <= tol)
    return np.where(inside, 1.0, np.where(on_face, 0.5, 0.0))


def box_indicator(grid: Grid, box: Box) -> NDArray[np.float64]:
    lo, hi = box
    indicator = np.ones(grid.shape)
    for axis in range(grid.dim):
        tol = _FACE_TOL * grid.h[axis]
        indicator = indicator * _axis_indicator(grid.mesh[axis], lo[axis], hi[axis], tol)
    return indicator


def _check_support(grid: Grid, box: Box) -> None:
    lo, hi = box
    for axis in range(grid.dim):
        tol = _FACE_TOL * (grid.hi[axis] - grid.lo[axis])
        if not lo[axis] < hi[axis]:
            raise SourceError(f"support box is empty on axis {axis}: {lo[axis]} >= {hi[axis]}")
        if lo[axis] <= grid.lo[axis] + tol or hi[axis] >= grid.hi[axis] - tol:
            raise SourceError(
                f"source support [{lo[axis]}, {hi[axis]}] touches the boundary of "
                f"[{grid.lo[axis]}, {grid.hi[axis]}] on axis {axis}"
            )


def _pieces_primitive(pieces: Sequence[SourcePiece]) -> Primitive:
    def primitive(x: NDArray[np.float64]) -> NDArray[np.float64]:
        x = np.asarray(x, dtype=float)
        return sum(p.value * np.clip(x - p.lo[0], 0.0, p.hi[0] - p.lo[0]) for p in pieces)

    return primitive


def _closed_form_primitive(function: ClosedForm, lo: float, hi: float) -> Primitive:
    def primitive(x: NDArray[np.float64]) -> NDArray[np.float64]:
        x = np.asarray(x, dtype=float)
        clipped = np.clip(x, lo, hi)
        order = np.argsort(clipped, kind="stable")
        knots = np.concatenate([[lo], clipped[order]])
        increments = np.zeros(clipped.size)
        for i, (a, b) in enumerate(zip(knots, knots[1:])):
            if b > a:
                increments[i] = spi.quad(lambda s: float(function(s)), a, b)[0]
        values = np.empty_like(clipped)
        values[order] = np.cumsum(increments)
        return values

    return primitive


def _shifted_primitive(primitive: Primitive, exact: float, lo: float, hi: float) -> Primitive:
    # continuum counterpart of the mean correction: subtract exact / |support| on the support
    slope = exact / (hi - lo)

    def shifted(x: NDArray[np.float64]) -> NDArray[np.float64]:
        x = np.asarray(x, dtype=float)
        return primitive(x) - slope * np.clip(x - lo, 0.0, hi - lo)

    return shifted


def _from_pieces(grid: Grid, pieces: Sequence[SourcePiece]) -> _Sampled:
    active = []
    for piece in pieces:
        lo = _as_axis_tuple(piece.lo, grid.dim, "piece lo")
        hi = _as_axis_tuple(piece.hi, grid.dim, "piece hi")
        if not all(b > a for a, b in zip(lo, hi)):
            raise SourceError(f"source piece [{lo}, {hi}] is empty")
        if piece.value != 0.0:
            active.append(SourcePiece(lo, hi, float(piece.value)))
    if not active:
        return np.zeros(grid.shape), None, 0.0, None

    support = (
        tuple(min(p.lo[a] for p in active) for a in range(grid.dim)),
        tuple(max(p.hi[a] for p in active) for a in range(grid.dim)),
    )
    _check_support(grid, support)
    values = sum(p.value * box_indicator(grid, (p.lo, p.hi)) for p in active)
    exact = sum(p.value * float(np.prod(np.subtract(p.hi, p.lo))) for p in active)
    primitive = _pieces_primitive(active) if grid.dim == 1 else None
    return values, support, exact, primitive


def _from_closed_form(grid: Grid, function: ClosedForm, support_box: Box | None) -> _Sampled:
    if support_box is None:
        raise SourceError("a closed-form source needs an explicit support_box")
    support = (
        _as_axis_tuple(support_box[0], grid.dim, "support lo"),
        _as_axis_tuple(support_box[1], grid.dim, "support hi"),
    )
    _check_support(grid, support)
    values = np.broadcast_to(np.asarray(function(*grid.mesh), dtype=float), grid.shape)
    values = np.where(box_indicator(grid, support) > 0.0, values, 0.0)
    ranges = [[support[0][a], support[1][a]] for a in range(grid.dim)]
    exact, _ = spi.nquad(lambda *x: float(function(*x)), ranges)
    primitive = _closed_form_primitive(function, support[0][0], support[1][0]) if grid.dim == 1 else None
    return values, support, float(exact), primitive


def make_source(
    grid: Grid,
    pieces: SourceSpec,
    *,
    support_box: Box | None = None,
    on_nonzero_mean: MeanPolicy = "reject",
) -> SourceData:
    """Sample a source term on ``grid`` and enforce the zero-mean hypothesis.

    Args:
        grid: target grid.
        pieces: a sequence of :class:`SourcePiece` (piecewise-constant source), a
            vectorized callable ``f(x)`` / ``f(x, y)`` (closed form, needs
            ``support_box``), or ``None`` / an empty sequence for ``f = 0``.
        support_box: support of a closed-form source.
        on_nonzero_mean: ``"reject"`` raises for a source whose continuum
            integral is not zero; ``"correct"`` subtracts the mean on the
            support instead. A zero-mean source whose sampling leaves a
            discretization mean is always corrected.

    Returns:
        SourceData with ``mean_correction`` set to the constant subtracted on
        the support box (0 when no correction was needed).
    """
    if on_nonzero_mean not in ("reject", "correct"):
        raise SourceError(f"on_nonzero_mean must be 'reject' or 'correct', got {on_nonzero_mean!r}")
    if pieces is None or (not callable(pieces) and len(pieces) == 0):
        return SourceData(ScalarField.zeros(grid), None, 0.0)

    if callable(pieces):
        values, support, exact, primitive = _from_closed_form(grid, pieces, support_box)
    else:
        values, support, exact, primitive = _from_pieces(grid, pieces)

    field = ScalarField(grid, values)
    scale = float(np.max(np.abs(values))) * grid.volume
    if scale == 0.0:
        return SourceData(field, support, 0.0, primitive)

    discrete = integrate(field)
    if abs(discrete) <= _ZERO_MEAN_TOL * scale:
        return SourceData(field, support, 0.0, primitive)

    balanced = abs(exact) <= _BALANCE_TOL * scale
    if not balanced and on_nonzero_mean == "reject":
        raise SourceError(f"source integral is {exact:.6g}, the transport problem needs a zero-mean source")

    support_indicator = ScalarField(grid, box_indicator(grid, support))
    correction = discrete / integrate(support_indicator)
    field = ScalarField(grid, values - correction * support_indicator.values)
    if balanced:
        logger.debug("removed discretization mean %.3e from a zero-mean source", correction)
    else:
        logger.warning("source integral %.6g corrected by subtracting %.6g on its support", exact, correction)
        if primitive is not None:
            primitive = _shifted_primitive(primitive, exact, support[0][0], support[1][0])
    return SourceData(field, support, correction, primitive)
