"""Error types raised by ``transport_energy``.

Everything the library raises on purpose derives from
:class:`TransportEnergyError`, so callers (and the CLI) can tell numerical
failures apart from configuration mistakes with a single ``except``.
"""

from __future__ import annotations

from collections.abc import Sequence


class TransportEnergyError(Exception):
    """Base class of all library errors."""


class GridError(TransportEnergyError, ValueError):
    """Invalid grid extents or node counts, or fields living on different grids."""


class SourceError(TransportEnergyError, ValueError):
    """Source term that violates the zero-mean / compact-support hypotheses."""


class DensityError(TransportEnergyError, ValueError):
    """Density with negative entries, non-zero boundary trace or non-finite values."""


class ParameterError(TransportEnergyError, ValueError):
    """Regularization triple or run configuration outside its admissible range."""


class ConfigError(TransportEnergyError):
    """Experiment configuration that cannot be loaded or validated."""


class ConvergenceError(TransportEnergyError):
    """An iterative method stopped before meeting its tolerance."""

    def __init__(self, message: str, *, iterations: int = 0, residual_norm: float = float("nan")):
        super().__init__(message)
        self.iterations = iterations
        self.residual_norm = residual_norm


class StiffStateError(ConvergenceError):
    """Backtracking drove the flow time step below its floor."""

    def __init__(self, message: str, *, dt: float, t: float):
        super().__init__(message)
        self.dt = dt
        self.t = t


class NonReproducibleOptimumError(ConvergenceError):
    """Brute-force starts did not agree on the optimal value."""

    def __init__(self, message: str, *, values: Sequence[float]):
        super().__init__(message, iterations=len(values))
        self.values = list(values)
