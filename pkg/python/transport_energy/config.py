"""Versioned TOML experiment configuration.

A minimal flow experiment::

    schema_version = 1
    mode = "flow"
    seed = 0
    output_dir = "out/tent"

    [grid]
    dim = 1
    lo = -1.5
    hi = 1.5
    n_nodes = 301

    [[source.pieces]]
    lo = -1.0
    hi = 0.0
    value = 1.0

    [[source.pieces]]
    lo = 0.0
    hi = 1.0
    value = -1.0

    [params]
    lambda = 1e-3
    delta = 1e-6
    p = 2.0

    [initial]
    kind = "constant"
    value = 0.5

    [flow]
    xi_tol = 1e-6

Instead of ``lo``/``hi`` the ``[grid]`` table may give ``margin``; the domain
is then the bounding box of the source pieces widened by that margin on every
side (``margin = "auto"`` uses half the diameter of the box). Every
validation failure raises :class:`ConfigError` naming the offending key.
"""

from __future__ import annotations

import logging
import sys
from collections.abc import Mapping
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .diagnostics import REPRODUCE_COUNT, oracle_1d
from .elliptic import DEFAULT_TOL, RegParams
from .energy import Density
from .errors import ConfigError, TransportEnergyError
from .flow import FlowConfig
from .grid import Box, Grid, SourceData, SourcePiece, build_grid, domain_for_support, make_source
from .metric import JkoConfig

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MODES = ("flow", "jko", "sweep", "oracle-check")

_MISSING = object()


class _Table:
    """Typed access to one TOML table; unknown keys are an error."""

    def __init__(self, data: Any, path: str):
        if not isinstance(data, Mapping):
            raise ConfigError(f"{path or 'config'} must be a table")
        self.data = data
        self.path = path
        self.used: set[str] = set()

    def _key(self, key: str) -> str:
        return f"{self.path}.{key}" if self.path else key

    def has(self, key: str) -> bool:
        return key in self.data

    def get(self, key: str, kind: type | tuple[type, ...], default: Any = _MISSING) -> Any:
        self.used.add(key)
        if key not in self.data:
            if default is _MISSING:
                raise ConfigError(f"missing required key {self._key(key)}")
            return default
        value = self.data[key]
        kinds = kind if isinstance(kind, tuple) else (kind,)
        if float in kinds and int not in kinds and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if isinstance(value, bool) and kind is not bool:
            raise ConfigError(f"{self._key(key)} must be {_kind_name(kind)}, got a boolean")
        if not isinstance(value, kind):
            raise ConfigError(f"{self._key(key)} must be {_kind_name(kind)}, got {type(value).__name__}")
        return value

    def number_list(self, key: str, default: Any = _MISSING) -> tuple[float, ...] | Any:
        value = self.get(key, (list, int, float), default)
        if value is default and default is not _MISSING:
            return default
        items = value if isinstance(value, list) else [value]
        if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in items):
            raise ConfigError(f"{self._key(key)} must be a number or a list of numbers")
        return tuple(float(v) for v in items)

    def table(self, key: str, default: Any = _MISSING) -> _Table | Any:
        self.used.add(key)
        if key not in self.data:
            if default is _MISSING:
                raise ConfigError(f"missing required table [{self._key(key)}]")
            return default
        return _Table(self.data[key], self._key(key))

    def finish(self) -> None:
        unknown = sorted(set(self.data) - self.used)
        if unknown:
            raise ConfigError(f"unknown key(s) in {self.path or 'top level'}: {', '.join(unknown)}")


def _kind_name(kind: type | tuple[type, ...]) -> str:
    kinds = kind if isinstance(kind, tuple) else (kind,)
    return " or ".join(k.__name__ for k in kinds)


# ---------------------------------------------------------------------------
# Sections
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridSpec:
    dim: int
    n_nodes: tuple[int, ...]
    lo: tuple[float, ...] | None = None
    hi: tuple[float, ...] | None = None
    margin: float | None = None

    def build(self, support_box: Box | None) -> Grid:
        if self.lo is not None:
            return build_grid(self.dim, self.lo, self.hi, self.n_nodes)
        if support_box is None:
            raise ConfigError("grid.margin needs a source with at least one non-zero piece")
        lo, hi = domain_for_support(support_box, self.margin)
        return build_grid(self.dim, lo, hi, self.n_nodes)


@dataclass(frozen=True)
class SourceSpec:
    pieces: tuple[SourcePiece, ...] = ()
    on_nonzero_mean: str = "reject"

    @property
    def support_box(self) -> Box | None:
        active = [p for p in self.pieces if p.value != 0.0]
        if not active:
            return None
        dim = len(active[0].lo)
        return (
            tuple(min(p.lo[a] for p in active) for a in range(dim)),
            tuple(max(p.hi[a] for p in active) for a in range(dim)),
        )

    def build(self, grid: Grid) -> SourceData:
        return make_source(grid, list(self.pieces), on_nonzero_mean=self.on_nonzero_mean)


@dataclass(frozen=True)
class InitialSpec:
    kind: str = "constant"
    value: float = 0.5

    def build(self, grid: Grid, f: SourceData, seed: int) -> Density:
        if self.kind == "constant":
            return Density.constant(grid, self.value)
        if self.kind == "oracle":
            return oracle_1d(f)
        rng = np.random.default_rng(seed)
        return Density.project(grid, rng.uniform(0.0, self.value, grid.shape))


@dataclass(frozen=True)
class SweepSpec:
    lambdas: tuple[float, ...]
    deltas: tuple[float, ...]
    workers: int = 1


@dataclass(frozen=True)
class OracleCheckSpec:
    n_nodes: int = 11
    lam: float = 0.1
    delta: float = 1e-2
    n_starts: int = 6
    max_starts: int = 24
    workers: int | None = None
    tau: float = 1.0
    jko_steps: int = 40
    xi_tol: float = 1e-8
    agreement_tol: float = 1e-5


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str
    grid: GridSpec
    source: SourceSpec
    params: RegParams
    seed: int = 0
    output_dir: Path = Path("out")
    schema_version: int = SCHEMA_VERSION
    tol: float = DEFAULT_TOL
    initial: InitialSpec = field(default_factory=InitialSpec)
    flow: FlowConfig = field(default_factory=FlowConfig)
    jko: JkoConfig | None = None
    basis_order: int | None = None
    sweep: SweepSpec | None = None
    oracle_check: OracleCheckSpec = field(default_factory=OracleCheckSpec)

    def with_overrides(
        self, *, mode: str | None = None, seed: int | None = None, output_dir: str | Path | None = None
    ) -> ExperimentConfig:
        config = replace(
            self,
            mode=mode if mode is not None else self.mode,
            seed=seed if seed is not None else self.seed,
            output_dir=Path(output_dir) if output_dir is not None else self.output_dir,
        )
        config.validate()
        return config

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {', '.join(MODES)}, got {self.mode!r}")
        if self.mode == "jko" and self.jko is None:
            raise ConfigError("mode 'jko' needs a [jko] table")
        if self.mode == "sweep" and self.sweep is None:
            raise ConfigError("mode 'sweep' needs a [sweep] table")
        if self.mode == "oracle-check" and self.grid.dim != 1:
            raise ConfigError("mode 'oracle-check' needs a one-dimensional grid")
        if self.initial.kind == "oracle" and self.grid.dim != 1:
            raise ConfigError("initial.kind = 'oracle' needs a one-dimensional grid")
        try:
            self.params.check_dim(self.grid.dim)
        except TransportEnergyError as exc:
            raise ConfigError(f"params: {exc}") from exc

    def build(self) -> tuple[Grid, SourceData]:
        grid = self.grid.build(self.source.support_box)
        return grid, self.source.build(grid)


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


def _positive(value: float, key: str) -> float:
    if not value > 0.0:
        raise ConfigError(f"{key} must be positive, got {value}")
    return value


def _strictly_decreasing(values: tuple[float, ...], key: str) -> tuple[float, ...]:
    if not values:
        raise ConfigError(f"{key} is empty")
    if any(v <= 0.0 for v in values):
        raise ConfigError(f"{key} entries must be positive, got {list(values)}")
    if any(b >= a for a, b in zip(values, values[1:])):
        raise ConfigError(f"{key} must be strictly decreasing, got {list(values)}")
    return values


def _parse_grid(table: _Table) -> GridSpec:
    dim = table.get("dim", int)
    if dim not in (1, 2):
        raise ConfigError(f"grid.dim must be 1 or 2, got {dim}")
    counts = table.get("n_nodes", (int, list))
    counts = tuple(counts) if isinstance(counts, list) else (counts,) * dim
    if len(counts) != dim or not all(isinstance(n, int) and not isinstance(n, bool) for n in counts):
        raise ConfigError(f"grid.n_nodes must be an integer or {dim} integers, got {counts}")
    if table.has("margin"):
        if table.has("lo") or table.has("hi"):
            raise ConfigError("grid takes either lo/hi or margin, not both")
        margin = table.get("margin", (float, str))
        if isinstance(margin, str):
            if margin != "auto":
                raise ConfigError(f"grid.margin must be a number or 'auto', got {margin!r}")
            margin = None
        else:
            _positive(margin, "grid.margin")
        table.finish()
        return GridSpec(dim, counts, margin=margin)
    lo, hi = table.number_list("lo"), table.number_list("hi")
    for key, values in (("lo", lo), ("hi", hi)):
        if len(values) == 1:
            values = values * dim
        if len(values) != dim:
            raise ConfigError(f"grid.{key} must have {dim} entries, got {list(values)}")
        if key == "lo":
            lo = values
        else:
            hi = values
    table.finish()
    return GridSpec(dim, counts, lo=lo, hi=hi)


def _parse_source(table: _Table, dim: int) -> SourceSpec:
    policy = table.get("on_nonzero_mean", str, "reject")
    if policy not in ("reject", "correct"):
        raise ConfigError(f"source.on_nonzero_mean must be 'reject' or 'correct', got {policy!r}")
    raw = table.get("pieces", list, [])
    pieces = []
    for i, item in enumerate(raw):
        piece = _Table(item, f"source.pieces[{i}]")
        lo, hi = piece.number_list("lo"), piece.number_list("hi")
        if len(lo) == 1:
            lo = lo * dim
        if len(hi) == 1:
            hi = hi * dim
        if len(lo) != dim or len(hi) != dim:
            raise ConfigError(f"source.pieces[{i}] lo/hi must have {dim} entries")
        pieces.append(SourcePiece(lo, hi, piece.get("value", float)))
        piece.finish()
    table.finish()
    return SourceSpec(tuple(pieces), policy)


def _parse_params(table: _Table) -> RegParams:
    try:
        params = RegParams(table.get("lambda", float), table.get("delta", float), table.get("p", float, 2.0))
    except TransportEnergyError as exc:
        raise ConfigError(f"params: {exc}") from exc
    table.finish()
    return params


def _parse_initial(table: _Table) -> InitialSpec:
    kind = table.get("kind", str, "constant")
    if kind not in ("constant", "oracle", "random"):
        raise ConfigError(f"initial.kind must be 'constant', 'oracle' or 'random', got {kind!r}")
    value = table.get("value", float, 0.5)
    if kind != "oracle":
        _positive(value, "initial.value")
    table.finish()
    return InitialSpec(kind, value)


def _parse_flow(table: _Table) -> FlowConfig:
    defaults = FlowConfig()
    options = {
        "dt0": table.get("dt0", float, defaults.dt0),
        "dt_control": table.get("dt_control", str, defaults.dt_control),
        "t_max": table.get("t_max", float, defaults.t_max),
        "xi_tol": table.get("xi_tol", float, defaults.xi_tol),
        "record_every": table.get("record_every", int, defaults.record_every),
        "sigma": table.get("sigma", float, defaults.sigma),
        "dt_min": table.get("dt_min", float, defaults.dt_min),
        "dt_growth": table.get("dt_growth", float, defaults.dt_growth),
        "max_steps": table.get("max_steps", int, defaults.max_steps),
        "snapshot_every": table.get("snapshot_every", int, defaults.snapshot_every),
        "dynamics": table.get("dynamics", str, defaults.dynamics),
    }
    table.finish()
    try:
        return FlowConfig(**options)
    except TransportEnergyError as exc:
        raise ConfigError(f"flow: {exc}") from exc


def _parse_jko(table: _Table) -> tuple[JkoConfig, int | None]:
    if table.has("tau_schedule"):
        if table.has("tau") or table.has("steps"):
            raise ConfigError("jko takes either tau_schedule or tau/steps, not both")
        schedule = table.number_list("tau_schedule")
    else:
        schedule = (table.get("tau", float, 0.1),) * table.get("steps", int, 50)
    inner_tol = table.get("inner_tol", float, 1e-9)
    inner_max_iter = table.get("inner_max_iter", int, 500)
    basis_order = table.get("basis_order", int, None)
    table.finish()
    try:
        return JkoConfig(schedule, inner_tol, inner_max_iter), basis_order
    except TransportEnergyError as exc:
        raise ConfigError(f"jko: {exc}") from exc


def _parse_sweep(table: _Table) -> SweepSpec:
    lambdas = _strictly_decreasing(table.number_list("lambdas"), "sweep.lambdas")
    deltas = _strictly_decreasing(table.number_list("deltas"), "sweep.deltas")
    workers = table.get("workers", int, 1)
    if workers < 1:
        raise ConfigError(f"sweep.workers must be >= 1, got {workers}")
    table.finish()
    return SweepSpec(lambdas, deltas, workers)


def _parse_oracle_check(table: _Table) -> OracleCheckSpec:
    d = OracleCheckSpec()
    check = OracleCheckSpec(
        n_nodes=table.get("n_nodes", int, d.n_nodes),
        lam=_positive(table.get("lambda", float, d.lam), "oracle_check.lambda"),
        delta=_positive(table.get("delta", float, d.delta), "oracle_check.delta"),
        n_starts=table.get("n_starts", int, d.n_starts),
        max_starts=table.get("max_starts", int, d.max_starts),
        workers=table.get("workers", int, d.workers),
        tau=_positive(table.get("tau", float, d.tau), "oracle_check.tau"),
        jko_steps=table.get("jko_steps", int, d.jko_steps),
        xi_tol=_positive(table.get("xi_tol", float, d.xi_tol), "oracle_check.xi_tol"),
        agreement_tol=_positive(table.get("agreement_tol", float, d.agreement_tol), "oracle_check.agreement_tol"),
    )
    table.finish()
    if not 3 <= check.n_nodes <= 25:
        raise ConfigError(f"oracle_check.n_nodes must lie in [3, 25], got {check.n_nodes}")
    if check.n_starts < 1 or check.max_starts < REPRODUCE_COUNT:
        raise ConfigError(
            f"oracle_check needs n_starts >= 1 and max_starts >= {REPRODUCE_COUNT}, "
            f"got {check.n_starts} and {check.max_starts}"
        )
    return check


def parse_config(data: Mapping[str, Any]) -> ExperimentConfig:
    """Validate a decoded TOML document into an :class:`ExperimentConfig`."""
    root = _Table(data, "")
    version = root.get("schema_version", int)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version}, this build reads {SCHEMA_VERSION}")
    grid = _parse_grid(root.table("grid"))
    config = ExperimentConfig(
        mode=root.get("mode", str),
        seed=root.get("seed", int, 0),
        output_dir=Path(root.get("output_dir", str, "out")),
        schema_version=version,
        grid=grid,
        source=_parse_source(root.table("source"), grid.dim),
        params=_parse_params(root.table("params")),
    )
    solver = root.table("solver", None)
    if solver is not None:
        config = replace(config, tol=_positive(solver.get("tol", float, DEFAULT_TOL), "solver.tol"))
        solver.finish()
    initial = root.table("initial", None)
    if initial is not None:
        config = replace(config, initial=_parse_initial(initial))
    flow = root.table("flow", None)
    if flow is not None:
        config = replace(config, flow=_parse_flow(flow))
    jko = root.table("jko", None)
    if jko is not None:
        jko_config, basis_order = _parse_jko(jko)
        config = replace(config, jko=jko_config, basis_order=basis_order)
    sweep = root.table("sweep", None)
    if sweep is not None:
        config = replace(config, sweep=_parse_sweep(sweep))
    oracle_check = root.table("oracle_check", None)
    if oracle_check is not None:
        config = replace(config, oracle_check=_parse_oracle_check(oracle_check))
    root.finish()
    config.validate()
    return config


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        with path.open("rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path} is not valid TOML: {exc}") from exc
    config = parse_config(data)
    logger.debug("loaded %s config from %s", config.mode, path)
    return config
