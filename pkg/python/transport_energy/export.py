"""CSV artifacts: nodal fields, trajectories, sweep tables and residual rows.

Floats are written with ``%.17g`` so a float64 survives the round trip and
identical runs produce byte-identical files.
"""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
import pandas as pd

from .diagnostics import ResidualReport
from .errors import GridError
from .grid import Grid, ScalarField

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"
AXIS_NAMES = ("x", "y")
_HEADER_PREFIX = "# grid "


def write_frame_csv(frame: pd.DataFrame, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    logger.debug("wrote %d rows to %s", len(frame), path)
    return path


def field_frame(field: ScalarField) -> pd.DataFrame:
    grid = field.grid
    columns = {AXIS_NAMES[axis]: grid.mesh[axis].ravel() for axis in range(grid.dim)}
    columns["value"] = field.flat
    return pd.DataFrame(columns)


def write_field_csv(field: ScalarField, path: str | Path) -> Path:
    """Write one nodal field, C order, after a ``# grid ...`` metadata line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        fh.write(_HEADER_PREFIX + field.grid.describe() + "\n")
        field_frame(field).to_csv(fh, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path


def _parse_grid_header(line: str) -> Grid:
    if not line.startswith(_HEADER_PREFIX):
        raise GridError(f"field CSV must start with {_HEADER_PREFIX.strip()!r}, got {line[:40]!r}")
    items = dict(token.split("=", 1) for token in line[len(_HEADER_PREFIX):].split())
    try:
        dim = int(items["dim"])
        lo = tuple(float(v) for v in items["lo"].split(","))
        hi = tuple(float(v) for v in items["hi"].split(","))
        n_nodes = tuple(int(v) for v in items["n_nodes"].split(","))
    except (KeyError, ValueError) as exc:
        raise GridError(f"malformed grid header {line.strip()!r}") from exc
    return Grid(dim, lo, hi, n_nodes)


def read_field_csv(path: str | Path) -> ScalarField:
    path = Path(path)
    with path.open() as fh:
        grid = _parse_grid_header(fh.readline().strip())
        frame = pd.read_csv(fh, float_precision="round_trip")
    if len(frame) != grid.size:
        raise GridError(f"{path} has {len(frame)} rows, its grid has {grid.size} nodes")
    return ScalarField(grid, frame["value"].to_numpy(dtype=np.float64))


def append_residual_csv(report: ResidualReport, path: str | Path, **labels: object) -> Path:
    """Append one residual row, writing the header when the file is new."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    exists = path.exists() and path.stat().st_size > 0
    report.to_frame(**labels).to_csv(
        path, mode="a", header=not exists, index=False, float_format=FLOAT_FORMAT, lineterminator="\n"
    )
    return path
