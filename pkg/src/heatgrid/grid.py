"""Single-band 32x32 rasters and the ``.grid`` text format.

A grid file looks like::

    GRID 32 32 kelvin
    DATE 2022-07-14
    301.25 300.9 NA ...
    ...

with one line per raster row and ``NA`` marking invalid cells.
"""
from __future__ import annotations

import datetime as dt
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import IngestionError, ShapeError

GRID_SIZE = 32
SENTINEL = "NA"


@dataclass
class GridField:
    """A raster with a validity mask. Invalid cells hold NaN in ``values``."""

    date: dt.date | None
    values: np.ndarray
    valid_mask: np.ndarray
    units: str = "kelvin"
    source: str | None = field(default=None, compare=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        self.valid_mask = np.asarray(self.valid_mask, dtype=bool)
        if self.values.ndim != 2 or self.values.shape != self.valid_mask.shape:
            raise ShapeError(f"GridField: values {self.values.shape} and mask {self.valid_mask.shape} must be equal 2-D")
        self.values = np.where(self.valid_mask, self.values, np.float32(np.nan))

    @classmethod
    def from_array(cls, values, date=None, units="kelvin"):
        values = np.asarray(values, dtype=np.float32)
        return cls(date, values, np.isfinite(values), units)

    @property
    def shape(self):
        return self.values.shape

    @property
    def n_valid(self) -> int:
        return int(self.valid_mask.sum())

    @property
    def invalid_fraction(self) -> float:
        return 1.0 - self.n_valid / self.valid_mask.size


def _parse_date(token, path, line):
    try:
        return dt.date.fromisoformat(token)
    except ValueError:
        raise IngestionError(f"bad date {token!r}, expected YYYY-MM-DD", path, line) from None


def parse_grid(text: str, path=None, expected=(GRID_SIZE, GRID_SIZE)) -> GridField:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise IngestionError("empty file", path, 1)
    head = lines[0].split()
    if len(head) != 4 or head[0] != "GRID":
        raise IngestionError("header must be 'GRID <height> <width> <units>'", path, 1)
    try:
        height, width = int(head[1]), int(head[2])
    except ValueError:
        raise IngestionError(f"non-integer extents {head[1]!r} {head[2]!r}", path, 1) from None
    if expected is not None and (height, width) != tuple(expected):
        raise IngestionError(
            f"grid declares {height}x{width}, expected {expected[0]}x{expected[1]}", path, 1
        )
    if len(lines) < 2:
        raise IngestionError("missing DATE line", path, 2)
    dline = lines[1].split()
    if len(dline) != 2 or dline[0] != "DATE":
        raise IngestionError("second line must be 'DATE <YYYY-MM-DD>'", path, 2)
    date = None if dline[1] == SENTINEL else _parse_date(dline[1], path, 2)
    rows = lines[2:]
    if len(rows) != height:
        raise IngestionError(f"expected {height} data rows, found {len(rows)}", path, 2 + min(len(rows), height) + 1)
    values = np.empty((height, width), dtype=np.float32)
    mask = np.ones((height, width), dtype=bool)
    for r, row in enumerate(rows):
        tokens = row.split()
        lineno = r + 3
        if len(tokens) != width:
            raise IngestionError(f"expected {width} values, found {len(tokens)}", path, lineno)
        for c, tok in enumerate(tokens):
            if tok == SENTINEL:
                mask[r, c] = False
                values[r, c] = np.nan
                continue
            try:
                v = float(tok)
            except ValueError:
                raise IngestionError(f"unparseable value {tok!r}", path, lineno, c + 1) from None
            if not np.isfinite(v):
                raise IngestionError(f"non-finite value {tok!r}; use {SENTINEL} for invalid cells", path, lineno, c + 1)
            values[r, c] = v
    return GridField(date, values, mask, head[3], source=str(path) if path else None)


def load_grid(path, expected=(GRID_SIZE, GRID_SIZE)) -> GridField:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise IngestionError(f"not UTF-8 text ({exc.reason})", path) from None
    return parse_grid(text, path, expected)


def format_grid(g: GridField) -> str:
    h, w = g.shape
    out = [f"GRID {h} {w} {g.units}", f"DATE {g.date.isoformat() if g.date else SENTINEL}"]
    for r in range(h):
        out.append(
            " ".join(
                _fmt32(g.values[r, c]) if g.valid_mask[r, c] else SENTINEL for c in range(w)
            )
        )
    return "\n".join(out) + "\n"


def _fmt32(v) -> str:
    # shortest text that parses back to the same float32
    return np.format_float_positional(np.float32(v), unique=True, trim="-")


def write_grid(g: GridField, path) -> Path:
    path = Path(path)
    atomic_write_text(path, format_grid(g))
    return path


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))
