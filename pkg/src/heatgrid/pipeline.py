"""From thermal grid files and daily forcing tables to supervised samples.

Stages, in order: load and filter scenes, align scene dates with complete
forcing records, cut fixed-length windows whose target is the next calendar
day, stack each day into a ``C x 32 x 32`` plane stack (thermal channel first,
then one constant plane per location/variable pair), split chronologically
and normalise with training-split statistics.
"""
from __future__ import annotations

import csv
import datetime as dt
import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    AlignmentError,
    CheckpointError,
    ConfigError,
    DatasetError,
    DegenerateChannelError,
    IngestionError,
)
from .grid import GRID_SIZE, GridField, atomic_write_bytes, load_grid

FORCING_VARIABLES = (
    "temperature_2m_mean",
    "temperature_2m_max",
    "temperature_2m_min",
    "dew_point_2m_mean",
    "precipitation_sum",
    "shortwave_radiation_sum",
    "relative_humidity_2m_mean",
    "cloud_cover_mean",
    "wind_direction_10m_dominant",
    "wind_speed_10m_mean",
)
# order used by the original single-location configuration
SINGLE_LOCATION_VARIABLES = (
    "temperature_2m_mean",
    "temperature_2m_max",
    "temperature_2m_min",
    "dew_point_2m_mean",
    "precipitation_sum",
    "wind_speed_10m_mean",
    "shortwave_radiation_sum",
)
FORCING_HEADER = ("date", "location_id") + FORCING_VARIABLES

NORMALIZATION_MODES = ("standard", "minmax")


# --------------------------------------------------------------------------
# forcing records
# --------------------------------------------------------------------------
@dataclass
class DailyForcing:
    """One location's meteorological summary for one day.

    ``values`` maps variable name to a float, or to ``None`` when the service
    reported no value (the missing marker).
    """

    date: dt.date
    location_id: str
    values: dict

    def is_complete(self, variables: Iterable[str] = FORCING_VARIABLES) -> bool:
        return all(self.values.get(v) is not None for v in variables)

    def check(self) -> list[str]:
        """Physical-range violations among the populated values."""
        v = self.values
        problems = []
        rh = v.get("relative_humidity_2m_mean")
        if rh is not None and not 0 <= rh <= 100:
            problems.append(f"relative_humidity_2m_mean={rh} outside [0, 100]")
        wd = v.get("wind_direction_10m_dominant")
        if wd is not None and not 0 <= wd < 360:
            problems.append(f"wind_direction_10m_dominant={wd} outside [0, 360)")
        p = v.get("precipitation_sum")
        if p is not None and p < 0:
            problems.append(f"precipitation_sum={p} negative")
        tmin, tmean, tmax = (v.get(k) for k in ("temperature_2m_min", "temperature_2m_mean", "temperature_2m_max"))
        if None not in (tmin, tmean, tmax) and not tmin <= tmean <= tmax:
            problems.append(f"temperatures not ordered min <= mean <= max ({tmin}, {tmean}, {tmax})")
        return problems


def parse_forcing_csv(text: str, path=None) -> list[DailyForcing]:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise IngestionError("empty forcing table", path, 1) from None
    if tuple(h.strip() for h in header) != FORCING_HEADER:
        raise IngestionError(f"forcing header must be {','.join(FORCING_HEADER)}", path, 1)
    records = []
    seen = set()
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(FORCING_HEADER):
            raise IngestionError(f"expected {len(FORCING_HEADER)} fields, found {len(row)}", path, lineno)
        try:
            day = dt.date.fromisoformat(row[0])
        except ValueError:
            raise IngestionError(f"bad date {row[0]!r}", path, lineno, 1) from None
        loc = row[1]
        if not loc:
            raise IngestionError("empty location_id", path, lineno, 2)
        values = {}
        for col, (name, tok) in enumerate(zip(FORCING_VARIABLES, row[2:]), start=3):
            tok = tok.strip()
            if tok == "":
                values[name] = None
                continue
            try:
                x = float(tok)
            except ValueError:
                raise IngestionError(f"unparseable {name} value {tok!r}", path, lineno, col) from None
            if not math.isfinite(x):
                raise IngestionError(f"non-finite {name} value {tok!r}", path, lineno, col)
            values[name] = x
        rec = DailyForcing(day, loc, values)
        problems = rec.check()
        if problems:
            raise IngestionError("; ".join(problems), path, lineno)
        if (day, loc) in seen:
            raise IngestionError(f"duplicate record for {day} at {loc}", path, lineno)
        seen.add((day, loc))
        records.append(rec)
    return records


def load_forcing(path) -> list[DailyForcing]:
    path = Path(path)
    return parse_forcing_csv(path.read_text(encoding="utf-8"), path)


def index_forcing(records: Iterable[DailyForcing]) -> dict:
    """``{(date, location_id): DailyForcing}``."""
    return {(r.date, r.location_id): r for r in records}


# --------------------------------------------------------------------------
# scenes, alignment and windows
# --------------------------------------------------------------------------
def filter_scene(g: GridField, max_invalid_fraction: float) -> GridField | None:
    """Return the scene with invalid cells mean-filled, or ``None`` if rejected.

    A scene is rejected when its invalid fraction exceeds the threshold or it
    has no valid cell at all.
    """
    if not 0.0 <= max_invalid_fraction <= 1.0:
        raise ConfigError(f"max_invalid_fraction must lie in [0, 1], got {max_invalid_fraction}")
    if g.n_valid == 0 or g.invalid_fraction > max_invalid_fraction:
        return None
    if g.n_valid == g.valid_mask.size:
        return g
    fill = np.float32(np.mean(g.values[g.valid_mask], dtype=np.float64))
    values = np.where(g.valid_mask, g.values, fill)
    return GridField(g.date, values, np.ones_like(g.valid_mask), g.units, source=g.source)


def align_dates(
    scenes: Sequence[GridField],
    forcing: Sequence[DailyForcing],
    locations: Sequence[str],
    variables: Sequence[str] = FORCING_VARIABLES,
) -> list[dt.date]:
    """Dates with an accepted scene and complete forcing at every location."""
    index = index_forcing(forcing)
    days = set()
    for g in scenes:
        if g is None or g.date is None:
            continue
        recs = [index.get((g.date, loc)) for loc in locations]
        if all(r is not None and r.is_complete(variables) for r in recs):
            days.add(g.date)
    return sorted(days)


@dataclass(frozen=True)
class Window:
    input_dates: tuple
    target_date: dt.date


def build_sequences(
    aligned: Sequence[dt.date],
    T: int,
    max_gap_days: int = 1,
    target_days: Iterable[dt.date] | None = None,
) -> list[Window]:
    """Every run of ``T`` successive aligned days followed by a next-day target.

    ``target_days`` restricts which aligned days may serve as targets (e.g.
    only fully valid scenes); by default any aligned day can.
    """
    if T < 1:
        raise ConfigError(f"sequence length T must be >= 1, got {T}")
    days = sorted(set(aligned))
    allowed = set(days) if target_days is None else set(target_days) & set(days)
    one = dt.timedelta(days=1)
    gap = dt.timedelta(days=max_gap_days)
    out = []
    for k in range(len(days) - T + 1):
        win = days[k:k + T]
        if any(b - a > gap for a, b in zip(win, win[1:])):
            continue
        target = win[-1] + one
        if target in allowed:
            out.append(Window(tuple(win), target))
    return out


def channel_names(locations: Sequence[str], variables: Sequence[str] = FORCING_VARIABLES) -> list[str]:
    return ["lst"] + [f"{loc}:{var}" for loc in locations for var in variables]


def assemble_channels(
    day: dt.date,
    scene: GridField,
    forcing: dict,
    locations: Sequence[str],
    variables: Sequence[str] = FORCING_VARIABLES,
) -> np.ndarray:
    """``C x H x W`` float32 stack: the scene, then one broadcast plane per
    (location, variable), location-major."""
    if not scene.valid_mask.all():
        raise AlignmentError(f"{day}: scene still has invalid cells; filter it first")
    H, W = scene.shape
    planes = np.empty((1 + len(locations) * len(variables), H, W), dtype=np.float32)
    planes[0] = scene.values
    k = 1
    for loc in locations:
        rec = forcing.get((day, loc))
        if rec is None:
            raise AlignmentError(f"{day}: no forcing record for location {loc!r}")
        for var in variables:
            v = rec.values.get(var)
            if v is None:
                raise AlignmentError(f"{day}: forcing variable {var!r} missing at {loc!r}")
            planes[k] = v
            k += 1
    return planes


@dataclass
class SampleTensor:
    input: np.ndarray  # T x C x H x W float32
    target: np.ndarray  # 1 x H x W float32
    input_dates: tuple
    target_date: dt.date

    def __post_init__(self):
        if self.target_date - self.input_dates[-1] != dt.timedelta(days=1):
            raise DatasetError(f"target {self.target_date} is not the day after {self.input_dates[-1]}")


def build_samples(
    windows: Sequence[Window],
    scenes: dict,
    forcing: dict,
    locations: Sequence[str],
    variables: Sequence[str] = FORCING_VARIABLES,
) -> list[SampleTensor]:
    """Materialise windows; ``scenes`` maps date -> filled GridField."""
    stacks: dict = {}

    def stack(day):
        if day not in stacks:
            stacks[day] = assemble_channels(day, scenes[day], forcing, locations, variables)
        return stacks[day]

    samples = []
    for w in windows:
        x = np.stack([stack(d) for d in w.input_dates])
        y = scenes[w.target_date].values[None].astype(np.float32)
        samples.append(SampleTensor(x, y, w.input_dates, w.target_date))
    return samples


def stack_samples(samples: Sequence[SampleTensor]) -> tuple[np.ndarray, np.ndarray]:
    """``(N x T x C x H x W, N x 1 x H x W)`` arrays."""
    if not samples:
        raise DatasetError("no samples to stack")
    return np.stack([s.input for s in samples]), np.stack([s.target for s in samples])


# --------------------------------------------------------------------------
# normalisation and split
# --------------------------------------------------------------------------
@dataclass
class NormalizationSpec:
    """Per-channel affine map ``(x - center) / scale``.

    Standard mode uses mean / population standard deviation, min-max mode
    uses min / (max - min). Targets share channel 0's parameters.
    """

    mode: str
    center: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.scale = np.asarray(self.scale, dtype=np.float64)
        if self.mode not in NORMALIZATION_MODES:
            raise ConfigError(f"normalization mode must be one of {NORMALIZATION_MODES}, got {self.mode!r}")
        bad = np.flatnonzero(~(self.scale > 0))
        if bad.size:
            raise DegenerateChannelError(f"channel {int(bad[0])} has zero spread", index=int(bad[0]))

    @property
    def channels(self) -> int:
        return self.center.shape[0]

    def to_dict(self) -> dict:
        return {"mode": self.mode, "center": self.center.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d) -> "NormalizationSpec":
        return cls(d["mode"], d["center"], d["scale"])

    def normalize_input(self, x: np.ndarray) -> np.ndarray:
        """``... x C x H x W`` array in physical units -> normalised float32."""
        c = self.center[:, None, None]
        s = self.scale[:, None, None]
        return ((x - c) / s).astype(np.float32)

    def normalize_target(self, y: np.ndarray) -> np.ndarray:
        return ((y - self.center[0]) / self.scale[0]).astype(np.float32)

    def invert_input(self, x: np.ndarray) -> np.ndarray:
        return (x * self.scale[:, None, None] + self.center[:, None, None]).astype(np.float32)

    def invert_target(self, y: np.ndarray) -> np.ndarray:
        return (np.asarray(y, dtype=np.float64) * self.scale[0] + self.center[0]).astype(np.float32)


def fit_normalization(samples: Sequence[SampleTensor], mode: str = "standard") -> NormalizationSpec:
    """Per-channel statistics over every day and pixel of the given samples."""
    if len(samples) < 2:
        raise DatasetError(f"need at least 2 training samples to fit normalisation, got {len(samples)}")
    if mode not in NORMALIZATION_MODES:
        raise ConfigError(f"normalization mode must be one of {NORMALIZATION_MODES}, got {mode!r}")
    x = np.stack([s.input for s in samples]).astype(np.float64)
    axes = (0, 1, 3, 4)
    if mode == "standard":
        center = x.mean(axis=axes)
        scale = x.std(axis=axes)
    else:
        center = x.min(axis=axes)
        scale = x.max(axis=axes) - center
    bad = np.flatnonzero(~(scale > 0))
    if bad.size:
        raise DegenerateChannelError(
            f"channel {int(bad[0])} is constant over the training split; cannot normalise", index=int(bad[0])
        )
    return NormalizationSpec(mode, center, scale)


def apply_normalization(spec: NormalizationSpec, sample: SampleTensor) -> SampleTensor:
    if sample.input.shape[1] != spec.channels:
        raise DatasetError(f"sample has {sample.input.shape[1]} channels, normalisation has {spec.channels}")
    return SampleTensor(
        spec.normalize_input(sample.input),
        spec.normalize_target(sample.target),
        sample.input_dates,
        sample.target_date,
    )


def split_dataset(samples: Sequence[SampleTensor], train_fraction: float = 0.8):
    """Chronological split: the earliest ``floor(n * train_fraction)`` targets train."""
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must lie strictly between 0 and 1, got {train_fraction}")
    n = len(samples)
    if n < 2:
        raise DatasetError(f"need at least 2 samples to split, got {n}")
    ordered = sorted(samples, key=lambda s: s.target_date)
    n_train = math.floor(n * train_fraction)
    if n_train == 0 or n_train == n:
        raise DatasetError(f"train_fraction {train_fraction} leaves an empty split for {n} samples")
    return ordered[:n_train], ordered[n_train:]


# --------------------------------------------------------------------------
# binary sample cache
# --------------------------------------------------------------------------
CACHE_MAGIC = b"HGDS"
CACHE_VERSION = 1
_CACHE_HEAD = struct.Struct("<4sHIHHHH")


def encode_samples(samples: Sequence[SampleTensor]) -> bytes:
    if samples:
        T, C, H, W = samples[0].input.shape
    else:
        T = C = H = W = 0
    parts = [_CACHE_HEAD.pack(CACHE_MAGIC, CACHE_VERSION, len(samples), T, C, H, W)]
    dates = struct.Struct(f"<{T + 1}i")
    for s in samples:
        if s.input.shape != (T, C, H, W) or s.target.shape != (1, H, W):
            raise DatasetError("samples in one cache must share extents")
        parts.append(dates.pack(s.target_date.toordinal(), *(d.toordinal() for d in s.input_dates)))
        parts.append(np.ascontiguousarray(s.input, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(s.target, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_samples(data: bytes, path=None) -> list[SampleTensor]:
    where = f"{path}: " if path else ""
    if len(data) < _CACHE_HEAD.size:
        raise CheckpointError(f"{where}sample cache truncated (header)")
    magic, version, n, T, C, H, W = _CACHE_HEAD.unpack_from(data, 0)
    if magic != CACHE_MAGIC:
        raise CheckpointError(f"{where}not a sample cache (magic {magic!r})")
    if version != CACHE_VERSION:
        raise CheckpointError(f"{where}unsupported sample cache version {version}")
    dates = struct.Struct(f"<{T + 1}i")
    nin, ntg = T * C * H * W, H * W
    rec = dates.size + 4 * (nin + ntg)
    off = _CACHE_HEAD.size
    if len(data) != off + n * rec:
        raise CheckpointError(f"{where}sample cache has {len(data)} bytes, expected {off + n * rec}")
    out = []
    for _ in range(n):
        ords = dates.unpack_from(data, off)
        off += dates.size
        x = np.frombuffer(data, dtype="<f4", count=nin, offset=off).reshape(T, C, H, W).astype(np.float32)
        off += 4 * nin
        y = np.frombuffer(data, dtype="<f4", count=ntg, offset=off).reshape(1, H, W).astype(np.float32)
        off += 4 * ntg
        out.append(
            SampleTensor(x, y, tuple(dt.date.fromordinal(o) for o in ords[1:]), dt.date.fromordinal(ords[0]))
        )
    return out


def write_sample_cache(samples: Sequence[SampleTensor], path) -> Path:
    path = Path(path)
    atomic_write_bytes(path, encode_samples(samples))
    return path


def read_sample_cache(path) -> list[SampleTensor]:
    path = Path(path)
    return decode_samples(path.read_bytes(), path)


# --------------------------------------------------------------------------
# dataset manifest and end-to-end driver
# --------------------------------------------------------------------------
@dataclass
class PipelineConfig:
    """Settings of one dataset build. JSON is the only accepted manifest syntax."""

    scene_dir: Path
    forcing_csv: Path
    locations: list
    variables: list = field(default_factory=lambda: list(FORCING_VARIABLES))
    T: int = 3
    max_gap_days: int = 1
    normalization: str = "standard"
    train_fraction: float = 0.8
    input_max_invalid: float = 0.1
    target_max_invalid: float = 0.0

    def __post_init__(self):
        self.scene_dir = Path(self.scene_dir)
        self.forcing_csv = Path(self.forcing_csv)
        self.locations = list(self.locations)
        self.variables = list(self.variables)
        if not self.locations:
            raise ConfigError("at least one location is required")
        if len(set(self.locations)) != len(self.locations):
            raise ConfigError(f"duplicate location ids in {self.locations}")
        unknown = [v for v in self.variables if v not in FORCING_VARIABLES]
        if unknown or not self.variables:
            raise ConfigError(f"variables must be a nonempty subset of {FORCING_VARIABLES}; unknown: {unknown}")
        if self.T < 1:
            raise ConfigError(f"T must be >= 1, got {self.T}")
        if self.max_gap_days < 1:
            raise ConfigError(f"max_gap_days must be >= 1, got {self.max_gap_days}")
        if self.normalization not in NORMALIZATION_MODES:
            raise ConfigError(f"normalization must be one of {NORMALIZATION_MODES}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")
        for name in ("input_max_invalid", "target_max_invalid"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")

    @property
    def channels(self) -> int:
        return 1 + len(self.locations) * len(self.variables)

    @classmethod
    def from_dict(cls, d: dict, base: Path | None = None) -> "PipelineConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown manifest keys {sorted(extra)}")
        for key in ("scene_dir", "forcing_csv"):
            if key not in d:
                raise ConfigError(f"manifest is missing {key!r}")
            p = Path(d[key])
            if base is not None and not p.is_absolute():
                p = base / p
            d[key] = p
        return cls(**d)


def load_manifest(path) -> PipelineConfig:
    path = Path(path)
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise IngestionError(f"manifest is not valid JSON: {exc.msg}", path, exc.lineno, exc.colno) from None
    return PipelineConfig.from_dict(d, base=path.parent)


@dataclass
class PipelineResult:
    samples: list
    train: list
    validation: list
    spec: NormalizationSpec
    channels: int
    scenes_read: int
    scenes_rejected: int
    aligned_days: int

    def summary(self) -> dict:
        return {
            "scenes_read": self.scenes_read,
            "scenes_rejected": self.scenes_rejected,
            "aligned_days": self.aligned_days,
            "valid_samples": len(self.samples),
            "channels": self.channels,
            "train_samples": len(self.train),
            "validation_samples": len(self.validation),
        }


def load_scenes(scene_dir) -> list[GridField]:
    scene_dir = Path(scene_dir)
    if not scene_dir.is_dir():
        raise IngestionError("scene directory does not exist", scene_dir)
    scenes = []
    seen = {}
    for p in sorted(scene_dir.glob("*.grid")):
        g = load_grid(p)
        if g.date is None:
            raise IngestionError("scene has no date", p, 2)
        if g.date in seen:
            raise IngestionError(f"duplicate scene date {g.date} (also in {seen[g.date]})", p, 2)
        seen[g.date] = p.name
        scenes.append(g)
    return scenes


def assemble_dataset(cfg: PipelineConfig) -> tuple[list[SampleTensor], dict]:
    """Unnormalised samples in target-date order plus ingestion counts."""
    raw = load_scenes(cfg.scene_dir)
    forcing = load_forcing(cfg.forcing_csv)
    inputs = {}
    target_ok = set()
    for g in raw:
        filled = filter_scene(g, cfg.input_max_invalid)
        if filled is not None:
            inputs[g.date] = filled
            if filter_scene(g, cfg.target_max_invalid) is not None:
                target_ok.add(g.date)
    aligned = align_dates(list(inputs.values()), forcing, cfg.locations, cfg.variables)
    windows = build_sequences(aligned, cfg.T, cfg.max_gap_days, target_days=target_ok)
    samples = build_samples(windows, inputs, index_forcing(forcing), cfg.locations, cfg.variables)
    counts = {"scenes_read": len(raw), "scenes_rejected": len(raw) - len(inputs), "aligned_days": len(aligned)}
    return samples, counts


def run_pipeline(cfg: PipelineConfig) -> PipelineResult:
    samples, counts = assemble_dataset(cfg)
    if not samples:
        raise DatasetError("no valid samples: no window of aligned days has a next-day target")
    train, val = split_dataset(samples, cfg.train_fraction)
    spec = fit_normalization(train, cfg.normalization)
    return PipelineResult(samples=samples, train=train, validation=val, spec=spec, channels=cfg.channels, **counts)
