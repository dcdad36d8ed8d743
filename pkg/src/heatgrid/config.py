"""Run configuration: one JSON file plus ``--set section.key=value`` overrides.

Layout (every section optional except where a command needs it)::

    {
      "paths": {"scene_dir": "...", "forcing_csv": "...", "cache_dir": "...", "output_dir": "runs"},
      "locations": [{"location_id": "center", "latitude": 43.86, "longitude": 18.41}, ...],
      "fetch": {"start_date": "2010-01-01", "end_date": "2025-12-31"},
      "pipeline": {"T": 3, "max_gap_days": 1, "normalization": "standard", "train_fraction": 0.8, ...},
      "train": {"architecture": "convlstm", "hidden_dim": 32, "learning_rate": 0.001, ...},
      "risk": {"scheme": "fixed", "exposure": "...", "vulnerability": "...", "date": "..."}
    }

Relative paths resolve against the directory holding the config file.
"""
from __future__ import annotations

import copy
import datetime as dt
import hashlib
import json
import os
from dataclasses import asdict, fields
from pathlib import Path

from .errors import ConfigError, IngestionError
from .pipeline import FORCING_VARIABLES, PipelineConfig
from .training import TrainConfig

SECTIONS = ("paths", "locations", "fetch", "pipeline", "train", "risk")
PATH_KEYS = ("scene_dir", "forcing_csv", "cache_dir", "output_dir")
PIPELINE_DEFAULTS = {
    "T": 3,
    "max_gap_days": 1,
    "normalization": "standard",
    "train_fraction": 0.8,
    "input_max_invalid": 0.1,
    "target_max_invalid": 0.0,
    "variables": list(FORCING_VARIABLES),
}
RISK_DEFAULTS = {"scheme": "fixed", "exposure": None, "vulnerability": None, "date": None}
TRAIN_DEFAULTS = asdict(TrainConfig())


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(doc: dict, assignment: str) -> None:
    """``a.b=value`` sets ``doc["a"]["b"]``; the value is JSON when it parses."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, raw = assignment.split("=", 1)
    parts = [p for p in key.strip().split(".") if p]
    if not parts or parts[0] not in SECTIONS:
        raise ConfigError(f"override key {key!r} must start with one of {SECTIONS}")
    node = doc
    for p in parts[:-1]:
        child = node.setdefault(p, {})
        if not isinstance(child, dict):
            raise ConfigError(f"override {key!r}: {p!r} is not a section")
        node = child
    node[parts[-1]] = _parse_value(raw)


class RunConfig:
    """Resolved configuration with defaults filled in."""

    def __init__(self, doc: dict, base: Path):
        unknown = set(doc) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
        self.base = Path(base)
        raw_paths = dict(doc.get("paths") or {})
        bad = set(raw_paths) - set(PATH_KEYS)
        if bad:
            raise ConfigError(f"unknown paths {sorted(bad)}")
        self.paths = {k: self._resolve(raw_paths.get(k)) for k in PATH_KEYS}
        if self.paths["output_dir"] is None:
            self.paths["output_dir"] = self._resolve("runs")
        self.locations = list(doc.get("locations") or [])
        self.fetch = dict(doc.get("fetch") or {})
        self.pipeline = self._merge("pipeline", PIPELINE_DEFAULTS, doc.get("pipeline"))
        self.train_section = self._merge("train", TRAIN_DEFAULTS, doc.get("train"))
        self.risk = self._merge("risk", RISK_DEFAULTS, doc.get("risk"))
        for key in ("exposure", "vulnerability"):
            self.risk[key] = self._resolve(self.risk[key])
        try:
            self.train = TrainConfig(**self.train_section)
        except TypeError as exc:
            raise ConfigError(f"train section: {exc}") from None

    def _resolve(self, p):
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() else self.base / p

    @staticmethod
    def _merge(name, defaults, given):
        given = dict(given or {})
        extra = set(given) - set(defaults)
        if extra:
            raise ConfigError(f"unknown {name} keys {sorted(extra)}")
        merged = copy.deepcopy(defaults)
        merged.update(given)
        return merged

    # -- views used by commands -------------------------------------------
    @property
    def location_ids(self) -> list[str]:
        ids = []
        for loc in self.locations:
            if isinstance(loc, str):
                ids.append(loc)
            elif isinstance(loc, dict) and "location_id" in loc:
                ids.append(str(loc["location_id"]))
            else:
                raise ConfigError(f"location entry {loc!r} needs a location_id")
        return ids

    def require_path(self, key: str, must_exist: bool = True) -> Path:
        p = self.paths.get(key)
        if p is None:
            raise ConfigError(f"paths.{key} is not set")
        if must_exist and not p.exists():
            raise ConfigError(f"paths.{key}: {p} does not exist")
        return p

    def pipeline_config(self) -> PipelineConfig:
        scene_dir = self.require_path("scene_dir")
        forcing = self.require_path("forcing_csv")
        return PipelineConfig(scene_dir=scene_dir, forcing_csv=forcing, locations=self.location_ids, **self.pipeline)

    def cache_dir(self) -> Path:
        env = os.environ.get("HEATGRID_CACHE_DIR")
        if env:
            return Path(env)
        return self.paths["cache_dir"] or self._resolve("cache")

    def fetch_range(self) -> tuple[dt.date, dt.date]:
        try:
            return dt.date.fromisoformat(self.fetch["start_date"]), dt.date.fromisoformat(self.fetch["end_date"])
        except KeyError as exc:
            raise ConfigError(f"fetch.{exc.args[0]} is required") from None
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"fetch dates must be YYYY-MM-DD ({exc})") from None

    def to_dict(self) -> dict:
        return {
            "paths": {k: (str(v) if v is not None else None) for k, v in self.paths.items()},
            "locations": self.locations,
            "fetch": self.fetch,
            "pipeline": self.pipeline,
            "train": asdict(self.train),
            "risk": {k: (str(v) if isinstance(v, Path) else v) for k, v in self.risk.items()},
        }

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()[:10]


def load_run_config(path, overrides=()) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise IngestionError(f"config is not valid JSON: {exc.msg}", path, exc.lineno, exc.colno) from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    for assignment in overrides:
        apply_override(doc, assignment)
    return RunConfig(doc, path.parent)


def train_field_names() -> list[str]:
    return [f.name for f in fields(TrainConfig)]
