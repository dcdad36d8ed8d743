"""Daily archive downloads from Open-Meteo with an on-disk response cache.

Every response body is stored verbatim under ``<cache>/<sha256(url)>.json``
before it is parsed, and ``<cache>/index.tsv`` maps keys back to URLs. A
cached request never touches the network, so a populated cache (or a
directory of recorded fixtures) replays a fetch exactly.
"""
from __future__ import annotations

import csv
import datetime as dt
import hashlib
import io
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence
from urllib.parse import urlencode

import requests

from .errors import ConfigError, OfflineError, ResponseParseError, SchemaError, TransportError
from .grid import atomic_write_bytes, atomic_write_text
from .pipeline import FORCING_HEADER, FORCING_VARIABLES, DailyForcing

log = logging.getLogger(__name__)

ARCHIVE_URL = "https://archive-api.open-meteo.com/v1/archive"
MIN_INTERVAL = 1.0  # seconds between uncached requests
RETRY_BACKOFF = 2.0
TIMEOUT = 30.0


@dataclass(frozen=True)
class LocationConfig:
    location_id: str
    latitude: float
    longitude: float

    def __post_init__(self):
        if not self.location_id or any(ch in self.location_id for ch in ",\n\t"):
            raise ConfigError(f"location_id must be a nonempty name without commas or tabs, got {self.location_id!r}")
        if not -90.0 <= self.latitude <= 90.0:
            raise ConfigError(f"{self.location_id}: latitude {self.latitude} outside [-90, 90]")
        if not -180.0 <= self.longitude <= 180.0:
            raise ConfigError(f"{self.location_id}: longitude {self.longitude} outside [-180, 180]")

    @classmethod
    def from_dict(cls, d: dict) -> "LocationConfig":
        missing = [k for k in ("location_id", "latitude", "longitude") if k not in d]
        if missing:
            raise ConfigError(f"location entry {d!r} lacks {missing}; coordinates have no defaults")
        return cls(str(d["location_id"]), float(d["latitude"]), float(d["longitude"]))


def check_unique(locations: Sequence[LocationConfig]) -> None:
    ids = [loc.location_id for loc in locations]
    dupes = sorted({i for i in ids if ids.count(i) > 1})
    if dupes:
        raise ConfigError(f"duplicate location ids {dupes}")


@dataclass(frozen=True)
class FetchJob:
    location: LocationConfig
    start_date: dt.date
    end_date: dt.date
    variables: tuple = FORCING_VARIABLES

    def __post_init__(self):
        object.__setattr__(self, "variables", tuple(self.variables))
        if self.start_date > self.end_date:
            raise ConfigError(f"start_date {self.start_date} is after end_date {self.end_date}")
        if not self.variables:
            raise ConfigError("at least one daily variable is required")
        unknown = [v for v in self.variables if v not in FORCING_VARIABLES]
        if unknown:
            raise ConfigError(f"unsupported daily variables {unknown}")

    @property
    def days(self) -> int:
        return (self.end_date - self.start_date).days + 1

    def url(self) -> str:
        query = {
            "latitude": _coord(self.location.latitude),
            "longitude": _coord(self.location.longitude),
            "start_date": self.start_date.isoformat(),
            "end_date": self.end_date.isoformat(),
            "daily": ",".join(self.variables),
            "timezone": "UTC",
        }
        return f"{ARCHIVE_URL}?{urlencode(query, safe=',')}"


def _coord(x: float) -> str:
    return repr(float(x))


def cache_key(url: str) -> str:
    return hashlib.sha256(url.encode("utf-8")).hexdigest()


def default_cache_dir() -> Path:
    return Path(os.environ.get("HEATGRID_CACHE_DIR", "cache"))


def offline_from_env() -> bool:
    return os.environ.get("HEATGRID_OFFLINE", "") not in ("", "0")


# --------------------------------------------------------------------------
# response parsing
# --------------------------------------------------------------------------
def parse_daily(body: bytes, job: FetchJob) -> list[DailyForcing]:
    """One record per reported day; JSON ``null`` becomes the missing marker."""
    try:
        doc = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ResponseParseError(f"{job.location.location_id}: response is not valid JSON ({exc})") from None
    if not isinstance(doc, dict) or not isinstance(doc.get("daily"), dict):
        raise SchemaError(f"{job.location.location_id}: response has no 'daily' object", "daily")
    daily = doc["daily"]
    times = daily.get("time")
    if not isinstance(times, list):
        raise SchemaError(f"{job.location.location_id}: response has no daily 'time' array", "time")
    columns = {}
    for var in job.variables:
        col = daily.get(var)
        if not isinstance(col, list):
            raise SchemaError(f"{job.location.location_id}: variable {var!r} absent from response", var)
        if len(col) != len(times):
            raise SchemaError(f"{job.location.location_id}: {var!r} has {len(col)} values for {len(times)} days", var)
        columns[var] = col
    records = []
    for k, stamp in enumerate(times):
        try:
            day = dt.date.fromisoformat(stamp)
        except (TypeError, ValueError):
            raise ResponseParseError(f"{job.location.location_id}: bad date {stamp!r} at index {k}") from None
        values = {}
        for var in job.variables:
            v = columns[var][k]
            if v is None:
                values[var] = None
            elif isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v):
                values[var] = float(v)
            else:
                raise ResponseParseError(f"{job.location.location_id}: {var} on {stamp} is {v!r}")
        records.append(DailyForcing(day, job.location.location_id, values))
    return records


# --------------------------------------------------------------------------
# cache and client
# --------------------------------------------------------------------------
def install_response(cache_dir, url: str, body: bytes) -> Path:
    """Store a raw response for ``url`` and record it in ``index.tsv``."""
    cache_dir = Path(cache_dir)
    path = cache_dir / f"{cache_key(url)}.json"
    atomic_write_bytes(path, body)
    index = cache_dir / "index.tsv"
    key = cache_key(url)
    lines = index.read_text(encoding="utf-8").splitlines() if index.exists() else []
    if not any(line.split("\t", 1)[0] == key for line in lines):
        lines.append(f"{key}\t{url}")
        atomic_write_text(index, "\n".join(sorted(lines)) + "\n")
    return path


@dataclass
class ArchiveClient:
    """Cached, rate-limited reader of the daily archive endpoint.

    ``network_requests`` counts HTTP attempts made by this client.
    """

    cache_dir: Path = field(default_factory=default_cache_dir)
    offline: bool = field(default_factory=offline_from_env)
    session: requests.Session | None = None
    min_interval: float = MIN_INTERVAL
    backoff: float = RETRY_BACKOFF
    sleep: object = time.sleep
    clock: object = time.monotonic
    network_requests: int = 0
    cache_hits: int = 0
    _last_request: float | None = None

    def __post_init__(self):
        self.cache_dir = Path(self.cache_dir)

    def cache_path(self, url: str) -> Path:
        return self.cache_dir / f"{cache_key(url)}.json"

    def fetch_daily(self, job: FetchJob) -> list[DailyForcing]:
        return parse_daily(self.get(job.url()), job)

    def fetch_all(self, jobs: Iterable[FetchJob]) -> list[DailyForcing]:
        out = []
        for job in jobs:
            out.extend(self.fetch_daily(job))
        return out

    def get(self, url: str) -> bytes:
        path = self.cache_path(url)
        if path.exists():
            self.cache_hits += 1
            return path.read_bytes()
        if self.offline:
            raise OfflineError(f"offline mode: no cached response for {url}")
        body = self._download(url)
        install_response(self.cache_dir, url, body)
        return body

    def _throttle(self) -> None:
        if self._last_request is not None:
            wait = self.min_interval - (self.clock() - self._last_request)
            if wait > 0:
                self.sleep(wait)
        self._last_request = self.clock()

    def _download(self, url: str) -> bytes:
        session = self.session or requests.Session()
        for attempt in (1, 2):
            self._throttle()
            self.network_requests += 1
            log.info("GET %s (attempt %d)", url, attempt)
            try:
                resp = session.get(url, timeout=TIMEOUT)
            except requests.RequestException as exc:
                if attempt == 2:
                    raise TransportError(f"request failed: {exc}") from None
                self.sleep(self.backoff)
                continue
            if resp.status_code == 200:
                return resp.content
            if attempt == 1 and (resp.status_code == 429 or resp.status_code >= 500):
                self.sleep(self.backoff)
                continue
            raise TransportError(f"HTTP {resp.status_code} from archive service for {url}", resp.status_code)
        raise AssertionError("unreachable")


# --------------------------------------------------------------------------
# forcing table export
# --------------------------------------------------------------------------
def _cell(v) -> str:
    return "" if v is None else repr(float(v))


def forcing_csv(records: Sequence[DailyForcing]) -> str:
    """Forcing table text, rows sorted by (date, location_id)."""
    if not records:
        raise ConfigError("no forcing records to export")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FORCING_HEADER)
    for rec in sorted(records, key=lambda r: (r.date, r.location_id)):
        w.writerow([rec.date.isoformat(), rec.location_id] + [_cell(rec.values.get(v)) for v in FORCING_VARIABLES])
    return buf.getvalue()


def export_forcing_csv(records: Sequence[DailyForcing], path) -> Path:
    path = Path(path)
    atomic_write_text(path, forcing_csv(records))
    return path
