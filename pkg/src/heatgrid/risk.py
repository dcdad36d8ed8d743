"""Heat-risk surface: normalised hazard x exposure x vulnerability.

Each factor is min-max rescaled to [0, 1] over its valid cells, the risk is
their cellwise product on the intersection of the valid masks, and the
result is binned into four ordinal classes.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import models
from .errors import DegenerateChannelError, ShapeError
from .grid import GridField, atomic_write_text, format_grid
from .pipeline import SampleTensor
from .training import load_checkpoint

CATEGORIES = ("low", "moderate", "high", "very_high")
INVALID = -1
FIXED_CUTS = (0.25, 0.5, 0.75)
SCHEMES = ("fixed", "quantile")


class DegenerateLayerError(DegenerateChannelError):
    """A layer has fewer than two distinct valid values."""


def minmax(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Float64 min-max rescaling over ``values[mask]``; NaN outside the mask."""
    values = np.asarray(values, dtype=np.float64)
    valid = values[mask]
    if valid.size == 0:
        raise DegenerateLayerError("layer has no valid cells")
    lo, hi = valid.min(), valid.max()
    if not hi > lo:
        raise DegenerateLayerError(f"layer is constant ({lo}) over its valid cells; cannot rescale")
    return np.where(mask, np.clip((values - lo) / (hi - lo), 0.0, 1.0), np.nan)


def normalize_layer(g: GridField) -> GridField:
    """Min-max rescale valid cells to [0, 1]; invalid cells stay invalid."""
    return GridField(g.date, minmax(g.values, g.valid_mask), g.valid_mask, units="normalized", source=g.source)


@dataclass
class RiskLayers:
    hazard: GridField
    exposure: GridField
    vulnerability: GridField

    def __post_init__(self):
        shapes = {self.hazard.shape, self.exposure.shape, self.vulnerability.shape}
        if len(shapes) != 1:
            raise ShapeError(f"risk layers must share extents, got {sorted(shapes)}")
        for name in ("hazard", "exposure", "vulnerability"):
            g = getattr(self, name)
            v = g.values[g.valid_mask]
            if v.size and (v.min() < 0 or v.max() > 1):
                raise ValueError(f"{name} layer is not normalised to [0, 1]")

    @classmethod
    def from_raw(cls, hazard, exposure, vulnerability) -> "RiskLayers":
        return cls(normalize_layer(hazard), normalize_layer(exposure), normalize_layer(vulnerability))

    @property
    def valid_mask(self) -> np.ndarray:
        return self.hazard.valid_mask & self.exposure.valid_mask & self.vulnerability.valid_mask


@dataclass
class RiskSurface:
    risk: np.ndarray  # float32, NaN where invalid
    valid_mask: np.ndarray
    categories: np.ndarray  # int8 class index, -1 where invalid
    scheme: str
    thresholds: tuple

    @property
    def labels(self) -> np.ndarray:
        names = np.array(CATEGORIES + ("invalid",), dtype=object)
        return names[self.categories]

    def class_counts(self) -> dict:
        return {name: int(np.sum(self.categories == k)) for k, name in enumerate(CATEGORIES)}


def compose_risk(layers: RiskLayers) -> np.ndarray:
    """Cellwise H*E*V as float32, NaN wherever any factor is invalid."""
    mask = layers.valid_mask
    prod = (
        layers.hazard.values.astype(np.float64)
        * layers.exposure.values.astype(np.float64)
        * layers.vulnerability.values.astype(np.float64)
    )
    return np.where(mask, prod, np.nan).astype(np.float32)


def risk_thresholds(risk: np.ndarray, scheme: str = "fixed") -> tuple:
    if scheme == "fixed":
        return FIXED_CUTS
    if scheme == "quantile":
        valid = risk[np.isfinite(risk)].astype(np.float64)
        if valid.size == 0:
            return FIXED_CUTS
        return tuple(float(q) for q in np.quantile(valid, (0.25, 0.5, 0.75), method="inverted_cdf"))
    raise ValueError(f"classification scheme must be one of {SCHEMES}, got {scheme!r}")


def classify_risk(risk: np.ndarray, scheme: str = "fixed", thresholds=None) -> np.ndarray:
    """Ordinal class per cell, ``-1`` for NaN.

    Fixed cuts are half-open from below (``[0.25, 0.5)`` is moderate); the
    top class is closed at 1. Quantile cuts are the 25/50/75th percentiles of
    the valid values, and a value equal to a cut falls in the lower class.
    """
    risk = np.asarray(risk, dtype=np.float64)
    cuts = np.asarray(thresholds if thresholds is not None else risk_thresholds(risk, scheme))
    valid = np.isfinite(risk)
    side = "right" if scheme == "fixed" else "left"
    classes = np.searchsorted(cuts, np.where(valid, risk, 0.0), side=side)
    return np.where(valid, classes, INVALID).astype(np.int8)


def build_surface(layers: RiskLayers, scheme: str = "fixed") -> RiskSurface:
    r = compose_risk(layers)
    cuts = risk_thresholds(r, scheme)
    return RiskSurface(r, layers.valid_mask, classify_risk(r, scheme, cuts), scheme, cuts)


# --------------------------------------------------------------------------
# rendering
# --------------------------------------------------------------------------
def to_gray(risk: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """0..255 levels, rounding half up; invalid cells map to 0."""
    level = np.floor(np.where(mask, risk, 0.0).astype(np.float64) * 255 + 0.5)
    return np.clip(level, 0, 255).astype(np.uint8)


def pgm_text(gray: np.ndarray) -> str:
    h, w = gray.shape
    rows = [" ".join(str(int(v)) for v in row) for row in gray]
    return f"P2\n{w} {h}\n255\n" + "\n".join(rows) + "\n"


def parse_pgm(text: str) -> np.ndarray:
    tokens = [t for line in text.splitlines() if not line.startswith("#") for t in line.split()]
    if not tokens or tokens[0] != "P2":
        raise ValueError("not a plain PGM (P2) image")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    data = np.array([int(t) for t in tokens[4:]], dtype=np.int64)
    if data.size != w * h or data.max(initial=0) > maxval:
        raise ValueError("PGM pixel data does not match its header")
    return data.reshape(h, w)


def risk_csv(surface: RiskSurface) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("row", "col", "risk", "category"))
    labels = surface.labels
    h, wd = surface.risk.shape
    for r in range(h):
        for c in range(wd):
            ok = surface.valid_mask[r, c]
            w.writerow((r, c, repr(float(surface.risk[r, c])) if ok else "", labels[r, c]))
    return buf.getvalue()


def render_map(surface: RiskSurface, path, date=None) -> dict:
    """Write ``<path>`` (P2 PGM), ``<stem>.mask.grid`` and ``<stem>.csv``."""
    path = Path(path)
    stem = path.with_suffix("")
    mask_path = stem.with_name(stem.name + ".mask.grid")
    csv_path = stem.with_name(stem.name + ".csv")
    atomic_write_text(path, pgm_text(to_gray(surface.risk, surface.valid_mask)))
    mask = GridField(date, surface.valid_mask.astype(np.float32), np.ones_like(surface.valid_mask), units="mask")
    atomic_write_text(mask_path, format_grid(mask))
    atomic_write_text(csv_path, risk_csv(surface))
    return {"image": path, "mask": mask_path, "csv": csv_path}


# --------------------------------------------------------------------------
# hazard from a trained model
# --------------------------------------------------------------------------
def predict_kelvin(checkpoint, sample: SampleTensor) -> GridField:
    """Next-day field for one raw (physical-unit) sample, in kelvin when the
    checkpoint carries normalisation statistics."""
    params, cfg, spec, meta = load_checkpoint(checkpoint)
    x = sample.input
    if x.ndim != 4:
        raise ShapeError(f"sample input must be T x C x H x W, got {x.shape}")
    T, C = x.shape[:2]
    if C != meta["C"] or (meta.get("T") is not None and T != meta["T"]):
        raise ShapeError(f"sample has T={T}, C={C}; checkpoint expects T={meta.get('T')}, C={meta['C']}")
    units = "normalized"
    if spec is not None:
        x = spec.normalize_input(x)
    pred = models.predict(params, x[None])[0, 0]
    if spec is not None:
        pred = spec.invert_target(pred)
        units = "kelvin"
    return GridField.from_array(pred, sample.target_date, units)


def hazard_from_prediction(checkpoint, sample: SampleTensor) -> GridField:
    return normalize_layer(predict_kelvin(checkpoint, sample))
