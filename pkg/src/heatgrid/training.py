"""Hybrid-loss training with Adam, evaluation metrics and checkpoints."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import models
from .errors import CheckpointError, ConfigError, DatasetError, NonFiniteError, ShapeError
from .grid import atomic_write_bytes, atomic_write_text
from .pipeline import NormalizationSpec, SampleTensor, stack_samples
from .tensor import Tensor, abs_all, mean_all, scalar_mul, square_all, sub


@dataclass
class TrainConfig:
    architecture: str = "convlstm"
    hidden_dim: int = 32
    learning_rate: float = 0.001
    batch_size: int = 16
    epochs: int = 20
    alpha: float = 0.7
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    forget_bias: float = 0.0

    def __post_init__(self):
        if self.architecture not in models.ARCHITECTURES:
            raise ConfigError(f"architecture must be one of {models.ARCHITECTURES}, got {self.architecture!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1 or self.hidden_dim < 1:
            raise ConfigError("batch_size and hidden_dim must be positive")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.epsilon > 0):
            raise ConfigError("Adam constants need 0 <= beta1, beta2 < 1 and epsilon > 0")


def derive_seed(seed: int, name: str) -> int:
    """Independent named sub-seed (``"init"``, ``"shuffle"``, ...) of a run seed."""
    digest = hashlib.sha256(f"{int(seed)}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


# --------------------------------------------------------------------------
# loss and optimiser
# --------------------------------------------------------------------------
def hybrid_loss(pred: Tensor, target: Tensor, alpha: float = 0.7) -> Tensor:
    """``alpha * mean|pred - target| + (1 - alpha) * mean (pred - target)^2``."""
    if pred.shape != target.shape:
        raise ShapeError(f"hybrid_loss: prediction {pred.shape} and target {target.shape} differ")
    r = sub(pred, target)
    l1 = mean_all(abs_all(r))
    l2 = mean_all(square_all(r))
    if alpha == 1.0:
        return l1
    if alpha == 0.0:
        return l2
    return scalar_mul(l1, alpha) + scalar_mul(l2, 1.0 - alpha)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    """Bias-corrected Adam update applied in place to ``params[name].data``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.isfinite(g).sum())
            raise NonFiniteError(f"gradient of {name} has {bad} non-finite entries at step {state.step + 1}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient of {name} has shape {g.shape}, parameter {p.shape}")
        dtype = p.dtype.type
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= dtype(beta1)
        m += dtype(1.0 - beta1) * g
        v *= dtype(beta2)
        v += dtype(1.0 - beta2) * (g * g)
        mhat = m / dtype(c1)
        vhat = v / dtype(c2)
        p.data -= dtype(lr) * mhat / (np.sqrt(vhat) + dtype(eps))
    return state


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------
class MetricError(DatasetError):
    pass


def regression_metrics(pred, ref) -> tuple[float, float, float]:
    """Global MAE, RMSE and R^2 over all elements (float64 accumulation)."""
    pred = np.asarray(pred, dtype=np.float64).ravel()
    ref = np.asarray(ref, dtype=np.float64).ravel()
    if pred.shape != ref.shape or pred.size == 0:
        raise ShapeError(f"metrics need equal nonempty arrays, got {pred.shape} and {ref.shape}")
    r = pred - ref
    mae = float(np.mean(np.abs(r)))
    sse = float(np.sum(r * r))
    rmse = math.sqrt(sse / r.size)
    sst = float(np.sum((ref - ref.mean()) ** 2))
    if sst == 0.0:
        raise MetricError("R^2 is undefined: reference values have zero variance")
    return mae, rmse, 1.0 - sse / sst


@dataclass
class EvalReport:
    mae: float
    rmse: float
    r2: float
    per_sample_mae: list
    per_sample_rmse: list
    units: str = "normalized"
    target_dates: list = field(default_factory=list)
    kelvin: "EvalReport | None" = None

    def to_dict(self) -> dict:
        d = {"units": self.units, "mae": self.mae, "rmse": self.rmse, "r2": self.r2, "samples": len(self.per_sample_mae)}
        if self.kelvin is not None:
            d["kelvin"] = self.kelvin.to_dict()
        return d


def _report(pred, ref, units, dates) -> EvalReport:
    mae, rmse, r2 = regression_metrics(pred, ref)
    diff = pred.astype(np.float64) - ref.astype(np.float64)
    flat = diff.reshape(len(diff), -1)
    return EvalReport(
        mae,
        rmse,
        r2,
        np.mean(np.abs(flat), axis=1).tolist(),
        np.sqrt(np.mean(flat * flat, axis=1)).tolist(),
        units,
        list(dates),
    )


def _as_arrays(samples):
    if isinstance(samples, tuple) and len(samples) == 2 and isinstance(samples[0], np.ndarray):
        return samples[0], samples[1], []
    x, y = stack_samples(samples)
    return x, y, [s.target_date for s in samples]


def evaluate(params, samples, norm_spec: NormalizationSpec | None = None, batch_size: int = 16) -> EvalReport:
    """Metrics in normalised units; a kelvin-space copy is attached when
    ``norm_spec`` is given."""
    x, y, dates = _as_arrays(samples)
    if len(x) == 0:
        raise DatasetError("evaluate needs at least one sample")
    pred = models.predict(params, x, batch_size=batch_size)
    report = _report(pred, y, "normalized", dates)
    if norm_spec is not None:
        report.kelvin = _report(norm_spec.invert_target(pred), norm_spec.invert_target(y), "kelvin", dates)
    return report


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------
@dataclass
class TrainResult:
    params: object
    history: list
    best_params: object
    best_epoch: int | None


def _copy_params(params):
    return models.params_from_named(
        params.arch, {k: Tensor(t.data, requires_grad=True, dtype=t.dtype) for k, t in params.named_tensors().items()}
    )


def train(train_samples, val_samples, cfg: TrainConfig, out_dir=None, norm_spec=None, params=None, log=None) -> TrainResult:
    """Mini-batch Adam on the hybrid loss.

    Each epoch visits the training set in a freshly shuffled order (the last
    partial batch is kept). History rows carry the mean training loss and
    validation metrics; the best-validation-loss parameters are retained.
    With ``out_dir`` set, ``final.hgck``, ``best.hgck`` and ``history.csv``
    are written there.
    """
    x, y, _ = _as_arrays(train_samples)
    if len(x) == 0:
        raise DatasetError("training set is empty")
    have_val = val_samples is not None and len(val_samples) > 0
    if have_val:
        vx, vy, _ = _as_arrays(val_samples)
    N, T, C = x.shape[:3]
    if params is None:
        params = models.init_params(
            cfg.architecture, T, C, cfg.hidden_dim, derive_seed(cfg.seed, "init"), forget_bias=cfg.forget_bias
        )
    dtype = params.tensors()[0].dtype
    named = params.named_tensors()
    rng = np.random.default_rng(derive_seed(cfg.seed, "shuffle"))
    state = AdamState()
    history = []
    best, best_epoch, best_score = _copy_params(params), None, math.inf

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(N)
        total = 0.0
        for bi, start in enumerate(range(0, N, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            params.zero_grad()
            pred = models.forward(params, Tensor(x[idx], dtype=dtype))
            loss = hybrid_loss(pred, Tensor(y[idx], dtype=dtype), cfg.alpha)
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteError(f"non-finite loss {value} at epoch {epoch}, batch {bi}")
            loss.backward()
            adam_step(
                named, {k: t.grad for k, t in named.items()}, state,
                cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon,
            )
            total += value * len(idx)
        row = {"epoch": epoch, "train_loss": total / N}
        if have_val:
            pred = models.predict(params, vx, batch_size=cfg.batch_size)
            mae, rmse, r2 = regression_metrics(pred, vy)
            r = pred.astype(np.float64) - vy
            row.update(
                val_mae=mae, val_rmse=rmse, val_r2=r2,
                val_loss=cfg.alpha * mae + (1 - cfg.alpha) * float(np.mean(r * r)),
            )
            score = row["val_loss"]
        else:
            row.update(val_mae=math.nan, val_rmse=math.nan, val_r2=math.nan, val_loss=math.nan)
            score = row["train_loss"]
        history.append(row)
        if score < best_score:
            best, best_epoch, best_score = _copy_params(params), epoch, score
        if log is not None:
            log(row)

    if out_dir is not None:
        out_dir = Path(out_dir)
        meta = {"T": T, "C": C}
        save_checkpoint(out_dir / "final.hgck", params, cfg, norm_spec, meta)
        save_checkpoint(out_dir / "best.hgck", best, cfg, norm_spec, meta)
        write_history_csv(out_dir / "history.csv", history)
    return TrainResult(params, history, best, best_epoch)


# --------------------------------------------------------------------------
# CSV artefacts
# --------------------------------------------------------------------------
HISTORY_COLUMNS = ("epoch", "train_loss", "val_mae", "val_rmse", "val_r2")


def _num(v) -> str:
    return repr(float(v)) if not isinstance(v, int) else str(v)


def history_csv(history: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_COLUMNS)
    for row in history:
        w.writerow([_num(row[c]) for c in HISTORY_COLUMNS])
    return buf.getvalue()


def write_history_csv(path, history) -> None:
    atomic_write_text(path, history_csv(history))


def per_sample_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("sample_index", "target_date", "mae", "rmse"))
    dates = report.target_dates or [None] * len(report.per_sample_mae)
    for i, (d, mae, rmse) in enumerate(zip(dates, report.per_sample_mae, report.per_sample_rmse)):
        w.writerow((i, d.isoformat() if d else "", repr(mae), repr(rmse)))
    return buf.getvalue()


def write_per_sample_csv(path, report: EvalReport) -> None:
    atomic_write_text(path, per_sample_csv(report))


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------
CKPT_MAGIC = b"HGCK"
CKPT_VERSION = 1


def _short_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<B", len(b)) + b


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.off, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise CheckpointError(f"{self.path}: checkpoint truncated at byte {self.off}")
        b = self.data[self.off:self.off + n]
        self.off += n
        return b

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def short_str(self) -> str:
        (n,) = self.unpack("<B")
        return self.take(n).decode("utf-8")


def encode_checkpoint(params, cfg: TrainConfig, norm_spec: NormalizationSpec | None, meta: dict) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<H", CKPT_VERSION), _short_str(params.arch)]
    parts.append(_short_str(models.GATE_ORDER if params.arch == "convlstm" else "none"))
    if params.arch == "cnn":
        meta = {**meta, "widths": [params.conv1_w.shape[0], params.conv2_w.shape[0], params.conv3_w.shape[0]]}
    config = json.dumps({"train": asdict(cfg), "meta": meta}, sort_keys=True).encode("utf-8")
    parts += [struct.pack("<I", len(config)), config]
    if norm_spec is None:
        parts.append(_short_str("") + struct.pack("<I", 0))
    else:
        parts.append(_short_str(norm_spec.mode) + struct.pack("<I", norm_spec.channels))
        parts.append(norm_spec.center.astype("<f8").tobytes())
        parts.append(norm_spec.scale.astype("<f8").tobytes())
    named = params.named_tensors()
    parts.append(struct.pack("<I", len(named)))
    for name, t in named.items():
        parts.append(_short_str(name) + struct.pack("<B", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(data: bytes, path=None, arch: str | None = None):
    r = _Reader(data, path)
    if r.take(4) != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a heatgrid checkpoint (bad magic)")
    (version,) = r.unpack("<H")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    found = r.short_str()
    if arch is not None and found != arch:
        raise CheckpointError(f"{path}: architecture mismatch: checkpoint holds {found!r}, expected {arch!r}")
    gate_order = r.short_str()
    if found == "convlstm" and gate_order != models.GATE_ORDER:
        raise CheckpointError(f"{path}: gate order {gate_order!r} not supported (expected {models.GATE_ORDER!r})")
    (n,) = r.unpack("<I")
    try:
        block = json.loads(r.take(n).decode("utf-8"))
        cfg = TrainConfig(**block["train"])
        meta = block["meta"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: corrupt config block ({exc})") from None
    mode = r.short_str()
    (nc,) = r.unpack("<I")
    spec = None
    if mode:
        center = np.frombuffer(r.take(8 * nc), dtype="<f8")
        scale = np.frombuffer(r.take(8 * nc), dtype="<f8")
        spec = NormalizationSpec(mode, center.copy(), scale.copy())
    (count,) = r.unpack("<I")
    named = {}
    for _ in range(count):
        name = r.short_str()
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I")
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape)
        named[name] = Tensor(arr.astype(np.float32), requires_grad=True, dtype=np.float32)
    if r.off != len(data):
        raise CheckpointError(f"{path}: {len(data) - r.off} trailing bytes")
    try:
        extra = {"cnn_widths": tuple(meta["widths"])} if found == "cnn" else {}
        expected = models.init_params(found, meta.get("T") or 1, meta["C"], cfg.hidden_dim, 0, **extra).named_tensors()
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: cannot rebuild {found} layout from header ({exc})") from None
    if set(expected) != set(named):
        raise CheckpointError(f"{path}: tensor table {sorted(named)} does not match {found} layout")
    for k, t in expected.items():
        if named[k].shape != t.shape:
            raise CheckpointError(f"{path}: tensor {k} has shape {named[k].shape}, expected {t.shape}")
    if spec is not None and spec.channels != meta["C"]:
        raise CheckpointError(f"{path}: normalisation covers {spec.channels} channels, model expects {meta['C']}")
    return models.params_from_named(found, named), cfg, spec, meta


def save_checkpoint(path, params, cfg: TrainConfig, norm_spec=None, meta=None) -> Path:
    path = Path(path)
    if meta is None:
        if params.arch == "cnn":
            raise ConfigError("save_checkpoint: meta with T and C is required for CNN parameters")
        meta = {"T": None, "C": params.in_channels}
    atomic_write_bytes(path, encode_checkpoint(params, cfg, norm_spec, meta))
    return path


def load_checkpoint(path, arch: str | None = None):
    """Returns ``(params, cfg, norm_spec, meta)``; ``arch`` enforces the architecture."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"{path}: checkpoint not found")
    return decode_checkpoint(path.read_bytes(), path, arch)
