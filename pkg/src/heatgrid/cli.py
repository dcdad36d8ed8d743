"""``heatgrid`` command line: fetch, preprocess, train, evaluate, predict, risk.

``preprocess`` opens a new run directory ``<output_dir>/run-<UTC time>-<config
hash>/`` and records it in ``<output_dir>/LATEST``; later commands work in
that run unless ``--run-dir`` names another one.
"""
from __future__ import annotations

import datetime as dt
import json
import logging
import sys
from pathlib import Path

import click
import numpy as np

from . import meteo, risk
from .config import RunConfig, load_run_config
from .errors import CheckpointError, ConfigError, DatasetError, HeatgridError, IngestionError
from .grid import GridField, atomic_write_text, load_grid, write_grid
from .pipeline import (
    NormalizationSpec,
    apply_normalization,
    read_sample_cache,
    run_pipeline,
    split_dataset,
    write_sample_cache,
)
from .training import (
    evaluate,
    load_checkpoint,
    per_sample_csv,
    train,
)

log = logging.getLogger("heatgrid")

SAMPLES = "samples.hgds"
NORMALIZATION = "normalization.json"
SUMMARY = "summary.json"

DEFAULTS_EPILOG = """\b
Defaults (override with --set section.key=value):
  pipeline.T=3               sequence length (days)
  pipeline.max_gap_days=1    strictly consecutive input days
  pipeline.normalization=standard
  pipeline.train_fraction=0.8
  train.architecture=convlstm
  train.hidden_dim=32        ConvLSTM hidden channels
  train.learning_rate=0.001  Adam
  train.batch_size=16
  train.epochs=20
  train.alpha=0.7            loss = 0.7 L1 + 0.3 L2
  train.beta1=0.9 train.beta2=0.999 train.epsilon=1e-8
  train.seed=0
  risk.scheme=fixed          cuts 0.25 / 0.50 / 0.75
"""


class CommandError(HeatgridError):
    """A command-level precondition failed (missing artefact, unknown date)."""


def _emit_error(command: str, exc: Exception) -> None:
    record = {"command": command, "error": type(exc).__name__, "message": str(exc)}
    for attr in ("path", "line", "column", "status", "variable", "index"):
        v = getattr(exc, attr, None)
        if v is not None:
            record[attr] = v
    click.echo(json.dumps(record, sort_keys=True), err=True)
    click.echo(f"heatgrid {command}: error: {exc}", err=True)


def _run(command: str, fn, *args):
    try:
        fn(*args)
    except (HeatgridError, OSError, ValueError) as exc:
        _emit_error(command, exc)
        sys.exit(1)


def make_client(cache_dir) -> meteo.ArchiveClient:
    return meteo.ArchiveClient(cache_dir)


def _load(config, sets) -> RunConfig:
    return load_run_config(config, sets)


# --------------------------------------------------------------------------
# run directories
# --------------------------------------------------------------------------
def new_run_dir(cfg: RunConfig) -> Path:
    out = cfg.paths["output_dir"]
    stamp = dt.datetime.now(dt.timezone.utc).strftime("%Y%m%dT%H%M%SZ")
    base = f"run-{stamp}-{cfg.digest()}"
    run = out / base
    k = 2
    while run.exists():
        run = out / f"{base}-{k}"
        k += 1
    run.mkdir(parents=True)
    atomic_write_text(out / "LATEST", run.name + "\n")
    return run


def resolve_run_dir(cfg: RunConfig, run_dir) -> Path:
    if run_dir is not None:
        run = Path(run_dir)
    else:
        latest = cfg.paths["output_dir"] / "LATEST"
        if not latest.exists():
            raise CommandError(f"no run found under {cfg.paths['output_dir']}; run 'heatgrid preprocess' first")
        run = cfg.paths["output_dir"] / latest.read_text(encoding="utf-8").strip()
    if not (run / SAMPLES).exists():
        raise CommandError(f"{run} is not a preprocessed run directory (missing {SAMPLES})")
    return run


def _write_config(run: Path, name: str, cfg: RunConfig) -> None:
    atomic_write_text(run / f"{name}.config.json", cfg.canonical_json())


def _load_dataset(run: Path, cfg: RunConfig):
    samples = read_sample_cache(run / SAMPLES)
    spec = NormalizationSpec.from_dict(json.loads((run / NORMALIZATION).read_text(encoding="utf-8")))
    summary = json.loads((run / SUMMARY).read_text(encoding="utf-8"))
    train_s, val_s = split_dataset(samples, summary["train_fraction"])
    return samples, spec, train_s, val_s


def _checkpoint_path(run: Path, checkpoint) -> Path:
    if checkpoint is None:
        path = run / "train" / "best.hgck"
    else:
        path = Path(checkpoint)
        if not path.is_absolute() and not path.exists():
            path = run / "train" / path
    if not path.exists():
        raise CheckpointError(f"{path}: checkpoint not found (run 'heatgrid train' first)")
    return path


def _parse_date(text: str) -> dt.date:
    try:
        return dt.date.fromisoformat(text)
    except ValueError:
        raise ConfigError(f"date {text!r} is not YYYY-MM-DD") from None


def _sample_for(samples, day: dt.date):
    for s in samples:
        if s.target_date == day:
            return s
    raise CommandError(f"date not available: no sample in the cache targets {day.isoformat()}")


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------
config_opt = click.option(
    "--config", "config", required=True, type=click.Path(dir_okay=False), help="Run configuration (JSON)."
)
set_opt = click.option(
    "--set", "sets", multiple=True, metavar="KEY=VALUE", help="Override a config entry, e.g. train.epochs=5 (repeatable)."
)
run_opt = click.option(
    "--run-dir", type=click.Path(file_okay=False), default=None,
    help="Run directory to use (default: the latest one recorded by preprocess).",
)


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to standard error.")
def main(verbose):
    """Next-day land-surface-temperature forecasting and heat-risk mapping."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(name)s: %(message)s")


@main.command(epilog=DEFAULTS_EPILOG)
@config_opt
@set_opt
def fetch(config, sets):
    """Download daily forcing for every configured location into the forcing CSV."""
    _run("fetch", _fetch, config, sets)


def _fetch(config, sets):
    cfg = _load(config, sets)
    if not cfg.locations:
        raise ConfigError("no locations configured")
    locations = [meteo.LocationConfig.from_dict(d if isinstance(d, dict) else {"location_id": d}) for d in cfg.locations]
    meteo.check_unique(locations)
    start, end = cfg.fetch_range()
    variables = cfg.fetch.get("variables") or cfg.pipeline["variables"]
    jobs = [meteo.FetchJob(loc, start, end, variables) for loc in locations]
    out = cfg.require_path("forcing_csv", must_exist=False)
    client = make_client(cfg.cache_dir())
    records = client.fetch_all(jobs)
    meteo.export_forcing_csv(records, out)
    for loc in locations:
        n = sum(1 for r in records if r.location_id == loc.location_id)
        click.echo(f"{loc.location_id}: {n} days")
    click.echo(f"{len(records)} rows written to {out}")
    click.echo(f"{client.network_requests} network requests ({client.cache_hits} cached)")


@main.command(epilog=DEFAULTS_EPILOG)
@config_opt
@set_opt
def preprocess(config, sets):
    """Build the sample cache and normalisation statistics in a new run directory."""
    _run("preprocess", _preprocess, config, sets)


def _preprocess(config, sets):
    cfg = _load(config, sets)
    result = run_pipeline(cfg.pipeline_config())
    run = new_run_dir(cfg)
    _write_config(run, "preprocess", cfg)
    write_sample_cache(result.samples, run / SAMPLES)
    atomic_write_text(run / NORMALIZATION, json.dumps(result.spec.to_dict(), indent=2) + "\n")
    summary = dict(result.summary(), train_fraction=cfg.pipeline["train_fraction"], T=cfg.pipeline["T"])
    summary["validation_first_target"] = result.validation[0].target_date.isoformat()
    atomic_write_text(run / SUMMARY, json.dumps(summary, indent=2, sort_keys=True) + "\n")
    click.echo(f"run directory: {run}")
    click.echo(f"valid samples: {summary['valid_samples']}")
    click.echo(f"channels per day: {summary['channels']}")
    click.echo(f"train / validation: {summary['train_samples']} / {summary['validation_samples']}")


@main.command("train", epilog=DEFAULTS_EPILOG)
@config_opt
@set_opt
@run_opt
def train_cmd(config, sets, run_dir):
    """Fit the configured architecture; writes checkpoints and history.csv."""
    _run("train", _train, config, sets, run_dir)


def _train(config, sets, run_dir):
    cfg = _load(config, sets)
    run = resolve_run_dir(cfg, run_dir)
    _, spec, train_s, val_s = _load_dataset(run, cfg)
    train_n = [apply_normalization(spec, s) for s in train_s]
    val_n = [apply_normalization(spec, s) for s in val_s]
    _write_config(run, "train", cfg)

    def progress(row):
        log.info("epoch %d train_loss %.6f val_r2 %.4f", row["epoch"], row["train_loss"], row["val_r2"])

    res = train(train_n, val_n, cfg.train, out_dir=run / "train", norm_spec=spec, log=progress)
    if res.history:
        last = res.history[-1]
        click.echo(f"epochs: {len(res.history)}, final train loss {last['train_loss']:.6f}, val R² {last['val_r2']:.4f}")
    click.echo(f"best epoch: {res.best_epoch}")
    click.echo(f"checkpoints: {run / 'train'}")


@main.command("evaluate", epilog=DEFAULTS_EPILOG)
@config_opt
@set_opt
@run_opt
@click.option("--checkpoint", default=None, help="Checkpoint file (default: train/best.hgck of the run).")
def evaluate_cmd(config, sets, run_dir, checkpoint):
    """Score a checkpoint on the validation split; writes report.json and per_sample.csv."""
    _run("evaluate", _evaluate, config, sets, run_dir, checkpoint)


def _evaluate(config, sets, run_dir, checkpoint):
    cfg = _load(config, sets)
    run = resolve_run_dir(cfg, run_dir)
    _, spec, _, val_s = _load_dataset(run, cfg)
    path = _checkpoint_path(run, checkpoint)
    params, _, _, meta = load_checkpoint(path)
    _check_compatible(meta, val_s[0], path)
    report = evaluate(params, [apply_normalization(spec, s) for s in val_s], spec, cfg.train.batch_size)
    out = run / "evaluate"
    atomic_write_text(out / "report.json", json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    atomic_write_text(out / "per_sample.csv", per_sample_csv(report))
    click.echo(f"validation samples: {len(val_s)}")
    click.echo(f"MAE {report.mae:.6f}  RMSE {report.rmse:.6f}  R² = {report.r2:.6g}  (normalized)")
    k = report.kelvin
    click.echo(f"MAE {k.mae:.6f}  RMSE {k.rmse:.6f}  R² = {k.r2:.6g}  (kelvin)")
    click.echo(f"report: {out}")


def _check_compatible(meta, sample, path):
    T, C = sample.input.shape[:2]
    if C != meta["C"] or (meta.get("T") is not None and T != meta["T"]):
        raise CheckpointError(
            f"{path}: checkpoint expects T={meta.get('T')}, C={meta['C']} but the dataset has T={T}, C={C}"
        )


@main.command(epilog=DEFAULTS_EPILOG)
@config_opt
@set_opt
@run_opt
@click.option("--date", "date_", required=True, help="Target date (YYYY-MM-DD) present in the sample cache.")
@click.option("--checkpoint", default=None, help="Checkpoint file (default: train/best.hgck of the run).")
def predict(config, sets, run_dir, date_, checkpoint):
    """Write the predicted next-day field (kelvin) for one target date as a .grid file."""
    _run("predict", _predict, config, sets, run_dir, date_, checkpoint)


def _predict(config, sets, run_dir, date_, checkpoint):
    cfg = _load(config, sets)
    run = resolve_run_dir(cfg, run_dir)
    day = _parse_date(date_)
    samples = read_sample_cache(run / SAMPLES)
    sample = _sample_for(samples, day)
    path = _checkpoint_path(run, checkpoint)
    field = risk.predict_kelvin(path, sample)
    out = write_grid(field, run / "predict" / f"pred-{day.isoformat()}.grid")
    click.echo(f"prediction for {day.isoformat()}: {out}")
    click.echo(f"range {np.nanmin(field.values):.3f} .. {np.nanmax(field.values):.3f} {field.units}")


@main.command("risk", epilog=DEFAULTS_EPILOG)
@config_opt
@set_opt
@run_opt
@click.option("--date", "date_", default=None, help="Target date (default: risk.date, else the last cached target).")
@click.option("--checkpoint", default=None, help="Checkpoint file (default: train/best.hgck of the run).")
def risk_cmd(config, sets, run_dir, date_, checkpoint):
    """Compose hazard x exposure x vulnerability for one date; writes PGM, mask and CSV."""
    _run("risk", _risk, config, sets, run_dir, date_, checkpoint)


def _risk(config, sets, run_dir, date_, checkpoint):
    cfg = _load(config, sets)
    run = resolve_run_dir(cfg, run_dir)
    layers = {}
    for key in ("exposure", "vulnerability"):
        p = cfg.risk[key]
        if p is None:
            raise ConfigError(f"risk.{key} must name a .grid layer")
        layers[key] = load_grid(p)
    samples = read_sample_cache(run / SAMPLES)
    text = date_ or cfg.risk.get("date")
    day = _parse_date(text) if text else max(s.target_date for s in samples)
    sample = _sample_for(samples, day)
    hazard = risk.hazard_from_prediction(_checkpoint_path(run, checkpoint), sample)
    stack = risk.RiskLayers(hazard, risk.normalize_layer(layers["exposure"]), risk.normalize_layer(layers["vulnerability"]))
    surface = risk.build_surface(stack, cfg.risk["scheme"])
    files = risk.render_map(surface, run / "risk" / f"risk-{day.isoformat()}.pgm", date=day)
    click.echo(f"risk map for {day.isoformat()} ({surface.scheme} classes, cuts {', '.join(f'{c:.4g}' for c in surface.thresholds)})")
    for name, n in surface.class_counts().items():
        click.echo(f"  {name}: {n} cells")
    for kind, p in files.items():
        click.echo(f"{kind}: {p}")


if __name__ == "__main__":  # pragma: no cover
    main()
