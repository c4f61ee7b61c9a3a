"""Command-line entry point: ``gasforecast <command> [options]``.

Exit codes: 0 success, 1 other errors, 2 CSV schema mismatch, 3 training
divergence, 4 forecast scenario gaps, 5 unreadable checkpoint, 6 missing
required flag (emission factor).

Options may also come from ``--config file.json`` using the flat keys listed
in ``CONFIG_KEYS``; command-line flags win over the file. The output
directory resolves as ``--out-dir`` flag, then ``$GASFORECAST_OUT_DIR``, then
the config file, then the current directory.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import evaluation as ev
from . import models as md
from . import pipeline as pl
from .training import DivergenceError, IterationLog, TrainConfig, train

OUT_DIR_ENV = "GASFORECAST_OUT_DIR"

EXIT_OK, EXIT_ERROR, EXIT_SCHEMA, EXIT_DIVERGED, EXIT_SCENARIO, EXIT_CHECKPOINT, EXIT_MISSING_FLAG = range(7)

CONFIG_KEYS = {
    "data": None,
    "checkpoint": None,
    "scenario": None,
    "forecast": None,
    "model": "hybrid",
    "epochs": 600,
    "learning_rate": 1e-3,
    "optimizer": "adam",
    "batch_size": None,
    "seed": 42,
    "checkpoint_every": 100,
    "test_fraction": 0.2,
    "split": "chronological",
    "scaling": "minmax",
    "space": "scaled",
    "linreg_solver": "ols",
    "perturbation": 0.10,
    "horizon": 10,
    "factor": None,
    "n_months": 180,
    "out_dir": None,
}


class MissingFlagError(ValueError):
    pass


class Settings:
    """Flag values layered over a JSON config file and built-in defaults."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.file: dict = {}
        if getattr(args, "config", None):
            try:
                self.file = json.loads(Path(args.config).read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as exc:
                raise ValueError(f"cannot read config {args.config}: {exc}") from exc
            unknown = sorted(set(self.file) - set(CONFIG_KEYS))
            if unknown:
                raise ValueError(f"unknown config keys: {unknown}")

    def get(self, key: str):
        value = getattr(self.args, key, None)
        if value is not None:
            return value
        return self.file.get(key, CONFIG_KEYS[key])

    def out_dir(self) -> Path:
        flag = getattr(self.args, "out_dir", None)
        path = flag or os.environ.get(OUT_DIR_ENV) or self.file.get("out_dir") or "."
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        return path

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=int(self.get("epochs")),
            learning_rate=float(self.get("learning_rate")),
            optimizer=self.get("optimizer"),
            batch_size=None if self.get("batch_size") is None else int(self.get("batch_size")),
            seed=int(self.get("seed")),
            checkpoint_every=int(self.get("checkpoint_every")),
        )


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8", newline="\n")


def _json(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _require(settings: Settings, key: str, flag: str):
    value = settings.get(key)
    if value is None:
        raise ValueError(f"{flag} is required")
    return value


# ---------------------------------------------------------------------------
# commands

def cmd_synth(settings: Settings) -> int:
    n_months = int(settings.get("n_months"))
    if n_months < 12:
        raise ValueError(f"--n-months must be >= 12 (got {n_months}); at least one year of months is needed")
    records = pl.generate_synthetic(int(settings.get("seed")), n_months)
    out = Path(settings.args.out) if settings.args.out else settings.out_dir() / "synthetic.csv"
    pl.write_csv(records, out)
    b = pl.boxplot_bounds([r.gasoline_consumption_ml_day for r in records])
    print(f"wrote {len(records)} rows to {out}")
    print(f"consumption ML/day: q1={b.q1:.2f} median={b.median:.2f} q3={b.q3:.2f} "
          f"fences=[{b.lower:.2f}, {b.upper:.2f}]")
    return EXIT_OK


def cmd_clean(settings: Settings) -> int:
    src = _require(settings, "data", "--in")
    records = pl.load_csv(src)
    cleaned, report = pl.clean(records)
    out = Path(settings.args.out) if settings.args.out else settings.out_dir() / "cleaned.csv"
    pl.write_csv(cleaned, out)
    report_path = Path(settings.args.report) if settings.args.report else out.with_suffix(".report.json")
    _write(report_path, _json(report.to_dict()))
    print(f"{report.rows_in} rows in, {report.rows_out} rows out "
          f"(missing {len(report.dropped_missing)}, box-plot {len(report.dropped_boxplot)}, "
          f"z-score {len({r for r, _, _ in report.dropped_zscore})}); report at {report_path}")
    return EXIT_OK


def _history(records) -> dict:
    years, feats, target = pl.annual_means(records)
    return {"years": years.tolist(), "features": feats.tolist(),
            "target": [None if not np.isfinite(v) else float(v) for v in target]}


def _long_rows(series: str, keys, values) -> list[tuple[str, str, float]]:
    return [(series, str(k), float(v)) for k, v in zip(keys, values)]


def _long_csv(rows) -> str:
    buf = io.StringIO()
    buf.write("series,year,value\n")
    for series, key, value in rows:
        buf.write(f"{series},{key},{value!r}\n")
    return buf.getvalue()


def _train_one(kind: str, settings: Settings, train_ds, test_ds, records, out_dir: Path) -> dict:
    config = settings.train_config()
    space = settings.get("space")
    if kind == "linreg" and settings.get("linreg_solver") == "ols":
        model = md.linreg_fit(train_ds.X, train_ds.y)
        iter_log = IterationLog()
        err = md.predict(model, train_ds.X) - train_ds.y.numpy()
        iter_log.append(0, float(np.sqrt(np.mean(err ** 2))), float(np.mean(np.abs(err))))
    else:
        model = md.model_init(kind, train_ds.n_features, config.seed)
        model, iter_log = train(model, train_ds, config)

    metadata = {
        "feature_names": list(train_ds.feature_names),
        "scaler": train_ds.scaler.to_dict(),
        "history": _history(records),
        "train_config": {k: getattr(config, k) for k in config.__dataclass_fields__},
    }
    md.save_checkpoint(out_dir / f"{kind}_checkpoint.json", model, config.seed, metadata)
    iter_log.write_csv(out_dir / f"{kind}_iterations.csv")
    metrics = {"model": kind, "train": ev.evaluate(model, train_ds, space).to_dict()}
    if len(test_ds):
        metrics["test"] = ev.evaluate(model, test_ds, space).to_dict()
    _write(out_dir / f"{kind}_metrics.json", _json(metrics))

    rows = []
    for name, ds in (("train", train_ds), ("test", test_ds)):
        if len(ds):
            pred = pl.inverse_scale(md.predict(model, ds.X), ds.scaler, pl.TARGET)
            actual = pl.inverse_scale(ds.y.numpy(), ds.scaler, pl.TARGET)
            rows += _long_rows(f"actual_{name}", ds.dates, actual)
            rows += _long_rows(f"{kind}_{name}", ds.dates, pred)
    _write(out_dir / f"{kind}_fit.csv", _long_csv(rows))
    return metrics


def cmd_train(settings: Settings) -> int:
    records = pl.load_csv(_require(settings, "data", "--data"))
    records, _, _ = pl.drop_missing(records)
    train_recs, test_recs = pl.train_test_split(records, float(settings.get("test_fraction")),
                                                int(settings.get("seed")), settings.get("split"))
    scaler = pl.fit_record_scaler(train_recs, settings.get("scaling"))
    train_ds = pl.build_dataset(train_recs, scaler)
    test_ds = pl.build_dataset(test_recs, scaler)
    out_dir = settings.out_dir()
    kinds = list(md.MODEL_KINDS) if settings.args.all else [settings.get("model")]
    if len(kinds) == 1:
        results = [_train_one(kinds[0], settings, train_ds, test_ds, records, out_dir)]
    else:
        with ThreadPoolExecutor(max_workers=len(kinds)) as pool:
            futures = [pool.submit(_train_one, k, settings, train_ds, test_ds, records, out_dir) for k in kinds]
            results = [f.result() for f in futures]
    for res in results:
        test = res.get("test", res["train"])
        r2 = test["r_squared"]
        print(f"{res['model']}: test rmse={test['rmse']:.6g} mae={test['mae']:.6g} "
              f"r2={'n/a' if r2 is None else format(r2, '.6g')}")
    return EXIT_OK


def _load(settings: Settings) -> md.Checkpoint:
    return md.load_checkpoint(_require(settings, "checkpoint", "--checkpoint"))


def _scaler(ckpt: md.Checkpoint) -> pl.ScalerParams:
    try:
        return pl.ScalerParams.from_dict(ckpt.metadata["scaler"])
    except (KeyError, TypeError, ValueError) as exc:
        raise md.CheckpointError(f"checkpoint has no usable scaler: {exc}") from exc


def cmd_evaluate(settings: Settings) -> int:
    ckpt = _load(settings)
    scaler = _scaler(ckpt)
    records, _, _ = pl.drop_missing(pl.load_csv(_require(settings, "data", "--data")))
    ds = pl.build_dataset(records, scaler)
    report = ev.evaluate(ckpt.model, ds, settings.get("space"), scaler=scaler)
    doc = {"model": ckpt.model.kind, "metrics": report.to_dict()}
    out = Path(settings.args.out) if settings.args.out else settings.out_dir() / f"{ckpt.model.kind}_evaluation.json"
    _write(out, _json(doc))
    print(f"rmse={report.rmse:.6g} mae={report.mae:.6g} -> {out}")
    return EXIT_OK


def read_scenario_csv(path) -> dict[str, dict[int, float]]:
    """``year,<feature>...`` rows; blank cells are gaps."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "year" not in reader.fieldnames:
            raise pl.SchemaError(["year"], [])
        unknown = [c for c in reader.fieldnames if c != "year" and c not in pl.FEATURES]
        if unknown:
            raise pl.SchemaError([], unknown)
        out: dict[str, dict[int, float]] = {c: {} for c in reader.fieldnames if c != "year"}
        for row in reader:
            year = int(row["year"])
            for col in out:
                value = pl._parse_number(row[col] or "")
                if value is not None:
                    out[col][year] = value
    return out


def cmd_forecast(settings: Settings) -> int:
    ckpt = _load(settings)
    scaler = _scaler(ckpt)
    horizon = int(settings.get("horizon"))
    if horizon < 1:
        raise ValueError("--horizon must be >= 1")
    if settings.get("data"):
        hist = _history(pl.load_csv(settings.get("data")))
    else:
        try:
            hist = ckpt.metadata["history"]
        except KeyError as exc:
            raise md.CheckpointError("checkpoint carries no feature history; pass --data") from exc
    years = np.array(hist["years"], dtype=np.int64)
    feats = np.array(hist["features"], dtype=np.float64).reshape(len(years), len(pl.FEATURES))
    overrides = read_scenario_csv(settings.get("scenario")) if settings.get("scenario") else None
    scenario = ev.build_scenario(years, feats, horizon, overrides)
    forecast = ev.recursive_forecast(ckpt.model, scenario, scaler)

    out_dir = settings.out_dir()
    out = Path(settings.args.out) if settings.args.out else out_dir / "forecast.csv"
    _write(out, ev.forecast_csv(forecast))

    scaled = pl.apply_scaler(feats, scaler, pl.FEATURES).reshape(len(years), 1, len(pl.FEATURES))
    fitted = pl.inverse_scale(md.predict(ckpt.model, scaled), scaler, pl.TARGET)
    rows = [("actual", str(y), float(v)) for y, v in zip(years, hist["target"]) if v is not None]
    rows += _long_rows(f"{ckpt.model.kind}_fitted", years, fitted)
    rows += _long_rows(f"{ckpt.model.kind}_forecast", list(forecast), list(forecast.values()))
    _write(out.with_name(out.stem + "_series.csv"), _long_csv(rows))
    print(f"forecast {min(forecast)}-{max(forecast)} written to {out}")
    return EXIT_OK


def cmd_sensitivity(settings: Settings) -> int:
    ckpt = _load(settings)
    scaler = _scaler(ckpt)
    records, _, _ = pl.drop_missing(pl.load_csv(_require(settings, "data", "--data")))
    ds = pl.build_dataset(records, scaler)
    report = ev.sensitivity(ckpt.model, ds.X, float(settings.get("perturbation")), ds.feature_names)
    out = Path(settings.args.out) if settings.args.out else settings.out_dir() / "sensitivity.json"
    _write(out, _json(report.to_dict()))
    for label, weight, _ in sorted(report.groups, key=lambda g: -g[1]):
        print(f"{weight * 100:6.2f}%  {label}")
    return EXIT_OK


def cmd_emissions(settings: Settings) -> int:
    factor = settings.get("factor")
    if factor is None:
        raise MissingFlagError("--factor (kg CO2 per litre) is required: no default emission factor "
                               "is provided, so one must be supplied explicitly")
    forecast_path = _require(settings, "forecast", "--forecast")
    consumption = ev.parse_forecast_csv(Path(forecast_path).read_text(encoding="utf-8"))
    tonnes = ev.emissions(consumption, ev.EmissionsConfig(float(factor)))
    out = Path(settings.args.out) if settings.args.out else settings.out_dir() / "emissions.csv"
    _write(out, ev.emissions_csv(tonnes))
    print(f"{len(tonnes)} years written to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON file with flat option keys")
    common.add_argument("--out-dir", default=argparse.SUPPRESS, help=f"output directory (env {OUT_DIR_ENV})")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    parser = argparse.ArgumentParser(prog="gasforecast", description="Gasoline consumption forecasting pipeline.",
                                     parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help):
        return sub.add_parser(name, parents=[common], help=help)

    p = command("synth", "generate a synthetic monthly dataset")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-months", type=int, dest="n_months")
    p.add_argument("--out")
    p.set_defaults(func=cmd_synth)

    p = command("clean", "drop missing rows and outliers")
    p.add_argument("--in", dest="data")
    p.add_argument("--out")
    p.add_argument("--report", help="cleaning report JSON path")
    p.set_defaults(func=cmd_clean)

    p = command("train", "fit a model and write checkpoint, log and metrics")
    p.add_argument("--data")
    p.add_argument("--model", choices=sorted(md.MODEL_KINDS))
    p.add_argument("--all", action="store_true", help="train hybrid, ann and linreg")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float, dest="learning_rate")
    p.add_argument("--optimizer", choices=("sgd", "adam"))
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint-every", type=int, dest="checkpoint_every")
    p.add_argument("--test-fraction", type=float, dest="test_fraction")
    p.add_argument("--split", choices=("chronological", "shuffled"))
    p.add_argument("--scaling", choices=pl.SCALING_MODES)
    p.add_argument("--space", choices=("scaled", "original"))
    p.add_argument("--linreg-solver", choices=("ols", "gd"), dest="linreg_solver")
    p.set_defaults(func=cmd_train)

    p = command("evaluate", "score a checkpoint on a dataset")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--space", choices=("scaled", "original"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = command("forecast", "predict future annual consumption")
    p.add_argument("--checkpoint")
    p.add_argument("--horizon", type=int)
    p.add_argument("--scenario", help="CSV of year plus feature overrides")
    p.add_argument("--data", help="monthly CSV to use as feature history")
    p.add_argument("--out")
    p.set_defaults(func=cmd_forecast)

    p = command("sensitivity", "perturbation influence weights")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--perturbation", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sensitivity)

    p = command("emissions", "convert a forecast CSV to tonnes CO2 per year")
    p.add_argument("--forecast")
    p.add_argument("--factor", type=float, help="kg CO2 per litre (required)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_emissions)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(Settings(args))
    except pl.SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ev.ScenarioGapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCENARIO
    except md.CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except MissingFlagError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING_FLAG
    except (ValueError, OSError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
