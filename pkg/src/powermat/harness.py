"""Experiment orchestration: TOML configs, single runs, learning-rate sweeps,
report emission, model snapshots and the ``powermat`` command line."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .core import FactorModel, Hyperparams, ValidationError
from .data import (
    COMODA_CATEGORY_COUNTS, COMODA_CONTEXT_COLUMNS, ColumnMapping, ConfigError, ContextEncoder,
    DataError, Dataset, EncodingError, parse_comoda, split, synth_generate, write_comoda,
)
from .metrics import EvalReport, evaluate
from .trainers import Algorithm, TrainConfig, TrainingDiverged, predict, train

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SWEEP_COLUMNS = ("algorithm", "gamma", "mae", "rmse", "matthew_degree", "diverged", "train_seconds")
REPORT_COLUMNS = ("algorithm", "prediction_rule", "gamma", "mae", "rmse", "matthew_degree",
                  "n_test", "clip_count", "diverged", "train_seconds")
DEFAULT_SWEEP = tuple(float(g) for g in np.geomspace(1e-4, 3e-1, 8))

_HYPER_KEYS = {f.name for f in fields(Hyperparams)}
_TRAIN_KEYS = {"epochs", "init_scale", "rating_blind"}


@dataclass(frozen=True)
class SyntheticSpec:
    n_users: int = 120
    n_items: int = 400
    n_events: int = 2300
    zipf_exponent: float = 1.0
    context_columns: tuple[int, ...] = COMODA_CATEGORY_COUNTS
    column_names: tuple[str, ...] | None = COMODA_CONTEXT_COLUMNS
    seed: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    path: Path | None = None
    columns: ColumnMapping = field(default_factory=ColumnMapping)
    synthetic: SyntheticSpec | None = None
    algorithms: tuple[Algorithm, ...] = (Algorithm.POWERMAT, Algorithm.DOTMAT, Algorithm.CLASSIC_MF)
    hyper: Hyperparams = field(default_factory=Hyperparams)
    overrides: dict = field(default_factory=dict)
    epochs: int = 20
    init_scale: float = 1.0
    rating_blind: bool = False
    sweep: tuple[float, ...] | None = None
    test_fraction: float = 0.2
    split_seed: int = 0
    init_seed: int = 0
    shuffle_seed: int = 0
    out_dir: Path = Path("out")
    k_rec: int = 10
    context_source: str = "per_user_last"
    timings: bool = False

    def __post_init__(self):
        object.__setattr__(self, "algorithms", tuple(Algorithm(a) for a in self.algorithms))
        if not self.algorithms:
            raise ConfigError("select at least one algorithm")
        if (self.path is None) == (self.synthetic is None):
            raise ConfigError("data source must be exactly one of a CSV path or a synthetic spec")
        if self.sweep is not None:
            g = list(self.sweep)
            if not g:
                raise ConfigError("sweep must be nonempty")
            if any(x <= 0 for x in g) or any(b <= a for a, b in zip(g, g[1:])):
                raise ConfigError("sweep gammas must be positive and strictly increasing")
        for name, ov in self.overrides.items():
            Algorithm(name)
            unknown = set(ov) - _HYPER_KEYS - _TRAIN_KEYS
            if unknown:
                raise ConfigError(f"unknown override key(s) for {name}: {sorted(unknown)}")

    def with_seed(self, seed: int) -> "ExperimentConfig":
        synthetic = replace(self.synthetic, seed=seed) if self.synthetic else None
        return replace(self, split_seed=seed, init_seed=seed, shuffle_seed=seed, synthetic=synthetic)

    def train_config(self, algorithm: Algorithm, gamma: float | None = None) -> TrainConfig:
        ov = dict(self.overrides.get(algorithm.value, {}))
        hyper_changes = {k: v for k, v in ov.items() if k in _HYPER_KEYS}
        if gamma is not None:
            hyper_changes["gamma"] = gamma
        hyper = self.hyper.replace(**hyper_changes) if hyper_changes else self.hyper
        return TrainConfig(
            algorithm=algorithm,
            epochs=ov.get("epochs", self.epochs),
            shuffle_seed=self.shuffle_seed,
            init_seed=self.init_seed,
            init_scale=ov.get("init_scale", self.init_scale),
            hyper=hyper,
            rating_blind=ov.get("rating_blind", self.rating_blind and algorithm is Algorithm.POWERMAT),
        )


def load_config(path: str | Path) -> ExperimentConfig:
    """Read an experiment TOML file (sections data, model, train, sweep, output)."""
    path = Path(path)
    try:
        with path.open("rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"no such config file: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(raw, base_dir=path.parent)


def config_from_dict(raw: dict, base_dir: Path = Path(".")) -> ExperimentConfig:
    data = dict(raw.get("data", {}))
    model = dict(raw.get("model", {}))
    tr = dict(raw.get("train", {}))
    sw = dict(raw.get("sweep", {}))
    out = dict(raw.get("output", {}))

    rating_min = float(data.get("rating_min", 1.0))
    r_max = float(data.get("r_max", 5.0))
    path = synthetic = None
    source = data.get("source", "csv" if "path" in data else "synthetic")
    if source == "csv":
        if "path" not in data:
            raise ConfigError("[data] source = 'csv' requires path")
        path = Path(data["path"])
        if not path.is_absolute():
            path = Path(os.path.normpath(base_dir / path))
    elif source == "synthetic":
        syn = dict(data.get("synthetic", {}))
        if "context_columns" in syn:
            syn["context_columns"] = tuple(syn["context_columns"])
            syn.setdefault("column_names", None)
        if syn.get("column_names") is not None:
            syn["column_names"] = tuple(syn["column_names"])
        synthetic = SyntheticSpec(**syn)
    else:
        raise ConfigError(f"unknown data source {source!r}")
    columns = ColumnMapping(
        user_col=data.get("user_col", "userID"),
        item_col=data.get("item_col", "itemID"),
        rating_col=data.get("rating_col", "rating"),
        context_cols=tuple(data.get("context_cols", COMODA_CONTEXT_COLUMNS)),
        scheme=data.get("scheme", "one_hot"),
        rating_min=rating_min,
        r_max=r_max,
    )
    unknown = set(model) - _HYPER_KEYS
    if unknown:
        raise ConfigError(f"unknown [model] key(s): {sorted(unknown)}")
    if "r_max" in model and float(model["r_max"]) != r_max:
        raise ConfigError("[model] r_max disagrees with [data] r_max")
    model["r_max"] = r_max
    try:
        hyper = Hyperparams(**model)
    except (ValidationError, ValueError, TypeError) as exc:
        raise ConfigError(f"[model]: {exc}") from None

    sweep = None
    if "sweep" in raw:
        sweep = tuple(float(g) for g in sw.get("gammas", DEFAULT_SWEEP))
    out_dir = Path(out.get("dir", "out"))
    if not out_dir.is_absolute():
        out_dir = Path(os.path.normpath(base_dir / out_dir))
    return ExperimentConfig(
        path=path,
        columns=columns,
        synthetic=synthetic,
        algorithms=tuple(tr.get("algorithms", [a.value for a in Algorithm])),
        hyper=hyper,
        overrides=dict(tr.get("overrides", {})),
        epochs=int(tr.get("epochs", 20)),
        init_scale=float(tr.get("init_scale", 1.0)),
        rating_blind=bool(tr.get("rating_blind", False)),
        sweep=sweep,
        test_fraction=float(data.get("test_fraction", 0.2)),
        split_seed=int(data.get("split_seed", 0)),
        init_seed=int(tr.get("init_seed", 0)),
        shuffle_seed=int(tr.get("shuffle_seed", 0)),
        out_dir=out_dir,
        k_rec=int(out.get("k_rec", 10)),
        context_source=out.get("context_source", "per_user_last"),
        timings=bool(out.get("timings", False)),
    )


def load_dataset(config: ExperimentConfig) -> Dataset:
    if config.path is not None:
        return parse_comoda(config.path, config.columns)
    s = config.synthetic
    return synth_generate(
        s.n_users, s.n_items, s.n_events, s.zipf_exponent, s.context_columns, s.seed,
        rating_min=int(config.columns.rating_min), r_max=int(config.columns.r_max),
        column_names=s.column_names,
    )


# Model snapshots

def save_model(model: FactorModel, encoder: ContextEncoder, path: str | Path) -> None:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "k": model.hyper.k,
        "d": model.d,
        "hyper": model.hyper.to_dict(),
        "user_ids": model.user_ids,
        "item_ids": model.item_ids,
        "user_factors": model.user_factors.tolist(),
        "item_factors": model.item_factors.tolist(),
        "alpha": model.alpha.tolist(),
        "beta": model.beta,
        "encoder": encoder.to_dict(),
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def load_model(path: str | Path) -> tuple[FactorModel, ContextEncoder]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read model snapshot {path}: {exc}") from None
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise DataError(f"unsupported model schema_version {version!r}")
    k = doc["k"]
    model = FactorModel(
        np.asarray(doc["user_factors"], dtype=float).reshape(-1, k),
        np.asarray(doc["item_factors"], dtype=float).reshape(-1, k),
        np.asarray(doc["alpha"], dtype=float),
        float(doc["beta"]),
        Hyperparams(**doc["hyper"]),
        list(doc["user_ids"]),
        list(doc["item_ids"]),
    )
    return model, ContextEncoder.from_dict(doc["encoder"])


# Runs

def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value) if math.isfinite(value) else "nan"
    return str(value)


def _json_safe(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def _train_and_eval(train_ds: Dataset, test_ds: Dataset, config: ExperimentConfig,
                    algorithm: Algorithm, gamma: float | None = None):
    tc = config.train_config(algorithm, gamma)
    try:
        model, report = train(train_ds, tc)
    except TrainingDiverged as exc:
        logger.warning("%s", exc)
        nan = math.nan
        ev = EvalReport(algorithm.value, tc.hyper.prediction_rule.value, tc.hyper.gamma,
                        nan, nan, nan, len(test_ds), 0, diverged=True,
                        train_seconds=exc.report.wall_seconds if config.timings else nan)
        return None, exc.report, ev
    ev = evaluate(model, train_ds, test_ds, algorithm.value, config.k_rec, config.context_source)
    ev.train_seconds = report.wall_seconds if config.timings else math.nan
    return model, report, ev


def prepare(config: ExperimentConfig) -> tuple[Dataset, Dataset, Dataset]:
    dataset = load_dataset(config)
    train_ds, test_ds = split(dataset, config.test_fraction, config.split_seed)
    return dataset, train_ds, test_ds


def run_single(config: ExperimentConfig, write: bool = True) -> dict[str, EvalReport]:
    """Train every selected algorithm on one shared split and evaluate each on
    the shared test set. Writes report.csv, report.json and one model snapshot
    per converged algorithm into ``config.out_dir``."""
    dataset, train_ds, test_ds = prepare(config)
    reports: dict[str, EvalReport] = {}
    train_reports = {}
    models = {}
    for algorithm in config.algorithms:
        model, treport, ev = _train_and_eval(train_ds, test_ds, config, algorithm)
        reports[algorithm.value] = ev
        train_reports[algorithm.value] = treport
        if model is not None:
            models[algorithm.value] = model
    if write:
        out = Path(config.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "report.csv", REPORT_COLUMNS, [r.to_dict() for r in reports.values()])
        summary = {
            "schema_version": SCHEMA_VERSION,
            "n_events": len(dataset),
            "n_train": len(train_ds),
            "n_test": len(test_ds),
            "reports": {k: {c: _json_safe(v) for c, v in r.to_dict().items()} for k, r in reports.items()},
            "training": {
                k: {
                    "loss": t.loss_name,
                    "loss_trace": t.loss_trace,
                    "steps": t.steps,
                    "clamp_events": t.clamp_events,
                    "overflow_events": t.overflow_events,
                    "rating_reads": t.rating_reads,
                    "norms": t.norms,
                }
                for k, t in train_reports.items()
            },
        }
        _write_json(out / "report.json", summary)
        for name, model in models.items():
            save_model(model, dataset.encoder, out / f"model_{name}.json")
    return reports


@dataclass
class SweepResult:
    rows: list[dict]

    def best(self) -> dict[str, dict]:
        """Per algorithm, the converged row with the lowest MAE (first gamma on ties)."""
        out: dict[str, dict] = {}
        for row in self.rows:
            if row["diverged"] or not math.isfinite(row["mae"]):
                continue
            cur = out.get(row["algorithm"])
            if cur is None or row["mae"] < cur["mae"]:
                out[row["algorithm"]] = row
        return out


def run_sweep(config: ExperimentConfig, write: bool = True) -> SweepResult:
    """One independent run per (algorithm, gamma) on a shared split. Writes
    sweep.csv and sweep_summary.json into ``config.out_dir``."""
    if not config.sweep:
        raise ConfigError("config has no sweep section")
    _, train_ds, test_ds = prepare(config)
    rows = []
    for algorithm in config.algorithms:
        for gamma in config.sweep:
            _, _, ev = _train_and_eval(train_ds, test_ds, config, algorithm, gamma)
            rows.append({
                "algorithm": algorithm.value,
                "gamma": gamma,
                "mae": ev.mae,
                "rmse": ev.rmse,
                "matthew_degree": ev.matthew_degree,
                "diverged": ev.diverged,
                "train_seconds": ev.train_seconds,
            })
    result = SweepResult(rows)
    if write:
        out = Path(config.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "sweep.csv", SWEEP_COLUMNS, rows)
        best = result.best()
        summary = {
            "schema_version": SCHEMA_VERSION,
            "gammas": list(config.sweep),
            "best": {
                a.value: ({"gamma": best[a.value]["gamma"], "mae": best[a.value]["mae"]}
                          if a.value in best else None)
                for a in config.algorithms
            },
            "diverged_cells": sum(r["diverged"] for r in rows),
        }
        _write_json(out / "sweep_summary.json", summary)
    return result


def _write_csv(path: Path, columns: Sequence[str], rows: Sequence[dict]) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, allow_nan=False) + "\n", encoding="utf-8")


def read_sweep_csv(path: str | Path) -> list[dict]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        for c in ("gamma", "mae", "rmse", "matthew_degree"):
            row[c] = float(row[c])
        row["diverged"] = row["diverged"] == "true"
    return rows


# Command line

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="powermat", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    for name, helptext in (("train", "train and evaluate every configured algorithm once"),
                           ("sweep", "run the learning-rate sweep")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", required=True, type=Path)
        p.add_argument("--seed", type=int, help="override split, init and shuffle seeds")
        p.add_argument("--out", type=Path, help="override the output directory")

    p = sub.add_parser("predict", help="score one user/item/context triple with a saved model")
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--user", required=True)
    p.add_argument("--item", required=True)
    p.add_argument("--context", default=None,
                   help="comma-separated raw context codes, one per column (-1 = unknown)")

    p = sub.add_parser("synth", help="write a synthetic CoMoDa-format CSV")
    p.add_argument("--n-users", type=int, default=120)
    p.add_argument("--n-items", type=int, default=400)
    p.add_argument("--n-events", type=int, default=2300)
    p.add_argument("--zipf", type=float, default=1.0)
    p.add_argument("--columns", default=None,
                   help="comma-separated category counts (default: the 12 CoMoDa-like columns)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("validate-data", help="parse a CSV and report diagnostics")
    p.add_argument("path", type=Path)
    p.add_argument("--config", type=Path, help="take the column mapping from this config")
    return parser


def _cmd_run(args, sweep: bool) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config = config.with_seed(args.seed)
    if args.out is not None:
        config = replace(config, out_dir=args.out)
    if sweep:
        if config.sweep is None:
            config = replace(config, sweep=DEFAULT_SWEEP)
        result = run_sweep(config)
        for row in result.rows:
            print(" ".join(f"{c}={_fmt(row[c])}" for c in SWEEP_COLUMNS))
        print(f"wrote {config.out_dir / 'sweep.csv'}")
        return EXIT_DIVERGED if all(r["diverged"] for r in result.rows) else EXIT_OK
    reports = run_single(config)
    for r in reports.values():
        print(" ".join(f"{c}={_fmt(v)}" for c, v in r.to_dict().items()))
    print(f"wrote {config.out_dir / 'report.csv'}")
    return EXIT_DIVERGED if any(r.diverged for r in reports.values()) else EXIT_OK


def _cmd_predict(args) -> int:
    model, encoder = load_model(args.model)
    if args.context is None:
        ctx = np.zeros(model.d)
    else:
        try:
            codes = [int(c) for c in args.context.split(",")]
        except ValueError:
            raise UsageError(f"--context must be comma-separated integers, got {args.context!r}")
        ctx = encoder.encode_attrs(codes)
    value = predict(model, args.user, args.item, ctx)
    known = args.user in model.user_index and args.item in model.item_index
    print(f"{value!r}{'' if known else ' (cold start)'}")
    return EXIT_OK


def _cmd_synth(args) -> int:
    if args.columns is None:
        counts, names = COMODA_CATEGORY_COUNTS, COMODA_CONTEXT_COLUMNS
    else:
        try:
            counts = tuple(int(c) for c in args.columns.split(","))
        except ValueError:
            raise UsageError(f"--columns must be comma-separated integers, got {args.columns!r}")
        names = None
    ds = synth_generate(args.n_users, args.n_items, args.n_events, args.zipf, counts, args.seed,
                        column_names=names)
    write_comoda(ds, args.out)
    print(f"wrote {len(ds)} events ({ds.n_users} users, {ds.n_items} items) to {args.out}")
    return EXIT_OK


def _cmd_validate(args) -> int:
    mapping = load_config(args.config).columns if args.config else ColumnMapping()
    ds = parse_comoda(args.path, mapping)
    print(f"{args.path}: {len(ds)} valid rows, {len(ds.diagnostics)} skipped, "
          f"{ds.n_users} users, {ds.n_items} items, context dimension {ds.encoder.dim}")
    for msg in ds.diagnostics:
        print(f"  skipped {msg}")
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command in ("train", "sweep"):
            return _cmd_run(args, args.command == "sweep")
        if args.command == "predict":
            return _cmd_predict(args)
        if args.command == "synth":
            return _cmd_synth(args)
        return _cmd_validate(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, ValidationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, EncodingError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
