"""Command-line entry point: generate, train, forecast, evaluate, ablate."""

from __future__ import annotations

import argparse
import csv
import enum
import hashlib
import io
import json
import os
import sys
from dataclasses import fields
from pathlib import Path

from threadpoolctl import threadpool_limits

from .armdn import SchemaMismatch, forecast as armdn_forecast, load_checkpoint, save_checkpoint
from .cubist import CubistConfig, fit_cubist, forecast_cubist, load_cubist, save_cubist
from .dataset import (
    DataError, Dataset, GeneratorConfig, aggregate_national, dataset_to_csv, future_rows,
    generate_synthetic, load_csv,
)
from .evaluation import (
    ABLATION_VARIANTS, AblationConfig, ForecastReport, armdn_forecaster, backtest, config_hash,
    cubist_forecaster, emit_report, persistence_forecaster, run_ablation, split_to_regions,
    window_cutoffs,
)
from .features import FeatureSchema, fit_schema
from .hierarchy import compute_ratios, disaggregate
from .train import (
    TrainConfig, TrainingDiverged, evaluate_nll, finetune_vertical, jsonl_logger, prepare_series,
    train_global,
)

SEED_ENV = "DEMANDCAST_SEED"
EVAL_DEFAULTS = {"horizon": 4, "windows": 3, "statistic": "mean"}


class ExitCode(enum.IntEnum):
    OK = 0
    UNEXPECTED = 1
    USAGE = 2
    DATA = 3
    SCHEMA_MISMATCH = 4
    DIVERGED = 5
    CONFIG = 6


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config


def _field_names(cls) -> list[str]:
    return [f.name for f in fields(cls)]


def default_config() -> dict:
    """Flat defaults: generator, training, Cubist and evaluation keys; one shared seed."""
    cfg: dict = {}
    cfg.update(GeneratorConfig().to_dict())
    cfg.update(TrainConfig().to_dict())
    cfg.update(CubistConfig().to_dict())
    cfg.update(EVAL_DEFAULTS)
    return cfg


def resolve_config(path: str | None, overrides: dict, env: dict | None = None) -> dict:
    """defaults < config file < DEMANDCAST_SEED < explicit flags."""
    env = os.environ if env is None else env
    cfg = default_config()
    if path:
        try:
            loaded = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        unknown = set(loaded) - set(cfg)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(loaded)
    if env.get(SEED_ENV):
        try:
            cfg["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer") from None
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    return cfg


def _sub(cfg: dict, cls):
    names = _field_names(cls)
    d = {k: cfg[k] for k in names if k in cfg}
    if cls is GeneratorConfig:
        d["event_weeks"] = tuple(d["event_weeks"])
        d["event_lift_range"] = tuple(d["event_lift_range"])
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------------------
# manifests


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out_dir: Path, command: str, args, cfg: dict, outputs: list[Path],
                   tag: str | None = None) -> Path:
    name = f"manifest-{command}" + (f"-{tag}" if tag else "") + ".json"
    doc = {
        "command": command,
        "config_path": args.config,
        "config": cfg,
        "seed": cfg["seed"],
        "out_dir": str(out_dir),
        "artifacts": {p.name: _sha256(p) for p in sorted(outputs)},
    }
    path = out_dir / name
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# shared steps


def _load_data(path: str) -> Dataset:
    if not path:
        raise DataError("--data is required")
    return load_csv(path)


def _training_view(data: Dataset, cfg: dict) -> tuple[Dataset, Dataset, list[int], FeatureSchema]:
    """National series, backtest cutoffs, training split and its schema."""
    national = aggregate_national(data)
    cutoffs = window_cutoffs(national, cfg["horizon"], cfg["windows"])
    train = Dataset(tuple(s.slice_weeks(s.start_week, cutoffs[0]) for s in national
                          if s.start_week <= cutoffs[0]))
    if not len(train):
        raise DataError(f"no history at or before week {cutoffs[0]}")
    return national, train, cutoffs, fit_schema(train)


def _load_model(path: str, schema: FeatureSchema):
    if not path:
        raise DataError("--checkpoint is required")
    try:
        fmt = json.loads(Path(path).read_text()).get("format", "")
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None
    if fmt.endswith("cubist"):
        return "CUBIST", load_cubist(path, schema)
    model = load_checkpoint(path, schema)
    return model.config.variant, model


def _restrict(data: Dataset, model) -> Dataset:
    vertical = getattr(model, "meta", {}).get("vertical")
    return data.for_vertical(vertical) if vertical else data


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args, cfg: dict, out: Path) -> list[Path]:
    gen = _sub(cfg, GeneratorConfig)
    path = out / args.output
    path.write_text(dataset_to_csv(generate_synthetic(gen)))
    return [path]


def cmd_train(args, cfg: dict, out: Path) -> list[Path]:
    data = _load_data(args.data)
    _, train, _, schema = _training_view(data, cfg)
    if args.model == "cubist":
        model = fit_cubist(train, schema, _sub(cfg, CubistConfig))
        ckpt = out / "cubist.json"
        save_cubist(model, ckpt)
        return [ckpt, _save_schema(schema, ckpt)]

    tc = _sub(cfg, TrainConfig)
    if args.stage == "global":
        ckpt, log_path = out / "armdn.json", out / "train-log.jsonl"
        model, _ = train_global(train, tc, schema, jsonl_logger(log_path))
    else:
        if not args.vertical:
            raise ConfigError("--stage finetune needs --vertical")
        if not args.checkpoint:
            raise ConfigError("--stage finetune needs --checkpoint (the global model)")
        base = load_checkpoint(args.checkpoint, schema)
        ckpt = out / f"armdn-{args.vertical}.json"
        log_path = out / f"train-log-{args.vertical}.jsonl"
        model, _ = finetune_vertical(base, train, args.vertical, tc, schema, jsonl_logger(log_path))
    save_checkpoint(model, ckpt)
    return [ckpt, _save_schema(schema, ckpt), log_path]


def _save_schema(schema: FeatureSchema, ckpt: Path) -> Path:
    path = ckpt.with_name(ckpt.stem + "-schema.json")
    schema.save(path)
    return path


def cmd_forecast(args, cfg: dict, out: Path) -> list[Path]:
    data = _load_data(args.data)
    national, _, cutoffs, schema = _training_view(data, cfg)
    variant, model = _load_model(args.checkpoint, schema)
    horizon = cfg["horizon"]
    as_of = args.as_of if args.as_of is not None else cutoffs[-1]
    ratios = compute_ratios(data, as_of) if args.fc_split else None

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["sku_id", "region_id", "vertical_id", "week", "horizon_week", "forecast"])
    for s in sorted(_restrict(national, model), key=lambda s: s.sku_id):
        if s.start_week > as_of or s.end_week < as_of + horizon:
            continue
        history = s.slice_weeks(s.start_week, as_of)
        future = future_rows(s, as_of + 1, horizon)
        if variant == "CUBIST":
            preds = forecast_cubist(model, history, schema, horizon, future)
        else:
            preds = [p for _, p in armdn_forecast(model, history, schema, horizon, future,
                                                  statistic=cfg["statistic"])]
        if ratios is not None:
            parts = disaggregate(preds, ratios, s.sku_id, integer=args.integer)
        else:
            parts = {s.region_id: preds}
        for region, values in parts.items():
            for h, v in enumerate(values, start=1):
                writer.writerow([s.sku_id, region, s.vertical_id, as_of + h, h, repr(float(v))])
    path = out / "forecasts.csv"
    path.write_text(buf.getvalue())
    return [path]


def cmd_evaluate(args, cfg: dict, out: Path) -> list[Path]:
    data = _load_data(args.data)
    national, train, cutoffs, schema = _training_view(data, cfg)
    horizon = cfg["horizon"]
    meta: dict = {"cutoffs": cutoffs, "fc_split": bool(args.fc_split)}
    if args.variant == "persistence":
        variant, model, fc = "PERSISTENCE", None, persistence_forecaster()
    else:
        variant, model = _load_model(args.checkpoint, schema)
        if variant == "CUBIST":
            fc = cubist_forecaster(model, schema)
        else:
            fc = armdn_forecaster(model, schema, cfg["statistic"])
            if args.train_nll:
                seen = _restrict(train, model)
                meta["train_nll"], meta["val_nll"] = evaluate_nll(
                    model.params, model.config, prepare_series(seen, schema, cfg["val_weeks"]))
        national = _restrict(national, model)
    rows = backtest(national, fc, cutoffs, horizon)
    if args.fc_split:
        keep = {s.sku_id for s in national}
        regional = data.filter(lambda s: s.sku_id in keep)
        rows = split_to_regions(rows, regional, cutoffs, integer=args.integer)
    report = ForecastReport.build(rows, variant, config_hash(cfg), cfg["seed"], meta)
    json_path, csv_path = out / "report.json", out / "report.csv"
    emit_report(report, json_path, "json")
    emit_report(report, csv_path, "csv")
    _print_report(report)
    return [json_path, csv_path]


def _fmt_pct(x) -> str:
    return "   n/a" if x is None else f"{x:6.2f}"


def _print_report(report: ForecastReport) -> None:
    agg = report.aggregates
    print(f"variant {report.variant}  config {report.config_hash}  seed {report.seed}")
    for w, block in agg["per_window"].items():
        weeks = "  ".join(f"week{h} {_fmt_pct(v)}" for h, v in block["weeks"].items())
        print(f"window {w}: {weeks}  overall {_fmt_pct(block['overall'])}")
    hr = agg["hit_rate"]
    print(f"overall wMAPE {_fmt_pct(agg['overall'])}  hit rate "
          f"{'n/a' if hr is None else f'{hr:.3f}'}")


def cmd_ablate(args, cfg: dict, out: Path) -> list[Path]:
    data = _load_data(args.data)
    national = aggregate_national(data)
    variants = args.variants or list(ABLATION_VARIANTS)
    config = AblationConfig(_sub(cfg, TrainConfig), _sub(cfg, CubistConfig),
                            cfg["horizon"], cfg["windows"])
    result = run_ablation(national, variants, config)
    path = out / "ablation.json"
    path.write_text(json.dumps({"config_hash": config_hash(cfg), "seed": cfg["seed"],
                                "table": result.table}, indent=1, sort_keys=True) + "\n")
    outputs = [path]
    for v, report in result.reports.items():
        p = out / f"report-{v}.json"
        emit_report(report, p)
        outputs.append(p)
    for r in result.table:
        nll = "n/a" if r["heldout_nll"] is None else f"{r['heldout_nll']:.4f}"
        print(f"{r['variant']:<12} nll {nll:>8}  wMAPE {_fmt_pct(r['wmape'])}")
    return outputs


COMMANDS = {
    "generate": cmd_generate, "train": cmd_train, "forecast": cmd_forecast,
    "evaluate": cmd_evaluate, "ablate": cmd_ablate,
}


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat JSON config file; flags override it")
    common.add_argument("--out-dir", default=".", help="directory for every output file")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, default=1)

    p = argparse.ArgumentParser(prog="demandcast", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic sales CSV")
    g.add_argument("--skus", dest="n_skus", type=int)
    g.add_argument("--weeks", dest="n_weeks", type=int)
    g.add_argument("--verticals", dest="n_verticals", type=int)
    g.add_argument("--regions", dest="n_regions", type=int)
    g.add_argument("--modality", dest="demand_modality", choices=("unimodal", "bimodal"))
    g.add_argument("--noise", dest="noise_scale", type=float)
    g.add_argument("--output", default="data.csv")

    def data_flags(sp):
        sp.add_argument("--data", help="sales CSV")
        sp.add_argument("--horizon", type=int)
        sp.add_argument("--windows", type=int, help="number of trailing test windows")

    t = sub.add_parser("train", parents=[common], help="fit AR-MDN or Cubist")
    data_flags(t)
    t.add_argument("--model", choices=("armdn", "cubist"), default="armdn")
    t.add_argument("--stage", choices=("global", "finetune"), default="global")
    t.add_argument("--vertical")
    t.add_argument("--checkpoint", help="global model to fine-tune")
    t.add_argument("--variant", choices=("ARMDN", "R_MDN", "A_MDN", "AR"))
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr0", type=float)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--dropout", dest="dropout_p", type=float)
    t.add_argument("--mixtures", dest="K", type=int)
    t.add_argument("--committees", type=int)
    t.add_argument("--neighbors", type=int)

    f = sub.add_parser("forecast", parents=[common], help="forecast past a given week")
    data_flags(f)
    f.add_argument("--checkpoint")
    f.add_argument("--as-of", dest="as_of", type=int, help="last observed week")
    f.add_argument("--fc-split", action="store_true", help="disaggregate to regions")
    f.add_argument("--integer", action="store_true", help="integer regional split")
    f.add_argument("--statistic", choices=("mean", "median"))

    e = sub.add_parser("evaluate", parents=[common], help="backtest and write a report")
    data_flags(e)
    e.add_argument("--checkpoint")
    e.add_argument("--variant", choices=("model", "persistence"), default="model")
    e.add_argument("--fc-split", action="store_true")
    e.add_argument("--integer", action="store_true")
    e.add_argument("--train-nll", action="store_true",
                   help="also report teacher-forced NLL on the training split")
    e.add_argument("--statistic", choices=("mean", "median"))

    a = sub.add_parser("ablate", parents=[common], help="compare model variants")
    data_flags(a)
    a.add_argument("--variants", nargs="+", choices=ABLATION_VARIANTS)
    a.add_argument("--epochs", type=int)
    a.add_argument("--lr0", type=float)
    a.add_argument("--dropout", dest="dropout_p", type=float)
    a.add_argument("--committees", type=int)
    return p


_NON_CONFIG = {"command", "config", "out_dir", "threads", "output", "data", "model", "stage",
               "vertical", "checkpoint", "as_of", "fc_split", "integer", "train_nll", "variants"}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return ExitCode.OK if exc.code == 0 else ExitCode.USAGE
    overrides = {k: v for k, v in vars(args).items() if k not in _NON_CONFIG}
    if args.command == "evaluate":
        overrides.pop("variant")
    try:
        cfg = resolve_config(args.config, overrides)
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with threadpool_limits(limits=args.threads):
            outputs = COMMANDS[args.command](args, cfg, out)
        tag = None
        if args.command == "train":
            tag = "cubist" if args.model == "cubist" else (
                args.vertical if args.stage == "finetune" else None)
        write_manifest(out, args.command, args, cfg, outputs, tag)
    except SchemaMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ExitCode.SCHEMA_MISMATCH
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ExitCode.DIVERGED
    except (DataError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ExitCode.DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ExitCode.CONFIG
    return ExitCode.OK


if __name__ == "__main__":
    sys.exit(main())
