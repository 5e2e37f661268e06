"""Metrics, backtest windows, ablations and forecast reports."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .armdn import VARIANTS as NEURAL_VARIANTS, ArmdnModel, forecast as armdn_forecast
from .cubist import CubistConfig, fit_cubist, forecast_cubist
from .dataset import DataError, Dataset, SeriesInstance, future_rows
from .features import FeatureSchema, fit_schema
from .hierarchy import compute_ratios, disaggregate
from .train import TrainConfig, evaluate_nll, prepare_series, train_global

REPORT_FORMAT = "demandcast.report"
REPORT_VERSION = 1
HIT_CUTOFF = 30.0
ABLATION_VARIANTS = ("ARMDN", "R_MDN", "A_MDN", "AR", "CUBIST", "PERSISTENCE")
CSV_COLUMNS = ("sku_id", "vertical_id", "horizon_week", "actual", "forecast", "abs_err",
               "region_id", "window")


# ---------------------------------------------------------------------------
# metrics


def wmape(actuals, forecasts) -> float:
    """Weighted MAPE in percent: 100 * sum|Y - y| / sum Y."""
    Y = np.asarray(actuals, dtype=np.float64).ravel()
    y = np.asarray(forecasts, dtype=np.float64).ravel()
    if Y.shape != y.shape:
        raise ValueError(f"{len(Y)} actuals vs {len(y)} forecasts")
    if not len(Y):
        raise ValueError("wMAPE of an empty set")
    total = math.fsum(Y)
    if total <= 0:
        raise ValueError("wMAPE undefined: total actual demand is zero")
    return 100.0 * math.fsum(np.abs(Y - y)) / total


def hit_rate(per_sku_errors, cutoff_pct: float = HIT_CUTOFF) -> float:
    """Fraction of SKUs whose error (percent) is below the cutoff."""
    e = np.asarray(per_sku_errors, dtype=np.float64)
    if not len(e):
        raise ValueError("hit rate of an empty set")
    return float(np.count_nonzero(e < cutoff_pct)) / len(e)


# ---------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class ReportRow:
    sku_id: str
    region_id: str
    vertical_id: str
    window: int
    horizon_week: int
    actual: float
    forecast: float

    @property
    def abs_err(self) -> float:
        return abs(self.actual - self.forecast)


def _row_key(r: ReportRow):
    return (r.window, r.sku_id, r.region_id, r.horizon_week)


def _safe_wmape(rows: Sequence[ReportRow]) -> float | None:
    try:
        return wmape([r.actual for r in rows], [r.forecast for r in rows])
    except ValueError:
        return None


def per_sku_errors(rows: Sequence[ReportRow]) -> dict[str, float]:
    """Per-SKU wMAPE over all its test weeks; SKUs without sales are left out."""
    by_sku: dict[str, list[ReportRow]] = {}
    for r in rows:
        by_sku.setdefault(r.sku_id, []).append(r)
    out = {}
    for sku, group in sorted(by_sku.items()):
        e = _safe_wmape(group)
        if e is not None:
            out[sku] = e
    return out


def _grouped(rows, key) -> dict:
    out: dict = {}
    for r in rows:
        out.setdefault(key(r), []).append(r)
    return dict(sorted(out.items()))


def compute_aggregates(rows: Sequence[ReportRow], cutoff_pct: float = HIT_CUTOFF) -> dict:
    """wMAPE overall / per horizon week / per window / per vertical, plus hit rate.

    Undefined values (no sales in the group) are None.
    """
    errs = per_sku_errors(rows)
    per_window = {}
    for w, group in _grouped(rows, lambda r: r.window).items():
        per_window[str(w)] = {
            "weeks": {str(h): _safe_wmape(g)
                      for h, g in _grouped(group, lambda r: r.horizon_week).items()},
            "overall": _safe_wmape(group),
        }
    return {
        "overall": _safe_wmape(rows) if rows else None,
        "per_horizon": {str(h): _safe_wmape(g)
                        for h, g in _grouped(rows, lambda r: r.horizon_week).items()},
        "per_window": per_window,
        "per_vertical": {v: _safe_wmape(g)
                         for v, g in _grouped(rows, lambda r: r.vertical_id).items()},
        "hit_rate": hit_rate(list(errs.values()), cutoff_pct) if errs else None,
        "hit_cutoff": cutoff_pct,
        "n_skus": len({r.sku_id for r in rows}),
        "n_skus_scored": len(errs),
        "n_rows": len(rows),
    }


@dataclass(frozen=True)
class ForecastReport:
    variant: str
    config_hash: str
    seed: int
    rows: tuple[ReportRow, ...]
    aggregates: dict
    meta: dict = field(default_factory=dict)

    @classmethod
    def build(cls, rows: Sequence[ReportRow], variant: str, config_hash: str, seed: int,
              meta: dict | None = None) -> ForecastReport:
        rows = tuple(sorted(rows, key=_row_key))
        return cls(variant, config_hash, int(seed), rows, compute_aggregates(rows), dict(meta or {}))

    def horizon_wmape(self, h: int) -> float | None:
        return self.aggregates["per_horizon"].get(str(h))

    def to_dict(self) -> dict:
        return {
            "format": REPORT_FORMAT,
            "version": REPORT_VERSION,
            "variant": self.variant,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "meta": self.meta,
            "aggregates": self.aggregates,
            "rows": [asdict(r) | {"abs_err": r.abs_err} for r in self.rows],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1, allow_nan=False) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in self.rows:
            writer.writerow([r.sku_id, r.vertical_id, r.horizon_week, repr(float(r.actual)),
                             repr(float(r.forecast)), repr(r.abs_err), r.region_id, r.window])
        return buf.getvalue()


def config_hash(config: dict) -> str:
    text = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def emit_report(report: ForecastReport, path: str | Path, fmt: str = "json") -> str:
    """Write the report; returns the sha256 of the bytes written."""
    if fmt == "json":
        text = report.to_json()
    elif fmt == "csv":
        text = report.to_csv()
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    Path(path).write_text(text)
    return hashlib.sha256(text.encode()).hexdigest()


def load_report(path: str | Path) -> ForecastReport:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != REPORT_FORMAT or doc.get("version") != REPORT_VERSION:
        raise ValueError(f"{path}: not a version-{REPORT_VERSION} forecast report")
    rows = tuple(ReportRow(**{k: v for k, v in r.items() if k != "abs_err"}) for r in doc["rows"])
    return ForecastReport(doc["variant"], doc["config_hash"], doc["seed"], rows,
                          doc["aggregates"], doc["meta"])


# ---------------------------------------------------------------------------
# backtesting


Forecaster = Callable[[SeriesInstance, Sequence, int], Sequence[float]]


def window_cutoffs(dataset: Dataset, horizon: int, windows: int) -> list[int]:
    """Last training week of each of ``windows`` consecutive test windows ending at the data's end."""
    if horizon < 1 or windows < 1:
        raise ValueError("horizon and windows must be >= 1")
    if not len(dataset):
        raise DataError("empty dataset")
    last = max(s.end_week for s in dataset)
    first = last - windows * horizon
    return [first + j * horizon for j in range(windows)]


def persistence_forecast(series: SeriesInstance, horizon: int) -> list[float]:
    """Last observed demand repeated over the horizon."""
    return [float(series.demand[-1])] * horizon


def backtest(dataset: Dataset, forecaster: Forecaster, cutoffs: Sequence[int],
             horizon: int) -> list[ReportRow]:
    """Forecast every series covering each window from its history up to the cutoff."""
    rows = []
    for w, cut in enumerate(cutoffs):
        for s in dataset:
            if s.start_week > cut or s.end_week < cut + horizon:
                continue
            history = s.slice_weeks(s.start_week, cut)
            preds = forecaster(history, future_rows(s, cut + 1, horizon), horizon)
            for h in range(horizon):
                rows.append(ReportRow(s.sku_id, s.region_id, s.vertical_id, w, h + 1,
                                      float(s.demand[cut + 1 + h - s.start_week]), float(preds[h])))
    return rows


def split_to_regions(national_rows: Sequence[ReportRow], regional: Dataset,
                     cutoffs: Sequence[int], integer: bool = False) -> list[ReportRow]:
    """Disaggregate national forecast rows with ratios as of each window's cutoff."""
    ratios = {w: compute_ratios(regional, cut) for w, cut in enumerate(cutoffs)}
    series = {s.key: s for s in regional}
    out = []
    for (w, sku), group in _grouped(national_rows, lambda r: (r.window, r.sku_id)).items():
        group.sort(key=lambda r: r.horizon_week)
        parts = disaggregate([r.forecast for r in group], ratios[w], sku, integer=integer)
        for region, values in parts.items():
            s = series[(sku, region)]
            for r, v in zip(group, values):
                week = cutoffs[w] + r.horizon_week
                actual = float(s.demand[week - s.start_week]) if s.start_week <= week <= s.end_week else 0.0
                out.append(replace(r, region_id=region, actual=actual, forecast=float(v)))
    return out


def armdn_forecaster(model: ArmdnModel, schema: FeatureSchema, statistic: str = "mean") -> Forecaster:
    def run(history, future, horizon):
        return [p for _, p in armdn_forecast(model, history, schema, horizon, future,
                                             statistic=statistic)]
    return run


def cubist_forecaster(model, schema: FeatureSchema) -> Forecaster:
    def run(history, future, horizon):
        return forecast_cubist(model, history, schema, horizon, future)
    return run


def persistence_forecaster() -> Forecaster:
    return lambda history, future, horizon: persistence_forecast(history, horizon)


def heldout_nll(model: ArmdnModel, dataset: Dataset, schema: FeatureSchema,
                cutoffs: Sequence[int], horizon: int) -> float:
    """Teacher-forced NLL (model space) over the test-window cells only."""
    total, count = 0.0, 0.0
    for cut in cutoffs:
        part = Dataset(tuple(s.slice_weeks(s.start_week, cut + horizon) for s in dataset
                             if s.start_week <= cut and s.end_week >= cut + horizon))
        if not len(part):
            continue
        instances = prepare_series(part, schema, val_weeks=horizon)
        n = float(sum(s.val_mask.sum() for s in instances))
        _, val = evaluate_nll(model.params, model.config, instances)
        total += val * n
        count += n
    if not count:
        raise DataError("no series cover the test windows")
    return total / count


# ---------------------------------------------------------------------------
# ablation


@dataclass(frozen=True)
class AblationConfig:
    train: TrainConfig = TrainConfig()
    cubist: CubistConfig = CubistConfig()
    horizon: int = 4
    windows: int = 1

    def to_dict(self) -> dict:
        return {"train": self.train.to_dict(), "cubist": self.cubist.to_dict(),
                "horizon": self.horizon, "windows": self.windows}


@dataclass
class AblationResult:
    table: list[dict]
    reports: dict[str, ForecastReport]
    models: dict = field(default_factory=dict)

    def row(self, variant: str) -> dict:
        for r in self.table:
            if r["variant"] == variant:
                return r
        raise KeyError(variant)


def run_ablation(dataset: Dataset, variants: Sequence[str],
                 config: AblationConfig = AblationConfig()) -> AblationResult:
    """Train and backtest each variant on one shared split, schema and seed."""
    unknown = [v for v in variants if v not in ABLATION_VARIANTS]
    if unknown:
        raise ValueError(f"unknown variant(s) {unknown}; choose from {ABLATION_VARIANTS}")
    cutoffs = window_cutoffs(dataset, config.horizon, config.windows)
    train = Dataset(tuple(s.slice_weeks(s.start_week, cutoffs[0]) for s in dataset
                          if s.start_week <= cutoffs[0]))
    schema = fit_schema(train)
    chash = config_hash(config.to_dict())
    table, reports, models = [], {}, {}
    for v in variants:
        nll = None
        if v in NEURAL_VARIANTS:
            tc = replace(config.train, variant=v, K=1 if v == "AR" else config.train.K)
            model, _ = train_global(train, tc, schema)
            fc = armdn_forecaster(model, schema)
            nll = heldout_nll(model, dataset, schema, cutoffs, config.horizon)
        elif v == "CUBIST":
            model = fit_cubist(train, schema, config.cubist)
            fc = cubist_forecaster(model, schema)
        else:
            model = None
            fc = persistence_forecaster()
        report = ForecastReport.build(backtest(dataset, fc, cutoffs, config.horizon), v, chash,
                                      config.train.seed, {"cutoffs": cutoffs, "heldout_nll": nll})
        reports[v], models[v] = report, model
        agg = report.aggregates
        table.append({"variant": v, "heldout_nll": nll, "wmape": agg["overall"],
                      "per_horizon": agg["per_horizon"], "hit_rate": agg["hit_rate"]})
    return AblationResult(table, reports, models)
