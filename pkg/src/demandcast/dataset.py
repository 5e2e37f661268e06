"""Weekly sales series: data model, synthetic generator, CSV ingestion, windowing."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

CSV_COLUMNS = (
    "sku_id", "region_id", "vertical_id", "week", "demand",
    "listed_price", "discounted_price", "effective_price", "event_type",
    "deal_card", "banner", "no_cost_emi", "exchange", "exclusive",
    "oos_pct", "tier",
)
BINARY_FIELDS = ("deal_card", "banner", "no_cost_emi", "exchange", "exclusive")
NO_EVENT = "none"
_PRICE_TOL = 1e-9


class DataError(ValueError):
    """Raised for malformed or inconsistent sales data."""


@dataclass(frozen=True, slots=True)
class RawFeatureRow:
    listed_price: float
    discounted_price: float
    effective_price: float
    event_type: str = NO_EVENT
    deal_card: int = 0
    banner: int = 0
    no_cost_emi: int = 0
    exchange: int = 0
    exclusive: int = 0
    out_of_stock_pct: float = 0.0
    product_tier: str = "B"

    def __post_init__(self):
        tol = _PRICE_TOL * max(1.0, abs(self.listed_price))
        if not (self.effective_price <= self.discounted_price + tol
                and self.discounted_price <= self.listed_price + tol):
            raise DataError(
                f"prices must satisfy effective <= discounted <= listed, got "
                f"{self.effective_price}, {self.discounted_price}, {self.listed_price}"
            )
        for name in BINARY_FIELDS:
            if getattr(self, name) not in (0, 1):
                raise DataError(f"{name} must be 0 or 1, got {getattr(self, name)!r}")
        if not 0.0 <= self.out_of_stock_pct <= 1.0:
            raise DataError(f"out_of_stock_pct outside [0, 1]: {self.out_of_stock_pct}")

    @property
    def is_event(self) -> bool:
        return self.event_type != NO_EVENT


@dataclass(frozen=True)
class SeriesInstance:
    """One (SKU, region) weekly demand series with aligned feature rows."""

    sku_id: str
    region_id: str
    vertical_id: str
    start_week: int
    demand: np.ndarray
    features: tuple[RawFeatureRow, ...]

    def __post_init__(self):
        demand = np.array(self.demand, dtype=np.float64)
        demand.setflags(write=False)
        object.__setattr__(self, "demand", demand)
        object.__setattr__(self, "features", tuple(self.features))
        if demand.ndim != 1 or len(demand) < 1:
            raise DataError(f"{self.key}: demand must be a non-empty 1-d sequence")
        if len(demand) != len(self.features):
            raise DataError(
                f"{self.key}: {len(demand)} demand values but {len(self.features)} feature rows"
            )
        if not np.all(np.isfinite(demand)) or np.any(demand < 0):
            raise DataError(f"{self.key}: demand must be finite and non-negative")

    @property
    def key(self) -> tuple[str, str]:
        return (self.sku_id, self.region_id)

    @property
    def end_week(self) -> int:
        return self.start_week + len(self.demand) - 1

    @property
    def weeks(self) -> np.ndarray:
        return np.arange(self.start_week, self.end_week + 1)

    def __len__(self) -> int:
        return len(self.demand)

    def row_at(self, week: int) -> RawFeatureRow:
        return self.features[week - self.start_week]

    def slice_weeks(self, first: int, last: int) -> SeriesInstance:
        """Sub-series covering weeks first..last inclusive (clipped to the data)."""
        lo = max(first, self.start_week) - self.start_week
        hi = min(last, self.end_week) - self.start_week + 1
        if hi <= lo:
            raise DataError(f"{self.key}: no weeks in [{first}, {last}]")
        return replace(
            self,
            start_week=self.start_week + lo,
            demand=self.demand[lo:hi],
            features=self.features[lo:hi],
        )

    def equals(self, other: SeriesInstance) -> bool:
        return (
            self.key == other.key
            and self.vertical_id == other.vertical_id
            and self.start_week == other.start_week
            and np.array_equal(self.demand, other.demand)
            and self.features == other.features
        )


@dataclass(frozen=True)
class Dataset:
    instances: tuple[SeriesInstance, ...] = ()
    # keys dropped by split_windows for lack of coverage
    excluded: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "instances", tuple(self.instances))
        keys = [s.key for s in self.instances]
        if len(set(keys)) != len(keys):
            raise DataError("duplicate (sku_id, region_id) series in dataset")

    def __len__(self) -> int:
        return len(self.instances)

    def __iter__(self) -> Iterator[SeriesInstance]:
        return iter(self.instances)

    def __getitem__(self, i: int) -> SeriesInstance:
        return self.instances[i]

    @property
    def verticals(self) -> list[str]:
        return sorted({s.vertical_id for s in self.instances})

    @property
    def regions(self) -> list[str]:
        return sorted({s.region_id for s in self.instances})

    def get(self, sku_id: str, region_id: str) -> SeriesInstance:
        for s in self.instances:
            if s.sku_id == sku_id and s.region_id == region_id:
                return s
        raise KeyError((sku_id, region_id))

    def filter(self, predicate) -> Dataset:
        return Dataset(tuple(s for s in self.instances if predicate(s)))

    def for_vertical(self, vertical_id: str) -> Dataset:
        return self.filter(lambda s: s.vertical_id == vertical_id)


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass(frozen=True)
class GeneratorConfig:
    n_skus: int = 100
    n_verticals: int = 4
    n_regions: int = 1
    n_weeks: int = 80
    event_weeks: tuple[int, ...] = (11, 14, 18, 30, 43, 52, 61, 70)
    event_lift_range: tuple[float, float] = (1.5, 3.0)
    price_change_prob: float = 0.08
    demand_modality: str = "unimodal"
    noise_scale: float = 0.25
    seed: int = 0
    late_launch_prob: float = 0.15
    minor_event_prob: float = 0.03
    stockout_prob: float = 0.02

    def __post_init__(self):
        object.__setattr__(self, "event_weeks", tuple(sorted({int(w) for w in self.event_weeks})))
        object.__setattr__(self, "event_lift_range", tuple(float(v) for v in self.event_lift_range))
        if self.n_skus < 0:
            raise ValueError("n_skus must be >= 0")
        for name in ("n_verticals", "n_regions", "n_weeks"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("price_change_prob", "late_launch_prob", "minor_event_prob", "stockout_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be a probability")
        lo, hi = self.event_lift_range
        if len(self.event_lift_range) != 2 or lo < 1.0 or hi < lo:
            raise ValueError("event_lift_range must be (lo, hi) with 1 <= lo <= hi")
        if self.demand_modality not in ("unimodal", "bimodal"):
            raise ValueError("demand_modality must be 'unimodal' or 'bimodal'")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["event_weeks"] = list(self.event_weeks)
        d["event_lift_range"] = list(self.event_lift_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> GeneratorConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown generator config keys: {sorted(unknown)}")
        return cls(**d)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> GeneratorConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))


_TIERS = ("A", "B", "C")
_TIER_LEVEL = {"A": 0.7, "B": 0.0, "C": -0.7}
# bimodal demand: equal-weight low/high regimes with unit mean
_MODES = (0.4, 1.6)


def generate_synthetic(config: GeneratorConfig) -> Dataset:
    """Draw a reproducible synthetic e-retail dataset.

    Expected weekly demand is a log-normal SKU base level modulated by price
    elasticity, a decaying lift after each price cut, yearly and
    week-of-month seasonality, event lifts (with dips in the weeks around
    major events), a ramp-up for late launches and stockouts.  Observed
    demand is the rounded product with multiplicative log-normal noise, split
    across regions by a multinomial draw on fixed per-SKU regional shares.
    """
    rng = np.random.default_rng(config.seed)
    n_weeks = config.n_weeks
    events = set(config.event_weeks)
    near_event = {w + d for w in events for d in (-1, 1)} - events
    lift_lo, lift_hi = config.event_lift_range

    verticals = []
    for v in range(config.n_verticals):
        verticals.append(dict(
            level=rng.uniform(2.2, 3.6),
            log_price=rng.uniform(4.0, 8.0),
            elasticity=rng.uniform(0.8, 2.0),
            season_amp=rng.uniform(0.05, 0.3),
            season_phase=rng.uniform(0.0, 2 * np.pi),
            cut_lift=rng.uniform(0.3, 1.0),
            cut_decay=rng.uniform(1.0, 3.0),
        ))

    instances = []
    for i in range(config.n_skus):
        v = i % config.n_verticals
        vp = verticals[v]
        tier = _TIERS[rng.integers(len(_TIERS))]
        base = math.exp(vp["level"] + _TIER_LEVEL[tier] + rng.normal(0.0, 0.4))
        listed = round(math.exp(vp["log_price"] + rng.normal(0.0, 0.3)), 2)
        late = n_weeks > 8 and rng.random() < config.late_launch_prob
        start = int(rng.integers(1, n_weeks // 2)) if late else 0
        has_emi = rng.random() < 0.3
        exchange = int(rng.random() < 0.2)
        exclusive = int(rng.random() < 0.15)
        shares = rng.dirichlet(np.full(config.n_regions, 4.0))

        discount = 0.0
        last_price = None
        weeks_since_cut = None
        rows: list[RawFeatureRow] = []
        national: list[float] = []
        for w in range(start, n_weeks):
            if rng.random() < config.price_change_prob:
                discount = round(float(rng.uniform(0.0, 0.35)) / 0.05) * 0.05
            if w in events:
                event_type = "major"
                week_discount = max(discount, float(rng.uniform(0.2, 0.5)))
                lift = rng.uniform(lift_lo, lift_hi)
            elif rng.random() < config.minor_event_prob:
                event_type = "minor"
                week_discount = max(discount, float(rng.uniform(0.1, 0.3)))
                lift = rng.uniform(1.1, 1.5)
            else:
                event_type = NO_EVENT
                week_discount = discount
                lift = 1.0
            discounted = round(listed * (1.0 - week_discount), 2)
            effective = round(discounted * (1.0 - 0.05 * exchange), 2)
            deal_card = int(event_type != NO_EVENT or rng.random() < 0.1)
            banner = int((event_type == "major" and rng.random() < 0.6) or rng.random() < 0.05)
            no_cost_emi = int(has_emi or event_type == "major")
            oos = float(rng.uniform(0.1, 0.6)) if rng.random() < config.stockout_prob else 0.0
            rows.append(RawFeatureRow(
                listed_price=listed, discounted_price=discounted, effective_price=effective,
                event_type=event_type, deal_card=deal_card, banner=banner,
                no_cost_emi=no_cost_emi, exchange=exchange, exclusive=exclusive,
                out_of_stock_pct=round(oos, 4), product_tier=tier,
            ))

            if last_price is not None and effective < last_price * (1 - 1e-9):
                weeks_since_cut = 0
            elif weeks_since_cut is not None:
                weeks_since_cut += 1
            last_price = effective

            mean = base * (effective / listed) ** (-vp["elasticity"])
            if weeks_since_cut is not None:
                mean *= 1.0 + vp["cut_lift"] * math.exp(-weeks_since_cut / vp["cut_decay"])
            mean *= 1.0 + vp["season_amp"] * math.sin(2 * np.pi * w / 52 + vp["season_phase"])
            if (w - 1) % 4 == 0:
                mean *= 1.1
            mean *= lift
            if w in near_event:
                mean *= 0.85
            if late:
                mean *= 1.0 - 0.7 * math.exp(-(w - start) / 4.0)
            mean *= 1.0 - oos
            if config.demand_modality == "bimodal":
                mean *= _MODES[rng.integers(2)]
            s = config.noise_scale
            noise = math.exp(rng.normal(-0.5 * s * s, s)) if s > 0 else 1.0
            national.append(float(np.rint(mean * noise)))

        sku_id = f"SKU{i:04d}"
        nat = np.asarray(national)
        if config.n_regions == 1:
            split = nat[:, None]
        else:
            split = np.stack([rng.multinomial(int(y), shares) for y in nat]).astype(np.float64)
        for r in range(config.n_regions):
            instances.append(SeriesInstance(
                sku_id=sku_id, region_id=f"FC{r}", vertical_id=f"V{v}",
                start_week=start, demand=split[:, r], features=tuple(rows),
            ))
    return Dataset(tuple(instances))


def aggregate_national(dataset: Dataset, region_id: str = "ALL") -> Dataset:
    """Sum regional series of each SKU into one national series.

    Causal features are set nationally, so the feature rows of the first
    region are kept; weeks missing in some regions count as zero demand.
    """
    by_sku: dict[str, list[SeriesInstance]] = {}
    for s in dataset:
        by_sku.setdefault(s.sku_id, []).append(s)
    out = []
    for sku, group in by_sku.items():
        group.sort(key=lambda s: s.region_id)
        if len(group) == 1:
            out.append(replace(group[0], region_id=region_id))
            continue
        start = min(s.start_week for s in group)
        end = max(s.end_week for s in group)
        demand = np.zeros(end - start + 1)
        rows: list[RawFeatureRow | None] = [None] * len(demand)
        for s in group:
            lo = s.start_week - start
            demand[lo:lo + len(s)] += s.demand
            for j, row in enumerate(s.features):
                if rows[lo + j] is None:
                    rows[lo + j] = row
        out.append(SeriesInstance(sku, region_id, group[0].vertical_id, start, demand, tuple(rows)))
    return Dataset(tuple(out))


# ---------------------------------------------------------------------------
# CSV io


def _fmt(x: float) -> str:
    return repr(float(x))


def dataset_to_csv(dataset: Dataset) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for s in dataset:
        for week, y, row in zip(s.weeks, s.demand, s.features):
            writer.writerow([
                s.sku_id, s.region_id, s.vertical_id, int(week), _fmt(y),
                _fmt(row.listed_price), _fmt(row.discounted_price), _fmt(row.effective_price),
                row.event_type, row.deal_card, row.banner, row.no_cost_emi, row.exchange,
                row.exclusive, _fmt(row.out_of_stock_pct), row.product_tier,
            ])
    return buf.getvalue()


def save_csv(dataset: Dataset, path: str | Path) -> None:
    Path(path).write_text(dataset_to_csv(dataset))


def load_csv(path: str | Path) -> Dataset:
    """Read the sales CSV; one series per (sku_id, region_id), weeks ascending."""
    with open(path, newline="") as fh:
        return parse_csv(fh)


def parse_csv(lines: Iterable[str]) -> Dataset:
    reader = csv.reader(lines)
    try:
        header = next(reader)
    except StopIteration:
        raise DataError("row 1: missing header") from None
    if tuple(h.strip() for h in header) != CSV_COLUMNS:
        raise DataError(f"row 1: header must be {','.join(CSV_COLUMNS)}")

    groups: dict[tuple[str, str], list] = {}
    verticals: dict[str, str] = {}
    for lineno, rec in enumerate(reader, start=2):
        if not rec:
            continue
        if len(rec) != len(CSV_COLUMNS):
            raise DataError(f"row {lineno}: expected {len(CSV_COLUMNS)} fields, got {len(rec)}")
        d = dict(zip(CSV_COLUMNS, rec))
        try:
            week = int(d["week"])
            demand = float(d["demand"])
            row = RawFeatureRow(
                listed_price=float(d["listed_price"]),
                discounted_price=float(d["discounted_price"]),
                effective_price=float(d["effective_price"]),
                event_type=d["event_type"] or NO_EVENT,
                **{name: int(d[name]) for name in BINARY_FIELDS},
                out_of_stock_pct=float(d["oos_pct"]),
                product_tier=d["tier"],
            )
        except (ValueError, DataError) as exc:
            raise DataError(f"row {lineno}: {exc}") from None
        if not math.isfinite(demand) or demand < 0:
            raise DataError(f"row {lineno}: negative or non-finite demand {d['demand']!r}")
        sku, region, vertical = d["sku_id"], d["region_id"], d["vertical_id"]
        if verticals.setdefault(sku, vertical) != vertical:
            raise DataError(f"row {lineno}: SKU {sku} listed under two verticals")
        groups.setdefault((sku, region), []).append((week, demand, row, lineno))

    instances = []
    for (sku, region), recs in groups.items():
        recs.sort(key=lambda r: r[0])
        for prev, cur in zip(recs, recs[1:]):
            if cur[0] != prev[0] + 1:
                kind = "duplicate" if cur[0] == prev[0] else "non-consecutive"
                raise DataError(
                    f"row {cur[3]}: {kind} week {cur[0]} for SKU {sku} region {region} "
                    f"(previous week {prev[0]})"
                )
        instances.append(SeriesInstance(
            sku_id=sku, region_id=region, vertical_id=verticals[sku], start_week=recs[0][0],
            demand=np.array([r[1] for r in recs]), features=tuple(r[2] for r in recs),
        ))
    return Dataset(tuple(instances))


# ---------------------------------------------------------------------------
# windowing


def split_windows(dataset: Dataset, train_end_week: int, horizon: int) -> tuple[Dataset, Dataset]:
    """Split at ``train_end_week`` into training history and a ``horizon``-week test window.

    Series starting after ``train_end_week`` or not covering the full test
    window are left out of the test set and listed in ``test.excluded``.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if not len(dataset):
        return Dataset(), Dataset()
    if train_end_week < min(s.start_week for s in dataset):
        raise DataError(f"train_end_week {train_end_week} precedes all data")
    train, test, excluded = [], [], []
    for s in dataset:
        if s.start_week > train_end_week:
            excluded.append(s.key)
            continue
        train.append(s.slice_weeks(s.start_week, train_end_week))
        if s.end_week >= train_end_week + horizon:
            test.append(s.slice_weeks(train_end_week + 1, train_end_week + horizon))
        else:
            excluded.append(s.key)
    return Dataset(tuple(train)), Dataset(tuple(test), excluded=tuple(excluded))


def future_rows(series: SeriesInstance, first_week: int, horizon: int) -> Sequence[RawFeatureRow]:
    """Feature rows for weeks first_week..first_week+horizon-1 (must exist)."""
    if first_week < series.start_week or first_week + horizon - 1 > series.end_week:
        raise DataError(f"{series.key}: missing feature rows for weeks "
                        f"{first_week}..{first_week + horizon - 1}")
    lo = first_week - series.start_week
    return series.features[lo:lo + horizon]
