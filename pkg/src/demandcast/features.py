"""Model-ready features: schema fitting, derived time/price features, encoding.

Numeric features are standardized with training-window statistics,
categorical features become vocabulary indices (index 0 is reserved for
out-of-vocabulary values) and binary flags pass through unchanged.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import Dataset, DataError, RawFeatureRow, SeriesInstance

SCHEMA_VERSION = 1
LAG_WINDOW = 4
EVENT_CAP = 52
OOV_INDEX = 0
PRICE_CHANGE_RTOL = 1e-9

BUCKETS = ("Product", "Visibility", "Price", "Convenience", "Time")

# name, bucket, transform
RAW_NUMERIC = (
    ("listed_price", "Price", "log1p"),
    ("discounted_price", "Price", "log1p"),
    ("effective_price", "Price", "log1p"),
    ("out_of_stock_pct", "Product", "identity"),
)
DERIVED_NUMERIC = (
    ("week_of_month", "Time", "identity"),
    ("lag_price_mean_1w", "Time", "log1p"),
    ("lag_price_mean_4w", "Time", "log1p"),
    ("lag_sale_mean_1w", "Time", "log1p"),
    ("lag_sale_mean_4w", "Time", "log1p"),
    ("weeks_since_price_change", "Time", "identity"),
    ("weeks_since_last_event", "Time", "identity"),
    ("weeks_to_next_event", "Time", "identity"),
    ("weeks_since_first_sale", "Time", "identity"),
    ("diff_from_historical_mean_price", "Price", "identity"),
    ("historical_min_price", "Price", "log1p"),
    ("historical_max_price", "Price", "log1p"),
    ("avg_vertical_discount", "Price", "identity"),
)
CATEGORICAL = (
    ("sku_id", "Product"),
    ("product_tier", "Product"),
    ("event_type", "Visibility"),
)
BINARY = (
    ("deal_card", "Visibility"),
    ("banner", "Visibility"),
    ("no_cost_emi", "Convenience"),
    ("exchange", "Convenience"),
    ("exclusive", "Convenience"),
)


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    bucket: str
    kind: str
    vocabulary: tuple[str, ...] = ()
    mean: float = 0.0
    std: float = 1.0
    constant: bool = False
    transform: str = "identity"


@dataclass(frozen=True)
class DemandTransform:
    """Standardized log1p demand; the scale the network models."""

    mean: float
    std: float

    def forward(self, y):
        return (np.log1p(y) - self.mean) / self.std

    def inverse(self, z):
        return np.maximum(np.expm1(np.asarray(z) * self.std + self.mean), 0.0)


@dataclass(frozen=True)
class FeatureSchema:
    features: tuple[FeatureSpec, ...]
    demand_stats: dict = field(default_factory=dict)
    vertical_discount: dict = field(default_factory=dict)
    include_derived: bool = True
    version: int = SCHEMA_VERSION

    @property
    def numeric(self) -> tuple[FeatureSpec, ...]:
        return tuple(f for f in self.features if f.kind == "numeric")

    @property
    def categorical(self) -> tuple[FeatureSpec, ...]:
        return tuple(f for f in self.features if f.kind == "categorical")

    @property
    def binary(self) -> tuple[FeatureSpec, ...]:
        return tuple(f for f in self.features if f.kind == "binary")

    def spec(self, name: str) -> FeatureSpec:
        for f in self.features:
            if f.name == name:
                return f
        raise KeyError(name)

    def vocab_size(self, name: str) -> int:
        """Embedding rows needed for ``name``, OOV slot included."""
        return len(self.spec(name).vocabulary) + 1

    def category_index(self, name: str, value) -> int:
        vocab = self.spec(name).vocabulary
        try:
            return vocab.index(value) + 1
        except ValueError:
            return OOV_INDEX

    def decode_category(self, name: str, index: int) -> str | None:
        return None if index == OOV_INDEX else self.spec(name).vocabulary[index - 1]

    def demand_transform(self, vertical_id: str) -> DemandTransform:
        mean, std = self.demand_stats.get(vertical_id, self.demand_stats["*"])
        return DemandTransform(mean, std)

    def discount_for(self, vertical_id: str) -> float:
        return self.vertical_discount.get(vertical_id, self.vertical_discount.get("*", 0.0))

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "include_derived": self.include_derived,
            "features": [
                {**asdict(f), "vocabulary": list(f.vocabulary)} for f in self.features
            ],
            "demand_stats": {k: list(v) for k, v in sorted(self.demand_stats.items())},
            "vertical_discount": dict(sorted(self.vertical_discount.items())),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    @property
    def hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> FeatureSchema:
        if d.get("version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema version {d.get('version')!r}")
        feats = tuple(
            FeatureSpec(**{**f, "vocabulary": tuple(f["vocabulary"])}) for f in d["features"]
        )
        return cls(
            features=feats,
            demand_stats={k: tuple(v) for k, v in d["demand_stats"].items()},
            vertical_discount=dict(d["vertical_discount"]),
            include_derived=d["include_derived"],
            version=d["version"],
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> FeatureSchema:
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class DerivedFeatures:
    week_of_month: float
    lag_price_mean_1w: float
    lag_price_mean_4w: float
    lag_sale_mean_1w: float
    lag_sale_mean_4w: float
    weeks_since_price_change: float
    weeks_since_last_event: float
    weeks_to_next_event: float
    weeks_since_first_sale: float
    diff_from_historical_mean_price: float
    historical_min_price: float
    historical_max_price: float
    avg_vertical_discount: float


@dataclass(frozen=True)
class LagState:
    """Per-series rolling history consumed by :func:`derive`.

    ``week`` is the last week folded in; a fresh state sits one week before
    the series start.
    """

    week: int
    start_week: int
    last_price_change_week: int
    first_sale_week: int | None = None
    last_event_week: int | None = None
    last_price: float | None = None
    demand_history: tuple[float, ...] = ()
    price_history: tuple[float, ...] = ()
    price_sum: float = 0.0
    price_count: int = 0
    price_min: float = math.inf
    price_max: float = -math.inf
    vertical_discount: float = 0.0


@dataclass(frozen=True)
class EncodedRow:
    numeric: np.ndarray
    categorical: tuple[tuple[str, int], ...]
    binary: np.ndarray


@dataclass(frozen=True)
class EncodedSeries:
    """Encoded feature matrices for consecutive weeks of one series."""

    numeric: np.ndarray  # (T, n_numeric)
    categorical: np.ndarray  # (T, n_categorical) int
    binary: np.ndarray  # (T, n_binary)


def start_lag_state(series: SeriesInstance, vertical_discount: float = 0.0) -> LagState:
    return LagState(
        week=series.start_week - 1,
        start_week=series.start_week,
        last_price_change_week=series.start_week,
        vertical_discount=vertical_discount,
    )


def _price_changed(price: float, last: float | None) -> bool:
    return last is not None and abs(price - last) > PRICE_CHANGE_RTOL * abs(last)


def advance_lag_state(state: LagState, y: float, price: float, *, event: bool = False,
                      week: int | None = None) -> LagState:
    """Fold week ``state.week + 1`` (demand ``y``, price ``price``) into the state.

    During rollout ``y`` is the model's own forecast for that week.
    """
    w = state.week + 1
    if week is not None and week != w:
        raise ValueError(f"out-of-order lag update: expected week {w}, got {week}")
    y = float(y)
    price = float(price)
    return replace(
        state,
        week=w,
        last_price_change_week=w if _price_changed(price, state.last_price)
        else state.last_price_change_week,
        first_sale_week=w if state.first_sale_week is None and y > 0 else state.first_sale_week,
        last_event_week=w if event else state.last_event_week,
        last_price=price,
        demand_history=(state.demand_history + (y,))[-LAG_WINDOW:],
        price_history=(state.price_history + (price,))[-LAG_WINDOW:],
        price_sum=state.price_sum + price,
        price_count=state.price_count + 1,
        price_min=min(state.price_min, price),
        price_max=max(state.price_max, price),
    )


def derive(series: SeriesInstance, t: int, state: LagState,
           future: Sequence[RawFeatureRow] = ()) -> DerivedFeatures:
    """Derived features for week ``t`` given history folded into ``state``.

    ``future`` extends the series' feature rows past its last week so that
    rollout steps (and the upcoming-event lookahead) can see them.
    """
    if t < series.start_week:
        raise DataError(f"{series.key}: week {t} precedes series start {series.start_week}")
    if state.week != t - 1:
        raise ValueError(f"lag state is at week {state.week}, cannot derive week {t}")
    rows = series.features + tuple(future)
    idx = t - series.start_week
    if idx >= len(rows):
        raise DataError(f"{series.key}: no feature row for week {t}")
    row = rows[idx]
    price = row.effective_price

    if row.is_event:
        since_event = 0
    elif state.last_event_week is not None:
        since_event = min(t - state.last_event_week, EVENT_CAP)
    else:
        since_event = EVENT_CAP
    to_event = EVENT_CAP
    for j in range(idx, min(len(rows), idx + EVENT_CAP)):
        if rows[j].is_event:
            to_event = j - idx
            break

    dh, ph = state.demand_history, state.price_history
    return DerivedFeatures(
        week_of_month=float((t - 1) % 4 + 1),
        lag_price_mean_1w=ph[-1] if ph else price,
        lag_price_mean_4w=sum(ph) / len(ph) if ph else price,
        lag_sale_mean_1w=dh[-1] if dh else 0.0,
        lag_sale_mean_4w=sum(dh) / len(dh) if dh else 0.0,
        weeks_since_price_change=0.0 if _price_changed(price, state.last_price)
        else float(t - state.last_price_change_week),
        weeks_since_last_event=float(since_event),
        weeks_to_next_event=float(to_event),
        weeks_since_first_sale=0.0 if state.first_sale_week is None
        else float(t - state.first_sale_week),
        diff_from_historical_mean_price=price / (state.price_sum / state.price_count) - 1.0
        if state.price_count else 0.0,
        historical_min_price=state.price_min if state.price_count else price,
        historical_max_price=state.price_max if state.price_count else price,
        avg_vertical_discount=state.vertical_discount,
    )


def derive_series(series: SeriesInstance, vertical_discount: float = 0.0,
                  future: Sequence[RawFeatureRow] = ()) -> tuple[list[DerivedFeatures], LagState]:
    """Teacher-forced derived features for every week of ``series``."""
    state = start_lag_state(series, vertical_discount)
    out = []
    for t, y, row in zip(series.weeks, series.demand, series.features):
        out.append(derive(series, int(t), state, future))
        state = advance_lag_state(state, y, row.effective_price, event=row.is_event)
    return out, state


def _raw_value(name: str, row: RawFeatureRow, derived: DerivedFeatures | None) -> float:
    if hasattr(row, name):
        return float(getattr(row, name))
    return float(getattr(derived, name))


def _transform(kind: str, x):
    return np.log1p(np.maximum(x, 0.0)) if kind == "log1p" else x


def _discount(row: RawFeatureRow) -> float:
    return 1.0 - row.discounted_price / row.listed_price if row.listed_price > 0 else 0.0


def fit_schema(train: Dataset, include_derived: bool = True) -> FeatureSchema:
    """Fit normalization statistics and vocabularies on training weeks only."""
    if not len(train):
        raise DataError("cannot fit a feature schema on an empty dataset")

    disc: dict[str, list[float]] = {}
    for s in train:
        disc.setdefault(s.vertical_id, []).extend(_discount(r) for r in s.features)
    vertical_discount = {v: float(np.mean(d)) for v, d in disc.items()}
    vertical_discount["*"] = float(np.mean(np.concatenate([np.asarray(d) for d in disc.values()])))

    numeric_defs = RAW_NUMERIC + (DERIVED_NUMERIC if include_derived else ())
    columns: dict[str, list[float]] = {name: [] for name, _, _ in numeric_defs}
    vocab: dict[str, set] = {name: set() for name, _ in CATEGORICAL}
    log_demand: dict[str, list[np.ndarray]] = {}
    for s in train:
        derived, _ = derive_series(s, vertical_discount[s.vertical_id])
        for row, d in zip(s.features, derived):
            for name, _, _ in numeric_defs:
                columns[name].append(_raw_value(name, row, d))
        vocab["sku_id"].add(s.sku_id)
        vocab["product_tier"].update(r.product_tier for r in s.features)
        vocab["event_type"].update(r.event_type for r in s.features)
        log_demand.setdefault(s.vertical_id, []).append(np.log1p(s.demand))

    specs = []
    for name, bucket, transform in numeric_defs:
        x = _transform(transform, np.asarray(columns[name]))
        mean = float(np.mean(x))
        std = float(np.std(x))
        constant = not std > 1e-12 * max(1.0, abs(mean))
        specs.append(FeatureSpec(name, bucket, "numeric", mean=mean,
                                 std=1.0 if constant else std, constant=constant,
                                 transform=transform))
    for name, bucket in CATEGORICAL:
        specs.append(FeatureSpec(name, bucket, "categorical", vocabulary=tuple(sorted(vocab[name]))))
    for name, bucket in BINARY:
        specs.append(FeatureSpec(name, bucket, "binary"))

    def stats(x: np.ndarray) -> tuple[float, float]:
        std = float(np.std(x))
        return float(np.mean(x)), std if std > 1e-12 else 1.0

    demand_stats = {v: stats(np.concatenate(xs)) for v, xs in log_demand.items()}
    demand_stats["*"] = stats(np.concatenate([np.concatenate(xs) for xs in log_demand.values()]))
    return FeatureSchema(tuple(specs), demand_stats, vertical_discount, include_derived)


def encode(row: RawFeatureRow, derived: DerivedFeatures | None, schema: FeatureSchema,
           sku_id: str | None = None) -> EncodedRow:
    numeric = np.array([
        (_transform(f.transform, _raw_value(f.name, row, derived)) - f.mean) / f.std
        for f in schema.numeric
    ], dtype=np.float64)
    values = {"sku_id": sku_id, "product_tier": row.product_tier, "event_type": row.event_type}
    categorical = tuple((f.name, schema.category_index(f.name, values[f.name]))
                        for f in schema.categorical)
    binary = np.array([getattr(row, f.name) for f in schema.binary], dtype=np.float64)
    return EncodedRow(numeric, categorical, binary)


def stack_rows(rows: Sequence[EncodedRow]) -> EncodedSeries:
    return EncodedSeries(
        numeric=np.stack([r.numeric for r in rows]),
        categorical=np.array([[i for _, i in r.categorical] for r in rows], dtype=np.int64),
        binary=np.stack([r.binary for r in rows]),
    )


def encode_series(series: SeriesInstance, schema: FeatureSchema) -> EncodedSeries:
    """Teacher-forced encoding of every week of ``series``."""
    derived, _ = derive_series(series, schema.discount_for(series.vertical_id))
    return stack_rows([encode(r, d, schema, series.sku_id)
                       for r, d in zip(series.features, derived)])
