"""National to fulfillment-center disaggregation by historical regional shares."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import DataError, Dataset

RATIO_WINDOW = 8
IQR_FENCE = 1.5
RATIO_COLUMNS = ("sku_id", "region_id", "ratio", "weeks_used")


@dataclass(frozen=True)
class SkuRatios:
    sku_id: str
    regions: tuple[str, ...]
    ratios: np.ndarray
    weeks_used: int
    # weeks whose share was pulled back to an IQR fence, per region
    clipped_weeks: tuple[tuple[int, ...], ...]
    # set when the SKU had no sales in the window and ratios fell back to uniform
    uniform_fallback: bool = False

    def __post_init__(self):
        r = np.array(self.ratios, dtype=np.float64)
        r.setflags(write=False)
        object.__setattr__(self, "ratios", r)
        if len(r) != len(self.regions):
            raise ValueError("one ratio per region required")

    def as_dict(self) -> dict[str, float]:
        return {reg: float(x) for reg, x in zip(self.regions, self.ratios)}


@dataclass(frozen=True)
class RegionRatios:
    as_of_week: int
    window: int
    by_sku: dict[str, SkuRatios]

    def __getitem__(self, sku_id: str) -> SkuRatios:
        try:
            return self.by_sku[sku_id]
        except KeyError:
            raise KeyError(f"no regional ratios for SKU {sku_id!r}") from None

    def __contains__(self, sku_id: str) -> bool:
        return sku_id in self.by_sku

    @property
    def warnings(self) -> list[str]:
        return sorted(s for s, r in self.by_sku.items() if r.uniform_fallback)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(RATIO_COLUMNS)
        for sku in sorted(self.by_sku):
            r = self.by_sku[sku]
            for region, x in zip(r.regions, r.ratios):
                writer.writerow([sku, region, repr(float(x)), r.weeks_used])
        return buf.getvalue()

    def save_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())


def clip_iqr(values: np.ndarray, fence: float = IQR_FENCE) -> tuple[np.ndarray, np.ndarray]:
    """Clip values to [q1 - fence*iqr, q3 + fence*iqr]; also return the clipped mask."""
    values = np.asarray(values, dtype=np.float64)
    q1, q3 = np.percentile(values, [25.0, 75.0])
    lo, hi = q1 - fence * (q3 - q1), q3 + fence * (q3 - q1)
    clipped = np.clip(values, lo, hi)
    return clipped, clipped != values


def sku_ratios(sku_id: str, regions: list[str], weeks: np.ndarray, demand: np.ndarray) -> SkuRatios:
    """Ratios from a (weeks, regions) demand block.

    Weeks with no national sales carry no share information and are skipped.
    """
    national = demand.sum(axis=1)
    sold = national > 0
    if not sold.any():
        n = len(regions)
        return SkuRatios(sku_id, tuple(regions), np.full(n, 1.0 / n), 0,
                         tuple(() for _ in regions), uniform_fallback=True)
    shares = demand[sold] / national[sold, None]
    used_weeks = weeks[sold]
    means, flags = [], []
    for j in range(len(regions)):
        clipped, mask = clip_iqr(shares[:, j])
        means.append(clipped.mean())
        flags.append(tuple(int(w) for w in used_weeks[mask]))
    means = np.array(means)
    return SkuRatios(sku_id, tuple(regions), means / means.sum(), int(sold.sum()), tuple(flags))


def compute_ratios(dataset: Dataset, as_of_week: int, window: int = RATIO_WINDOW) -> RegionRatios:
    """Regional share of each SKU's national demand over the trailing ``window`` weeks.

    Missing region-weeks count as zero sales.  Young products use whatever
    history they have.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    by_sku: dict[str, list] = {}
    for s in dataset:
        by_sku.setdefault(s.sku_id, []).append(s)
    out = {}
    for sku, group in sorted(by_sku.items()):
        group.sort(key=lambda s: s.region_id)
        start = min(s.start_week for s in group)
        first = max(as_of_week - window + 1, start)
        if first > as_of_week:
            raise DataError(f"SKU {sku}: no history at or before week {as_of_week}")
        weeks = np.arange(first, as_of_week + 1)
        demand = np.zeros((len(weeks), len(group)))
        for j, s in enumerate(group):
            for i, w in enumerate(weeks):
                if s.start_week <= w <= s.end_week:
                    demand[i, j] = s.demand[w - s.start_week]
        out[sku] = sku_ratios(sku, [s.region_id for s in group], weeks, demand)
    return RegionRatios(as_of_week, window, out)


def largest_remainder(total: int, ratios: np.ndarray) -> np.ndarray:
    """Integer split of ``total`` proportional to ``ratios``; ties go to earlier regions."""
    if total < 0:
        raise ValueError("integer split needs a non-negative total")
    quotas = total * np.asarray(ratios, dtype=np.float64)
    base = np.floor(quotas).astype(np.int64)
    short = total - int(base.sum())
    order = np.argsort(-(quotas - base), kind="stable")
    base[order[:short]] += 1
    return base


def disaggregate(national, ratios: RegionRatios | SkuRatios, sku_id: str | None = None,
                 integer: bool = False) -> dict[str, np.ndarray]:
    """Split national forecast(s) across regions.

    ``national`` is a scalar or a vector of weekly forecasts.  In integer
    mode each week's national value is first rounded to the nearest unit,
    then split by largest remainder so regions re-sum to it exactly.
    """
    r = ratios if isinstance(ratios, SkuRatios) else ratios[sku_id]
    nat = np.atleast_1d(np.asarray(national, dtype=np.float64))
    if integer:
        totals = np.floor(nat + 0.5).astype(np.int64)
        parts = np.stack([largest_remainder(int(n), r.ratios) for n in totals], axis=1)
    else:
        parts = r.ratios[:, None] * nat[None, :]
    return {region: parts[j] for j, region in enumerate(r.regions)}
