"""Boosted Cubist baseline.

Model trees with a least-squares linear model at every node, recursive
smoothing along the prediction path, committees grown on adjusted targets
and a nearest-neighbour correction, driven one step ahead over lag features.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .armdn import SchemaMismatch
from .dataset import Dataset, DataError, RawFeatureRow, SeriesInstance
from .features import (
    EncodedRow, FeatureSchema, advance_lag_state, derive, derive_series, encode, start_lag_state,
)

CHECKPOINT_FORMAT = "demandcast.cubist"
CHECKPOINT_VERSION = 1
_ONEHOT = ("product_tier", "event_type")


@dataclass
class TreeNode:
    n_samples: int
    depth: int
    features: tuple[int, ...]
    coef: np.ndarray
    intercept: float
    residual_sd: float
    y_min: float
    y_max: float
    split_feature: int | None = None
    split_threshold: float | None = None
    left: int | None = None
    right: int | None = None

    @property
    def is_leaf(self) -> bool:
        return self.split_feature is None

    def model(self, X: np.ndarray) -> np.ndarray:
        """Linear model output, bounded by the node's training target range."""
        out = np.full(len(X), self.intercept)
        if self.features:
            out = out + X[:, list(self.features)] @ self.coef
        return np.clip(out, self.y_min, self.y_max)


@dataclass
class ModelTree:
    nodes: list[TreeNode]
    n_features: int

    @property
    def root(self) -> TreeNode:
        return self.nodes[0]

    @property
    def n_leaves(self) -> int:
        return sum(n.is_leaf for n in self.nodes)

    def path(self, x: np.ndarray) -> list[int]:
        i, out = 0, [0]
        while not self.nodes[i].is_leaf:
            node = self.nodes[i]
            i = node.left if x[node.split_feature] <= node.split_threshold else node.right
            out.append(i)
        return out

    def to_dict(self) -> dict:
        return {"n_features": self.n_features, "nodes": [
            {**{k: v for k, v in asdict(n).items() if k != "coef"},
             "features": list(n.features), "coef": n.coef.tolist()} for n in self.nodes]}

    @classmethod
    def from_dict(cls, d: dict) -> ModelTree:
        nodes = [TreeNode(**{**n, "features": tuple(n["features"]),
                             "coef": np.asarray(n["coef"], dtype=np.float64)}) for n in d["nodes"]]
        return cls(nodes, d["n_features"])


def _fit_linear(X, y, feats: tuple[int, ...], ridge: float) -> tuple[np.ndarray, float]:
    ybar = float(y.mean())
    if not feats:
        return np.zeros(0), ybar
    A = X[:, list(feats)]
    am = A.mean(axis=0)
    Ac = A - am
    G = Ac.T @ Ac + ridge * np.eye(len(feats))
    coef = np.linalg.solve(G, Ac.T @ (y - ybar))
    return coef, ybar - float(am @ coef)


def best_split(X: np.ndarray, y: np.ndarray, min_leaf: int) -> tuple[int, float, float] | None:
    """Split maximizing standard-deviation reduction.

    Returns (feature, threshold, reduction) or None; ties go to the lowest
    feature index, then the lowest threshold.
    """
    n, d = X.shape
    if n < 2 * min_leaf or n < 2:
        return None
    order = np.argsort(X, axis=0, kind="stable")
    xs = np.take_along_axis(X, order, axis=0)
    yc = y - y.mean()
    ys = yc[order]
    cs = np.cumsum(ys, axis=0)[:-1]
    cs2 = np.cumsum(ys * ys, axis=0)[:-1]
    tot, tot2 = float(yc.sum()), float((yc * yc).sum())
    nl = np.arange(1, n, dtype=np.float64)[:, None]
    nr = n - nl
    var_l = cs2 / nl - (cs / nl) ** 2
    var_r = (tot2 - cs2) / nr - ((tot - cs) / nr) ** 2
    # cumulative-sum variances carry round-off of order eps * sum(y^2)
    floor = 1e-13 * tot2 / n
    var_l = np.where(var_l > floor, var_l, 0.0)
    var_r = np.where(var_r > floor, var_r, 0.0)
    sdr = math.sqrt(max(tot2 / n - (tot / n) ** 2, 0.0)) \
        - (nl * np.sqrt(var_l) + nr * np.sqrt(var_r)) / n
    valid = (xs[1:] > xs[:-1]) & (nl >= min_leaf) & (nr >= min_leaf)
    sdr = np.where(valid, sdr, -np.inf).T  # (d, n-1): feature-major, thresholds ascending
    best = sdr.max()
    if not np.isfinite(best) or best <= 0:
        return None
    flat = np.flatnonzero(sdr.ravel() >= best - 1e-12 * max(1.0, abs(best)))[0]
    f, i = divmod(int(flat), n - 1)
    thr = 0.5 * (xs[i, f] + xs[i + 1, f])
    if not thr < xs[i + 1, f]:
        thr = xs[i, f]
    return f, float(thr), float(sdr[f, i])


def grow_tree(X: np.ndarray, y: np.ndarray, min_leaf: int = 4, max_depth: int | None = None,
              ridge: float = 1e-8, sd_stop: float = 0.05) -> ModelTree:
    """Grow an M5-style model tree.

    Every node fits a linear model restricted to the features split on along
    the path from the root to that node.  Growth stops when a node's target
    SD falls below ``sd_stop`` x root SD, it holds fewer than
    ``2 * min_leaf`` samples, or ``max_depth`` is reached.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or len(X) != len(y) or len(y) == 0:
        raise ValueError("X must be (n, d) with n == len(y) > 0")
    root_sd = float(np.std(y))
    nodes: list[TreeNode] = []

    def make(idx: np.ndarray, depth: int, feats: tuple[int, ...]) -> int:
        Xi, yi = X[idx], y[idx]
        coef, icpt = _fit_linear(Xi, yi, feats, ridge)
        pred = icpt + (Xi[:, list(feats)] @ coef if feats else 0.0)
        node = TreeNode(len(idx), depth, feats, coef, icpt, float(np.std(yi - pred)),
                        float(yi.min()), float(yi.max()))
        nid = len(nodes)
        nodes.append(node)
        if np.std(yi) <= sd_stop * root_sd or (max_depth is not None and depth >= max_depth):
            return nid
        split = best_split(Xi, yi, min_leaf)
        if split is None:
            return nid
        f, thr, _ = split
        go_left = Xi[:, f] <= thr
        child_feats = tuple(sorted(set(feats) | {f}))
        node.split_feature, node.split_threshold = f, thr
        node.left = make(idx[go_left], depth + 1, child_feats)
        node.right = make(idx[~go_left], depth + 1, child_feats)
        return nid

    make(np.arange(len(y)), 0, ())
    return ModelTree(nodes, X.shape[1])


def tree_predict(tree: ModelTree, X: np.ndarray, smoothing: float = 15.0) -> np.ndarray:
    """Smoothed predictions for every row of ``X``.

    Walking back up from the leaf, each parent's model is blended in as
    ``(n_child * p + c * parent(x)) / (n_child + c)``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    nodes = tree.nodes
    if math.isinf(smoothing):
        return nodes[0].model(X)

    def rec(nid: int, rows: np.ndarray) -> np.ndarray:
        node = nodes[nid]
        Xr = X[rows]
        if node.is_leaf:
            return node.model(Xr)
        go_left = Xr[:, node.split_feature] <= node.split_threshold
        out = np.empty(len(rows))
        own = node.model(Xr)
        for child, sel in ((node.left, go_left), (node.right, ~go_left)):
            if sel.any():
                n_c = nodes[child].n_samples
                out[sel] = (n_c * rec(child, rows[sel]) + smoothing * own[sel]) / (n_c + smoothing)
        return out

    return rec(0, np.arange(len(X)))


def smooth_predict(tree: ModelTree, x: np.ndarray, smoothing: float = 15.0) -> float:
    return float(tree_predict(tree, np.asarray(x)[None, :], smoothing)[0])


def raw_predict(tree: ModelTree, x: np.ndarray) -> float:
    """Unsmoothed prediction: the leaf model alone."""
    leaf = tree.nodes[tree.path(x)[-1]]
    return float(leaf.model(np.asarray(x)[None, :])[0])


@dataclass
class Committee:
    trees: list[ModelTree]
    smoothing: float = 15.0
    # in-memory record of the targets each tree was grown on
    targets: list[np.ndarray] = field(default_factory=list, repr=False)

    def __len__(self) -> int:
        return len(self.trees)


def adjust_targets(y: np.ndarray, previous_targets: np.ndarray, previous_fit: np.ndarray,
                   mode: str = "original") -> np.ndarray:
    """Targets for the next committee member.

    ``original``: 2 * y - previous_fit, i.e. the outcome reflected about the
    previous member's miss.  ``chained``: 2 * previous_targets - previous_fit,
    compounding the adjustment from member to member.
    """
    if mode == "original":
        return 2.0 * y - previous_fit
    if mode == "chained":
        return 2.0 * previous_targets - previous_fit
    raise ValueError(f"unknown committee adjustment {mode!r}")


def train_committees(X: np.ndarray, y: np.ndarray, M: int = 50, min_leaf: int = 4,
                     max_depth: int | None = None, smoothing: float = 15.0,
                     adjustment: str = "original") -> Committee:
    """Grow M model trees, each on targets adjusted by its predecessor's smoothed fit."""
    if M < 1:
        raise ValueError("committee size M must be >= 1")
    y = np.asarray(y, dtype=np.float64)
    targets = y
    trees, history = [], []
    for k in range(M):
        if k:
            targets = adjust_targets(y, targets, tree_predict(trees[-1], X, smoothing), adjustment)
        history.append(targets)
        trees.append(grow_tree(X, targets, min_leaf, max_depth))
    return Committee(trees, smoothing, history)


def committee_predict(committee: Committee, X: np.ndarray) -> np.ndarray:
    """Arithmetic mean of the members' smoothed predictions (rows of ``X``)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    preds = np.stack([tree_predict(t, X, committee.smoothing) for t in committee.trees])
    return preds.mean(axis=0)


@dataclass
class NeighborIndex:
    X: np.ndarray
    targets: np.ndarray
    fitted: np.ndarray
    k: int = 9

    def __post_init__(self):
        if not (len(self.X) == len(self.targets) == len(self.fitted)):
            raise ValueError("neighbour index rows are not aligned")
        if not 1 <= self.k <= len(self.X):
            raise ValueError(f"k={self.k} must be in [1, {len(self.X)}]")


def neighbor_weights(distances: np.ndarray) -> np.ndarray:
    w = 1.0 / (distances + 0.5)
    return w / w.sum()


def nearest(index: NeighborIndex, x: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices and Manhattan distances of the k closest rows (ties: lower row first)."""
    d = np.abs(index.X - x).sum(axis=1)
    idx = np.argsort(d, kind="stable")[:k]
    return idx, d[idx]


def neighbor_adjust(y_hat: float, x: np.ndarray, index: NeighborIndex, k: int | None = None) -> float:
    """Distance-weighted average of t_l + (y_hat - fitted_l) over the k nearest rows."""
    k = index.k if k is None else k
    if k > len(index.X):
        raise ValueError(f"k={k} exceeds the {len(index.X)} indexed rows")
    idx, dist = nearest(index, np.asarray(x, dtype=np.float64), k)
    w = neighbor_weights(dist)
    return float(np.sum(w * (index.targets[idx] + (y_hat - index.fitted[idx]))))


# ---------------------------------------------------------------------------
# forecasting model


@dataclass(frozen=True)
class CubistConfig:
    committees: int = 50
    neighbors: int = 9
    smoothing: float = 15.0
    min_leaf: int = 4
    max_depth: int | None = 8
    use_neighbors: bool = True
    target_transform: str = "log1p"
    adjustment: str = "original"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> CubistConfig:
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class CubistModel:
    config: CubistConfig
    committee: Committee
    index: NeighborIndex | None
    schema_hash: str
    meta: dict = field(default_factory=dict)


def _to_target(y, kind: str):
    return np.log1p(y) if kind == "log1p" else np.asarray(y, dtype=np.float64)


def _from_target(z, kind: str) -> float:
    v = math.expm1(z) if kind == "log1p" else z
    return max(float(v), 0.0)


def cubist_vector(enc: EncodedRow, schema: FeatureSchema) -> np.ndarray:
    """Flat regression row: numerics, binaries and one-hot tier / event type."""
    parts = [enc.numeric, enc.binary]
    cats = dict(enc.categorical)
    for name in _ONEHOT:
        oh = np.zeros(schema.vocab_size(name))
        oh[cats[name]] = 1.0
        parts.append(oh)
    return np.concatenate(parts)


def training_matrix(train: Dataset, schema: FeatureSchema) -> tuple[np.ndarray, np.ndarray]:
    rows, ys = [], []
    for s in train:
        derived, _ = derive_series(s, schema.discount_for(s.vertical_id))
        for row, d, y in zip(s.features, derived, s.demand):
            rows.append(cubist_vector(encode(row, d, schema, s.sku_id), schema))
            ys.append(y)
    return np.array(rows), np.array(ys)


def fit_cubist(train: Dataset, schema: FeatureSchema, config: CubistConfig = CubistConfig()) -> CubistModel:
    if not len(train):
        raise DataError("training split is empty")
    X, y = training_matrix(train, schema)
    t = _to_target(y, config.target_transform)
    committee = train_committees(X, t, config.committees, config.min_leaf, config.max_depth,
                                 config.smoothing, config.adjustment)
    index = None
    if config.use_neighbors:
        index = NeighborIndex(X, t, committee_predict(committee, X), min(config.neighbors, len(X)))
    return CubistModel(config, committee, index, schema.hash, {"n_train_rows": len(y)})


def predict_row(model: CubistModel, x: np.ndarray, use_neighbors: bool | None = None) -> float:
    """Target-space prediction for one feature row."""
    z = float(committee_predict(model.committee, x[None, :])[0])
    use = model.config.use_neighbors if use_neighbors is None else use_neighbors
    if use and model.index is not None:
        z = neighbor_adjust(z, x, model.index)
    return z


def forecast_cubist(model: CubistModel, series: SeriesInstance, schema: FeatureSchema,
                    horizon: int, future: Sequence[RawFeatureRow] = (),
                    use_neighbors: bool | None = None, assume_in_stock: bool = True) -> list[float]:
    """One-step-ahead rollout: each forecast feeds the next step's lag features."""
    if horizon <= 0:
        return []
    if len(future) < horizon:
        raise DataError(f"{series.key}: {horizon} future feature rows needed, got {len(future)}")
    future = tuple(replace(r, out_of_stock_pct=0.0) if assume_in_stock else r
                   for r in future[:horizon])
    _, lag = derive_series(series, schema.discount_for(series.vertical_id), future)
    out = []
    for j, row in enumerate(future):
        t = series.end_week + 1 + j
        enc = encode(row, derive(series, t, lag, future), schema, series.sku_id)
        z = predict_row(model, cubist_vector(enc, schema), use_neighbors)
        y = _from_target(z, model.config.target_transform)
        out.append(y)
        lag = advance_lag_state(lag, y, row.effective_price, event=row.is_event)
    return out


def checkpoint_json(model: CubistModel) -> str:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "schema_hash": model.schema_hash,
        "config": model.config.to_dict(),
        "meta": model.meta,
        "smoothing": model.committee.smoothing,
        "trees": [t.to_dict() for t in model.committee.trees],
        "index": None if model.index is None else {
            "X": model.index.X.tolist(), "targets": model.index.targets.tolist(),
            "fitted": model.index.fitted.tolist(), "k": model.index.k,
        },
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"


def save_cubist(model: CubistModel, path: str | Path) -> str:
    text = checkpoint_json(model)
    Path(path).write_text(text)
    return hashlib.sha256(text.encode()).hexdigest()


def load_cubist(path: str | Path, schema: FeatureSchema | None = None) -> CubistModel:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} Cubist checkpoint")
    if schema is not None and schema.hash != doc["schema_hash"]:
        raise SchemaMismatch(
            f"checkpoint schema {doc['schema_hash']} does not match data schema {schema.hash}")
    committee = Committee([ModelTree.from_dict(t) for t in doc["trees"]], doc["smoothing"])
    index = None
    if doc["index"] is not None:
        ix = doc["index"]
        index = NeighborIndex(np.array(ix["X"], dtype=np.float64),
                              np.array(ix["targets"]), np.array(ix["fitted"]), ix["k"])
    return CubistModel(CubistConfig.from_dict(doc["config"]), committee, index,
                       doc["schema_hash"], doc["meta"])
