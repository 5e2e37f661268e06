"""Optimization: Adam with staircase LR decay, padded minibatches, two-stage training."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .armdn import (
    ArmdnConfig, ArmdnModel, SequenceBatch, _logsumexp, _mixture_terms, forward, init_params,
    loss_and_grad,
)
from .dataset import Dataset, DataError
from .features import EncodedSeries, FeatureSchema, encode_series, fit_schema


class TrainingDiverged(RuntimeError):
    """Loss stayed non-finite for several consecutive minibatches."""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 512
    lr0: float = 3e-3
    decay_factor: float = 0.96
    decay_every: int = 1000
    dropout_p: float = 0.5
    epochs: int = 30
    K: int = 10
    seed: int = 0
    variant: str = "ARMDN"
    grad_clip: float = 5.0
    val_weeks: int = 4
    hidden: int = 50
    embed_dim: int = 30
    ff_dim: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_bad_batches: int = 3

    def __post_init__(self):
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ValueError("decay_factor must be in (0, 1]")
        if self.batch_size < 1 or self.decay_every < 1:
            raise ValueError("batch_size and decay_every must be >= 1")
        if self.epochs < 0 or self.lr0 < 0:
            raise ValueError("epochs and lr0 must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    def model_config(self, schema: FeatureSchema) -> ArmdnConfig:
        return ArmdnConfig.for_schema(schema, self.variant, self.K, hidden=self.hidden,
                                      embed_dim=self.embed_dim, ff_dim=self.ff_dim)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0, beta1, beta2, eps)


def adam_step(params: dict, grads: dict, state: AdamState,
              lr: float) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; inputs are left untouched."""
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_params, m_new, v_new = {}, {}, {}
    for k in params:
        g = grads[k]
        m = b1 * state.m[k] + (1 - b1) * g
        v = b2 * state.v[k] + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_params[k] = params[k] - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        m_new[k], v_new[k] = m, v
    return new_params, AdamState(m_new, v_new, t, b1, b2, state.eps)


def lr_schedule(step: int, config: TrainConfig) -> float:
    """Staircase exponential decay: lr0 * decay_factor ** floor(step / decay_every)."""
    if step < 0:
        raise ValueError("step must be >= 0")
    return config.lr0 * config.decay_factor ** (step // config.decay_every)


# ---------------------------------------------------------------------------
# batches


@dataclass(frozen=True)
class TrainSeries:
    """One encoded training series with model-space targets and loss masks."""

    key: tuple[str, str]
    vertical_id: str
    encoded: EncodedSeries
    y: np.ndarray
    train_mask: np.ndarray
    val_mask: np.ndarray

    def __len__(self) -> int:
        return len(self.y)

    @property
    def y_prev(self) -> np.ndarray:
        return np.concatenate([[0.0], self.y[:-1]])


def prepare_series(dataset: Dataset, schema: FeatureSchema, val_weeks: int = 4) -> list[TrainSeries]:
    """Encode every series; the last ``val_weeks`` of each go to validation.

    Series too short to spare a validation window train on all weeks.
    """
    out = []
    for s in dataset:
        y = schema.demand_transform(s.vertical_id).forward(s.demand)
        T = len(s)
        val = np.zeros(T)
        if 0 < val_weeks < T:
            val[T - val_weeks:] = 1.0
        out.append(TrainSeries(s.key, s.vertical_id, encode_series(s, schema), y, 1.0 - val, val))
    return out


def pad_batch(instances: Sequence[TrainSeries], which: str = "train",
              length: int | None = None) -> SequenceBatch:
    """Zero-pad to the longest series (or ``length``); padding is masked out."""
    B = len(instances)
    T = max(len(s) for s in instances) if length is None else length
    first = instances[0].encoded
    num = np.zeros((B, T, first.numeric.shape[1]))
    cat = np.zeros((B, T, first.categorical.shape[1]), dtype=np.int64)
    binary = np.zeros((B, T, first.binary.shape[1]))
    y = np.zeros((B, T))
    y_prev = np.zeros((B, T))
    mask = np.zeros((B, T))
    for b, s in enumerate(instances):
        n = len(s)
        num[b, :n] = s.encoded.numeric
        cat[b, :n] = s.encoded.categorical
        binary[b, :n] = s.encoded.binary
        y[b, :n] = s.y
        y_prev[b, :n] = s.y_prev
        if which == "train":
            mask[b, :n] = s.train_mask
        elif which == "val":
            mask[b, :n] = s.val_mask
        elif which == "all":
            mask[b, :n] = 1.0
        else:
            raise ValueError(f"unknown mask selection {which!r}")
    return SequenceBatch(num, cat, binary, y_prev, y, mask,
                         np.array([len(s) for s in instances]))


def make_minibatch(instances: Sequence[TrainSeries], batch_size: int,
                   rng: np.random.Generator) -> SequenceBatch:
    """Sample ``batch_size`` series without replacement and pad them."""
    if not instances:
        raise ValueError("empty instance pool")
    idx = rng.choice(len(instances), size=min(batch_size, len(instances)), replace=False)
    return pad_batch([instances[i] for i in idx], "train")


def evaluate_nll(params: dict, cfg: ArmdnConfig, instances: Sequence[TrainSeries],
                 chunk: int = 512) -> tuple[float, float]:
    """Teacher-forced (train NLL, validation NLL) over all series; nan if no cells."""
    sums = {"train": [], "val": []}
    counts = {"train": 0.0, "val": 0.0}
    for lo in range(0, len(instances), chunk):
        part = instances[lo:lo + chunk]
        batch = pad_batch(part, "all")
        logits, raw, mu, _ = forward(params, cfg, batch)
        _, _, _, lse = _mixture_terms(logits, raw, mu, batch.y)
        for which in ("train", "val"):
            m = pad_batch(part, which).mask
            sums[which].extend(np.where(m > 0, -lse, 0.0).ravel())
            counts[which] += m.sum()
    return tuple(math.fsum(sums[w]) / counts[w] if counts[w] else math.nan
                 for w in ("train", "val"))


# ---------------------------------------------------------------------------
# loops


def _clip_global_norm(grads: dict, max_norm: float) -> dict:
    norm = math.sqrt(math.fsum(float(np.sum(g * g)) for _, g in sorted(grads.items())))
    if max_norm <= 0 or norm <= max_norm:
        return grads
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


def init_model(schema: FeatureSchema, config: TrainConfig) -> ArmdnModel:
    cfg = config.model_config(schema)
    rng = np.random.default_rng([config.seed, 0])
    return ArmdnModel(cfg, init_params(cfg, rng), schema.hash,
                      {"train_config": config.to_dict(), "vertical": None, "best_epoch": 0})


def _optimize(model: ArmdnModel, instances: list[TrainSeries], config: TrainConfig,
              log: Callable[[dict], None] | None, stream: int) -> tuple[ArmdnModel, list[dict]]:
    cfg = model.config
    params = {k: v.copy() for k, v in model.params.items()}
    batch_rng = np.random.default_rng([config.seed, stream, 1])
    drop_rng = np.random.default_rng([config.seed, stream, 2])
    adam = AdamState.for_params(params, config.beta1, config.beta2, config.eps)
    iters = math.ceil(len(instances) / config.batch_size)
    keep = 1.0 - config.dropout_p

    history = []
    t0 = time.perf_counter()

    def record(epoch: int, lr: float) -> float:
        train_nll, val_nll = evaluate_nll(params, cfg, instances)
        entry = {"epoch": epoch, "lr": float(lr), "train_nll": float(train_nll),
                 "val_nll": float(val_nll),
                 "wall_ms": int((time.perf_counter() - t0) * 1000)}
        history.append(entry)
        if log is not None:
            log(entry)
        return val_nll if not math.isnan(val_nll) else train_nll

    best_score = record(0, lr_schedule(0, config))
    best_params, best_epoch = params, 0
    has_train_cells = any(s.train_mask.any() for s in instances)
    bad = 0
    for epoch in range(1, config.epochs + 1):
        if not has_train_cells:
            break
        for _ in range(iters):
            batch = make_minibatch(instances, config.batch_size, batch_rng)
            if batch.mask.sum() == 0:
                continue
            drop = None
            if config.dropout_p > 0:
                shape = (batch.shape[0], batch.shape[1], cfg.ff_dim)
                drop = (drop_rng.random(shape) < keep) / keep
            lr = lr_schedule(adam.step, config)
            loss, grads = loss_and_grad(params, cfg, batch, drop)
            if not (math.isfinite(loss) and all(np.all(np.isfinite(g)) for g in grads.values())):
                bad += 1
                if bad >= config.max_bad_batches:
                    raise TrainingDiverged(
                        f"non-finite loss on {bad} consecutive minibatches (epoch {epoch})")
                continue
            bad = 0
            grads = _clip_global_norm(grads, config.grad_clip)
            params, adam = adam_step(params, grads, adam, lr)
        score = record(epoch, lr_schedule(adam.step, config))
        if score < best_score:
            best_score, best_params, best_epoch = score, params, epoch

    meta = dict(model.meta)
    meta["best_epoch"] = best_epoch
    meta["train_config"] = config.to_dict()
    return ArmdnModel(cfg, {k: v.copy() for k, v in best_params.items()}, model.schema_hash,
                      meta), history


def train_global(train: Dataset, config: TrainConfig, schema: FeatureSchema | None = None,
                 log: Callable[[dict], None] | None = None) -> tuple[ArmdnModel, list[dict]]:
    """Fit one model on every series (all verticals) of the training split.

    The returned parameters are those with the lowest validation NLL seen,
    initialization included.
    """
    if not len(train):
        raise DataError("training split is empty")
    schema = schema if schema is not None else fit_schema(train)
    model = init_model(schema, config)
    if config.epochs == 0:
        return model, []
    instances = prepare_series(train, schema, config.val_weeks)
    return _optimize(model, instances, config, log, stream=0)


def finetune_vertical(model: ArmdnModel, train: Dataset, vertical_id: str, config: TrainConfig,
                      schema: FeatureSchema,
                      log: Callable[[dict], None] | None = None) -> tuple[ArmdnModel, list[dict]]:
    """Continue training ``model`` on one vertical's series only."""
    subset = train.for_vertical(vertical_id)
    if not len(subset):
        raise KeyError(f"unknown vertical {vertical_id!r}")
    if schema.hash != model.schema_hash:
        raise ValueError("schema does not match the model being fine-tuned")
    instances = prepare_series(subset, schema, config.val_weeks)
    stream = 1 + sum(ord(ch) for ch in vertical_id)
    tuned, history = _optimize(model, instances, config, log, stream=stream)
    tuned.meta["vertical"] = vertical_id
    return tuned, history


def jsonl_logger(path) -> Callable[[dict], None]:
    """Logger appending one JSON line per entry; truncates ``path`` first."""
    Path(path).write_text("")

    def log(entry: dict) -> None:
        with open(path, "a") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")

    return log
