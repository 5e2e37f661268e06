"""AR-MDN: associative MLP, LSTM recurrence and a Gaussian-mixture output head.

Everything runs in float64 numpy with hand-written backpropagation.  The
batched path (:func:`forward`, :func:`loss_and_grad`) walks time step by
step with fixed ``(B, .)`` shapes so that appending fully masked steps
leaves losses and gradients bit-identical.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import ndtr

from .dataset import DataError, RawFeatureRow, SeriesInstance
from .features import (
    DemandTransform, EncodedRow, FeatureSchema, advance_lag_state, derive, encode,
    start_lag_state,
)

VARIANTS = ("ARMDN", "R_MDN", "A_MDN", "AR")
SIGMA_MIN = 1e-5
SIGMA_MAX = 1e10
_LOG_2PI = math.log(2 * math.pi)
CHECKPOINT_FORMAT = "demandcast.armdn"
CHECKPOINT_VERSION = 1


class SchemaMismatch(ValueError):
    """Checkpoint was fitted against a different feature schema."""


@dataclass(frozen=True)
class ArmdnConfig:
    n_numeric: int
    n_binary: int
    vocab_sizes: tuple[int, ...]
    variant: str = "ARMDN"
    n_mixtures: int = 10
    hidden: int = 50
    embed_dim: int = 30
    ff_dim: int = 50

    def __post_init__(self):
        object.__setattr__(self, "vocab_sizes", tuple(int(v) for v in self.vocab_sizes))
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.variant == "AR" and self.n_mixtures != 1:
            object.__setattr__(self, "n_mixtures", 1)
        if self.n_mixtures < 1:
            raise ValueError("n_mixtures must be >= 1")

    @classmethod
    def for_schema(cls, schema: FeatureSchema, variant: str = "ARMDN", n_mixtures: int = 10,
                   **kw) -> ArmdnConfig:
        return cls(
            n_numeric=len(schema.numeric),
            n_binary=len(schema.binary),
            vocab_sizes=tuple(schema.vocab_size(f.name) for f in schema.categorical),
            variant=variant,
            n_mixtures=n_mixtures,
            **kw,
        )

    @property
    def recurrent(self) -> bool:
        return self.variant != "A_MDN"

    @property
    def activation(self) -> str:
        # R-MDN has no associative MLP: encoded inputs reach the LSTM through a linear map
        return "linear" if self.variant == "R_MDN" else "elu"

    @property
    def input_dim(self) -> int:
        return self.n_numeric + self.embed_dim * len(self.vocab_sizes) + self.n_binary

    @property
    def head_dim(self) -> int:
        return self.hidden if self.recurrent else self.ff_dim

    def to_dict(self) -> dict:
        return {
            "n_numeric": self.n_numeric, "n_binary": self.n_binary,
            "vocab_sizes": list(self.vocab_sizes), "variant": self.variant,
            "n_mixtures": self.n_mixtures, "hidden": self.hidden,
            "embed_dim": self.embed_dim, "ff_dim": self.ff_dim,
        }


@dataclass(frozen=True)
class MdnOutput:
    """Mixture parameters; the last axis indexes the K components."""

    p: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray

    @property
    def n_mixtures(self) -> int:
        return self.p.shape[-1]


@dataclass(frozen=True)
class LstmState:
    hidden: np.ndarray
    cell: np.ndarray

    @classmethod
    def zeros(cls, size: int) -> LstmState:
        return cls(np.zeros(size), np.zeros(size))


@dataclass
class ArmdnModel:
    config: ArmdnConfig
    params: dict[str, np.ndarray]
    schema_hash: str
    meta: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# parameters


def param_shapes(cfg: ArmdnConfig) -> dict[str, tuple[int, ...]]:
    shapes = {f"emb{j}": (v, cfg.embed_dim) for j, v in enumerate(cfg.vocab_sizes)}
    shapes["W_ff"] = (cfg.input_dim, cfg.ff_dim)
    shapes["b_ff"] = (cfg.ff_dim,)
    if cfg.recurrent:
        shapes["W_lstm"] = (1 + cfg.ff_dim + cfg.hidden, 4 * cfg.hidden)
        shapes["b_lstm"] = (4 * cfg.hidden,)
    K, H = cfg.n_mixtures, cfg.head_dim
    for head in ("p", "sigma", "mu"):
        shapes[f"W_{head}"] = (K, H)
        shapes[f"b_{head}"] = (K,)
    return shapes


def init_params(cfg: ArmdnConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Glorot-uniform weights, zero biases, LSTM forget-gate bias 1."""
    params = {}
    for name, shape in param_shapes(cfg).items():
        if len(shape) == 1:
            params[name] = np.zeros(shape)
            continue
        if name.startswith("W_") and name[2:] in ("p", "sigma", "mu"):
            fan_in, fan_out = shape[1], shape[0]
        else:
            fan_in, fan_out = shape
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        params[name] = rng.uniform(-bound, bound, size=shape)
    if cfg.recurrent:
        H = cfg.hidden
        params["b_lstm"][H:2 * H] = 1.0
    return params


def n_parameters(params: dict[str, np.ndarray]) -> int:
    return sum(p.size for p in params.values())


# ---------------------------------------------------------------------------
# single-step building blocks


def _elu(a):
    return np.where(a > 0, a, np.expm1(np.minimum(a, 0.0)))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _assoc_input(numeric, cats, binary, params) -> np.ndarray:
    parts = [numeric]
    for j in range(cats.shape[-1]):
        parts.append(params[f"emb{j}"][cats[..., j]])
    parts.append(binary)
    return np.concatenate(parts, axis=-1)


def associative_forward(encoded: EncodedRow, params: dict, cfg: ArmdnConfig) -> np.ndarray:
    """ff = act(W [numeric; embeddings; binary] + b) for one encoded row."""
    cats = np.array([i for _, i in encoded.categorical], dtype=np.int64)
    x = _assoc_input(encoded.numeric, cats, encoded.binary, params)
    if x.shape != (cfg.input_dim,):
        raise ValueError(f"encoded row has width {x.shape[-1]}, model expects {cfg.input_dim}")
    a = x @ params["W_ff"] + params["b_ff"]
    return _elu(a) if cfg.activation == "elu" else a


def lstm_step(y_prev: float, ff: np.ndarray, state: LstmState, params: dict,
              cfg: ArmdnConfig) -> tuple[np.ndarray, LstmState]:
    H = cfg.hidden
    u = np.concatenate([[y_prev], ff, state.hidden])
    z = u @ params["W_lstm"] + params["b_lstm"]
    i = _sigmoid(z[:H])
    f = _sigmoid(z[H:2 * H])
    o = _sigmoid(z[2 * H:3 * H])
    g = np.tanh(z[3 * H:])
    c = f * state.cell + i * g
    h = o * np.tanh(c)
    return h, LstmState(h, c)


def _softmax(logits):
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(logits):
    m = logits.max(axis=-1, keepdims=True)
    return logits - m - np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))


def _sigma(raw):
    return np.clip(np.exp(np.clip(raw, -30.0, 30.0)), SIGMA_MIN, SIGMA_MAX)


def mdn_head(h: np.ndarray, params: dict, cfg: ArmdnConfig | None = None) -> MdnOutput:
    """Mixture weights (softmax), clipped deviations and means from ``h``."""
    logits = h @ params["W_p"].T + params["b_p"]
    raw = h @ params["W_sigma"].T + params["b_sigma"]
    mu = h @ params["W_mu"].T + params["b_mu"]
    return MdnOutput(_softmax(logits), mu, _sigma(raw))


def _log_mixture_terms(log_p, mu, sigma, y):
    zscore = (y[..., None] - mu) / sigma
    return log_p - 0.5 * _LOG_2PI - np.log(sigma) - 0.5 * zscore * zscore


def _logsumexp(a):
    m = a.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return (m + np.log(np.exp(a - m).sum(axis=-1, keepdims=True)))[..., 0]


def cell_nll(out: MdnOutput, y) -> np.ndarray:
    """Per-cell negative log-likelihood of ``y`` under the mixture."""
    with np.errstate(divide="ignore"):
        log_p = np.log(out.p)
    return -_logsumexp(_log_mixture_terms(log_p, out.mu, out.sigma, np.asarray(y, float)))


def nll_loss(outputs: MdnOutput, targets, mask) -> float:
    """Mean negative log-likelihood over unmasked cells, computed in log space."""
    targets = np.asarray(targets, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    n = mask.sum()
    if n <= 0:
        raise ValueError("nll_loss needs at least one unmasked cell")
    nll = cell_nll(outputs, targets)
    return math.fsum(np.where(mask > 0, nll, 0.0).ravel()) / n


def point_forecast(m: MdnOutput, transform: DemandTransform | None = None,
                   statistic: str = "mean") -> float:
    """Mixture mean (or median) in model space, mapped back to demand units."""
    if statistic == "mean":
        z = float(np.sum(m.p * m.mu))
    elif statistic == "median":
        z = _mixture_median(m)
    else:
        raise ValueError(f"unknown point statistic {statistic!r}")
    if transform is None:
        return z
    return float(transform.inverse(z))


def _mixture_median(m: MdnOutput) -> float:
    lo = float(np.min(m.mu - 10 * m.sigma))
    hi = float(np.max(m.mu + 10 * m.sigma))
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if np.sum(m.p * ndtr((mid - m.mu) / m.sigma)) < 0.5:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# batched forward / backward


@dataclass
class SequenceBatch:
    """Padded minibatch of encoded sequences (B series x T steps)."""

    numeric: np.ndarray  # (B, T, n_numeric)
    categorical: np.ndarray  # (B, T, n_cat) int
    binary: np.ndarray  # (B, T, n_binary)
    y_prev: np.ndarray  # (B, T) model-space demand of the previous week
    y: np.ndarray  # (B, T) model-space demand
    mask: np.ndarray  # (B, T) 1 where the cell enters the loss
    lengths: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.y.shape


def forward(params: dict, cfg: ArmdnConfig, batch: SequenceBatch,
            dropout_mask: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray, list]:
    """Run the network over a batch; returns (logits, raw_sigma, mu, cache)."""
    B, T = batch.shape
    K, H = cfg.n_mixtures, cfg.hidden
    logits = np.empty((B, T, K))
    raw = np.empty((B, T, K))
    mu = np.empty((B, T, K))
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    cache = []
    for t in range(T):
        x = _assoc_input(batch.numeric[:, t], batch.categorical[:, t], batch.binary[:, t], params)
        a = x @ params["W_ff"] + params["b_ff"]
        ff = _elu(a) if cfg.activation == "elu" else a
        if dropout_mask is not None:
            ff = ff * dropout_mask[:, t]
        step = {"x": x, "a": a}
        if cfg.recurrent:
            u = np.concatenate([batch.y_prev[:, t, None], ff, h], axis=1)
            z = u @ params["W_lstm"] + params["b_lstm"]
            i = _sigmoid(z[:, :H])
            f = _sigmoid(z[:, H:2 * H])
            o = _sigmoid(z[:, 2 * H:3 * H])
            g = np.tanh(z[:, 3 * H:])
            c_prev = c
            c = f * c_prev + i * g
            tc = np.tanh(c)
            h = o * tc
            step.update(u=u, i=i, f=f, o=o, g=g, c_prev=c_prev, tc=tc)
            out_h = h
        else:
            out_h = ff
        step["h"] = out_h
        logits[:, t] = out_h @ params["W_p"].T + params["b_p"]
        raw[:, t] = out_h @ params["W_sigma"].T + params["b_sigma"]
        mu[:, t] = out_h @ params["W_mu"].T + params["b_mu"]
        cache.append(step)
    return logits, raw, mu, cache


def batch_outputs(params: dict, cfg: ArmdnConfig, batch: SequenceBatch) -> MdnOutput:
    logits, raw, mu, _ = forward(params, cfg, batch)
    return MdnOutput(_softmax(logits), mu, _sigma(raw))


def _mixture_terms(logits, raw, mu, y):
    log_p = _log_softmax(logits)
    sigma = _sigma(raw)
    a = _log_mixture_terms(log_p, mu, sigma, y)
    lse = _logsumexp(a)
    return log_p, sigma, a, lse


def batch_loss(params: dict, cfg: ArmdnConfig, batch: SequenceBatch) -> float:
    """Masked mean NLL of a batch without dropout."""
    logits, raw, mu, _ = forward(params, cfg, batch)
    _, _, _, lse = _mixture_terms(logits, raw, mu, batch.y)
    n = batch.mask.sum()
    if n <= 0:
        raise ValueError("batch has no unmasked cells")
    return math.fsum(np.where(batch.mask > 0, -lse, 0.0).ravel()) / n


def loss_and_grad(params: dict, cfg: ArmdnConfig, batch: SequenceBatch,
                  dropout_mask: np.ndarray | None = None) -> tuple[float, dict[str, np.ndarray]]:
    """Masked mean NLL and its exact gradient w.r.t. every parameter."""
    B, T = batch.shape
    H, F = cfg.hidden, cfg.ff_dim
    n = batch.mask.sum()
    if n <= 0:
        raise ValueError("batch has no unmasked cells")
    logits, raw, mu, cache = forward(params, cfg, batch, dropout_mask)
    log_p, sigma, a, lse = _mixture_terms(logits, raw, mu, batch.y)
    loss = math.fsum(np.where(batch.mask > 0, -lse, 0.0).ravel()) / n

    p = np.exp(log_p)
    gamma = np.exp(a - lse[..., None])
    zscore = (batch.y[..., None] - mu) / sigma
    inside = (sigma > SIGMA_MIN) & (sigma < SIGMA_MAX)

    grads = {k: np.zeros_like(v) for k, v in params.items()}
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    n_num = cfg.n_numeric
    E = cfg.embed_dim
    for t in reversed(range(T)):
        step = cache[t]
        w = (batch.mask[:, t] / n)[:, None]
        d_logits = w * (p[:, t] - gamma[:, t])
        d_mu = -w * gamma[:, t] * zscore[:, t] / sigma[:, t]
        d_raw = w * gamma[:, t] * (1.0 - zscore[:, t] ** 2) * inside[:, t]
        h = step["h"]
        grads["W_p"] += d_logits.T @ h
        grads["b_p"] += d_logits.sum(axis=0)
        grads["W_sigma"] += d_raw.T @ h
        grads["b_sigma"] += d_raw.sum(axis=0)
        grads["W_mu"] += d_mu.T @ h
        grads["b_mu"] += d_mu.sum(axis=0)
        dh = d_logits @ params["W_p"] + d_raw @ params["W_sigma"] + d_mu @ params["W_mu"]

        if cfg.recurrent:
            dh = dh + dh_next
            i, f, o, g, tc = step["i"], step["f"], step["o"], step["g"], step["tc"]
            dc = dh * o * (1.0 - tc * tc) + dc_next
            dz = np.concatenate([
                dc * g * i * (1.0 - i),
                dc * step["c_prev"] * f * (1.0 - f),
                dh * tc * o * (1.0 - o),
                dc * i * (1.0 - g * g),
            ], axis=1)
            grads["W_lstm"] += step["u"].T @ dz
            grads["b_lstm"] += dz.sum(axis=0)
            du = dz @ params["W_lstm"].T
            dff = du[:, 1:1 + F]
            dh_next = du[:, 1 + F:]
            dc_next = dc * f
        else:
            dff = dh
        if dropout_mask is not None:
            dff = dff * dropout_mask[:, t]
        if cfg.activation == "elu":
            da = dff * np.where(step["a"] > 0, 1.0, np.exp(np.minimum(step["a"], 0.0)))
        else:
            da = dff
        grads["W_ff"] += step["x"].T @ da
        grads["b_ff"] += da.sum(axis=0)
        dx = da @ params["W_ff"].T
        for j in range(len(cfg.vocab_sizes)):
            lo = n_num + j * E
            np.add.at(grads[f"emb{j}"], batch.categorical[:, t, j], dx[:, lo:lo + E])
    return loss, grads


# ---------------------------------------------------------------------------
# forecasting


def _model_step(model: ArmdnModel, enc: EncodedRow, y_prev: float,
                state: LstmState | None) -> tuple[np.ndarray, LstmState | None]:
    ff = associative_forward(enc, model.params, model.config)
    if not model.config.recurrent:
        return ff, state
    return lstm_step(y_prev, ff, state, model.params, model.config)


def forecast(model: ArmdnModel, series: SeriesInstance, schema: FeatureSchema, horizon: int,
             future: Sequence[RawFeatureRow] = (), actuals: Sequence[float] | None = None,
             assume_in_stock: bool = True,
             statistic: str = "mean") -> list[tuple[MdnOutput, float]]:
    """Roll the model ``horizon`` weeks past the end of ``series``.

    History is consumed with teacher forcing; each future step then feeds
    its own point forecast back as the previous demand and into the lag
    features.  Passing ``actuals`` feeds the realized demand instead.
    """
    if horizon <= 0:
        return []
    if len(future) < horizon:
        raise DataError(f"{series.key}: {horizon} future feature rows needed, got {len(future)}")
    if actuals is not None and len(actuals) < horizon:
        raise ValueError("actuals shorter than horizon")
    cfg = model.config
    tr = schema.demand_transform(series.vertical_id)
    future = tuple(replace(r, out_of_stock_pct=0.0) if assume_in_stock else r
                   for r in future[:horizon])
    lag = start_lag_state(series, schema.discount_for(series.vertical_id))
    state = LstmState.zeros(cfg.hidden) if cfg.recurrent else None
    y_prev = 0.0
    for t, y, row in zip(series.weeks, series.demand, series.features):
        t = int(t)
        enc = encode(row, derive(series, t, lag, future), schema, series.sku_id)
        _, state = _model_step(model, enc, y_prev, state)
        lag = advance_lag_state(lag, y, row.effective_price, event=row.is_event)
        y_prev = float(tr.forward(y))

    out = []
    for j in range(horizon):
        t = series.end_week + 1 + j
        row = future[j]
        enc = encode(row, derive(series, t, lag, future), schema, series.sku_id)
        h, state = _model_step(model, enc, y_prev, state)
        m = mdn_head(h, model.params)
        point = point_forecast(m, tr, statistic)
        out.append((m, point))
        fed = float(actuals[j]) if actuals is not None else point
        lag = advance_lag_state(lag, fed, row.effective_price, event=row.is_event)
        y_prev = float(tr.forward(fed))
    return out


# ---------------------------------------------------------------------------
# checkpoints


def _params_to_json(params: dict[str, np.ndarray]) -> dict:
    return {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in sorted(params.items())}


def _params_from_json(d: dict) -> dict[str, np.ndarray]:
    return {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in d.items()}


def checkpoint_json(model: ArmdnModel) -> str:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "schema_hash": model.schema_hash,
        "config": model.config.to_dict(),
        "meta": model.meta,
        "params": _params_to_json(model.params),
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"


def save_checkpoint(model: ArmdnModel, path: str | Path) -> str:
    """Write the checkpoint; returns its sha256."""
    text = checkpoint_json(model)
    Path(path).write_text(text)
    return hashlib.sha256(text.encode()).hexdigest()


def load_checkpoint(path: str | Path, schema: FeatureSchema | None = None) -> ArmdnModel:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} AR-MDN checkpoint")
    if schema is not None and schema.hash != doc["schema_hash"]:
        raise SchemaMismatch(
            f"checkpoint schema {doc['schema_hash']} does not match data schema {schema.hash}"
        )
    cfg = doc["config"]
    config = ArmdnConfig(**{**cfg, "vocab_sizes": tuple(cfg["vocab_sizes"])})
    params = _params_from_json(doc["params"])
    expected = param_shapes(config)
    if {k: v.shape for k, v in params.items()} != expected:
        raise ValueError(f"{path}: parameter shapes do not match the stored config")
    return ArmdnModel(config, params, doc["schema_hash"], doc.get("meta", {}))
