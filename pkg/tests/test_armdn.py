import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from demandcast.armdn import (
    SIGMA_MAX, SIGMA_MIN, VARIANTS, ArmdnConfig, ArmdnModel, LstmState, MdnOutput, SchemaMismatch,
    SequenceBatch, associative_forward, batch_loss, batch_outputs, cell_nll, forecast, init_params,
    load_checkpoint, loss_and_grad, lstm_step, mdn_head, nll_loss, param_shapes, point_forecast,
    save_checkpoint,
)
from demandcast.dataset import Dataset
from demandcast.features import DemandTransform, EncodedRow, fit_schema

from conftest import finite_difference_errors, make_series, perturbed_params, random_batch

SMALL = dict(n_numeric=3, n_binary=2, vocab_sizes=(4, 3), n_mixtures=3, hidden=5, embed_dim=4,
             ff_dim=6)


def _cfg(variant="ARMDN", **kw):
    return ArmdnConfig(**{**SMALL, **kw, "variant": variant})


def _zero_params(cfg):
    return {k: np.zeros(s) for k, s in param_shapes(cfg).items()}


def _encoded(rng, cfg):
    cats = tuple((f"c{j}", int(rng.integers(v))) for j, v in enumerate(cfg.vocab_sizes))
    return EncodedRow(rng.normal(size=cfg.n_numeric), cats,
                      rng.integers(0, 2, cfg.n_binary).astype(float))


# ---------------------------------------------------------------------------
# configuration and parameters


def test_variants_config():
    assert not _cfg("A_MDN").recurrent
    assert _cfg("R_MDN").activation == "linear"
    assert _cfg("AR").n_mixtures == 1
    with pytest.raises(ValueError):
        _cfg("XYZ")
    with pytest.raises(ValueError):
        ArmdnConfig(**{**SMALL, "n_mixtures": 0})


def test_default_widths():
    cfg = ArmdnConfig(n_numeric=2, n_binary=1, vocab_sizes=(5,))
    shapes = param_shapes(cfg)
    assert shapes["emb0"] == (5, 30)
    assert shapes["W_ff"] == (2 + 30 + 1, 50)
    assert shapes["W_lstm"] == (1 + 50 + 50, 200)
    assert shapes["W_p"] == shapes["W_sigma"] == shapes["W_mu"] == (10, 50)


def test_init_glorot_and_forget_bias():
    cfg = _cfg()
    params = init_params(cfg, np.random.default_rng(0))
    H = cfg.hidden
    np.testing.assert_array_equal(params["b_lstm"][H:2 * H], 1.0)
    np.testing.assert_array_equal(params["b_lstm"][:H], 0.0)
    fan_in, fan_out = params["W_ff"].shape
    assert np.abs(params["W_ff"]).max() <= math.sqrt(6 / (fan_in + fan_out))


# ---------------------------------------------------------------------------
# associative layer


def test_associative_zero_weights():
    cfg = _cfg()
    ff = associative_forward(_encoded(np.random.default_rng(1), cfg), _zero_params(cfg), cfg)
    np.testing.assert_array_equal(ff, 0.0)


def test_associative_elu_closed_form():
    cfg = _cfg()
    params = _zero_params(cfg)
    params["b_ff"][:] = -1.0
    ff = associative_forward(_encoded(np.random.default_rng(1), cfg), params, cfg)
    np.testing.assert_allclose(ff, math.exp(-1) - 1, rtol=0, atol=1e-15)
    assert ff[0] == pytest.approx(-0.6321, abs=1e-4)


def test_associative_matvec_oracle():
    rng = np.random.default_rng(2)
    cfg = _cfg()
    params = perturbed_params(rng, cfg)
    enc = _encoded(rng, cfg)
    x = list(enc.numeric)
    for j, (_, idx) in enumerate(enc.categorical):
        x += list(params[f"emb{j}"][idx])
    x += list(enc.binary)
    W, b = params["W_ff"], params["b_ff"]
    expect = []
    for o in range(cfg.ff_dim):
        a = b[o] + sum(x[i] * W[i, o] for i in range(len(x)))
        expect.append(a if a > 0 else math.exp(a) - 1)
    np.testing.assert_allclose(associative_forward(enc, params, cfg), expect, rtol=0, atol=1e-12)


def test_associative_shape_mismatch():
    cfg = _cfg()
    enc = EncodedRow(np.zeros(5), (("a", 0), ("b", 0)), np.zeros(2))
    with pytest.raises(ValueError):
        associative_forward(enc, _zero_params(cfg), cfg)


# ---------------------------------------------------------------------------
# LSTM


def test_lstm_zero_weights():
    cfg = _cfg()
    state = LstmState(np.ones(cfg.hidden), np.ones(cfg.hidden) * 0.0)
    h, new = lstm_step(3.0, np.ones(cfg.ff_dim), state, _zero_params(cfg), cfg)
    np.testing.assert_array_equal(h, 0.0)
    np.testing.assert_array_equal(new.cell, 0.0)


def test_lstm_scalar_oracle():
    rng = np.random.default_rng(3)
    cfg = _cfg()
    params = perturbed_params(rng, cfg)
    ff = rng.normal(size=cfg.ff_dim)
    state = LstmState(rng.normal(size=cfg.hidden), rng.normal(size=cfg.hidden))
    y_prev = 0.7
    H = cfg.hidden
    u = [y_prev] + list(ff) + list(state.hidden)
    W, b = params["W_lstm"], params["b_lstm"]
    sig = lambda v: 1 / (1 + math.exp(-v))
    h_exp, c_exp = [], []
    for k in range(H):
        pre = [b[g * H + k] + sum(u[i] * W[i, g * H + k] for i in range(len(u))) for g in range(4)]
        i_, f_, o_, g_ = sig(pre[0]), sig(pre[1]), sig(pre[2]), math.tanh(pre[3])
        c = f_ * state.cell[k] + i_ * g_
        c_exp.append(c)
        h_exp.append(o_ * math.tanh(c))
    h, new = lstm_step(y_prev, ff, state, params, cfg)
    np.testing.assert_allclose(h, h_exp, rtol=0, atol=1e-12)
    np.testing.assert_allclose(new.cell, c_exp, rtol=0, atol=1e-12)


def test_lstm_deterministic():
    rng = np.random.default_rng(4)
    cfg = _cfg()
    params = perturbed_params(rng, cfg)
    inputs = [(rng.normal(), rng.normal(size=cfg.ff_dim)) for _ in range(4)]
    runs = []
    for _ in range(2):
        s = LstmState.zeros(cfg.hidden)
        for y, ff in inputs:
            h, s = lstm_step(y, ff, s, params, cfg)
        runs.append(h)
    np.testing.assert_array_equal(runs[0], runs[1])


# ---------------------------------------------------------------------------
# MDN head and loss


def test_head_single_component():
    cfg = _cfg("AR")
    params = perturbed_params(np.random.default_rng(5), cfg)
    m = mdn_head(np.random.default_rng(6).normal(size=(7, cfg.hidden)), params)
    np.testing.assert_array_equal(m.p, 1.0)


def test_head_sigma_unit_and_clipped():
    cfg = _cfg()
    params = _zero_params(cfg)
    h = np.ones(cfg.hidden)
    np.testing.assert_array_equal(mdn_head(h, params).sigma, 1.0)
    params["b_sigma"][:] = -1e4
    assert np.all(mdn_head(h, params).sigma == SIGMA_MIN)
    params["b_sigma"][:] = 1e4
    assert np.all(mdn_head(h, params).sigma == SIGMA_MAX)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 12), st.floats(-1e3, 1e3), st.integers(0, 2**31))
def test_mixture_validity_property(K, scale, seed):
    rng = np.random.default_rng(seed)
    params = {"W_p": rng.normal(size=(K, 4)) * scale, "b_p": rng.normal(size=K) * scale,
              "W_sigma": rng.normal(size=(K, 4)) * scale, "b_sigma": rng.normal(size=K),
              "W_mu": rng.normal(size=(K, 4)), "b_mu": rng.normal(size=K)}
    m = mdn_head(rng.normal(size=(5, 4)), params)
    assert np.all(np.abs(m.p.sum(axis=-1) - 1) <= 1e-9)
    assert np.all((m.p >= 0) & (m.p <= 1))
    assert np.all((m.sigma >= SIGMA_MIN) & (m.sigma <= SIGMA_MAX))
    assert all(np.all(np.isfinite(a)) for a in (m.p, m.mu, m.sigma))


def test_nll_naive_density_oracle():
    rng = np.random.default_rng(7)
    for _ in range(50):
        K = int(rng.integers(1, 6))
        p = rng.dirichlet(np.ones(K))
        mu = rng.normal(size=K)
        sigma = rng.uniform(0.3, 2.0, K)
        y = float(rng.normal())
        dens = sum(p[k] / math.sqrt(2 * math.pi * sigma[k] ** 2)
                   * math.exp(-(y - mu[k]) ** 2 / (2 * sigma[k] ** 2)) for k in range(K))
        got = nll_loss(MdnOutput(p[None], mu[None], sigma[None]), [y], [1.0])
        assert got == pytest.approx(-math.log(dens), abs=1e-9)


def test_nll_masking_and_duplication():
    rng = np.random.default_rng(8)
    K, N = 3, 6
    m = MdnOutput(rng.dirichlet(np.ones(K), N), rng.normal(size=(N, K)), rng.uniform(0.5, 2, (N, K)))
    y = rng.normal(size=N)
    mask = np.array([1, 1, 0, 1, 0, 1.0])
    base = nll_loss(m, y, mask)
    y2 = y.copy()
    y2[mask == 0] = 1e6
    assert nll_loss(m, y2, mask) == base
    dup = MdnOutput(np.concatenate([m.p, m.p]), np.concatenate([m.mu, m.mu]),
                    np.concatenate([m.sigma, m.sigma]))
    assert nll_loss(dup, np.concatenate([y, y]), np.concatenate([mask, mask])) == pytest.approx(base, abs=1e-15)
    with pytest.raises(ValueError):
        nll_loss(m, y, np.zeros(N))


def test_nll_logsumexp_stability():
    m = MdnOutput(np.array([[0.5, 0.5]]), np.array([[0.0, 1.0]]), np.array([[1e-3, 1e-3]]))
    y = np.array([1.0 + 1000 * 1e-3])
    v = nll_loss(m, y, [1.0])
    assert math.isfinite(v)
    # the nearest component dominates: -log(0.5 N(y; 1, 1e-3)) at z = 1000
    expect = -math.log(0.5) + 0.5 * math.log(2 * math.pi) + math.log(1e-3) + 0.5 * 1000 ** 2
    assert v == pytest.approx(expect, rel=1e-12)


def test_sigma_frozen_single_gaussian_is_squared_error():
    rng = np.random.default_rng(9)
    mu = rng.normal(size=(10, 1))
    y = rng.normal(size=10)
    m = MdnOutput(np.ones((10, 1)), mu, np.ones((10, 1)))
    mse = np.mean((y - mu[:, 0]) ** 2)
    assert nll_loss(m, y, np.ones(10)) == pytest.approx(0.5 * math.log(2 * math.pi) + 0.5 * mse,
                                                        abs=1e-12)


# ---------------------------------------------------------------------------
# gradients


@pytest.mark.parametrize("variant", VARIANTS)
def test_gradients_match_finite_differences(variant):
    rng = np.random.default_rng(10)
    cfg = _cfg(variant)
    params = perturbed_params(rng, cfg)
    batch = random_batch(rng, cfg, mask=[[1, 1, 1], [1, 1, 0]])
    worst = finite_difference_errors(params, cfg, batch)
    assert max(worst.values()) < 1e-4, worst


def test_gradients_with_dropout_mask():
    rng = np.random.default_rng(11)
    cfg = _cfg()
    params = perturbed_params(rng, cfg)
    batch = random_batch(rng, cfg)
    drop = (rng.random((2, 3, cfg.ff_dim)) < 0.5) * 2.0
    _, g = loss_and_grad(params, cfg, batch, drop)
    eps = 1e-6
    name, idx = "W_ff", (1, 2)
    from demandcast.armdn import forward, _mixture_terms

    def loss():
        lg, raw, mu, _ = forward(params, cfg, batch, drop)
        return float(-_mixture_terms(lg, raw, mu, batch.y)[3].mean())

    old = params[name][idx]
    params[name][idx] = old + eps
    lp = loss()
    params[name][idx] = old - eps
    lm = loss()
    params[name][idx] = old
    assert g[name][idx] == pytest.approx((lp - lm) / (2 * eps), rel=1e-5, abs=1e-9)


def test_unused_embedding_rows_zero_grad():
    rng = np.random.default_rng(12)
    cfg = _cfg()
    params = perturbed_params(rng, cfg)
    batch = random_batch(rng, cfg)
    batch.categorical[..., 0] = np.minimum(batch.categorical[..., 0], 2)
    _, g = loss_and_grad(params, cfg, batch)
    np.testing.assert_array_equal(g["emb0"][3], 0.0)


def test_duplicated_batch_same_gradient():
    rng = np.random.default_rng(13)
    cfg = _cfg()
    params = perturbed_params(rng, cfg)
    b = random_batch(rng, cfg, mask=[[1, 1, 1], [1, 0, 0]])
    cat = lambda a: np.concatenate([a, a])
    b2 = SequenceBatch(cat(b.numeric), cat(b.categorical), cat(b.binary), cat(b.y_prev),
                       cat(b.y), cat(b.mask))
    l1, g1 = loss_and_grad(params, cfg, b)
    l2, g2 = loss_and_grad(params, cfg, b2)
    assert l1 == pytest.approx(l2, abs=1e-14)
    for k in g1:
        np.testing.assert_allclose(g1[k], g2[k], rtol=1e-10, atol=1e-14)


def test_padding_neutral_bitwise():
    rng = np.random.default_rng(14)
    cfg = _cfg()
    params = perturbed_params(rng, cfg)
    b = random_batch(rng, cfg, mask=[[1, 1, 1], [1, 1, 0]])
    pad = lambda a, v=0.0: np.concatenate([a, np.full(a[:, :1].shape, v, dtype=a.dtype)], axis=1)
    bp = SequenceBatch(pad(b.numeric, 3.0), pad(b.categorical, 1), pad(b.binary, 1.0),
                       pad(b.y_prev, 2.0), pad(b.y, -5.0), pad(b.mask))
    l1, g1 = loss_and_grad(params, cfg, b)
    l2, g2 = loss_and_grad(params, cfg, bp)
    assert l1 == l2
    for k in g1:
        np.testing.assert_array_equal(g1[k], g2[k])


def test_sequence_nll_is_sum_of_step_nlls():
    rng = np.random.default_rng(15)
    cfg = _cfg()
    params = perturbed_params(rng, cfg)
    b = random_batch(rng, cfg, B=1, T=4)
    out = batch_outputs(params, cfg, b)
    steps = [float(cell_nll(MdnOutput(out.p[0, t], out.mu[0, t], out.sigma[0, t]), b.y[0, t]))
             for t in range(4)]
    assert batch_loss(params, cfg, b) * 4 == pytest.approx(math.fsum(steps), abs=1e-12)


# ---------------------------------------------------------------------------
# point forecasts and rollout


def test_point_forecast_single_component():
    tr = DemandTransform(2.0, 0.5)
    m = MdnOutput(np.array([1.0]), np.array([0.3]), np.array([1.0]))
    assert point_forecast(m, tr) == pytest.approx(math.expm1(0.3 * 0.5 + 2.0), rel=1e-14)
    assert point_forecast(MdnOutput(np.array([1.0]), np.array([-50.0]), np.array([1.0])), tr) == 0.0


def test_point_forecast_symmetric_mixture():
    m = MdnOutput(np.array([0.5, 0.5]), np.array([-1.7, 1.7]), np.array([0.4, 0.4]))
    assert point_forecast(m) == 0.0
    assert point_forecast(m, statistic="median") == pytest.approx(0.0, abs=1e-9)


def test_point_forecast_monte_carlo():
    rng = np.random.default_rng(16)
    p, mu, sigma = np.array([0.2, 0.5, 0.3]), np.array([-1.0, 0.5, 2.0]), np.array([0.3, 1.0, 0.6])
    comp = rng.choice(3, size=1_000_000, p=p)
    draws = rng.normal(mu[comp], sigma[comp])
    se = draws.std() / math.sqrt(len(draws))
    assert abs(point_forecast(MdnOutput(p, mu, sigma)) - draws.mean()) < 3 * se
    med = point_forecast(MdnOutput(p, mu, sigma), statistic="median")
    assert abs(np.mean(draws <= med) - 0.5) < 0.002


def _model_for(series_list, variant="ARMDN", K=3, seed=0):
    schema = fit_schema(Dataset(tuple(series_list)))
    cfg = ArmdnConfig.for_schema(schema, variant, K, hidden=6, embed_dim=3, ff_dim=5)
    params = perturbed_params(np.random.default_rng(seed), cfg, 0.2)
    return ArmdnModel(cfg, params, schema.hash), schema


def test_forecast_horizon_zero_and_missing_rows():
    s = make_series([3, 4, 5, 6, 2, 3])
    model, schema = _model_for([s])
    assert forecast(model, s, schema, 0) == []
    from demandcast.dataset import DataError
    with pytest.raises(DataError):
        forecast(model, s, schema, 3, make_series([1, 1]).features)


def test_forecast_frozen_sigma_k1_point_is_mu():
    s = make_series([3, 4, 5, 6, 2, 3])
    model, schema = _model_for([s], variant="AR", K=1)
    model.params["W_sigma"][:] = 0.0
    model.params["b_sigma"][:] = 0.0
    future = make_series([0] * 3).features
    tr = schema.demand_transform(s.vertical_id)
    for m, point in forecast(model, s, schema, 3, future):
        assert m.sigma[0] == 1.0
        assert point == pytest.approx(float(tr.inverse(m.mu[0])), rel=1e-14)


@pytest.mark.parametrize("variant", VARIANTS)
def test_teacher_forced_forecast_matches_loss(variant):
    from demandcast.train import evaluate_nll, prepare_series
    full = make_series([3, 4, 8, 6, 2, 3, 9, 4, 5, 7], prices=[10, 10, 9, 9, 9, 10, 10, 8, 8, 8],
                       events={6})
    history = full.slice_weeks(0, 5)
    model, schema = _model_for([history], variant)
    tr = schema.demand_transform(full.vertical_id)
    outs = forecast(model, history, schema, 4, full.features[6:], actuals=full.demand[6:])
    per_step = [float(cell_nll(m, tr.forward(y))) for (m, _), y in zip(outs, full.demand[6:])]
    inst = prepare_series(Dataset((full,)), schema, val_weeks=4)
    _, val = evaluate_nll(model.params, model.config, inst)
    assert math.fsum(per_step) / 4 == pytest.approx(val, abs=1e-12)


def test_forecast_deterministic():
    s = make_series([3, 4, 5, 6, 2, 3])
    model, schema = _model_for([s])
    future = make_series([0] * 4).features
    a = forecast(model, s, schema, 4, future)
    b = forecast(model, s, schema, 4, future)
    assert [p for _, p in a] == [p for _, p in b]


def test_checkpoint_roundtrip(tmp_path):
    s = make_series([3, 4, 5, 6, 2, 3])
    model, schema = _model_for([s])
    h1 = save_checkpoint(model, tmp_path / "m.json")
    back = load_checkpoint(tmp_path / "m.json", schema)
    for k in model.params:
        np.testing.assert_array_equal(back.params[k], model.params[k])
    assert save_checkpoint(back, tmp_path / "m2.json") == h1
    other = fit_schema(Dataset((make_series([1, 9, 1, 9]),)))
    with pytest.raises(SchemaMismatch):
        load_checkpoint(tmp_path / "m.json", other)
