import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from demandcast.dataset import DataError, Dataset, split_windows
from demandcast.features import (
    BUCKETS, EVENT_CAP, OOV_INDEX, FeatureSchema, advance_lag_state, derive, derive_series,
    encode, encode_series, fit_schema, start_lag_state,
)

from conftest import make_series


def test_schema_buckets_and_kinds(small_data):
    schema = fit_schema(small_data)
    assert {f.bucket for f in schema.features} <= set(BUCKETS)
    assert {f.kind for f in schema.features} == {"numeric", "categorical", "binary"}
    assert len(schema.numeric) == 4 + 13
    for f in schema.categorical:
        assert f.vocabulary
    for f in schema.numeric:
        assert f.std > 0


def test_constant_feature_flagged():
    s = make_series([1, 2, 3, 4, 5])
    schema = fit_schema(Dataset((s,)))
    lp = schema.spec("listed_price")
    assert lp.constant and lp.std == 1.0
    assert not schema.spec("lag_sale_mean_1w").constant


def test_schema_stats_two_pass_oracle(small_data):
    schema = fit_schema(small_data)
    xs = [math.log1p(r.effective_price) for s in small_data for r in s.features]
    mean = sum(xs) / len(xs)
    var = sum((x - mean) ** 2 for x in xs) / len(xs)
    f = schema.spec("effective_price")
    assert f.mean == pytest.approx(mean, rel=1e-12)
    assert f.std == pytest.approx(math.sqrt(var), rel=1e-10)


def test_schema_empty():
    with pytest.raises(DataError):
        fit_schema(Dataset())


def test_oov_and_decode(small_data):
    schema = fit_schema(small_data)
    assert schema.category_index("sku_id", "never-seen") == OOV_INDEX
    for value in schema.spec("product_tier").vocabulary:
        idx = schema.category_index("product_tier", value)
        assert idx != OOV_INDEX
        assert schema.decode_category("product_tier", idx) == value
    s = small_data[0]
    enc = encode(s.features[0], derive_series(s)[0][0], schema, sku_id="unknown")
    assert dict(enc.categorical)["sku_id"] == OOV_INDEX
    for name, idx in enc.categorical:
        assert 0 <= idx < schema.vocab_size(name)


def test_schema_json_roundtrip(tmp_path, small_data):
    schema = fit_schema(small_data)
    schema.save(tmp_path / "s.json")
    back = FeatureSchema.load(tmp_path / "s.json")
    assert back.hash == schema.hash
    assert back.to_json() == schema.to_json()


def test_encode_at_mean_is_zero(small_data):
    schema = fit_schema(small_data)
    s = small_data[0]
    row = s.features[0]
    f = schema.spec("effective_price")
    # choose a price whose log1p equals the training mean
    price = math.expm1(f.mean)
    from dataclasses import replace
    row = replace(row, listed_price=max(price, row.listed_price), discounted_price=price,
                  effective_price=price)
    enc = encode(row, derive_series(s)[0][0], schema, s.sku_id)
    i = [g.name for g in schema.numeric].index("effective_price")
    assert abs(enc.numeric[i]) < 1e-12


def test_no_test_leakage(small_data):
    train, _ = split_windows(small_data, 30, 4)
    a = fit_schema(train)
    mutated = Dataset(tuple(
        s.__class__(s.sku_id, s.region_id, s.vertical_id, s.start_week,
                    np.where(s.weeks > 30, s.demand * 50 + 7, s.demand), s.features)
        for s in small_data))
    train_b, _ = split_windows(mutated, 30, 4)
    assert fit_schema(train_b).hash == a.hash


def test_constant_price_weeks_since_change():
    s = make_series([3] * 8, start=5)
    derived, _ = derive_series(s)
    for t, d in zip(s.weeks, derived):
        assert d.weeks_since_price_change == t - s.start_week


def test_price_change_resets_and_increments():
    s = make_series([1] * 6, prices=[10, 10, 8, 8, 8, 8])
    derived, _ = derive_series(s)
    assert [d.weeks_since_price_change for d in derived] == [0, 1, 0, 1, 2, 3]


def test_price_tolerance():
    s = make_series([1] * 3, prices=[10.0, 10.0 * (1 + 1e-12), 10.0])
    derived, _ = derive_series(s)
    assert [d.weeks_since_price_change for d in derived] == [0, 1, 2]


def test_lag_sale_means_direct_oracle():
    y = [4.0, 7.0, 1.0, 9.0, 3.0, 8.0, 2.0]
    s = make_series(y)
    derived, _ = derive_series(s)
    for t in range(len(y)):
        past = y[max(0, t - 4):t]
        d = derived[t]
        assert d.lag_sale_mean_4w == (sum(past) / len(past) if past else 0.0)
        assert d.lag_sale_mean_1w == (y[t - 1] if t else 0.0)


def test_week_of_month():
    s = make_series([1] * 9, start=1)
    derived, _ = derive_series(s)
    wom = [d.week_of_month for d in derived]
    assert wom == [1, 2, 3, 4, 1, 2, 3, 4, 1]


def test_event_features_and_cap():
    s = make_series([1] * 10, events={3, 7})
    derived, _ = derive_series(s)
    assert [d.weeks_to_next_event for d in derived] == [3, 2, 1, 0, 3, 2, 1, 0, EVENT_CAP, EVENT_CAP]
    assert [d.weeks_since_last_event for d in derived] == [EVENT_CAP] * 3 + [0, 1, 2, 3, 0, 1, 2]


def test_first_sale_and_price_history():
    s = make_series([0, 0, 5, 0, 2], prices=[10, 8, 12, 10, 10])
    derived, _ = derive_series(s)
    assert [d.weeks_since_first_sale for d in derived] == [0, 0, 0, 1, 2]
    d = derived[4]
    assert d.historical_min_price == 8 and d.historical_max_price == 12
    assert d.diff_from_historical_mean_price == pytest.approx(10 / 10 - 1.0)
    assert derived[3].diff_from_historical_mean_price == pytest.approx(10 / 10 - 1.0)
    assert derived[2].diff_from_historical_mean_price == pytest.approx(12 / 9 - 1.0)


def test_derive_errors():
    s = make_series([1, 2, 3], start=4)
    state = start_lag_state(s)
    with pytest.raises(DataError):
        derive(s, 3, state)
    with pytest.raises(ValueError):
        derive(s, 5, state)
    with pytest.raises(ValueError):
        advance_lag_state(state, 1.0, 10.0, week=6)


def test_predicted_value_feeds_lag():
    s = make_series([1.0, 2.0, 3.0])
    _, state = derive_series(s)
    state = advance_lag_state(state, 42.5, 10.0)
    future = make_series([0, 0, 0, 0, 0]).features
    d = derive(s, 4, state, future)
    assert d.lag_sale_mean_1w == 42.5


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 500), st.sampled_from([5.0, 7.5, 10.0]),
                          st.booleans()), min_size=1, max_size=25),
       st.integers(0, 30))
def test_rollout_matches_offline(weeks, start):
    y = [w[0] for w in weeks]
    prices = [w[1] for w in weeks]
    events = {start + j for j, w in enumerate(weeks) if w[2]}
    s = make_series(y, prices=prices, events=events, start=start)
    offline, _ = derive_series(s)
    state = start_lag_state(s)
    for j, t in enumerate(s.weeks):
        assert derive(s, int(t), state) == offline[j]
        state = advance_lag_state(state, y[j], prices[j], event=start + j in events, week=int(t))


def test_encoded_numerics_finite(small_data):
    schema = fit_schema(small_data)
    for s in small_data:
        enc = encode_series(s, schema)
        assert np.all(np.isfinite(enc.numeric))
        assert enc.numeric.shape == (len(s), len(schema.numeric))


def test_demand_transform_roundtrip(small_data):
    schema = fit_schema(small_data)
    tr = schema.demand_transform(small_data[0].vertical_id)
    y = np.array([0.0, 1.0, 17.0, 2500.0])
    np.testing.assert_allclose(tr.inverse(tr.forward(y)), y, rtol=1e-12, atol=1e-9)
    assert schema.demand_transform("unseen") == schema.demand_transform("*")
