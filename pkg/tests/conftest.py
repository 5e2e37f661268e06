import numpy as np
import pytest

from demandcast.dataset import (
    Dataset, GeneratorConfig, RawFeatureRow, SeriesInstance, generate_synthetic,
)


def make_series(demand, prices=None, events=(), start=0, sku="S0", region="R0",
                vertical="V0", tier="B") -> SeriesInstance:
    """Hand-built series; ``events`` lists week indices flagged as major events."""
    demand = list(demand)
    prices = [10.0] * len(demand) if prices is None else list(prices)
    rows = []
    for j, p in enumerate(prices):
        ev = "major" if start + j in events else "none"
        rows.append(RawFeatureRow(listed_price=max(p, 10.0), discounted_price=p,
                                  effective_price=p, event_type=ev, product_tier=tier))
    return SeriesInstance(sku, region, vertical, start, np.array(demand, float), tuple(rows))


@pytest.fixture(scope="session")
def small_data() -> Dataset:
    return generate_synthetic(GeneratorConfig(n_skus=12, n_weeks=40, n_regions=2, seed=3))


def random_batch(rng, cfg, B=2, T=3, mask=None):
    from demandcast.armdn import SequenceBatch
    n_cat = len(cfg.vocab_sizes)
    cats = np.stack([rng.integers(0, v, size=(B, T)) for v in cfg.vocab_sizes], axis=-1) \
        if n_cat else np.zeros((B, T, 0), dtype=np.int64)
    return SequenceBatch(
        rng.normal(size=(B, T, cfg.n_numeric)), cats,
        rng.integers(0, 2, size=(B, T, cfg.n_binary)).astype(float),
        rng.normal(size=(B, T)), rng.normal(size=(B, T)),
        np.ones((B, T)) if mask is None else np.asarray(mask, float),
    )


def perturbed_params(rng, cfg, scale=0.3):
    from demandcast.armdn import init_params
    params = init_params(cfg, rng)
    return {k: v + rng.normal(0.0, scale, v.shape) for k, v in params.items()}


def finite_difference_errors(params, cfg, batch, eps=1e-5, floor=1e-7) -> dict[str, float]:
    """Worst relative error per parameter group, analytic vs central differences."""
    from demandcast.armdn import batch_loss, loss_and_grad
    _, grads = loss_and_grad(params, cfg, batch)
    worst = {}
    for name, value in params.items():
        w = 0.0
        for idx in np.ndindex(value.shape):
            old = value[idx]
            value[idx] = old + eps
            lp = batch_loss(params, cfg, batch)
            value[idx] = old - eps
            lm = batch_loss(params, cfg, batch)
            value[idx] = old
            num = (lp - lm) / (2 * eps)
            ana = grads[name][idx]
            w = max(w, abs(ana - num) / max(abs(ana), abs(num), floor))
        worst[name] = w
    return worst


# (criterion, description, passed, detail) appended by the acceptance suite
ACCEPTANCE: list[tuple[int, str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, name, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {n} {'PASS' if ok else 'FAIL'}  {name}: {detail}")
