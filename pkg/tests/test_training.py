import math

import numpy as np
import pytest

from tformer.errors import ConfigError
from tformer.training import (
    SgdConfig,
    cross_entropy,
    gradcheck_suite,
    relative_error,
    sgd_step,
    synth_dataset,
    train_demo,
)


def decreasing_window_fraction(losses, width=100):
    """Share of sliding ``width``-step windows whose least-squares slope is negative."""
    losses = np.asarray(losses)
    t = np.arange(width)
    slopes = [np.polyfit(t, losses[s : s + width], 1)[0] for s in range(len(losses) - width + 1)]
    return float(np.mean(np.array(slopes) < 0))


def test_cross_entropy_values():
    loss, grad = cross_entropy(np.zeros((2, 4)), np.array([0, 3]))
    assert loss == pytest.approx(math.log(4), abs=1e-12)
    np.testing.assert_allclose(grad.sum(axis=1), 0, atol=1e-15)
    logits = np.zeros((1, 4))
    logits[0, 2] = 30
    assert cross_entropy(logits, np.array([2]))[0] <= 1e-9
    with pytest.raises(ConfigError):
        cross_entropy(np.zeros((2, 4)), np.array([0, 4]))


def test_cross_entropy_gradient_by_differences():
    rng = np.random.default_rng(0)
    z, y = rng.normal(size=(3, 5)), np.array([1, 4, 0])
    _, g = cross_entropy(z, y)
    h = 1e-6
    for idx in np.ndindex(z.shape):
        e = np.zeros_like(z)
        e[idx] = h
        num = (cross_entropy(z + e, y)[0] - cross_entropy(z - e, y)[0]) / (2 * h)
        assert relative_error(g[idx], num) <= 1e-6


def test_sgd_momentum_update():
    p = {"w": np.array([1.0])}
    state = {}
    cfg = SgdConfig(lr=0.1, momentum=0.5)
    sgd_step(p, {"w": np.array([2.0])}, state, cfg)
    assert p["w"][0] == pytest.approx(0.8)
    sgd_step(p, {"w": np.array([2.0])}, state, cfg)
    assert p["w"][0] == pytest.approx(0.8 - 0.1 * 3.0)
    with pytest.raises(ConfigError):
        SgdConfig(momentum=1.0)


def test_synthetic_dataset():
    data = synth_dataset(0, 256)
    assert data.images.shape == (256, 3, 32, 32)
    assert data.images.min() >= 0 and data.images.max() <= 1
    assert np.bincount(data.labels).tolist() == [64] * 4
    again = synth_dataset(0, 256)
    assert data.images.tobytes() == again.images.tobytes()
    assert not np.array_equal(data.images, synth_dataset(1, 256).images)
    with pytest.raises(ConfigError):
        synth_dataset(0, 10)


def test_gradcheck_suite_passes():
    results = gradcheck_suite(0)
    assert len(results) >= 15
    for r in results:
        assert r.passed, f"{r.name}: {r.error:.3e} > {r.threshold:.0e}"
    assert results[-1].threshold == 1e-3


def test_short_training_is_deterministic():
    cfg = SgdConfig(steps=12, batch_size=16)
    a = train_demo(3, cfg, n_samples=64)
    b = train_demo(3, cfg, n_samples=64)
    assert a.losses == b.losses
    assert a.accuracy == b.accuracy
    wa, wb = a.model.state_dict(), b.model.state_dict()
    assert all(wa[k].tobytes() == wb[k].tobytes() for k in wa)


@pytest.mark.slow
def test_demo_run_learns(demo_run):
    assert demo_run.accuracy[0] == (0, pytest.approx(0.25, abs=0.1))
    assert demo_run.final_accuracy >= 0.95
    assert all(math.isfinite(v) for v in demo_run.losses)
    assert len(demo_run.losses) == 500
    assert decreasing_window_fraction(demo_run.losses) >= 0.8
