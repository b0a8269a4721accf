import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tformer.config import NLModuleConfig, PCSFFNConfig, micro_config, partition_channels
from tformer.errors import ConfigError, ShapeError, StateError
from tformer.layers import (
    HybridLayer,
    Initializer,
    NLModule,
    PCSFFN,
    TFormerBlock,
    channel_shuffle,
    hybrid_layer,
    nl_module,
    pcs_ffn,
    shuffle_permutation,
)
from tformer.rng import Rng
from tformer.training import gradcheck, _randomize

from oracles import block_diagonal, channel_mix, gelu_scalar, naive_pool, shuffle_matrix


def oracle_nl(x, cfg):
    parts, start = [], 0
    for (kind, k), dj in zip(cfg.branches, cfg.partition(x.shape[1])):
        parts.append(naive_pool(x[:, start : start + dj], kind, k))
        start += dj
    return np.concatenate(parts, axis=1)


def oracle_layer_norm(x, gamma, beta, eps=1e-5):
    out = np.empty_like(x)
    n, c, h, w = x.shape
    for b in range(n):
        for i in range(h):
            for j in range(w):
                v = x[b, :, i, j]
                mu = sum(v) / c
                var = sum((t - mu) ** 2 for t in v) / c
                out[b, :, i, j] = (v - mu) / np.sqrt(var + eps) * gamma + beta
    return out


def oracle_ffn(x, g, w1, w2, b1, b2):
    h = channel_mix(x, block_diagonal(w1, g)) + b1[None, :, None, None]
    h = np.vectorize(gelu_scalar)(h)
    h = channel_mix(h, shuffle_matrix(h.shape[1], g))
    return channel_mix(h, block_diagonal(w2, g)) + b2[None, :, None, None]


def f64_init(seed=0):
    return Initializer(Rng(seed), np.float64)


# ---------------------------------------------------------------- partition


def test_partition_example():
    assert partition_channels(64, 10) == [7, 7, 7, 7, 6, 6, 6, 6, 6, 6]
    assert NLModuleConfig().partition(64) == [7, 7, 7, 7, 6, 6, 6, 6, 6, 6]
    assert NLModuleConfig().branches[:2] == [("avg", 3), ("avg", 5)]
    assert NLModuleConfig().branches[5] == ("max", 3)
    with pytest.raises(ConfigError):
        partition_channels(3, 5)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 2048), st.integers(1, 64))
def test_partition_even_and_complete(d, n):
    if d < n:
        with pytest.raises(ConfigError):
            partition_channels(d, n)
        return
    parts = partition_channels(d, n)
    assert sum(parts) == d and len(parts) == n
    assert max(parts) - min(parts) <= 1
    assert parts == sorted(parts, reverse=True)


# ---------------------------------------------------------------- shuffle


@pytest.mark.parametrize("c,g", [(6, 2), (8, 4), (64, 2), (12, 3)])
def test_shuffle_bijection_and_inverse(c, g, randn):
    perm = shuffle_permutation(c, g)
    assert sorted(perm) == list(range(c))
    x = randn(2, c, 3, 3)
    y = channel_shuffle(x, g)
    np.testing.assert_array_equal(y, x[:, perm])
    np.testing.assert_array_equal(channel_shuffle(y, c // g), x)
    np.testing.assert_array_equal(y[0, :, 0, 0], shuffle_matrix(c, g) @ x[0, :, 0, 0])


def test_shuffle_small_example():
    assert list(shuffle_permutation(6, 2)) == [0, 3, 1, 4, 2, 5]
    with pytest.raises(ConfigError):
        shuffle_permutation(6, 4)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 16), st.integers(1, 16))
def test_shuffle_is_permutation(g, per):
    perm = shuffle_permutation(g * per, g)
    assert sorted(perm) == list(range(g * per))


# ---------------------------------------------------------------- NL / hybrid


def test_nl_output_shape_and_partition(randn):
    x = randn(1, 64, 14, 14)
    assert nl_module(x, NLModuleConfig()).shape == x.shape


@pytest.mark.parametrize(
    "cfg,c",
    [(NLModuleConfig(), 23), (NLModuleConfig(("avg",), (3, 5, 7)), 10), (NLModuleConfig(("max",), (5,)), 4)],
)
def test_nl_matches_oracle(randn, cfg, c):
    x = randn(2, c, 7, 6)
    assert np.max(np.abs(nl_module(x, cfg) - oracle_nl(x, cfg))) <= 1e-6


def test_nl_rejects_wrong_width(randn):
    with pytest.raises(ShapeError):
        NLModule(NLModuleConfig(), 16).forward(randn(1, 12, 4, 4))


def test_hybrid_matches_oracle(randn):
    cfg = NLModuleConfig(("avg", "max"), (3, 5))
    layer = HybridLayer(12, cfg, f64_init(), bias=True)
    layer.params["pw.bias"] = randn(12)
    x = randn(2, 12, 5, 5)
    want = channel_mix(oracle_nl(x, cfg), layer.params["pw.weight"][:, :, 0, 0]) + layer.params["pw.bias"][
        None, :, None, None
    ]
    got = layer.forward(x)
    assert np.max(np.abs(got - want)) <= 1e-6
    np.testing.assert_allclose(hybrid_layer(x, cfg, layer.params["pw.weight"], layer.params["pw.bias"]), got)
    assert sum(p.size for p in layer.params.values()) == 12 * 12 + 12


def test_hybrid_backward_requires_forward():
    layer = HybridLayer(16, NLModuleConfig(), f64_init())
    with pytest.raises(StateError):
        layer.backward(np.zeros((1, 16, 2, 2)))


# ---------------------------------------------------------------- PCS-FFN


@pytest.mark.parametrize("d,r,g", [(8, 4, 2), (12, 2, 4), (6, 1, 1), (16, 4, 4)])
def test_pcs_ffn_matches_block_diagonal_oracle(randn, d, r, g):
    ffn = _randomize(PCSFFN(d, PCSFFNConfig(r, g), f64_init()), Rng(9))
    x = randn(2, d, 3, 4)
    p = ffn.params
    want = oracle_ffn(x, g, p["fc1.weight"], p["fc2.weight"], p["fc1.bias"], p["fc2.bias"])
    got = ffn.forward(x)
    assert np.max(np.abs(got - want)) <= 1e-6
    np.testing.assert_allclose(
        pcs_ffn(x, PCSFFNConfig(r, g), p["fc1.weight"], p["fc2.weight"], p["fc1.bias"], p["fc2.bias"]), got
    )


@pytest.mark.parametrize("d,r,g", [(64, 4, 2), (128, 4, 2), (320, 4, 2), (512, 4, 2), (64, 4, 4), (64, 2, 1)])
def test_pcs_ffn_weight_count(d, r, g):
    ffn = PCSFFN(d, PCSFFNConfig(r, g), Initializer(Rng(0)), bias=False)
    assert sum(p.size for p in ffn.params.values()) == 2 * r * d * d // g


def test_pcs_ffn_config_validation():
    with pytest.raises(ConfigError):
        PCSFFN(10, PCSFFNConfig(4, 4), f64_init())


# ---------------------------------------------------------------- block


def test_block_matches_composed_oracle(randn):
    nl, ffn_cfg = NLModuleConfig(("avg", "max"), (3, 5)), PCSFFNConfig(4, 2)
    block = _randomize(TFormerBlock(8, nl, ffn_cfg, f64_init()), Rng(4))
    x = randn(2, 8, 5, 5)
    c = block.children
    n1, n2 = c["norm1"].params, c["norm2"].params
    hp, fp = c["hybrid"].params, c["ffn"].params
    h = oracle_layer_norm(x, n1["gamma"], n1["beta"])
    x1 = x + channel_mix(oracle_nl(h, nl), hp["pw.weight"][:, :, 0, 0]) + hp["pw.bias"][None, :, None, None]
    h2 = oracle_layer_norm(x1, n2["gamma"], n2["beta"])
    want = x1 + oracle_ffn(h2, 2, fp["fc1.weight"], fp["fc2.weight"], fp["fc1.bias"], fp["fc2.bias"])
    assert np.max(np.abs(block.forward(x) - want)) <= 1e-6


def test_block_gradients(randn):
    block = _randomize(TFormerBlock(8, NLModuleConfig(("avg", "max"), (3,)), PCSFFNConfig(2, 2), f64_init()), Rng(2))
    x = randn(1, 8, 4, 4)
    assert gradcheck(block, x, max_coords=None) <= 1e-4


def test_initializer_statistics():
    w = Initializer(Rng(0)).weight(256, 256)
    assert w.dtype == np.float32
    assert np.abs(w).max() <= 0.04 + 1e-7
    assert abs(float(w.std()) - 0.0176) < 0.002  # std of N(0, 0.02) truncated at two sigma


def test_micro_config_shapes():
    cfg = micro_config()
    assert cfg.embed_dims == [16, 32] and cfg.depths == [1, 1] and cfg.input_size == 32
