"""TFormer building blocks with manual backward passes.

Each ``Layer`` owns a dict of named parameter arrays and, after ``backward``,
a dict of gradients with the same keys.  ``forward`` caches what ``backward``
needs; calling ``backward`` first raises ``StateError``.
"""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .config import NLModuleConfig, PatchEmbedConfig, PCSFFNConfig
from .errors import ConfigError, ShapeError, StateError
from .rng import Rng

INIT_STD = 0.02


class Initializer:
    """Draws initial weights in call order from one seeded ``Rng``."""

    def __init__(self, rng: Optional[Rng] = None, dtype=T.DEFAULT_DTYPE):
        self.rng = rng if rng is not None else Rng(0)
        self.dtype = dtype

    def weight(self, *shape: int) -> np.ndarray:
        n = int(np.prod(shape))
        return self.rng.trunc_normal(n, std=INIT_STD).reshape(shape).astype(self.dtype)

    def zeros(self, *shape: int) -> np.ndarray:
        return np.zeros(shape, dtype=self.dtype)

    def ones(self, *shape: int) -> np.ndarray:
        return np.ones(shape, dtype=self.dtype)


class Layer:
    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.children: dict[str, Layer] = {}

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for k, v in self.params.items():
            yield prefix + k, v
        for name, child in self.children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_grads(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for k in self.params:
            yield prefix + k, self.grads[k]
        for name, child in self.children.items():
            yield from child.named_grads(f"{prefix}{name}.")

    def _set_grad(self, key: str, value: Optional[np.ndarray]) -> None:
        if key in self.params and value is not None:
            self.grads[key] = value

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError


# --------------------------------------------------------------------------


class ChannelNorm(Layer):
    def __init__(self, dim: int, init: Initializer, eps: float = 1e-5):
        super().__init__()
        self.params = {"gamma": init.ones(dim), "beta": init.zeros(dim)}
        self.eps = eps

    def forward(self, x):
        self._op = T.LayerNormChannels(self.eps)
        return self._op.forward(x, self.params["gamma"], self.params["beta"])

    def backward(self, dout):
        dx, dg, db = _op(self).vjp(dout)
        self.grads = {"gamma": dg, "beta": db}
        return dx


def _op(layer: Layer):
    try:
        return layer._op
    except AttributeError:
        raise StateError(f"{type(layer).__name__}.backward called before forward") from None


class NLModule(Layer):
    """Parallel poolings on disjoint channel slices, concatenated back to D channels."""

    def __init__(self, cfg: NLModuleConfig, dim: int):
        super().__init__()
        self.cfg = cfg
        self.dim = dim
        self.partition = cfg.partition(dim)
        self.specs = [T.PoolSpec(kind, k) for kind, k in cfg.branches]

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.dim:
            raise ShapeError(f"NL module built for {self.dim} channels, got shape {x.shape}")
        self._op = [T.Pool2d(s) for s in self.specs]
        parts = T.split_channels(x, self.partition)
        return T.concat_channels([op.forward(p) for op, p in zip(self._op, parts)])

    def backward(self, dout):
        ops = _op(self)
        parts = T.split_channels(dout, self.partition)
        return T.concat_channels([op.vjp(d) for op, d in zip(ops, parts)])


def nl_module(x: np.ndarray, cfg: NLModuleConfig) -> np.ndarray:
    return NLModule(cfg, x.shape[1]).forward(x)


class HybridLayer(Layer):
    """NL module followed by a 1x1 convolution; D^2 (+D) learnable parameters."""

    def __init__(self, dim: int, nl: NLModuleConfig, init: Initializer, bias: bool = True):
        super().__init__()
        self.dim = dim
        self.nl = NLModule(nl, dim)
        self.params["pw.weight"] = init.weight(dim, dim, 1, 1)
        if bias:
            self.params["pw.bias"] = init.zeros(dim)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.dim:
            raise ShapeError(f"hybrid layer built for {self.dim} channels, got shape {x.shape}")
        self._op = T.Conv2d()
        return self._op.forward(self.nl.forward(x), self.params["pw.weight"], self.params.get("pw.bias"))

    def backward(self, dout):
        dmix, dw, db = _op(self).vjp(dout)
        self.grads = {}
        self._set_grad("pw.weight", dw)
        self._set_grad("pw.bias", db)
        return self.nl.backward(dmix)


def hybrid_layer(
    x: np.ndarray, nl: NLModuleConfig, pw_weight: np.ndarray, pw_bias: Optional[np.ndarray] = None
) -> np.ndarray:
    return T.conv2d(nl_module(x, nl), pw_weight, pw_bias)


def shuffle_permutation(channels: int, groups: int) -> np.ndarray:
    """Source channel for each output channel: (g, C/g) grid read column-major."""
    if groups < 1 or channels % groups:
        raise ConfigError(f"{channels} channels not divisible by {groups} groups")
    return np.arange(channels).reshape(groups, channels // groups).T.reshape(-1)


def channel_shuffle(x: np.ndarray, groups: int) -> np.ndarray:
    n, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise ConfigError(f"{c} channels not divisible by {groups} groups")
    return np.ascontiguousarray(x.reshape(n, groups, c // groups, h, w).transpose(0, 2, 1, 3, 4).reshape(n, c, h, w))


class ChannelShuffle(Layer):
    def __init__(self, groups: int):
        super().__init__()
        self.groups = groups

    def forward(self, x):
        self._op = x.shape[1]
        return channel_shuffle(x, self.groups)

    def backward(self, dout):
        c = _op(self)
        return channel_shuffle(dout, c // self.groups)


class PCSFFN(Layer):
    """Grouped 1x1 expand (D -> rD), GELU, channel shuffle, grouped 1x1 compress."""

    def __init__(self, dim: int, cfg: PCSFFNConfig, init: Initializer, bias: bool = True):
        super().__init__()
        cfg.validate(dim)
        self.dim, self.cfg = dim, cfg
        hidden, g = cfg.r * dim, cfg.g
        self.params["fc1.weight"] = init.weight(hidden, dim // g, 1, 1)
        if bias:
            self.params["fc1.bias"] = init.zeros(hidden)
        self.params["fc2.weight"] = init.weight(dim, hidden // g, 1, 1)
        if bias:
            self.params["fc2.bias"] = init.zeros(dim)
        self.shuffle = ChannelShuffle(g)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.dim:
            raise ShapeError(f"PCS-FFN built for {self.dim} channels, got shape {x.shape}")
        g = self.cfg.g
        self._op = (T.Conv2d(groups=g), T.Gelu(), T.Conv2d(groups=g))
        fc1, act, fc2 = self._op
        h = fc1.forward(x, self.params["fc1.weight"], self.params.get("fc1.bias"))
        h = self.shuffle.forward(act.forward(h))
        return fc2.forward(h, self.params["fc2.weight"], self.params.get("fc2.bias"))

    def backward(self, dout):
        fc1, act, fc2 = _op(self)
        dh, dw2, db2 = fc2.vjp(dout)
        dh = act.vjp(self.shuffle.backward(dh))
        dx, dw1, db1 = fc1.vjp(dh)
        self.grads = {}
        for k, v in (("fc1.weight", dw1), ("fc1.bias", db1), ("fc2.weight", dw2), ("fc2.bias", db2)):
            self._set_grad(k, v)
        return dx


def pcs_ffn(
    x: np.ndarray,
    cfg: PCSFFNConfig,
    fc1_weight: np.ndarray,
    fc2_weight: np.ndarray,
    fc1_bias: Optional[np.ndarray] = None,
    fc2_bias: Optional[np.ndarray] = None,
) -> np.ndarray:
    cfg.validate(x.shape[1])
    h = T.gelu(T.conv2d(x, fc1_weight, fc1_bias, groups=cfg.g))
    return T.conv2d(channel_shuffle(h, cfg.g), fc2_weight, fc2_bias, groups=cfg.g)


class PatchEmbed(Layer):
    """Strided convolution (padding = kernel // 2) followed by channel LayerNorm."""

    def __init__(self, cfg: PatchEmbedConfig, init: Initializer, bias: bool = True, eps: float = 1e-5):
        super().__init__()
        self.cfg = cfg
        self.params["conv.weight"] = init.weight(cfg.out_channels, cfg.in_channels, cfg.kernel, cfg.kernel)
        if bias:
            self.params["conv.bias"] = init.zeros(cfg.out_channels)
        self.children["norm"] = self.norm = ChannelNorm(cfg.out_channels, init, eps)

    def forward(self, x):
        c = self.cfg
        if x.ndim != 4 or min(x.shape[2:]) < c.kernel - 2 * c.padding:
            raise ShapeError(f"input {x.shape} too small for a {c.kernel}x{c.kernel} patch embedding")
        self._op = T.Conv2d(c.stride, c.padding)
        y = self._op.forward(x, self.params["conv.weight"], self.params.get("conv.bias"))
        return self.norm.forward(y)

    def backward(self, dout):
        dx, dw, db = _op(self).vjp(self.norm.backward(dout))
        self.grads = {}
        self._set_grad("conv.weight", dw)
        self._set_grad("conv.bias", db)
        return dx


class TFormerBlock(Layer):
    """Pre-norm residual block: ``x + hybrid(norm1(x))`` then ``+ ffn(norm2(.))``."""

    def __init__(
        self,
        dim: int,
        nl: NLModuleConfig,
        ffn: PCSFFNConfig,
        init: Initializer,
        bias: bool = True,
        eps: float = 1e-5,
    ):
        super().__init__()
        self.children["norm1"] = self.norm1 = ChannelNorm(dim, init, eps)
        self.children["hybrid"] = self.hybrid = HybridLayer(dim, nl, init, bias)
        self.children["norm2"] = self.norm2 = ChannelNorm(dim, init, eps)
        self.children["ffn"] = self.ffn = PCSFFN(dim, ffn, init, bias)

    def forward(self, x):
        self._op = True
        x1 = x + self.hybrid.forward(self.norm1.forward(x))
        return x1 + self.ffn.forward(self.norm2.forward(x1))

    def backward(self, dout):
        _op(self)
        dx1 = dout + self.norm2.backward(self.ffn.backward(dout))
        return dx1 + self.norm1.backward(self.hybrid.backward(dx1))


class ClassifierHead(Layer):
    """Global average pool, LayerNorm, dense projection to class logits."""

    def __init__(self, dim: int, num_classes: int, init: Initializer, bias: bool = True, eps: float = 1e-5):
        super().__init__()
        self.children["norm"] = self.norm = ChannelNorm(dim, init, eps)
        self.params["fc.weight"] = init.weight(num_classes, dim)
        if bias:
            self.params["fc.bias"] = init.zeros(num_classes)

    def forward(self, x):
        gap, fc = T.GlobalAvgPool(), T.Linear()
        self._op = (gap, fc)
        pooled = gap.forward(x)
        z = self.norm.forward(pooled[:, :, None, None])[:, :, 0, 0]
        return fc.forward(z, self.params["fc.weight"], self.params.get("fc.bias"))

    def backward(self, dout):
        gap, fc = _op(self)
        dz, dw, db = fc.vjp(dout)
        self.grads = {}
        self._set_grad("fc.weight", dw)
        self._set_grad("fc.bias", db)
        return gap.vjp(self.norm.backward(dz[:, :, None, None])[:, :, 0, 0])
