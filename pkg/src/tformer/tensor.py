"""Dense NCHW kernels with hand-written vector-Jacobian products.

Tensors are plain C-contiguous numpy arrays of rank <= 4 holding float32 or
float64.  Every differentiable kernel is an ``Op`` object: ``forward`` stores
the residuals it needs and ``vjp`` maps an upstream cotangent to cotangents of
the inputs.  Functional wrappers (``pool2d``, ``conv2d``, ...) run a throwaway
op instance when no gradient is needed.

Kernels report their multiply-add count to the active ``count_madds`` context,
which the cost model's tests use as an instrumented oracle.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .errors import ConfigError, NonFiniteError, ShapeError, StateError

DTYPES = (np.float32, np.float64)
DEFAULT_DTYPE = np.float32

Tensor = np.ndarray

_counter: contextvars.ContextVar[Optional[Counter]] = contextvars.ContextVar(
    "madd_counter", default=None
)


@contextlib.contextmanager
def count_madds() -> Iterator[Counter]:
    """Collect multiply-add counts, keyed by kernel category, for the enclosed code.

    Categories: ``conv``, ``pool``, ``dense`` (the arithmetic the analytic
    formulas cover) and ``norm``, ``act``, ``reduce`` (overhead).
    """
    c: Counter = Counter()
    token = _counter.set(c)
    try:
        yield c
    finally:
        _counter.reset(token)


def _tally(category: str, n: int) -> None:
    c = _counter.get()
    if c is not None:
        c[category] += int(n)


def _guard(out: np.ndarray, *inputs: np.ndarray) -> np.ndarray:
    if __debug__ and not np.isfinite(out).all():
        if all(np.isfinite(a).all() for a in inputs if a is not None):
            raise NonFiniteError("non-finite output from finite inputs")
    return out


def as_tensor(data, dtype=DEFAULT_DTYPE) -> Tensor:
    """Copy ``data`` into a contiguous tensor, validating rank and dtype."""
    if np.dtype(dtype) not in [np.dtype(d) for d in DTYPES]:
        raise ConfigError(f"unsupported dtype {dtype}")
    arr = np.ascontiguousarray(np.array(data, dtype=dtype))
    if arr.ndim == 0 or arr.ndim > 4:
        raise ShapeError(f"rank must be 1..4, got {arr.ndim}")
    if min(arr.shape) < 1:
        raise ShapeError(f"all dims must be >= 1, got {arr.shape}")
    return arr


def _require_rank(x: np.ndarray, rank: int, what: str) -> None:
    if x.ndim != rank:
        raise ShapeError(f"{what} expects rank {rank}, got shape {x.shape}")


class Op:
    """Base class: holds forward residuals for a single ``vjp`` call."""

    _saved: Optional[tuple] = None

    def _residuals(self) -> tuple:
        if self._saved is None:
            raise StateError(f"{type(self).__name__}.vjp called before forward")
        return self._saved


# --------------------------------------------------------------------------
# pooling


def pool_output_size(size: int, kernel: int, padding: int, stride: int) -> int:
    return (size - kernel + 2 * padding) // stride + 1


@dataclass(frozen=True)
class PoolSpec:
    kind: str
    kernel: int
    stride: int = 1
    padding: Optional[int] = None

    def __post_init__(self):
        if self.kind not in ("max", "avg"):
            raise ConfigError(f"pool kind must be 'max' or 'avg', got {self.kind!r}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"pool kernel must be a positive odd integer, got {self.kernel}")
        if self.stride < 1:
            raise ConfigError(f"pool stride must be positive, got {self.stride}")
        if self.padding is None:
            object.__setattr__(self, "padding", (self.kernel - 1) // 2)
        # Wider padding would create windows made only of padding.
        if not 0 <= self.padding <= (self.kernel - 1) // 2:
            raise ConfigError(f"pool padding must be in [0, {(self.kernel - 1) // 2}]")


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride][:, :, :ho, :wo]


def _scatter_windows(dxp: np.ndarray, dwin: np.ndarray, stride: int) -> None:
    """Adjoint of ``_windows``: accumulate (N,C,ho,wo,kh,kw) back into ``dxp``."""
    ho, wo, kh, kw = dwin.shape[2:]
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += dwin[
                :, :, :, :, i, j
            ]


class Pool2d(Op):
    """Max or average pooling; padded cells never contribute."""

    def __init__(self, spec: PoolSpec):
        self.spec = spec

    def forward(self, x: Tensor) -> Tensor:
        _require_rank(x, 4, "pool2d")
        k, s, p = self.spec.kernel, self.spec.stride, self.spec.padding
        n, c, h, w = x.shape
        ho, wo = pool_output_size(h, k, p, s), pool_output_size(w, k, p, s)
        if ho < 1 or wo < 1:
            raise ShapeError(f"pool {k}x{k}/s{s}/p{p} on {h}x{w} gives empty output")
        pads = ((0, 0), (0, 0), (p, p), (p, p))
        if self.spec.kind == "max":
            xp = np.pad(x, pads, constant_values=-np.inf)
            win = _windows(xp, k, k, s, ho, wo).reshape(n, c, ho, wo, k * k)
            idx = win.argmax(axis=-1)
            out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
            self._saved = (x.shape, idx, None)
        else:
            xp = np.pad(x, pads)
            out = _windows(xp, k, k, s, ho, wo).sum(axis=(-2, -1))
            ones = np.pad(np.ones((1, 1, h, w), dtype=x.dtype), pads)
            counts = _windows(ones, k, k, s, ho, wo).sum(axis=(-2, -1))
            out = out / counts
            self._saved = (x.shape, None, counts)
        _tally("pool", out.size * k * k)
        return _guard(np.ascontiguousarray(out, dtype=x.dtype), x)

    def vjp(self, dout: Tensor) -> Tensor:
        shape, idx, counts = self._residuals()
        k, s, p = self.spec.kernel, self.spec.stride, self.spec.padding
        n, c, h, w = shape
        dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=dout.dtype)
        ho, wo = dout.shape[2:]
        if idx is not None:
            # argmax returns the first maximum in row-major window order.
            for q in range(k * k):
                i, j = divmod(q, k)
                dxp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += np.where(idx == q, dout, 0)
        else:
            g = dout / counts
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += g
        return dxp[:, :, p : p + h, p : p + w].copy()


def pool2d(x: Tensor, spec: PoolSpec) -> Tensor:
    return Pool2d(spec).forward(x)


# --------------------------------------------------------------------------
# convolution


def conv_output_size(size: int, kernel: int, padding: int, stride: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


class Conv2d(Op):
    """Grouped 2-D cross-correlation, ``w`` laid out as (Cout, Cin/g, Kh, Kw)."""

    def __init__(self, stride: int = 1, padding: int = 0, groups: int = 1):
        if stride < 1 or padding < 0 or groups < 1:
            raise ConfigError("conv2d needs stride >= 1, padding >= 0, groups >= 1")
        self.stride, self.padding, self.groups = stride, padding, groups

    def _check(self, x: Tensor, w: Tensor, b: Optional[Tensor]) -> None:
        _require_rank(x, 4, "conv2d input")
        _require_rank(w, 4, "conv2d weight")
        g = self.groups
        cin, cout = x.shape[1], w.shape[0]
        if cin % g or cout % g:
            raise ConfigError(f"channels ({cin} in, {cout} out) not divisible by groups={g}")
        if w.shape[1] != cin // g:
            raise ShapeError(f"weight expects {w.shape[1] * g} input channels, got {cin}")
        if b is not None and b.shape != (cout,):
            raise ShapeError(f"bias shape {b.shape} != ({cout},)")
        h, wd = x.shape[2:]
        if w.shape[2] > h + 2 * self.padding or w.shape[3] > wd + 2 * self.padding:
            raise ShapeError(f"kernel {w.shape[2:]} larger than padded input {h}x{wd}")

    def forward(self, x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
        self._check(x, w, b)
        n, cin, h, wd = x.shape
        cout, cin_g, kh, kw = w.shape
        g, s, p = self.groups, self.stride, self.padding
        cout_g = cout // g
        ho, wo = conv_output_size(h, kh, p, s), conv_output_size(wd, kw, p, s)
        wm = w.reshape(g, cout_g, cin_g * kh * kw)
        if kh == kw == 1 and s == 1 and p == 0:
            cols = x.reshape(n, g, cin_g, h * wd)
            out = (wm[None] @ cols).reshape(n, cout, ho, wo)
        else:
            xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
            win = _windows(xp, kh, kw, s, ho, wo).reshape(n, g, cin_g, ho, wo, kh, kw)
            cols = win.transpose(0, 1, 3, 4, 2, 5, 6).reshape(n, g, ho * wo, cin_g * kh * kw)
            out = (cols @ wm.transpose(0, 2, 1)[None]).transpose(0, 1, 3, 2).reshape(n, cout, ho, wo)
        if b is not None:
            out = out + b[None, :, None, None]
        self._saved = (x.shape, w, cols, b is not None)
        _tally("conv", n * cout * ho * wo * cin_g * kh * kw)
        return _guard(np.ascontiguousarray(out), x, w, b)

    def vjp(self, dout: Tensor):
        """Returns ``(dx, dw, db)``; ``db`` is None when forward had no bias."""
        xshape, w, cols, has_bias = self._residuals()
        n, cin, h, wd = xshape
        cout, cin_g, kh, kw = w.shape
        g, s, p = self.groups, self.stride, self.padding
        cout_g = cout // g
        ho, wo = dout.shape[2:]
        wm = w.reshape(g, cout_g, cin_g * kh * kw)
        d = dout.reshape(n, g, cout_g, ho * wo)
        db = dout.sum(axis=(0, 2, 3)) if has_bias else None
        if kh == kw == 1 and s == 1 and p == 0:
            dw = (d @ cols.transpose(0, 1, 3, 2)).sum(axis=0).reshape(w.shape)
            dx = (wm.transpose(0, 2, 1)[None] @ d).reshape(xshape)
            return dx, dw, db
        dw = (d @ cols).sum(axis=0).reshape(w.shape)
        dcols = d.transpose(0, 1, 3, 2) @ wm[None]
        dwin = (
            dcols.reshape(n, g, ho, wo, cin_g, kh, kw)
            .transpose(0, 1, 4, 2, 3, 5, 6)
            .reshape(n, cin, ho, wo, kh, kw)
        )
        dxp = np.zeros((n, cin, h + 2 * p, wd + 2 * p), dtype=dout.dtype)
        _scatter_windows(dxp, dwin, s)
        return dxp[:, :, p : p + h, p : p + wd].copy(), dw, db


def conv2d(
    x: Tensor,
    w: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    return Conv2d(stride, padding, groups).forward(x, w, bias)


# --------------------------------------------------------------------------
# normalization, activation, dense


class LayerNormChannels(Op):
    """LayerNorm over C at every (n, h, w), population variance."""

    def __init__(self, eps: float = 1e-5):
        if eps <= 0:
            raise ConfigError("eps must be positive")
        self.eps = eps

    def forward(self, x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
        _require_rank(x, 4, "layer_norm_channels")
        c = x.shape[1]
        if gamma.shape != (c,) or beta.shape != (c,):
            raise ShapeError(f"gamma/beta must have shape ({c},)")
        mu = x.mean(axis=1, keepdims=True)
        xc = x - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + self.eps)
        xhat = xc * inv
        self._saved = (xhat, inv, gamma)
        _tally("norm", 2 * x.size)
        out = xhat * gamma[None, :, None, None] + beta[None, :, None, None]
        return _guard(out.astype(x.dtype, copy=False), x)

    def vjp(self, dout: Tensor):
        """Returns ``(dx, dgamma, dbeta)``."""
        xhat, inv, gamma = self._residuals()
        dxhat = dout * gamma[None, :, None, None]
        dx = inv * (
            dxhat
            - dxhat.mean(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
        )
        return dx, (dout * xhat).sum(axis=(0, 2, 3)), dout.sum(axis=(0, 2, 3))


def layer_norm_channels(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    return LayerNormChannels(eps).forward(x, gamma, beta)


_SQRT_HALF = math.sqrt(0.5)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Gelu(Op):
    """Exact GELU, ``x * Phi(x)``."""

    def forward(self, x: Tensor) -> Tensor:
        cdf = 0.5 * (1.0 + erf(x * _SQRT_HALF))
        self._saved = (x, cdf)
        _tally("act", x.size)
        return _guard((x * cdf).astype(x.dtype, copy=False), x)

    def vjp(self, dout: Tensor) -> Tensor:
        x, cdf = self._residuals()
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return dout * (cdf + x * pdf)


def gelu(x: Tensor) -> Tensor:
    return Gelu().forward(x)


class Linear(Op):
    """``x @ w.T + b`` with ``x`` (N, in) and ``w`` (out, in)."""

    def forward(self, x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
        _require_rank(x, 2, "linear input")
        _require_rank(w, 2, "linear weight")
        if x.shape[1] != w.shape[1]:
            raise ShapeError(f"linear: input width {x.shape[1]} != weight width {w.shape[1]}")
        out = x @ w.T
        if b is not None:
            out = out + b
        self._saved = (x, w, b is not None)
        _tally("dense", x.shape[0] * w.shape[0] * w.shape[1])
        return _guard(out, x, w, b)

    def vjp(self, dout: Tensor):
        x, w, has_bias = self._residuals()
        return dout @ w, dout.T @ x, (dout.sum(axis=0) if has_bias else None)


class GlobalAvgPool(Op):
    """Mean over H and W: (N, C, H, W) -> (N, C)."""

    def forward(self, x: Tensor) -> Tensor:
        _require_rank(x, 4, "global_avg_pool")
        self._saved = (x.shape,)
        _tally("reduce", x.size)
        return x.mean(axis=(2, 3))

    def vjp(self, dout: Tensor) -> Tensor:
        (shape,) = self._residuals()
        n, c, h, w = shape
        return np.broadcast_to(dout[:, :, None, None] / (h * w), shape).copy()


# --------------------------------------------------------------------------
# primitives


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


class Add(Op):
    def forward(self, a: Tensor, b: Tensor) -> Tensor:
        _same_shape(a, b, "add")
        self._saved = ()
        return a + b

    def vjp(self, dout: Tensor):
        self._residuals()
        return dout, dout


class Mul(Op):
    def forward(self, a: Tensor, b: Tensor) -> Tensor:
        _same_shape(a, b, "mul")
        self._saved = (a, b)
        return a * b

    def vjp(self, dout: Tensor):
        a, b = self._residuals()
        return dout * b, dout * a


class MatMul(Op):
    def forward(self, a: Tensor, b: Tensor) -> Tensor:
        _require_rank(a, 2, "matmul")
        _require_rank(b, 2, "matmul")
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
        self._saved = (a, b)
        _tally("dense", a.shape[0] * a.shape[1] * b.shape[1])
        return a @ b

    def vjp(self, dout: Tensor):
        a, b = self._residuals()
        return dout @ b.T, a.T @ dout


class Softmax(Op):
    """Softmax over the last axis, max-subtracted."""

    def forward(self, x: Tensor) -> Tensor:
        z = np.exp(x - x.max(axis=-1, keepdims=True))
        s = z / z.sum(axis=-1, keepdims=True)
        self._saved = (s,)
        return s

    def vjp(self, dout: Tensor) -> Tensor:
        (s,) = self._residuals()
        return s * (dout - (dout * s).sum(axis=-1, keepdims=True))


def add(a: Tensor, b: Tensor) -> Tensor:
    return Add().forward(a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return Mul().forward(a, b)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul().forward(a, b)


def softmax(x: Tensor) -> Tensor:
    return Softmax().forward(x)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        return np.ascontiguousarray(x.reshape(tuple(shape)))
    except ValueError as exc:
        raise ShapeError(str(exc)) from None


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    return np.ascontiguousarray(np.transpose(x, axes))


def split_channels(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    if sum(sizes) != x.shape[1] or min(sizes) < 1:
        raise ShapeError(f"split sizes {list(sizes)} do not partition {x.shape[1]} channels")
    bounds = np.cumsum(sizes)[:-1]
    return [np.ascontiguousarray(p) for p in np.split(x, bounds, axis=1)]


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    if len({(p.shape[0],) + p.shape[2:] for p in parts}) != 1:
        raise ShapeError("concat_channels: parts differ outside the channel axis")
    return np.concatenate(parts, axis=1)
