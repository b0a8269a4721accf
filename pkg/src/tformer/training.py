"""Desk-scale training: synthetic data, cross-entropy, SGD, gradient checks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .config import NLModuleConfig, PatchEmbedConfig, PCSFFNConfig, micro_config
from .errors import ConfigError, NonFiniteError
from .layers import (
    ChannelNorm,
    ChannelShuffle,
    ClassifierHead,
    HybridLayer,
    Initializer,
    Layer,
    NLModule,
    PatchEmbed,
    PCSFFN,
    TFormerBlock,
)
from .model import TFormerModel, build_model
from .rng import Rng

NUM_CLASSES = 4
IMAGE_SIZE = 32
CLASS_NAMES = ("horizontal stripes", "vertical stripes", "checkerboard", "gradient")


@dataclass
class ToyDataset:
    images: np.ndarray  # (n, 3, 32, 32) in [0, 1]
    labels: np.ndarray  # (n,) int64, round-robin 0..3
    seed: int

    def __len__(self) -> int:
        return len(self.labels)


def synth_dataset(seed: int, n: int, dtype=T.DEFAULT_DTYPE) -> ToyDataset:
    """Four procedural classes with per-sample period, phase, contrast and colour jitter."""
    if n < 4 or n % 4:
        raise ConfigError(f"dataset size must be a positive multiple of 4, got {n}")
    rng = Rng(seed)
    s = IMAGE_SIZE
    yy, xx = np.meshgrid(np.arange(s), np.arange(s), indexing="ij")
    period = 4.0 + 6.0 * rng.uniform(n)
    phase = 2 * np.pi * rng.uniform(n)
    contrast = 0.25 + 0.25 * rng.uniform(n)
    offset = 0.35 + 0.3 * rng.uniform(n)
    tint = 0.7 + 0.3 * rng.uniform(3 * n).reshape(n, 3)
    angle = 2 * np.pi * rng.uniform(n)
    noise = 0.05 * rng.normal(n * s * s).reshape(n, s, s)
    images = np.empty((n, 3, s, s))
    labels = np.arange(n) % NUM_CLASSES
    for i in range(n):
        w = 2 * np.pi / period[i]
        kind = labels[i]
        if kind == 0:
            pat = np.sin(w * yy + phase[i])
        elif kind == 1:
            pat = np.sin(w * xx + phase[i])
        elif kind == 2:
            pat = np.sign(np.sin(w * xx + phase[i]) * np.sin(w * yy + phase[i]))
        else:
            u = (np.cos(angle[i]) * (xx - s / 2) + np.sin(angle[i]) * (yy - s / 2)) / (s / 2)
            pat = np.clip(u, -1, 1)
        gray = offset[i] + contrast[i] * pat + noise[i]
        images[i] = tint[i][:, None, None] * gray[None]
    return ToyDataset(np.clip(images, 0.0, 1.0).astype(dtype), labels.astype(np.int64), seed)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood and its gradient with respect to ``logits``."""
    n, c = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,) or labels.min() < 0 or labels.max() >= c:
        raise ConfigError(f"labels must be {n} integers in [0, {c})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(logsum - z[rows, labels]))
    grad = np.exp(z - logsum[:, None])
    grad[rows, labels] -= 1.0
    return loss, grad / n


@dataclass
class SgdConfig:
    lr: float = 0.05
    momentum: float = 0.9
    steps: int = 500
    batch_size: int = 32

    def __post_init__(self):
        if self.lr < 0 or not 0 <= self.momentum < 1:
            raise ConfigError("need lr >= 0 and 0 <= momentum < 1")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("need steps >= 0 and batch_size >= 1")


def sgd_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: dict[str, np.ndarray],
    cfg: SgdConfig,
) -> None:
    """In-place heavy-ball update: ``v = momentum*v + g``; ``p -= lr*v``."""
    for name, p in params.items():
        g = grads[name]
        v = state.get(name)
        v = g.copy() if v is None else cfg.momentum * v + g
        state[name] = v
        p -= (cfg.lr * v).astype(p.dtype, copy=False)


def accuracy(model: TFormerModel, data: ToyDataset, batch: int = 128) -> float:
    hits = 0
    for i in range(0, len(data), batch):
        logits = model.forward(data.images[i : i + batch])
        hits += int((logits.argmax(axis=1) == data.labels[i : i + batch]).sum())
    return hits / len(data)


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)
    accuracy: list[tuple[int, float]] = field(default_factory=list)  # (step, train accuracy)
    model: Optional[TFormerModel] = None

    @property
    def final_accuracy(self) -> float:
        return self.accuracy[-1][1]


def train_demo(
    seed: int = 0,
    cfg: Optional[SgdConfig] = None,
    n_samples: int = 256,
    log: Optional[Callable[[str], None]] = None,
) -> TrainResult:
    """Train the Micro model on ``synth_dataset(seed, n_samples)``.

    Full-set train accuracy is recorded at step 0, after every epoch and after
    the last step.
    """
    cfg = cfg or SgdConfig()
    data = synth_dataset(seed, n_samples)
    model = build_model(micro_config(NUM_CLASSES), Rng(seed))
    order_rng = Rng(seed ^ 0x5EED)
    result = TrainResult(model=model)
    result.accuracy.append((0, accuracy(model, data)))
    steps_per_epoch = max(len(data) // cfg.batch_size, 1)
    state: dict[str, np.ndarray] = {}
    params = model.state_dict()
    perm = order_rng.permutation(len(data))
    for step in range(1, cfg.steps + 1):
        k = (step - 1) % steps_per_epoch
        if k == 0 and step > 1:
            perm = order_rng.permutation(len(data))
        idx = perm[k * cfg.batch_size : (k + 1) * cfg.batch_size]
        loss, dlogits = cross_entropy(model.forward(data.images[idx]), data.labels[idx])
        if not math.isfinite(loss):
            raise NonFiniteError(f"loss became {loss} at step {step}")
        model.backward(dlogits.astype(model.dtype))
        sgd_step(params, model.grad_dict(), state, cfg)
        result.losses.append(loss)
        if step % steps_per_epoch == 0 or step == cfg.steps:
            acc = accuracy(model, data)
            result.accuracy.append((step, acc))
            if log:
                log(f"step {step:4d}  loss {loss:.4f}  train acc {acc:.3f}")
    return result


# --------------------------------------------------------------------------
# gradient checking


class OpLayer(Layer):
    """Adapts a single tensor-core op (plus fixed parameters) to the Layer protocol."""

    def __init__(self, make_op, params: dict[str, np.ndarray], forward, backward):
        super().__init__()
        self.params = params
        self._make, self._fwd, self._bwd = make_op, forward, backward

    def forward(self, x):
        self._op = self._make()
        return self._fwd(self._op, x, self.params)

    def backward(self, dout):
        dx, grads = self._bwd(self._op, dout)
        self.grads = grads
        return dx


def _loss_and_grads(layer: Layer, x: np.ndarray, probe: np.ndarray):
    y = layer.forward(x)
    loss = float(np.sum(y * probe))
    dx = layer.backward(probe)
    return loss, dx, dict(layer.named_grads())


def _coords(size: int, rng: Rng, max_coords: Optional[int]) -> np.ndarray:
    if max_coords is None or size <= max_coords:
        return np.arange(size)
    return np.sort(rng.permutation(size)[:max_coords])


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradcheck(
    layer: Layer,
    x: np.ndarray,
    eps: float = 1e-5,
    seed: int = 0,
    max_coords: Optional[int] = 64,
    loss_fn: Optional[Callable[[np.ndarray], tuple[float, np.ndarray]]] = None,
) -> float:
    """Max relative error between backward() and central differences.

    The scalar checked is ``sum(layer(x) * probe)`` for a seeded random probe,
    or ``loss_fn(layer(x))`` when given.  Tensors larger than ``max_coords``
    are checked on a seeded sample of coordinates.  Everything should be f64.
    """
    rng = Rng(seed)

    if loss_fn is None:
        y = layer.forward(x)
        probe = rng.normal(y.size).reshape(y.shape)

        def scalar(inp):
            return float(np.sum(layer.forward(inp) * probe))

        layer.forward(x)
        dx = layer.backward(probe)
    else:

        def scalar(inp):
            return loss_fn(layer.forward(inp))[0]

        _, dy = loss_fn(layer.forward(x))
        dx = layer.backward(dy)
    grads = {k: v.copy() for k, v in layer.named_grads()}
    worst = 0.0

    def check(arr: np.ndarray, analytic: np.ndarray, evaluate) -> float:
        err = 0.0
        flat = arr.reshape(-1)
        for i in _coords(flat.size, rng, max_coords):
            old = flat[i]
            flat[i] = old + eps
            up = evaluate()
            flat[i] = old - eps
            down = evaluate()
            flat[i] = old
            numeric = (up - down) / (2 * eps)
            if not math.isfinite(numeric):
                raise NonFiniteError("non-finite finite-difference estimate")
            err = max(err, relative_error(float(analytic.reshape(-1)[i]), numeric))
        return err

    xc = x.copy()
    worst = max(worst, check(xc, dx, lambda: scalar(xc)))
    for name, p in layer.named_parameters():
        worst = max(worst, check(p, grads[name], lambda: scalar(x)))
    return worst


def unique_window_maxima(x: np.ndarray, spec: T.PoolSpec, margin: float) -> bool:
    """True when every pooling window's top value beats the runner-up by ``margin``."""
    k, s, p = spec.kernel, spec.stride, spec.padding
    n, c, h, w = x.shape
    ho, wo = T.pool_output_size(h, k, p, s), T.pool_output_size(w, k, p, s)
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=-np.inf)
    win = T._windows(xp, k, k, s, ho, wo).reshape(n, c, ho, wo, k * k)
    top2 = np.sort(win, axis=-1)[..., -2:]
    if k == 1:
        return True
    return bool(np.all(top2[..., 1] - top2[..., 0] > margin))


def sample_tie_free(rng: Rng, shape, spec: T.PoolSpec, eps: float = 1e-5) -> np.ndarray:
    """Resample until max-pool windows have strict maxima (away from FD ties)."""
    for _ in range(1000):
        x = rng.normal(int(np.prod(shape))).reshape(shape)
        if unique_window_maxima(x, spec, 10 * eps):
            return x
    raise RuntimeError("could not draw a tie-free input")


@dataclass(frozen=True)
class GradcheckResult:
    name: str
    error: float
    threshold: float

    @property
    def passed(self) -> bool:
        return self.error <= self.threshold


def _conv_layer(rng: Rng, cin, cout, k, stride, padding, groups, bias=True) -> OpLayer:
    params = {"weight": rng.normal(cout * (cin // groups) * k * k).reshape(cout, cin // groups, k, k)}
    if bias:
        params["bias"] = rng.normal(cout)

    def fwd(op, x, p):
        return op.forward(x, p["weight"], p.get("bias"))

    def bwd(op, d):
        dx, dw, db = op.vjp(d)
        grads = {"weight": dw}
        if db is not None:
            grads["bias"] = db
        return dx, grads

    return OpLayer(lambda: T.Conv2d(stride, padding, groups), params, fwd, bwd)


def _pool_layer(spec: T.PoolSpec) -> OpLayer:
    return OpLayer(lambda: T.Pool2d(spec), {}, lambda op, x, p: op.forward(x), lambda op, d: (op.vjp(d), {}))


def _gelu_layer() -> OpLayer:
    return OpLayer(T.Gelu, {}, lambda op, x, p: op.forward(x), lambda op, d: (op.vjp(d), {}))


def _randomize(layer: Layer, rng: Rng, scale: float = 0.5) -> Layer:
    """Replace every parameter by seeded N(0, scale^2) values so no gradient is trivially zero."""
    for _, p in layer.named_parameters():
        p[...] = scale * rng.normal(p.size).reshape(p.shape)
    return layer


def gradcheck_suite(seed: int = 0, eps: float = 1e-5) -> list[GradcheckResult]:
    """Finite-difference check of every kernel and layer, in float64."""
    rng = Rng(seed)
    f64 = np.float64
    init = Initializer(Rng(seed + 1), f64)

    def x_of(*shape):
        return rng.normal(int(np.prod(shape))).reshape(shape)

    out: list[GradcheckResult] = []

    def run(name, layer, x, threshold, **kw):
        out.append(GradcheckResult(name, gradcheck(layer, x, eps=eps, seed=seed, **kw), threshold))

    run("pointwise conv", _conv_layer(rng, 6, 5, 1, 1, 0, 1, bias=False), x_of(2, 6, 4, 4), 1e-6)
    run("grouped conv 3x3/2", _conv_layer(rng, 4, 6, 3, 2, 1, 2), x_of(2, 4, 7, 6), 1e-4)
    mspec = T.PoolSpec("max", 3)
    run("max pool 3x3", _pool_layer(mspec), sample_tie_free(rng, (2, 3, 6, 6), mspec, eps), 1e-4)
    run("avg pool 5x5", _pool_layer(T.PoolSpec("avg", 5)), x_of(2, 3, 6, 6), 1e-4)
    run("avg pool 3x3/2 p0", _pool_layer(T.PoolSpec("avg", 3, 2, 0)), x_of(1, 2, 7, 7), 1e-4)
    run("channel layernorm", _randomize(ChannelNorm(6, init), rng), x_of(2, 6, 3, 3), 1e-4)
    run("gelu", _gelu_layer(), x_of(2, 3, 4, 4), 1e-4)
    run("channel shuffle", ChannelShuffle(2), x_of(1, 6, 3, 3), 1e-4)

    nl = NLModuleConfig(("avg", "max"), (3, 5))
    nl_x = sample_tie_free(rng, (1, 8, 6, 6), T.PoolSpec("max", 5), eps)
    run("nl module", NLModule(nl, 8), nl_x, 1e-4)
    run("hybrid layer", _randomize(HybridLayer(8, nl, init), rng), nl_x, 1e-4)
    run("pcs-ffn r=4 g=2", _randomize(PCSFFN(8, PCSFFNConfig(4, 2), init), rng), x_of(2, 8, 3, 3), 1e-4)
    run(
        "patch embed 3x3/2",
        _randomize(PatchEmbed(PatchEmbedConfig(3, 8, 3, 2), init), rng),
        x_of(2, 3, 8, 8),
        1e-4,
    )
    run(
        "tformer block",
        _randomize(TFormerBlock(8, nl, PCSFFNConfig(4, 2), init), rng, 0.3),
        sample_tie_free(rng, (1, 8, 6, 6), T.PoolSpec("max", 5), eps),
        1e-4,
    )
    run("classifier head", _randomize(ClassifierHead(8, 5, init), rng), x_of(3, 8, 2, 2), 1e-4)

    logits_layer = OpLayer(lambda: None, {}, lambda op, x, p: x, lambda op, d: (d, {}))
    labels = np.array([0, 3, 1])
    run(
        "cross entropy",
        logits_layer,
        x_of(3, 4),
        1e-4,
        loss_fn=lambda z: cross_entropy(z, labels),
    )

    model = _randomize(build_model(micro_config(NUM_CLASSES), Rng(seed), f64), rng, 0.2)
    images = synth_dataset(seed, 4, f64).images
    labels4 = np.arange(4)
    out.append(
        GradcheckResult(
            "micro model (5 coords/tensor)",
            model_gradcheck(model, images, labels4, eps=eps, seed=seed, coords_per_tensor=5),
            1e-3,
        )
    )
    return out


def model_gradcheck(
    model: TFormerModel,
    images: np.ndarray,
    labels: np.ndarray,
    eps: float = 1e-5,
    seed: int = 0,
    coords_per_tensor: int = 5,
) -> float:
    """Spot-check d(loss)/d(weight) on a few random coordinates of every tensor."""
    rng = Rng(seed)

    def loss() -> float:
        return cross_entropy(model.forward(images), labels)[0]

    _, dlogits = cross_entropy(model.forward(images), labels)
    model.backward(dlogits)
    grads = {k: v.copy() for k, v in model.named_grads()}
    worst = 0.0
    for name, p in model.named_parameters():
        flat = p.reshape(-1)
        for i in _coords(flat.size, rng, coords_per_tensor):
            old = flat[i]
            flat[i] = old + eps
            up = loss()
            flat[i] = old - eps
            down = loss()
            flat[i] = old
            worst = max(worst, relative_error(float(grads[name].reshape(-1)[i]), (up - down) / (2 * eps)))
    return worst
