"""Hierarchical TFormer model.

Weight tensors are named deterministically from the config:

    stage{i}.patch.conv.weight / .conv.bias / .norm.gamma / .norm.beta
    stage{i}.block{j}.norm1.{gamma,beta}
    stage{i}.block{j}.hybrid.pw.{weight,bias}
    stage{i}.block{j}.norm2.{gamma,beta}
    stage{i}.block{j}.ffn.fc1.{weight,bias}, .ffn.fc2.{weight,bias}
    head.norm.{gamma,beta}, head.fc.{weight,bias}

Stages and blocks are numbered from 1.  Conv/dense biases are absent when the
config has ``bias=False``; norm ``beta`` is always present.
"""

from __future__ import annotations

from typing import Optional, Union

import numpy as np

from . import tensor as T
from .config import TFormerConfig, variant_config
from .errors import ShapeError
from .layers import ClassifierHead, Initializer, Layer, PatchEmbed, TFormerBlock
from .rng import Rng


class Stage(Layer):
    def __init__(self, spec, init: Initializer, bias: bool, eps: float):
        super().__init__()
        self.children["patch"] = PatchEmbed(spec.patch, init, bias, eps)
        for j in range(spec.depth):
            self.children[f"block{j + 1}"] = TFormerBlock(spec.embed_dim, spec.nl, spec.ffn, init, bias, eps)

    def forward(self, x):
        for layer in self.children.values():
            x = layer.forward(x)
        return x

    def backward(self, dout):
        for layer in reversed(list(self.children.values())):
            dout = layer.backward(dout)
        return dout


class TFormerModel(Layer):
    def __init__(self, config: TFormerConfig, rng: Optional[Rng] = None, dtype=T.DEFAULT_DTYPE):
        super().__init__()
        self.config = config
        self.dtype = np.dtype(dtype)
        init = Initializer(rng, dtype)
        for i, spec in enumerate(config.stages):
            self.children[f"stage{i + 1}"] = Stage(spec, init, config.bias, config.eps)
        self.children["head"] = ClassifierHead(config.stages[-1].embed_dim, config.num_classes, init, config.bias, config.eps)

    @property
    def stages(self) -> list[Stage]:
        return [v for k, v in self.children.items() if k.startswith("stage")]

    @property
    def head(self) -> ClassifierHead:
        return self.children["head"]

    def _check_input(self, x: np.ndarray) -> None:
        if x.ndim != 4 or x.shape[1] != self.config.stages[0].patch.in_channels:
            raise ShapeError(f"expected (N, {self.config.stages[0].patch.in_channels}, H, W), got {x.shape}")
        stride = self.config.total_stride
        if x.shape[2] % stride or x.shape[3] % stride:
            raise ShapeError(f"input {x.shape[2]}x{x.shape[3]} not divisible by total stride {stride}")

    def forward_features(self, x: np.ndarray) -> list[np.ndarray]:
        """Token maps after each stage."""
        self._check_input(x)
        feats = []
        for stage in self.stages:
            x = stage.forward(x)
            feats.append(x)
        return feats

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.head.forward(self.forward_features(x)[-1])

    def backward(self, dlogits: np.ndarray) -> np.ndarray:
        d = self.head.backward(dlogits)
        for stage in reversed(self.stages):
            d = stage.backward(d)
        return d

    def state_dict(self) -> dict[str, np.ndarray]:
        return dict(self.named_parameters())

    def grad_dict(self) -> dict[str, np.ndarray]:
        return dict(self.named_grads())

    def _owner(self, name: str) -> tuple[Layer, str]:
        layer: Layer = self
        parts = name.split(".")
        i = 0
        while i < len(parts) and parts[i] in layer.children:
            layer = layer.children[parts[i]]
            i += 1
        key = ".".join(parts[i:])
        if key not in layer.params:
            raise KeyError(name)
        return layer, key

    def set_parameter(self, name: str, value: np.ndarray) -> None:
        layer, key = self._owner(name)
        if layer.params[key].shape != value.shape:
            raise ShapeError(f"{name}: expected {layer.params[key].shape}, got {value.shape}")
        layer.params[key] = value

    def count_parameters(self, include_bias: bool = True) -> tuple[int, dict[str, int]]:
        """Total learnable parameters and a per-tensor breakdown.

        ``include_bias=False`` drops conv/dense ``*.bias`` tensors (norm
        ``beta`` is still counted).
        """
        rows = {
            name: int(v.size)
            for name, v in self.named_parameters()
            if include_bias or not name.endswith(".bias")
        }
        return sum(rows.values()), rows


def build_model(config: TFormerConfig, rng: Union[Rng, int, None] = None, dtype=T.DEFAULT_DTYPE) -> TFormerModel:
    if not isinstance(rng, Rng):
        rng = Rng(0 if rng is None else rng)
    return TFormerModel(config, rng, dtype)


def build_variant(
    name: str,
    num_classes: int = 1000,
    rng: Union[Rng, int, None] = None,
    dtype=T.DEFAULT_DTYPE,
    bias: bool = True,
) -> TFormerModel:
    """Build TFormer-S/M/L or the Micro test model with freshly initialised weights."""
    return build_model(variant_config(name, num_classes, bias), rng, dtype)
