"""Closed-form parameter and multiply-add (MAdd) accounting.

One MAdd is one multiplication plus one addition.  Pooling counts ``k*k``
MAdds per output element for both max and avg (a comparison costs like an
add).  Bias additions are not counted.  Norms (2 per element), activations
(1 per element) and the global average pool (1 per input element) are
collected in a separate ``overhead`` row because the layer formulas leave
them out.

The model walk here reads only the config; it never instantiates layers, so
it can be checked against ``TFormerModel.count_parameters`` and against the
kernel counters in ``tensor.count_madds``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

from .config import OPERATORS, DEFAULT_SCALES, NLModuleConfig, TFormerConfig, partition_channels
from .errors import ConfigError, ShapeError

CONVENTION = "madd"


@dataclass(frozen=True)
class MHACostSpec:
    n: int  # tokens (pixels)
    d: int  # embedding dim
    heads: int

    def __post_init__(self):
        if min(self.n, self.d, self.heads) < 1:
            raise ConfigError("N, D and heads must be positive")
        if self.d % self.heads:
            raise ConfigError(f"D={self.d} not divisible by heads={self.heads}")


class MHACost(NamedTuple):
    params: int
    madds_literal: int
    madds_corrected: int


def mha_cost(spec: MHACostSpec) -> MHACost:
    """Multi-head attention cost.

    ``madds_literal`` evaluates the commonly printed per-head expression
    ``3*N*D*(D/h) + N*(D/h)*N + N*N*(D/h) + N*D*D``, which omits the sum over
    heads.  ``madds_corrected`` sums all heads: ``4*N*D^2 + 2*N^2*D``.
    Comparisons use the corrected value.
    """
    n, d, h = spec.n, spec.d, spec.heads
    dh = d // h
    literal = 3 * n * d * dh + n * dh * n + n * n * dh + n * d * d
    corrected = 4 * n * d * d + 2 * n * n * d
    return MHACost(4 * d * d, literal, corrected)


def hybrid_cost(
    d: int,
    n: int,
    operators: Sequence[str] = OPERATORS,
    scales: Sequence[int] = DEFAULT_SCALES,
    partition: Optional[Sequence[int]] = None,
    include_bias: bool = False,
) -> tuple[int, int]:
    """(params, madds) of the NL module + pointwise conv on ``n`` tokens of width ``d``."""
    kernels = [k for op in OPERATORS if op in operators for k in sorted(scales)]
    if partition is None:
        partition = partition_channels(d, len(kernels))
    if len(partition) != len(kernels) or sum(partition) != d:
        raise ConfigError(f"partition {list(partition)} does not match {len(kernels)} branches over {d} channels")
    params = d * d + (d if include_bias else 0)
    madds = sum(dj * n * k * k for dj, k in zip(partition, kernels)) + d * d * n
    return params, madds


def ffn_cost(d: int, n: int, r: int = 4, g: int = 1, include_bias: bool = False) -> tuple[int, int]:
    """(params, madds) of a grouped two-layer FFN; ``g=1`` is the dense FFN (2rD^2, 2rND^2)."""
    if g < 1 or d % g or (r * d) % g:
        raise ConfigError(f"groups g={g} must divide D={d} and rD={r * d}")
    params = 2 * r * d * d // g + ((r + 1) * d if include_bias else 0)
    return params, 2 * r * n * d * d // g


def ghost_ffn_cost(d: int, n: int, r: int = 4, s: int = 2, dw_kernel: int = 3) -> tuple[int, int]:
    """(params, madds) of an FFN whose two projections are ghost modules.

    Each projection computes ``1/s`` of its outputs with a dense 1x1 map and
    the rest with a depthwise ``dw_kernel`` conv on those primary outputs.
    Cost-model entry only; there is no layer implementation.
    """
    params = madds = 0
    for cin, cout in ((d, r * d), (r * d, d)):
        primary = -(-cout // s)
        cheap = cout - primary
        params += cin * primary + cheap * dw_kernel * dw_kernel
        madds += n * (cin * primary + cheap * dw_kernel * dw_kernel)
    return params, madds


def ratios(
    spec: MHACostSpec,
    operators: Sequence[str] = OPERATORS,
    scales: Sequence[int] = DEFAULT_SCALES,
) -> tuple[float, float]:
    """(parameter ratio, MAdd ratio) of MHA over the hybrid layer, biases off."""
    mha = mha_cost(spec)
    hp, hf = hybrid_cost(spec.d, spec.n, operators, scales)
    return mha.params / hp, mha.madds_corrected / hf


# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CostRow:
    component: str
    params: int
    madds: int


@dataclass
class CostReport:
    rows: list[CostRow] = field(default_factory=list)
    convention: str = CONVENTION

    def add(self, component: str, params: int = 0, madds: int = 0) -> None:
        self.rows.append(CostRow(component, int(params), int(madds)))

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_madds(self) -> int:
        return sum(r.madds for r in self.rows)

    def row(self, component: str) -> CostRow:
        for r in self.rows:
            if r.component == component:
                return r
        raise KeyError(component)

    def to_dict(self) -> dict:
        return {
            "convention": self.convention,
            "rows": [{"component": r.component, "params": r.params, "madds": r.madds} for r in self.rows],
            "totals": {"params": self.total_params, "madds": self.total_madds},
        }

    def format_table(self) -> str:
        width = max([len(r.component) for r in self.rows] + [9])
        lines = [f"{'component':<{width}}  {'params':>12}  {'madds':>15}"]
        lines += [f"{r.component:<{width}}  {r.params:>12,d}  {r.madds:>15,d}" for r in self.rows]
        lines.append(f"{'total':<{width}}  {self.total_params:>12,d}  {self.total_madds:>15,d}")
        lines.append(
            f"{'':<{width}}  {self.total_params / 1e6:>11.2f}M  {self.total_madds / 1e9:>14.3f}G"
        )
        return "\n".join(lines)


def _conv_out(size: int, kernel: int, stride: int) -> int:
    return (size + 2 * (kernel // 2) - kernel) // stride + 1


def model_cost(config: TFormerConfig, input_hw: tuple[int, int], include_bias: Optional[bool] = None) -> CostReport:
    """Per-layer cost walk for ``config`` at spatial input ``input_hw``.

    ``include_bias`` only affects the parameter count (defaults to the config's
    bias flag; it cannot add biases the config does not have).
    """
    h, w = input_hw
    stride = config.total_stride
    if h % stride or w % stride:
        raise ShapeError(f"input {h}x{w} not divisible by total stride {stride}")
    bias = config.bias if include_bias is None else (include_bias and config.bias)
    rep = CostReport()
    overhead = 0
    for i, st in enumerate(config.stages, start=1):
        p = st.patch
        h, w = _conv_out(h, p.kernel, p.stride), _conv_out(w, p.kernel, p.stride)
        n, d = h * w, st.embed_dim
        conv_params = p.in_channels * d * p.kernel * p.kernel + (d if bias else 0)
        rep.add(f"stage{i}.patch", conv_params + 2 * d, n * d * p.in_channels * p.kernel * p.kernel)
        overhead += 2 * n * d
        for j in range(1, st.depth + 1):
            pre = f"stage{i}.block{j}"
            hp, hf = hybrid_cost(d, n, st.nl.operators, st.nl.scales, include_bias=bias)
            fp, ff = ffn_cost(d, n, st.ffn.r, st.ffn.g, include_bias=bias)
            rep.add(f"{pre}.norm1", 2 * d)
            rep.add(f"{pre}.hybrid", hp, hf)
            rep.add(f"{pre}.norm2", 2 * d)
            rep.add(f"{pre}.ffn", fp, ff)
            overhead += 2 * (2 * n * d) + st.ffn.r * d * n
    d, c = config.stages[-1].embed_dim, config.num_classes
    rep.add("head", 2 * d + d * c + (c if bias else 0), d * c)
    overhead += h * w * d + 2 * d
    rep.add("overhead", 0, overhead)
    return rep


def nl_branch_madds(nl: NLModuleConfig, d: int, n: int) -> list[tuple[str, int, int, int]]:
    """(operator, kernel, channels, madds) for every NL branch."""
    return [(op, k, dj, dj * n * k * k) for (op, k), dj in zip(nl.branches, nl.partition(d))]
