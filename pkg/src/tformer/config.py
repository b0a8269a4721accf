"""Architecture descriptions for TFormer variants and the ablation rows.

Everything here is a frozen dataclass that round-trips through
``to_dict``/``from_dict`` so a config can be embedded in a weight archive.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Optional

from .errors import ConfigError

OPERATORS = ("avg", "max")
DEFAULT_SCALES = (3, 5, 7, 9, 11)


def partition_channels(dim: int, n_parts: int) -> list[int]:
    """Split ``dim`` channels into ``n_parts`` near-equal slices.

    The first ``dim % n_parts`` slices get one extra channel, e.g.
    ``partition_channels(64, 10) == [7, 7, 7, 7, 6, 6, 6, 6, 6, 6]``.
    """
    if n_parts < 1 or dim < n_parts:
        raise ConfigError(f"cannot split {dim} channels into {n_parts} non-empty parts")
    base, extra = divmod(dim, n_parts)
    return [base + 1] * extra + [base] * (n_parts - extra)


@dataclass(frozen=True)
class NLModuleConfig:
    """Pooling operators and kernel sizes of the nonlearnable module."""

    operators: tuple[str, ...] = OPERATORS
    scales: tuple[int, ...] = DEFAULT_SCALES

    def __post_init__(self):
        object.__setattr__(self, "operators", tuple(self.operators))
        object.__setattr__(self, "scales", tuple(self.scales))
        if not self.operators or not self.scales:
            raise ConfigError("NL module needs at least one operator and one scale")
        if any(op not in OPERATORS for op in self.operators):
            raise ConfigError(f"unknown pooling operator in {self.operators}")
        if len(set(self.operators)) != len(self.operators) or len(set(self.scales)) != len(self.scales):
            raise ConfigError("operators and scales must not repeat")
        if any(k < 1 or k % 2 == 0 for k in self.scales):
            raise ConfigError(f"scales must be odd positive kernel sizes, got {self.scales}")

    @property
    def branches(self) -> list[tuple[str, int]]:
        """(operator, kernel) pairs in partition order: avg before max, scales ascending."""
        ops = [op for op in OPERATORS if op in self.operators]
        return [(op, k) for op in ops for k in sorted(self.scales)]

    def partition(self, dim: int) -> list[int]:
        return partition_channels(dim, len(self.branches))


@dataclass(frozen=True)
class PCSFFNConfig:
    r: int = 4
    g: int = 2

    def __post_init__(self):
        if self.r < 1 or self.g < 1:
            raise ConfigError("FFN ratio and groups must be positive")

    def validate(self, dim: int) -> None:
        if dim % self.g or (self.r * dim) % self.g:
            raise ConfigError(f"FFN groups g={self.g} must divide D={dim} and rD={self.r * dim}")


@dataclass(frozen=True)
class PatchEmbedConfig:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int

    def __post_init__(self):
        if min(self.in_channels, self.out_channels, self.kernel, self.stride) < 1:
            raise ConfigError("patch embedding sizes must be positive")

    @property
    def padding(self) -> int:
        return self.kernel // 2


@dataclass(frozen=True)
class StageSpec:
    patch: PatchEmbedConfig
    embed_dim: int
    depth: int
    ffn: PCSFFNConfig = field(default_factory=PCSFFNConfig)
    nl: NLModuleConfig = field(default_factory=NLModuleConfig)

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError("stage depth must be >= 1")
        if self.patch.out_channels != self.embed_dim:
            raise ConfigError("patch embedding must output embed_dim channels")
        self.ffn.validate(self.embed_dim)
        self.nl.partition(self.embed_dim)


@dataclass(frozen=True)
class TFormerConfig:
    name: str
    stages: tuple[StageSpec, ...]
    num_classes: int = 1000
    input_size: int = 224
    bias: bool = True
    eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        if not self.stages:
            raise ConfigError("a model needs at least one stage")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        prev = self.stages[0].patch.in_channels
        for i, st in enumerate(self.stages):
            if st.patch.in_channels != prev:
                raise ConfigError(f"stage {i + 1} expects {st.patch.in_channels} channels, previous gives {prev}")
            prev = st.embed_dim

    @property
    def embed_dims(self) -> list[int]:
        return [s.embed_dim for s in self.stages]

    @property
    def depths(self) -> list[int]:
        return [s.depth for s in self.stages]

    @property
    def total_stride(self) -> int:
        out = 1
        for s in self.stages:
            out *= s.patch.stride
        return out

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TFormerConfig":
        stages = [
            StageSpec(
                patch=PatchEmbedConfig(**s["patch"]),
                embed_dim=s["embed_dim"],
                depth=s["depth"],
                ffn=PCSFFNConfig(**s["ffn"]),
                nl=NLModuleConfig(**s["nl"]),
            )
            for s in d["stages"]
        ]
        rest = {k: v for k, v in d.items() if k != "stages"}
        return cls(stages=tuple(stages), **rest)


VARIANT_DEPTHS = {"S": (2, 2, 6, 2), "M": (4, 4, 12, 4), "L": (6, 6, 18, 6)}
EMBED_DIMS = (64, 128, 320, 512)


def _stages(
    dims, depths, first_kernel, first_stride, nl: NLModuleConfig, ffn: PCSFFNConfig, in_channels=3
) -> tuple[StageSpec, ...]:
    stages = []
    prev = in_channels
    for i, (dim, depth) in enumerate(zip(dims, depths)):
        k, s = (first_kernel, first_stride) if i == 0 else (3, 2)
        stages.append(StageSpec(PatchEmbedConfig(prev, dim, k, s), dim, depth, ffn, nl))
        prev = dim
    return tuple(stages)


def variant_config(name: str, num_classes: int = 1000, bias: bool = True) -> TFormerConfig:
    """TFormer-S/M/L, or the two-stage ``Micro`` model used for desk-scale tests.

    Micro is not one of the published variants: dims (16, 32), one block per
    stage, scales (3, 5), 3x3 stride-2 stem, 32x32 input.
    """
    key = name.upper() if name.lower() != "micro" else "Micro"
    if key in VARIANT_DEPTHS:
        stages = _stages(EMBED_DIMS, VARIANT_DEPTHS[key], 7, 4, NLModuleConfig(), PCSFFNConfig(4, 2))
        return TFormerConfig(key, stages, num_classes, 224, bias)
    if key == "Micro":
        return micro_config(num_classes=num_classes, bias=bias)
    raise ConfigError(f"unknown variant {name!r}; expected one of S, M, L, Micro")


def micro_config(
    num_classes: int = 4,
    nl: Optional[NLModuleConfig] = None,
    ffn: Optional[PCSFFNConfig] = None,
    bias: bool = True,
    name: str = "Micro",
) -> TFormerConfig:
    nl = nl or NLModuleConfig(OPERATORS, (3, 5))
    ffn = ffn or PCSFFNConfig(4, 2)
    return TFormerConfig(name, _stages((16, 32), (1, 1), 3, 2, nl, ffn), num_classes, 32, bias)


# Nonlearnable-module ablation rows: (operators, scales).
NL_ABLATION_ROWS: tuple[NLModuleConfig, ...] = (
    NLModuleConfig(("avg",), (3,)),
    NLModuleConfig(("avg",), (5,)),
    NLModuleConfig(("avg",), (7,)),
    NLModuleConfig(("avg",), (9,)),
    NLModuleConfig(("avg",), (3, 5)),
    NLModuleConfig(("avg",), (3, 5, 7)),
    NLModuleConfig(("avg",), (3, 5, 7, 9)),
    NLModuleConfig(("avg",), (3, 5, 7, 9, 11)),
    NLModuleConfig(("avg", "max"), (3,)),
    NLModuleConfig(("avg", "max"), (3, 5, 7, 9, 11)),
)


@dataclass(frozen=True)
class FFNAblationRow:
    label: str
    kind: str  # "standard", "ghost" or "pcs"
    r: int
    g: int = 1

    @property
    def buildable(self) -> bool:
        return self.kind in ("standard", "pcs")

    def ffn_config(self) -> PCSFFNConfig:
        if not self.buildable:
            raise ConfigError(f"{self.label} has a cost-model entry only")
        return PCSFFNConfig(self.r, self.g)


FFN_ABLATION_ROWS: tuple[FFNAblationRow, ...] = (
    FFNAblationRow("Standard FFN (r=1)", "standard", 1),
    FFNAblationRow("Ghost FFN (r=4)", "ghost", 4),
    FFNAblationRow("PCS-FFN (r=4, g=4)", "pcs", 4, 4),
    FFNAblationRow("Standard FFN (r=2)", "standard", 2),
    FFNAblationRow("Ghost FFN (r=2)", "ghost", 2),
    FFNAblationRow("PCS-FFN (r=4, g=2)", "pcs", 4, 2),
    FFNAblationRow("Standard FFN (r=4)", "standard", 4),
)


def with_nl(cfg: TFormerConfig, nl: NLModuleConfig) -> TFormerConfig:
    return replace(cfg, stages=tuple(replace(s, nl=nl) for s in cfg.stages))


def with_ffn(cfg: TFormerConfig, ffn: PCSFFNConfig) -> TFormerConfig:
    return replace(cfg, stages=tuple(replace(s, ffn=ffn) for s in cfg.stages))
