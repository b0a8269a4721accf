"""``.tfwa`` weight archives: the payload shipped from server to device.

Layout (all integers little-endian)::

    b"TFWA"                     magic
    u32  version                = 1
    u32  config length, then that many bytes of UTF-8 JSON (TFormerConfig)
    u32  tensor count
    records, sorted bytewise by name:
        u16 name length, UTF-8 name
        u8  dtype tag (0 = f32, 1 = f64)
        u8  rank, then u32 per dim
        raw row-major values
    u32  CRC-32 (IEEE, reflected 0xEDB88320) of every preceding byte

No compression, so the file size is a closed-form function of the config:
``12 + (4 + len(config)) + sum(records) + 4`` where 12 covers magic, version
and tensor count.
"""

from __future__ import annotations

import io
import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from typing import BinaryIO, Optional, Sequence, Union

import numpy as np

from .config import TFormerConfig
from .errors import TFormerError
from .model import TFormerModel, build_model

MAGIC = b"TFWA"
VERSION = 1
EXTENSION = ".tfwa"
DTYPE_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
TAG_DTYPES = {v: k for k, v in DTYPE_TAGS.items()}


class ArchiveError(TFormerError):
    """Base class for archive read/write failures."""


class BadMagicError(ArchiveError):
    pass


class UnsupportedVersionError(ArchiveError):
    pass


class ChecksumError(ArchiveError):
    pass


class TruncatedArchiveError(ArchiveError):
    """The byte stream ends early or has trailing bytes: structural damage."""


class ArchiveFormatError(ArchiveError):
    """Structurally complete but semantically invalid (bad tag, bad config...)."""


class UnknownTensorError(ArchiveError):
    pass


class MissingTensorError(ArchiveError):
    pass


class ShapeMismatchError(ArchiveError):
    pass


def config_blob(config: TFormerConfig) -> bytes:
    return json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8")


def expected_tensors(config: TFormerConfig) -> dict[str, tuple[int, ...]]:
    """Tensor names and shapes implied by ``config``, derived without building a model."""
    out: dict[str, tuple[int, ...]] = {}
    bias = config.bias
    for i, st in enumerate(config.stages, start=1):
        p, d = st.patch, st.embed_dim
        pre = f"stage{i}.patch"
        out[f"{pre}.conv.weight"] = (d, p.in_channels, p.kernel, p.kernel)
        if bias:
            out[f"{pre}.conv.bias"] = (d,)
        out[f"{pre}.norm.gamma"] = out[f"{pre}.norm.beta"] = (d,)
        hidden, g = st.ffn.r * d, st.ffn.g
        for j in range(1, st.depth + 1):
            b = f"stage{i}.block{j}"
            for norm in ("norm1", "norm2"):
                out[f"{b}.{norm}.gamma"] = out[f"{b}.{norm}.beta"] = (d,)
            out[f"{b}.hybrid.pw.weight"] = (d, d, 1, 1)
            out[f"{b}.ffn.fc1.weight"] = (hidden, d // g, 1, 1)
            out[f"{b}.ffn.fc2.weight"] = (d, hidden // g, 1, 1)
            if bias:
                out[f"{b}.hybrid.pw.bias"] = (d,)
                out[f"{b}.ffn.fc1.bias"] = (hidden,)
                out[f"{b}.ffn.fc2.bias"] = (d,)
    d, c = config.stages[-1].embed_dim, config.num_classes
    out["head.norm.gamma"] = out["head.norm.beta"] = (d,)
    out["head.fc.weight"] = (c, d)
    if bias:
        out["head.fc.bias"] = (c,)
    return out


def record_size(name: str, shape: Sequence[int], itemsize: int) -> int:
    return 2 + len(name.encode("utf-8")) + 1 + 1 + 4 * len(shape) + itemsize * int(np.prod(shape))


def archive_size(config: TFormerConfig, dtype=np.float32) -> int:
    """Exact byte length of the archive for ``config`` stored as ``dtype``."""
    itemsize = np.dtype(dtype).itemsize
    records = sum(record_size(n, s, itemsize) for n, s in expected_tensors(config).items())
    return 12 + (4 + len(config_blob(config))) + records + 4


def to_bytes(model: TFormerModel) -> bytes:
    buf = io.BytesIO()
    blob = config_blob(model.config)
    tensors = sorted(model.named_parameters(), key=lambda kv: kv[0].encode("utf-8"))
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        arr = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        if arr.dtype not in DTYPE_TAGS:
            raise ArchiveFormatError(f"{name}: unsupported dtype {arr.dtype}")
        if not np.isfinite(arr).all():
            raise ArchiveFormatError(f"{name}: refusing to export non-finite weights")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", DTYPE_TAGS[arr.dtype], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def export_model(model: TFormerModel, sink: Union[str, os.PathLike, BinaryIO]) -> int:
    """Write ``model`` to a path or binary stream; returns bytes written."""
    data = to_bytes(model)
    if isinstance(sink, (str, os.PathLike)):
        with open(sink, "wb") as f:
            f.write(data)
    else:
        sink.write(data)
    return len(data)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedArchiveError(f"archive ends at byte {len(self.data)}, needed {self.pos + n}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


@dataclass
class ParsedArchive:
    version: int
    config: TFormerConfig
    tensors: dict[str, np.ndarray]


def parse(data: bytes) -> ParsedArchive:
    """Decode and validate archive bytes without building a model."""
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise BadMagicError("not a TFWA archive (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise UnsupportedVersionError(f"archive version {version}, this reader supports {VERSION}")
    (blob_len,) = r.unpack("<I")
    blob = r.take(blob_len)
    (count,) = r.unpack("<I")
    raw_records = []
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name_raw = r.take(name_len)
        tag, rank = r.unpack("<BB")
        dims = r.unpack(f"<{rank}I")
        itemsize = TAG_DTYPES[tag].itemsize if tag in TAG_DTYPES else 0
        raw_records.append((name_raw, tag, dims, r.take(itemsize * int(np.prod(dims)))))
    body_end = r.pos
    (crc,) = r.unpack("<I")
    if r.pos != len(data):
        raise TruncatedArchiveError(f"{len(data) - r.pos} trailing bytes after checksum")
    if zlib.crc32(data[:body_end]) & 0xFFFFFFFF != crc:
        raise ChecksumError("CRC-32 mismatch: archive is corrupted")

    try:
        config = TFormerConfig.from_dict(json.loads(blob.decode("utf-8")))
    except (ValueError, KeyError, TypeError) as exc:
        raise ArchiveFormatError(f"invalid config blob: {exc}") from None
    tensors: dict[str, np.ndarray] = {}
    for name_raw, tag, dims, payload in raw_records:
        name = name_raw.decode("utf-8", errors="replace")
        if tag not in TAG_DTYPES:
            raise ArchiveFormatError(f"{name}: unknown dtype tag {tag}")
        if name in tensors:
            raise ArchiveFormatError(f"duplicate tensor {name}")
        tensors[name] = np.frombuffer(payload, dtype=TAG_DTYPES[tag]).reshape(dims).astype(TAG_DTYPES[tag].newbyteorder("="))
    return ParsedArchive(version, config, tensors)


def from_bytes(data: bytes) -> TFormerModel:
    archive = parse(data)
    expected = expected_tensors(archive.config)
    for name, arr in archive.tensors.items():
        if name not in expected:
            raise UnknownTensorError(f"archive tensor {name!r} is not part of the model")
        if arr.shape != expected[name]:
            raise ShapeMismatchError(f"{name}: archive shape {arr.shape}, model expects {expected[name]}")
    missing = sorted(set(expected) - set(archive.tensors))
    if missing:
        raise MissingTensorError(f"archive lacks {len(missing)} tensors, e.g. {missing[0]}")
    dtypes = {a.dtype for a in archive.tensors.values()}
    if len(dtypes) != 1:
        raise ArchiveFormatError(f"mixed tensor dtypes {sorted(map(str, dtypes))}")
    model = build_model(archive.config, 0, dtypes.pop())
    for name, arr in archive.tensors.items():
        model.set_parameter(name, arr)
    return model


def import_model(source: Union[str, os.PathLike, BinaryIO, bytes]) -> TFormerModel:
    """Read a model from a path, binary stream or bytes."""
    if isinstance(source, (bytes, bytearray)):
        data = bytes(source)
    elif isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as f:
            data = f.read()
    else:
        data = source.read()
    return from_bytes(data)


# --------------------------------------------------------------------------

# Published parameter counts of common reference models.
REFERENCE_MODELS = {
    "ResNet18": 12_000_000,
    "PVT-Tiny": 13_000_000,
    "ResNet50": 26_000_000,
    "DeiT-S": 22_000_000,
    "PoolFormer-S24": 21_000_000,
    "ResNet101 (RetinaNet)": 57_000_000,
}


@dataclass
class TransmissionReport:
    payload_bytes: int
    parameter_count: int
    bytes_per_parameter: float
    savings: dict[str, dict] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "payload_bytes": self.payload_bytes,
            "parameter_count": self.parameter_count,
            "bytes_per_parameter": self.bytes_per_parameter,
            "savings": self.savings,
        }

    def format_table(self) -> str:
        lines = [
            f"payload bytes        {self.payload_bytes:,d}",
            f"parameters           {self.parameter_count:,d}",
            f"bytes per parameter  {self.bytes_per_parameter:.4f}",
        ]
        for name, s in self.savings.items():
            lines.append(
                f"vs {name:<24} {s['reference_params']:>12,d} params  "
                f"ratio {s['ratio']:.2f}x  ({100 * s['fraction_fewer']:.0f}% fewer)"
            )
        return "\n".join(lines)


def savings(parameter_count: int, references) -> dict[str, dict]:
    items = references.items() if isinstance(references, dict) else references
    return {
        name: {
            "reference_params": int(ref),
            "ratio": ref / parameter_count,
            "fraction_fewer": 1.0 - parameter_count / ref,
        }
        for name, ref in items
    }


def payload_report(model: TFormerModel, references=None, parameter_count: Optional[int] = None) -> TransmissionReport:
    """Archive size for ``model`` and parameter savings against reference models.

    ``parameter_count`` overrides the model's own count in the savings
    comparison (e.g. to compare a published detection-backbone count).
    """
    size = len(to_bytes(model))
    count = model.count_parameters()[0]
    ref = REFERENCE_MODELS if references is None else references
    return TransmissionReport(size, count, size / count, savings(parameter_count or count, ref))
