import io
import json
import struct
import zlib

import numpy as np
import pytest

from tformer import archive
from tformer.config import micro_config
from tformer.model import build_model, build_variant
from tformer.rng import Rng

from oracles import crc32_bitwise


@pytest.fixture(scope="module")
def micro():
    return build_variant("micro", num_classes=4, rng=5)


@pytest.fixture(scope="module")
def micro_bytes(micro):
    return archive.to_bytes(micro)


def rebuild(body: bytes) -> bytes:
    """Re-seal a hand-edited body with a valid checksum."""
    return body + struct.pack("<I", zlib.crc32(body))


def test_crc_matches_bitwise_oracle(micro_bytes):
    assert crc32_bitwise(b"123456789") == 0xCBF43926
    body, crc = micro_bytes[:-4], struct.unpack("<I", micro_bytes[-4:])[0]
    assert crc32_bitwise(body) == crc


def test_header_layout(micro, micro_bytes):
    assert micro_bytes[:4] == b"TFWA"
    version, blob_len = struct.unpack("<II", micro_bytes[4:12])
    assert version == 1
    config = json.loads(micro_bytes[12 : 12 + blob_len])
    assert config["name"] == "Micro"
    (count,) = struct.unpack("<I", micro_bytes[12 + blob_len : 16 + blob_len])
    assert count == len(micro.state_dict())


@pytest.mark.parametrize("name", ["micro", "S", "M", "L"])
def test_round_trip_bit_identical(name):
    model = build_variant(name, num_classes=4 if name == "micro" else 1000, rng=1)
    data = archive.to_bytes(model)
    assert len(data) == archive.archive_size(model.config, model.dtype)
    back = archive.from_bytes(data)
    assert back.config == model.config
    a, b = model.state_dict(), back.state_dict()
    assert a.keys() == b.keys()
    assert all(a[k].dtype == b[k].dtype and a[k].tobytes() == b[k].tobytes() for k in a)
    assert archive.to_bytes(back) == data
    if name == "micro":
        x = Rng(2).normal(2 * 3 * 32 * 32).reshape(2, 3, 32, 32).astype(np.float32)
        assert model.forward(x).tobytes() == back.forward(x).tobytes()
    else:
        assert len(data) / model.count_parameters()[0] < 4.1


def test_export_twice_is_byte_identical(micro, tmp_path):
    p1, p2 = tmp_path / "a.tfwa", tmp_path / "b.tfwa"
    archive.export_model(micro, p1)
    buf = io.BytesIO()
    archive.export_model(micro, buf)
    archive.export_model(micro, p2)
    assert p1.read_bytes() == p2.read_bytes() == buf.getvalue()
    assert archive.import_model(p1).state_dict().keys() == micro.state_dict().keys()


def test_float64_archive_and_size_formula():
    model = build_model(micro_config(), Rng(0), np.float64)
    data = archive.to_bytes(model)
    assert len(data) == archive.archive_size(model.config, np.float64)
    assert archive.from_bytes(data).dtype == np.float64
    # hand size: header, config, records, checksum
    blob = archive.config_blob(model.config)
    records = sum(
        2 + len(n) + 2 + 4 * v.ndim + 8 * v.size for n, v in model.state_dict().items()
    )
    assert len(data) == 4 + 4 + 4 + len(blob) + 4 + records + 4


def test_every_single_byte_flip_is_detected(micro_bytes):
    rng = Rng(77)
    positions = sorted(set(int(p) for p in rng.integers(len(micro_bytes), 400)) | {0, 5, 9, 20, len(micro_bytes) - 1})
    for pos in positions:
        bad = bytearray(micro_bytes)
        bad[pos] ^= 1 << int(rng.integers(8, 1)[0])
        with pytest.raises(archive.ArchiveError):
            archive.from_bytes(bytes(bad))


def test_payload_flip_is_checksum_error(micro_bytes):
    bad = bytearray(micro_bytes)
    bad[-100] ^= 0xFF
    with pytest.raises(archive.ChecksumError):
        archive.from_bytes(bytes(bad))


@pytest.mark.parametrize("cut", [3, 11, 200, -5, -1])
def test_truncation_is_structural(micro_bytes, cut):
    with pytest.raises((archive.TruncatedArchiveError, archive.BadMagicError)):
        archive.from_bytes(micro_bytes[:cut])


def test_trailing_bytes_rejected(micro_bytes):
    with pytest.raises(archive.TruncatedArchiveError):
        archive.from_bytes(micro_bytes + b"\0")


def test_bad_magic_and_version(micro_bytes):
    with pytest.raises(archive.BadMagicError):
        archive.from_bytes(b"XXXX" + micro_bytes[4:])
    body = bytearray(micro_bytes[:-4])
    body[4:8] = struct.pack("<I", 2)
    with pytest.raises(archive.UnsupportedVersionError):
        archive.from_bytes(rebuild(bytes(body)))


def _edited(model, edit) -> bytes:
    names = dict(model.state_dict())
    edit(names)

    class Fake:
        config = model.config

        def named_parameters(self):
            return iter(names.items())

    return archive.to_bytes(Fake())


def test_semantic_errors(micro):
    with pytest.raises(archive.MissingTensorError):
        archive.from_bytes(_edited(micro, lambda d: d.pop("head.fc.bias")))
    with pytest.raises(archive.UnknownTensorError):
        archive.from_bytes(_edited(micro, lambda d: d.__setitem__("extra.weight", np.zeros(2, np.float32))))
    with pytest.raises(archive.ShapeMismatchError):
        archive.from_bytes(_edited(micro, lambda d: d.__setitem__("head.fc.bias", np.zeros(5, np.float32))))


def test_refuses_non_finite_export():
    model = build_variant("micro", num_classes=4)
    model.state_dict()["head.fc.weight"][0, 0] = np.nan
    with pytest.raises(archive.ArchiveFormatError):
        archive.to_bytes(model)


def test_expected_tensors_agree_with_model():
    for name in ["micro", "S"]:
        model = build_variant(name, num_classes=4 if name == "micro" else 1000)
        shapes = {k: v.shape for k, v in model.state_dict().items()}
        assert shapes == archive.expected_tensors(model.config)


def test_payload_report_savings():
    s = archive.payload_report(build_variant("S"))
    assert s.bytes_per_parameter < 4.1
    assert s.savings["ResNet18"]["ratio"] == pytest.approx(12e6 / s.parameter_count)
    assert 1.35 <= s.savings["ResNet18"]["ratio"] <= 1.5
    l_report = archive.payload_report(build_variant("L"), parameter_count=30_000_000)
    assert l_report.savings["ResNet101 (RetinaNet)"]["fraction_fewer"] == pytest.approx(0.47, abs=0.01)
    assert "bytes per parameter" in s.format_table()
