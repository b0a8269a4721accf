import io
import json
import subprocess
import sys

import numpy as np
import pytest

from tformer.cli import main, read_ppm, resize_nearest


def run(*argv):
    out = io.StringIO()
    code = main(list(argv), out)
    return code, out.getvalue()


def write_ppm(path, img):
    h, w, _ = img.shape
    path.write_bytes(b"P6\n# test image\n%d %d\n255\n" % (w, h) + img.astype(np.uint8).tobytes())


def test_summarize_structured():
    code, text = run("summarize", "--variant", "S", "--format", "structured")
    assert code == 0
    payload = json.loads(text)
    assert payload["convention"] == "madd"
    assert {"component", "params", "madds"} <= set(payload["rows"][0])
    assert payload["totals"]["params"] == 8_374_952
    assert abs(payload["totals"]["madds"] - 1.2e9) <= 0.15 * 1.2e9


def test_summarize_table_custom_input():
    code, text = run("summarize", "--variant", "micro", "--input", "64x32")
    assert code == 0 and "stage1.block1.hybrid" in text


def test_compare_ratios():
    code, text = run("compare", "--d", "64", "--n", "3136", "--heads", "8", "--format", "structured")
    assert code == 0
    ratios = json.loads(text)["ratios"]
    assert ratios["R_P"] == 4.0
    assert ratios["N2_over_D2"] == pytest.approx(2401)


def test_usage_errors():
    assert run()[0] == 2
    assert run("summarize", "--variant", "XL")[0] == 2
    assert run("summarize", "--variant", "S", "--input", "banana")[0] == 2
    assert run("summarize", "--variant", "S", "--input", "225x224")[0] == 2
    assert run("compare", "--d", "64", "--n", "10", "--heads", "7")[0] == 2
    assert run("summarize", "--variant", "S", "--bogus")[0] == 2


def test_export_import_infer(tmp_path):
    path = tmp_path / "micro.tfwa"
    code, text = run("export", "--variant", "micro", "--out", str(path), "--format", "structured")
    assert code == 0
    payload = json.loads(text)
    assert payload["bytes_written"] == path.stat().st_size == payload["payload_bytes"]

    code, text = run("import-check", str(path), "--format", "structured")
    assert code == 0 and json.loads(text)["payload_bytes"] == json.loads(text)["expected_bytes"]

    img = np.zeros((20, 24, 3))
    img[::2] = 255
    write_ppm(tmp_path / "x.ppm", img)
    code, text = run("infer", "--weights", str(path), "--image", str(tmp_path / "x.ppm"), "--format", "structured")
    assert code == 0
    top = json.loads(text)["top3"]
    assert len(top) == 3 and sum(t["score"] for t in top) <= 1 + 1e-9
    assert top[0]["score"] >= top[1]["score"] >= top[2]["score"]


def test_corrupt_and_missing_files_exit_3(tmp_path):
    path = tmp_path / "m.tfwa"
    assert run("export", "--variant", "micro", "--out", str(path))[0] == 0
    data = bytearray(path.read_bytes())
    data[len(data) // 2] ^= 0x10
    path.write_bytes(bytes(data))
    assert run("import-check", str(path))[0] == 3
    assert run("import-check", str(tmp_path / "missing.tfwa"))[0] == 3
    (tmp_path / "bad.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0")
    assert run("infer", "--weights", str(path), "--image", str(tmp_path / "bad.ppm"))[0] == 3


def test_gradcheck_command():
    code, text = run("gradcheck", "--format", "structured")
    assert code == 0 and json.loads(text)["passed"]


def test_train_demo_short_run_reports_failure():
    code, text = run("train-demo", "--steps", "2", "--format", "structured")
    payload = json.loads(text)
    assert len(payload["accuracy"]) >= 2
    assert code == (0 if payload["passed"] else 1)


def test_ppm_reader(tmp_path):
    img = np.arange(2 * 3 * 3).reshape(2, 3, 3) * 10
    write_ppm(tmp_path / "a.ppm", img)
    arr = read_ppm(str(tmp_path / "a.ppm"))
    assert arr.shape == (3, 2, 3)
    np.testing.assert_allclose(arr[:, 1, 2], img[1, 2] / 255)
    assert resize_nearest(arr, 4).shape == (3, 4, 4)


def test_module_entry_point():
    proc = subprocess.run(
        [sys.executable, "-m", "tformer", "compare", "--d", "16", "--n", "49", "--heads", "2"],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0 and "R_P = 4.00" in proc.stdout
