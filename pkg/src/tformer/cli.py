"""Command-line front end.

Exit codes: 0 success, 1 a check failed, 2 usage error, 3 I/O or format error.
"""

from __future__ import annotations

import argparse
import json
import sys
from typing import Optional, Sequence

import numpy as np

from . import archive, cost, training
from .config import DEFAULT_SCALES, OPERATORS, variant_config
from .errors import TFormerError
from .model import build_variant

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _parse_hw(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError("input sizes must be positive")
    return h, w


def _emit(out, fmt: str, payload: dict, table: str) -> None:
    if fmt == "structured":
        out.write(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    else:
        out.write(table + "\n")


def cmd_summarize(args, out) -> int:
    num_classes = args.num_classes or (4 if args.variant == "micro" else 1000)
    cfg = variant_config(args.variant, num_classes)
    hw = args.input or (cfg.input_size, cfg.input_size)
    report = cost.model_cost(cfg, hw)
    payload = {"variant": cfg.name, "input": list(hw), **report.to_dict()}
    title = f"TFormer-{cfg.name} @ {hw[0]}x{hw[1]}  (1 MAdd = multiply + add)"
    _emit(out, args.format, payload, title + "\n" + report.format_table())
    return EXIT_OK


def cmd_compare(args, out) -> int:
    spec = cost.MHACostSpec(args.n, args.d, args.heads)
    mha = cost.mha_cost(spec)
    hp, hf = cost.hybrid_cost(args.d, args.n, OPERATORS, DEFAULT_SCALES)
    rp, rf = cost.ratios(spec)
    payload = {
        "convention": cost.CONVENTION,
        "rows": [
            {"component": "mha", "params": mha.params, "madds": mha.madds_corrected,
             "madds_literal": mha.madds_literal},
            {"component": "hybrid", "params": hp, "madds": hf},
        ],
        "ratios": {"R_P": rp, "R_F": rf, "N2_over_D2": args.n**2 / args.d**2},
    }
    table = "\n".join(
        [
            f"N={args.n} D={args.d} heads={args.heads}",
            f"{'component':<10}  {'params':>14}  {'madds':>18}",
            f"{'mha':<10}  {mha.params:>14,d}  {mha.madds_corrected:>18,d}",
            f"{'  literal':<10}  {'':>14}  {mha.madds_literal:>18,d}",
            f"{'hybrid':<10}  {hp:>14,d}  {hf:>18,d}",
            f"R_P = {rp:.2f}",
            f"R_F = {rf:.2f}   (N^2/D^2 = {args.n**2 / args.d**2:.2f})",
        ]
    )
    _emit(out, args.format, payload, table)
    return EXIT_OK


def cmd_gradcheck(args, out) -> int:
    results = training.gradcheck_suite(args.seed)
    ok = all(r.passed for r in results)
    payload = {
        "results": [
            {"component": r.name, "error": r.error, "threshold": r.threshold, "passed": r.passed} for r in results
        ],
        "passed": ok,
    }
    table = "\n".join(
        f"{'PASS' if r.passed else 'FAIL'}  {r.name:<32} {r.error:.3e}  (<= {r.threshold:.0e})" for r in results
    )
    _emit(out, args.format, payload, table)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_train_demo(args, out) -> int:
    cfg = training.SgdConfig(lr=args.lr, momentum=args.momentum, steps=args.steps, batch_size=args.batch_size)
    log = None if args.format == "structured" else (lambda line: out.write(line + "\n"))
    result = training.train_demo(args.seed, cfg, log=log)
    ok = result.final_accuracy >= 0.95
    if args.format == "structured":
        payload = {
            "accuracy": [{"step": s, "accuracy": a} for s, a in result.accuracy],
            "final_accuracy": result.final_accuracy,
            "final_loss": result.losses[-1] if result.losses else None,
            "passed": ok,
        }
        out.write(json.dumps(payload, indent=2) + "\n")
    else:
        out.write(f"final train accuracy {result.final_accuracy:.3f} ({'PASS' if ok else 'FAIL'}, target 0.95)\n")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_export(args, out) -> int:
    num_classes = args.num_classes or (4 if args.variant == "micro" else 1000)
    model = build_variant(args.variant, num_classes, args.seed)
    n = archive.export_model(model, args.out)
    report = archive.payload_report(model)
    _emit(out, args.format, {"path": args.out, "bytes_written": n, **report.to_dict()},
          f"wrote {n:,d} bytes to {args.out}\n" + report.format_table())
    return EXIT_OK


def cmd_import_check(args, out) -> int:
    with open(args.path, "rb") as f:
        data = f.read()
    model = archive.from_bytes(data)
    total, _ = model.count_parameters()
    expected = archive.archive_size(model.config, model.dtype)
    payload = {
        "variant": model.config.name,
        "tensors": len(model.state_dict()),
        "params": total,
        "payload_bytes": len(data),
        "expected_bytes": expected,
    }
    _emit(out, args.format, payload,
          f"OK  TFormer-{model.config.name}: {payload['tensors']} tensors, {total:,d} params, {len(data):,d} bytes")
    return EXIT_OK if expected == len(data) else EXIT_FAIL


def read_ppm(path: str) -> np.ndarray:
    """Binary P6 with maxval 255 -> (3, H, W) float array in [0, 1]."""
    with open(path, "rb") as f:
        data = f.read()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise archive.ArchiveFormatError("truncated PPM header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace before the raster
    if tokens[0] != b"P6":
        raise archive.ArchiveFormatError("only binary PPM (P6) images are supported")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise archive.ArchiveFormatError("malformed PPM header") from None
    if maxval != 255 or w < 1 or h < 1:
        raise archive.ArchiveFormatError("PPM must be 8-bit (maxval 255) with positive size")
    raster = data[pos : pos + 3 * w * h]
    if len(raster) != 3 * w * h:
        raise archive.ArchiveFormatError("PPM raster is truncated")
    img = np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3)
    return img.transpose(2, 0, 1).astype(np.float64) / 255.0


def resize_nearest(img: np.ndarray, size: int) -> np.ndarray:
    _, h, w = img.shape
    rows = (np.arange(size) * h) // size
    cols = (np.arange(size) * w) // size
    return img[:, rows][:, :, cols]


def cmd_infer(args, out) -> int:
    model = archive.import_model(args.weights)
    img = resize_nearest(read_ppm(args.image), model.config.input_size)
    logits = model.forward(img[None].astype(model.dtype))[0].astype(np.float64)
    p = np.exp(logits - logits.max())
    p /= p.sum()
    top = np.argsort(-p, kind="stable")[:3]
    payload = {"top3": [{"class": int(i), "score": float(p[i])} for i in top]}
    _emit(out, args.format, payload, "\n".join(f"{int(i):>5d}  {p[i]:.4f}" for i in top))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tformer", description="TFormer cost analysis, checks and tooling.")
    sub = parser.add_subparsers(dest="command", required=True)
    variants = ["s", "m", "l", "micro"]

    def fmt(p):
        p.add_argument("--format", choices=["table", "structured"], default="table")

    p = sub.add_parser("summarize", help="per-layer parameter / MAdd report")
    p.add_argument("--variant", type=str.lower, choices=variants, required=True)
    p.add_argument("--input", type=_parse_hw, help="HxW (default: the variant's native size)")
    p.add_argument("--num-classes", type=int)
    fmt(p)
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("compare", help="MHA vs hybrid layer cost")
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--heads", type=int, required=True)
    fmt(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("gradcheck", help="finite-difference check of every VJP")
    p.add_argument("--seed", type=int, default=0)
    fmt(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train-demo", help="train Micro on the synthetic set")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch-size", type=int, default=32)
    fmt(p)
    p.set_defaults(func=cmd_train_demo)

    p = sub.add_parser("export", help="write a freshly initialised model archive")
    p.add_argument("--variant", type=str.lower, choices=variants, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-classes", type=int)
    fmt(p)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("import-check", help="validate an archive")
    p.add_argument("path")
    fmt(p)
    p.set_defaults(func=cmd_import_check)

    p = sub.add_parser("infer", help="top-3 classes for a PPM image")
    p.add_argument("--weights", required=True)
    p.add_argument("--image", required=True)
    fmt(p)
    p.set_defaults(func=cmd_infer)
    return parser


def main(argv: Optional[Sequence[str]] = None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return args.func(args, out)
    except archive.ArchiveError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except TFormerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
