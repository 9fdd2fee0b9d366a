"""Command-line front end.

Subcommands: describe, analyze, paper-tables, infer, bench, train-toy,
gradcheck. Exit codes: 0 success, 1 failed check or runtime error, 2 usage
error (argparse and hyperparameter validation).
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from depthsep import arch as arch_mod
from depthsep import bench as bench_mod
from depthsep import cost as cost_mod
from depthsep import runtime as rt
from depthsep import train as train_mod
from depthsep.arch import ArchParseError, Hyperparams, build_mobilenet, emit_arch
from depthsep.tensor import NumericsError, ShapeError, TensorFileError, load_raw_tensor
from depthsep.train import GradCheckReport, ToyConfig

_FILTER_DESCR = {
    arch_mod.LayerKind.CONV_STD: lambda s: f"{s.kernel}x{s.kernel}x{s.in_channels}x{s.out_channels}",
    arch_mod.LayerKind.CONV_DW: lambda s: f"{s.kernel}x{s.kernel}x{s.in_channels} dw",
    arch_mod.LayerKind.CONV_PW: lambda s: f"1x1x{s.in_channels}x{s.out_channels}",
    arch_mod.LayerKind.AVGPOOL: lambda s: f"pool {s.in_size}x{s.in_size}",
    arch_mod.LayerKind.FC: lambda s: f"{s.in_channels}x{s.out_channels}",
    arch_mod.LayerKind.SOFTMAX: lambda s: "classifier",
}


def _hyperparams(args) -> Hyperparams:
    return Hyperparams(
        alpha=args.alpha,
        resolution=args.resolution,
        num_classes=args.classes,
        shallow=args.shallow,
    )


def _seed(args, fallback: int = 0) -> int:
    return fallback if args.seed is None else args.seed


def _layer_rows(descr):
    rows = []
    for i, s in enumerate(descr.layers):
        stride = f"s{s.stride}" if s.kind in arch_mod.CONV_KINDS else "-"
        rows.append(
            {
                "idx": i,
                "layer": s.kind.value,
                "stride": stride,
                "filter": _FILTER_DESCR[s.kind](s),
                "input": f"{s.in_size}x{s.in_size}x{s.in_channels}",
            }
        )
    return rows


def cmd_describe(args) -> int:
    hp = _hyperparams(args)
    descr = build_mobilenet(hp)
    rows = _layer_rows(descr)
    if args.format == "json":
        print(json.dumps({"layer_count": descr.layer_count, "layers": rows}, indent=2))
        return 0
    if args.format == "csv":
        print("idx,layer,stride,filter,input")
        for r in rows:
            print(f"{r['idx']},{r['layer']},{r['stride']},{r['filter']},{r['input']}")
        return 0
    print(emit_arch(descr), end="")
    print()
    print(
        f"alpha={hp.alpha} resolution={hp.resolution}"
        f" -> {descr.layer_count} layers ({descr.conv_layer_count} conv + 1 fc)"
    )
    print(f"{'idx':>3}  {'layer':<8}{'stride':<7}{'filter':<16}{'input'}")
    for r in rows:
        print(f"{r['idx']:>3}  {r['layer']:<8}{r['stride']:<7}{r['filter']:<16}{r['input']}")
    return 0


def cmd_analyze(args) -> int:
    descr = build_mobilenet(_hyperparams(args))
    report = cost_mod.analyze(descr)
    shares = cost_mod.breakdown_by_type(report)
    if args.format == "json":
        print(
            json.dumps(
                {
                    "total_mult_adds": report.total_mult_adds,
                    "total_params": report.total_params,
                    "layers": [
                        {"idx": r.index, "detail": r.detail, "mult_adds": r.mult_adds, "params": r.params}
                        for r in report.layers
                    ],
                    "shares": {
                        label: {
                            "mult_adds": s.mult_adds,
                            "params": s.params,
                            "mult_add_pct": round(s.mult_add_pct, 2),
                            "param_pct": round(s.param_pct, 2),
                        }
                        for label, s in shares.items()
                    },
                },
                indent=2,
            )
        )
        return 0
    if args.format == "csv":
        print("idx,detail,mult_adds,params")
        for r in report.layers:
            print(f"{r.index},{r.detail},{r.mult_adds},{r.params}")
        return 0
    print(f"{'idx':>3}  {'layer':<28}{'mult-adds':>14}{'params':>12}")
    for r in report.layers:
        print(f"{r.index:>3}  {r.detail:<28}{r.mult_adds:>14,}{r.params:>12,}")
    print(
        f"total: {cost_mod.fmt_million_int(report.total_mult_adds)} M mult-adds, "
        f"{cost_mod.fmt_million_1dp(report.total_params)} M params "
        f"({report.total_mult_adds:,} / {report.total_params:,})"
    )
    print("share by layer type:")
    for label, s in sorted(shares.items(), key=lambda kv: -kv[1].mult_adds):
        print(
            f"  {label:<18} mult-adds {cost_mod.fmt_pct(s.mult_add_pct):>6}%"
            f"   params {cost_mod.fmt_pct(s.param_pct):>6}%"
        )
    return 0


def cmd_paper_tables(args) -> int:
    print("# Single-layer shrink walkthrough (3x3 kernel, 512->512 channels, 14x14 output)")
    std = cost_mod.cost_std_conv(3, 512, 512, 14)
    rows = [
        ("standard convolution", std),
        ("depthwise separable", cost_mod.cost_separable(3, 512, 512, 14)),
        ("+ width multiplier 0.75", cost_mod.cost_separable_scaled(3, 512, 512, 14, alpha=0.75)),
        ("+ resolution multiplier 0.714", cost_mod.cost_separable_scaled(3, 512, 512, 14, 0.75, 0.714)),
    ]
    print(f"{'modification':<32}{'mult-adds (M)':>14}{'params (M)':>12}")
    for name, pair in rows:
        print(
            f"{name:<32}{cost_mod.fmt_million_sig(pair.mult_adds):>14}"
            f"{pair.params / 1e6:>12.2f}"
        )
    print()

    print("# Resource share per layer type (alpha=1.0, resolution=224)")
    report = cost_mod.analyze(build_mobilenet(Hyperparams()))
    shares = cost_mod.breakdown_by_type(report)
    print(f"{'type':<18}{'mult-adds':>11}{'params':>9}")
    for label in ("conv 1x1", "conv dw 3x3", "conv 3x3", "fully connected"):
        s = shares[label]
        print(f"{label:<18}{cost_mod.fmt_pct(s.mult_add_pct):>10}%{cost_mod.fmt_pct(s.param_pct):>8}%")
    print(
        "note: the 3x3 stem computes to 1.91% of mult-adds; the commonly cited"
        " share table prints 1.19% for that row, inconsistent with its own"
        " other rows (shares must sum to 100%)."
    )
    print()

    print("# Width multiplier sweep (resolution 224)")
    print(f"{'alpha':<8}{'mult-adds (M)':>14}{'params (M)':>12}")
    for a in (1.0, 0.75, 0.5, 0.25):
        rep = cost_mod.analyze(build_mobilenet(Hyperparams(alpha=a)))
        print(
            f"{a:<8}{cost_mod.fmt_million_int(rep.total_mult_adds):>14}"
            f"{cost_mod.fmt_million_1dp(rep.total_params):>12}"
        )
    print()

    print("# Resolution sweep (alpha 1.0); params do not vary with resolution")
    print(f"{'resolution':<12}{'mult-adds (M)':>14}{'params (M)':>12}")
    for r in (224, 192, 160, 128):
        rep = cost_mod.analyze(build_mobilenet(Hyperparams(resolution=r)))
        print(
            f"{r:<12}{cost_mod.fmt_million_int(rep.total_mult_adds):>14}"
            f"{cost_mod.fmt_million_1dp(rep.total_params):>12}"
        )
    print(
        "note: the 160 row is exactly 290,675,200 mult-adds, which rounds to"
        " 291 M but truncates to the commonly cited 290 M."
    )
    print()

    print("# Shallow variant (alpha 1.0, resolution 224)")
    shallow = cost_mod.analyze(build_mobilenet(Hyperparams(shallow=True)))
    print(
        f"shallow: {cost_mod.fmt_million_int(shallow.total_mult_adds)} M mult-adds,"
        f" {cost_mod.fmt_million_1dp(shallow.total_params)} M params"
        f" ({shallow.total_mult_adds:,} / {shallow.total_params:,})"
    )
    print()

    print("# Width x resolution cross product (16 configurations)")
    print("alpha,resolution,mult_adds,params")
    for row in cost_mod.sweep():
        print(f"{row.alpha},{row.resolution},{row.mult_adds},{row.params}")
    return 0


def _read_ppm(path) -> np.ndarray:
    """Binary 8-bit P6 image -> float32 (h, w, 3) scaled to [0, 1]."""
    with open(path, "rb") as f:
        blob = f.read()

    pos = 0

    def token() -> bytes:
        nonlocal pos
        while pos < len(blob):
            if blob[pos : pos + 1].isspace():
                pos += 1
            elif blob[pos : pos + 1] == b"#":
                while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                    pos += 1
            else:
                break
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise TensorFileError("truncated image header")
        return blob[start:pos]

    if token() != b"P6":
        raise TensorFileError("not a binary P6 image")
    width, height, maxval = int(token()), int(token()), int(token())
    if maxval != 255:
        raise TensorFileError(f"only 8-bit images supported, maxval={maxval}")
    pos += 1  # single whitespace after maxval
    expected = width * height * 3
    payload = blob[pos : pos + expected]
    if len(payload) < expected:
        raise TensorFileError(f"image payload truncated: {len(payload)} of {expected} bytes")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return pixels.astype(np.float32) / 255.0


def _load_input(path, resolution: int) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(2)
    if magic == b"P6":
        img = _read_ppm(path)
        x = 2.0 * img - 1.0  # [0,1] -> [-1,1]
    else:
        x = load_raw_tensor(path)
    if x.ndim == 3:
        x = x[None, ...]
    if x.ndim != 4:
        raise ShapeError(f"input tensor must be rank 3 or 4, got rank {x.ndim}")
    if x.shape[1] != resolution or x.shape[2] != resolution:
        raise ShapeError(
            f"input is {x.shape[1]}x{x.shape[2]}, architecture expects {resolution}x{resolution}"
        )
    return np.ascontiguousarray(x, dtype=np.float32)


def cmd_infer(args) -> int:
    if args.model:
        model = rt.load_model(args.model)
    else:
        descr = build_mobilenet(_hyperparams(args))
        model = rt.Model(descr, rt.init_weights(descr, seed=_seed(args)))
    x = _load_input(args.input, model.arch.input_size)
    backend = "reference" if args.reference_ops else "fast"
    probs = rt.forward(model, x, backend=backend)
    k = min(args.top, probs.shape[1])
    for b in range(probs.shape[0]):
        order = np.argsort(probs[b])[::-1][:k]
        ranked = "  ".join(f"class {c}: {probs[b, c]:.6f}" for c in order)
        print(f"input {b}: {ranked}")
    return 0


def cmd_bench(args) -> int:
    if args.gemm:
        try:
            m, k, n = (int(p) for p in args.gemm.split("x"))
        except ValueError:
            print(f"error: --gemm expects MxKxN, got {args.gemm!r}", file=sys.stderr)
            return 2
        report = bench_mod.bench_gemm(m, k, n, reps=args.reps, seed=_seed(args))
        print("\n".join(bench_mod.csv_rows([report])))
        return 0
    descr = build_mobilenet(_hyperparams(args))
    fwd = bench_mod.bench_forward(descr, batch=args.batch, reps=args.reps, seed=_seed(args))
    print("\n".join(bench_mod.csv_rows(fwd.layers)))
    print(f"# total conv time: {fwd.total_median_ns / 1e6:.2f} ms (sum of per-layer medians)")
    for label, pct in sorted(fwd.time_shares.items(), key=lambda kv: -kv[1]):
        print(f"# time share {label}: {pct:.1f}%")
    return 0


def cmd_train_toy(args) -> int:
    cfg = ToyConfig(
        seed=_seed(args),
        steps=args.steps,
        batch=args.batch,
        lr=args.lr,
        lr_decay=args.lr_decay,
    )
    result = train_mod.train_toy(cfg)
    lines = ["step,loss"] + [f"{i},{loss:.6f}" for i, loss in enumerate(result.losses)]
    if args.out:
        with open(args.out, "w") as f:
            f.write("\n".join(lines) + "\n")
    else:
        print("\n".join(lines))
    if result.diverged_at is not None:
        print(f"diverged: non-finite loss at step {result.diverged_at}", file=sys.stderr)
        return 1
    print(
        f"# initial mean loss {result.initial_mean:.4f}, final mean loss {result.final_mean:.4f},"
        f" converged={result.converged}",
        file=sys.stderr,
    )
    if args.dump_weights:
        model = rt.Model(arch_mod.parse_arch(train_mod.TOY_ARCH_TEXT), result.weights)
        rt.save_model(args.dump_weights, model)
    return 0 if result.converged else 1


def cmd_gradcheck(args) -> int:
    seed = train_mod.GRADCHECK_SEED if args.seed is None else args.seed
    report: GradCheckReport = train_mod.grad_check(seed=seed)
    for name, err in sorted(report.per_tensor.items()):
        status = "ok" if err < args.tolerance else "FAIL"
        print(f"{name:<16} max rel err {err:.3e}  {status}")
    print(f"checked {report.param_count} parameters, worst {report.max_rel_err:.3e}")
    return 0 if report.max_rel_err < args.tolerance else 1


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="depthsep",
        description="Depthwise-separable convolution engine and cost modeler (MobileNet family).",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--alpha", type=float, default=1.0, help="width multiplier in (0, 1]")
    common.add_argument("--resolution", type=int, default=224, help="input size, multiple of 32")
    common.add_argument("--shallow", action="store_true", help="drop the five repeated 14x14 blocks")
    common.add_argument("--seed", type=int, default=None, help="PRNG seed")
    common.add_argument("--classes", type=int, default=1000, help="classifier output count")
    common.add_argument(
        "--format", choices=("table", "csv", "json"), default="table", help="output format"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("describe", parents=[common], help="print the layer table")
    sub.add_parser("analyze", parents=[common], help="mult-add and parameter accounting")
    sub.add_parser(
        "paper-tables", parents=[common], help="print the walkthrough, share, sweep, and variant cost tables"
    )

    infer = sub.add_parser("infer", parents=[common], help="run a forward pass on an image")
    infer.add_argument("--input", required=True, help="MBT1 tensor or binary P6 image")
    infer.add_argument("--model", help="bundle dir with arch.txt + weights.mbnw")
    infer.add_argument("--top", type=int, default=5, help="classes to print")
    infer.add_argument(
        "--reference-ops", action="store_true", help="use the naive reference ops"
    )

    bench = sub.add_parser("bench", parents=[common], help="time the fast kernels")
    bench.add_argument("--reps", type=int, default=5, help="timed repetitions per op")
    bench.add_argument("--batch", type=int, default=1, help="benchmark batch size")
    bench.add_argument("--gemm", help="bench a single matrix product, MxKxN")

    toy = sub.add_parser("train-toy", parents=[common], help="fit the synthetic 4-class task")
    toy.add_argument("--steps", type=int, default=2000)
    toy.add_argument("--batch", type=int, default=32)
    toy.add_argument("--lr", type=float, default=1e-3)
    toy.add_argument("--lr-decay", type=float, default=1.0, help="per-step lr factor")
    toy.add_argument("--out", help="write the step,loss CSV here instead of stdout")
    toy.add_argument("--dump-weights", help="save the trained model bundle to this dir")

    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    gc.add_argument("--tolerance", type=float, default=1e-6)

    return parser


_COMMANDS = {
    "describe": cmd_describe,
    "analyze": cmd_analyze,
    "paper-tables": cmd_paper_tables,
    "infer": cmd_infer,
    "bench": cmd_bench,
    "train-toy": cmd_train_toy,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        _hyperparams(args)  # validate shared flags before dispatch
    except ShapeError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    try:
        return _COMMANDS[args.command](args)
    except (ShapeError, TensorFileError, ArchParseError, rt.WeightError, NumericsError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
