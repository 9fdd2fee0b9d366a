#!/usr/bin/env python3
"""Time the fast kernels for every conv layer and compare measured time
shares against the analytic mult-add shares.

Usage: python3 scripts/bench_layers.py [--alpha 1.0] [--resolution 224]
       [--batch 1] [--reps 5] [--out results/bench.csv]
"""

import argparse
import pathlib

from depthsep import bench, cost
from depthsep.arch import Hyperparams, build_mobilenet


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--alpha", type=float, default=1.0)
    parser.add_argument("--resolution", type=int, default=224)
    parser.add_argument("--batch", type=int, default=1)
    parser.add_argument("--reps", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default=None, help="CSV destination (default: stdout only)")
    args = parser.parse_args()

    descr = build_mobilenet(Hyperparams(alpha=args.alpha, resolution=args.resolution))
    fwd = bench.bench_forward(descr, batch=args.batch, reps=args.reps, seed=args.seed)
    rows = bench.csv_rows(fwd.layers)
    print("\n".join(rows))
    if args.out:
        path = pathlib.Path(args.out)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(rows) + "\n")
        print(f"# wrote {path}")

    report = cost.analyze(descr)
    ma_shares = {label: s.mult_add_pct for label, s in cost.breakdown_by_type(report).items()}
    print(f"\n# forward conv time: {fwd.total_median_ns / 1e6:.2f} ms "
          f"(alpha={args.alpha}, resolution={args.resolution}, batch={args.batch})")
    print(f"# {'type':<18}{'time %':>8}{'mult-add %':>12}")
    for label, pct in sorted(fwd.time_shares.items(), key=lambda kv: -kv[1]):
        print(f"# {label:<18}{pct:>7.1f}%{ma_shares.get(label, 0.0):>11.2f}%")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
