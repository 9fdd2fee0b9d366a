#!/usr/bin/env python3
"""Regenerate every cost table as CSV files plus a readable summary.

Usage: python3 scripts/reproduce_tables.py [--out-dir results/tables]
"""

import argparse
import pathlib

from depthsep import cost
from depthsep.arch import Hyperparams, build_mobilenet


def write(path: pathlib.Path, lines: list[str]) -> None:
    path.write_text("\n".join(lines) + "\n")
    print(f"wrote {path} ({len(lines) - 1} rows)")


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out-dir", default="results/tables")
    args = parser.parse_args()
    out = pathlib.Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    rows = ["modification,mult_adds,params"]
    rows.append(f"standard,{cost.cost_std_conv(3, 512, 512, 14).mult_adds},"
                f"{cost.cost_std_conv(3, 512, 512, 14).params}")
    sep = cost.cost_separable(3, 512, 512, 14)
    rows.append(f"separable,{sep.mult_adds},{sep.params}")
    thin = cost.cost_separable_scaled(3, 512, 512, 14, alpha=0.75)
    rows.append(f"separable_width_0.75,{thin.mult_adds},{thin.params}")
    small = cost.cost_separable_scaled(3, 512, 512, 14, 0.75, 0.714)
    rows.append(f"separable_width_0.75_res_0.714,{small.mult_adds},{small.params}")
    write(out / "layer_shrink.csv", rows)

    rows = ["idx,detail,mult_adds,params"]
    report = cost.analyze(build_mobilenet(Hyperparams()))
    rows += [f"{r.index},{r.detail},{r.mult_adds},{r.params}" for r in report.layers]
    write(out / "per_layer_full.csv", rows)

    rows = ["type,mult_adds,params,mult_add_pct,param_pct"]
    for label, s in cost.breakdown_by_type(report).items():
        rows.append(f"{label},{s.mult_adds},{s.params},{s.mult_add_pct:.2f},{s.param_pct:.2f}")
    write(out / "shares_by_type.csv", rows)

    rows = ["alpha,resolution,mult_adds,params"]
    rows += [f"{r.alpha},{r.resolution},{r.mult_adds},{r.params}" for r in cost.sweep()]
    write(out / "multiplier_sweep.csv", rows)

    shallow = cost.analyze(build_mobilenet(Hyperparams(shallow=True)))
    write(out / "variants.csv", [
        "variant,mult_adds,params",
        f"full,{report.total_mult_adds},{report.total_params}",
        f"shallow,{shallow.total_mult_adds},{shallow.total_params}",
    ])

    print(f"\nfull network: {cost.fmt_million_int(report.total_mult_adds)} M mult-adds, "
          f"{cost.fmt_million_1dp(report.total_params)} M params")
    print(f"shallow:      {cost.fmt_million_int(shallow.total_mult_adds)} M mult-adds, "
          f"{cost.fmt_million_1dp(shallow.total_params)} M params")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
