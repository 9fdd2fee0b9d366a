#!/usr/bin/env python3
"""Run the synthetic 4-class training task and save the loss curve.

Usage: python3 scripts/train_curve.py [--steps 2000] [--seed 0]
       [--out results/toy_loss.csv] [--dump-weights results/toy_model]
"""

import argparse
import pathlib

from depthsep import runtime
from depthsep.arch import parse_arch
from depthsep.train import TOY_ARCH_TEXT, ToyConfig, train_toy


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--steps", type=int, default=2000)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--lr", type=float, default=1e-3)
    parser.add_argument("--lr-decay", type=float, default=1.0)
    parser.add_argument("--batch", type=int, default=32)
    parser.add_argument("--out", default="results/toy_loss.csv")
    parser.add_argument("--dump-weights", default=None, help="save the trained bundle here")
    args = parser.parse_args()

    cfg = ToyConfig(seed=args.seed, steps=args.steps, batch=args.batch,
                    lr=args.lr, lr_decay=args.lr_decay)
    result = train_toy(cfg)

    path = pathlib.Path(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("step,loss\n" + "\n".join(
        f"{i},{loss:.6f}" for i, loss in enumerate(result.losses)) + "\n")
    print(f"wrote {path} ({len(result.losses)} steps)")

    if result.diverged_at is not None:
        print(f"diverged at step {result.diverged_at}")
        return 1
    print(f"initial mean loss {result.initial_mean:.4f}, final mean loss "
          f"{result.final_mean:.4f}, converged={result.converged}")
    if args.dump_weights:
        model = runtime.Model(parse_arch(TOY_ARCH_TEXT), result.weights)
        runtime.save_model(args.dump_weights, model)
        print(f"saved trained bundle to {args.dump_weights}")
    return 0 if result.converged else 1


if __name__ == "__main__":
    raise SystemExit(main())
