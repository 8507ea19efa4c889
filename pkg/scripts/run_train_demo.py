#!/usr/bin/env python3
"""Train on synthetic scenes and print the loss trajectory.

Equivalent to `voxelfuse train-demo` but keeps the result in hand, which
makes it the quicker starting point for poking at trained parameters.
"""
import argparse
from pathlib import Path

from voxelfuse.config import load_config, save_config
from voxelfuse.qfm import save_params_bundle
from voxelfuse.train import train_demo


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=None, help="config file (default: toy profile)")
    ap.add_argument("--seed", type=int, default=None, help="override optim.seed")
    ap.add_argument("--steps", type=int, default=None, help="override optim.steps")
    ap.add_argument("--out", default=None, help="directory for losses.csv and params")
    ap.add_argument("--tail", type=int, default=10, help="trajectory rows to print")
    args = ap.parse_args()

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.optim.seed = args.seed
    if args.steps is not None:
        cfg.optim.steps = args.steps

    result = train_demo(cfg, args.out)
    if args.out:
        save_config(cfg, Path(args.out) / "config.txt")
        save_params_bundle(result.params.qfm, Path(args.out) / "qfm_params")

    print(f"{'step':>6} {'L_total':>12} {'L_rpn':>12} {'L_rcnn':>12} {'L_vfim':>12}")
    shown = result.rows if len(result.rows) <= args.tail else result.rows[-args.tail :]
    if shown is not result.rows:
        print(f"  ... ({len(result.rows) - args.tail} earlier rows)")
    for step, total, rpn, rcnn, vfim in shown:
        print(f"{step:>6} {total:>12.6f} {rpn:>12.6f} {rcnn:>12.6f} {vfim:>12.6f}")
    print(
        f"\nseed {cfg.optim.seed}: L_total {result.initial_total:.4f} -> "
        f"{result.final_total:.4f} over {cfg.optim.steps} steps"
    )


if __name__ == "__main__":
    main()
