#!/usr/bin/env python3
"""Side-by-side ablation of the pipeline variants on one synthetic pyramid.

For every variant this builds the pipeline at small probe dims, runs the
forward pass, measures cross-level sensitivity, counts parameters, and
(optionally) runs the toy identity-regression for a fixed number of steps
so the variants' trainability can be compared on equal footing.  All
numbers are deterministic for a fixed seed.

Usage:
    python scripts/ablation_report.py
    python scripts/ablation_report.py --train-steps 50 --seed 3 --out ablation.json
"""

import argparse
import dataclasses
import json
import sys

sys.path.insert(0, "src")  # allow running from a source checkout

import numpy as np

from sdtp.config import CdiConfig, IspConfig, PipelineConfig
from sdtp.pyramid import (
    build_variant,
    cross_level_sensitivity,
    synthetic_pyramid,
    toy_train,
)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--channels", type=int, default=8)
    ap.add_argument("--base-hw", type=int, nargs=2, default=(8, 8))
    ap.add_argument("--levels", type=int, nargs="+", default=[4, 5])
    ap.add_argument("--train-steps", type=int, default=0,
                    help="also run this many toy-training steps per variant")
    ap.add_argument("--lr", type=float, default=0.1)
    ap.add_argument("--out", default=None, help="write the JSON report here")
    args = ap.parse_args(argv)

    heads = max(h for h in range(1, min(8, args.channels) + 1) if args.channels % h == 0)
    base = PipelineConfig(
        variant="sdtp", seed=args.seed, channels=args.channels,
        in_channels=args.channels, base_hw=tuple(args.base_hw),
        isp=IspConfig(heads=heads, rates=(1, 2)),
        cdi=CdiConfig(heads=heads, levels=tuple(args.levels)))

    tags = ["sdtp", "fpn_baseline", "dilated_c5", "no_interaction"]
    tags += [f"single_input_{lvl}" for lvl in base.cdi.levels]

    rows = []
    print(f"{'variant':<18} {'params':>8} {'dep_loss':>12} {'cross':>6}"
          + (f" {'loss_ratio':>11}" if args.train_steps else ""))
    for tag in tags:
        cfg = dataclasses.replace(base, variant=tag)
        pipe = build_variant(cfg)
        pyr = synthetic_pyramid(cfg)
        _, dep = pipe.forward(pyr)
        levels, sens = cross_level_sensitivity(pipe, pyr)
        off = sens.copy()
        np.fill_diagonal(off, 0.0)
        row = {
            "variant": tag,
            "n_params": int(sum(p.data.size for p in pipe.params())),
            "dep_loss": dep,
            "any_cross_level": bool(off.max() > 0.0),
            "sensitivity_levels": levels,
            "sensitivity": sens.tolist(),
        }
        line = (f"{tag:<18} {row['n_params']:>8} {dep:>12.5f} "
                f"{str(row['any_cross_level']):>6}")
        if args.train_steps:
            trace = toy_train(build_variant(cfg), synthetic_pyramid(cfg),
                              steps=args.train_steps, lr=args.lr)
            row["train"] = {
                "steps": args.train_steps, "lr": args.lr,
                "initial": trace.initial, "final": trace.final,
                "ratio": trace.final / trace.initial,
            }
            line += f" {row['train']['ratio']:>11.4f}"
        rows.append(row)
        print(line)

    report = {"kind": "ablation", "seed": args.seed, "channels": args.channels,
              "base_hw": list(args.base_hw), "levels": list(base.cdi.levels),
              "variants": rows}
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(report, fh, indent=2)
            fh.write("\n")
        print(f"report written to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
