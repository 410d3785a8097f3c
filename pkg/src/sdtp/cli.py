"""Command-line driver.

Subcommands: forward (synthetic-pyramid forward pass + report), gradcheck
(finite-difference verification of every registered op and the end-to-end
pipeline), flops (analytic attention-cost tables), train (toy identity
regression), variants (structural comparison of all ablation variants).

Exit codes: 0 success, 1 check failure (gradient mismatch, contract
violation, divergence), 2 configuration error.  Reports are deterministic
for a fixed config and seed: wall-clock timings go to stderr only, never
into the serialized report.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import complexity as CX
from . import gradcheck as GC
from . import pyramid as P
from . import tensor as TE
from .config import ConfigurationError, PipelineConfig, load_config
from .tensor import ContractViolation


def _add_common(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--config", default=None, help="YAML/JSON config file")
    sp.add_argument("--seed", type=int, default=None, help="override config seed")
    sp.add_argument("--out", default=None, help="write the JSON report here")
    sp.add_argument("--format", choices=("table", "csv", "json"), default="table",
                    help="stdout format")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sdtp",
                                 description="Decoupled transformer pyramid toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    fwd = sub.add_parser("forward", help="synthetic-pyramid forward pass and report")
    _add_common(fwd)
    fwd.add_argument("--variant", default=None, help="override config variant")

    gc = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    _add_common(gc)
    gc.add_argument("--ops", default=None,
                    help="comma-separated subset of registered cases")
    gc.add_argument("--negative-control", action="store_true",
                    help="include a deliberately corrupted gradient (must fail)")

    fl = sub.add_parser("flops", help="analytic attention-cost tables")
    _add_common(fl)

    tr = sub.add_parser("train", help="toy identity-regression training run")
    _add_common(tr)

    va = sub.add_parser("variants", help="compare the ablation variants structurally")
    _add_common(va)
    va.add_argument("--channels", type=int, default=16,
                    help="probe channel width (kept small for speed)")
    va.add_argument("--base-hw", type=int, nargs=2, default=(16, 16),
                    help="probe spatial dims at the shallowest level")
    return ap


def _load(args) -> PipelineConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if getattr(args, "variant", None):
        cfg = dataclasses.replace(cfg, variant=args.variant)
    return cfg


def _emit(report: dict, args, table_text: str) -> None:
    payload = json.dumps(report, indent=2) + "\n"
    if args.format == "json":
        sys.stdout.write(payload)
    elif args.format == "csv" and "csv" in report.get("_renders", {}):
        sys.stdout.write(report["_renders"]["csv"])
    else:
        sys.stdout.write(table_text)
    if args.out:
        body = {k: v for k, v in report.items() if k != "_renders"}
        Path(args.out).write_text(json.dumps(body, indent=2) + "\n")


def _flops_renders(table: dict) -> tuple[str, str]:
    head = f"{'level':>5} {'h':>5} {'w':>5} {'c':>4} {'s':>2} {'full':>16} {'strided':>14} {'decoupled':>14}"
    lines = [head]
    for k, row in enumerate(table["levels"]):
        lines.append(f"{k:>5} {row['h']:>5} {row['w']:>5} {row['c']:>4} {row['s']:>2} "
                     f"{row['full']:>16} {row['strided']:>14} {row['decoupled']:>14}")
    t = table["totals"]
    lines.append(f"{'total':>23} {'':>4} {'':>2} {t['full']:>16} {t['strided']:>14} {t['decoupled']:>14}")
    lines.append(f"ordering decoupled < strided < full: {table['ordering_ok']}")
    text = "\n".join(lines) + "\n"

    csv_lines = ["level,h,w,c,s,full,strided,decoupled"]
    for k, row in enumerate(table["levels"]):
        csv_lines.append(f"{k},{row['h']},{row['w']},{row['c']},{row['s']},"
                         f"{row['full']},{row['strided']},{row['decoupled']}")
    csv_lines.append(f"total,,,,,{t['full']},{t['strided']},{t['decoupled']}")
    csv = "\n".join(csv_lines) + "\n"
    return text, csv


def cmd_forward(args) -> int:
    cfg = _load(args)
    TE.set_default_dtype(np.float64 if cfg.precision == "double" else np.float32)
    pyr = P.synthetic_pyramid(cfg)
    pipe = P.build_variant(cfg)

    t0 = time.perf_counter()
    outs, dep = pipe.forward(pyr)
    wall = time.perf_counter() - t0
    levels, sens = P.cross_level_sensitivity(pipe, pyr)
    off_diag = sens.copy()
    np.fill_diagonal(off_diag, 0.0)
    flops = CX.flops_table(_complexity_dims(cfg))

    report = {
        "kind": "forward",
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "variant": cfg.variant,
        "levels": {
            str(lvl): {
                "input_shape": list(pyr.levels[lvl].shape),
                "output_shape": list(outs[lvl].shape),
            } for lvl in sorted(outs)
        },
        "dep_loss": dep,
        "flops": flops,
        "cross_level_sensitivity": {
            "levels": levels,
            "matrix": sens.tolist(),
            "any_cross_level": bool(off_diag.max() > 0.0),
        },
    }
    lines = [f"variant: {cfg.variant}   seed: {cfg.seed}   dep_loss: {dep!r}"]
    for lvl in sorted(outs):
        lines.append(f"  level {lvl}: in {pyr.levels[lvl].shape} -> out {outs[lvl].shape}")
    lines.append(f"cross-level sensitivity (rows: bumped level, cols: output level):")
    for i, lvl in enumerate(levels):
        row = "  ".join(f"{v:.3e}" for v in sens[i])
        lines.append(f"  level {lvl}: {row}")
    lines.append("any cross-level coupling: "
                 f"{report['cross_level_sensitivity']['any_cross_level']}")
    _emit(report, args, "\n".join(lines) + "\n")
    print(f"forward wall time: {wall:.3f}s", file=sys.stderr)
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _load(args)
    TE.set_default_dtype(np.float64)  # verification always runs in double
    names = GC.registered_cases()
    if args.ops:
        wanted = [s.strip() for s in args.ops.split(",") if s.strip()]
        unknown = [w for w in wanted if w not in names]
        if unknown:
            raise ConfigurationError(f"--ops: unknown case(s) {unknown}; known: {names}")
        names = wanted
    if args.negative_control:
        names.append(GC.register_corrupted_case())

    gc = cfg.gradcheck
    reports = GC.run_all(names, points=gc.points, tolerance=gc.tolerance,
                         step=gc.step, seed=cfg.seed)
    lines = []
    worst = None
    for rep in reports:
        status = "ok" if rep.passed else "FAIL"
        lines.append(f"{rep.op:<24} {status:<5} max_rel_err={rep.max_rel_err:.3e}")
        if rep.diagnostic:
            lines.append(f"    {rep.diagnostic}")
        if worst is None or rep.max_rel_err > worst.max_rel_err:
            worst = rep
    all_ok = all(r.passed for r in reports)
    if not all_ok:
        lines.append(f"worst offender: {worst.op} (max_rel_err={worst.max_rel_err:.3e})")
    report = {
        "kind": "gradcheck",
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "tolerance": gc.tolerance,
        "passed": all_ok,
        "cases": [r.to_dict() for r in reports],
    }
    _emit(report, args, "\n".join(lines) + "\n")
    return 0 if all_ok else 1


def _complexity_dims(cfg: PipelineConfig) -> list[CX.LevelDims]:
    cc = cfg.complexity
    return [CX.LevelDims(h, w, cc.channels, s) for (h, w), s in zip(cc.dims, cc.strides)]


def cmd_flops(args) -> int:
    cfg = _load(args)
    table = CX.flops_table(_complexity_dims(cfg))
    text, csv = _flops_renders(table)
    report = {
        "kind": "flops",
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "flops": table,
        "_renders": {"csv": csv},
    }
    _emit(report, args, text)
    return 0


def cmd_train(args) -> int:
    cfg = _load(args)
    TE.set_default_dtype(np.float64)
    toy = PipelineConfig.for_train(cfg)
    pipe = P.build_variant(toy)
    pyr = P.synthetic_pyramid(toy)
    t0 = time.perf_counter()
    trace = P.toy_train(pipe, pyr, steps=toy.train.steps, lr=toy.train.lr,
                        lam=toy.cdi.lam)
    wall = time.perf_counter() - t0
    ratio = trace.final / trace.initial if trace.initial else float("nan")
    report = {
        "kind": "train",
        "config": toy.to_dict(),
        "seed": toy.seed,
        "steps": toy.train.steps,
        "lr": toy.train.lr,
        "initial_total": trace.initial,
        "final_total": trace.final,
        "reduction_ratio": ratio,
        "trace_total": trace.total,
        "trace_task": trace.task,
        "trace_dep": trace.dep,
    }
    lines = [
        f"toy identity regression: {toy.train.steps} steps, lr={toy.train.lr}, "
        f"lambda={toy.cdi.lam}",
        f"initial total loss: {trace.initial!r}",
        f"final   total loss: {trace.final!r}",
        f"reduction ratio:    {ratio!r}",
    ]
    _emit(report, args, "\n".join(lines) + "\n")
    print(f"train wall time: {wall:.3f}s", file=sys.stderr)
    return 0


def cmd_variants(args) -> int:
    cfg = _load(args)
    TE.set_default_dtype(np.float64)
    probe = dataclasses.replace(
        cfg, channels=args.channels, in_channels=args.channels,
        base_hw=tuple(args.base_hw),
        isp=dataclasses.replace(cfg.isp, heads=_fit_heads(cfg.isp.heads, args.channels)),
        cdi=dataclasses.replace(cfg.cdi, heads=_fit_heads(cfg.cdi.heads, args.channels)),
    )
    tags = ["sdtp", "fpn_baseline", "dilated_c5", "no_interaction"]
    tags += [f"single_input_{lvl}" for lvl in probe.cdi.levels]
    rows = []
    lines = []
    for tag in tags:
        vcfg = dataclasses.replace(probe, variant=tag)
        pipe = P.build_variant(vcfg)
        pyr = P.synthetic_pyramid(vcfg)
        _, dep = pipe.forward(pyr)
        levels, sens = P.cross_level_sensitivity(pipe, pyr)
        off = sens.copy()
        np.fill_diagonal(off, 0.0)
        rows.append({
            "variant": tag,
            "dep_loss": dep,
            "levels": levels,
            "sensitivity": sens.tolist(),
            "any_cross_level": bool(off.max() > 0.0),
            "n_params": int(sum(p.size for p in pipe.params())),
        })
        lines.append(f"{tag:<18} params={rows[-1]['n_params']:>8} "
                     f"dep_loss={dep:>12.5f} cross_level={rows[-1]['any_cross_level']}")
    report = {
        "kind": "variants",
        "config": probe.to_dict(),
        "seed": probe.seed,
        "variants": rows,
    }
    _emit(report, args, "\n".join(lines) + "\n")
    return 0


def _fit_heads(heads: int, channels: int) -> int:
    h = min(heads, channels)
    while channels % h:
        h -= 1
    return h


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "forward": cmd_forward,
        "gradcheck": cmd_gradcheck,
        "flops": cmd_flops,
        "train": cmd_train,
        "variants": cmd_variants,
    }
    try:
        return handlers[args.command](args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except ContractViolation as exc:
        print(f"contract violation: {exc}", file=sys.stderr)
        return 1
    except P.TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
