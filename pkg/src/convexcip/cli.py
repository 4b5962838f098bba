"""Command-line front end.  Every config key is also a ``--flag``; a YAML
file given with ``--config`` supplies the base values."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import warnings
from pathlib import Path

import numpy as np

from .basis import cached_operators, tensor_cache_path
from .forward import CoefficientProfile
from .local_solver import minimize_local, step3_refine
from .pipeline import (
    ExperimentConfig,
    PipelineError,
    admissible,
    atomic_write,
    compare,
    global_step,
    make_traces,
    preprocess,
    read_traces,
    run_hybrid,
    write_profile,
    write_traces,
)


def _add_config_flags(parser: argparse.ArgumentParser, skip=()) -> None:
    parser.add_argument("--config", help="YAML file with flat key: value pairs")
    for f in dataclasses.fields(ExperimentConfig):
        if f.name in skip:
            continue
        parser.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, default=None, metavar=f.name.upper())


def _config(args, **forced) -> ExperimentConfig:
    names = [f.name for f in dataclasses.fields(ExperimentConfig)]
    overrides = {n: getattr(args, n) for n in names if getattr(args, n, None) is not None}
    overrides.update(forced)
    if args.config:
        return ExperimentConfig.load(args.config, **overrides)
    return ExperimentConfig.from_mapping(overrides)


def _out_dir(cfg: ExperimentConfig, default: str) -> Path:
    out = Path(cfg.output_dir or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _traces(args, cfg):
    if args.traces:
        return read_traces(args.traces)
    return make_traces(cfg)[0]


def _dump(path, payload) -> None:
    atomic_write(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def cmd_simulate(args) -> int:
    cfg = _config(args)
    out = _out_dir(cfg, "runs/simulate")
    traces, truth = make_traces(cfg)
    write_traces(out, traces)
    write_profile(out / "c_true.csv", truth.x, truth.values)
    print(f"traces written to {out}")
    return 0


def cmd_invert_global(args) -> int:
    cfg = _config(args)
    out = _out_dir(cfg, "runs/global")
    data = preprocess(_traces(args, cfg), cfg)
    rec, Q, _ = global_step(data, cfg, out)
    report = {"config": cfg.to_dict(), "convergence": Q.report.to_dict(), "x": rec.x.tolist(), "c_glob": rec.c.tolist(),
              "per_s_spread": rec.spread, "h2_norm": Q.h2_norm()}
    report["convergence"].pop("wall_time")
    _dump(out / "global_report.json", report)
    print(f"c_glob: max {rec.c.max():.3f}, min {rec.c.min():.3f}; {Q.report.message}")
    return 1 if Q.report.flagged else 0


def cmd_invert_local(args) -> int:
    cfg = _config(args)
    out = _out_dir(cfg, "runs/local")
    data = preprocess(_traces(args, cfg), cfg)
    x = cfg.local_grid.x
    if args.init:
        arr = np.loadtxt(args.init, delimiter=",", skiprows=1, ndmin=2)
        init, clipped = admissible(CoefficientProfile(arr[:, 0], arr[:, 1]).on(x), cfg.c_min)
        if clipped:
            print(f"initial guess raised to c_min = {cfg.c_min:g} at {clipped} nodes")
    else:
        init = CoefficientProfile.homogeneous(x)
    mcfg = cfg.misfit_config()
    step2 = minimize_local(init, data, init, mcfg)
    step3 = step3_refine(step2.profile, data, init, mcfg)
    write_profile(out / "c_local1.csv", x, step2.profile.values)
    write_profile(out / "c_local2.csv", x, step3.profile.values)
    reports = {"step2": step2.report.to_dict(), "step3": step3.report.to_dict()}
    for r in reports.values():
        r.pop("wall_time")
    _dump(out / "local_report.json", {"config": cfg.to_dict(), "b1": step3.b1, "b1_flagged": step3.b1_flagged,
                                      "convergence": reports, "warnings": step2.warnings + step3.warnings})
    print(f"b1 = {step3.b1:g}{' (no reduction)' if step3.b1_flagged else ''}")
    return 1 if step2.report.flagged or step3.report.flagged else 0


def _summary(report) -> str:
    lines = [f"{report.mode}:"]
    for name, m in report.metrics.items():
        if m is not None:
            lines.append(f"  {name:9s} rel_l2={m['rel_l2']:.4f} sup={m['sup']:.4f} jaccard={m['jaccard']:.3f}")
    lines.append(f"  b1={report.b1:g}  flags={report.flags or 'none'}")
    return "\n".join(lines)


def cmd_run_example(args) -> int:
    cfg = _config(args, example=args.example)
    out = _out_dir(cfg, f"runs/example{args.example}")
    report = run_hybrid(cfg.replace(output_dir=str(out)))
    print(_summary(report))
    return 1 if report.failed else 0


def cmd_compare(args) -> int:
    cfg = _config(args)
    out = _out_dir(cfg, f"runs/compare{cfg.example}")
    res = compare(cfg.replace(output_dir=str(out)))
    print(_summary(res["hybrid"]))
    print(_summary(res["local_only"]))
    ratio = res["summary"]["ratio"]
    print(f"final error ratio hybrid / local-only: {ratio:.3f}" if ratio is not None else "local-only error is zero")
    return 1 if res["hybrid"].failed or res["local_only"].failed else 0


def cmd_tensor_cache(args) -> int:
    cfg = _config(args)
    cache = cfg.tensor_cache or ".cache"
    tensor, _ = cached_operators(cfg.basis, cfg.quadrature, cache)
    path = tensor_cache_path(cache, cfg.basis, cfg.quadrature)
    print(f"{path}  shape={tensor.shape}  F[0,0,0]={tensor[0, 0, 0]:.6g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="convexcip", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="synthetic traces p1, p2 at x = 0")
    _add_config_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("invert-global", help="Step 1 from traces (or fresh synthetic data)")
    _add_config_flags(p)
    p.add_argument("--traces", help="directory holding p1.csv and p2.csv")
    p.set_defaults(func=cmd_invert_global)

    p = sub.add_parser("invert-local", help="Steps 2 and 3 from an initial guess")
    _add_config_flags(p)
    p.add_argument("--traces", help="directory holding p1.csv and p2.csv")
    p.add_argument("--init", help="CSV (x, c) first guess and regularisation reference; default c = 1")
    p.set_defaults(func=cmd_invert_local)

    p = sub.add_parser("run-example", help="full hybrid run on a built-in medium")
    p.add_argument("example", type=int, choices=[1, 2, 3, 4])
    _add_config_flags(p, skip=("example",))
    p.set_defaults(func=cmd_run_example)

    p = sub.add_parser("compare", help="hybrid versus local-only on the same data")
    _add_config_flags(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("tensor-cache", help="compute and store the interaction tensor")
    _add_config_flags(p)
    p.set_defaults(func=cmd_tensor_cache)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return args.func(args)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
