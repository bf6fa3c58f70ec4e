"""Command-line entry point: ``dycelab train|gradcheck|ablate|report``.

Exit codes: 0 success, 1 gradient check failure, 2 configuration error,
3 numeric failure during a run.
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import yaml

from . import experiment, oracle
from .config import ConfigError, load_config
from .numkern import ContractError
from .trainer import NumericError

EXIT_OK, EXIT_GRADCHECK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

ABLATION_COLUMNS = ["name", "seed", "overrides", "miou", "tail_miou", "loss_start", "loss_end"]
REPORT_COLUMNS = ["run", "seed", "mode", "steps", "miou", "tail_miou", "loss_start", "loss_end"]

# component toggles accepted in sweep files
TOGGLES = {
    "ct": lambda on: {"train.lambda_ct": 1.0 if on else 0.0},
    "dyce": lambda on: {"train.mode": "DyCE" if on else "CE"},
    "vlp": lambda on: {"model.use_language": bool(on)},
    "dlg": lambda on: {"model.fusion": "dense" if on else "generic"},
}


def _fmt(v):
    return f"{v:.6f}" if isinstance(v, float) else v


def cmd_train(args):
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_overrides({"seed": args.seed})
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out or f"runs/{Path(args.config).stem}-seed{cfg.seed}")
    out.mkdir(parents=True, exist_ok=True)
    try:
        with open(out / "run.jsonl", "w") as log:
            result = experiment.run(cfg, log=log)
    except (NumericError, ContractError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    experiment.write_artifacts(result, out)
    print(f"{out}: mIoU {result.miou:.4f}  tail mIoU {result.tail_miou:.4f}")
    return EXIT_OK


def cmd_gradcheck(args):
    report = oracle.run_gradcheck_suite(args.instances, seed=args.seed, inject=args.inject)
    failed = []
    for r in report:
        status = "ok" if r["passed"] else "FAIL"
        print(
            f"{status:4s} {r['component']:<14s} worst rel err {r['worst_rel_error']:.3e} "
            f"(tol {r['tolerance']:.0e}, {r['instances']} instances, {r['seconds']:.2f}s)"
        )
        if not r["passed"]:
            failed.append(r["component"])
    if failed:
        print("gradient check failed: " + ", ".join(failed), file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


def expand_sweep(sweep):
    """List of ``(name, overrides)`` from a sweep document.

    ``grid`` maps dotted config keys (or the toggles ct/dyce/vlp/dlg) to value
    lists and expands to their Cartesian product. ``runs`` is a list of
    explicit override mappings, each optionally carrying a ``name``.
    """
    sweep = sweep or {}
    unknown = set(sweep) - {"grid", "runs", "seeds"}
    if unknown:
        raise ConfigError(f"sweep.{sorted(unknown)[0]}: unknown field")
    entries = []
    grid = sweep.get("grid") or {}
    if grid:
        keys = list(grid)
        for combo in itertools.product(*(grid[k] for k in keys)):
            ov = dict(zip(keys, combo))
            entries.append((",".join(f"{k}={v}" for k, v in ov.items()), ov))
    for i, run in enumerate(sweep.get("runs") or []):
        run = dict(run)
        name = str(run.pop("name", f"run{i}"))
        entries.append((name, run))
    return [(name, _expand_toggles(ov)) for name, ov in entries]


def _expand_toggles(ov):
    out = {}
    for k, v in ov.items():
        if k in TOGGLES:
            out.update(TOGGLES[k](v))
        else:
            out[k] = v
    return out


def _ablation_row(task):
    cfg, name, ov = task
    result = experiment.run(cfg)
    s = result.summary()
    return [name, cfg.seed, json.dumps(ov, sort_keys=True)] + [_fmt(s[k]) for k in ABLATION_COLUMNS[3:]]


def run_ablation(base, sweep):
    try:
        entries = expand_sweep(sweep)
        seeds = (sweep or {}).get("seeds") or [base.seed]
        tasks = [(base.with_overrides(dict(ov, seed=s)), name, ov) for name, ov in entries for s in seeds]
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"sweep: {exc}") from exc
    workers = max(1, int(os.environ.get("DYCE_THREADS", "1")))
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_ablation_row, tasks))
    else:
        rows = [_ablation_row(t) for t in tasks]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_COLUMNS)
    w.writerows(rows)
    return buf.getvalue()


def cmd_ablate(args):
    try:
        base = load_config(args.config)
        with open(args.sweep) as fh:
            sweep = yaml.safe_load(fh)
        text = run_ablation(base, sweep)
    except (ConfigError, OSError, yaml.YAMLError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, ContractError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(text)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_report(args):
    root = Path(args.runs)
    rows = []
    for path in sorted(root.glob("**/summary.json")):
        s = json.loads(path.read_text())
        run = str(path.parent.relative_to(root))
        rows.append([run] + [_fmt(s.get(k, "")) for k in REPORT_COLUMNS[1:]])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    w.writerows(rows)
    Path(args.out).write_text(buf.getvalue())
    print(f"{len(rows)} runs -> {args.out}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="dycelab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run one SSDA experiment")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", help="output directory (default runs/<config>-seed<N>)")
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("gradcheck", help="finite-difference check of every analytic gradient")
    g.add_argument("--instances", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--inject", choices=sorted(oracle.GRADCHECKS), help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("ablate", help="sweep configurations, one CSV row per run")
    a.add_argument("--config", required=True)
    a.add_argument("--sweep", required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)

    r = sub.add_parser("report", help="collect run summaries into one CSV")
    r.add_argument("--runs", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
