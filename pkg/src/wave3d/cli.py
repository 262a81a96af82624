"""Command-line entry point: ``wave3d <subcommand> [options]``.

Exit codes: 0 run completed (checks may fail unless --strict), 1 other
package error, 2 invalid configuration, 3 numerical blowup, 4 a check
failed under --strict.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .errors import ConfigurationError, NumericalBlowupError, Wave3dError
from .experiments import SUBCOMMANDS
from .export import write_trajectory

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_BLOWUP, EXIT_CHECK = 0, 1, 2, 3, 4


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return "%.17g" % float(v)
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if v is None:
        return ""
    return str(v)


def csv_text(rows) -> str:
    """Deterministic CSV body: header from the first row, full float precision."""
    rows = list(rows)
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    keys = list(rows[0])
    w.writerow(keys)
    for r in rows:
        w.writerow([_fmt(r.get(k)) for k in keys])
    return buf.getvalue()


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.bool_, bool)):
        return bool(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.floating):
        return float(v)
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wave3d", description="Stochastic wave equation experiments on a 3-torus.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in SUBCOMMANDS.items():
        p = sub.add_parser(name, help=(fn.__doc__ or name).strip().splitlines()[0])
        p.add_argument("--config", type=Path, help="JSON configuration (defaults are embedded)")
        p.add_argument("--seed", type=int, help="master seed override")
        p.add_argument("--workers", type=int, help="worker processes (fallback: WAVE3D_WORKERS)")
        p.add_argument("--out", type=Path, help="output directory override")
        p.add_argument("--print-config", action="store_true", help="print the effective configuration and exit")
        p.add_argument("--strict", action="store_true", help="exit with status 4 when a check fails")
    return parser


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig.from_dict()
    over = {}
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise ConfigurationError("seed must be an unsigned 64-bit integer")
        over["noise"] = {"seed": args.seed}
    workers = args.workers
    if workers is None and os.environ.get("WAVE3D_WORKERS"):
        try:
            workers = int(os.environ["WAVE3D_WORKERS"])
        except ValueError as exc:
            raise ConfigurationError("WAVE3D_WORKERS must be an integer") from exc
    if workers is not None:
        if workers < 1:
            raise ConfigurationError("workers must be at least 1")
        over["workers"] = workers
    if args.out is not None:
        over["output"] = str(args.out)
    return cfg.with_overrides(**over) if over else cfg


def run_subcommand(name, cfg: ExperimentConfig, out_dir=None, stream=None):
    """Run one experiment, write its artifacts and return (result, manifest)."""
    stream = stream or sys.stdout
    out = Path(out_dir or cfg["output"])
    out.mkdir(parents=True, exist_ok=True)
    workers = int(cfg["workers"])
    start = time.perf_counter()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            result = SUBCOMMANDS[name](cfg, pool.map)
    else:
        result = SUBCOMMANDS[name](cfg, map)
    elapsed = time.perf_counter() - start

    tag = f"seed{cfg['noise']['seed']}_beta{cfg['noise']['beta']:g}"
    files = []
    for table, rows in result.tables.items():
        path = out / f"{name}_{table}_{tag}.csv"
        path.write_text(csv_text(rows))
        files.append(path.name)
    for kind, obj in result.artifacts:
        if kind == "trajectory":
            path = out / f"{name}_trajectory_{tag}.w3d"
            write_trajectory(obj, path)
            files += [path.name, path.name + ".json"]
    report = {
        "subcommand": name,
        "fingerprint": cfg.fingerprint,
        "passed": all(c.passed for c in result.checks),
        "checks": [{"name": c.name, "passed": c.passed, "value": c.value, "target": c.target} for c in result.checks],
        "summary": result.summary,
    }
    (out / "report.json").write_text(json.dumps(_jsonable(report), indent=2, sort_keys=True))
    manifest = {
        "subcommand": name,
        "fingerprint": cfg.fingerprint,
        "config": cfg.data,
        "seeds": [int(s) for s in result.seeds],
        "files": sorted(files) + ["report.json"],
        "timings": {"total_seconds": elapsed, "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z")},
    }
    (out / "manifest.json").write_text(json.dumps(_jsonable(manifest), indent=2, sort_keys=True))
    for c in result.checks:
        print(f"[{'PASS' if c.passed else 'FAIL'}] {c.name}: {_jsonable(c.value)} (target {c.target})", file=stream)
    return result, manifest


def _error(exc: Wave3dError, code):
    print(json.dumps(exc.record(), sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        if args.print_config:
            print(cfg.dumps())
            return EXIT_OK
        result, _ = run_subcommand(args.command, cfg)
    except ConfigurationError as exc:
        return _error(exc, EXIT_CONFIG)
    except NumericalBlowupError as exc:
        return _error(exc, EXIT_BLOWUP)
    except Wave3dError as exc:
        return _error(exc, EXIT_ERROR)
    if args.strict and not all(c.passed for c in result.checks):
        return EXIT_CHECK
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
