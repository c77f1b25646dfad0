"""Command-line entry point: run, validate and demo scenarios."""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .scenario import RunOutcome, ScenarioError, ScenarioSpec, parse_scenario, run, validate_scenario

log = logging.getLogger("charge_komlos")

DEMOS = {
    "singular": {
        "name": "singular",
        "algebra": {"ground": 16},
        "generator": {"kind": "singular_family"},
        "pipeline": "extract_positive",
        "cfg": {"K": 40, "horizon": 512, "window": 64, "tau": 1e-6},
    },
    "empirical": {
        "name": "empirical",
        "algebra": {"ground": 8},
        "generator": {"kind": "empirical", "params": {"probs": [0.3, 0.2, 0.15, 0.1, 0.1, 0.05, 0.05, 0.05]}},
        "pipeline": "extract_positive",
        # empirical laws drift at rate N^(-1/2); 0.1 is about twice the expected L1 drift at N=512
        "cfg": {"K": 40, "horizon": 512, "seed": 7, "mode": "blocks", "block_size": 8,
                "tau_conv": 0.1, "tail_tol": 0.1},
    },
    "posterior": {
        "name": "posterior",
        "algebra": {"product": [2, 2]},
        "generator": {"kind": "posterior",
                      "params": {"prior1": "uniform", "prior2": "linear", "p_true": 0.7}},
        "pipeline": "orthogonality",
        "cfg": {"horizon": 200, "seed": 42, "window": 50, "tau": 0.05},
    },
    "slln": {
        "name": "slln",
        "algebra": {"ground": 64},
        "generator": {"kind": "slln_functions", "params": {"values": [-1.0, 1.0]}},
        "pipeline": "slln",
        "cfg": {"horizon": 512, "seed": 42},
    },
}


def _cell(v) -> str:
    if isinstance(v, float):
        return format(v, ".17g")
    if v is None:
        return "nan"
    return str(v)


def write_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        if not rows:
            return
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(rows[0]))
        for r in rows:
            w.writerow([_cell(v) for v in r.values()])


def write_outputs(spec: ScenarioSpec, outcome: RunOutcome, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    text = json.dumps(outcome.report, indent=2, sort_keys=True, allow_nan=False)
    (out / spec.output("report")).write_text(text + "\n")
    write_csv(out / spec.output("certificates"), outcome.certificates)
    write_csv(out / spec.output("ladder"), outcome.ladder)


def run_one(spec: ScenarioSpec, out: Path, strict: bool) -> tuple[str, bool, str | None]:
    t0 = time.perf_counter()
    try:
        outcome = run(spec, strict=strict)
    except ScenarioError as e:
        return spec.name, False, str(e)
    write_outputs(spec, outcome, out)
    log.info("%s: %s in %.3fs", spec.name, "pass" if outcome.passed else "FAIL", time.perf_counter() - t0)
    for f in outcome.report["failures"]:
        log.warning("%s: certificate %s = %r exceeds %r", spec.name, f["name"], f["value"], f["bound"])
    if strict and outcome.report["degenerate"]:
        log.warning("%s: degenerate regime flagged", spec.name)
    return spec.name, outcome.passed, None


def _run_path(args: tuple[str, str, bool]):
    path, out, strict = args
    return run_one(parse_scenario(path), Path(out), strict)


def cmd_run(ns) -> int:
    try:
        specs = [parse_scenario(p) for p in ns.scenarios]
    except ScenarioError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    out = Path(ns.out)
    dirs = [out] if len(specs) == 1 else [out / Path(p).stem for p in ns.scenarios]
    jobs = [(str(p), str(d), ns.strict) for p, d in zip(ns.scenarios, dirs)]
    if ns.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=ns.jobs) as ex:
            results = list(ex.map(_run_path, jobs))
    else:
        results = [run_one(s, d, ns.strict) for s, d in zip(specs, dirs)]
    status = 0
    for name, ok, err in results:
        if err:
            print(f"error: {err}", file=sys.stderr)
            status = max(status, 1)
        elif not ok:
            status = max(status, 1)
        print(f"{name}: {'pass' if ok else 'FAIL'}")
    return status


def cmd_validate(ns) -> int:
    status = 0
    for p in ns.scenarios:
        try:
            parse_scenario(p)
            print(f"ok: {p}")
        except ScenarioError as e:
            print(f"error: {e}", file=sys.stderr)
            status = 2
    return status


def cmd_demo(ns) -> int:
    spec = validate_scenario(copy.deepcopy(DEMOS[ns.name]), f"demo:{ns.name}")
    name, ok, err = run_one(spec, Path(ns.out), ns.strict)
    if err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    print(f"{name}: {'pass' if ok else 'FAIL'}")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="charge-komlos", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one or more scenario files")
    r.add_argument("scenarios", nargs="+")
    r.add_argument("--out", required=True)
    r.add_argument("--strict", action="store_true", help="also fail on degenerate regimes")
    r.add_argument("--jobs", type=int, default=1)
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("validate", help="check scenario files against the schema")
    v.add_argument("scenarios", nargs="+")
    v.set_defaults(func=cmd_validate)

    d = sub.add_parser("demo", help="run a built-in scenario")
    d.add_argument("name", choices=sorted(DEMOS))
    d.add_argument("--out", required=True)
    d.add_argument("--strict", action="store_true")
    d.set_defaults(func=cmd_demo)
    return ap


def main(argv: list[str] | None = None) -> int:
    ns = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    return ns.func(ns)


if __name__ == "__main__":
    sys.exit(main())
