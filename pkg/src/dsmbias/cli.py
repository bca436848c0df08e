"""Command-line entry point: ``dsmbias verify | run | report``.

Exit codes: 0 success, 1 failed assertion or integrity check, 2 usage error.

Config files are INI text. ``[run]`` holds ``seed``, ``jobs``, ``out``,
``family`` and ``inject_fault``; ``[tolerance]`` holds ``se_multiplier``,
``abs_floor`` and ``closed_tol``; ``[e1]`` .. ``[e6]`` override scenario
options (values are JSON literals, e.g. ``schedule = [0.5, 1.0]``).
Command-line flags win over the file.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import datetime as _dt
import hashlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from dsmbias import __version__, faults
from dsmbias.errors import DsmBiasError, InvalidArgument
from dsmbias.experiments import E2_FAMILIES, SCENARIOS, ExperimentConfig, ExperimentReport, _plain, run

OUT_ENV = "DSMBIAS_OUT"
MANIFEST = "manifest.json"
RUN_DEFAULTS = {"seed": 0, "jobs": 1, "out": None, "family": None, "inject_fault": None}
TOLERANCE_DEFAULTS = {"se_multiplier": 3.0, "abs_floor": 1e-8, "closed_tol": 1e-10}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- config


def _literal(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path) -> dict:
    """Parse an INI config file into ``{"run": {...}, "tolerance": {...}, "e1": {...}, ...}``."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as err:
        raise UsageError(f"cannot read config {path}: {err}") from err
    allowed = {"run", "tolerance", *SCENARIOS}
    out = {}
    for section in parser.sections():
        if section not in allowed:
            raise UsageError(f"unknown config section [{section}]; expected one of {', '.join(sorted(allowed))}")
        out[section] = {k: _literal(v) for k, v in parser.items(section)}
    for key in out.get("run", {}):
        if key not in RUN_DEFAULTS:
            raise UsageError(f"unknown key {key!r} in [run]")
    for key in out.get("tolerance", {}):
        if key not in TOLERANCE_DEFAULTS:
            raise UsageError(f"unknown key {key!r} in [tolerance]")
    return out


def resolve(args) -> dict:
    """Merge defaults, config file and flags into one fully specified config."""
    file_cfg = load_config(args.config) if getattr(args, "config", None) else {}
    run_cfg = {**RUN_DEFAULTS, **file_cfg.get("run", {})}
    for key in RUN_DEFAULTS:
        flag = getattr(args, key, None)
        if flag is not None:
            run_cfg[key] = flag
    if run_cfg["out"] is None:
        run_cfg["out"] = os.environ.get(OUT_ENV, "runs")
    try:
        run_cfg["seed"] = int(run_cfg["seed"])
        run_cfg["jobs"] = int(run_cfg["jobs"])
    except (TypeError, ValueError) as err:
        raise UsageError(f"seed and jobs must be integers: {err}") from err
    if run_cfg["jobs"] < 1:
        raise UsageError("--jobs must be >= 1")
    fault = run_cfg["inject_fault"]
    if fault is not None and fault not in faults.KNOWN:
        raise UsageError(f"unknown fault {fault!r}; known: {', '.join(faults.KNOWN)}")
    if run_cfg["family"] is not None and run_cfg["family"] not in E2_FAMILIES:
        raise UsageError(f"unknown family {run_cfg['family']!r}; known: {', '.join(E2_FAMILIES)}")
    tol = {**TOLERANCE_DEFAULTS, **file_cfg.get("tolerance", {})}
    scenarios = {}
    for sc in SCENARIOS:
        opts = dict(file_cfg.get(sc, {}))
        if sc == "e2" and run_cfg["family"]:
            opts["families"] = [run_cfg["family"]]
        try:
            scenarios[sc] = ExperimentConfig(sc, run_cfg["seed"], opts, **{k: float(v) for k, v in tol.items()})
        except (InvalidArgument, TypeError, ValueError) as err:
            raise UsageError(str(err)) from err
    return {"run": run_cfg, "tolerance": tol, "scenarios": scenarios}


# ---------------------------------------------------------------- manifest


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def write_manifest(run_dir: Path, command: str, resolved: dict, started: str, verdicts: dict) -> Path:
    files = sorted(p for p in run_dir.rglob("*") if p.is_file() and p.name not in (MANIFEST, "merged.csv"))
    manifest = {
        "tool": "dsmbias",
        "version": __version__,
        "command": command,
        "seed": resolved["run"]["seed"],
        "started": started,
        "finished": _now(),
        "config": {
            "run": resolved["run"],
            "tolerance": resolved["tolerance"],
            "scenarios": {k: v.to_dict() for k, v in resolved["scenarios"].items()},
        },
        "verdicts": verdicts,
        "files": [
            {"path": p.relative_to(run_dir).as_posix(), "sha256": sha256(p), "bytes": p.stat().st_size} for p in files
        ],
    }
    path = run_dir / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def read_manifest(run_dir: Path) -> dict:
    """Load a manifest and verify every listed digest; raises ``DsmBiasError`` naming the problem."""
    path = run_dir / MANIFEST
    if not run_dir.is_dir():
        raise DsmBiasError(f"run directory {run_dir} does not exist")
    if not path.is_file():
        raise DsmBiasError(f"no {MANIFEST} in {run_dir}")
    try:
        manifest = json.loads(path.read_text())
        files = manifest["files"]
    except (json.JSONDecodeError, KeyError, TypeError) as err:
        raise DsmBiasError(f"corrupt manifest {path}: {err}") from err
    for entry in files:
        f = run_dir / entry["path"]
        if not f.is_file():
            raise DsmBiasError(f"listed file missing: {entry['path']}")
        if sha256(f) != entry["sha256"]:
            raise DsmBiasError(f"digest mismatch: {entry['path']}")
    return manifest


# ---------------------------------------------------------------- output


def _table(rows, header) -> str:
    rows = [header] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _status(passed) -> str:
    return {True: "PASS", False: "FAIL", None: "SKIP"}[passed]


def _fmt(v) -> str:
    return f"{v:.4g}" if isinstance(v, float) else str(v)


def _check_rows(checks, prefix=""):
    return [(prefix + c.name, _status(c.passed), _fmt(c.value), _fmt(c.bound)) for c in checks]


# ---------------------------------------------------------------- commands


def cmd_verify(args) -> int:
    from dsmbias.verification import verify

    resolved = resolve(args)
    seed = resolved["run"]["seed"]
    fault = resolved["run"]["inject_fault"]
    started = _now()
    checks, verdicts = verify(seed, (fault,) if fault else (), resolved["scenarios"])
    print(_table(_check_rows(checks), ("check", "status", "value", "bound")))
    failed = next((c for c in checks if c.passed is False), None)
    run_dir = Path(resolved["run"]["out"]) / f"verify-seed{seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    report = {
        "tool": "dsmbias",
        "version": __version__,
        "seed": seed,
        "faults": [fault] if fault else [],
        "passed": failed is None,
        "first_failure": failed.name if failed else None,
        "verdicts": verdicts,
        "checks": [c.__dict__ for c in checks],
    }
    (run_dir / "report.json").write_text(json.dumps(_plain(report), indent=2, sort_keys=True))
    write_manifest(run_dir, "verify", resolved, started, {"verify": "pass" if failed is None else "fail"})
    n_ok = sum(c.passed is True for c in checks)
    print(f"\n{n_ok}/{len(checks)} checks passed; report in {run_dir}")
    if failed:
        print(f"FAILED: {failed.name} (value {_fmt(failed.value)}, bound {_fmt(failed.bound)})", file=sys.stderr)
        return 1
    return 0


def _run_one(config: ExperimentConfig, out_dir: str, fault):
    return run(config, out_dir, (fault,) if fault else ()).to_dict()


def cmd_run(args) -> int:
    resolved = resolve(args)
    seed, jobs = resolved["run"]["seed"], resolved["run"]["jobs"]
    fault = resolved["run"]["inject_fault"]
    chosen = list(SCENARIOS) if args.scenario == "all" else [args.scenario]
    run_dir = Path(resolved["run"]["out"]) / f"{args.scenario}-seed{seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    started = _now()
    jobs_in = [(resolved["scenarios"][sc], str(run_dir / sc), fault) for sc in chosen]
    if jobs > 1 and len(jobs_in) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            dicts = list(pool.map(_run_one, *zip(*jobs_in)))
    else:
        dicts = [_run_one(*j) for j in jobs_in]
    reports = [ExperimentReport.from_dict(d) for d in dicts]
    rows = []
    for rep in reports:
        failed = rep.first_failure()
        rows.append((rep.scenario, rep.verdict.upper(), f"{rep.duration:.1f}s", failed.name if failed else ""))
    print(_table(rows, ("scenario", "verdict", "time", "first failure")))
    resolved["scenarios"] = {sc: resolved["scenarios"][sc] for sc in chosen}
    write_manifest(run_dir, f"run {args.scenario}", resolved, started, {r.scenario: r.verdict for r in reports})
    print(f"\nrun directory: {run_dir}")
    return 0 if all(r.passed for r in reports) else 1


def _merge_csvs(run_dir: Path, manifest: dict, target: Path) -> int:
    n = 0
    with target.open("w", newline="") as out:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(("scenario", "file", "row", "column", "value"))
        for entry in manifest["files"]:
            rel = entry["path"]
            if not rel.endswith(".csv") or rel.endswith("checks.csv"):
                continue
            scenario = rel.split("/")[0] if "/" in rel else manifest["command"]
            with (run_dir / rel).open(newline="") as fh:
                for i, rec in enumerate(csv.DictReader(fh)):
                    for col, val in rec.items():
                        w.writerow((scenario, rel.split("/")[-1], i, col, val))
                        n += 1
    return n


def _trace_numbers(run_dir: Path, manifest: dict) -> list[tuple]:
    from dsmbias.optimization import TrainTrace

    rows = []
    for entry in manifest["files"]:
        rel = entry["path"]
        name = rel.split("/")[-1]
        if not (name.startswith("trace_") and name.endswith(".csv")):
            continue
        trace = TrainTrace.from_csv(run_dir / rel)
        if len(trace) == 0:
            continue
        width = max(1, min(50, len(trace) // 2))
        first, _ = trace.window_mean("metric", True, width)
        last, _ = trace.window_mean("metric", False, width)
        rows.append((rel, len(trace), f"{first:.4g}", f"{last:.4g}"))
    return rows


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    try:
        manifest = read_manifest(run_dir)
    except DsmBiasError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    summary, detail = [], []
    for entry in manifest["files"]:
        rel = entry["path"]
        if not rel.endswith("report.json"):
            continue
        try:
            data = json.loads((run_dir / rel).read_text())
        except json.JSONDecodeError as err:
            print(f"error: corrupt report {rel}: {err}", file=sys.stderr)
            return 1
        if "scenario" in data:
            rep = ExperimentReport.from_dict(data)
            summary.append((rep.scenario, rep.verdict.upper(), sum(c.passed is True for c in rep.checks), len(rep.checks)))
            detail += _check_rows(rep.checks, f"{rep.scenario}: ")
        else:
            checks = data["checks"]
            ok = sum(c["passed"] is True for c in checks)
            summary.append(("verify", "PASS" if data["passed"] else "FAIL", ok, len(checks)))
            detail += [(c["name"], _status(c["passed"]), _fmt(c["value"]), _fmt(c["bound"])) for c in checks]
    if not summary:
        print(f"error: no reports listed in {run_dir / MANIFEST}", file=sys.stderr)
        return 1
    print(_table(summary, ("scenario", "verdict", "checks passed", "checks")))
    print()
    print(_table(detail, ("check", "status", "value", "bound")))
    traces = _trace_numbers(run_dir, manifest)
    if traces:
        print()
        print(_table(traces, ("C2 metric trajectory", "steps", "first-window mean", "last-window mean")))
    target = Path(args.merged) if args.merged else run_dir / "merged.csv"
    n = _merge_csvs(run_dir, manifest, target)
    print(f"\nmerged CSV ({n} values): {target}")
    return 0 if all(s[1] == "PASS" for s in summary) else 1


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="base seed (default 0)")
    common.add_argument("--out", help=f"output root (default ${OUT_ENV} or ./runs)")
    common.add_argument("--config", help="INI config file; flags override it")
    common.add_argument("--inject-fault", dest="inject_fault", help=f"deliberate fault: {', '.join(faults.KNOWN)}")

    parser = argparse.ArgumentParser(prog="dsmbias", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"dsmbias {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", parents=[common], help="oracle cross-checks, identities and negative controls")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("run", parents=[common], help="run one scenario or all of them")
    p.add_argument("scenario", choices=[*SCENARIOS, "all"])
    p.add_argument("--jobs", type=int, help="scenarios run concurrently (default 1)")
    p.add_argument("--family", help=f"E2 family only: {', '.join(E2_FAMILIES)}")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="summarise a run directory and merge its CSVs")
    p.add_argument("run_dir")
    p.add_argument("--merged", help="merged CSV path (default RUN_DIR/merged.csv)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
