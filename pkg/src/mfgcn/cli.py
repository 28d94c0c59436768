"""Command-line experiment runner.

    mfgcn check             --config cfg.json   structural assumptions only
    mfgcn solve             --config cfg.json   gate, solve, diagnostics
    mfgcn bench             --config cfg.json   solve plus the oracle suite, graded
    mfgcn probe-uniqueness  --config cfg.json   solve from several starts and compare

Exit codes: 0 success, 2 bad config or usage, 3 assumption gate failed,
4 solver aborted, 5 a bench tolerance was missed.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import platform
import sys
import time
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, load_config
from .costs import check_all
from .diagnostics import (
    exploitability,
    oracle_deviation,
    oracle_for,
    random_perturbations,
    reduction_check_sigma_tilde_zero,
    smp_gap,
)
from .mfg import IntervalUnderflow, MfgSolution, solve_mfg, uniqueness_probe
from .paths import NonFiniteStateError

log = logging.getLogger("mfgcn")

EXIT_OK, EXIT_USAGE, EXIT_GATE, EXIT_SOLVER, EXIT_BENCH = 0, 2, 3, 4, 5
GATED = ("A1", "A2", "A3", "A4")
BENCH_TOL = 0.05


class _Artifacts:
    """Writes the run's files; every one carries the seed and config hash."""

    def __init__(self, out: Path, cfg: ExperimentConfig):
        self.out = out
        self.seed = cfg.seed
        self.hash = cfg.config_hash()
        self.written: list[str] = []
        out.mkdir(parents=True, exist_ok=True)

    def json(self, name: str, body: dict[str, Any]) -> None:
        doc = {"seed": self.seed, "config_hash": self.hash, **body}
        self._put(name, json.dumps(doc, indent=2, sort_keys=False) + "\n")

    def csv(self, name: str, header: list[str], rows) -> None:
        buf = io.StringIO()
        buf.write(f"# seed={self.seed} config_hash={self.hash}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])
        self._put(name, buf.getvalue())

    def _put(self, name: str, text: str) -> None:
        (self.out / name).write_text(text)
        self.written.append(name)


def _assumptions(cfg: ExperimentConfig, model) -> dict[str, Any]:
    reports = check_all(model.cost, cfg.diagnostics.assumption_trials, cfg.seed)
    return {k: v.to_dict() for k, v in reports.items()}


def _gate_failures(assumptions: dict[str, Any]) -> list[str]:
    return [k for k in GATED if not assumptions[k]["passed"]]


def _convergence_rows(sol: MfgSolution):
    for rec in sol.records:
        t0, t1 = rec.interval
        for i, d in enumerate(rec.distances):
            ratio = rec.ratios[i - 1] if i > 0 and i - 1 < len(rec.ratios) else ""
            inner = rec.inner_iterations[i] if i < len(rec.inner_iterations) else ""
            yield [float(t0), float(t1), rec.phase, i + 1, float(d),
                   float(ratio) if ratio != "" else "", inner, rec.converged]


def _flow_rows(sol: MfgSolution):
    mbar, m2 = sol.flow_moments()
    times = sol.grid.times
    for i in range(mbar.shape[1]):
        for k in range(mbar.shape[0]):
            yield [i, k, float(times[k]), float(mbar[k, i]), float(m2[k, i])]


def _write_solution(art: _Artifacts, sol: MfgSolution, export_paths: bool) -> None:
    art.csv("convergence.csv",
            ["interval_start", "interval_end", "phase", "iteration", "residual", "ratio",
             "inner_iterations", "interval_converged"],
            _convergence_rows(sol))
    art.json("control.json", {
        "features": list(sol.control.features),
        "times": sol.grid.times.tolist(),
        "coefficients": sol.control.coeffs.tolist(),
        "pieces": [list(p) for p in sol.pieces],
        "interfaces": [f.to_dict() for f in sol.interfaces],
    })
    art.csv("flow.csv", ["scenario", "node", "time", "mbar", "m2"], _flow_rows(sol))
    if export_paths:
        art.csv("paths.csv", ["scenario", "particle", "node", "x"], sol.paths.to_csv_rows())


def _diagnostics(cfg: ExperimentConfig, sol: MfgSolution, solver_cfg, force: bool) -> dict[str, Any]:
    d = cfg.diagnostics
    out: dict[str, Any] = {
        "solver": {"converged": sol.converged, "pieces": [list(p) for p in sol.pieces],
                   "interface_gaps": sol.interface_gaps,
                   "intervals": [r.to_dict() for r in sol.records]},
    }
    oracle = oracle_for(sol.model.cost, sol.model.horizon, sol.grid)
    if (d.oracle or force) and oracle is not None:
        out["oracle"] = oracle_deviation(sol, oracle).to_dict()
    n_smp = d.smp_perturbations if not force else max(d.smp_perturbations, 20)
    if n_smp:
        gaps = [smp_gap(sol.control, beta, sol.model, sol.paths, sol.init)
                for beta in random_perturbations(sol.control, n_smp, cfg.seed)]
        out["smp"] = {"all_certified": all(g.certified for g in gaps),
                      "min_gap_over_stderr": min(g.gap / g.stderr if g.stderr > 0 else np.inf
                                                 for g in gaps),
                      "perturbations": [g.to_dict() for g in gaps]}
    if d.exploitability or force:
        out["exploitability"] = exploitability(sol, config=solver_cfg).to_dict()
    return out


def _bench_verdicts(reports: dict[str, Any]) -> dict[str, bool]:
    v: dict[str, bool] = {}
    if "oracle" in reports:
        v["oracle_within_5pct"] = bool(reports["oracle"]["within_5pct"])
    if "smp" in reports:
        v["smp_gap_certified"] = bool(reports["smp"]["all_certified"])
    if "exploitability" in reports:
        v["exploitability_small"] = bool(reports["exploitability"]["within_tolerance"])
    if "reduction" in reports:
        v["flow_spread_within_3x"] = reports["reduction"]["ratio"] <= 3.0
    return v


def run(cfg: ExperimentConfig, verb: str, out: Path, threads: int = 1,
        override_assumptions: bool = False) -> int:
    """Execute one verb; returns the process exit status."""
    art = _Artifacts(out, cfg)
    art.json("config.json", {"config": cfg.echo()})
    model = cfg.build_model()
    disc = cfg.build_discretization()
    solver_cfg = cfg.build_solver(workers=threads)
    status, status_code = "ok", EXIT_OK
    walls: dict[str, float] = {}
    reports: dict[str, Any] = {}

    def timed(name, fn, *a, **kw):
        t = time.perf_counter()
        try:
            return fn(*a, **kw)
        finally:
            walls[name] = round(time.perf_counter() - t, 3)

    try:
        if cfg.diagnostics.assumptions or verb == "check":
            reports["assumptions"] = timed("assumptions", _assumptions, cfg, model)
            failed = _gate_failures(reports["assumptions"])
            reports["assumption_gate"] = {"failed": failed, "overridden": override_assumptions}
            if failed and (verb == "check" or not override_assumptions):
                status, status_code = "assumption_failure", EXIT_GATE
                log.error("assumptions violated: %s", ", ".join(failed))
                return status_code
        if verb == "check":
            return status_code

        if verb == "probe-uniqueness":
            rep = timed("uniqueness", uniqueness_probe, model, disc, solver_cfg, cfg.seed,
                        tuple(cfg.diagnostics.uniqueness_starts))
            reports["uniqueness"] = rep.to_dict()
            return status_code

        sol = timed("solve", solve_mfg, model, disc, solver_cfg, cfg.seed)
        _write_solution(art, sol, cfg.diagnostics.export_paths)
        reports.update(timed("diagnostics", _diagnostics, cfg, sol, solver_cfg, verb == "bench"))
        if verb == "bench" and model.sigma_tilde == 0:
            rep = reduction_check_sigma_tilde_zero(model, disc, solver_cfg, cfg.seed, solution=sol)
            reports["reduction"] = rep.to_dict()
        if cfg.diagnostics.uniqueness:
            rep = timed("uniqueness", uniqueness_probe, model, disc, solver_cfg, cfg.seed,
                        tuple(cfg.diagnostics.uniqueness_starts))
            reports["uniqueness"] = rep.to_dict()
        if verb == "bench":
            verdicts = _bench_verdicts(reports)
            reports["bench"] = verdicts
            for name, ok in verdicts.items():
                print(f"{'PASS' if ok else 'FAIL'}  {name}")
            if not all(verdicts.values()):
                status, status_code = "bench_failure", EXIT_BENCH
        return status_code
    except (IntervalUnderflow, NonFiniteStateError, FloatingPointError, np.linalg.LinAlgError) as exc:
        status, status_code = "solver_abort", EXIT_SOLVER
        reports["error"] = f"{type(exc).__name__}: {exc}"
        log.error("solver aborted: %s", exc)
        return status_code
    finally:
        art.json("reports.json", reports)
        manifest = {
            "verb": verb,
            "status": status,
            "complete": status == "ok",
            "artifacts": art.written + ["manifest.json"],
            "output": str(out),
            "threads": threads,
            "wall_seconds": walls,
            "versions": {"mfgcn": __version__, "python": platform.python_version(),
                         "numpy": np.__version__},
            "config": cfg.echo(),
        }
        art.json("manifest.json", manifest)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mfgcn", description=__doc__.split("\n\n")[0])
    p.add_argument("verb", choices=["check", "solve", "bench", "probe-uniqueness"])
    p.add_argument("--config", required=True, help="JSON experiment config")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--threads", type=int, default=1, help="worker threads across scenarios")
    p.add_argument("--out", help="output directory (default: the config's `output`)")
    p.add_argument("--override-assumptions", action="store_true",
                   help="solve even when an assumption check fails")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.model_copy(update={"seed": args.seed})
            ExperimentConfig.model_validate(cfg.model_dump())
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = Path(args.out if args.out else cfg.output)
    return run(cfg, args.verb, out, args.threads, args.override_assumptions)


if __name__ == "__main__":
    sys.exit(main())
