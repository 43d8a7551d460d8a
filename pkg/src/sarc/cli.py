"""Command-line surface: every operation behind one executable, files out.

Exit codes are uniform across subcommands: 0 for success, 1 when the
command itself succeeded but found something (lint findings, audit
discrepancies, a failed statistical gate), 2 for unusable input (missing
files, parse failures, schema mismatches, bad flags).

Report-style commands write their delimited artifacts and render a figure
next to each one; re-running with identical flags and seeds reproduces
every output byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import random
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import yaml

from .audit import SchemaMismatch, check_correspondence, report_to_json_dict
from .bench import (
    PAPER_SWEEP_GRID,
    ProcurementConfig,
    RegimeKind,
    counterexample_demo,
    residual_sweep,
    run_benchmark,
    sensitivity_curves,
    tradeoff_check,
    write_benchmark_artifacts,
    write_curves_artifacts,
    write_sweep_artifacts,
    CostModel,
)
from .engine import FaultModel, write_trace_jsonl
from .escalation import QUEUE_CSV_COLUMNS, erlang_c
from .multiagent import load_workflow, tree_from_json_dict, write_trace_tree
from .scenario import ScenarioError, parse_scenario, run_scenario
from .spec_model import SpecParseError, parse_spec, validate_spec

__all__ = ["CommandResult", "cmd_validate", "cmd_run", "cmd_audit",
           "cmd_bench", "cmd_sweep", "cmd_queue", "cmd_demo", "cmd_econ",
           "build_parser", "main"]


@dataclass
class CommandResult:
    exit_code: int  # 0 success / 1 findings-or-discrepancies / 2 usage-or-io
    artifacts_written: list = field(default_factory=list)


def _fail(message: str) -> CommandResult:
    print(f"error: {message}", file=sys.stderr)
    return CommandResult(exit_code=2)


def _read(path: str) -> str:
    return Path(path).read_text(encoding="utf-8")


def _load_spec(spec_path: str):
    return parse_spec(_read(spec_path))


def cmd_validate(spec_path: str) -> CommandResult:
    """Parse the specification and print lint findings, one per line."""
    try:
        spec = _load_spec(spec_path)
    except (OSError, SpecParseError) as exc:
        return _fail(str(exc))
    findings = validate_spec(spec, {})
    for finding in findings:
        print(finding)
    print(f"{spec.agent_name}: {len(spec.constraints)} constraints, "
          f"{len(findings)} findings")
    return CommandResult(exit_code=1 if findings else 0)


def cmd_run(spec_path: str, scenario_path: str, seed: int = 0,
            faults: Optional[str] = None,
            out: str = "trace.jsonl") -> CommandResult:
    """Replay a scenario (or a multi-agent workflow) and write its trace."""
    try:
        spec_text = _read(spec_path)
        doc_text = _read(scenario_path)
    except OSError as exc:
        return _fail(str(exc))
    eps_pred = eps_exec = 0.0
    if faults:
        try:
            eps_pred, eps_exec = (float(p) for p in faults.split(","))
        except ValueError:
            return _fail("--faults takes eps_pred,eps_exec")

    try:
        doc = yaml.safe_load(doc_text)
    except yaml.YAMLError as exc:
        return _fail(f"scenario document is not valid YAML: {exc}")

    fault_model = (FaultModel(eps_pred, eps_exec,
                              rng=random.Random(f"faults-{seed}"))
                   if eps_pred or eps_exec else None)
    out_path = Path(out)
    if isinstance(doc, Mapping) and "workflow" in doc:
        try:
            bundle = load_workflow(doc_text)
        except SpecParseError as exc:
            return _fail(str(exc))
        tree = bundle.run(faults=fault_model)
        with out_path.open("w", encoding="utf-8") as fp:
            write_trace_tree(tree, fp)
        leaves = sum(1 for _ in _iter_nodes(tree))
        print(f"workflow {bundle.name}: outcome={tree.outcome}, "
              f"{leaves} dispatch nodes -> {out_path}")
        return CommandResult(exit_code=0, artifacts_written=[out_path])

    try:
        spec = parse_spec(spec_text)
        scenario = parse_scenario(doc_text)
    except (SpecParseError, ScenarioError) as exc:
        return _fail(str(exc))
    result = run_scenario(spec, scenario, seed=seed,
                          eps_pred=eps_pred, eps_exec=eps_exec)
    with out_path.open("w", encoding="utf-8") as fp:
        write_trace_jsonl(result.records, fp)
    stages = ",".join(r.stage for r in result.records)
    events = sum(len(r.evaluated) for r in result.records)
    print(f"scenario {scenario.name}: outcome={result.outcome}, "
          f"stages=[{stages}], {events} events -> {out_path}")
    return CommandResult(exit_code=0, artifacts_written=[out_path])


def _iter_nodes(tree):
    yield tree
    for child in tree.children:
        yield from _iter_nodes(child)


def cmd_audit(spec_path: str, trace_path: str) -> CommandResult:
    """Check a written trace against its specification; report as JSON."""
    try:
        spec = _load_spec(spec_path)
        text = _read(trace_path)
    except (OSError, SpecParseError) as exc:
        return _fail(str(exc))

    try:
        # A workflow tree is one JSON document keyed by "sub_task"; anything
        # else is treated as one record per line.
        document = None
        try:
            document = json.loads(text)
        except json.JSONDecodeError:
            pass
        if isinstance(document, dict) and "sub_task" in document:
            trace = tree_from_json_dict(document)
        else:
            trace = [json.loads(line)
                     for line in text.splitlines() if line.strip()]
            if not trace:
                return _fail(f"{trace_path} holds no records")
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        return _fail(f"unreadable trace document: {exc!r}")

    try:
        report = check_correspondence(spec, trace)
    except SchemaMismatch as exc:
        return _fail(str(exc))
    print(json.dumps(report_to_json_dict(report), indent=2, sort_keys=True))
    return CommandResult(exit_code=0 if report.holds else 1)


def _parse_regimes(value: str):
    if value == "all":
        return None
    try:
        return tuple(RegimeKind(name) for name in value.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"regimes must be 'all' or a comma list of "
            f"{','.join(r.value for r in RegimeKind)}")


def cmd_bench(seeds: int = 50, regimes=None, out: str = ".") -> CommandResult:
    """The five-regime comparison; summary JSON, per-seed CSV, and a figure."""
    from .figures import save_benchmark_figure

    config = ProcurementConfig(seeds=seeds)
    result = run_benchmark(config, regimes=regimes)
    out_dir = Path(out)
    artifacts = write_benchmark_artifacts(result, out_dir)
    artifacts.append(save_benchmark_figure(result, out_dir / "bench_summary.png"))

    for regime, per_metric in result.summary.items():
        cells = "  ".join(
            f"{name}={per_metric[name].mean:.1f}±{per_metric[name].ci95_halfwidth:.1f}"
            for name in ("hard_executed", "soft_overages",
                         "suppliers_no_review", "escalations"))
        print(f"{regime.value:15s} {cells}")
    gate_ok = True
    if result.audit_reports:
        gate_ok = result.audits_clean and bool(result.tamper_detected)
        print(f"audit: {sum(r.holds for r in result.audit_reports.values())}"
              f"/{len(result.audit_reports)} traces hold, "
              f"tampered copy {'caught' if result.tamper_detected else 'MISSED'}")
    for path in artifacts:
        print(f"wrote {path}")
    return CommandResult(exit_code=0 if gate_ok else 1,
                         artifacts_written=artifacts)


def _parse_grid(value: str):
    if value == "paper":
        return PAPER_SWEEP_GRID
    try:
        cells = []
        for pair in value.split(","):
            ep, ee = pair.split(":")
            cells.append((float(ep), float(ee)))
        return tuple(cells)
    except ValueError:
        raise argparse.ArgumentTypeError(
            "grid must be 'paper' or eps_pred:eps_exec pairs, comma separated")


def cmd_sweep(grid=PAPER_SWEEP_GRID, seeds: int = 50,
              out: str = ".") -> CommandResult:
    """Residual-noise sweep with the linear-scaling check."""
    from .figures import save_sweep_figure

    config = ProcurementConfig(seeds=seeds)
    result = residual_sweep(config, grid=grid)
    out_dir = Path(out)
    artifacts = write_sweep_artifacts(result, out_dir)
    artifacts.append(save_sweep_figure(result, out_dir / "sweep.png"))

    for cell in result.cells:
        stats = cell.hard_executed_stats
        print(f"({cell.eps_pred:.2f},{cell.eps_exec:.2f}) "
              f"{stats.mean:.2f}±{stats.ci95_halfwidth:.2f}")
    print(f"slope={result.slope:.2f} opportunities={result.opportunity_rate:.2f} "
          f"intercept={result.intercept:.3f}±{result.intercept_ci95_halfwidth:.3f} "
          f"scaling={'ok' if result.scaling_ok else 'VIOLATED'}")
    for path in artifacts:
        print(f"wrote {path}")
    return CommandResult(exit_code=0 if result.scaling_ok else 1,
                         artifacts_written=artifacts)


def _parse_floats(value: str):
    try:
        return tuple(float(v) for v in value.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("expected a comma list of numbers")


def cmd_queue(c: int, mu: float, lambda_grid: Sequence[float],
              tau: float, out: str = ".") -> CommandResult:
    """Erlang-C analytics over an arrival-rate grid; CSV plus figure."""
    from .figures import save_queue_figure

    rows = [erlang_c(c, lam, mu, tau_rev_s=tau) for lam in lambda_grid]
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "queue.csv"
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(QUEUE_CSV_COLUMNS)
    for a in rows:
        writer.writerow((a.server_count, a.lambda_e, a.mu, a.rho,
                         a.p_wait, a.w_q, a.admissible))
    csv_path.write_text(buf.getvalue(), encoding="utf-8")
    figure_rows = [{"rho": a.rho, "c": a.server_count, "w_q_s": a.w_q,
                    "tau_rev_s": tau} for a in rows]
    fig_path = save_queue_figure(figure_rows, tau, out_dir / "queue.png")

    for a in rows:
        mark = "admissible" if a.admissible else (
            "divergent" if a.rho >= 1 else "wait exceeds window")
        print(f"lambda={a.lambda_e:g} rho={a.rho:.3f} "
              f"W_q={a.w_q:.1f}s {mark}")
    print(f"wrote {csv_path}")
    print(f"wrote {fig_path}")
    return CommandResult(exit_code=0, artifacts_written=[csv_path, fig_path])


def cmd_demo(gain: float, penalty: float, eps: float) -> CommandResult:
    """The reward-shaping counterexample at one (G, M, eps) point."""
    try:
        result = counterexample_demo(gain, penalty, eps)
    except ValueError as exc:
        return _fail(str(exc))
    print(f"threshold G/(G+M) = {result.threshold} "
          f"(~{float(result.threshold):.6g})")
    print(f"shaping: {result.preferred_action}, cmdp: {result.cmdp_action}")
    return CommandResult(exit_code=0)


def cmd_econ(kfp: float, kfn: float, ker: float,
             curves: Optional[str] = None) -> CommandResult:
    """Operating-point economics: the worked trade at these unit costs."""
    model = CostModel(kappa_fp=kfp, kappa_fn=kfn, kappa_er=ker,
                      p_fp={}, p_fn={}, p_esc={})
    delta_fp = 0.04
    break_even = delta_fp * kfp / kfn
    print(f"kappa=(fp {kfp:g}, fn {kfn:g}, er {ker:g}); "
          f"a {delta_fp:.0%}-point false-positive increase breaks even at a "
          f"{100 * break_even:.4g}pp false-negative cut")
    for delta_fn in (0.0005, 0.0004):
        verdict = ("justified" if tradeoff_check(delta_fp, delta_fn, model)
                   else "not justified")
        print(f"delta_fn={100 * delta_fn:g}pp: {verdict} "
              "(before escalation-cost changes)")
    artifacts = []
    if curves:
        from .figures import save_curves_figures

        dataset = sensitivity_curves()
        out_dir = Path(curves)
        artifacts = write_curves_artifacts(dataset, out_dir)
        artifacts += save_curves_figures(dataset, out_dir)
        for path in artifacts:
            print(f"wrote {path}")
    return CommandResult(exit_code=0, artifacts_written=artifacts)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sarc",
        description="constraint-first agent governance: validate, run, "
                    "audit, and measure")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="lint a specification document")
    p.add_argument("spec_path", help="specification YAML")

    p = sub.add_parser("run", help="replay a scenario or workflow to a trace")
    p.add_argument("spec_path", help="specification YAML")
    p.add_argument("scenario_path",
                   help="scenario YAML, or a workflow bundle")
    p.add_argument("--seed", type=int, default=0,
                   help="fault-injection seed (default 0)")
    p.add_argument("--faults", metavar="EPS_PRED,EPS_EXEC",
                   help="predicate suppression and enforcement skip rates")
    p.add_argument("--out", default="trace.jsonl",
                   help="trace file to write (default trace.jsonl)")

    p = sub.add_parser("audit", help="check a trace against its specification")
    p.add_argument("spec_path", help="specification YAML")
    p.add_argument("trace_path", help="trace JSONL or workflow tree JSON")

    p = sub.add_parser("bench", help="five-regime procurement comparison")
    p.add_argument("--seeds", type=int, default=50,
                   help="number of seeds (default 50)")
    p.add_argument("--regimes", type=_parse_regimes, default=None,
                   metavar="all|LIST",
                   help="'all' or comma list, e.g. posthoc_audit,sarc")
    p.add_argument("--out", default=".", help="output directory (default .)")

    p = sub.add_parser("sweep", help="predicate/enforcement noise sweep")
    p.add_argument("--grid", type=_parse_grid, default=PAPER_SWEEP_GRID,
                   metavar="paper|CELLS",
                   help="'paper' or eps_pred:eps_exec pairs, comma separated")
    p.add_argument("--seeds", type=int, default=50,
                   help="number of seeds per cell (default 50)")
    p.add_argument("--out", default=".", help="output directory (default .)")

    p = sub.add_parser("queue", help="Erlang-C staffing analytics")
    p.add_argument("--c", type=int, required=True, help="operator count")
    p.add_argument("--mu", type=float, required=True,
                   help="service rate per operator (1/s)")
    p.add_argument("--lambda-grid", type=_parse_floats, required=True,
                   dest="lambda_grid", metavar="L1,L2,...",
                   help="escalation arrival rates to evaluate (1/s)")
    p.add_argument("--tau", type=float, required=True,
                   help="reversibility window (s)")
    p.add_argument("--out", default=".", help="output directory (default .)")

    p = sub.add_parser("demo", help="reward-shaping counterexample")
    p.add_argument("--G", type=float, required=True, dest="gain",
                   help="reward for the risky action")
    p.add_argument("--M", type=float, required=True, dest="penalty",
                   help="penalty charged on violation")
    p.add_argument("--eps", type=float, required=True,
                   help="violation probability of the risky action")

    p = sub.add_parser("econ", help="operating-point cost trade")
    p.add_argument("--kfp", type=float, default=1.0,
                   help="unit cost of a false positive (default 1)")
    p.add_argument("--kfn", type=float, default=100.0,
                   help="unit cost of a false negative (default 100)")
    p.add_argument("--ker", type=float, default=5.0,
                   help="unit cost of an escalation (default 5)")
    p.add_argument("--curves", metavar="DIR",
                   help="also write the sensitivity curve datasets here")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "validate":
        result = cmd_validate(args.spec_path)
    elif args.command == "run":
        result = cmd_run(args.spec_path, args.scenario_path, seed=args.seed,
                         faults=args.faults, out=args.out)
    elif args.command == "audit":
        result = cmd_audit(args.spec_path, args.trace_path)
    elif args.command == "bench":
        result = cmd_bench(seeds=args.seeds, regimes=args.regimes,
                           out=args.out)
    elif args.command == "sweep":
        result = cmd_sweep(grid=args.grid, seeds=args.seeds, out=args.out)
    elif args.command == "queue":
        result = cmd_queue(args.c, args.mu, args.lambda_grid, args.tau,
                           out=args.out)
    elif args.command == "demo":
        result = cmd_demo(args.gain, args.penalty, args.eps)
    else:
        result = cmd_econ(args.kfp, args.kfn, args.ker, curves=args.curves)
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
