"""Command-line interface.

    flexmarket <solve|welfare|shadow|poa|sweep|security|validate>
        --scenario DIR [--no-network] [--trace] [--seed U64] [--tol F]
        [--max-iters U] [--jobs U] [--out DIR]

Exit codes: 0 success, 2 schema violation, 3 broken reference/structure,
4 game-condition violation, 5 solver failure.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .. import game, gne, grid, qpsolve
from ..errors import (
    FlexmarketError,
    GameConditionError,
    SchemaError,
    SolverError,
    StructureError,
)
from . import campaigns, reports
from .scenario import load_scenario

__all__ = ["main"]

EXIT_SCHEMA = 2
EXIT_REFERENCE = 3
EXIT_CONDITION = 4
EXIT_SOLVER = 5


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flexmarket",
        description="Real-time flexibility market simulator for distribution networks",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in [
        ("solve", "iterate the market exchange to its equilibrium"),
        ("welfare", "solve the cost-minimal benchmark allocation"),
        ("shadow", "solve the markup-inflated benchmark (equilibrium oracle)"),
        ("poa", "welfare + oracle + efficiency ratio with its bound"),
        ("sweep", "seeded sweep over population sizes and slope fractions"),
        ("security", "compare clearing with and without network limits"),
        ("validate", "load and validate a scenario directory"),
    ]:
        cmd = sub.add_parser(name, help=helptext)
        cmd.add_argument("--scenario", required=True, help="scenario directory")
        cmd.add_argument("--no-network", action="store_true", help="drop network rows")
        cmd.add_argument("--trace", action="store_true", help="write per-round trace records")
        cmd.add_argument("--seed", type=int, default=None, help="override scenario seed")
        cmd.add_argument("--tol", type=float, default=None, help="override stopping tolerance")
        cmd.add_argument("--max-iters", type=int, default=None, help="override iteration cap")
        cmd.add_argument("--jobs", type=int, default=1, help="parallel sweep cells")
        cmd.add_argument("--out", default="out", help="output directory")
        if name == "sweep":
            cmd.add_argument(
                "--n-grid", default="5,10,20,40", help="comma-separated population sizes"
            )
            cmd.add_argument(
                "--delta-grid", default="0.25,0.5,0.75", help="comma-separated slope fractions"
            )
    return parser


def _apply_overrides(scenario, args):
    if args.no_network:
        scenario = replace(scenario, network_enabled=False)
    if args.tol is not None:
        scenario = replace(scenario, stop_tol=args.tol)
    if args.max_iters is not None:
        scenario = replace(scenario, max_iter=args.max_iters)
    if args.seed is not None:
        scenario = replace(scenario, seed=args.seed)
    return scenario


def _implied_state(network, profiles, scenario, x):
    injections = grid.nodal_injections(network, profiles, x, scenario.direction)
    q_bus = np.array([bus.q_injection for bus in network.buses[1:]])
    return grid.power_flow_state(network, injections * scenario.energy_to_pu, q_bus)


def _cmd_validate(args, out_dir: Path) -> int:
    scenario, network, profiles = load_scenario(args.scenario)
    scenario = _apply_overrides(scenario, args)
    act = game.active_profiles(profiles)
    consts = game.constants(act, scenario.alpha)
    rho_bar, nu_bar = game.max_step_sizes(consts)
    grid.assemble_feasible_set(network, profiles, scenario)
    print(f"buses: {network.n_buses}")
    print(f"lines: {network.n_lines}")
    print(f"consumers: {len(profiles)} ({len(act)} active)")
    print(f"alpha: {reports.fmt(scenario.alpha)}")
    print(f"eta_F: {reports.fmt(consts.eta_f)}")
    print(f"kappa_F: {reports.fmt(consts.kappa_f)}")
    print(f"auto step sizes: rho={reports.fmt(rho_bar)} nu={reports.fmt(nu_bar)}")
    return 0


def _run_and_report(args, out_dir: Path) -> int:
    scenario, network, profiles = load_scenario(args.scenario)
    scenario = _apply_overrides(scenario, args)
    trace_fh = None
    if args.trace:
        out_dir.mkdir(parents=True, exist_ok=True)
        trace_fh = open(out_dir / "trace.ndjson", "w", encoding="utf-8")
    try:
        report = gne.run(
            scenario,
            network if scenario.network_enabled else None,
            profiles,
            trace=trace_fh,
        )
    finally:
        if trace_fh is not None:
            trace_fh.close()
    x_shadow = qpsolve.solve_shadow(profiles, network if scenario.network_enabled else None, scenario)
    report.oracle_gap = float(
        np.linalg.norm(report.x_star - x_shadow) / max(np.linalg.norm(x_shadow), 1e-30)
    )
    reports.write_report_json(out_dir / "report.json", report, scenario)
    reports.write_allocation_csv(
        out_dir / "allocation.csv",
        profiles,
        report.x_star,
        beta=report.beta_star,
        gamma=report.gamma_star,
        oracle_gap=report.oracle_gap,
    )
    state = _implied_state(network, profiles, scenario, np.maximum(report.x_star, 0.0))
    reports.write_network_state_csv(out_dir / "network_state.csv", network, state)
    if report.termination != gne.CONVERGED:
        print(f"solver failure: termination={report.termination}", file=sys.stderr)
        if report.failure_reason:
            print(report.failure_reason, file=sys.stderr)
        return EXIT_SOLVER
    print(
        f"converged in {report.iterations} iterations, "
        f"price {reports.fmt(report.lambda_star)}, oracle gap {reports.fmt(report.oracle_gap)}"
    )
    return 0


def _cmd_benchmark(args, out_dir: Path, kind: str) -> int:
    scenario, network, profiles = load_scenario(args.scenario)
    scenario = _apply_overrides(scenario, args)
    net = network if scenario.network_enabled else None
    solver = qpsolve.solve_welfare if kind == "welfare" else qpsolve.solve_shadow
    x, sol, _ = solver(profiles, net, scenario, details=True)
    price = -float(sol.eq_dual[0])
    reports.write_benchmark_json(out_dir / "report.json", kind, x, price, sol.objective, scenario)
    reports.write_allocation_csv(out_dir / "allocation.csv", profiles, x)
    state = _implied_state(network, profiles, scenario, x)
    reports.write_network_state_csv(out_dir / "network_state.csv", network, state)
    print(f"{kind} objective {reports.fmt(sol.objective)}, marginal price {reports.fmt(price)}")
    return 0


def _cmd_poa(args, out_dir: Path) -> int:
    scenario, network, profiles = load_scenario(args.scenario)
    scenario = _apply_overrides(scenario, args)
    net = network if scenario.network_enabled else None
    x_opt = qpsolve.solve_welfare(profiles, net, scenario)
    x_eq = qpsolve.solve_shadow(profiles, net, scenario)
    act = game.active_profiles(profiles)
    result = game.poa(act, scenario.alpha, x_eq, x_opt)
    reports.write_poa_csv(out_dir / "poa.csv", result, len(act), scenario.alpha)
    print(
        f"poa {reports.fmt(result.poa)} < bound {reports.fmt(result.bound)}"
    )
    return 0


def _cmd_sweep(args, out_dir: Path) -> int:
    scenario, _network, _profiles = load_scenario(args.scenario)
    scenario = _apply_overrides(scenario, args)
    n_grid = [int(v) for v in args.n_grid.split(",") if v.strip()]
    delta_grid = [float(v) for v in args.delta_grid.split(",") if v.strip()]
    result = campaigns.run_sweep(
        scenario, n_grid, delta_grid, seed=args.seed, jobs=max(1, args.jobs)
    )
    reports.write_sweep_csvs(out_dir, result.cells)
    failed = sum(1 for c in result.cells if c.get("failed"))
    print(f"sweep: {len(result.cells)} cells, {failed} flagged")
    return 0


def _cmd_security(args, out_dir: Path) -> int:
    scenario, network, profiles = load_scenario(args.scenario)
    scenario = _apply_overrides(scenario, args)
    comparison = campaigns.run_security(scenario, network, profiles)
    reports.write_security_csv(out_dir / "security_compare.csv", comparison.rows)
    for name, report in [
        ("constrained", comparison.constrained),
        ("unconstrained", comparison.unconstrained),
    ]:
        if report.termination != gne.CONVERGED:
            print(f"solver failure in {name} run: {report.termination}", file=sys.stderr)
            return EXIT_SOLVER
    n_viol = sum(1 for row in comparison.rows if row[0] == "unconstrained" and row[-1])
    print(f"security comparison written; unconstrained violations: {n_viol}")
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    out_dir = Path(args.out)
    handlers = {
        "validate": _cmd_validate,
        "solve": _run_and_report,
        "welfare": lambda a, o: _cmd_benchmark(a, o, "welfare"),
        "shadow": lambda a, o: _cmd_benchmark(a, o, "shadow"),
        "poa": _cmd_poa,
        "sweep": _cmd_sweep,
        "security": _cmd_security,
    }
    try:
        code = handlers[args.command](args, out_dir)
    except SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except StructureError as exc:
        print(f"reference error: {exc}", file=sys.stderr)
        return EXIT_REFERENCE
    except GameConditionError as exc:
        print(f"game condition violated: {exc}", file=sys.stderr)
        return EXIT_CONDITION
    except SolverError as exc:
        block = getattr(exc, "block", None)
        suffix = f" (block: {block})" if block else ""
        print(f"solver error: {exc}{suffix}", file=sys.stderr)
        return EXIT_SOLVER
    except FlexmarketError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    return code


if __name__ == "__main__":
    sys.exit(main())
