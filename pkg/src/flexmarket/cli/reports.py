"""Deterministic CSV/JSON emission for solve results and campaigns.

Every numeric value is rendered with 12 significant digits so identical
inputs produce byte-identical files.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .. import game, grid
from ..gne import SolveReport

__all__ = [
    "fmt",
    "write_report_json",
    "write_allocation_csv",
    "write_network_state_csv",
    "write_poa_csv",
    "write_security_csv",
    "write_sweep_csvs",
]


def fmt(value) -> str:
    """Render one numeric value with 12 significant digits."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return f"{float(value):.12g}"


def _jsonable(value):
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, (np.floating, float)):
        return float(f"{float(value):.12g}")
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([v if isinstance(v, str) else fmt(v) for v in row])


def write_report_json(path: Path, report: SolveReport, scenario) -> None:
    payload = {
        "kind": "solve",
        "x_tot": scenario.x_tot,
        "direction": scenario.direction,
        "alpha": scenario.alpha,
        "network_enabled": scenario.network_enabled,
        "beta_star": report.beta_star,
        "x_star": report.x_star,
        "lambda_star": report.lambda_star,
        "gamma_star": report.gamma_star,
        "iterations": report.iterations,
        "termination": report.termination,
        "balance_error": report.balance_error,
        "flags": report.flags,
        "audit_violations": report.audit_violations,
        "failure_reason": report.failure_reason,
        "oracle_gap": report.oracle_gap,
        "poa": report.poa,
        "poa_bound": report.poa_bound,
        "residual_final": report.residual_history[-1] if report.residual_history else None,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(payload), indent=2) + "\n", encoding="utf-8")


def write_benchmark_json(path: Path, kind: str, x, price, objective, scenario) -> None:
    payload = {
        "kind": kind,
        "x_tot": scenario.x_tot,
        "direction": scenario.direction,
        "alpha": scenario.alpha,
        "network_enabled": scenario.network_enabled,
        "x": x,
        "price": price,
        "objective": objective,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(payload), indent=2) + "\n", encoding="utf-8")


def write_allocation_csv(
    path: Path,
    profiles,
    x,
    beta=None,
    gamma=None,
    oracle_gap=None,
) -> None:
    act = game.active_profiles(profiles)
    rows = []
    for i, p in enumerate(act):
        rows.append(
            [
                p.id,
                p.bus_id,
                x[i],
                beta[i] if beta is not None else "",
                gamma[i] if gamma is not None else "",
                oracle_gap if oracle_gap is not None else "",
            ]
        )
    _write_csv(path, ["consumer", "bus", "x", "beta", "gamma", "oracle_gap"], rows)


def write_network_state_csv(
    path: Path, network: grid.DistributionNetwork, state: grid.PowerFlowState
) -> None:
    rows = []
    for i, bus in enumerate(network.buses):
        violation = not (bus.vmin - 1e-9 <= state.v[i] <= bus.vmax + 1e-9) or not (
            bus.theta_min - 1e-9 <= state.theta[i] <= bus.theta_max + 1e-9
        )
        rows.append(
            ["bus", str(bus.id), state.v[i], state.theta[i], "", "", "", violation]
        )
    for k, ln in enumerate(network.lines):
        s = float(np.hypot(state.p_lines[k], state.q_lines[k]))
        rows.append(
            [
                "line",
                f"{ln.from_bus}-{ln.to_bus}",
                "",
                "",
                state.p_lines[k],
                state.q_lines[k],
                ln.z,
                s > ln.z + 1e-9,
            ]
        )
    _write_csv(path, ["kind", "key", "v", "theta", "p", "q", "z", "violation"], rows)


def write_poa_csv(path: Path, result: game.PoaResult, n_active: int, alpha: float) -> None:
    _write_csv(
        path,
        ["n_active", "alpha", "poa", "bound", "cost_equilibrium", "cost_optimum"],
        [[n_active, alpha, result.poa, result.bound, result.cost_equilibrium, result.cost_optimum]],
    )


def write_security_csv(path: Path, rows: list[list]) -> None:
    _write_csv(
        path,
        ["run", "kind", "key", "x", "v", "theta", "p", "q", "z", "violation"],
        rows,
    )


def write_sweep_csvs(out_dir: Path, cells: list[dict]) -> None:
    _write_csv(
        out_dir / "sweep_prices.csv",
        ["n_active", "delta", "alpha", "price_equilibrium", "price_welfare", "failed"],
        [
            [c["n_active"], c["delta"], c["alpha"], c.get("price_equilibrium"),
             c.get("price_welfare"), c.get("failed", False)]
            for c in cells
        ],
    )
    _write_csv(
        out_dir / "sweep_poa.csv",
        ["n_active", "delta", "alpha", "poa", "bound", "failed"],
        [
            [c["n_active"], c["delta"], c["alpha"], c.get("poa"), c.get("bound"),
             c.get("failed", False)]
            for c in cells
        ],
    )
    _write_csv(
        out_dir / "sweep_iters.csv",
        ["n_active", "delta", "alpha", "iterations", "termination", "oracle_gap", "failed"],
        [
            [c["n_active"], c["delta"], c["alpha"], c.get("iterations"),
             c.get("termination", ""), c.get("oracle_gap"), c.get("failed", False)]
            for c in cells
        ],
    )
