"""Scenario files: schema, validation, and loading.

A scenario directory holds ``scenario.json`` plus three CSV files:

``buses.csv``      id, vmin, vmax, theta_min, theta_max, q_injection
``lines.csv``      from, to, u, w, z
``consumers.csv``  id, bus, active, a, b_lin, x_hat, d

All numeric fields are decimal with a dot separator; a header row is
required.  ``scenario.json`` carries the market-level data: ``x_tot``
(kWh), ``direction`` (deficit|surplus), exactly one of ``alpha`` or
``delta``, and optionally ``stop_tol``, ``max_iter``, ``seed``,
``network_enabled``, ``interval_hours``, ``power_base_mva``, ``rho``,
``nu``.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace
from pathlib import Path

from .. import game, grid, market
from ..errors import GameConditionError, SchemaError, StructureError

__all__ = ["MarketScenario", "load_scenario"]

_DIRECTIONS = (grid.DEFICIT, grid.SURPLUS)

_SCENARIO_KEYS = {
    "x_tot",
    "direction",
    "alpha",
    "delta",
    "stop_tol",
    "max_iter",
    "seed",
    "network_enabled",
    "interval_hours",
    "power_base_mva",
    "rho",
    "nu",
}


@dataclass(frozen=True)
class MarketScenario:
    """Market-level run configuration.

    ``alpha`` is the canonical slope; when the file supplies ``delta``
    instead, loading resolves ``alpha = delta * 2/(kappa*(N-1))`` from the
    consumer population and stores it here.  ``network_enabled=False``
    drops the network rows from every feasible set (pure market runs).
    """

    x_tot: float
    direction: str
    alpha: float | None = None
    delta: float | None = None
    stop_tol: float = 1e-5
    max_iter: int = 100000
    seed: int = 0
    network_enabled: bool = True
    interval_hours: float = 1.0
    power_base_mva: float = 1.0
    rho: float | None = None
    nu: float | None = None

    def __post_init__(self):
        if not self.x_tot > 0.0:
            raise SchemaError("x_tot must be a positive energy amount in kWh")
        if self.direction not in _DIRECTIONS:
            raise SchemaError(
                f"direction must be one of {_DIRECTIONS}, got {self.direction!r}"
            )
        if self.alpha is None and self.delta is None:
            raise SchemaError("scenario needs alpha or delta")
        if self.delta is not None and not 0.0 < self.delta < 1.0:
            raise GameConditionError("delta must lie strictly inside (0, 1)")
        if self.alpha is not None and self.alpha <= 0.0:
            raise GameConditionError("alpha must be positive")
        if self.interval_hours <= 0.0 or self.power_base_mva <= 0.0:
            raise SchemaError("interval_hours and power_base_mva must be positive")
        if self.stop_tol <= 0.0 or self.max_iter < 1:
            raise SchemaError("stop_tol must be positive and max_iter at least 1")

    @property
    def energy_to_pu(self) -> float:
        """kWh over the interval -> per-unit power on the MVA base."""
        return 1.0 / (self.interval_hours * 1000.0 * self.power_base_mva)


def _read_rows(path: Path, required: list[str]) -> list[dict]:
    if not path.is_file():
        raise SchemaError(f"missing input file {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in required if c not in header]
        if missing:
            raise SchemaError(f"{path.name}: missing columns {missing}")
        return list(reader)


def _num(row: dict, key: str, fname: str) -> float:
    raw = (row.get(key) or "").strip()
    try:
        return float(raw)
    except ValueError:
        raise SchemaError(f"{fname}: field '{key}' is not numeric: {raw!r}") from None


def _intval(row: dict, key: str, fname: str) -> int:
    val = _num(row, key, fname)
    if val != int(val):
        raise SchemaError(f"{fname}: field '{key}' must be an integer, got {val}")
    return int(val)


def load_scenario(
    scenario_dir,
) -> tuple[MarketScenario, grid.DistributionNetwork, list[game.ConsumerProfile]]:
    """Load and cross-validate a scenario directory.

    Returns the scenario with the slope resolved to its canonical ``alpha``,
    the network with consumer attachments, and all consumer profiles.
    """
    root = Path(scenario_dir)
    sc_path = root / "scenario.json"
    if not sc_path.is_file():
        raise SchemaError(f"missing input file {sc_path}")
    try:
        raw = json.loads(sc_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"scenario.json is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise SchemaError("scenario.json must hold a JSON object")
    unknown = set(raw) - _SCENARIO_KEYS
    if unknown:
        raise SchemaError(f"scenario.json: unknown keys {sorted(unknown)}")
    if ("alpha" in raw) == ("delta" in raw):
        raise SchemaError("scenario.json must set exactly one of alpha or delta")
    try:
        scenario = MarketScenario(**raw)
    except TypeError as exc:
        raise SchemaError(f"scenario.json: {exc}") from exc

    buses = []
    for row in _read_rows(
        root / "buses.csv",
        ["id", "vmin", "vmax", "theta_min", "theta_max", "q_injection"],
    ):
        try:
            buses.append(
                grid.Bus(
                    id=_intval(row, "id", "buses.csv"),
                    vmin=_num(row, "vmin", "buses.csv"),
                    vmax=_num(row, "vmax", "buses.csv"),
                    theta_min=_num(row, "theta_min", "buses.csv"),
                    theta_max=_num(row, "theta_max", "buses.csv"),
                    q_injection=_num(row, "q_injection", "buses.csv"),
                )
            )
        except StructureError as exc:
            raise SchemaError(f"buses.csv: {exc}") from exc

    lines = []
    for row in _read_rows(root / "lines.csv", ["from", "to", "u", "w", "z"]):
        lines.append(
            grid.Line(
                from_bus=_intval(row, "from", "lines.csv"),
                to_bus=_intval(row, "to", "lines.csv"),
                u=_num(row, "u", "lines.csv"),
                w=_num(row, "w", "lines.csv"),
                z=_num(row, "z", "lines.csv"),
            )
        )

    profiles = []
    for row in _read_rows(
        root / "consumers.csv", ["id", "bus", "active", "a", "b_lin", "x_hat", "d"]
    ):
        active = _intval(row, "active", "consumers.csv")
        if active not in (0, 1):
            raise SchemaError("consumers.csv: 'active' must be 0 or 1")
        try:
            profiles.append(
                game.ConsumerProfile(
                    id=_intval(row, "id", "consumers.csv"),
                    bus_id=_intval(row, "bus", "consumers.csv"),
                    a=_num(row, "a", "consumers.csv"),
                    b_lin=_num(row, "b_lin", "consumers.csv"),
                    x_hat=_num(row, "x_hat", "consumers.csv"),
                    d=_num(row, "d", "consumers.csv"),
                    active=bool(active),
                )
            )
        except ValueError as exc:
            raise SchemaError(f"consumers.csv: {exc}") from exc
    ids = [p.id for p in profiles]
    if len(set(ids)) != len(ids):
        raise SchemaError("consumers.csv: duplicate consumer ids")

    network = grid.DistributionNetwork.with_consumers(buses, lines, profiles)
    for p in profiles:
        if not 1 <= p.bus_id <= network.n_buses:
            raise StructureError(
                f"consumer {p.id} references unknown bus {p.bus_id}"
            )

    act = game.active_profiles(profiles)
    if scenario.alpha is None:
        kappa = max(p.a for p in act)
        if kappa <= 0.0:
            raise GameConditionError(
                "delta-based slopes need a population with positive curvature"
            )
        alpha = market.alpha_from_delta(scenario.delta, kappa, len(act))
        scenario = replace(scenario, alpha=alpha)

    consts = game.constants(act, scenario.alpha)
    if scenario.rho is not None or scenario.nu is not None:
        if scenario.rho is None or scenario.nu is None:
            raise SchemaError("rho and nu must be given together")
        game.validate_step_sizes(consts, scenario.rho, scenario.nu)

    if not scenario.network_enabled:
        cap_total = sum(p.x_hat for p in act)
        if cap_total < scenario.x_tot:
            raise GameConditionError(
                f"total caps {cap_total} kWh cannot absorb x_tot={scenario.x_tot} kWh"
            )
    return scenario, network, profiles
