"""Distribution-network model and linear feasibility-set assembly.

The network is a simple directed graph of buses and lines with a linear
lossless flow model: per line ``(b, s)`` with susceptance ``w`` and
conductance ``u``,

    p = -w*(theta_b - theta_s) + u*(v_b - v_s)
    q = -u*(theta_b - theta_s) - w*(v_b - v_s)

Bus 1 is the slack bus at the transmission interface with ``v=1`` and
``theta=0`` fixed; its injections are free variables.  The module also
assembles the structured constraint systems consumed by the QP engine:
the operator-side feasible set over bid intercepts and the allocation-space
set shared by the welfare benchmarks.

All network quantities are per-unit on the scenario's MVA base; consumer
energies stay in kWh and are converted through the scenario's interval
length when they enter the bus-balance rows.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError, StructureError

if TYPE_CHECKING:  # pragma: no cover
    from .game import ConsumerProfile

__all__ = [
    "Bus",
    "Line",
    "DistributionNetwork",
    "PowerFlowState",
    "DiskSpec",
    "FeasibleSet",
    "AllocationSet",
    "build_incidence",
    "line_flows",
    "nodal_injections",
    "power_flow_state",
    "assemble_feasible_set",
    "assemble_allocation_set",
]

DEFICIT = "deficit"
SURPLUS = "surplus"

_DIRECTION_SIGN = {DEFICIT: 1.0, SURPLUS: -1.0}


def direction_sign(direction: str) -> float:
    """+1 when consumers inject extra power (deficit), -1 when they withdraw."""
    try:
        return _DIRECTION_SIGN[direction]
    except KeyError:
        raise ContractError(
            f"direction must be '{DEFICIT}' or '{SURPLUS}', got {direction!r}"
        ) from None


@dataclass(frozen=True)
class Bus:
    """One network bus with per-unit voltage/angle limits and fixed reactive injection."""

    id: int
    vmin: float = 0.95
    vmax: float = 1.05
    theta_min: float = -0.5
    theta_max: float = 0.5
    q_injection: float = 0.0

    def __post_init__(self):
        if self.id < 1:
            raise StructureError(f"bus ids are 1-based, got {self.id}")
        if not self.vmin < self.vmax:
            raise StructureError(f"bus {self.id}: vmin must be < vmax")
        if not self.theta_min < self.theta_max:
            raise StructureError(f"bus {self.id}: theta_min must be < theta_max")


@dataclass(frozen=True)
class Line:
    """Directed line with per-unit conductance ``u``, susceptance ``w``, capacity ``z``."""

    from_bus: int
    to_bus: int
    u: float
    w: float
    z: float

    def __post_init__(self):
        if self.from_bus == self.to_bus:
            raise StructureError(f"line ({self.from_bus},{self.to_bus}) is a self-loop")
        if self.z <= 0.0:
            raise StructureError(
                f"line ({self.from_bus},{self.to_bus}): capacity z must be positive"
            )
        if self.u == 0.0 and self.w == 0.0:
            raise StructureError(
                f"line ({self.from_bus},{self.to_bus}): u and w cannot both be zero"
            )


class DistributionNetwork:
    """Immutable bus/line model with consumer attachments.

    Bus ids must be exactly 1..B (bus 1 is the slack); lines form a simple
    directed graph whose undirected version is connected.  ``attachments``
    maps a bus id to ``(active consumer ids, passive consumer ids)``; no
    consumer may sit at the slack bus.
    """

    def __init__(
        self,
        buses: Sequence[Bus],
        lines: Sequence[Line],
        attachments: Mapping[int, tuple[Sequence[int], Sequence[int]]] | None = None,
    ):
        buses = tuple(sorted(buses, key=lambda b: b.id))
        ids = [b.id for b in buses]
        if len(set(ids)) != len(ids):
            raise StructureError("duplicate bus ids")
        if ids != list(range(1, len(ids) + 1)):
            raise StructureError("bus ids must be exactly 1..B with bus 1 the slack")
        if len(buses) < 2:
            raise StructureError("a network needs at least the slack bus and one load bus")
        lines = tuple(lines)
        if not lines:
            raise StructureError("a network needs at least one line")
        seen = set()
        for ln in lines:
            if ln.from_bus not in set(ids) or ln.to_bus not in set(ids):
                raise StructureError(
                    f"line ({ln.from_bus},{ln.to_bus}) references an unknown bus id"
                )
            key = (ln.from_bus, ln.to_bus)
            if key in seen:
                raise StructureError(f"duplicate line {key}")
            seen.add(key)
        self.buses = buses
        self.lines = lines
        self._check_connected()
        att: dict[int, tuple[tuple[int, ...], tuple[int, ...]]] = {}
        for bus_id, (act, pas) in (attachments or {}).items():
            if bus_id == 1:
                raise StructureError("no consumer may be attached to the slack bus")
            if bus_id not in set(ids):
                raise StructureError(f"attachment references unknown bus {bus_id}")
            att[bus_id] = (tuple(act), tuple(pas))
        self.attachments = att
        self._incidence = _incidence_matrix(len(buses), lines)

    @classmethod
    def with_consumers(
        cls,
        buses: Sequence[Bus],
        lines: Sequence[Line],
        profiles: Iterable["ConsumerProfile"],
    ) -> "DistributionNetwork":
        """Build the network with attachments derived from consumer profiles."""
        att: dict[int, tuple[list[int], list[int]]] = {}
        for p in profiles:
            act, pas = att.setdefault(p.bus_id, ([], []))
            (act if p.active else pas).append(p.id)
        return cls(buses, lines, att)

    def _check_connected(self):
        adj: dict[int, set[int]] = {b.id: set() for b in self.buses}
        for ln in self.lines:
            adj[ln.from_bus].add(ln.to_bus)
            adj[ln.to_bus].add(ln.from_bus)
        seen = {1}
        stack = [1]
        while stack:
            for nxt in adj[stack.pop()]:
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        if len(seen) != len(self.buses):
            raise StructureError("network graph is not connected")

    @property
    def n_buses(self) -> int:
        return len(self.buses)

    @property
    def n_lines(self) -> int:
        return len(self.lines)

    @property
    def incidence(self) -> np.ndarray:
        """Signed line-by-bus incidence matrix (copy)."""
        return self._incidence.copy()

    def active_at(self, bus_id: int) -> tuple[int, ...]:
        return self.attachments.get(bus_id, ((), ()))[0]

    def passive_at(self, bus_id: int) -> tuple[int, ...]:
        return self.attachments.get(bus_id, ((), ()))[1]


def _incidence_matrix(n_buses: int, lines: Sequence[Line]) -> np.ndarray:
    e = np.zeros((len(lines), n_buses))
    for k, ln in enumerate(lines):
        e[k, ln.from_bus - 1] = 1.0
        e[k, ln.to_bus - 1] = -1.0
    return e


def build_incidence(network: DistributionNetwork) -> np.ndarray:
    """Line-by-bus matrix with +1 at the origin bus and -1 at the destination."""
    return network.incidence


@dataclass(frozen=True)
class PowerFlowState:
    """Network operating point: angles, magnitudes, line flows, slack injections."""

    theta: np.ndarray
    v: np.ndarray
    p_lines: np.ndarray
    q_lines: np.ndarray
    p_slack: float
    q_slack: float


def line_flows(network: DistributionNetwork, theta, v) -> tuple[np.ndarray, np.ndarray]:
    """Active/reactive flow on every line from bus angles and magnitudes.

    ``theta`` and ``v`` are full B-vectors with the slack entries pinned to
    0 and 1.  The flow map is linear in ``(theta, v - 1)``.
    """
    theta = np.asarray(theta, dtype=float)
    v = np.asarray(v, dtype=float)
    b = network.n_buses
    if theta.shape != (b,) or v.shape != (b,):
        raise ContractError(
            f"theta and v must have shape ({b},), got {theta.shape} and {v.shape}"
        )
    if abs(theta[0]) > 1e-12 or abs(v[0] - 1.0) > 1e-12:
        raise ContractError("slack bus requires theta[0]=0 and v[0]=1")
    e = network._incidence
    u_diag = np.array([ln.u for ln in network.lines])
    w_diag = np.array([ln.w for ln in network.lines])
    dtheta = e @ theta
    dv = e @ v
    p = -w_diag * dtheta + u_diag * dv
    q = -u_diag * dtheta - w_diag * dv
    return p, q


def nodal_injections(
    network: DistributionNetwork,
    profiles: Iterable["ConsumerProfile"],
    x,
    direction: str,
) -> np.ndarray:
    """Net active injection at buses 2..B from loads and allocated flexibility.

    Returns ``p_b = -(sum_passive d + sum_active (d -/+ x))`` in the same
    energy units as the inputs; the sign of ``x`` follows ``direction``
    (consumers inject under a deficit, withdraw under a surplus).
    """
    sign = direction_sign(direction)
    act = sorted((p for p in profiles if p.active), key=lambda p: p.id)
    passive = [p for p in profiles if not p.active]
    x = np.asarray(x, dtype=float)
    if x.shape != (len(act),):
        raise ContractError(f"expected x of shape ({len(act)},), got {x.shape}")
    if np.any(x < -1e-12):
        raise ContractError("allocated flexibility must be nonnegative")
    for p in list(act) + passive:
        if p.bus_id == 1:
            raise StructureError("no consumer may be attached to the slack bus")
        if not 2 <= p.bus_id <= network.n_buses:
            raise StructureError(f"consumer {p.id} references unknown bus {p.bus_id}")
    p_bus = np.zeros(network.n_buses - 1)
    for p in passive:
        p_bus[p.bus_id - 2] -= p.d
    for k, p in enumerate(act):
        p_bus[p.bus_id - 2] -= p.d - sign * x[k]
    return p_bus


def power_flow_state(network: DistributionNetwork, p_bus, q_bus) -> PowerFlowState:
    """Solve the linear flow equations for given per-unit injections at buses 2..B.

    The reduced 2(B-1) system in (theta, v) is nonsingular for a connected
    network with nonzero line admittances; slack injections balance the rest.
    """
    b = network.n_buses
    p_bus = np.asarray(p_bus, dtype=float)
    q_bus = np.asarray(q_bus, dtype=float)
    if p_bus.shape != (b - 1,) or q_bus.shape != (b - 1,):
        raise ContractError(f"injection vectors must have shape ({b - 1},)")
    e = network._incidence
    e1 = e[:, 0]
    er = e[:, 1:]
    u_diag = np.array([ln.u for ln in network.lines])
    w_diag = np.array([ln.w for ln in network.lines])
    kw = er.T @ (w_diag[:, None] * er)
    ku = er.T @ (u_diag[:, None] * er)
    m = np.block([[-kw, ku], [-ku, -kw]])
    rhs = np.concatenate([p_bus - er.T @ (u_diag * e1), q_bus + er.T @ (w_diag * e1)])
    try:
        sol = np.linalg.solve(m, rhs)
    except np.linalg.LinAlgError as exc:
        raise StructureError(f"network flow equations are singular: {exc}") from exc
    theta = np.concatenate([[0.0], sol[: b - 1]])
    v = np.concatenate([[1.0], sol[b - 1 :]])
    p_l, q_l = line_flows(network, theta, v)
    return PowerFlowState(
        theta=theta,
        v=v,
        p_lines=p_l,
        q_lines=q_l,
        p_slack=float(e1 @ p_l),
        q_slack=float(e1 @ q_l),
    )


@dataclass(frozen=True)
class DiskSpec:
    """Pair of variable indices bounded by ``y_i^2 + y_j^2 <= radius^2``."""

    i: int
    j: int
    radius: float


@dataclass
class _ConstraintSystem:
    """Shared structure of the assembled constraint sets."""

    layout: dict[str, slice]
    n_vars: int
    eq_mat: np.ndarray
    eq_rhs: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    disks: tuple[DiskSpec, ...]
    row_groups: dict[str, slice]
    network_enabled: bool
    n_active: int

    @property
    def power_flow_rows(self) -> int:
        """Rows of the flow-definition/balance/slack assembly: 2L + 2(B-1) + 2."""
        return sum(
            s.stop - s.start
            for name, s in self.row_groups.items()
            if name in ("flow_p", "flow_q", "balance_p", "balance_q", "slack")
        )

    def extract(self, y: np.ndarray, name: str) -> np.ndarray:
        return y[self.layout[name]].copy()

    def extract_state(self, network: DistributionNetwork, y: np.ndarray) -> PowerFlowState:
        if not self.network_enabled:
            raise ContractError("constraint system was assembled without network rows")
        b = network.n_buses
        theta = np.concatenate([[0.0], y[self.layout["theta"]]])
        v = np.concatenate([[1.0], y[self.layout["v"]]])
        slack = y[self.layout["slack"]]
        return PowerFlowState(
            theta=theta,
            v=v,
            p_lines=self.extract(y, "p_lines"),
            q_lines=self.extract(y, "q_lines"),
            p_slack=float(slack[0]),
            q_slack=float(slack[1]),
        )


@dataclass
class FeasibleSet(_ConstraintSystem):
    """Operator-side feasible set over bid intercepts.

    Variables are ``[beta, x, theta_2..B, v_2..B, P_L, Q_L, p1, q1]``; the
    clearing-map rows tie ``x`` to ``beta`` so that allocation nonnegativity
    lives in the box block, and the auxiliary network variables are
    existentially quantified (discarded after projection).
    """


@dataclass
class AllocationSet(_ConstraintSystem):
    """Allocation-space constraint set shared by the welfare benchmarks.

    Variables are ``[x, theta_2..B, v_2..B, P_L, Q_L, p1, q1]`` with the
    total-flexibility balance row and, optionally, per-consumer caps in the
    box block.
    """


def _network_blocks(network: DistributionNetwork):
    e = network._incidence
    u_diag = np.array([ln.u for ln in network.lines])
    w_diag = np.array([ln.w for ln in network.lines])
    return e, e[:, 0], e[:, 1:], u_diag, w_diag


def _assemble(
    network: DistributionNetwork | None,
    profiles,
    scenario,
    *,
    bid_space: bool,
    include_caps: bool,
) -> _ConstraintSystem:
    from .game import active_profiles  # local import to keep module deps one-way

    act = active_profiles(profiles)
    n = len(act)
    x_tot = float(scenario.x_tot)
    network_enabled = bool(getattr(scenario, "network_enabled", True)) and network is not None

    layout: dict[str, slice] = {}
    pos = 0
    if bid_space:
        layout["beta"] = slice(pos, pos + n)
        pos += n
    layout["x"] = slice(pos, pos + n)
    pos += n
    if network_enabled:
        b = network.n_buses
        l = network.n_lines
        layout["theta"] = slice(pos, pos + b - 1)
        pos += b - 1
        layout["v"] = slice(pos, pos + b - 1)
        pos += b - 1
        layout["p_lines"] = slice(pos, pos + l)
        pos += l
        layout["q_lines"] = slice(pos, pos + l)
        pos += l
        layout["slack"] = slice(pos, pos + 2)
        pos += 2
    n_vars = pos

    rows: list[np.ndarray] = []
    rhs: list[float] = []
    row_groups: dict[str, slice] = {}

    def push_group(name: str, block: np.ndarray, block_rhs: np.ndarray):
        start = len(rows)
        for r, val in zip(block, block_rhs):
            rows.append(r)
            rhs.append(float(val))
        row_groups[name] = slice(start, len(rows))

    if bid_space:
        # clearing map x = A beta + b ties allocation to intercepts
        from . import market

        a_mat, b_vec = market.allocation_matrix(n, x_tot)
        block = np.zeros((n, n_vars))
        block[:, layout["x"]] = np.eye(n)
        block[:, layout["beta"]] = -a_mat
        push_group("clearing", block, b_vec)
    else:
        block = np.zeros((1, n_vars))
        block[0, layout["x"]] = 1.0
        push_group("balance_total", block, np.array([x_tot]))

    if network_enabled:
        e, e1, er, u_diag, w_diag = _network_blocks(network)
        b = network.n_buses
        l = network.n_lines
        scale = float(scenario.energy_to_pu)
        sign = direction_sign(scenario.direction)
        x_sl = layout["x"]

        for p in act:
            if p.bus_id == 1:
                raise StructureError("no consumer may be attached to the slack bus")

        # flow definitions: P_L + W Er theta - U Er v = U e1 ; Q_L + U Er theta + W Er v = -W e1
        blk = np.zeros((l, n_vars))
        blk[:, layout["p_lines"]] = np.eye(l)
        blk[:, layout["theta"]] = w_diag[:, None] * er
        blk[:, layout["v"]] = -u_diag[:, None] * er
        push_group("flow_p", blk, u_diag * e1)

        blk = np.zeros((l, n_vars))
        blk[:, layout["q_lines"]] = np.eye(l)
        blk[:, layout["theta"]] = u_diag[:, None] * er
        blk[:, layout["v"]] = w_diag[:, None] * er
        push_group("flow_q", blk, -w_diag * e1)

        # bus balances at 2..B; flexibility enters the active side in per-unit
        d_bus = np.zeros(b - 1)
        for p in profiles:
            if not 2 <= p.bus_id <= b:
                raise StructureError(f"consumer {p.id} references unknown bus {p.bus_id}")
            d_bus[p.bus_id - 2] += p.d
        blk = np.zeros((b - 1, n_vars))
        blk[:, layout["p_lines"]] = er.T
        for k, p in enumerate(act):
            blk[p.bus_id - 2, x_sl.start + k] = -sign * scale
        push_group("balance_p", blk, -scale * d_bus)

        q_bus = np.array([bus.q_injection for bus in network.buses[1:]])
        blk = np.zeros((b - 1, n_vars))
        blk[:, layout["q_lines"]] = er.T
        push_group("balance_q", blk, q_bus)

        # slack-bus balance with free injections
        blk = np.zeros((2, n_vars))
        blk[0, layout["p_lines"]] = e1
        blk[0, layout["slack"].start] = -1.0
        blk[1, layout["q_lines"]] = e1
        blk[1, layout["slack"].start + 1] = -1.0
        push_group("slack", blk, np.zeros(2))

    eq_mat = np.vstack(rows) if rows else np.zeros((0, n_vars))
    eq_rhs = np.asarray(rhs, dtype=float)

    lower = np.full(n_vars, -np.inf)
    upper = np.full(n_vars, np.inf)
    lower[layout["x"]] = 0.0
    if include_caps:
        upper[layout["x"]] = np.array([p.x_hat for p in act])
    if network_enabled:
        lower[layout["theta"]] = np.array([bus.theta_min for bus in network.buses[1:]])
        upper[layout["theta"]] = np.array([bus.theta_max for bus in network.buses[1:]])
        lower[layout["v"]] = np.array([bus.vmin for bus in network.buses[1:]])
        upper[layout["v"]] = np.array([bus.vmax for bus in network.buses[1:]])
        disks = tuple(
            DiskSpec(
                i=layout["p_lines"].start + k,
                j=layout["q_lines"].start + k,
                radius=network.lines[k].z,
            )
            for k in range(network.n_lines)
        )
    else:
        disks = ()

    cls = FeasibleSet if bid_space else AllocationSet
    return cls(
        layout=layout,
        n_vars=n_vars,
        eq_mat=eq_mat,
        eq_rhs=eq_rhs,
        lower=lower,
        upper=upper,
        disks=disks,
        row_groups=row_groups,
        network_enabled=network_enabled,
        n_active=n,
    )


def assemble_feasible_set(
    network: DistributionNetwork | None, profiles, scenario
) -> FeasibleSet:
    """Constraint system of the operator-side feasible set over intercepts.

    Holds the flow/balance/slack equalities, the clearing-map rows, the
    voltage/angle boxes plus allocation nonnegativity, and one disk per
    line.  Per-consumer caps are deliberately absent: consumers enforce
    them through their dual variables.
    """
    return _assemble(network, profiles, scenario, bid_space=True, include_caps=False)


def assemble_allocation_set(
    network: DistributionNetwork | None,
    profiles,
    scenario,
    include_caps: bool = True,
) -> AllocationSet:
    """Allocation-space constraints for the welfare benchmarks."""
    return _assemble(
        network, profiles, scenario, bid_space=False, include_caps=include_caps
    )
