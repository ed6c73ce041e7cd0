"""Semi-decentralized equilibrium seeking as a role-structured message exchange.

Each round plays four phases: every consumer modifies its intercept with a
gradient-style step built from its private marginal cost, the broadcast
price, and the dual aggregate; the system operator projects the stacked
intercepts onto its feasible set; the market operator re-clears the price;
and every consumer updates the dual variable guarding its own flexibility
cap.  Information stays partitioned: consumers never see the requested
total, other consumers' data, or network parameters; the market operator
never sees cost coefficients or caps; the system operator never sees cost
coefficients.  A message log records every exchange so the partition is
auditable after the fact.
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from typing import IO, Iterable

import numpy as np

from . import game, grid, market, qpsolve
from .errors import ContractError, ProjectionFailureError

__all__ = [
    "Message",
    "MessageLog",
    "AlgorithmState",
    "SolveReport",
    "consumer_step",
    "dual_step",
    "run",
    "audit_messages",
    "BID",
    "CORRECTED_BID",
    "PRICE",
    "DUAL",
    "DUAL_SUM",
    "CONVERGED",
    "MAX_ITER",
    "PROJECTION_FAILURE",
]

BID = "bid"
CORRECTED_BID = "corrected_bid"
PRICE = "price"
DUAL = "dual"
DUAL_SUM = "dual_sum"

CONVERGED = "converged"
MAX_ITER = "max_iter"
PROJECTION_FAILURE = "projection_failure"

BRP = "brp"
DSO = "dso"


def _consumer_role(consumer_id: int) -> str:
    return f"consumer:{consumer_id}"


# sender role class -> receiver role class -> allowed payload kinds
_PROTOCOL = {
    ("consumer", BRP): {BID, DUAL},
    (BRP, "consumer"): {PRICE, CORRECTED_BID, DUAL_SUM},
    (BRP, DSO): {BID},
    (DSO, BRP): {CORRECTED_BID},
}


@dataclass(frozen=True)
class Message:
    """One protocol exchange; payloads are scalars or stacked intercepts."""

    sender: str
    receiver: str
    kind: str
    payload: object


class MessageLog:
    """Append-only record of protocol messages."""

    def __init__(self):
        self.messages: list[Message] = []

    def send(self, sender: str, receiver: str, kind: str, payload) -> None:
        self.messages.append(Message(sender, receiver, kind, payload))

    def __len__(self) -> int:
        return len(self.messages)


def audit_messages(log: MessageLog) -> list[str]:
    """Return a description of every message violating the information partition."""
    violations = []
    for msg in log.messages:
        s_class = "consumer" if msg.sender.startswith("consumer:") else msg.sender
        r_class = "consumer" if msg.receiver.startswith("consumer:") else msg.receiver
        allowed = _PROTOCOL.get((s_class, r_class))
        if allowed is None:
            violations.append(f"{msg.sender} -> {msg.receiver}: channel not in protocol")
        elif msg.kind not in allowed:
            violations.append(
                f"{msg.sender} -> {msg.receiver}: payload kind '{msg.kind}' not allowed"
            )
    return violations


@dataclass
class AlgorithmState:
    """Mutable per-round state of the exchange."""

    k: int
    beta: np.ndarray
    gamma: np.ndarray
    price: float
    x_prev: np.ndarray
    x_curr: np.ndarray
    trajectory: deque = field(default_factory=lambda: deque(maxlen=256))


@dataclass
class SolveReport:
    """Outcome of one clearing run with diagnostics.

    ``residual_history[k]`` holds the squared step norm
    ``|beta_{k+1}-beta_k|^2 + |gamma_{k+1}-gamma_k|^2``;
    ``balance_error`` is the worst relative deviation of the per-round
    allocation total from ``x_tot`` across the whole run.
    """

    beta_star: np.ndarray
    x_star: np.ndarray
    lambda_star: float
    gamma_star: np.ndarray
    iterations: int
    termination: str
    residual_history: list[float]
    price_history: list[float]
    balance_error: float
    flags: dict
    audit_violations: list[str]
    failure_reason: str | None = None
    oracle_gap: float | None = None
    poa: float | None = None
    poa_bound: float | None = None


def consumer_step(
    profile: game.ConsumerProfile,
    beta_n: float,
    price: float,
    gamma_n: float,
    dual_sum: float,
    consts: game.GameConstants,
    rho_n: float,
) -> float:
    """One consumer's intercept modification.

    Computes ``h_n = C'_n(alpha*price + beta_n)*(N-1)/N
    + (alpha*price*(2-N) + beta_n)/(alpha*N) - dual_sum/N + gamma_n`` and
    returns ``beta_n - rho_n * h_n``.  Equals a pseudo-gradient component
    plus ``gamma_n - dual_sum/N`` whenever the price is consistent with the
    current intercepts.
    """
    alpha = consts.alpha
    big_n = consts.n_active
    x_n = alpha * price + beta_n
    h_n = (
        game.marginal_cost_extended(profile, x_n) * (big_n - 1) / big_n
        + (alpha * price * (2 - big_n) + beta_n) / (alpha * big_n)
        - dual_sum / big_n
        + gamma_n
    )
    return beta_n - rho_n * h_n


def dual_step(
    gamma_n: float,
    x_curr_n: float,
    x_prev_n: float,
    x_hat_n: float,
    nu_n: float,
) -> float:
    """Projected dual update for one consumer's flexibility cap.

    ``max(0, gamma_n + nu_n*(2*x_curr - x_prev - x_hat))``; the reflected
    combination of the last two allocations is what keeps the primal-dual
    pair convergent.
    """
    return max(0.0, gamma_n + nu_n * (2.0 * x_curr_n - x_prev_n - x_hat_n))


class _ConsumerAgent:
    """Holds one consumer's private data and per-round local state."""

    def __init__(self, profile, consts, rho_n, nu_n, beta0, gamma0):
        self.profile = profile
        self.consts = consts
        self.rho_n = rho_n
        self.nu_n = nu_n
        self.beta = float(beta0)
        self.gamma = float(gamma0)
        self.price = 0.0
        self.dual_sum = 0.0
        self.x_prev = 0.0
        self.extrapolated = False

    def implied_allocation(self) -> float:
        # own supply function evaluated at the broadcast price
        return self.consts.alpha * self.price + self.beta

    def modify_bid(self) -> float:
        x_n = self.implied_allocation()
        if not 0.0 <= x_n <= self.profile.x_hat:
            self.extrapolated = True
        return consumer_step(
            self.profile,
            self.beta,
            self.price,
            self.gamma,
            self.dual_sum,
            self.consts,
            self.rho_n,
        )

    def update_dual(self) -> float:
        x_curr = self.implied_allocation()
        self.gamma = dual_step(
            self.gamma, x_curr, self.x_prev, self.profile.x_hat, self.nu_n
        )
        self.x_prev = x_curr
        return self.gamma


class _BrpAgent:
    """Market operator: clears prices, aggregates duals, relays bids."""

    def __init__(self, x_tot, alpha, n_active):
        self.x_tot = x_tot
        self.alpha = alpha
        self.n_active = n_active
        self.beta = np.zeros(n_active)
        self.gamma = np.zeros(n_active)

    def clear_price(self) -> float:
        return market.clearing_price(self.beta, self.alpha, self.x_tot)

    def dual_sum(self) -> float:
        return float(self.gamma.sum())


class _DsoAgent:
    """System operator: holds the feasible set and corrects stacked bids."""

    def __init__(self, workspace: qpsolve.ProjectionWorkspace):
        self.workspace = workspace

    def enforce(self, beta_tilde: np.ndarray) -> np.ndarray:
        return self.workspace.project(beta_tilde)


def run(
    scenario,
    network: grid.DistributionNetwork | None,
    profiles: Iterable[game.ConsumerProfile],
    stop_tol: float | None = None,
    max_iter: int | None = None,
    init_beta=None,
    init_gamma=None,
    trace: IO[str] | None = None,
    collect_messages: bool = True,
    projection_eps: float = 1e-8,
) -> SolveReport:
    """Drive the exchange to the variational equilibrium of the bidding game.

    Stops when the squared step norm of the stacked intercepts and duals
    falls below ``stop_tol`` (scenario value, else 1e-5).  Step sizes come
    from the scenario when set and are validated against the convergence
    condition; otherwise the largest admissible equal steps are used.
    """
    profiles = list(profiles)
    act = game.active_profiles(profiles)
    n = len(act)
    consts = game.constants(act, scenario.alpha)
    rho_bar, nu_bar = game.max_step_sizes(consts)
    rho_n = getattr(scenario, "rho", None) or rho_bar
    nu_n = getattr(scenario, "nu", None) or nu_bar
    game.validate_step_sizes(consts, rho_n, nu_n)
    if stop_tol is None:
        stop_tol = getattr(scenario, "stop_tol", None) or 1e-5
    if max_iter is None:
        max_iter = getattr(scenario, "max_iter", None) or 100000

    beta0 = np.zeros(n) if init_beta is None else np.asarray(init_beta, dtype=float).copy()
    gamma0 = np.zeros(n) if init_gamma is None else np.asarray(init_gamma, dtype=float).copy()
    if beta0.shape != (n,) or gamma0.shape != (n,):
        raise ContractError(f"initial vectors must have shape ({n},)")
    if np.any(gamma0 < 0.0):
        raise ContractError("initial duals must be nonnegative")

    feasible = grid.assemble_feasible_set(network, profiles, scenario)
    workspace = qpsolve.ProjectionWorkspace(
        feasible, eps_pri=projection_eps, eps_dual=projection_eps
    )

    # the orchestrator wires the agents up; each one only ever holds the
    # data its market role is entitled to
    consumers = [
        _ConsumerAgent(p, consts, rho_n, nu_n, beta0[i], gamma0[i])
        for i, p in enumerate(act)
    ]
    brp = _BrpAgent(scenario.x_tot, scenario.alpha, n)
    dso = _DsoAgent(workspace)
    log = MessageLog() if collect_messages else None

    def post(sender, receiver, kind, payload):
        if log is not None:
            log.send(sender, receiver, kind, payload)

    # initialization: consumers submit starting bids and duals, the market
    # operator broadcasts the opening price and dual aggregate
    for i, c in enumerate(consumers):
        role = _consumer_role(c.profile.id)
        post(role, BRP, BID, c.beta)
        post(role, BRP, DUAL, c.gamma)
        brp.beta[i] = c.beta
        brp.gamma[i] = c.gamma
    price = brp.clear_price()
    dual_sum = brp.dual_sum()
    for c in consumers:
        role = _consumer_role(c.profile.id)
        post(BRP, role, PRICE, price)
        post(BRP, role, DUAL_SUM, dual_sum)
        c.price = price
        c.dual_sum = dual_sum
        c.x_prev = c.implied_allocation()

    residual_history: list[float] = []
    price_history: list[float] = [price]
    balance_error = 0.0
    termination = MAX_ITER
    failure_reason = None
    iterations = 0
    state = AlgorithmState(
        k=0,
        beta=brp.beta.copy(),
        gamma=brp.gamma.copy(),
        price=price,
        x_prev=market.allocate(brp.beta, scenario.x_tot),
        x_curr=market.allocate(brp.beta, scenario.x_tot),
    )

    for k in range(max_iter):
        beta_old = brp.beta.copy()
        gamma_old = brp.gamma.copy()

        # phase 1: independent bid modifications
        beta_tilde = np.empty(n)
        for i, c in enumerate(consumers):
            beta_tilde[i] = c.modify_bid()
            post(_consumer_role(c.profile.id), BRP, BID, beta_tilde[i])

        # phase 2: security enforcement by the system operator
        post(BRP, DSO, BID, beta_tilde.copy())
        try:
            beta_new = dso.enforce(beta_tilde)
        except ProjectionFailureError as exc:
            termination = PROJECTION_FAILURE
            failure_reason = str(exc)
            iterations = k + 1
            break
        post(DSO, BRP, CORRECTED_BID, beta_new.copy())
        brp.beta = beta_new.copy()

        # phase 3: price update and broadcast of corrected bids
        price = brp.clear_price()
        price_history.append(price)
        for i, c in enumerate(consumers):
            role = _consumer_role(c.profile.id)
            post(BRP, role, CORRECTED_BID, beta_new[i])
            post(BRP, role, PRICE, price)
            c.beta = beta_new[i]
            c.price = price

        # every allocation broadcast balances the requested total exactly
        x_curr = np.array([c.implied_allocation() for c in consumers])
        balance_error = max(
            balance_error, abs(x_curr.sum() - scenario.x_tot) / max(1.0, scenario.x_tot)
        )

        # phase 4: local dual updates and aggregate broadcast
        for i, c in enumerate(consumers):
            gamma_i = c.update_dual()
            post(_consumer_role(c.profile.id), BRP, DUAL, gamma_i)
            brp.gamma[i] = gamma_i
        dual_sum = brp.dual_sum()
        for c in consumers:
            post(BRP, _consumer_role(c.profile.id), DUAL_SUM, dual_sum)
            c.dual_sum = dual_sum

        res = float(
            np.sum((brp.beta - beta_old) ** 2) + np.sum((brp.gamma - gamma_old) ** 2)
        )
        residual_history.append(res)
        state.k = k + 1
        state.beta = brp.beta.copy()
        state.gamma = brp.gamma.copy()
        state.price = price
        state.x_prev = state.x_curr
        state.x_curr = x_curr
        state.trajectory.append((k + 1, res, price))
        if trace is not None:
            trace.write(
                json.dumps(
                    {
                        "k": k + 1,
                        "dbeta2": float(np.sum((brp.beta - beta_old) ** 2)),
                        "dgamma2": float(np.sum((brp.gamma - gamma_old) ** 2)),
                        "price": price,
                    }
                )
                + "\n"
            )
        iterations = k + 1
        if res < stop_tol:
            termination = CONVERGED
            break

    x_star = market.allocate(brp.beta, scenario.x_tot)
    flags = {
        "negative_price": bool(price_history[-1] < 0.0),
        "marginal_cost_extrapolated": any(c.extrapolated for c in consumers),
    }
    violations = audit_messages(log) if log is not None else []
    return SolveReport(
        beta_star=brp.beta.copy(),
        x_star=x_star,
        lambda_star=price_history[-1],
        gamma_star=brp.gamma.copy(),
        iterations=iterations,
        termination=termination,
        residual_history=residual_history,
        price_history=price_history,
        balance_error=balance_error,
        flags=flags,
        audit_violations=violations,
        failure_reason=failure_reason,
    )
