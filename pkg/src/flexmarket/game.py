"""Consumer cost model, pseudo-gradient of the bidding game, and efficiency metrics.

Consumers carry linear-quadratic disutility ``C(x) = 0.5*a*x^2 + b_lin*x``
for providing ``x`` kWh of flexibility.  The stacked partial derivatives of
the per-consumer bidding objectives form the pseudo-gradient map ``F``; its
strong-monotonicity and Lipschitz constants drive both the uniqueness
condition on the slope ``alpha`` and the admissible step sizes of the
equilibrium-seeking iteration.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import market
from .errors import (
    ContractError,
    DegenerateInstanceError,
    DomainError,
    GameConditionError,
)

__all__ = [
    "ConsumerProfile",
    "GameConstants",
    "PoaResult",
    "active_profiles",
    "marginal_cost",
    "marginal_cost_extended",
    "pseudo_gradient",
    "player_objective",
    "constants",
    "max_step_sizes",
    "validate_step_sizes",
    "shadow_curvature",
    "total_cost",
    "poa",
]


@dataclass(frozen=True)
class ConsumerProfile:
    """Private data of one consumer.

    ``a`` and ``b_lin`` are the quadratic/linear cost coefficients in
    $/(kWh)^2 and $/kWh, ``x_hat`` the maximum flexibility an active
    consumer can deliver (kWh), ``d`` the predicted net active load over
    the market interval (kWh).  Passive consumers only contribute ``d``.
    """

    id: int
    bus_id: int
    a: float = 0.0
    b_lin: float = 0.0
    x_hat: float = 0.0
    d: float = 0.0
    active: bool = True

    def __post_init__(self):
        if self.a < 0.0:
            raise ValueError(f"consumer {self.id}: quadratic coefficient a must be >= 0")
        if self.active:
            if self.x_hat <= 0.0:
                raise ValueError(
                    f"consumer {self.id}: active consumers need x_hat > 0"
                )
            if self.b_lin < 0.0:
                raise ValueError(
                    f"consumer {self.id}: b_lin must be >= 0 so cost stays positive"
                )

    def cost(self, x: float) -> float:
        """Disutility of providing ``x`` kWh."""
        return 0.5 * self.a * x * x + self.b_lin * x


@dataclass(frozen=True)
class GameConstants:
    """Operator bounds of the pseudo-gradient map for a fixed population.

    ``eta_f`` is the strong-monotonicity constant, ``kappa_f`` the Lipschitz
    constant, ``kappa`` the marginal-cost Lipschitz bound used to derive both.
    """

    n_active: int
    alpha: float
    kappa: float
    eta_f: float
    kappa_f: float


@dataclass(frozen=True)
class PoaResult:
    """Efficiency ratio of the equilibrium allocation against the welfare optimum."""

    poa: float
    bound: float
    cost_equilibrium: float
    cost_optimum: float


def active_profiles(profiles: Iterable[ConsumerProfile]) -> list[ConsumerProfile]:
    """Active consumers sorted by id; this order indexes every bid vector."""
    act = sorted((p for p in profiles if p.active), key=lambda p: p.id)
    if len(act) < 2:
        raise GameConditionError("the game requires at least two active consumers")
    return act


def marginal_cost(profile: ConsumerProfile, x: float) -> float:
    """Marginal disutility ``a*x + b_lin`` on the declared range [0, x_hat]."""
    if not 0.0 <= x <= profile.x_hat:
        raise DomainError(
            f"consumer {profile.id}: x={x} outside [0, {profile.x_hat}]"
        )
    return profile.a * x + profile.b_lin


def marginal_cost_extended(profile: ConsumerProfile, x: float) -> float:
    """Marginal cost extended affinely outside [0, x_hat].

    Intermediate iterates may wander outside the feasible range before the
    dual variables activate; the affine extension keeps the pseudo-gradient
    globally defined with the same Lipschitz constant.
    """
    return profile.a * x + profile.b_lin


def _cost_arrays(act: Sequence[ConsumerProfile]) -> tuple[np.ndarray, np.ndarray]:
    return (
        np.array([p.a for p in act], dtype=float),
        np.array([p.b_lin for p in act], dtype=float),
    )


def pseudo_gradient(beta, profiles, alpha: float, x_tot: float) -> np.ndarray:
    """Stacked own-bid partial derivatives of the consumers' objectives.

    Component ``n`` equals
    ``C'_n(x_n)*(N-1)/N + ((sum(beta) - x_tot)*(N-2) + N*beta_n)/(alpha*N^2)``
    with ``x_n`` the allocation cleared from ``beta``.  Marginal costs are
    evaluated with the affine extension, so the map is defined for every beta.
    """
    act = active_profiles(profiles)
    n = len(act)
    arr = np.asarray(beta, dtype=float)
    if arr.shape != (n,):
        raise ContractError(f"expected bid vector of shape ({n},), got {arr.shape}")
    x = market.allocate(arr, x_tot)
    a_vec, b_vec = _cost_arrays(act)
    marginal = a_vec * x + b_vec
    coupling = ((arr.sum() - x_tot) * (n - 2) + n * arr) / (alpha * n * n)
    return marginal * (n - 1) / n + coupling


def player_objective(i: int, beta, profiles, alpha: float, x_tot: float) -> float:
    """Net cost consumer ``i`` minimizes when bidding strategically.

    Substituting the clearing price and allocation into cost-minus-payment
    gives ``C_i(x_i) - (x_tot - sum(beta) + N*beta_i)*(x_tot - sum(beta))/(alpha*N^2)``.
    """
    act = active_profiles(profiles)
    n = len(act)
    arr = np.asarray(beta, dtype=float)
    if arr.shape != (n,):
        raise ContractError(f"expected bid vector of shape ({n},), got {arr.shape}")
    t = x_tot - arr.sum()
    x_i = t / n + arr[i]
    cost = act[i].cost(x_i)
    return float(cost - (t + n * arr[i]) * t / (alpha * n * n))


def constants(profiles, alpha: float, kappa: float | None = None) -> GameConstants:
    """Monotonicity and Lipschitz constants for the population and slope.

    ``kappa`` defaults to ``max_n a_n``; an override must not be below that
    value (a looser bound only shrinks the admissible step sizes).  Raises
    when ``alpha >= 2/(kappa*(N-1))``, the threshold beyond which uniqueness
    of the equilibrium and convergence of the iteration are no longer
    guaranteed.
    """
    act = active_profiles(profiles)
    n = len(act)
    kappa_data = max(p.a for p in act)
    if kappa is None:
        kappa = kappa_data
    elif kappa < kappa_data:
        raise GameConditionError(
            f"kappa override {kappa} is below the population's curvature bound {kappa_data}"
        )
    if alpha <= 0.0:
        raise GameConditionError("supply-function slope alpha must be positive")
    if kappa > 0.0 and alpha >= 2.0 / (kappa * (n - 1)):
        raise GameConditionError(
            f"alpha={alpha} violates alpha < 2/(kappa*(N-1)) = {2.0 / (kappa * (n - 1))}; "
            "a unique equilibrium and a monotone pseudo-gradient require the strict bound"
        )
    eta_f = 1.0 / (alpha * n) - kappa * (n - 1) / (2.0 * n)
    kappa_f = (n - 1) / n * (kappa + 1.0 / alpha)
    if eta_f <= 0.0:  # unreachable under the bound above; keep the guard explicit
        raise GameConditionError("pseudo-gradient monotonicity constant must be positive")
    return GameConstants(n_active=n, alpha=alpha, kappa=kappa, eta_f=eta_f, kappa_f=kappa_f)


def max_step_sizes(consts: GameConstants, margin: float = 0.9) -> tuple[float, float]:
    """Largest equal primal/dual step sizes passing the convergence inequality.

    With equal steps ``rho = nu = c`` the condition
    ``kappa_f^2/(2*eta_f) < 1/rho - nu`` reduces to ``c^2 + K*c - 1 < 0``
    with ``K = kappa_f^2/(2*eta_f)``; the returned value is ``margin`` times
    the positive root, so the strict inequality always holds.
    """
    if not 0.0 < margin < 1.0:
        raise ContractError("margin must lie in (0, 1)")
    if consts.eta_f <= 0.0:
        raise GameConditionError("monotonicity constant must be positive")
    k = consts.kappa_f**2 / (2.0 * consts.eta_f)
    c_star = (math.sqrt(k * k + 4.0) - k) / 2.0
    c = margin * c_star
    validate_step_sizes(consts, c, c)
    return c, c


def validate_step_sizes(consts: GameConstants, rho_bar: float, nu_bar: float) -> None:
    """Reject step sizes violating ``kappa_f^2/(2*eta_f) < 1/rho_bar - nu_bar``."""
    if rho_bar <= 0.0 or nu_bar <= 0.0:
        raise GameConditionError("step sizes must be positive")
    k = consts.kappa_f**2 / (2.0 * consts.eta_f)
    if not k < 1.0 / rho_bar - nu_bar:
        raise GameConditionError(
            f"step sizes rho={rho_bar}, nu={nu_bar} violate the convergence "
            f"condition {k} < 1/rho - nu = {1.0 / rho_bar - nu_bar}"
        )


def shadow_curvature(alpha: float, n_active: int) -> float:
    """Curvature ``1/(alpha*(N-1))`` of the strategic-markup term.

    Adding ``x^2/(2*alpha*(N-1))`` to each true cost turns the welfare
    problem into one whose optimum reproduces the equilibrium allocation;
    the inflated cost is what a self-interested consumer implicitly reports.
    """
    if n_active < 2:
        raise GameConditionError("at least two active consumers required")
    if alpha <= 0.0:
        raise GameConditionError("supply-function slope alpha must be positive")
    return 1.0 / (alpha * (n_active - 1))


def total_cost(profiles, x) -> float:
    """Population cost ``sum_n C_n(x_n)`` over the active consumers."""
    act = active_profiles(profiles)
    arr = np.asarray(x, dtype=float)
    if arr.shape != (len(act),):
        raise ContractError(f"expected allocation of shape ({len(act)},), got {arr.shape}")
    a_vec, b_vec = _cost_arrays(act)
    return float(np.sum(0.5 * a_vec * arr**2 + b_vec * arr))


def poa(profiles, alpha: float, x_equilibrium, x_optimum) -> PoaResult:
    """Price of anarchy with its structural upper bound.

    Returns the cost ratio equilibrium/optimum together with
    ``1 + (1/(2*alpha*(N-1))) * sum(x_opt^2)/sum(C(x_opt))``.  Raises when
    the optimum carries no cost (ratio undefined) or when the ratio exceeds
    the bound, which signals the inputs are not a matching pair.
    """
    act = active_profiles(profiles)
    x_opt = np.asarray(x_optimum, dtype=float)
    cost_opt = total_cost(act, x_opt)
    cost_eq = total_cost(act, x_equilibrium)
    if cost_opt <= 0.0:
        raise DegenerateInstanceError(
            "optimal allocation carries no cost; efficiency ratio undefined"
        )
    ratio = cost_eq / cost_opt
    bound = 1.0 + float(np.sum(x_opt**2)) / (2.0 * alpha * (len(act) - 1) * cost_opt)
    if not ratio < bound:
        raise GameConditionError(
            f"efficiency ratio {ratio} reached its structural bound {bound}; "
            "inputs are not a matching equilibrium/optimum pair"
        )
    return PoaResult(poa=ratio, bound=bound, cost_equilibrium=cost_eq, cost_optimum=cost_opt)
