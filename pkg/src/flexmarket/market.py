"""Supply-function bidding and pay-as-clear clearing.

Active consumers offer flexibility through linear supply functions
``x_n = alpha * price + beta_n`` with a common operator-imposed slope
``alpha``; the intercept ``beta_n`` is the strategic variable of each
consumer.  The operator clears at the single price that balances the
offered flexibility against the requested total ``x_tot``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, GameConditionError

__all__ = [
    "Bid",
    "ClearingResult",
    "clearing_price",
    "allocate",
    "allocation_matrix",
    "clear",
    "alpha_from_delta",
]


@dataclass(frozen=True)
class Bid:
    """One consumer's linear supply offer ``x = alpha * price + beta``."""

    consumer_id: int
    beta: float
    alpha: float

    def __post_init__(self):
        if self.alpha <= 0.0:
            raise GameConditionError("supply-function slope alpha must be positive")


@dataclass(frozen=True)
class ClearingResult:
    """Pay-as-clear outcome: uniform price and per-consumer allocation (kWh)."""

    price: float
    x: np.ndarray


def _as_bid_vector(beta) -> np.ndarray:
    arr = np.asarray(beta, dtype=float)
    if arr.ndim != 1:
        raise ContractError(f"bid vector must be 1-D, got shape {arr.shape}")
    if arr.size < 2:
        raise GameConditionError(
            "clearing requires at least two active consumers (N >= 2)"
        )
    return arr


def clearing_price(beta, alpha: float, x_tot: float) -> float:
    """Uniform price clearing intercepts ``beta`` against demand ``x_tot``.

    Equals ``(x_tot - sum(beta)) / (alpha * N)``; may be negative when the
    submitted intercepts already exceed the requested total.
    """
    arr = _as_bid_vector(beta)
    if alpha <= 0.0:
        raise GameConditionError("supply-function slope alpha must be positive")
    return float((x_tot - arr.sum()) / (alpha * arr.size))


def allocate(beta, x_tot: float) -> np.ndarray:
    """Flexibility allocated to each consumer: ``(x_tot - sum(beta))/N + beta``."""
    arr = _as_bid_vector(beta)
    return (x_tot - arr.sum()) / arr.size + arr


def allocation_matrix(n_consumers: int, x_tot: float) -> tuple[np.ndarray, np.ndarray]:
    """Affine map ``x = A beta + b`` behind :func:`allocate`.

    ``A = I - (1/N) 11^T`` is the centering projector, ``b = (x_tot/N) 1``.
    """
    if n_consumers < 2:
        raise GameConditionError(
            "clearing requires at least two active consumers (N >= 2)"
        )
    n = int(n_consumers)
    a = np.eye(n) - np.full((n, n), 1.0 / n)
    b = np.full(n, x_tot / n)
    return a, b


def clear(beta, alpha: float, x_tot: float) -> ClearingResult:
    """Price and allocation together; ``x = alpha * price + beta`` by construction."""
    return ClearingResult(price=clearing_price(beta, alpha, x_tot), x=allocate(beta, x_tot))


def alpha_from_delta(delta: float, kappa: float, n_consumers: int) -> float:
    """Slope from a fraction ``delta`` of the monotonicity bound ``2/(kappa*(N-1))``.

    The operator may publish the slope as a dimensionless ``delta`` in (0, 1);
    the resulting alpha always satisfies the uniqueness condition.
    """
    if not 0.0 < delta < 1.0:
        raise GameConditionError("delta must lie strictly inside (0, 1)")
    if kappa <= 0.0:
        raise GameConditionError("kappa must be positive to derive alpha from delta")
    if n_consumers < 2:
        raise GameConditionError("at least two active consumers required")
    return delta * 2.0 / (kappa * (n_consumers - 1))
