"""Structured convex QP engine: equality rows, boxes, and per-line disk limits.

One operator-splitting solver backs the feasible-set projection, the
welfare benchmark, and the inflated-cost benchmark, so the iterative
clearing and its verification oracles share a single certified numerical
core.

The equality block is eliminated once through an orthonormal null-space
basis (a cached factorization of the feasible subspace); the remaining box
and disk constraints become rows over the reduced coordinates and are
normalized so every constraint has unit leverage.  Each iteration then
alternates an equality-free quadratic step, solved through a cached KKT
factorization, with closed-form proximal steps: box clamping and exact
radial projection of each line-flow pair onto its capacity disk.  The
scheme is deterministic; the penalty parameter is rebalanced from the
residual ratio.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import lu_factor, lu_solve, null_space

from . import game, grid
from .errors import (
    ContractError,
    InfeasibleProgramError,
    ProjectionFailureError,
    SolverError,
)

__all__ = [
    "ConvexProgram",
    "Solution",
    "solve",
    "ProjectionWorkspace",
    "project_onto_psi",
    "solve_welfare",
    "solve_shadow",
    "OPTIMAL",
    "INFEASIBLE",
    "MAX_ITER",
]

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
MAX_ITER = "max_iter"

_RELAXATION = 1.6
_SIGMA = 1e-6
_ADAPT_PERIOD = 100
_ADAPT_DEADBAND = 5.0
_RHO_BOUNDS = (1e-6, 1e6)
_STALL_WINDOW = 1000
_DIVERGENCE_GROWTH = 1.5
_ZERO_ROW = 1e-11


@dataclass
class ConvexProgram:
    """Quadratic objective with equality, box, and disk blocks.

    Minimize ``0.5 y' quad y + lin' y + offset`` subject to
    ``eq_mat y = eq_rhs``, ``lower <= y <= upper`` and, for every disk
    ``(i, j, radius)``, ``y_i^2 + y_j^2 <= radius^2``.
    """

    quad: np.ndarray
    lin: np.ndarray
    eq_mat: np.ndarray | None = None
    eq_rhs: np.ndarray | None = None
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    disks: tuple[grid.DiskSpec, ...] = ()
    offset: float = 0.0

    def validate(self) -> None:
        n = self.lin.shape[0] if self.lin.ndim == 1 else -1
        if n <= 0:
            raise ContractError("linear term must be a nonempty 1-D vector")
        if self.quad.shape != (n, n):
            raise ContractError(f"quadratic term must have shape ({n},{n})")
        scale = 1.0 + float(np.abs(self.quad).max())
        if float(np.abs(self.quad - self.quad.T).max()) > 1e-10 * scale:
            raise ContractError("quadratic term must be symmetric")
        if float(np.linalg.eigvalsh(self.quad)[0]) < -1e-8 * scale:
            raise ContractError("quadratic term must be positive semidefinite")
        if (self.eq_mat is None) != (self.eq_rhs is None):
            raise ContractError("equality matrix and rhs must be given together")
        if self.eq_mat is not None:
            if self.eq_mat.ndim != 2 or self.eq_mat.shape[1] != n:
                raise ContractError(f"equality matrix must have {n} columns")
            if self.eq_rhs.shape != (self.eq_mat.shape[0],):
                raise ContractError("equality rhs length must match the row count")
        lower = self.lower if self.lower is not None else np.full(n, -np.inf)
        upper = self.upper if self.upper is not None else np.full(n, np.inf)
        if lower.shape != (n,) or upper.shape != (n,):
            raise ContractError("box bounds must have the variable dimension")
        if np.any(lower > upper):
            raise ContractError("box lower bounds must not exceed upper bounds")
        used: set[int] = set()
        for disk in self.disks:
            if disk.radius <= 0.0:
                raise ContractError("disk radii must be positive")
            for idx in (disk.i, disk.j):
                if not 0 <= idx < n:
                    raise ContractError(f"disk index {idx} out of range")
                if idx in used:
                    raise ContractError("disk index pairs must be disjoint")
                used.add(idx)
                if np.isfinite(lower[idx]) or np.isfinite(upper[idx]):
                    raise ContractError(
                        "disk-constrained coordinates must carry infinite box bounds"
                    )


@dataclass(frozen=True)
class Solution:
    """Certified solve outcome.

    ``x`` satisfies the equality block exactly (it lives in the eliminated
    subspace); ``set_dual`` is the multiplier of the box/disk block aligned
    with ``x``.  At ``optimal`` status the primal and dual residuals are
    below the requested tolerances and ``stationarity``/``complementarity``
    certify the KKT system of the original program.
    """

    x: np.ndarray
    eq_dual: np.ndarray
    set_dual: np.ndarray
    primal_residual: float
    dual_residual: float
    stationarity: float
    complementarity: float
    iterations: int
    status: str
    objective: float


class _SplittingCore:
    """Reusable workspace: structure is fixed, the linear term may change."""

    def __init__(self, program: ConvexProgram, rho: float | None = None):
        program.validate()
        self.n = program.lin.size
        self.offset = float(program.offset)
        self.quad = program.quad.astype(float)
        self.lin = program.lin.astype(float).copy()
        if program.eq_mat is None:
            self.eq_mat = np.zeros((0, self.n))
            self.eq_rhs = np.zeros(0)
        else:
            self.eq_mat = program.eq_mat.astype(float)
            self.eq_rhs = program.eq_rhs.astype(float)
        self.lower = (
            program.lower.astype(float) if program.lower is not None else np.full(self.n, -np.inf)
        )
        self.upper = (
            program.upper.astype(float) if program.upper is not None else np.full(self.n, np.inf)
        )
        self.disks = tuple(program.disks)
        self.eq_infeasible = False
        self.const_infeasible: str | None = None

        # eliminate the equality block: y = y_part + basis @ t
        if self.eq_mat.shape[0]:
            self.y_part, *_ = np.linalg.lstsq(self.eq_mat, self.eq_rhs, rcond=None)
            gap = float(np.abs(self.eq_mat @ self.y_part - self.eq_rhs).max())
            if gap > 1e-9 * (1.0 + float(np.abs(self.eq_rhs).max())):
                self.eq_infeasible = True
            self.basis = null_space(self.eq_mat)
        else:
            self.y_part = np.zeros(self.n)
            self.basis = np.eye(self.n)
        self.k = self.basis.shape[1]

        self._build_rows()
        self._set_reduced_objective()
        self.rho = float(rho) if rho is not None else 1.0
        if not self.eq_infeasible and self.const_infeasible is None and self.k:
            self._factorize()
        self.t = np.zeros(self.k)
        self.z = np.clip(np.zeros(self.m), self.row_lo, self.row_hi) if self.m else np.zeros(0)
        self.yd = np.zeros(self.m)

    def _build_rows(self) -> None:
        """Stack box and disk constraints as normalized rows over the reduced space.

        Rows whose reduced gradient vanishes are constants on the feasible
        subspace: they are checked once and dropped (or flagged infeasible).
        """
        rows: list[np.ndarray] = []
        lo: list[float] = []
        hi: list[float] = []
        owners: list[int] = []
        tol = 1e-9
        for i in range(self.n):
            if not (np.isfinite(self.lower[i]) or np.isfinite(self.upper[i])):
                continue
            row = self.basis[i]
            if float(np.abs(row).max()) <= _ZERO_ROW:
                const = self.y_part[i]
                if const < self.lower[i] - tol or const > self.upper[i] + tol:
                    self.const_infeasible = (
                        f"variable {i} is fixed at {const} by the equality block, "
                        f"outside [{self.lower[i]}, {self.upper[i]}]"
                    )
                continue
            rows.append(row)
            lo.append(self.lower[i] - self.y_part[i])
            hi.append(self.upper[i] - self.y_part[i])
            owners.append(i)
        disk_i: list[int] = []
        disk_j: list[int] = []
        disk_r: list[float] = []
        disk_off: list[tuple[float, float]] = []
        disk_owner: list[tuple[int, int]] = []
        for d in self.disks:
            gi = self.basis[d.i]
            gj = self.basis[d.j]
            if max(float(np.abs(gi).max()), float(np.abs(gj).max())) <= _ZERO_ROW:
                dist = float(np.hypot(self.y_part[d.i], self.y_part[d.j]))
                if dist > d.radius + tol:
                    self.const_infeasible = (
                        f"line-flow pair ({d.i},{d.j}) is fixed at magnitude {dist} "
                        f"by the equality block, above its capacity {d.radius}"
                    )
                continue
            disk_i.append(len(rows))
            rows.append(gi)
            lo.append(-np.inf)
            hi.append(np.inf)
            owners.append(d.i)
            disk_j.append(len(rows))
            rows.append(gj)
            lo.append(-np.inf)
            hi.append(np.inf)
            owners.append(d.j)
            disk_r.append(d.radius)
            disk_off.append((self.y_part[d.i], self.y_part[d.j]))
            disk_owner.append((d.i, d.j))
        self.m = len(rows)
        self.rows = np.array(rows) if rows else np.zeros((0, self.k))
        self.row_owner = np.array(owners, dtype=int)
        self.disk_i = np.array(disk_i, dtype=int)
        self.disk_j = np.array(disk_j, dtype=int)
        self.disk_r = np.array(disk_r)
        self.disk_off = np.array(disk_off) if disk_off else np.zeros((0, 2))
        self.disk_owner = disk_owner

        norms = np.linalg.norm(self.rows, axis=1) if self.m else np.zeros(0)
        norms[norms < _ZERO_ROW] = 1.0
        if self.disk_i.size:
            shared = np.sqrt(norms[self.disk_i] * norms[self.disk_j])
            norms[self.disk_i] = shared
            norms[self.disk_j] = shared
        self.row_scale = 1.0 / norms
        self.rows = self.row_scale[:, None] * self.rows
        self.row_lo = self.row_scale * np.asarray(lo)
        self.row_hi = self.row_scale * np.asarray(hi)

    def _set_reduced_objective(self) -> None:
        self.quad_t = self.basis.T @ self.quad @ self.basis
        self.lin_t = self.basis.T @ (self.quad @ self.y_part + self.lin)

    def _factorize(self) -> None:
        k, m = self.k, self.m
        if m:
            kkt = np.zeros((k + m, k + m))
            kkt[:k, :k] = self.quad_t + _SIGMA * np.eye(k)
            kkt[:k, k:] = self.rows.T
            kkt[k:, :k] = self.rows
            kkt[k:, k:] = -np.eye(m) / self.rho
            self._lu = lu_factor(kkt)
        else:
            self._lu = lu_factor(self.quad_t + _SIGMA * np.eye(k))

    def set_lin(self, lin: np.ndarray) -> None:
        if lin.shape != (self.n,):
            raise ContractError(f"linear term must have shape ({self.n},)")
        self.lin = lin.astype(float)
        self.lin_t = self.basis.T @ (self.quad @ self.y_part + self.lin)

    def _project_rows(self, w: np.ndarray) -> np.ndarray:
        z = np.clip(w, self.row_lo, self.row_hi)
        if self.disk_i.size:
            pi = z[self.disk_i] / self.row_scale[self.disk_i] + self.disk_off[:, 0]
            pj = z[self.disk_j] / self.row_scale[self.disk_j] + self.disk_off[:, 1]
            norms = np.hypot(pi, pj)
            over = norms > self.disk_r
            if np.any(over):
                shrink = self.disk_r[over] / norms[over]
                pi = pi[over] * shrink
                pj = pj[over] * shrink
                z[self.disk_i[over]] = (pi - self.disk_off[over, 0]) * self.row_scale[
                    self.disk_i[over]
                ]
                z[self.disk_j[over]] = (pj - self.disk_off[over, 1]) * self.row_scale[
                    self.disk_j[over]
                ]
        return z

    def run(self, eps_pri: float, eps_dual: float, max_iter: int) -> Solution:
        if self.eq_infeasible:
            return self._finish(INFEASIBLE, 0, np.inf, np.inf)
        if self.const_infeasible is not None:
            return self._finish(INFEASIBLE, 0, np.inf, np.inf)
        if self.k == 0:
            # equality block pins the single candidate point
            return self._finish(OPTIMAL, 0, 0.0, 0.0)
        if self.m == 0:
            # unconstrained on the feasible subspace: regularized solves refine fast
            for it in range(1, 65):
                self.t = lu_solve(self._lu, _SIGMA * self.t - self.lin_t)
                r_dual = float(np.linalg.norm(self.quad_t @ self.t + self.lin_t))
                if r_dual <= eps_dual:
                    break
            return self._finish(OPTIMAL, it, 0.0, r_dual)
        status = MAX_ITER
        best_res = np.inf
        stall = 0
        yd_ref = float(np.linalg.norm(self.yd))
        r_pri = np.inf
        r_dual = np.inf
        it = 0
        for it in range(1, max_iter + 1):
            rhs = np.concatenate([_SIGMA * self.t - self.lin_t, self.z - self.yd / self.rho])
            sol = lu_solve(self._lu, rhs)
            t_hat = sol[: self.k]
            nu_hat = sol[self.k :]
            if not np.all(np.isfinite(t_hat)):
                raise SolverError("KKT solve produced non-finite values")
            w_hat = self.z + (nu_hat - self.yd) / self.rho
            self.t = _RELAXATION * t_hat + (1.0 - _RELAXATION) * self.t
            w_rel = _RELAXATION * w_hat + (1.0 - _RELAXATION) * self.z
            z_new = self._project_rows(w_rel + self.yd / self.rho)
            self.yd = self.yd + self.rho * (w_rel - z_new)
            self.z = z_new
            # residuals in original constraint/variable units
            r_pri = float(np.linalg.norm((self.rows @ self.t - self.z) / self.row_scale))
            r_dual = float(
                np.linalg.norm(self.quad_t @ self.t + self.lin_t + self.rows.T @ self.yd)
            )
            if r_pri <= eps_pri and r_dual <= eps_dual:
                status = OPTIMAL
                break
            if max(r_pri, r_dual) < 0.9999 * best_res:
                best_res = max(r_pri, r_dual)
                stall = 0
                yd_ref = float(np.linalg.norm(self.yd))
            else:
                stall += 1
                if stall >= _STALL_WINDOW:
                    yd_now = float(np.linalg.norm(self.yd))
                    if r_pri > 10.0 * eps_pri and yd_now > _DIVERGENCE_GROWTH * (yd_ref + 1.0):
                        status = INFEASIBLE
                        break
                    stall = 0
                    best_res = np.inf
            if it % _ADAPT_PERIOD == 0 and r_dual > 0.0:
                ratio = float(np.sqrt(max(r_pri, 1e-30) / max(r_dual, 1e-30)))
                if ratio > _ADAPT_DEADBAND or ratio < 1.0 / _ADAPT_DEADBAND:
                    new_rho = float(np.clip(self.rho * np.clip(ratio, 0.1, 10.0), *_RHO_BOUNDS))
                    if new_rho != self.rho:
                        self.rho = new_rho
                        self._factorize()
        return self._finish(status, it, r_pri, r_dual)

    def _finish(self, status: str, iterations: int, r_pri: float, r_dual: float) -> Solution:
        y = self.y_part + self.basis @ self.t
        # set-block multiplier mapped back to variable space
        nu = np.zeros(self.n)
        if self.m:
            contrib = self.row_scale * self.yd
            np.add.at(nu, self.row_owner, contrib)
        # recover equality multipliers from stationarity
        grad = self.quad @ y + self.lin + nu
        if self.eq_mat.shape[0]:
            mu, *_ = np.linalg.lstsq(self.eq_mat.T, -grad, rcond=None)
            grad = grad + self.eq_mat.T @ mu
        else:
            mu = np.zeros(0)
        stationarity = float(np.abs(grad).max()) if self.n else 0.0

        eq_res = (
            float(np.abs(self.eq_mat @ y - self.eq_rhs).max()) if self.eq_mat.shape[0] else 0.0
        )
        box_res = float(
            np.maximum(
                np.maximum(self.lower - y, 0.0), np.maximum(y - self.upper, 0.0)
            ).max()
        ) if self.n else 0.0
        disk_res = 0.0
        comp = 0.0
        for idx in range(self.n):
            finite_lo = np.isfinite(self.lower[idx])
            finite_hi = np.isfinite(self.upper[idx])
            if not (finite_lo or finite_hi):
                continue
            pos = max(nu[idx], 0.0)
            neg = max(-nu[idx], 0.0)
            up = pos * max(self.upper[idx] - y[idx], 0.0) if finite_hi else pos
            dn = neg * max(y[idx] - self.lower[idx], 0.0) if finite_lo else neg
            comp = max(comp, up, dn)
        for d in self.disks:
            pair_y = np.array([y[d.i], y[d.j]])
            pair_nu = np.array([nu[d.i], nu[d.j]])
            disk_res = max(disk_res, float(np.linalg.norm(pair_y)) - d.radius)
            norm2 = float(pair_y @ pair_y)
            eta = float(pair_nu @ pair_y) / (2.0 * norm2) if norm2 > 1e-24 else 0.0
            comp = max(
                comp,
                abs(eta) * abs(norm2 - d.radius**2),
                float(np.linalg.norm(pair_nu - 2.0 * eta * pair_y)),
                max(-eta, 0.0),
            )
        primal = max(eq_res, box_res, max(disk_res, 0.0))
        objective = float(0.5 * y @ self.quad @ y + self.lin @ y + self.offset)
        return Solution(
            x=y,
            eq_dual=mu,
            set_dual=nu,
            primal_residual=primal,
            dual_residual=float(r_dual),
            stationarity=stationarity,
            complementarity=comp,
            iterations=iterations,
            status=status,
            objective=objective,
        )


def solve(
    program: ConvexProgram,
    eps_pri: float = 1e-8,
    eps_dual: float = 1e-8,
    max_iter: int = 50000,
    rho: float | None = None,
) -> Solution:
    """Solve one structured QP to the requested absolute residual tolerances."""
    core = _SplittingCore(program, rho=rho)
    return core.run(eps_pri, eps_dual, max_iter)


class ProjectionWorkspace:
    """Repeated Euclidean projections onto one feasible set.

    The null-space elimination, row normalization, and KKT factorization are
    built once; each call only swaps the linear term and restarts the
    splitting from the previous iterate, which is what makes the projection
    step of the clearing iteration cheap.
    """

    def __init__(
        self,
        feasible_set: grid.FeasibleSet,
        eps_pri: float = 1e-8,
        eps_dual: float = 1e-8,
        max_iter: int = 50000,
    ):
        self.feasible_set = feasible_set
        self.eps_pri = eps_pri
        self.eps_dual = eps_dual
        self.max_iter = max_iter
        self._beta_slice = feasible_set.layout["beta"]
        quad = np.zeros((feasible_set.n_vars, feasible_set.n_vars))
        quad[self._beta_slice, self._beta_slice] = np.eye(feasible_set.n_active)
        self._core = _SplittingCore(
            ConvexProgram(
                quad=quad,
                lin=np.zeros(feasible_set.n_vars),
                eq_mat=feasible_set.eq_mat,
                eq_rhs=feasible_set.eq_rhs,
                lower=feasible_set.lower,
                upper=feasible_set.upper,
                disks=feasible_set.disks,
            )
        )
        self.last_solution: Solution | None = None

    def project(self, beta_tilde) -> np.ndarray:
        beta_tilde = np.asarray(beta_tilde, dtype=float)
        n = self.feasible_set.n_active
        if beta_tilde.shape != (n,):
            raise ContractError(f"expected bid vector of shape ({n},)")
        lin = np.zeros(self.feasible_set.n_vars)
        lin[self._beta_slice] = -beta_tilde
        self._core.set_lin(lin)
        sol = self._core.run(self.eps_pri, self.eps_dual, self.max_iter)
        self.last_solution = sol
        if sol.status != OPTIMAL:
            raise ProjectionFailureError(
                f"projection ended with status '{sol.status}' "
                f"(primal {sol.primal_residual:.3e}, dual {sol.dual_residual:.3e})"
            )
        return sol.x[self._beta_slice].copy()


def project_onto_psi(
    beta_tilde,
    feasible_set: grid.FeasibleSet,
    workspace: ProjectionWorkspace | None = None,
    eps_pri: float = 1e-8,
    eps_dual: float = 1e-8,
    max_iter: int = 50000,
) -> np.ndarray:
    """Closest point of the operator-side feasible set to ``beta_tilde``.

    Auxiliary variables (allocation, angles, magnitudes, flows, slack
    injections) are internal; only the corrected intercepts are returned.
    """
    ws = workspace or ProjectionWorkspace(
        feasible_set, eps_pri=eps_pri, eps_dual=eps_dual, max_iter=max_iter
    )
    return ws.project(beta_tilde)


def _solve_allocation_program(
    profiles,
    network: grid.DistributionNetwork | None,
    scenario,
    extra_curvature: float,
    eps_pri: float,
    eps_dual: float,
    max_iter: int,
):
    act = game.active_profiles(profiles)
    cap_total = sum(p.x_hat for p in act)
    if cap_total < scenario.x_tot:
        raise InfeasibleProgramError(
            f"total flexibility caps {cap_total} cannot absorb x_tot={scenario.x_tot}",
            block="caps",
        )
    alloc_set = grid.assemble_allocation_set(network, profiles, scenario)
    a_vec = np.array([p.a for p in act]) + extra_curvature
    b_vec = np.array([p.b_lin for p in act])
    quad = np.zeros((alloc_set.n_vars, alloc_set.n_vars))
    x_sl = alloc_set.layout["x"]
    quad[x_sl, x_sl] = np.diag(a_vec)
    lin = np.zeros(alloc_set.n_vars)
    lin[x_sl] = b_vec
    program = ConvexProgram(
        quad=quad,
        lin=lin,
        eq_mat=alloc_set.eq_mat,
        eq_rhs=alloc_set.eq_rhs,
        lower=alloc_set.lower,
        upper=alloc_set.upper,
        disks=alloc_set.disks,
    )
    sol = solve(program, eps_pri=eps_pri, eps_dual=eps_dual, max_iter=max_iter)
    if sol.status == INFEASIBLE:
        raise InfeasibleProgramError(
            "network security rows admit no allocation meeting the balance",
            block="network" if alloc_set.network_enabled else "equality",
        )
    if sol.status != OPTIMAL:
        raise SolverError("benchmark solve hit the iteration budget without a certificate")
    return sol.x[x_sl].copy(), sol, alloc_set


def solve_welfare(
    profiles,
    network: grid.DistributionNetwork | None,
    scenario,
    eps_pri: float = 1e-8,
    eps_dual: float = 1e-8,
    max_iter: int = 50000,
    details: bool = False,
):
    """Cost-minimal allocation honoring caps, balance, and network limits."""
    x, sol, alloc_set = _solve_allocation_program(
        profiles, network, scenario, 0.0, eps_pri, eps_dual, max_iter
    )
    return (x, sol, alloc_set) if details else x


def solve_shadow(
    profiles,
    network: grid.DistributionNetwork | None,
    scenario,
    eps_pri: float = 1e-8,
    eps_dual: float = 1e-8,
    max_iter: int = 50000,
    details: bool = False,
):
    """Allocation minimizing the markup-inflated costs over the same set.

    Inflating each cost by ``x^2/(2*alpha*(N-1))`` makes the optimizer
    coincide with the equilibrium allocation of the bidding game, which is
    what makes this solve the reference oracle for the iterative clearing.
    """
    act = game.active_profiles(profiles)
    curvature = game.shadow_curvature(scenario.alpha, len(act))
    x, sol, alloc_set = _solve_allocation_program(
        profiles, network, scenario, curvature, eps_pri, eps_dual, max_iter
    )
    return (x, sol, alloc_set) if details else x
