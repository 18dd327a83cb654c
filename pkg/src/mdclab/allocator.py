"""Two-description CTU bit allocation.

For each description ``j`` the allocator minimizes

    sum_i C_ij * a_i * exp(b_i * R_ij)   subject to   sum_i R_ij = R_t / 2,
                                                      r_min_i <= R_ij <= r_max_i

where ``C_ij = 1 - p_e`` for the CTUs the description carries as principal and
``p_e * (1 - p_e)`` for the redundant ones.  For a fixed multiplier the cost
separates per CTU and the stationary rate has the closed form
``ln(lambda / (C a |b|)) / b``, clipped to the CTU's rate box.  The lateral
rate is non-increasing in lambda, so lambda is found by bisection.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .codec import QP_MAX, QP_MIN, CtuGrid
from .errors import BracketExpansionFailed, DegenerateGrid, InfeasibleTarget, InvalidModel
from .rdmodel import CtuRdModel

LAMBDA_BRACKET = (1e-8, 1e8)
MAX_EXPANSIONS = 200
MAX_ITERATIONS = 1000

ALLOCATION_CSV_COLUMNS = ["frame", "desc", "ctu", "role", "c", "a", "b", "lambda", "r_star", "qp"]


@dataclass(frozen=True)
class ChannelState:
    p_e: float

    def __post_init__(self):
        if not 0.0 <= self.p_e <= 1.0:
            raise ValueError(f"p_e must lie in [0, 1], got {self.p_e}")

    @property
    def c_principal(self) -> float:
        return 1.0 - self.p_e

    @property
    def c_redundant(self) -> float:
        return self.p_e * (1.0 - self.p_e)


@dataclass(frozen=True)
class RoleAssignment:
    """Principal CTU indices of each description; everything else is redundant."""

    n: int
    principal: Tuple[frozenset, frozenset]

    def redundant(self, j: int) -> frozenset:
        return frozenset(range(self.n)) - self.principal[j]

    def principal_mask(self, j: int) -> np.ndarray:
        m = np.zeros(self.n, dtype=bool)
        m[list(self.principal[j])] = True
        return m

    def swapped(self) -> "RoleAssignment":
        return RoleAssignment(self.n, (self.principal[1], self.principal[0]))


def assign_roles(grid: CtuGrid, pattern: str = "checkerboard") -> RoleAssignment:
    n = grid.n
    if n < 2:
        raise DegenerateGrid("complementary roles need at least two CTUs")
    if pattern == "checkerboard":
        first = {i for i in range(n) if sum(grid.row_col(i)) % 2 == 0}
    elif pattern == "column-alternating":
        first = {i for i in range(n) if grid.row_col(i)[1] % 2 == 0}
    else:
        raise ValueError(f"unknown role pattern {pattern!r}")
    second = set(range(n)) - first
    return RoleAssignment(n, (frozenset(first), frozenset(second)))


def role_coefficients(principal_mask: np.ndarray, channel: ChannelState) -> np.ndarray:
    return np.where(principal_mask, channel.c_principal, channel.c_redundant)


def stationary_rate(model: CtuRdModel, c: float, lam: float) -> float:
    """Root of ``c * a * b * exp(b * R) + lam = 0`` clipped to ``[r_min, r_max]``."""
    if not model.b < 0 or not model.a > 0:
        raise InvalidModel(f"CTU {model.index}: need a > 0 and b < 0, got a={model.a}, b={model.b}")
    if c == 0:
        return model.r_min
    if c < 0 or lam <= 0:
        raise ValueError("c and lambda must be positive")
    r = math.log(lam / (c * model.a * -model.b)) / model.b
    return min(max(r, model.r_min), model.r_max)


def _stationary_rates(a, b, c, r_min, r_max, lam: float) -> np.ndarray:
    with np.errstate(divide="ignore"):
        r = np.log(lam / (c * a * -b)) / b
    # c == 0 gives log(inf) / b = -inf, i.e. the lower clip
    return np.clip(r, r_min, r_max)


def _lbfgsb_rates(a, b, c, r_min, r_max, lam: float) -> np.ndarray:
    """Numerical minimizer of the per-lambda Lagrangian (cross-check path)."""
    from scipy.optimize import minimize

    def cost(r):
        d = c * a * np.exp(b * r)
        return float(d.sum() + lam * r.sum()), d * b + lam

    x0 = 0.5 * (r_min + r_max)
    res = minimize(
        cost,
        x0,
        jac=True,
        method="L-BFGS-B",
        bounds=list(zip(r_min, r_max)),
        options={"ftol": 1e-15, "gtol": 1e-12, "maxiter": 10000},
    )
    return np.clip(res.x, r_min, r_max)


@dataclass
class LateralSolution:
    lam: float
    rates: np.ndarray
    iterations: int
    converged: bool
    interpolated: bool = False


def default_epsilon(lateral_target: float) -> float:
    return max(8.0, 0.001 * lateral_target)


def solve_lateral(
    models: Sequence[CtuRdModel],
    c: Sequence[float],
    target: float,
    epsilon: Optional[float] = None,
    bracket: Tuple[float, float] = LAMBDA_BRACKET,
    endpoint_update: bool = False,
    inner: str = "closed-form",
    max_iter: int = MAX_ITERATIONS,
) -> LateralSolution:
    """Bisection on lambda so that the lateral rate hits ``target`` within ``epsilon``.

    ``endpoint_update`` switches to the literal endpoint updates
    ``hi <- (lam + lo) / 2`` / ``lo <- (lam + hi) / 2`` instead of plain
    midpoint replacement; that variant can lose the bracket and is kept only
    for comparison.
    """
    for m in models:
        if not (m.b < 0 and m.a > 0):
            raise InvalidModel(f"CTU {m.index}: need a > 0 and b < 0, got a={m.a}, b={m.b}")
    a = np.array([m.a for m in models], dtype=np.float64)
    b = np.array([m.b for m in models], dtype=np.float64)
    r_min = np.array([m.r_min for m in models], dtype=np.float64)
    r_max = np.array([m.r_max for m in models], dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if np.any(c < 0):
        raise ValueError("negative role coefficient")
    eps = default_epsilon(target) if epsilon is None else float(epsilon)

    if target < r_min.sum() - eps or target > r_max.sum() + eps:
        raise InfeasibleTarget(
            f"lateral target {target:.3f} outside [{r_min.sum():.3f}, {r_max.sum():.3f}]"
        )

    if inner == "closed-form":
        def rates(lam):
            return _stationary_rates(a, b, c, r_min, r_max, lam)
    elif inner == "lbfgsb":
        def rates(lam):
            return _lbfgsb_rates(a, b, c, r_min, r_max, lam)
    else:
        raise ValueError(f"unknown inner solver {inner!r}")

    lo, hi = float(bracket[0]), float(bracket[1])
    if not 0 < lo < hi:
        raise ValueError(f"bad lambda bracket {bracket}")
    expansions = 0
    r_lo = rates(lo)
    while r_lo.sum() < target - eps:
        if expansions >= MAX_EXPANSIONS:
            raise BracketExpansionFailed(f"rate at lambda={lo:g} stays below target")
        lo /= 2.0
        r_lo = rates(lo)
        expansions += 1
    r_hi = rates(hi)
    while r_hi.sum() > target + eps:
        if expansions >= MAX_EXPANSIONS:
            raise BracketExpansionFailed(f"rate at lambda={hi:g} stays above target")
        hi *= 2.0
        r_hi = rates(hi)
        expansions += 1

    lam, r = lo, r_lo
    for it in range(1, max_iter + 1):
        lam = 0.5 * (lo + hi)
        r = rates(lam)
        gap = r.sum() - target
        if abs(gap) <= eps:
            return LateralSolution(lam, r, it, True)
        if endpoint_update:
            if gap < 0:
                hi = 0.5 * (lam + lo)
            else:
                lo = 0.5 * (lam + hi)
            if lo >= hi:
                break
            continue
        if gap < 0:
            hi, r_hi = lam, r
        else:
            lo, r_lo = lam, r
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
    if endpoint_update:
        return LateralSolution(lam, r, it, False)

    # The interval collapsed on a jump of the rate map (near-flat models):
    # any convex combination of the two one-sided solutions is optimal there.
    s_lo, s_hi = r_lo.sum(), r_hi.sum()
    if s_lo == s_hi:
        return LateralSolution(lam, r_lo, it, abs(s_lo - target) <= eps)
    t = min(max((s_lo - target) / (s_lo - s_hi), 0.0), 1.0)
    r = r_lo + t * (r_hi - r_lo)
    return LateralSolution(0.5 * (lo + hi), r, it, abs(r.sum() - target) <= eps, True)


@dataclass(frozen=True)
class AllocationProblem:
    models: Tuple[CtuRdModel, ...]
    channel: ChannelState
    r_target: float
    qp_bounds: Tuple[int, int] = (QP_MIN, QP_MAX)
    epsilon: Optional[float] = None
    lambda_bracket: Tuple[float, float] = LAMBDA_BRACKET

    @property
    def lateral_target(self) -> float:
        return self.r_target / 2.0

    @property
    def eps(self) -> float:
        return default_epsilon(self.lateral_target) if self.epsilon is None else self.epsilon

    def check_feasible(self) -> None:
        lo = sum(m.r_min for m in self.models)
        hi = sum(m.r_max for m in self.models)
        if not lo <= self.lateral_target <= hi:
            raise InfeasibleTarget(
                f"R_t/2 = {self.lateral_target:.3f} outside [{lo:.3f}, {hi:.3f}]"
            )


@dataclass
class DescriptionAllocation:
    desc: int
    lam: float
    r_star: np.ndarray
    qp: np.ndarray
    principal: np.ndarray
    c: np.ndarray
    rate: float
    d_principal: float
    d_redundant: float
    iterations: int
    converged: bool

    @property
    def roles(self) -> List[str]:
        return ["principal" if p else "redundant" for p in self.principal]


@dataclass
class AllocationResult:
    p_e: float
    r_target: float
    epsilon: float
    descriptions: Tuple[DescriptionAllocation, DescriptionAllocation]
    models: Tuple[CtuRdModel, ...] = field(default=(), repr=False)

    def __getitem__(self, j: int) -> DescriptionAllocation:
        return self.descriptions[j]


def solve_description(
    problem: AllocationProblem,
    principal_mask: np.ndarray,
    j: int = 0,
    endpoint_update: bool = False,
    inner: str = "closed-form",
) -> LateralSolution:
    problem.check_feasible()
    c = role_coefficients(np.asarray(principal_mask, dtype=bool), problem.channel)
    return solve_lateral(
        problem.models,
        c,
        problem.lateral_target,
        problem.eps,
        problem.lambda_bracket,
        endpoint_update=endpoint_update,
        inner=inner,
    )


def describe_solution(problem, j, principal, sol) -> DescriptionAllocation:
    models = problem.models
    c = role_coefficients(principal, problem.channel)
    qmin, qmax = problem.qp_bounds
    qp = np.array([m.qp_for_rate(r, qmin, qmax) for m, r in zip(models, sol.rates)], dtype=np.int64)
    d = np.array([float(m.distortion(r)) for m, r in zip(models, sol.rates)])
    return DescriptionAllocation(
        desc=j,
        lam=sol.lam,
        r_star=sol.rates,
        qp=qp,
        principal=principal,
        c=c,
        rate=float(sol.rates.sum()),
        d_principal=float(d[principal].sum()),
        d_redundant=float(d[~principal].sum()),
        iterations=sol.iterations,
        converged=sol.converged,
    )


def allocate_frame(
    problem: AllocationProblem,
    roles: RoleAssignment,
    endpoint_update: bool = False,
    inner: str = "closed-form",
) -> AllocationResult:
    if roles.n != len(problem.models):
        raise ValueError(f"{roles.n} roles for {len(problem.models)} models")
    if problem.channel.p_e >= 1.0:
        raise ValueError("allocation needs p_e < 1")
    out = []
    for j in (0, 1):
        mask = roles.principal_mask(j)
        sol = solve_description(problem, mask, j, endpoint_update, inner)
        out.append(describe_solution(problem, j, mask, sol))
    return AllocationResult(
        problem.channel.p_e, problem.r_target, problem.eps, tuple(out), tuple(problem.models)
    )


def expected_distortion(result: AllocationResult, channel: ChannelState, d_error: float = 0.0) -> float:
    p = channel.p_e
    d_p = sum(d.d_principal for d in result.descriptions)
    d_r = sum(d.d_redundant for d in result.descriptions)
    return (1.0 - p) * d_p + p * (1.0 - p) * d_r + p * p * d_error


@dataclass(frozen=True)
class IdrSchedule:
    period: int
    max_period: int

    def is_idr(self, frames_since_idr: Optional[int]) -> bool:
        return frames_since_idr is None or frames_since_idr >= self.period


def idr_period(channel: ChannelState, max_period: int = 250) -> IdrSchedule:
    if max_period < 1:
        raise ValueError("max_period must be >= 1")
    if channel.p_e == 0:
        return IdrSchedule(max_period, max_period)
    period = int(math.floor(1.0 / channel.p_e + 0.5))
    return IdrSchedule(min(max(period, 1), max_period), max_period)


def allocation_rows(frame: int, result: AllocationResult):
    for d in result.descriptions:
        for i, m in enumerate(result.models):
            yield [
                frame, d.desc + 1, i, "principal" if d.principal[i] else "redundant",
                repr(float(d.c[i])), repr(m.a), repr(m.b), repr(d.lam),
                repr(float(d.r_star[i])), int(d.qp[i]),
            ]


def write_allocation_csv(path, frame_results) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ALLOCATION_CSV_COLUMNS)
        for frame, result in frame_results:
            w.writerows(allocation_rows(frame, result))
