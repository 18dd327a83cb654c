"""Frame encoder: prediction, R-D regression, allocation, coding, packetization.

The prediction of every CTU is computed once from the central reconstruction
of the previous frame and shared by both descriptions; the per-CTU models are
fitted on that residual before the descriptions are built.  After coding,
the central reconstruction keeps the principal copy of each CTU and becomes
the next frame's reference.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .allocator import (
    AllocationProblem,
    AllocationResult,
    ChannelState,
    RoleAssignment,
    allocate_frame,
    describe_solution,
    solve_description,
)
from .channel import Packet, packetize
from .codec import (
    QP_MAX,
    QP_MIN,
    CodedCtu,
    CtuGrid,
    ResidualCtu,
    predict_ctu,
    quantize_and_code,
)
from .errors import InfeasibleTarget
from .rdmodel import DEFAULT_SWEEP, CtuRdModel, fit_exponential, sweep_ctu
from .source import FramePlane

log = logging.getLogger(__name__)

MDC = "mdc"
SDC_DUPLICATED = "single-description-duplicated"
SDC_ONE_CHANNEL = "single-description-one-channel"
LAYOUTS = (MDC, SDC_DUPLICATED, SDC_ONE_CHANNEL)

GUARD_QP_SPAN = 6


@dataclass
class EncodedFrame:
    index: int
    idr: bool
    p_e: float
    lateral_target: float
    clamped: bool
    models: List[CtuRdModel]
    allocation: AllocationResult
    coded: Tuple[List[CodedCtu], List[CodedCtu]]
    packets: Tuple[List[Packet], List[Packet]]
    central: FramePlane
    sides: Tuple[FramePlane, FramePlane]
    d_error: int
    guard_adjustments: int

    @property
    def rates(self) -> Tuple[int, int]:
        return tuple(sum(c.bits for c in cs) for cs in self.coded)


def principal_masks(layout: str, roles: RoleAssignment) -> Tuple[np.ndarray, np.ndarray]:
    n = roles.n
    if layout == MDC:
        return roles.principal_mask(0), roles.principal_mask(1)
    if layout == SDC_DUPLICATED:
        return np.ones(n, bool), np.ones(n, bool)
    if layout == SDC_ONE_CHANNEL:
        return np.ones(n, bool), np.zeros(n, bool)
    raise ValueError(f"unknown layout {layout!r}")


def _sse(a: np.ndarray, b: np.ndarray) -> int:
    d = a.astype(np.int64) - b.astype(np.int64)
    return int((d * d).sum())


class MdcEncoder:
    def __init__(
        self,
        grid: CtuGrid,
        roles: RoleAssignment,
        layout: str = MDC,
        qp_sweep: Sequence[int] = DEFAULT_SWEEP,
        qp_bounds: Tuple[int, int] = (QP_MIN, QP_MAX),
        ctus_per_nalu: Optional[int] = None,
        epsilon: Optional[float] = None,
        rate_policy: str = "strict",
        endpoint_bisection: bool = False,
    ):
        if layout not in LAYOUTS:
            raise ValueError(f"unknown layout {layout!r}")
        if rate_policy not in ("strict", "clamp"):
            raise ValueError(f"unknown rate policy {rate_policy!r}")
        self.grid = grid
        self.roles = roles
        self.layout = layout
        self.masks = principal_masks(layout, roles)
        self.qp_sweep = tuple(qp_sweep)
        self.qp_bounds = tuple(qp_bounds)
        self.ctus_per_nalu = ctus_per_nalu or grid.n
        self.epsilon = epsilon
        self.rate_policy = rate_policy
        self.endpoint_bisection = endpoint_bisection
        self.reference: Optional[FramePlane] = None
        self._seq = [0, 0]

    def _lateral_target(self, models, r_target: float) -> Tuple[float, bool]:
        target = r_target if self.layout == SDC_ONE_CHANNEL else r_target / 2.0
        lo = sum(m.r_min for m in models)
        hi = sum(m.r_max for m in models)
        if lo <= target <= hi:
            return target, False
        if self.rate_policy == "strict":
            raise InfeasibleTarget(
                f"lateral target {target:.1f} bits outside feasible [{lo:.1f}, {hi:.1f}]"
            )
        clamped = min(max(target, lo), hi)
        log.info("lateral target %.1f clamped to %.1f", target, clamped)
        return clamped, True

    def _allocate(self, models, p_e: float, target: float) -> AllocationResult:
        if self.layout == MDC:
            problem = AllocationProblem(
                tuple(models), ChannelState(p_e), 2.0 * target, self.qp_bounds, self.epsilon
            )
            return allocate_frame(problem, self.roles, endpoint_update=self.endpoint_bisection)
        # single description: every CTU principal with unit weight
        problem = AllocationProblem(
            tuple(models), ChannelState(0.0), 2.0 * target, self.qp_bounds, self.epsilon
        )
        mask = self.masks[0]
        sol = solve_description(problem, mask, 0, self.endpoint_bisection)
        d = describe_solution(problem, 0, mask, sol)
        second = describe_solution(problem, 1, self.masks[1], sol)
        second.desc = 1
        return AllocationResult(0.0, problem.r_target, problem.eps, (d, second), tuple(models))

    def _guard(self, residuals, coded, qps) -> int:
        """Make sure each principal copy is no worse than its redundant copy."""
        if self.layout != MDC:
            return 0
        changes = 0
        qmin = self.qp_bounds[0]
        for i, res in enumerate(residuals):
            k = 0 if self.masks[0][i] else 1
            p, r = coded[k][i], coded[1 - k][i]
            if p.distortion <= r.distortion:
                continue
            best = None
            for qp in range(p.qp - 1, max(qmin, p.qp - GUARD_QP_SPAN) - 1, -1):
                cand = quantize_and_code(res, qp)
                if cand.distortion <= r.distortion:
                    best = cand
                    break
            if best is None:
                best = quantize_and_code(res, r.qp)
            coded[k][i] = best
            qps[k][i] = best.qp
            changes += 1
        return changes

    def encode_frame(
        self, frame: FramePlane, index: int, p_e: float, r_target: float, idr: bool
    ) -> EncodedFrame:
        g = self.grid
        reference = None if idr else self.reference
        residuals: List[ResidualCtu] = [
            predict_ctu(frame, reference, i, g, "intra-dc" if reference is None else "auto")
            for i in range(g.n)
        ]
        models = [fit_exponential(sweep_ctu(r, self.qp_sweep), r.index) for r in residuals]
        target, clamped = self._lateral_target(models, r_target)
        alloc = self._allocate(models, p_e, target)

        qps = [list(map(int, d.qp)) for d in alloc.descriptions]
        coded0 = [quantize_and_code(r, qps[0][i]) for i, r in enumerate(residuals)]
        if self.layout == MDC:
            coded1 = [quantize_and_code(r, qps[1][i]) for i, r in enumerate(residuals)]
        elif self.layout == SDC_DUPLICATED:
            coded1 = list(coded0)
        else:
            coded1 = []
        coded = (coded0, coded1)
        adjustments = self._guard(residuals, coded, qps)

        s = g.ctu_size
        central = np.empty((g.height, g.width), dtype=np.uint8)
        side_planes = [np.empty_like(central), np.empty_like(central)]
        for i in range(g.n):
            x, y = g.origin(i)
            k = 0 if self.masks[0][i] else 1
            central[y : y + s, x : x + s] = coded[k][i].reconstruction
            for j in (0, 1):
                src = coded[j][i] if coded[j] else coded[0][i]
                side_planes[j][y : y + s, x : x + s] = src.reconstruction
        dims = (frame.orig_width, frame.orig_height)
        central_plane = FramePlane(central, *dims)

        concealment = (
            np.full_like(frame.samples, 128) if reference is None else reference.samples
        )
        d_error = _sse(frame.samples[: dims[1], : dims[0]], concealment[: dims[1], : dims[0]])

        packets = ([], [])
        for j in (0, 1):
            if coded[j]:
                packets[j].extend(
                    packetize(coded[j], index, j, idr, self.ctus_per_nalu, self._seq[j])
                )
                self._seq[j] += len(packets[j])

        self.reference = central_plane
        return EncodedFrame(
            index=index,
            idr=idr,
            p_e=p_e,
            lateral_target=target,
            clamped=clamped,
            models=models,
            allocation=alloc,
            coded=coded,
            packets=packets,
            central=central_plane,
            sides=(FramePlane(side_planes[0], *dims), FramePlane(side_planes[1], *dims)),
            d_error=d_error,
            guard_adjustments=adjustments,
        )
