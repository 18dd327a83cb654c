"""Per-CTU rate-distortion sampling and exponential model fitting.

Distortion is modelled as ``d(R) = a * exp(b * R)`` with ``a > 0`` and
``b < 0``; ``(a, b)`` come from an ordinary least-squares line through
``(rate, ln distortion)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, List, Sequence, Tuple

import numpy as np

from .codec import QP_MAX, QP_MIN, ResidualCtu, measure
from .errors import FitError

DEFAULT_SWEEP = (22, 27, 32, 37, 42)
DISTORTION_FLOOR = 1e-6
FLAT_SLOPE = -1e-9

RD_CSV_COLUMNS = ["frame", "ctu", "qp", "bits", "sse", "a", "b", "flat"]


@dataclass(frozen=True)
class RdSample:
    qp: int
    rate: float
    distortion: float


@dataclass(frozen=True)
class CtuRdModel:
    index: int
    a: float
    b: float
    samples: Tuple[RdSample, ...]
    r_min: float
    r_max: float
    flat: bool = False

    def distortion(self, rate):
        return self.a * np.exp(self.b * np.asarray(rate, dtype=np.float64))

    def qp_for_rate(self, rate: float, qp_min: int = QP_MIN, qp_max: int = QP_MAX) -> int:
        """Invert the measured sweep by monotone piecewise-linear interpolation."""
        return qp_for_rate(self.samples, rate, qp_min, qp_max)


def sweep_ctu(residual: ResidualCtu, qp_set: Sequence[int] = DEFAULT_SWEEP) -> List[RdSample]:
    qps = [int(q) for q in qp_set]
    if not qps:
        raise FitError("empty QP sweep set")
    if qps != sorted(qps) or qps[0] < QP_MIN or qps[-1] > QP_MAX:
        raise FitError(f"QP sweep must be ascending within [{QP_MIN}, {QP_MAX}]: {qps}")
    out = []
    for qp in qps:
        bits, sse = measure(residual, qp)
        out.append(RdSample(qp, float(bits), float(sse)))
    return out


def fit_exponential(samples: Sequence[RdSample], index: int = 0) -> CtuRdModel:
    samples = tuple(sorted(samples, key=lambda s: s.qp))
    if len(samples) < 2:
        raise FitError("need at least two R-D samples")
    rates = np.array([s.rate for s in samples], dtype=np.float64)
    dist = np.maximum(np.array([s.distortion for s in samples], dtype=np.float64), DISTORTION_FLOOR)

    # r_min at the coarsest swept QP, r_max at the finest
    r_min, r_max = float(rates[-1]), float(rates[0])
    if r_min > r_max:
        r_min, r_max = float(rates.min()), float(rates.max())

    degenerate = np.all(rates == rates[0]) or np.all(dist <= DISTORTION_FLOOR)
    if not degenerate:
        b, ln_a = np.polyfit(rates, np.log(dist), 1)
        if b < FLAT_SLOPE and math.isfinite(b) and math.isfinite(ln_a):
            return CtuRdModel(index, float(math.exp(ln_a)), float(b), samples, r_min, r_max, False)
    a = max(float(dist.max()), DISTORTION_FLOOR)
    return CtuRdModel(index, a, FLAT_SLOPE, samples, r_min, r_max, True)


def qp_for_rate(samples: Sequence[RdSample], rate: float, qp_min: int = QP_MIN, qp_max: int = QP_MAX) -> int:
    ss = sorted(samples, key=lambda s: s.qp)
    if not ss:
        raise FitError("QP inversion needs at least one sweep sample")
    qps = np.array([s.qp for s in ss], dtype=np.float64)
    # enforce a non-increasing envelope so the inverse is well defined
    rates = np.minimum.accumulate(np.array([s.rate for s in ss], dtype=np.float64))
    if rate >= rates[0]:
        q = qps[0]
    elif rate <= rates[-1]:
        q = qps[int(np.flatnonzero(rates == rates[-1])[0])]
    else:
        k = int(np.flatnonzero(rates > rate)[-1])
        hi, lo = rates[k], rates[k + 1]
        if rate == lo:
            q = qps[k + 1]
        else:
            q = qps[k] + (hi - rate) / (hi - lo) * (qps[k + 1] - qps[k])
    q = int(math.floor(q + 0.5))
    return min(max(q, qp_min), qp_max)


def fit_frame(residuals: Iterable[ResidualCtu], qp_set: Sequence[int] = DEFAULT_SWEEP) -> List[CtuRdModel]:
    return [fit_exponential(sweep_ctu(r, qp_set), r.index) for r in residuals]


def write_rd_csv(path, frame_models) -> None:
    """``frame_models`` is an iterable of ``(frame_index, [CtuRdModel, ...])``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RD_CSV_COLUMNS)
        for frame, models in frame_models:
            for m in models:
                for s in m.samples:
                    w.writerow(
                        [frame, m.index, s.qp, f"{s.rate:.0f}", f"{s.distortion:.0f}",
                         repr(m.a), repr(m.b), int(m.flat)]
                    )
