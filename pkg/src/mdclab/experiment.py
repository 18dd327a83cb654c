"""End-to-end Monte Carlo harness and report writers."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .allocator import ChannelState, assign_roles, expected_distortion, idr_period
from .channel import ErasureChannel, feedback_pe, load_pattern
from .codec import CtuGrid, mse, psnr
from .decoder import MISSING, MdcDecoder
from .encoder import LAYOUTS, MDC, MdcEncoder
from .errors import ConfigMismatch
from .rdmodel import DEFAULT_SWEEP
from .source import SequenceSource, open_source

log = logging.getLogger(__name__)

RESULTS_COLUMNS = [
    "pe", "trial", "frame", "rate1", "rate2", "psnr_side1", "psnr_side2",
    "psnr_central", "lost_pkts", "concealed_ctus", "de_eq1", "de_enum",
]
SUMMARY_COLUMNS = [
    "baseline", "r_target", "pe", "trials", "frames", "mean_rate", "mean_psnr_central",
    "std_psnr_central", "mean_psnr_side1", "mean_psnr_side2", "mean_lost_pkts",
    "mean_concealed_ctus", "mean_de_eq1", "mean_de_enum",
]

# allocation never sees p_e = 1; both weights would vanish
MAX_ALLOCATION_PE = 0.99


@dataclass
class ExperimentConfig:
    source: SequenceSource = field(default_factory=SequenceSource)
    ctu_size: int = 16
    r_target: float = 3600.0
    idr_rate_factor: float = 1.0
    qp_sweep: Tuple[int, ...] = DEFAULT_SWEEP
    qp_bounds: Tuple[int, int] = (0, 51)
    pe_list: Tuple[float, ...] = (0.01, 0.05, 0.1)
    trials: int = 3
    seed: int = 2023
    ctus_per_nalu: Optional[int] = None
    idr_max_period: int = 250
    pattern_file: Optional[str] = None
    baseline: str = MDC
    channel_mode: str = "erasure"
    feedback_window: int = 500
    feedback_warmup: int = 40
    role_pattern: str = "checkerboard"
    rate_policy: str = "strict"
    epsilon: Optional[float] = None
    endpoint_bisection: bool = False

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.baseline not in LAYOUTS:
            raise ValueError(f"unknown baseline {self.baseline!r}; choose from {LAYOUTS}")
        if isinstance(self.source, dict):
            src = dict(self.source)
            if "motion" in src:
                src["motion"] = tuple(src["motion"])
            self.source = SequenceSource(**src)
        self.qp_sweep = tuple(int(q) for q in self.qp_sweep)
        self.qp_bounds = tuple(int(q) for q in self.qp_bounds)
        self.pe_list = tuple(float(p) for p in self.pe_list)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FrameRecord:
    frame: int
    idr: bool
    p_hat: float
    rate1: int
    rate2: int
    psnr_side1: float
    psnr_side2: float
    psnr_central: float
    psnr_encoder: float
    lost_pkts: int
    concealed_ctus: int
    de_eq1: float
    de_enum: float
    lateral_target: float
    lateral_rates: Tuple[float, float]
    epsilon: float
    clamped: bool
    interior_kkt: float
    dominance_ok: bool
    encoder_dominance_ok: bool
    in_sync: bool
    both_complete: bool
    guard_adjustments: int


@dataclass
class TrialReport:
    pe: float
    trial: int
    baseline: str
    r_target: float
    frames: List[FrameRecord]
    traces: list = field(default_factory=list, repr=False)
    error_log: list = field(default_factory=list, repr=False)

    def mean(self, attr: str) -> float:
        vals = [getattr(f, attr) for f in self.frames]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def mean_psnr_central(self) -> float:
        return self.mean("psnr_central")

    @property
    def mean_rate(self) -> float:
        return float(np.mean([f.rate1 + f.rate2 for f in self.frames]))


def enumerate_expected_distortion(
    p_e: float,
    d_central: float,
    d_sides: Sequence[float],
    d_error: float,
    packets_per_description: int = 1,
) -> float:
    """Exact expectation over the four (desc1, desc2) delivery outcomes."""
    if packets_per_description != 1:
        raise ConfigMismatch(
            f"enumeration needs one packet per description, got {packets_per_description}"
        )
    q = 1.0 - p_e
    return q * q * d_central + p_e * q * (d_sides[0] + d_sides[1]) + p_e * p_e * d_error


def _trial_seeds(seed: int, p_e: float, trial: int) -> Tuple[int, int]:
    ss = np.random.SeedSequence([seed, int(round(p_e * 1e9)), trial])
    return tuple(int(c.generate_state(1, np.uint64)[0]) for c in ss.spawn(2))


def _kkt_residual(alloc) -> float:
    """Largest relative stationarity residual over interior allocated rates."""
    worst = 0.0
    for d in alloc.descriptions:
        for m, r, c in zip(alloc.models, d.r_star, d.c):
            if c > 0 and m.r_min < r < m.r_max:
                res = abs(c * m.a * m.b * math.exp(m.b * r) + d.lam) / d.lam
                worst = max(worst, res)
    return worst


def _region_sse(a, b, grid, idx) -> int:
    s = grid.ctu_size
    tot = 0
    for i in idx:
        x, y = grid.origin(i)
        d = a[y : y + s, x : x + s].astype(np.int64) - b[y : y + s, x : x + s]
        tot += int((d * d).sum())
    return tot


def run_trial(config: ExperimentConfig, frames, p_e: float, trial: int) -> TrialReport:
    grid = CtuGrid.for_frame(frames[0], config.ctu_size)
    roles = assign_roles(grid, config.role_pattern)
    encoder = MdcEncoder(
        grid, roles, config.baseline, config.qp_sweep, config.qp_bounds,
        config.ctus_per_nalu, config.epsilon, config.rate_policy, config.endpoint_bisection,
    )
    decoder = MdcDecoder(grid, encoder.masks, (frames[0].orig_width, frames[0].orig_height))
    pattern = load_pattern(config.pattern_file) if config.pattern_file else None
    seeds = _trial_seeds(config.seed, p_e, trial)
    channels = []
    for j in (0, 1):
        pat = None
        if pattern is not None:
            shift = (j * len(pattern)) // 2
            pat = pattern[shift:] + pattern[:shift]
        channels.append(ErasureChannel(p_e, seeds[j], config.channel_mode, pat))

    n_nalu = math.ceil(grid.n / (config.ctus_per_nalu or grid.n))
    history = []
    since_idr = None
    prev_enc = None
    records = []
    traces = []
    for f, frame in enumerate(frames):
        n_hist = sum(len(t.decisions) for t in history)
        if n_hist >= config.feedback_warmup:
            p_hat = feedback_pe(history, config.feedback_window, p_e)
        else:
            p_hat = p_e
        schedule = idr_period(ChannelState(p_hat), config.idr_max_period)
        idr = schedule.is_idr(since_idr)
        since_idr = 1 if idr else since_idr + 1

        r_frame = config.r_target * (config.idr_rate_factor if idr else 1.0)
        enc = encoder.encode_frame(frame, f, min(p_hat, MAX_ALLOCATION_PE), r_frame, idr)

        delivered = []
        lost = 0
        for j in (0, 1):
            out, trace = channels[j].send(enc.packets[j])
            delivered.append(out)
            history.append(trace)
            traces.append(trace)
            lost += trace.erased_count

        prev_dec = decoder.state.previous_central
        in_sync = idr or (
            prev_dec is not None and prev_enc is not None and prev_dec.frame == prev_enc
        )
        central, view1, view2, sides = decoder.decode_frame(f, delivered[0], delivered[1], idr=idr)
        prev_enc = enc.central

        both = [i for i in range(grid.n) if sides[0].status[i] != MISSING and sides[1].status[i] != MISSING]
        src = frame.samples
        if both and config.baseline == MDC:
            c_sse = _region_sse(src, central.frame.samples, grid, both)
            s_sse = [_region_sse(src, side.samples, grid, both) for side in sides]
            dominance = c_sse <= min(s_sse)
        else:
            dominance = True
        if config.baseline == MDC:
            enc_c = mse(frame, enc.central)
            enc_dominance = all(enc_c <= mse(frame, s) for s in enc.sides)
        else:
            enc_dominance = True

        alloc = enc.allocation
        if config.baseline == MDC:
            ch = ChannelState(alloc.p_e)
            de_eq1 = expected_distortion(alloc, ch, enc.d_error)
            if n_nalu == 1:
                npx = frame.orig_width * frame.orig_height
                de_enum = enumerate_expected_distortion(
                    alloc.p_e,
                    mse(frame, enc.central) * npx,
                    [mse(frame, s) * npx for s in enc.sides],
                    enc.d_error,
                )
            else:
                de_enum = float("nan")
        else:
            de_eq1 = de_enum = float("nan")

        rates = enc.rates
        records.append(
            FrameRecord(
                frame=f,
                idr=idr,
                p_hat=p_hat,
                rate1=rates[0],
                rate2=rates[1],
                psnr_side1=psnr(frame, view1),
                psnr_side2=psnr(frame, view2),
                psnr_central=psnr(frame, central.frame),
                psnr_encoder=psnr(frame, enc.central),
                lost_pkts=lost,
                concealed_ctus=central.concealed_count,
                de_eq1=de_eq1,
                de_enum=de_enum,
                lateral_target=enc.lateral_target,
                lateral_rates=tuple(d.rate for d in alloc.descriptions),
                epsilon=alloc.epsilon,
                clamped=enc.clamped,
                interior_kkt=_kkt_residual(alloc),
                dominance_ok=dominance,
                encoder_dominance_ok=enc_dominance,
                in_sync=in_sync,
                both_complete=len(both) == grid.n,
                guard_adjustments=enc.guard_adjustments,
            )
        )
    return TrialReport(p_e, trial, config.baseline, config.r_target, records, traces, decoder.state.error_log)


def run_pipeline(config: ExperimentConfig, frames=None) -> List[TrialReport]:
    """One :class:`TrialReport` per ``(p_e, trial)``, in that order."""
    if frames is None:
        frames = open_source(config.source, config.ctu_size)
    reports = []
    for p_e in config.pe_list:
        for t in range(config.trials):
            reports.append(run_trial(config, frames, p_e, t))
            log.info("p_e=%g trial=%d mean PSNR %.3f", p_e, t, reports[-1].mean_psnr_central)
    return reports


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return "nan"
    return f"{v:.6f}"


def results_rows(report: TrialReport):
    for fr in report.frames:
        yield [
            f"{report.pe:g}", report.trial, fr.frame, fr.rate1, fr.rate2,
            _fmt(fr.psnr_side1), _fmt(fr.psnr_side2), _fmt(fr.psnr_central),
            fr.lost_pkts, fr.concealed_ctus, _fmt(fr.de_eq1), _fmt(fr.de_enum),
        ]


def summarize(reports: Sequence[TrialReport]) -> List[dict]:
    groups: Dict[tuple, List[TrialReport]] = {}
    for r in reports:
        groups.setdefault((r.baseline, r.r_target, r.pe), []).append(r)
    rows = []
    for (baseline, r_target, pe), rs in groups.items():
        frs = [f for r in rs for f in r.frames]

        def m(vals):
            return float(np.mean(vals))

        rows.append({
            "baseline": baseline,
            "r_target": r_target,
            "pe": pe,
            "trials": len(rs),
            "frames": len(frs),
            "mean_rate": m([f.rate1 + f.rate2 for f in frs]),
            "mean_psnr_central": m([f.psnr_central for f in frs]),
            "std_psnr_central": float(np.std([r.mean_psnr_central for r in rs])),
            "mean_psnr_side1": m([f.psnr_side1 for f in frs]),
            "mean_psnr_side2": m([f.psnr_side2 for f in frs]),
            "mean_lost_pkts": m([f.lost_pkts for f in frs]),
            "mean_concealed_ctus": m([f.concealed_ctus for f in frs]),
            "mean_de_eq1": m([f.de_eq1 for f in frs]),
            "mean_de_enum": m([f.de_enum for f in frs]),
        })
    return rows


def write_results_csv(path, reports: Sequence[TrialReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULTS_COLUMNS)
        for r in reports:
            w.writerows(results_rows(r))


def write_summary_csv(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for row in rows:
            w.writerow([
                row["baseline"], _fmt(row["r_target"]), f"{row['pe']:g}", row["trials"], row["frames"],
                *(_fmt(row[c]) for c in SUMMARY_COLUMNS[5:]),
            ])


def plot_script(rows: Sequence[dict]) -> str:
    """Standalone gnuplot script with inline data, one curve per (baseline, p_e)."""
    curves: Dict[tuple, List[dict]] = {}
    for row in rows:
        curves.setdefault((row["baseline"], row["pe"]), []).append(row)
    lines = [
        "# rate vs mean central PSNR, one curve per loss rate",
        "set terminal pngcairo size 800,600",
        "set output 'rate_psnr.png'",
        "set xlabel 'mean total rate (bits/frame)'",
        "set ylabel 'mean central PSNR (dB)'",
        "set key bottom right",
        "set grid",
    ]
    names = []
    for k, ((baseline, pe), rs) in enumerate(sorted(curves.items(), key=lambda kv: (kv[0][0], kv[0][1]))):
        name = f"$d{k}"
        names.append((name, f"{baseline} p_e={pe:g}"))
        lines.append(f"{name} << EOD")
        for r in sorted(rs, key=lambda r: r["mean_rate"]):
            lines.append(f"{_fmt(r['mean_rate'])} {_fmt(r['mean_psnr_central'])}")
        lines.append("EOD")
    plots = ", \\\n     ".join(f"{n} using 1:2 with linespoints title '{t}'" for n, t in names)
    lines.append(f"plot {plots}")
    return "\n".join(lines) + "\n"


def emit_reports(reports: Sequence[TrialReport], out_dir) -> List[str]:
    """Write results.csv, summary.csv and plot.gp; returns the written paths.

    With several rate targets the per-frame tables go to ``rate_<R>/results.csv``.
    """
    if not reports:
        raise ValueError("no reports to emit")
    os.makedirs(out_dir, exist_ok=True)
    written = []
    by_rate: Dict[float, List[TrialReport]] = {}
    for r in reports:
        by_rate.setdefault(r.r_target, []).append(r)
    if len(by_rate) == 1:
        path = os.path.join(out_dir, "results.csv")
        write_results_csv(path, reports)
        written.append(path)
    else:
        for rate, rs in by_rate.items():
            sub = os.path.join(out_dir, f"rate_{rate:g}")
            os.makedirs(sub, exist_ok=True)
            path = os.path.join(sub, "results.csv")
            write_results_csv(path, rs)
            written.append(path)
    rows = summarize(reports)
    path = os.path.join(out_dir, "summary.csv")
    write_summary_csv(path, rows)
    written.append(path)
    path = os.path.join(out_dir, "plot.gp")
    with open(path, "w") as fh:
        fh.write(plot_script(rows))
    written.append(path)
    return written


def read_results_csv(path, baseline: str = MDC, r_target: float = float("nan")) -> List[TrialReport]:
    """Rebuild minimal trial reports from a results.csv (for the ``report`` command)."""
    reports: Dict[tuple, TrialReport] = {}
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if rd.fieldnames != RESULTS_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {rd.fieldnames}")
        for row in rd:
            key = (float(row["pe"]), int(row["trial"]))
            rep = reports.setdefault(key, TrialReport(key[0], key[1], baseline, r_target, []))
            rep.frames.append(
                FrameRecord(
                    frame=int(row["frame"]), idr=False, p_hat=float("nan"),
                    rate1=int(row["rate1"]), rate2=int(row["rate2"]),
                    psnr_side1=float(row["psnr_side1"]), psnr_side2=float(row["psnr_side2"]),
                    psnr_central=float(row["psnr_central"]), psnr_encoder=float("nan"),
                    lost_pkts=int(row["lost_pkts"]), concealed_ctus=int(row["concealed_ctus"]),
                    de_eq1=float(row["de_eq1"]), de_enum=float(row["de_enum"]),
                    lateral_target=float("nan"), lateral_rates=(float("nan"),) * 2,
                    epsilon=float("nan"), clamped=False, interior_kkt=float("nan"),
                    dominance_ok=True, encoder_dominance_ok=True, in_sync=False, both_complete=False, guard_adjustments=0,
                )
            )
    return list(reports.values())
