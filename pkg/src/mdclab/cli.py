"""Command line entry point: ``mdclab {encode,simulate,sweep,report}``."""

from __future__ import annotations

import argparse
import glob
import logging
import os
import sys
from dataclasses import replace

from .allocator import ChannelState, assign_roles, idr_period, write_allocation_csv
from .channel import write_stream, write_trace_csv
from .codec import CtuGrid
from .decoder import write_error_log
from .encoder import LAYOUTS, MdcEncoder
from .errors import InfeasibleTarget, MdcError
from .experiment import (
    ExperimentConfig,
    emit_reports,
    plot_script,
    read_results_csv,
    run_pipeline,
    summarize,
    write_summary_csv,
)
from .rdmodel import write_rd_csv
from .source import open_source, write_raw_sequence

log = logging.getLogger("mdclab")


def _floats(text):
    return tuple(float(v) for v in text.split(",") if v.strip())


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_json(args.config) if args.config else ExperimentConfig()
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "pe", None):
        over["pe_list"] = args.pe
    if getattr(args, "trials", None) is not None:
        over["trials"] = args.trials
    if getattr(args, "baseline", None):
        over["baseline"] = args.baseline
    if getattr(args, "rate", None) and len(args.rate) == 1:
        over["r_target"] = args.rate[0]
    return replace(cfg, **over) if over else cfg


def cmd_encode(args) -> int:
    cfg = _load_config(args)
    frames = open_source(cfg.source, cfg.ctu_size)
    grid = CtuGrid.for_frame(frames[0], cfg.ctu_size)
    roles = assign_roles(grid, cfg.role_pattern)
    enc = MdcEncoder(
        grid, roles, cfg.baseline, cfg.qp_sweep, cfg.qp_bounds, cfg.ctus_per_nalu,
        cfg.epsilon, cfg.rate_policy, cfg.endpoint_bisection,
    )
    p_e = cfg.pe_list[0]
    schedule = idr_period(ChannelState(p_e), cfg.idr_max_period)
    os.makedirs(args.out, exist_ok=True)
    packets = ([], [])
    allocs, models, centrals = [], [], []
    since = None
    for f, frame in enumerate(frames):
        idr = schedule.is_idr(since)
        since = 1 if idr else since + 1
        r_frame = cfg.r_target * (cfg.idr_rate_factor if idr else 1.0)
        e = enc.encode_frame(frame, f, p_e, r_frame, idr)
        for j in (0, 1):
            packets[j].extend(e.packets[j])
        allocs.append((f, e.allocation))
        models.append((f, e.models))
        centrals.append(e.central)
    for j in (0, 1):
        if packets[j]:
            write_stream(os.path.join(args.out, f"desc{j + 1}.mdc"), packets[j])
    write_allocation_csv(os.path.join(args.out, "allocation.csv"), allocs)
    write_rd_csv(os.path.join(args.out, "rd.csv"), models)
    write_raw_sequence(os.path.join(args.out, "central.yuv"), centrals)
    print(f"encoded {len(frames)} frames at p_e={p_e:g}, IDR period {schedule.period} -> {args.out}")
    return 0


def _simulate(cfg: ExperimentConfig, rates, out):
    reports = []
    for rate in rates:
        reports.extend(run_pipeline(replace(cfg, r_target=rate)))
    written = emit_reports(reports, out)
    # one trace/error file per trial: seq numbers restart in every trial
    logs = os.path.join(out, "logs")
    os.makedirs(logs, exist_ok=True)
    for r in reports:
        stem = f"{r.baseline}_r{r.r_target:g}_pe{r.pe:g}_t{r.trial}"
        write_trace_csv(os.path.join(logs, f"traces_{stem}.csv"), r.traces)
        write_error_log(os.path.join(logs, f"errors_{stem}.csv"), r.error_log)
    for row in summarize(reports):
        print(
            f"{row['baseline']} R_t={row['r_target']:g} p_e={row['pe']:g}: "
            f"mean central PSNR {row['mean_psnr_central']:.3f} dB over {row['trials']} trials"
        )
    return written


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    _simulate(cfg, [cfg.r_target], args.out)
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    rates = args.rate or [cfg.r_target]
    _simulate(cfg, rates, args.out)
    return 0


def cmd_report(args) -> int:
    paths = sorted(glob.glob(os.path.join(args.out, "results.csv")))
    paths += sorted(glob.glob(os.path.join(args.out, "rate_*", "results.csv")))
    if not paths:
        print(f"no results.csv under {args.out}", file=sys.stderr)
        return 1
    reports = []
    for p in paths:
        parent = os.path.basename(os.path.dirname(p))
        rate = float(parent[5:]) if parent.startswith("rate_") else float("nan")
        reports.extend(read_results_csv(p, args.baseline or "mdc", rate))
    rows = summarize(reports)
    write_summary_csv(os.path.join(args.out, "summary.csv"), rows)
    with open(os.path.join(args.out, "plot.gp"), "w") as fh:
        fh.write(plot_script(rows))
    print(f"summarized {len(reports)} trials from {len(paths)} result files")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mdclab", description="Two-description video coding lab")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, rate_list=False):
        p.add_argument("--config", help="experiment config (JSON)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="base seed for channel draws")
        p.add_argument("--pe", type=_floats, help="comma separated loss rates")
        p.add_argument("--rate", type=_floats, help="target bits per frame" + (" (comma list)" if rate_list else ""))
        p.add_argument("--trials", type=int)
        p.add_argument("--baseline", choices=LAYOUTS)

    p = sub.add_parser("encode", help="encode both descriptions without a channel")
    common(p)
    p.set_defaults(func=cmd_encode)
    p = sub.add_parser("simulate", help="encode, transmit and decode at one rate")
    common(p)
    p.set_defaults(func=cmd_simulate)
    p = sub.add_parser("sweep", help="simulate over several rates and loss rates")
    common(p, rate_list=True)
    p.set_defaults(func=cmd_sweep)
    p = sub.add_parser("report", help="rebuild summary.csv and plot.gp from results")
    p.add_argument("--out", required=True)
    p.add_argument("--baseline", choices=LAYOUTS)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except MdcError as exc:
        print(f"mdclab: {type(exc).__name__}: {exc}", file=sys.stderr)
        if isinstance(exc, InfeasibleTarget):
            print("mdclab: raise --rate or set \"rate_policy\": \"clamp\" in the config", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
