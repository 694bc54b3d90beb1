"""Report emission: delimited per-sample rows, aggregate tables and the
scheduler invocation log, with matplotlib figures rendered alongside.

Floats are written with repr so aggregates are recomputable from the rows
and identical inputs produce byte-identical files.
"""

from __future__ import annotations

import json
import os

from .errors import SplitexitError
from .sim import RunReport

SAMPLE_COLUMNS = (
    "sample_idx", "t_start_ms", "sample_id", "split_id", "thr_conf", "exit_id",
    "origin", "correct", "latency_ms", "bytes_sent", "device_ms", "server_ms",
    "pack_ms", "transfer_ms", "backoff_ms", "attempts", "compressed",
    "cancelled",
)

AGG_COLUMNS = (
    "policy", "scenario", "seed", "samples", "throughput_ips",
    "mean_latency_ms", "accuracy", "server_cost_ms", "device_cost_ms",
    "bytes_sent", "offload_fraction", "failed_results",
    "scheduler_invocations", "makespan_ms",
)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def emit_report(report: RunReport, outdir: str, fmt: str = "csv",
                plots: bool = True, prefix: str = "") -> list[str]:
    """Write per-sample rows, aggregates and the invocation log; render
    figures next to them unless disabled.  Returns the written paths."""
    if fmt not in ("csv", "structured_text"):
        raise SplitexitError(f"unknown report format {fmt!r}")
    os.makedirs(outdir, exist_ok=True)
    written = []
    tag = prefix or report.policy_name

    samples_path = os.path.join(outdir, f"{tag}_samples.csv")
    with open(samples_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(SAMPLE_COLUMNS) + "\n")
        split_id, thr, starts = _in_force_configs(report)
        for i, r in enumerate(report.records):
            row = (
                i, starts[i], r.sample_id, split_id[i], thr[i], r.exit_id,
                r.origin, r.correct, r.latency_ms, r.bytes_sent, r.device_ms,
                r.server_ms, r.pack_ms, r.transfer_ms, r.backoff_ms,
                r.attempts, r.compressed, r.cancelled,
            )
            fh.write(",".join(_fmt(v) for v in row) + "\n")
    written.append(samples_path)

    inv_path = os.path.join(outdir, f"{tag}_invocations.csv")
    with open(inv_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("t_ms,reason,split_id,thr_conf\n")
        for inv in report.invocations:
            fh.write(f"{inv['t_ms']!r},{inv['reason']},{inv['split_id']},{inv['thr_conf']!r}\n")
    written.append(inv_path)

    if fmt == "csv":
        agg_path = os.path.join(outdir, f"{tag}_aggregates.csv")
        with open(agg_path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(",".join(AGG_COLUMNS) + "\n")
            fh.write(",".join(_fmt(v) for v in _agg_row(report)) + "\n")
    else:
        agg_path = os.path.join(outdir, f"{tag}_aggregates.json")
        doc = dict(zip(AGG_COLUMNS, _agg_row(report)))
        with open(agg_path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
    written.append(agg_path)

    if plots and report.records:
        from .plots import render_run_figures

        written.extend(render_run_figures(report, outdir, tag))
    return written


def _agg_row(report: RunReport):
    a = report.aggregates
    return (
        report.policy_name, report.scenario_name, report.seed,
        a.get("samples", 0), a.get("throughput_ips", 0.0),
        a.get("mean_latency_ms", 0.0), a.get("accuracy", 0.0),
        a.get("server_cost_ms", 0.0), a.get("device_cost_ms", 0.0),
        a.get("bytes_sent", 0), a.get("offload_fraction", 0.0),
        a.get("failed_results", 0), a.get("scheduler_invocations", 0),
        a.get("makespan_ms", 0.0),
    )


def _in_force_configs(report: RunReport):
    """Per-record (split_id, thr, start time): the run's recorded start
    times replayed against the invocation log (an invocation at t applies
    to every sample starting at or after t)."""
    n = len(report.records)
    starts = list(report.start_times_ms)
    if len(starts) != n:
        starts = [0.0] * n
    if not report.invocations:
        return [0] * n, [0.0] * n, starts
    inv = sorted(report.invocations, key=lambda r: (r["t_ms"]))
    split_ids = []
    thrs = []
    cur = 0
    for t_start in starts:
        while cur + 1 < len(inv) and inv[cur + 1]["t_ms"] <= t_start:
            cur += 1
        split_ids.append(inv[cur]["split_id"])
        thrs.append(inv[cur]["thr_conf"])
    return split_ids, thrs, starts


def emit_sweep_report(reports: list[RunReport], outdir: str,
                      plots: bool = True) -> list[str]:
    """Long-format aggregate table keyed by the sweep variable, one row per
    (value, policy), plus comparison figures."""
    os.makedirs(outdir, exist_ok=True)
    path = os.path.join(outdir, "sweep.csv")
    cols = ("sweep_param", "sweep_value") + AGG_COLUMNS
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(cols) + "\n")
        for rep in reports:
            row = (
                rep.aggregates.get("sweep_param", ""),
                rep.aggregates.get("sweep_value", ""),
            ) + _agg_row(rep)
            fh.write(",".join(_fmt(v) for v in row) + "\n")
    written = [path]
    if plots and reports:
        from .plots import render_sweep_figures

        written.extend(render_sweep_figures(reports, outdir))
    return written
