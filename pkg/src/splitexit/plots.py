"""Figure rendering for run and sweep reports (Agg backend, PNG files).

Figures carry fixed metadata so repeated runs produce identical bytes.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .sim import RunReport

_SAVE_KW = dict(dpi=110, metadata={"Software": "splitexit"})


def render_run_figures(report: RunReport, outdir: str, tag: str) -> list[str]:
    written = []
    records = report.records

    fig, axes = plt.subplots(1, 2, figsize=(9, 3.2))
    exits = [r.exit_id for r in records]
    bins = np.arange(min(exits) - 0.5, max(exits) + 1.5)
    axes[0].hist(exits, bins=bins, color="#4878a8", edgecolor="black", linewidth=0.4)
    axes[0].set_xlabel("exit id")
    axes[0].set_ylabel("samples")
    axes[0].set_title("exit distribution")

    lat = [r.latency_ms for r in records]
    axes[1].plot(lat, linewidth=0.7, color="#a85448")
    axes[1].set_xlabel("sample index")
    axes[1].set_ylabel("latency (ms)")
    axes[1].set_title("per-sample latency")
    fig.suptitle(f"{report.scenario_name} / {report.policy_name}")
    fig.tight_layout()
    path = os.path.join(outdir, f"{tag}_run.png")
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    written.append(path)
    return written


def render_sweep_figures(reports: list[RunReport], outdir: str) -> list[str]:
    written = []
    by_policy: dict[str, list[RunReport]] = {}
    for rep in reports:
        by_policy.setdefault(rep.policy_name, []).append(rep)
    param = reports[0].aggregates.get("sweep_param", "value")

    for metric, label in (
        ("throughput_ips", "throughput (inf/s)"),
        ("mean_latency_ms", "mean latency (ms)"),
        ("accuracy", "accuracy"),
        ("server_cost_ms", "server cost (ms/sample)"),
    ):
        fig, ax = plt.subplots(figsize=(5.4, 3.4))
        for policy in sorted(by_policy):
            reps = sorted(by_policy[policy], key=lambda r: r.aggregates["sweep_value"])
            xs = [r.aggregates["sweep_value"] for r in reps]
            ys = [r.aggregates[metric] for r in reps]
            ax.plot(xs, ys, marker="o", markersize=3, linewidth=1.0, label=policy)
        if param in ("bandwidth_mbps",):
            ax.set_xscale("log")
        ax.set_xlabel(param)
        ax.set_ylabel(label)
        ax.legend(fontsize=7)
        ax.grid(alpha=0.3)
        fig.tight_layout()
        path = os.path.join(outdir, f"sweep_{metric}.png")
        fig.savefig(path, **_SAVE_KW)
        plt.close(fig)
        written.append(path)
    return written
