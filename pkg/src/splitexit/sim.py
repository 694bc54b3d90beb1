"""Trace-replay simulation: closed-loop scheduler + engine over synthetic
or recorded network conditions, with baseline policies for comparison.

The simulator core is single-threaded and advances a virtual clock in
microsecond ticks; every source of randomness hangs off the scenario seed,
so a (scenario, seed) pair fully determines the report bytes.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np
import yaml

from .engine import (
    FAILURE_FALLBACK_LOCAL,
    NO_RESULT_EXIT,
    ClientEngine,
    Conditions,
    ExecutionPolicy,
    SampleRecord,
    ServerCore,
)
from .errors import ScenarioError, TraceError
from .graph import LayerGraph, enumerate_splits, load_graph
from .packing import PackEstimator
from .profiles import (
    ExitProfile,
    PlatformProfile,
    load_platform_profile,
    load_trace,
)
from .runtime import (
    NETWORK_PRESETS,
    RuntimeProfilerState,
    SchedulerGate,
    probe_server,
    update_device_sf,
)
from .scheduler import (
    Configuration,
    PlanContext,
    SlaSpec,
    load_sla,
    schedule,
    sla_from_dict,
)
from .transport import InProcessTransport

BASELINE_KINDS = ("device_only", "cloud_only", "nonprogressive_split", "fixed_exit")
ADAPTIVE = "adaptive"


@dataclass(frozen=True)
class TracePoint:
    t_s: float
    bandwidth_mbps: float
    latency_ms: float
    network_type: str = "wifi"


@dataclass
class NetworkTrace:
    points: list[TracePoint]

    def __post_init__(self):
        if not self.points:
            raise TraceError("network trace is empty")
        prev = None
        for p in self.points:
            if prev is not None and p.t_s <= prev:
                raise TraceError("trace timestamps must be strictly increasing")
            if p.bandwidth_mbps <= 0:
                raise TraceError("trace bandwidth must be positive")
            prev = p.t_s

    def at(self, t_s: float) -> TracePoint:
        pts = self.points
        lo, hi = 0, len(pts) - 1
        if t_s <= pts[0].t_s:
            return pts[0]
        while lo < hi:
            mid = (lo + hi + 1) // 2
            if pts[mid].t_s <= t_s:
                lo = mid
            else:
                hi = mid - 1
        return pts[lo]

    def change_events(self) -> int:
        """Rows where bandwidth differs from the previous row."""
        return sum(
            1 for a, b in zip(self.points, self.points[1:])
            if b.bandwidth_mbps != a.bandwidth_mbps
        )

    @staticmethod
    def constant(bandwidth_mbps: float, latency_ms: float,
                 network_type: str = "wifi") -> "NetworkTrace":
        return NetworkTrace([TracePoint(0.0, bandwidth_mbps, latency_ms, network_type)])


def load_network_trace(path: str) -> NetworkTrace:
    points = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#") or line.lower().startswith("t_s"):
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 4:
                raise TraceError(f"{path}:{lineno}: expected 4 fields")
            points.append(TracePoint(float(parts[0]), float(parts[1]),
                                     float(parts[2]), parts[3]))
    return NetworkTrace(points)


def save_network_trace(trace: NetworkTrace, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("t_s,bandwidth_mbps,latency_ms,network_type\n")
        for p in trace.points:
            fh.write(f"{p.t_s!r},{p.bandwidth_mbps!r},{p.latency_ms!r},{p.network_type}\n")


@dataclass(frozen=True)
class ScheduleStep:
    t_s: float
    factor: float


def factor_at(steps: list[ScheduleStep], t_s: float, default: float = 1.0) -> float:
    current = default
    for s in steps:
        if s.t_s <= t_s:
            current = s.factor
        else:
            break
    return current


@dataclass
class Scenario:
    graph: LayerGraph
    device_profile: PlatformProfile
    server_profile: PlatformProfile
    exit_profile: ExitProfile
    sla: SlaSpec
    trace: NetworkTrace
    n_samples: int = 1000
    seed: int = 0
    shuffle: bool = True
    p_fail: float = 0.0
    failure_policy: str = FAILURE_FALLBACK_LOCAL
    failure_detect: str = "loss"
    slowdown: list[ScheduleStep] = field(default_factory=list)
    device_load: list[ScheduleStep] = field(default_factory=list)
    outages: list[tuple[float, float]] = field(default_factory=list)
    piggyback: bool = True
    probe_enabled: bool = True
    network_presets: dict[str, tuple[float, float]] = field(default_factory=dict)
    arrival_rate_ips: float | None = None  # None: closed loop, back-to-back
    name: str = "scenario"

    def server_reachable(self, t_s: float) -> bool:
        return not any(t0 <= t_s < t1 for (t0, t1) in self.outages)


def load_scenario(path: str) -> Scenario:
    base = os.path.dirname(os.path.abspath(path))

    def resolve(p: str) -> str:
        return p if os.path.isabs(p) else os.path.join(base, p)

    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
    except (OSError, yaml.YAMLError) as exc:
        raise ScenarioError(f"{path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ScenarioError(f"{path}: expected a mapping")
    try:
        graph = load_graph(resolve(doc["graph"]))
        device = load_platform_profile(resolve(doc["device_profile"]))
        server = load_platform_profile(resolve(doc["server_profile"]))
        exits = load_trace(resolve(doc["exit_trace"]))
        if "sla" in doc and isinstance(doc["sla"], str):
            sla = load_sla(resolve(doc["sla"]))
        else:
            sla = sla_from_dict(doc.get("sla", {}))
        if "network_trace" in doc:
            trace = load_network_trace(resolve(doc["network_trace"]))
        else:
            cond = doc.get("conditions", {})
            ntype = cond.get("network_type", "wifi")
            bw, lat = NETWORK_PRESETS.get(ntype, NETWORK_PRESETS["wifi"])
            trace = NetworkTrace.constant(
                float(cond.get("bandwidth_mbps", bw)),
                float(cond.get("latency_ms", lat)),
                ntype,
            )
        return Scenario(
            graph=graph,
            device_profile=device,
            server_profile=server,
            exit_profile=exits,
            sla=sla,
            trace=trace,
            n_samples=int(doc.get("samples", 1000)),
            seed=int(doc.get("seed", 0)),
            shuffle=bool(doc.get("shuffle", True)),
            p_fail=float(doc.get("p_fail", 0.0)),
            failure_policy=str(doc.get("failure_policy", FAILURE_FALLBACK_LOCAL)),
            failure_detect=str(doc.get("failure_detect", "loss")),
            slowdown=[ScheduleStep(float(t), float(f)) for t, f in doc.get("slowdown", [])],
            device_load=[ScheduleStep(float(t), float(f)) for t, f in doc.get("device_load", [])],
            outages=[(float(a), float(b)) for a, b in doc.get("outages", [])],
            piggyback=bool(doc.get("piggyback", True)),
            network_presets={
                str(k): (float(v[0]), float(v[1]))
                for k, v in doc.get("network_presets", {}).items()
            },
            arrival_rate_ips=(
                float(doc["arrival_rate_ips"]) if "arrival_rate_ips" in doc else None
            ),
            name=str(doc.get("name", os.path.basename(path))),
        )
    except KeyError as exc:
        raise ScenarioError(f"{path}: missing key {exc}") from exc


@dataclass
class RunReport:
    policy_name: str
    scenario_name: str
    seed: int
    records: list[SampleRecord]
    invocations: list[dict]
    aggregates: dict
    start_times_ms: list[float] = field(default_factory=list)

    @staticmethod
    def aggregate(records: list[SampleRecord], makespan_ms: float,
                  invocations: int) -> dict:
        n = len(records)
        if n == 0:
            return {"samples": 0}
        acc = sum(r.correct for r in records) / n
        mean_lat = sum(r.latency_ms for r in records) / n
        return {
            "samples": n,
            "throughput_ips": 1000.0 * n / makespan_ms if makespan_ms > 0 else 0.0,
            "mean_latency_ms": mean_lat,
            "accuracy": acc,
            "server_cost_ms": sum(r.server_ms for r in records) / n,
            "device_cost_ms": sum(r.device_ms for r in records) / n,
            "bytes_sent": sum(r.bytes_sent for r in records),
            "offload_fraction": sum(1 for r in records if r.bytes_sent > 0) / n,
            "failed_results": sum(1 for r in records if r.exit_id == NO_RESULT_EXIT),
            "scheduler_invocations": invocations,
            "makespan_ms": makespan_ms,
        }


def sample_stream(profile: ExitProfile, n: int, seed: int, shuffle: bool):
    base = profile.samples
    rng = np.random.default_rng((seed, 0xD1CE))
    order = rng.permutation(len(base)) if shuffle else np.arange(len(base))
    for i in range(n):
        yield base[int(order[i % len(base)])]


def _initial_state(scenario: Scenario) -> RuntimeProfilerState:
    state = RuntimeProfilerState()
    if scenario.network_presets:
        state.net.presets = {**NETWORK_PRESETS, **scenario.network_presets}
    state.net.set_network_type(scenario.trace.points[0].network_type)
    return state


def nonprogressive_best_split(ctx: PlanContext, state: RuntimeProfilerState,
                              pack_est: PackEstimator) -> Configuration:
    """Lowest-latency single split for a final-exit-only network."""
    bw, lat = state.net.current(0.0)
    final_pos = int(ctx.exit_pos[-1])
    final_head_srv = float(ctx.head_srv_cum[-1] - (ctx.head_srv_cum[-2] if ctx.n_exits > 1 else 0.0))
    final_head_dev = float(ctx.head_dev_cum[-1] - (ctx.head_dev_cum[-2] if ctx.n_exits > 1 else 0.0))
    best = None
    for i, split in enumerate(ctx.splits):
        dev = state.device_sf * float(ctx.dev_cum[ctx.cut[i]])
        if split.is_none:
            total = state.device_sf * (float(ctx.dev_cum[ctx.graph.n_layers]) + final_head_dev)
        else:
            raw = float(split.transfer_bytes)
            ratio = pack_est.ratio(split.split_id)
            pack_ms = pack_est.pack_ms(raw)
            from .packing import should_compress

            comp = raw > 0 and should_compress(raw, pack_ms, ratio, bw)
            payload = raw / ratio if comp else raw
            tr = lat + 8.0 * payload / (1000.0 * bw)
            srv = state.server_sf * (
                float(ctx.srv_cum[final_pos] - ctx.srv_cum[ctx.cut[i]]) + final_head_srv
            )
            resp = lat + 8.0 * 33 / (1000.0 * bw)
            total = dev + (pack_ms if comp else 0.0) + tr + srv + resp
        if best is None or total < best[0]:
            best = (total, split)
    return Configuration(split=best[1], thr_conf=ctx.grid[-1])


def fixed_exit_choice(scenario: Scenario) -> int:
    """Earliest exit whose unconditional accuracy satisfies every accuracy
    constraint in the SLA; the final exit when none qualifies."""
    corr = np.array([s.correct for s in scenario.exit_profile.samples], dtype=np.float64)
    acc = corr.mean(axis=0)
    acc_constraints = [c for c in scenario.sla.hard if c.metric == "accuracy"]
    for e in range(len(acc)):
        if all(c.holds(float(acc[e])) for c in acc_constraints):
            return e
    return len(acc) - 1


@dataclass
class _PipelineClock:
    dev_free: float = 0.0
    net_free: float = 0.0
    srv_free: float = 0.0

    def admit(self, rec: SampleRecord, t_start: float) -> None:
        self.dev_free = t_start + rec.device_ms
        if rec.bytes_sent > 0:
            net_start = max(self.net_free, t_start)
            self.net_free = net_start + rec.pack_ms + rec.transfer_ms
            if rec.server_ms > 0:
                srv_start = max(self.srv_free, self.net_free)
                self.srv_free = srv_start + rec.server_ms

    @property
    def makespan(self) -> float:
        return max(self.dev_free, self.net_free, self.srv_free)


def run_policy(
    scenario: Scenario,
    policy_name: str,
    reschedule: bool | None = None,
) -> RunReport:
    """Run one policy over the scenario.  ``adaptive`` re-plans on profile
    drift; baselines pin their configuration at scenario start."""
    graph = scenario.graph
    splits = enumerate_splits(graph)
    ctx = PlanContext.build(graph, scenario.device_profile, scenario.server_profile,
                            scenario.exit_profile, splits)
    pack_est = PackEstimator(pack_mbps=scenario.device_profile.pack_mbps)
    state = _initial_state(scenario)
    gate = SchedulerGate()
    server = ServerCore(
        graph, scenario.server_profile.layer_ms, scenario.server_profile.exit_ms,
        scenario.exit_profile, splits, piggyback=scenario.piggyback,
    )
    transport = InProcessTransport(server)
    engine = ClientEngine(
        ctx, pack_est, transport,
        failure_policy=scenario.failure_policy,
        failure_detect=scenario.failure_detect,
        p_fail=scenario.p_fail,
        rng=np.random.default_rng((scenario.seed, 0xFA11)),
        sparsity=0.8,
    )

    # Seed the estimator with the trace's opening conditions so the initial
    # plan is made warm, exactly as the offline profiler hands over.
    t0 = scenario.trace.points[0]
    state.net.observe(t0.bandwidth_mbps, t0.latency_ms, 0.0)

    invocations: list[dict] = []
    policy = ExecutionPolicy("progressive")
    if policy_name == ADAPTIVE:
        config = schedule(ctx, state, scenario.sla, pack_est, 0.0)
        adaptive = True if reschedule is None else reschedule
    elif policy_name == "device_only":
        none_ctx = PlanContext.build(graph, scenario.device_profile,
                                     scenario.server_profile, scenario.exit_profile,
                                     [s for s in splits if s.is_none])
        config = schedule(none_ctx, state, scenario.sla, pack_est, 0.0)
        adaptive = False
    elif policy_name == "cloud_only":
        config = Configuration(split=next(s for s in splits if s.is_input),
                               thr_conf=ctx.grid[-1])
        policy = ExecutionPolicy("nonprogressive")
        adaptive = False
    elif policy_name == "nonprogressive_split":
        config = nonprogressive_best_split(ctx, state, pack_est)
        policy = ExecutionPolicy("nonprogressive")
        adaptive = False
    elif policy_name == "fixed_exit":
        config = Configuration(split=next(s for s in splits if s.is_input),
                               thr_conf=ctx.grid[-1])
        policy = ExecutionPolicy("fixed_exit", fixed_exit=fixed_exit_choice(scenario))
        adaptive = False
    else:
        raise ScenarioError(f"unknown policy {policy_name!r}")

    invocations.append({
        "t_ms": 0.0, "reason": "initial",
        "split_id": config.split.split_id, "thr_conf": config.thr_conf,
    })

    records: list[SampleRecord] = []
    start_times: list[float] = []
    clock = _PipelineClock()
    t_now = 0.0
    current_type = t0.network_type
    interval_ms = (
        1000.0 / scenario.arrival_rate_ips if scenario.arrival_rate_ips else None
    )

    for idx, sample in enumerate(sample_stream(scenario.exit_profile, scenario.n_samples,
                                               scenario.seed, scenario.shuffle)):
        if interval_ms is not None:
            # Open loop: samples arrive on a fixed cadence and queue for the
            # device; closed loop starts each as the device frees.
            t_now = max(t_now, idx * interval_ms)
        now_s = t_now / 1000.0
        tp = scenario.trace.at(now_s)
        if tp.network_type != current_type:
            state.net.set_network_type(tp.network_type)
            current_type = tp.network_type
        cond = Conditions(
            bandwidth_mbps=tp.bandwidth_mbps,
            latency_ms=tp.latency_ms,
            device_sf=factor_at(scenario.device_load, now_s),
            server_sf=factor_at(scenario.slowdown, now_s),
            server_reachable=scenario.server_reachable(now_s),
        )
        server.server_sf = cond.server_sf

        if scenario.probe_enabled and now_s >= state.next_probe_s:
            flipped = probe_server(state, lambda: cond.server_reachable, now_s)
            if flipped and adaptive:
                config = schedule(ctx, state, scenario.sla, pack_est, now_s)
                invocations.append({
                    "t_ms": t_now, "reason": "availability",
                    "split_id": config.split.split_id, "thr_conf": config.thr_conf,
                })

        rec = engine.run_sample(sample, config, policy, cond, state, now_s)
        records.append(rec)
        start_times.append(t_now)

        # Run-time profiler updates from this inference.
        state.net.observe(cond.bandwidth_mbps, cond.latency_ms, now_s)
        if rec.device_offline_ms > 0:
            update_device_sf(state, rec.device_ms, rec.device_offline_ms)
        if rec.server_offline_ms > 0 and rec.server_ms > 0 and not rec.cancelled:
            state.server_sf = rec.server_ms / rec.server_offline_ms

        clock.admit(rec, t_now)
        t_now = clock.dev_free

        if adaptive:
            bw_est, lat_est = state.net.current(now_s)
            snap = {
                "bandwidth": bw_est,
                "latency": lat_est,
                "device_sf": state.device_sf,
                "server_sf": state.server_sf,
                "server_available": state.server_available,
            }
            if gate.check(snap):
                # Logged at the next sample's start: that is when the new
                # configuration takes effect.
                config = schedule(ctx, state, scenario.sla, pack_est, t_now / 1000.0)
                invocations.append({
                    "t_ms": t_now, "reason": "drift",
                    "split_id": config.split.split_id, "thr_conf": config.thr_conf,
                })

    aggregates = RunReport.aggregate(records, clock.makespan, len(invocations))
    aggregates["transport_bytes"] = transport.bytes_received
    return RunReport(
        policy_name=policy_name,
        scenario_name=scenario.name,
        seed=scenario.seed,
        records=records,
        invocations=invocations,
        aggregates=aggregates,
        start_times_ms=start_times,
    )


def run_scenario(scenario: Scenario) -> RunReport:
    return run_policy(scenario, ADAPTIVE)


def run_baseline(scenario: Scenario, kind: str) -> RunReport:
    if kind not in BASELINE_KINDS:
        raise ScenarioError(f"unknown baseline {kind!r}")
    return run_policy(scenario, kind)


def run_sweep(
    scenario: Scenario,
    param: str,
    values: list[float],
    policies: list[str] | None = None,
) -> list[RunReport]:
    """One run per (value, policy); the swept parameter overrides the
    scenario's fixed conditions."""
    policies = policies or [ADAPTIVE, *BASELINE_KINDS]
    reports = []
    for value in values:
        s = _apply_sweep(scenario, param, value)
        for policy in policies:
            rep = run_policy(s, policy)
            rep.aggregates["sweep_param"] = param
            rep.aggregates["sweep_value"] = value
            reports.append(rep)
    return reports


def _apply_sweep(scenario: Scenario, param: str, value: float) -> Scenario:
    if param == "bandwidth_mbps":
        base = scenario.trace.points[0]
        trace = NetworkTrace.constant(value, base.latency_ms, base.network_type)
        return replace(scenario, trace=trace)
    if param == "slowdown":
        return replace(scenario, slowdown=[ScheduleStep(0.0, value)])
    if param == "p_fail":
        return replace(scenario, p_fail=value)
    if param == "latency_ms":
        base = scenario.trace.points[0]
        trace = NetworkTrace.constant(base.bandwidth_mbps, value, base.network_type)
        return replace(scenario, trace=trace)
    raise ScenarioError(f"unknown sweep parameter {param!r}")
