"""SLA- and condition-aware selection of (split point, confidence threshold).

The candidate space is every split point crossed with the profile's
threshold grid.  Each candidate's metric vector is estimated from the
offline profiles rescaled by the runtime state; hard constraints filter the
space in priority order (with best-effort demotion when a constraint would
empty it) and a lexicographic pass over the soft targets picks the winner.

The whole-space estimate is laid out as contiguous per-metric arrays so a
full scheduling pass over ~10^4 candidates stays in the low-millisecond
range.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import yaml

from .errors import InfeasibleError, TraceError
from .graph import LayerGraph, SplitPoint, enumerate_splits
from .packing import PackEstimator, should_compress
from .profiles import ExitProfile, PlatformProfile, f32
from .runtime import RuntimeProfilerState
from .protocol import RESULT_FRAME_BYTES

METRICS = ("latency_ms", "throughput_ips", "server_cost_ms", "device_cost_ms", "accuracy")
_MAXIMIZE = frozenset({"throughput_ips", "accuracy"})

OPS = ("<=", ">=", "<", ">", "=")

REL_TOL = 1e-9


def _close(a: float, b: float) -> bool:
    return abs(a - b) <= REL_TOL * max(abs(a), abs(b))


@dataclass(frozen=True)
class Configuration:
    split: SplitPoint
    thr_conf: float

    def __post_init__(self):
        object.__setattr__(self, "thr_conf", f32(self.thr_conf))


@dataclass(frozen=True)
class MetricVector:
    latency_ms: float
    throughput_ips: float
    server_cost_ms: float
    device_cost_ms: float
    accuracy: float

    def get(self, metric: str) -> float:
        return getattr(self, metric)


@dataclass(frozen=True)
class HardConstraint:
    metric: str
    op: str
    threshold: float

    def __post_init__(self):
        if self.metric not in METRICS:
            raise TraceError(f"unknown metric {self.metric!r}")
        if self.op not in OPS:
            raise TraceError(f"unknown comparator {self.op!r}")

    def holds(self, value: float) -> bool:
        if self.op == "<=":
            return value <= self.threshold
        if self.op == ">=":
            return value >= self.threshold
        if self.op == "<":
            return value < self.threshold
        if self.op == ">":
            return value > self.threshold
        return _close(value, self.threshold)


@dataclass(frozen=True)
class SoftTarget:
    metric: str
    mode: str  # "min" | "max" | "value"
    value: float | None = None

    def __post_init__(self):
        if self.metric not in METRICS:
            raise TraceError(f"unknown metric {self.metric!r}")
        if self.mode not in ("min", "max", "value"):
            raise TraceError(f"unknown soft-target mode {self.mode!r}")
        if self.mode == "value" and self.value is None:
            raise TraceError("mode 'value' requires a target value")


@dataclass(frozen=True)
class SlaSpec:
    hard: tuple[HardConstraint, ...] = ()
    soft: tuple[SoftTarget, ...] = ()

    def __post_init__(self):
        seen = set()
        for t in self.soft:
            if t.metric in seen:
                raise TraceError(f"metric {t.metric} appears twice in soft targets")
            seen.add(t.metric)


def demote_constraint(c: HardConstraint) -> SoftTarget:
    """Best-effort translation of an unsatisfiable hard constraint."""
    if c.op in ("<=", "<"):
        return SoftTarget(c.metric, "min")
    if c.op in (">=", ">"):
        return SoftTarget(c.metric, "max")
    return SoftTarget(c.metric, "value", c.threshold)


def load_sla(path: str) -> SlaSpec:
    with open(path, "r", encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    return sla_from_dict(doc)


def sla_from_dict(doc: dict) -> SlaSpec:
    hard = tuple(
        HardConstraint(str(h["metric"]), str(h["op"]), float(h["thr"]))
        for h in doc.get("hard", [])
    )
    soft = []
    for s in doc.get("soft", []):
        mode = str(s["mode"])
        soft.append(
            SoftTarget(str(s["metric"]), mode,
                       float(s["value"]) if mode == "value" else None)
        )
    return SlaSpec(hard=hard, soft=tuple(soft))


@dataclass
class PlanContext:
    """Immutable per-bundle arrays shared by every scheduling pass.

    Built once from the offline profiles; runtime state only rescales them.
    """

    graph: LayerGraph
    exit_profile: ExitProfile
    splits: list[SplitPoint]
    grid: tuple[float, ...]
    # per-layer cumulative ms at SF=1 (index 0 is "before layer 1")
    dev_cum: np.ndarray
    srv_cum: np.ndarray
    # per-exit arrays
    exit_pos: np.ndarray        # attachment layer id
    head_dev_cum: np.ndarray    # cumulative device head ms through exit e
    head_srv_cum: np.ndarray
    # per-split arrays
    cut: np.ndarray             # last device layer (0 for input, n for none)
    horizon: np.ndarray         # index of first exit past the cut (E if none)
    raw_bytes: np.ndarray       # float32 payload bytes crossing each cut

    @staticmethod
    def build(
        graph: LayerGraph,
        device_profile: PlatformProfile,
        server_profile: PlatformProfile,
        exit_profile: ExitProfile,
        splits: list[SplitPoint] | None = None,
        grid: tuple[float, ...] | None = None,
    ) -> "PlanContext":
        device_profile.validate(graph)
        server_profile.validate(graph)
        if splits is None:
            splits = enumerate_splits(graph)
        grid = tuple(grid) if grid is not None else exit_profile.threshold_grid
        n = graph.n_layers
        dev_cum = np.zeros(n + 1)
        srv_cum = np.zeros(n + 1)
        for l in graph.layers:
            dev_cum[l.id] = dev_cum[l.id - 1] + device_profile.layer_ms[l.id]
            srv_cum[l.id] = srv_cum[l.id - 1] + server_profile.layer_ms[l.id]
        e_count = graph.n_exits
        exit_pos = np.array([e.layer_id for e in graph.exits], dtype=np.int64)
        head_dev = np.array([device_profile.exit_ms[e.exit_id] for e in graph.exits])
        head_srv = np.array([server_profile.exit_ms[e.exit_id] for e in graph.exits])
        head_dev_cum = np.cumsum(head_dev)
        head_srv_cum = np.cumsum(head_srv)
        cut = np.array(
            [s.layer_id if not s.is_none else n for s in splits], dtype=np.int64
        )
        horizon = np.searchsorted(exit_pos, cut, side="right").astype(np.int64)
        raw_bytes = np.array([float(s.transfer_bytes) for s in splits])
        return PlanContext(
            graph=graph,
            exit_profile=exit_profile,
            splits=splits,
            grid=grid,
            dev_cum=dev_cum,
            srv_cum=srv_cum,
            exit_pos=exit_pos,
            head_dev_cum=head_dev_cum,
            head_srv_cum=head_srv_cum,
            cut=cut,
            horizon=horizon,
            raw_bytes=raw_bytes,
        )

    @property
    def n_exits(self) -> int:
        return len(self.exit_pos)


@dataclass
class MetricTable:
    """Estimates for the whole candidate space: arrays shaped (splits, thresholds)."""

    ctx: PlanContext
    latency_ms: np.ndarray
    throughput_ips: np.ndarray
    server_cost_ms: np.ndarray
    device_cost_ms: np.ndarray
    accuracy: np.ndarray
    compressed: np.ndarray      # bool per split: CNN packing amortizes
    local_wins_race: np.ndarray  # bool per split: fallback exit beats the round trip

    def metric(self, name: str) -> np.ndarray:
        return getattr(self, name)

    def vector(self, si: int, ti: int) -> MetricVector:
        return MetricVector(
            latency_ms=float(self.latency_ms[si, ti]),
            throughput_ips=float(self.throughput_ips[si, ti]),
            server_cost_ms=float(self.server_cost_ms[si, ti]),
            device_cost_ms=float(self.device_cost_ms[si, ti]),
            accuracy=float(self.accuracy[si, ti]),
        )


def metric_table(
    ctx: PlanContext,
    state: RuntimeProfilerState,
    pack_est: PackEstimator | None = None,
    now_s: float = 0.0,
) -> MetricTable:
    """Estimate every candidate's metric vector under the current conditions."""
    pack_est = pack_est or PackEstimator()
    table = ctx.exit_profile.policy_table(ctx.grid)
    bw, lat = state.net.current(now_s)
    sf = state.device_sf
    ssf = state.server_sf

    e_count = ctx.n_exits
    s_count = len(ctx.splits)
    t_count = len(ctx.grid)
    n = float(table.n_samples)

    # Per-exit device-path time through exit e (layers + heads, scaled by SF).
    t_dev_exit = sf * (ctx.dev_cum[ctx.exit_pos] + ctx.head_dev_cum)          # (E,)
    head_dev_prefix = np.concatenate(([0.0], ctx.head_dev_cum))               # (E+1,)
    head_srv_prefix = np.concatenate(([0.0], ctx.head_srv_cum))
    t_dev_split = sf * (ctx.dev_cum[ctx.cut] + head_dev_prefix[ctx.horizon])  # (S,)

    # Payloads: packed estimate when compression amortizes, raw bytes otherwise.
    ratios = np.array([pack_est.ratio(s.split_id) for s in ctx.splits])
    pack_ms_full = ctx.raw_bytes / (pack_est.pack_mbps * 1000.0)
    offloadable = ctx.horizon < e_count
    comp = np.zeros(s_count, dtype=bool)
    for si in range(s_count):
        if offloadable[si] and ctx.raw_bytes[si] > 0:
            comp[si] = should_compress(
                ctx.raw_bytes[si], pack_ms_full[si], ratios[si], bw
            )
    payload = np.where(comp, ctx.raw_bytes / ratios, ctx.raw_bytes)
    pack_ms = np.where(comp, pack_ms_full, 0.0)
    tr_out = lat + 8.0 * payload / (1000.0 * bw)
    tr_resp = lat + 8.0 * RESULT_FRAME_BYTES / (1000.0 * bw)

    # Server segment from the cut through exit e, heads included.  (S, E)
    seg = ssf * (
        (ctx.srv_cum[ctx.exit_pos][None, :] - ctx.srv_cum[ctx.cut][:, None])
        + (ctx.head_srv_cum[None, :] - head_srv_prefix[ctx.horizon][:, None])
    )
    t_remote = (t_dev_split + pack_ms + tr_out + tr_resp)[:, None] + seg      # (S, E)

    cross = table.cross_counts.astype(np.float64)                             # (T, E)
    n_nocross = table.nocross_argmax.sum(axis=1).astype(np.float64)           # (T,)

    e_idx = np.arange(e_count)
    before = e_idx[None, :] < ctx.horizon[:, None]                            # (S, E)
    at = e_idx[None, :] == ctx.horizon[:, None]
    after = e_idx[None, :] > ctx.horizon[:, None]

    t_fb = np.where(offloadable, t_dev_exit[np.minimum(ctx.horizon, e_count - 1)], 0.0)
    local_wins = offloadable & (t_fb <= np.where(
        offloadable, t_remote[np.arange(s_count), np.minimum(ctx.horizon, e_count - 1)], 0.0
    ))

    lat_local = np.where(before, t_dev_exit[None, :], 0.0)
    lat_at = np.where(at, np.minimum(t_fb[:, None], t_remote), 0.0)
    lat_after = np.where(after, t_remote, 0.0)
    per_exit_lat = lat_local + lat_at + lat_after                              # (S, E)

    latency = cross @ per_exit_lat.T                                           # (T, S)
    latency = latency.T                                                        # (S, T)
    # Non-crossers: device-only splits finish the whole network locally,
    # offloadable splits wait for the server to run to the final exit.
    nocross_lat = np.where(offloadable, t_remote[:, -1], t_dev_exit[-1])
    latency += nocross_lat[:, None] * n_nocross[None, :]
    latency /= n

    seg_masked = np.where(before, 0.0, seg)
    server_cost = (cross @ seg_masked.T).T
    server_cost += np.where(offloadable, seg[:, -1], 0.0)[:, None] * n_nocross[None, :]
    server_cost /= n

    # Every sample that does not exit locally before the horizon pays the
    # device path through the fallback exit (continuation past the split).
    dev_local = np.where(before, t_dev_exit[None, :], 0.0)
    n_local = (cross @ before.T).T                                             # (S, T)
    n_offload = n - n_local
    dev_fb = np.where(offloadable, t_fb, t_dev_exit[-1])
    device_cost = ((cross @ dev_local.T).T + n_offload * dev_fb[:, None]) / n

    transfer_stage = np.where(
        offloadable[:, None],
        n_offload * (pack_ms + tr_out + tr_resp)[:, None] / n,
        0.0,
    )

    accuracy = np.broadcast_to(table.accuracy[None, :], (s_count, t_count)).copy()

    if not state.server_available:
        # Offloadable splits degrade to the device-fallback path: run to the
        # next exit past the cut, accept the most confident local result.
        fb_lat = ((cross @ dev_local.T).T + n_offload * dev_fb[:, None]) / n
        j_col = np.minimum(ctx.horizon, e_count - 1)
        fb_acc = table.fallback_accuracy[:, j_col].T                           # (S, T)
        off_col = offloadable[:, None]
        latency = np.where(off_col, fb_lat, latency)
        accuracy = np.where(off_col, fb_acc, accuracy)
        server_cost = np.where(off_col, 0.0, server_cost)
        transfer_stage = np.where(off_col, 0.0, transfer_stage)
        device_cost = np.where(off_col, fb_lat, device_cost)

    device_stage = device_cost
    server_stage = server_cost
    bottleneck = np.maximum(np.maximum(device_stage, transfer_stage), server_stage)
    throughput = 1000.0 / np.maximum(bottleneck, 1e-9)

    return MetricTable(
        ctx=ctx,
        latency_ms=latency,
        throughput_ips=throughput,
        server_cost_ms=server_cost,
        device_cost_ms=device_cost,
        accuracy=accuracy,
        compressed=comp,
        local_wins_race=local_wins,
    )


def estimate_metrics(
    config: Configuration,
    ctx: PlanContext,
    state: RuntimeProfilerState,
    pack_est: PackEstimator | None = None,
    now_s: float = 0.0,
) -> MetricVector:
    """Metric vector for a single candidate (same arithmetic as the table)."""
    table = metric_table(ctx, state, pack_est, now_s)
    si = next(
        (i for i, s in enumerate(ctx.splits) if s.split_id == config.split.split_id),
        None,
    )
    if si is None:
        raise InfeasibleError(f"split {config.split.split_id} is not in the plan space")
    ti = next((i for i, t in enumerate(ctx.grid) if t == config.thr_conf), None)
    if ti is None:
        raise InfeasibleError(
            f"threshold {config.thr_conf} is not on the plan grid {ctx.grid}"
        )
    return table.vector(si, ti)


def filter_feasible(
    candidates: list[Configuration],
    sla: SlaSpec,
    metrics: list[MetricVector],
) -> tuple[list[int], int, list[SoftTarget]]:
    """Apply hard constraints in priority order over precomputed metrics.

    Returns (surviving candidate indexes, satisfied constraint count,
    demoted best-effort soft targets).  A constraint that would empty the
    set is skipped along with everything after it.
    """
    alive = list(range(len(candidates)))
    satisfied = 0
    demoted: list[SoftTarget] = []
    for ci, constraint in enumerate(sla.hard):
        keep = [i for i in alive if constraint.holds(metrics[i].get(constraint.metric))]
        if not keep:
            demoted = [demote_constraint(c) for c in sla.hard[ci:]]
            break
        alive = keep
        satisfied += 1
    return alive, satisfied, demoted


def _split_order_key(split: SplitPoint) -> int:
    # Later split = more layers on-device; the none sentinel is the latest.
    return split.layer_id


def lexicographic_select(
    feasible: list[int],
    soft: list[SoftTarget],
    candidates: list[Configuration],
    metrics: list[MetricVector],
) -> Configuration:
    """Shrink the feasible set one soft target at a time, then tie-break.

    Equality between metric values uses relative tolerance 1e-9.  Remaining
    ties fall to (lower server cost, later split, higher threshold).
    """
    if not feasible:
        raise InfeasibleError("no feasible configuration")
    alive = list(feasible)
    for target in soft:
        if len(alive) == 1:
            break
        values = [metrics[i].get(target.metric) for i in alive]
        if target.mode == "min":
            best = min(values)
        elif target.mode == "max":
            best = max(values)
        else:
            dist = [abs(v - target.value) for v in values]
            best_d = min(dist)
            alive = [i for i, d in zip(alive, dist) if _close(d, best_d) or d <= best_d]
            continue
        if target.mode == "min":
            alive = [i for i, v in zip(alive, values) if v <= best or _close(v, best)]
        else:
            alive = [i for i, v in zip(alive, values) if v >= best or _close(v, best)]

    def tie_key(i: int):
        c = candidates[i]
        return (metrics[i].server_cost_ms, -_split_order_key(c.split), -c.thr_conf)

    return candidates[min(alive, key=tie_key)]


def candidate_space(ctx: PlanContext) -> list[Configuration]:
    return [
        Configuration(split=s, thr_conf=t) for s in ctx.splits for t in ctx.grid
    ]


def schedule(
    ctx: PlanContext,
    state: RuntimeProfilerState,
    sla: SlaSpec,
    pack_est: PackEstimator | None = None,
    now_s: float = 0.0,
) -> Configuration:
    """Full pass: estimate the space, filter on hard constraints, optimize
    soft targets lexicographically.  Deterministic for fixed inputs."""
    table = metric_table(ctx, state, pack_est, now_s)
    s_count, t_count = table.latency_ms.shape
    if s_count * t_count == 0:
        raise InfeasibleError("candidate space is empty")

    arrays = {m: table.metric(m).reshape(-1) for m in METRICS}
    alive = np.ones(s_count * t_count, dtype=bool)
    demoted: list[SoftTarget] = []
    for ci, constraint in enumerate(sla.hard):
        vals = arrays[constraint.metric]
        if constraint.op == "<=":
            ok = vals <= constraint.threshold
        elif constraint.op == ">=":
            ok = vals >= constraint.threshold
        elif constraint.op == "<":
            ok = vals < constraint.threshold
        elif constraint.op == ">":
            ok = vals > constraint.threshold
        else:
            ok = np.abs(vals - constraint.threshold) <= REL_TOL * np.maximum(
                np.abs(vals), abs(constraint.threshold)
            )
        keep = alive & ok
        if not keep.any():
            demoted = [demote_constraint(c) for c in sla.hard[ci:]]
            break
        alive = keep

    targets = demoted + list(sla.soft)
    idx = np.flatnonzero(alive)
    for target in targets:
        if idx.size == 1:
            break
        vals = arrays[target.metric][idx]
        if target.mode == "min":
            best = vals.min()
            tol = REL_TOL * np.maximum(np.abs(vals), abs(best))
            idx = idx[vals <= best + tol]
        elif target.mode == "max":
            best = vals.max()
            tol = REL_TOL * np.maximum(np.abs(vals), abs(best))
            idx = idx[vals >= best - tol]
        else:
            dist = np.abs(vals - target.value)
            best = dist.min()
            tol = REL_TOL * np.maximum(np.abs(dist), abs(best))
            idx = idx[dist <= best + tol]

    # Tie-break: lower server cost, later split, higher threshold.
    split_key = np.array([_split_order_key(s) for s in ctx.splits])
    si = idx // t_count
    ti = idx % t_count
    order = np.lexsort((
        -np.asarray(ctx.grid)[ti],
        -split_key[si],
        arrays["server_cost_ms"][idx],
    ))
    pick = idx[order[0]]
    return Configuration(split=ctx.splits[pick // t_count], thr_conf=ctx.grid[pick % t_count])
