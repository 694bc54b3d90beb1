"""Run-time estimates of device load, server load and network conditions.

The profiler keeps two views of the network: a short real-time window (last
three transfers) and a historical per-network-type moving average.  Device
load is captured by a single scaling factor applied uniformly to offline
layer timings; server load by an analogous factor learned from piggybacked
or inferred server compute times.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace

from .errors import ColdEstimatorError

NETWORK_TYPES = ("3g", "4g", "5g", "wifi", "ethernet")

# Nominal presets used when no estimate exists yet: (bandwidth Mbit/s, latency ms).
NETWORK_PRESETS: dict[str, tuple[float, float]] = {
    "3g": (4.0, 65.0),
    "4g": (30.0, 50.0),
    "5g": (200.0, 10.0),
    "wifi": (500.0, 5.0),
    "ethernet": (1000.0, 1.0),
}

RT_WINDOW = 3              # transfers kept in the real-time window
RT_HORIZON_S = 60.0        # real-time window is trusted for this long
GATE_WINDOW = 3            # snapshots averaged by the invocation gate
GATE_THRESHOLD = 0.05      # relative change that triggers the scheduler

PROBE_BASE_S = 5.0
PROBE_MAX_S = 80.0
PROBE_FAILURES_TO_DOWN = 3


def transfer_ms(latency_ms: float, bandwidth_mbps: float, nbytes: float) -> float:
    """Latency floor plus serialisation time: L + bits / rate, in ms."""
    if bandwidth_mbps <= 0:
        raise ValueError("bandwidth must be positive")
    return latency_ms + (8.0 * nbytes) / (1000.0 * bandwidth_mbps)


@dataclass
class NetworkEstimate:
    network_type: str = "wifi"
    rt_bw: deque = field(default_factory=lambda: deque(maxlen=RT_WINDOW))
    rt_lat: deque = field(default_factory=lambda: deque(maxlen=RT_WINDOW))
    hist_bw: dict[str, float] = field(default_factory=dict)
    hist_lat: dict[str, float] = field(default_factory=dict)
    hist_weight: float = 0.2   # EWMA step for the historical average
    last_transfer_ts: float | None = None
    presets: dict[str, tuple[float, float]] = field(default_factory=lambda: dict(NETWORK_PRESETS))

    def observe(self, bandwidth_mbps: float, latency_ms: float, now_s: float) -> None:
        self.rt_bw.append(bandwidth_mbps)
        self.rt_lat.append(latency_ms)
        self.last_transfer_ts = now_s
        t = self.network_type
        if t in self.hist_bw:
            w = self.hist_weight
            self.hist_bw[t] = (1 - w) * self.hist_bw[t] + w * bandwidth_mbps
            self.hist_lat[t] = (1 - w) * self.hist_lat[t] + w * latency_ms
        else:
            self.hist_bw[t] = bandwidth_mbps
            self.hist_lat[t] = latency_ms

    def set_network_type(self, network_type: str) -> None:
        if network_type != self.network_type:
            self.network_type = network_type
            self.rt_bw.clear()
            self.rt_lat.clear()
            self.last_transfer_ts = None

    def current(self, now_s: float, allow_presets: bool = True) -> tuple[float, float]:
        """(bandwidth Mbit/s, latency ms) to use right now.

        Real-time window wins while fresh; stale or empty windows fall back
        to the historical average for the current network type, then to the
        configured nominal presets.
        """
        fresh = (
            self.rt_bw
            and self.last_transfer_ts is not None
            and now_s - self.last_transfer_ts <= RT_HORIZON_S
        )
        if fresh:
            return (sum(self.rt_bw) / len(self.rt_bw), sum(self.rt_lat) / len(self.rt_lat))
        if self.network_type in self.hist_bw:
            return (self.hist_bw[self.network_type], self.hist_lat[self.network_type])
        if allow_presets and self.network_type in self.presets:
            return self.presets[self.network_type]
        raise ColdEstimatorError(
            f"no bandwidth/latency estimate for network type {self.network_type!r}"
        )


def estimate_transfer_ms(net: NetworkEstimate, nbytes: float, now_s: float = 0.0) -> float:
    bw, lat = net.current(now_s)
    return transfer_ms(lat, bw, nbytes)


@dataclass
class RuntimeProfilerState:
    """Single-writer profiler state; readers take snapshot() copies."""

    device_sf: float = 1.0
    server_sf: float = 1.0
    server_available: bool = True
    net: NetworkEstimate = field(default_factory=NetworkEstimate)
    last_t_real_ms: float | None = None
    last_t_offline_ms: float | None = None
    last_server_ms: float | None = None
    inconsistent_server_estimate: bool = False
    probe_interval_s: float = PROBE_BASE_S
    probe_failures: int = 0
    next_probe_s: float = 0.0

    def snapshot(self) -> "RuntimeProfilerState":
        return replace(self, net=replace(
            self.net,
            rt_bw=deque(self.net.rt_bw, maxlen=RT_WINDOW),
            rt_lat=deque(self.net.rt_lat, maxlen=RT_WINDOW),
            hist_bw=dict(self.net.hist_bw),
            hist_lat=dict(self.net.hist_lat),
        ))


def update_device_sf(state: RuntimeProfilerState, t_real_ms: float, t_offline_ms: float) -> RuntimeProfilerState:
    """SF = measured / offline time to the same split; no smoothing, the
    latest ratio wins.  Predictions for any split s' become SF * offline(s')."""
    if t_offline_ms <= 0:
        raise ValueError("offline estimate must be positive")
    state.device_sf = t_real_ms / t_offline_ms
    state.last_t_real_ms = t_real_ms
    state.last_t_offline_ms = t_offline_ms
    return state


def infer_server_time(
    state: RuntimeProfilerState,
    t_response_ms: float,
    d_response_bytes: float,
    piggybacked_ms: float | None = None,
    now_s: float = 0.0,
) -> float:
    """Server compute for the last offload: prefer the piggybacked value,
    else subtract the network terms from the observed response time.
    Negative estimates clamp to 0 and set the inconsistency flag."""
    if piggybacked_ms is not None:
        state.last_server_ms = piggybacked_ms
        state.inconsistent_server_estimate = False
        return piggybacked_ms
    bw, lat = state.net.current(now_s)
    est = t_response_ms - (lat + (8.0 * d_response_bytes) / (1000.0 * bw))
    if est < 0:
        state.last_server_ms = 0.0
        state.inconsistent_server_estimate = True
        return 0.0
    state.last_server_ms = est
    state.inconsistent_server_estimate = False
    return est


class SchedulerGate:
    """Decides when profile drift is large enough to re-run the scheduler.

    Each monitored quantity keeps a short window of recent values; a new
    snapshot triggers when it deviates from the window average by more than
    the threshold (relative).  On a trigger the window is reseeded with the
    new value so one step change fires once, not once per window slot.
    Boolean quantities trigger on any flip.

    With backoff=True the effective threshold doubles after each trigger
    inside a burst and resets after ``quiet_steps`` calm snapshots.
    """

    def __init__(self, threshold: float = GATE_THRESHOLD, window: int = GATE_WINDOW,
                 backoff: bool = False, quiet_steps: int = 5):
        self.threshold = threshold
        self.window = window
        self.backoff = backoff
        self.quiet_steps = quiet_steps
        self._values: dict[str, deque] = {}
        self._warmed: set[str] = set()
        self._bools: dict[str, bool] = {}
        self._burst = 0
        self._calm = 0
        self.invocations = 0

    def effective_threshold(self) -> float:
        if not self.backoff:
            return self.threshold
        return self.threshold * (2 ** self._burst)

    def check(self, snapshot: dict[str, float | bool]) -> bool:
        fired = False
        for key, value in snapshot.items():
            if isinstance(value, bool):
                if key in self._bools and self._bools[key] != value:
                    fired = True
                self._bools[key] = value
                continue
            win = self._values.setdefault(key, deque(maxlen=self.window))
            if key not in self._warmed:
                # Initial warm-up: not enough history to judge drift.
                win.append(value)
                if len(win) == self.window:
                    self._warmed.add(key)
                continue
            avg = sum(win) / len(win)
            denom = abs(avg) if avg != 0 else 1.0
            if abs(value - avg) / denom > self.effective_threshold():
                fired = True
                win.clear()
            win.append(value)
        if fired:
            self.invocations += 1
            if self.backoff:
                self._burst += 1
                self._calm = 0
        elif self.backoff:
            self._calm += 1
            if self._calm >= self.quiet_steps:
                self._burst = 0
        return fired


def should_invoke_scheduler(gate: SchedulerGate, snapshot: dict[str, float | bool]) -> bool:
    return gate.check(snapshot)


def probe_succeeded(state: RuntimeProfilerState, now_s: float) -> bool:
    """Record a successful probe; returns True when availability flipped."""
    flipped = not state.server_available
    state.server_available = True
    state.probe_failures = 0
    state.probe_interval_s = PROBE_BASE_S
    state.next_probe_s = now_s + state.probe_interval_s
    return flipped


def probe_server(state: RuntimeProfilerState, probe, now_s: float) -> bool:
    """Issue one background probe through ``probe()`` (a callable returning
    True when the server answers) and fold the outcome into the state.
    Returns True when availability flipped either way."""
    if probe():
        return probe_succeeded(state, now_s)
    return probe_failed(state, now_s)


def probe_failed(state: RuntimeProfilerState, now_s: float) -> bool:
    """Record a probe timeout; doubles the cadence up to the cap.  Returns
    True when availability flipped to down."""
    state.probe_failures += 1
    flipped = False
    if state.probe_failures >= PROBE_FAILURES_TO_DOWN and state.server_available:
        state.server_available = False
        flipped = True
    if state.probe_failures >= PROBE_FAILURES_TO_DOWN:
        state.probe_interval_s = min(state.probe_interval_s * 2, PROBE_MAX_S)
    state.next_probe_s = now_s + state.probe_interval_s
    return flipped
