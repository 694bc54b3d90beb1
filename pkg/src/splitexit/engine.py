"""Distributed execution of one configured inference: offload, resume,
early exit, cancellation, fallback and retransmission.

All timing is virtual (model arithmetic in ms); the transport only moves
frames and contributes the server's piggybacked compute time.  Decisions
that race a local fallback exit against the remote reply are adjudicated on
the profiler's estimates, which makes per-sample (exit, origin) outcomes
identical across the in-process and TCP transports for fixed conditions
and seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import LayerGraph, SplitPoint, cut_payload_edges
from .packing import PackEstimator, PackedPayload, pack_tensor, should_compress, unpack_tensor
from .profiles import ExitProfile, SampleTrace
from .protocol import (
    CANCEL_FRAME_BYTES,
    HEADER_BYTES,
    RESULT_FRAME_BYTES,
    OffloadMessage,
    ResultMessage,
    decode_thr,
)
from .runtime import RuntimeProfilerState, transfer_ms
from .scheduler import Configuration, PlanContext
from .synth_tensors import build_activation, decode_sample_id

FAILURE_FALLBACK_LOCAL = "fallback_local"
FAILURE_RETRANSMIT = "retransmit_backoff"

# How a failed attempt is noticed: a refused/reset connection surfaces after
# one network latency, a silently lost request only at the timeout.
DETECT_LOSS = "loss"
DETECT_TIMEOUT = "timeout"

BACKOFF_INITIAL_MS = 20.0
R_MAX = 10
TIMEOUT_FACTOR = 2.0

ORIGIN_LOCAL = "local"
ORIGIN_REMOTE = "remote"

# Reported exit id when a baseline without local exits loses its request.
NO_RESULT_EXIT = -1

OFFLOAD_FIXED_BYTES = HEADER_BYTES + 7  # frame header + split/thr/count fields


def backoff_wait_ms(k: int, initial_ms: float = BACKOFF_INITIAL_MS) -> float:
    """Wait after the k-th consecutive failure (k starts at 1)."""
    return initial_ms * (2.0 ** (k - 1))


def expected_backoff_ms(p_fail: float, initial_ms: float = BACKOFF_INITIAL_MS,
                        r_max: int = R_MAX) -> float:
    """Truncated series: the k-th wait is paid iff the first k attempts fail."""
    return sum((p_fail ** k) * backoff_wait_ms(k, initial_ms) for k in range(1, r_max + 1))


def simulate_backoff_ms(rng: np.random.Generator, p_fail: float,
                        initial_ms: float = BACKOFF_INITIAL_MS,
                        r_max: int = R_MAX) -> float:
    """One Monte-Carlo draw of the total backoff wait for a request."""
    total = 0.0
    for k in range(1, r_max + 2):
        if rng.random() >= p_fail:
            break
        if k <= r_max:
            total += backoff_wait_ms(k, initial_ms)
    return total


@dataclass(frozen=True)
class ExecutionPolicy:
    """How exits are used: threshold policy, no exits at all, or one pinned exit."""

    kind: str = "progressive"       # progressive | nonprogressive | fixed_exit
    fixed_exit: int | None = None

    def wire_thr(self, thr_conf: float) -> float:
        from .protocol import THR_NONPROGRESSIVE, thr_fixed_exit

        if self.kind == "nonprogressive":
            return THR_NONPROGRESSIVE
        if self.kind == "fixed_exit":
            return thr_fixed_exit(self.fixed_exit)
        return thr_conf

    @property
    def has_local_fallback(self) -> bool:
        return self.kind == "progressive"


PROGRESSIVE = ExecutionPolicy("progressive")


@dataclass(frozen=True)
class Conditions:
    """Ground-truth environment for one sample."""

    bandwidth_mbps: float
    latency_ms: float
    device_sf: float = 1.0
    server_sf: float = 1.0
    server_reachable: bool = True


# Request lifecycle phases.  Terminal phases: EXITED_LOCALLY,
# REMOTE_COMPLETED, CANCELLED (local result used), FAILED (best local result
# used, or none for policies without local exits).
LOCAL_RUNNING = "LocalRunning"
EXITED_LOCALLY = "ExitedLocally"
OFFLOADED = "Offloaded"
FALLBACK_CONTINUING = "FallbackContinuing"
REMOTE_COMPLETED = "RemoteCompleted"
CANCELLED = "Cancelled"
FAILED = "Failed"

LEGAL_TRANSITIONS = {
    LOCAL_RUNNING: {EXITED_LOCALLY, OFFLOADED, FALLBACK_CONTINUING},
    OFFLOADED: {FALLBACK_CONTINUING, REMOTE_COMPLETED, FAILED},
    FALLBACK_CONTINUING: {REMOTE_COMPLETED, CANCELLED, FAILED},
}
TERMINAL_PHASES = {EXITED_LOCALLY, REMOTE_COMPLETED, CANCELLED, FAILED}


@dataclass
class SampleRecord:
    sample_id: int
    exit_id: int
    origin: str
    correct: int
    latency_ms: float
    bytes_sent: int
    device_ms: float
    server_ms: float
    pack_ms: float
    transfer_ms: float
    backoff_ms: float
    attempts: int
    compressed: bool
    cancelled: bool
    # Offline-equivalent times for the same work (load factor 1), letting the
    # profiler recover scaling factors from observables alone.
    device_offline_ms: float = 0.0
    server_offline_ms: float = 0.0
    request_id: int = 0
    confidence: float = 0.0
    phases: tuple[str, ...] = (LOCAL_RUNNING, EXITED_LOCALLY)


class ServerCore:
    """Server-side execution shared by the in-process and TCP transports.

    Holds the same graph/profile bundle as the client; "executing" a layer
    consumes its profiled latency and the trace's recorded confidences.
    """

    def __init__(self, graph: LayerGraph, server_layer_ms: dict[int, float],
                 server_exit_ms: dict[int, float], exit_profile: ExitProfile,
                 splits: list[SplitPoint], server_sf: float = 1.0,
                 piggyback: bool = True):
        self.graph = graph
        self.layer_ms = server_layer_ms
        self.exit_ms = server_exit_ms
        self.splits = {s.split_id: s for s in splits}
        self.samples = {s.sample_id: s for s in exit_profile.samples}
        self.server_sf = server_sf
        self.piggyback = piggyback
        self.accounted_ms: dict[int, float] = {}
        self.cancelled: set[int] = set()

    @property
    def total_compute_ms(self) -> float:
        return sum(self.accounted_ms.values())

    def _segment_ms(self, first_layer: int, last_layer: int,
                    head_exits: list[int]) -> float:
        ms = sum(self.layer_ms[l] for l in range(first_layer, last_layer + 1))
        ms += sum(self.exit_ms[e] for e in head_exits)
        return self.server_sf * ms

    def _reply(self, request_id: int, exit_id: int, confidence: float,
               compute_ms: float) -> ResultMessage:
        us = int(round(compute_ms * 1000.0)) if self.piggyback else None
        return ResultMessage(request_id, exit_id, 0, confidence, us)

    def handle_offload(self, msg: OffloadMessage) -> tuple[ResultMessage, float]:
        """Resume execution past the cut; returns the reply and the compute
        time consumed (ms, already scaled by the server's load factor)."""
        split = self.splits[msg.split_id]
        cut = split.layer_id
        sample_id = decode_sample_id(unpack_tensor(msg.payloads[0][1]))
        trace = self.samples[sample_id]
        kind, fixed_exit, thr = decode_thr(msg.thr_conf)

        exits = [e for e in self.graph.exits if e.layer_id > cut]
        final = self.graph.exits[-1]

        if kind == "fixed_exit":
            target = self.graph.exits[fixed_exit]
            compute = self._segment_ms(cut + 1, target.layer_id, [fixed_exit])
            return self._reply(msg.request_id, fixed_exit,
                               trace.confidences[fixed_exit], compute), compute

        if kind == "nonprogressive":
            compute = self._segment_ms(cut + 1, final.layer_id, [final.exit_id])
            return self._reply(msg.request_id, final.exit_id,
                               trace.confidences[final.exit_id], compute), compute

        # Progressive: evaluate each remaining exit in order and reply at the
        # first threshold crossing.  With no crossing, run to the end and
        # return the most confident remote-side exit so the client can finish
        # the most-confident-anywhere selection.
        heads: list[int] = []
        for e in exits:
            heads.append(e.exit_id)
            if trace.confidences[e.exit_id] > thr:
                compute = self._segment_ms(cut + 1, e.layer_id, heads)
                return self._reply(msg.request_id, e.exit_id,
                                   trace.confidences[e.exit_id], compute), compute
        best = max(exits, key=lambda e: (trace.confidences[e.exit_id], -e.exit_id))
        compute = self._segment_ms(cut + 1, final.layer_id, heads)
        return self._reply(msg.request_id, best.exit_id,
                           trace.confidences[best.exit_id], compute), compute

    def set_account(self, request_id: int, compute_ms: float) -> None:
        self.accounted_ms[request_id] = compute_ms

    def cancel(self, request_id: int) -> None:
        self.cancelled.add(request_id)


class ClientEngine:
    """Per-sample request state machine, driven in virtual time."""

    def __init__(
        self,
        plan: PlanContext,
        pack_est: PackEstimator,
        transport,
        failure_policy: str = FAILURE_FALLBACK_LOCAL,
        failure_detect: str = DETECT_LOSS,
        p_fail: float = 0.0,
        rng: np.random.Generator | None = None,
        r_max: int = R_MAX,
        backoff_initial_ms: float = BACKOFF_INITIAL_MS,
        sparsity: float = 0.8,
    ):
        self.plan = plan
        self.pack_est = pack_est
        self.transport = transport
        self.failure_policy = failure_policy
        self.failure_detect = failure_detect
        self.p_fail = p_fail
        self.rng = rng or np.random.default_rng(0)
        self.r_max = r_max
        self.backoff_initial_ms = backoff_initial_ms
        self.sparsity = sparsity
        self._next_request_id = 1

    def _detect_ms(self, cond: Conditions, timeout_ms: float) -> float:
        if self.failure_detect == DETECT_LOSS:
            return cond.latency_ms
        return timeout_ms

    # -- model arithmetic over the plan arrays -----------------------------
    def _dev_path_ms(self, exit_idx: int, sf: float) -> float:
        g = self.plan
        return sf * float(g.dev_cum[g.exit_pos[exit_idx]] + g.head_dev_cum[exit_idx])

    def _dev_split_ms(self, si: int, sf: float, with_heads: bool = True) -> float:
        g = self.plan
        j = int(g.horizon[si])
        heads = float(g.head_dev_cum[j - 1]) if (with_heads and j > 0) else 0.0
        return sf * (float(g.dev_cum[g.cut[si]]) + heads)

    def _srv_segment_ms(self, si: int, exit_idx: int, ssf: float) -> float:
        g = self.plan
        j = int(g.horizon[si])
        head_lo = float(g.head_srv_cum[j - 1]) if j > 0 else 0.0
        return ssf * float(
            g.srv_cum[g.exit_pos[exit_idx]] - g.srv_cum[g.cut[si]]
            + g.head_srv_cum[exit_idx] - head_lo
        )

    def _estimate_remote_ms(self, si: int, exit_idx: int,
                            state: RuntimeProfilerState, pack_ms: float,
                            payload_bytes: float, now_s: float) -> float:
        """Model of the post-split remote path; used for decisions only."""
        bw, lat = state.net.current(now_s)
        out = transfer_ms(lat, bw, payload_bytes)
        back = transfer_ms(lat, bw, RESULT_FRAME_BYTES)
        seg = self._srv_segment_ms(si, exit_idx, state.server_sf)
        return pack_ms + out + seg + back

    def _split_index(self, config: Configuration) -> int:
        for i, s in enumerate(self.plan.splits):
            if s.split_id == config.split.split_id:
                return i
        raise ValueError(f"split {config.split.split_id} not in the plan space")

    def _build_payloads(
        self, sample: SampleTrace, split: SplitPoint, lossy: bool
    ) -> tuple[tuple[tuple[int, PackedPayload], ...], int, int]:
        edges = cut_payload_edges(self.plan.graph, split)
        payloads = []
        raw_total = 0
        wire_total = 0
        for _producer, consumer, nbytes in edges:
            n_elems = max(nbytes // 4, 40)
            tensor = build_activation(sample.sample_id, n_elems, self.sparsity)
            packed = pack_tensor(tensor, lossy=lossy)
            payloads.append((consumer, packed))
            raw_total += 4 * n_elems
            wire_total += 4 + packed.nbytes
        return tuple(payloads), raw_total, wire_total

    def _prepare_offload(self, sample, split, config, policy, state, now_s):
        raw_f32 = float(split.transfer_bytes)
        est_pack = self.pack_est.pack_ms(raw_f32)
        bw_est, _ = state.net.current(now_s)
        lossy = raw_f32 > 0 and should_compress(
            raw_f32, est_pack, self.pack_est.ratio(split.split_id), bw_est
        )
        payloads, raw_total, wire_payload = self._build_payloads(sample, split, lossy)
        pack_ms = self.pack_est.pack_ms(raw_total) if lossy else 0.0
        wire_bytes = OFFLOAD_FIXED_BYTES + wire_payload
        if lossy:
            self.pack_est.observe(split.split_id, raw_total, wire_payload)
        request_id = self._next_request_id
        self._next_request_id += 1
        msg = OffloadMessage(request_id, split.split_id,
                             policy.wire_thr(config.thr_conf), payloads)
        est_payload = raw_f32 / self.pack_est.ratio(split.split_id) if lossy else raw_f32
        return msg, lossy, pack_ms, wire_bytes, est_pack if lossy else 0.0, est_payload

    def _local_record(self, sample, exit_id, latency, device_ms, sf, **extra) -> SampleRecord:
        base = dict(
            sample_id=sample.sample_id, exit_id=exit_id, origin=ORIGIN_LOCAL,
            correct=sample.correct[exit_id], latency_ms=latency, bytes_sent=0,
            device_ms=device_ms, server_ms=0.0, pack_ms=0.0, transfer_ms=0.0,
            backoff_ms=0.0, attempts=0, compressed=False, cancelled=False,
            device_offline_ms=device_ms / sf if sf > 0 else 0.0,
            confidence=sample.confidences[exit_id],
        )
        base.update(extra)
        return SampleRecord(**base)

    # -- main entry ---------------------------------------------------------
    def run_sample(
        self,
        sample: SampleTrace,
        config: Configuration,
        policy: ExecutionPolicy,
        cond: Conditions,
        state: RuntimeProfilerState,
        now_s: float = 0.0,
    ) -> SampleRecord:
        if policy.kind != "progressive":
            return self._run_without_local_exits(sample, config, policy, cond, state, now_s)

        si = self._split_index(config)
        split = self.plan.splits[si]
        g = self.plan
        e_count = g.n_exits
        j = int(g.horizon[si])
        thr = config.thr_conf
        sf = cond.device_sf

        # Device walk: exits at or before the cut, in order.  A confident
        # exit here returns before any request is queued: zero bytes sent.
        for e in range(j):
            if sample.confidences[e] > thr:
                t = self._dev_path_ms(e, sf)
                return self._local_record(sample, e, t, t, sf)

        if j >= e_count:
            # Device-only: run the whole network, then most confident exit.
            best = max(range(e_count), key=lambda e: (sample.confidences[e], -e))
            t = self._dev_path_ms(e_count - 1, sf)
            return self._local_record(sample, best, t, t, sf)

        # Offload past the cut while the device continues to the next exit.
        t_split = self._dev_split_ms(si, sf)
        t_fb = self._dev_path_ms(j, sf)
        fb_crossed = sample.confidences[j] > thr

        if not state.server_available:
            # Known-down server: skip the request entirely and accept the
            # most confident device-side result at the fallback exit.
            best = j if fb_crossed else max(
                range(j + 1), key=lambda e: (sample.confidences[e], -e)
            )
            return self._local_record(
                sample, best, t_fb, t_fb, sf,
                phases=(LOCAL_RUNNING, FALLBACK_CONTINUING, FAILED),
            )

        msg, lossy, pack_ms, wire_bytes, est_pack, est_payload = self._prepare_offload(
            sample, split, config, policy, state, now_s
        )
        tr_out = transfer_ms(cond.latency_ms, cond.bandwidth_mbps, wire_bytes)
        tr_resp = transfer_ms(cond.latency_ms, cond.bandwidth_mbps, RESULT_FRAME_BYTES)

        # Race adjudication on profiler estimates (transport-independent).
        t_remote_est = t_split + self._estimate_remote_ms(si, j, state, est_pack, est_payload, now_s)
        local_wins = fb_crossed and t_fb <= t_remote_est

        timeout_ms = TIMEOUT_FACTOR * (
            pack_ms + self._estimate_remote_ms(si, e_count - 1, state, est_pack, est_payload, now_s)
        )
        detect_ms = self._detect_ms(cond, timeout_ms)
        t_send = t_split + pack_ms
        backoff_total = 0.0
        attempts = 0
        delivered = False
        reply: ResultMessage | None = None
        server_ms = 0.0
        while True:
            attempts += 1
            failed = (not cond.server_reachable) or (
                self.p_fail > 0 and float(self.rng.random()) < self.p_fail
            )
            if not failed:
                reply, server_ms = self.transport.offload(msg, t_send + tr_out)
                delivered = True
                break
            if fb_crossed:
                # A usable confident local result exists; stop retrying.
                break
            if self.failure_policy == FAILURE_RETRANSMIT and attempts <= self.r_max:
                wait = backoff_wait_ms(attempts, self.backoff_initial_ms)
                backoff_total += wait
                t_send = t_send + detect_ms + wait
                continue
            break

        bytes_sent = wire_bytes * attempts

        if local_wins:
            # Fallback exit accepted at completion; cancel the remote work.
            bytes_sent += CANCEL_FRAME_BYTES
            server_acct = 0.0
            if delivered:
                t_cancel = t_fb + transfer_ms(
                    cond.latency_ms, cond.bandwidth_mbps, CANCEL_FRAME_BYTES
                )
                self.transport.cancel(msg.request_id, t_cancel)
                server_acct = self.transport.accounted_ms(msg.request_id)
            return SampleRecord(
                sample.sample_id, j, ORIGIN_LOCAL, sample.correct[j],
                latency_ms=t_fb, bytes_sent=bytes_sent, device_ms=t_fb,
                server_ms=server_acct, pack_ms=pack_ms, transfer_ms=tr_out,
                backoff_ms=backoff_total, attempts=attempts,
                compressed=lossy, cancelled=True,
                device_offline_ms=t_fb / sf,
                request_id=msg.request_id, confidence=sample.confidences[j],
                phases=(LOCAL_RUNNING, OFFLOADED, FALLBACK_CONTINUING, CANCELLED),
            )

        if reply is None:
            # Request lost: most confident exit the device computed.
            t_detect = t_send + detect_ms
            best = j if fb_crossed else max(
                range(j + 1), key=lambda e: (sample.confidences[e], -e)
            )
            return SampleRecord(
                sample.sample_id, best, ORIGIN_LOCAL, sample.correct[best],
                latency_ms=max(t_fb, t_detect), bytes_sent=bytes_sent,
                device_ms=t_fb, server_ms=0.0, pack_ms=pack_ms,
                transfer_ms=tr_out * attempts, backoff_ms=backoff_total,
                attempts=attempts, compressed=lossy, cancelled=False,
                device_offline_ms=t_fb / sf,
                request_id=msg.request_id, confidence=sample.confidences[best],
                phases=(LOCAL_RUNNING, OFFLOADED, FALLBACK_CONTINUING, FAILED),
            )

        t_remote_done = t_send + tr_out + server_ms + tr_resp
        remote_crossed = sample.confidences[reply.exit_id] > thr
        if remote_crossed:
            chosen, origin = reply.exit_id, ORIGIN_REMOTE
            latency = t_remote_done
        else:
            # Nothing crossed anywhere: most confident among every exit the
            # client now knows (device side plus the server's best).
            cand = list(range(j + 1)) + [reply.exit_id]
            chosen = max(cand, key=lambda e: (sample.confidences[e], -e))
            origin = ORIGIN_LOCAL if chosen <= j else ORIGIN_REMOTE
            latency = max(t_remote_done, t_fb)
        reply_end = reply.exit_id if remote_crossed else e_count - 1
        return SampleRecord(
            sample.sample_id, chosen, origin, sample.correct[chosen],
            latency_ms=latency, bytes_sent=bytes_sent, device_ms=t_fb,
            server_ms=server_ms, pack_ms=pack_ms,
            transfer_ms=tr_out + tr_resp, backoff_ms=backoff_total,
            attempts=attempts, compressed=lossy, cancelled=False,
            device_offline_ms=t_fb / sf,
            server_offline_ms=self._srv_segment_ms(si, reply_end, 1.0),
            request_id=msg.request_id, confidence=sample.confidences[chosen],
            phases=(LOCAL_RUNNING, OFFLOADED, FALLBACK_CONTINUING, REMOTE_COMPLETED),
        )

    def _run_without_local_exits(
        self,
        sample: SampleTrace,
        config: Configuration,
        policy: ExecutionPolicy,
        cond: Conditions,
        state: RuntimeProfilerState,
        now_s: float,
    ) -> SampleRecord:
        """Baselines with no threshold policy: a lost request means no
        usable result on the client."""
        si = self._split_index(config)
        g = self.plan
        split = g.splits[si]
        sf = cond.device_sf
        e_count = g.n_exits
        final = e_count - 1

        if split.is_none or int(g.horizon[si]) >= e_count:
            # Whole network on-device, final classifier head only.
            head = float(g.head_dev_cum[final] - (g.head_dev_cum[final - 1] if final > 0 else 0.0))
            t = sf * (float(g.dev_cum[g.graph.n_layers]) + head)
            exit_id = final if policy.fixed_exit is None else min(policy.fixed_exit, final)
            return self._local_record(sample, exit_id, t, t, sf)

        t_split = sf * float(g.dev_cum[g.cut[si]])
        msg, lossy, pack_ms, wire_bytes, est_pack, est_payload = self._prepare_offload(
            sample, split, config, policy, state, now_s
        )
        tr_out = transfer_ms(cond.latency_ms, cond.bandwidth_mbps, wire_bytes)
        tr_resp = transfer_ms(cond.latency_ms, cond.bandwidth_mbps, RESULT_FRAME_BYTES)
        timeout_ms = TIMEOUT_FACTOR * (
            pack_ms + self._estimate_remote_ms(si, final, state, est_pack, est_payload, now_s)
        )
        detect_ms = self._detect_ms(cond, timeout_ms)
        t_send = t_split + pack_ms
        backoff_total = 0.0
        attempts = 0
        reply = None
        server_ms = 0.0
        while True:
            attempts += 1
            failed = (not cond.server_reachable) or (
                self.p_fail > 0 and float(self.rng.random()) < self.p_fail
            )
            if not failed:
                reply, server_ms = self.transport.offload(msg, t_send + tr_out)
                break
            if self.failure_policy == FAILURE_RETRANSMIT and attempts <= self.r_max:
                wait = backoff_wait_ms(attempts, self.backoff_initial_ms)
                backoff_total += wait
                t_send = t_send + detect_ms + wait
                continue
            break

        if reply is None:
            return SampleRecord(
                sample.sample_id, NO_RESULT_EXIT, ORIGIN_LOCAL, 0,
                latency_ms=t_send + detect_ms, bytes_sent=wire_bytes * attempts,
                device_ms=t_split, server_ms=0.0, pack_ms=pack_ms,
                transfer_ms=tr_out * attempts, backoff_ms=backoff_total,
                attempts=attempts, compressed=lossy, cancelled=False,
                device_offline_ms=t_split / sf if sf > 0 else 0.0,
                request_id=msg.request_id,
                phases=(LOCAL_RUNNING, OFFLOADED, FAILED),
            )
        t_done = t_send + tr_out + server_ms + tr_resp
        reply_end = final if policy.kind == "nonprogressive" else policy.fixed_exit
        head_only = float(
            g.head_srv_cum[reply_end]
            - (g.head_srv_cum[reply_end - 1] if reply_end > 0 else 0.0)
        )
        server_offline = float(
            g.srv_cum[g.exit_pos[reply_end]] - g.srv_cum[g.cut[si]]
        ) + head_only
        return SampleRecord(
            sample.sample_id, reply.exit_id, ORIGIN_REMOTE,
            sample.correct[reply.exit_id],
            latency_ms=t_done, bytes_sent=wire_bytes * attempts,
            device_ms=t_split, server_ms=server_ms, pack_ms=pack_ms,
            transfer_ms=tr_out + tr_resp, backoff_ms=backoff_total,
            attempts=attempts, compressed=lossy, cancelled=False,
            device_offline_ms=t_split / sf if sf > 0 else 0.0,
            server_offline_ms=server_offline,
            request_id=msg.request_id, confidence=reply.confidence,
            phases=(LOCAL_RUNNING, OFFLOADED, REMOTE_COMPLETED),
        )
