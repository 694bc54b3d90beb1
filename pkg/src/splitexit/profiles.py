"""Offline profiler outputs: per-platform layer latencies and exit traces.

An exit trace records, for every calibration sample and every exit, the
top-1 confidence and whether the prediction was correct.  From it we derive
the exit-rate distribution and the expected accuracy for any confidence
threshold, with no sampling error: both are exact functions of the
per-sample exit rule.

Confidences are canonicalised to 32-bit float precision on load so that
values survive the wire format bit-exactly.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import TraceError
from .graph import LayerGraph


def softmax(z: list[float] | np.ndarray) -> np.ndarray:
    """Numerically stable softmax: exp(z - max) normalised to sum 1."""
    arr = np.asarray(z, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("softmax of an empty vector")
    if not np.all(np.isfinite(arr)):
        raise ValueError("softmax requires finite inputs")
    shifted = arr - arr.max()
    e = np.exp(shifted)
    return e / e.sum()


def f32(x: float) -> float:
    """Round to the nearest 32-bit float (wire precision)."""
    return float(np.float32(x))


@dataclass(frozen=True)
class PlatformProfile:
    """Mean per-layer and per-exit-head latencies for one platform."""

    platform_id: str
    layer_ms: dict[int, float]
    exit_ms: dict[int, float]
    pack_mbps: float = 200.0  # calibrated packing throughput, MB/s of raw input

    def validate(self, graph: LayerGraph) -> "PlatformProfile":
        for l in graph.layers:
            if l.id not in self.layer_ms:
                raise TraceError(f"profile {self.platform_id}: missing layer {l.id}")
            if self.layer_ms[l.id] < 0:
                raise TraceError(f"profile {self.platform_id}: negative latency for layer {l.id}")
        for e in graph.exits:
            if e.exit_id not in self.exit_ms:
                raise TraceError(f"profile {self.platform_id}: missing exit {e.exit_id}")
            if self.exit_ms[e.exit_id] < 0:
                raise TraceError(f"profile {self.platform_id}: negative latency for exit {e.exit_id}")
        return self


@dataclass(frozen=True)
class SampleTrace:
    sample_id: int
    confidences: tuple[float, ...]  # one per exit, trace order
    correct: tuple[int, ...]        # one per exit, 0/1


@dataclass
class ExitProfile:
    """Per-sample exit records plus the threshold grid the scheduler draws from."""

    samples: list[SampleTrace]
    threshold_grid: tuple[float, ...]
    graph_name: str = ""
    header: dict[str, str] = field(default_factory=dict)
    _tables: dict[tuple[float, ...], "PolicyTable"] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.samples:
            raise TraceError("exit profile has no samples")
        grid = tuple(f32(t) for t in self.threshold_grid)
        if any(not (0.0 <= t <= 1.0) for t in grid):
            raise TraceError("threshold grid values must lie in [0, 1]")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise TraceError("threshold grid must be strictly increasing")
        self.threshold_grid = grid

    @property
    def n_exits(self) -> int:
        return len(self.samples[0].confidences)

    def policy_table(self, grid: tuple[float, ...] | None = None) -> "PolicyTable":
        """Offline-derivable exit statistics for a threshold grid (cached)."""
        key = tuple(grid) if grid is not None else self.threshold_grid
        if key not in self._tables:
            self._tables[key] = PolicyTable.build(self, key)
        return self._tables[key]


DEFAULT_THRESHOLD_GRID = (0.5, 0.6, 0.7, 0.8, 0.9, 1.0)


def exit_of_sample(trace: SampleTrace, thr_conf: float) -> int:
    """Exit taken by one sample: first exit with confidence strictly above
    the threshold, else the most confident exit (ties to the smallest id)."""
    best = 0
    for e, c in enumerate(trace.confidences):
        if c > thr_conf:
            return e
        if c > trace.confidences[best]:
            best = e
    return best


def exit_crossing(trace: SampleTrace, thr_conf: float) -> tuple[int, bool]:
    """(exit, crossed): like exit_of_sample but flags the fallback case."""
    best = 0
    for e, c in enumerate(trace.confidences):
        if c > thr_conf:
            return e, True
        if c > trace.confidences[best]:
            best = e
    return best, False


def exit_cdf(profile: ExitProfile, thr_conf: float) -> list[Fraction]:
    """Exact per-exit probability vector; sums to 1 as rationals."""
    counts = [0] * profile.n_exits
    for s in profile.samples:
        counts[exit_of_sample(s, thr_conf)] += 1
    n = len(profile.samples)
    return [Fraction(c, n) for c in counts]


def expected_accuracy(profile: ExitProfile, thr_conf: float) -> float:
    hits = 0
    for s in profile.samples:
        hits += s.correct[exit_of_sample(s, thr_conf)]
    return hits / len(profile.samples)


@dataclass(frozen=True)
class PolicyTable:
    """Vectorised exit statistics per grid threshold (offline product).

    Shapes use T thresholds and E exits:
      cross_counts[t, e]   samples whose first threshold crossing is exit e
      nocross_argmax[t, e] non-crossing samples whose most confident exit is e
      accuracy[t]          expected accuracy under exit_of_sample
      fallback_*           statistics when offloads never answer: samples that
                           would cross at or after device-exit horizon j take
                           the most confident among exits 0..j instead.
    """

    grid: tuple[float, ...]
    n_samples: int
    cross_counts: np.ndarray      # (T, E) int64
    nocross_argmax: np.ndarray    # (T, E) int64
    accuracy: np.ndarray          # (T,) float64
    fallback_accuracy: np.ndarray  # (T, E) float64, horizon j = last device exit
    fallback_exit_counts: np.ndarray  # (T, E, E) int64: counts per chosen exit given horizon j

    @staticmethod
    def build(profile: ExitProfile, grid: tuple[float, ...]) -> "PolicyTable":
        conf = np.array([s.confidences for s in profile.samples], dtype=np.float64)
        corr = np.array([s.correct for s in profile.samples], dtype=np.int64)
        n, e_count = conf.shape
        t_count = len(grid)

        argmax = np.argmax(conf, axis=1)  # ties resolve to the smallest id

        cross_counts = np.zeros((t_count, e_count), dtype=np.int64)
        nocross_argmax = np.zeros((t_count, e_count), dtype=np.int64)
        accuracy = np.zeros(t_count, dtype=np.float64)
        fb_acc = np.zeros((t_count, e_count), dtype=np.float64)
        fb_exit = np.zeros((t_count, e_count, e_count), dtype=np.int64)

        rows = np.arange(n)
        for ti, thr in enumerate(grid):
            above = conf > thr
            crossed = above.any(axis=1)
            first = np.where(crossed, above.argmax(axis=1), argmax)
            for e in range(e_count):
                cross_counts[ti, e] = np.count_nonzero(crossed & (first == e))
                nocross_argmax[ti, e] = np.count_nonzero(~crossed & (first == e))
            accuracy[ti] = corr[rows, first].mean()

            # Fallback horizons: device evaluated exits 0..j only.
            for j in range(e_count):
                local = crossed & (first < j)
                horizon_argmax = np.argmax(conf[:, : j + 1], axis=1)
                chosen = np.where(local, first, horizon_argmax)
                fb_acc[ti, j] = corr[rows, chosen].mean()
                fb_exit[ti, j] = np.bincount(chosen, minlength=e_count)

        return PolicyTable(
            grid=tuple(grid),
            n_samples=n,
            cross_counts=cross_counts,
            nocross_argmax=nocross_argmax,
            accuracy=accuracy,
            fallback_accuracy=fb_acc,
            fallback_exit_counts=fb_exit,
        )


def load_trace(path: str, threshold_grid: tuple[float, ...] = DEFAULT_THRESHOLD_GRID) -> ExitProfile:
    """Read an exit trace: '# key: value' header lines, then CSV rows
    sample_id, exit_id, confidence, correct."""
    if not os.path.exists(path):
        raise TraceError(f"trace file not found: {path}")
    header: dict[str, str] = {}
    per_sample: dict[int, dict[int, tuple[float, int]]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                if ":" in line:
                    k, v = line[1:].split(":", 1)
                    header[k.strip()] = v.strip()
                continue
            if line.lower().startswith("sample_id"):
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 4:
                raise TraceError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
            try:
                sid, eid = int(parts[0]), int(parts[1])
                conf, corr = f32(float(parts[2])), int(parts[3])
            except ValueError as exc:
                raise TraceError(f"{path}:{lineno}: {exc}") from exc
            if not (0.0 <= conf <= 1.0):
                raise TraceError(f"{path}:{lineno}: confidence {conf} outside [0, 1]")
            if corr not in (0, 1):
                raise TraceError(f"{path}:{lineno}: correct must be 0 or 1")
            per_sample.setdefault(sid, {})[eid] = (conf, corr)

    if not per_sample:
        raise TraceError(f"{path}: no sample rows")
    n_exits = len(next(iter(per_sample.values())))
    if "exits" in header and int(header["exits"]) != n_exits:
        raise TraceError(
            f"{path}: header declares {header['exits']} exits but rows carry {n_exits}"
        )
    samples = []
    for sid in sorted(per_sample):
        rec = per_sample[sid]
        if sorted(rec) != list(range(n_exits)):
            raise TraceError(f"{path}: sample {sid} does not cover exits 0..{n_exits - 1}")
        samples.append(
            SampleTrace(
                sample_id=sid,
                confidences=tuple(rec[e][0] for e in range(n_exits)),
                correct=tuple(rec[e][1] for e in range(n_exits)),
            )
        )
    grid = threshold_grid
    if "threshold_grid" in header:
        grid = tuple(float(t) for t in header["threshold_grid"].split())
    return ExitProfile(samples=samples, threshold_grid=grid,
                       graph_name=header.get("graph", ""), header=header)


def save_trace(profile: ExitProfile, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# graph: {profile.graph_name}\n")
        fh.write(f"# exits: {profile.n_exits}\n")
        fh.write(f"# threshold_grid: {' '.join(repr(t) for t in profile.threshold_grid)}\n")
        for k, v in profile.header.items():
            if k not in ("graph", "exits", "threshold_grid"):
                fh.write(f"# {k}: {v}\n")
        fh.write("sample_id,exit_id,confidence,correct\n")
        for s in profile.samples:
            for e in range(profile.n_exits):
                fh.write(f"{s.sample_id},{e},{s.confidences[e]!r},{s.correct[e]}\n")


def load_platform_profile(path: str) -> PlatformProfile:
    """Read a platform profile: rows 'layer_id|exit:exit_id, mean_ms'."""
    if not os.path.exists(path):
        raise TraceError(f"profile file not found: {path}")
    header: dict[str, str] = {}
    layer_ms: dict[int, float] = {}
    exit_ms: dict[int, float] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                if ":" in line:
                    k, v = line[1:].split(":", 1)
                    header[k.strip()] = v.strip()
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 2:
                raise TraceError(f"{path}:{lineno}: expected 'key, mean_ms'")
            key, ms = parts[0], float(parts[1])
            if ms < 0:
                raise TraceError(f"{path}:{lineno}: negative latency")
            if key.startswith("exit:"):
                exit_ms[int(key[5:])] = ms
            else:
                layer_ms[int(key)] = ms
    return PlatformProfile(
        platform_id=header.get("platform", os.path.basename(path)),
        layer_ms=layer_ms,
        exit_ms=exit_ms,
        pack_mbps=float(header.get("pack_mbps", 200.0)),
    )


def save_platform_profile(profile: PlatformProfile, path: str, graph_name: str = "") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# platform: {profile.platform_id}\n")
        if graph_name:
            fh.write(f"# graph: {graph_name}\n")
        fh.write(f"# pack_mbps: {profile.pack_mbps!r}\n")
        for lid in sorted(profile.layer_ms):
            fh.write(f"{lid}, {profile.layer_ms[lid]!r}\n")
        for eid in sorted(profile.exit_ms):
            fh.write(f"exit:{eid}, {profile.exit_ms[eid]!r}\n")
