"""Seeded generators for test bundles: layer graphs, platform profiles,
exit traces and bandwidth traces.

The exit-trace generator draws a per-sample difficulty latent, nests
correctness across depths (harder samples need deeper exits) with a small
flip rate so early exits occasionally beat the final one, and ties each
exit's confidence to a depth-sharpened Beta around a correctness-dependent
mean.  All parameters land in the trace header for reproducibility.
"""

from __future__ import annotations

import numpy as np

from .graph import Layer, LayerGraph, place_exits, validate_graph
from .profiles import ExitProfile, PlatformProfile, SampleTrace, f32
from .sim import NetworkTrace, TracePoint

DEFAULT_EXIT_FRACTIONS = (0.15, 0.30, 0.45, 0.60, 0.75, 0.90)


def make_graph(
    seed: int = 0,
    n_blocks: int = 9,
    channels0: int = 48,
    spatial0: int = 28,
    exit_fractions: tuple[float, ...] = DEFAULT_EXIT_FRACTIONS,
    head_dev_ms: float = 0.08,
    head_srv_ms: float = 0.008,
    name: str | None = None,
) -> LayerGraph:
    """Feed-forward conv/relu blocks with residual adds every other block,
    a pool stage every third block, and a final fc classifier."""
    rng = np.random.default_rng((seed, 0x9A4F))
    layers: list[Layer] = []
    channels = channels0
    spatial = spatial0
    input_bytes = 3 * spatial0 * spatial0 * 4

    def out_bytes() -> int:
        return channels * spatial * spatial * 4

    last_relu_of_block: list[int] = []
    for b in range(n_blocks):
        flops = int(channels * channels * 9 * spatial * spatial * rng.uniform(0.9, 1.1))
        deps = [len(layers)] if layers else []
        layers.append(Layer(len(layers) + 1, f"conv{b}", "conv", flops, out_bytes(), tuple(deps)))
        layers.append(Layer(len(layers) + 1, f"relu{b}", "relu",
                            flops // 50, out_bytes(), (len(layers),)))
        last_relu_of_block.append(len(layers))
        if b % 2 == 1 and b >= 2:
            # Residual join with the previous block's activation.
            skip_src = last_relu_of_block[b - 1]
            layers.append(Layer(len(layers) + 1, f"add{b}", "add",
                                flops // 100, out_bytes(),
                                (len(layers), skip_src)))
        if b % 3 == 2 and b < n_blocks - 1:
            spatial = max(spatial // 2, 3)
            channels = min(channels * 2, 256)
            layers.append(Layer(len(layers) + 1, f"pool{b}", "pool",
                                flops // 80, out_bytes(), (len(layers),)))
    layers.append(Layer(len(layers) + 1, "gap", "pool",
                        channels * spatial * spatial, channels * 4, (len(layers),)))
    layers.append(Layer(len(layers) + 1, "fc", "fc", channels * 100 * 2, 0, (len(layers),)))

    graph = LayerGraph(
        name=name or f"synth-{seed}-{len(layers)}",
        layers=tuple(layers),
        exits=(),
        input_bytes=input_bytes,
    )
    graph = place_exits(validate_graph(graph), list(exit_fractions),
                        dev_overhead_ms=head_dev_ms, srv_overhead_ms=head_srv_ms)
    return graph


def make_platform_profiles(
    graph: LayerGraph,
    seed: int = 0,
    device_gflops: float = 5.0,
    server_speedup: float = 12.0,
    pack_mbps: float = 220.0,
) -> tuple[PlatformProfile, PlatformProfile]:
    rng = np.random.default_rng((seed, 0xBEEF))
    dev_layer = {}
    srv_layer = {}
    for l in graph.layers:
        base = l.flops / (device_gflops * 1e6)  # flops -> ms
        jitter = rng.uniform(0.92, 1.08)
        dev_layer[l.id] = max(base * jitter, 1e-4)
        srv_layer[l.id] = max(base * jitter / server_speedup, 1e-5)
    dev_exit = {e.exit_id: e.dev_overhead_ms for e in graph.exits}
    srv_exit = {e.exit_id: e.srv_overhead_ms for e in graph.exits}
    device = PlatformProfile("device", dev_layer, dev_exit, pack_mbps=pack_mbps)
    server = PlatformProfile("server", srv_layer, srv_exit, pack_mbps=pack_mbps * 4)
    return device.validate(graph), server.validate(graph)


def make_exit_profile(
    graph: LayerGraph,
    n_samples: int = 2000,
    seed: int = 0,
    acc_floor: float = 0.70,
    acc_ceil: float = 0.93,
    overthink: float = 0.015,
    threshold_grid: tuple[float, ...] = (0.5, 0.6, 0.7, 0.8, 0.9, 1.0),
) -> ExitProfile:
    rng = np.random.default_rng((seed, 0xE417))
    depths = np.array([e.flop_fraction for e in graph.exits])
    acc_targets = acc_floor + (acc_ceil - acc_floor) * np.sqrt(depths)
    samples = []
    for sid in range(n_samples):
        difficulty = rng.random()
        confs = []
        corrs = []
        for depth, acc_e in zip(depths, acc_targets):
            correct = difficulty < acc_e
            if rng.random() < overthink:
                correct = not correct
            kappa = 6.0 + 16.0 * depth
            if correct:
                mu = 0.60 + 0.36 * depth
            else:
                mu = 0.38 + 0.10 * depth
            conf = rng.beta(mu * kappa, (1.0 - mu) * kappa)
            confs.append(f32(conf))
            corrs.append(int(correct))
        samples.append(SampleTrace(sid, tuple(confs), tuple(corrs)))
    header = {
        "generator": "beta-depth-v1",
        "seed": str(seed),
        "acc_floor": repr(acc_floor),
        "acc_ceil": repr(acc_ceil),
        "overthink": repr(overthink),
    }
    return ExitProfile(samples=samples, threshold_grid=threshold_grid,
                       graph_name=graph.name, header=header)


def make_network_trace(
    seed: int = 0,
    duration_s: float = 600.0,
    step_s: float = 2.0,
    low_mbps: float = 2.0,
    high_mbps: float = 90.0,
    latency_ms: float = 50.0,
    network_type: str = "4g",
    jump_prob: float = 0.06,
    jitter: float = 0.015,
) -> NetworkTrace:
    """Plateau-and-jump bandwidth series: long stretches of small jitter
    (below the scheduler gate) punctuated by occasional level shifts, in the
    style of a drive-then-walk cellular log."""
    rng = np.random.default_rng((seed, 0x7AACE))
    points = []
    level = float(np.exp(rng.uniform(np.log(low_mbps), np.log(high_mbps))))
    t = 0.0
    while t < duration_s:
        if rng.random() < jump_prob:
            level = float(np.exp(rng.uniform(np.log(low_mbps), np.log(high_mbps))))
        bw = max(level * (1.0 + rng.uniform(-jitter, jitter)), 0.2)
        lat = latency_ms * rng.uniform(0.95, 1.05)
        points.append(TracePoint(round(t, 3), round(bw, 4), round(lat, 3), network_type))
        t += step_s
    return NetworkTrace(points)
