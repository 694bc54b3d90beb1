"""Command-line entry points: simulate, sweep, serve, client, gen-profiles."""

from __future__ import annotations

import argparse
import os
import sys

from .errors import SplitexitError

EXIT_CODES = {
    "usage": 2,
    "graph": 3,
    "trace": 3,
    "scenario": 3,
    "frame": 3,
    "cold-estimator": 4,
    "infeasible": 5,
    "error": 1,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SplitexitError as exc:
        print(f"error [{exc.category}]: {exc}", file=sys.stderr)
        return EXIT_CODES.get(exc.category, 1)
    except OSError as exc:
        print(f"error [io]: {exc}", file=sys.stderr)
        return 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splitexit",
        description="Split-point / early-exit co-scheduling toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run one scenario and emit reports")
    p.add_argument("--scenario", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    p.add_argument("--policy", default="adaptive",
                   choices=("adaptive", "device_only", "cloud_only",
                            "nonprogressive_split", "fixed_exit"))
    p.add_argument("--format", default="csv", choices=("csv", "structured_text"))
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="sweep one parameter across policies")
    p.add_argument("--scenario", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--param", required=True,
                   choices=("bandwidth_mbps", "slowdown", "p_fail", "latency_ms"))
    p.add_argument("--values", required=True,
                   help="comma-separated numeric values")
    p.add_argument("--policies", default=None,
                   help="comma-separated subset (default: adaptive + all baselines)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("serve", help="run the TCP inference server")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=7433)
    p.add_argument("--graph", required=True)
    p.add_argument("--server-profile", required=True)
    p.add_argument("--exit-trace", required=True)
    p.add_argument("--slowdown", type=float, default=1.0)
    p.add_argument("--admission-delay-ms", type=float, default=0.0)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("client", help="run samples against a TCP server")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=7433)
    p.add_argument("--graph", required=True)
    p.add_argument("--device-profile", required=True)
    p.add_argument("--server-profile", required=True)
    p.add_argument("--exit-trace", required=True)
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--split-id", type=int, required=True)
    p.add_argument("--thr", type=float, required=True)
    p.add_argument("--bandwidth-mbps", type=float, default=100.0)
    p.add_argument("--latency-ms", type=float, default=10.0)
    p.add_argument("--out", default=None, help="write per-sample rows here")
    p.set_defaults(func=cmd_client)

    p = sub.add_parser("gen-profiles", help="generate a synthetic bundle")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--blocks", type=int, default=9)
    p.add_argument("--samples", type=int, default=2000)
    p.add_argument("--trace-duration-s", type=float, default=600.0)
    p.add_argument("--calibrate-pack", action="store_true",
                   help="measure packing throughput instead of the default")
    p.set_defaults(func=cmd_gen_profiles)

    return parser


def cmd_simulate(args) -> int:
    from .report import emit_report
    from .sim import load_scenario, run_policy

    scenario = load_scenario(args.scenario)
    if args.seed is not None:
        from dataclasses import replace

        scenario = replace(scenario, seed=args.seed)
    report = run_policy(scenario, args.policy)
    paths = emit_report(report, args.out, fmt=args.format, plots=not args.no_plots)
    for path in paths:
        print(path)
    agg = report.aggregates
    print(
        f"{args.policy}: {agg['samples']} samples, "
        f"{agg['throughput_ips']:.2f} inf/s, "
        f"mean latency {agg['mean_latency_ms']:.2f} ms, "
        f"accuracy {agg['accuracy']:.4f}"
    )
    return 0


def cmd_sweep(args) -> int:
    from .report import emit_sweep_report
    from .sim import load_scenario, run_sweep

    scenario = load_scenario(args.scenario)
    if args.seed is not None:
        from dataclasses import replace

        scenario = replace(scenario, seed=args.seed)
    values = [float(v) for v in args.values.split(",") if v.strip()]
    policies = args.policies.split(",") if args.policies else None
    reports = run_sweep(scenario, args.param, values, policies)
    paths = emit_sweep_report(reports, args.out, plots=not args.no_plots)
    for path in paths:
        print(path)
    return 0


def cmd_serve(args) -> int:
    from .engine import ServerCore
    from .graph import enumerate_splits, load_graph
    from .profiles import load_platform_profile, load_trace
    from .transport import TcpServer

    graph = load_graph(args.graph)
    server_profile = load_platform_profile(args.server_profile)
    exits = load_trace(args.exit_trace)
    core = ServerCore(
        graph, server_profile.layer_ms, server_profile.exit_ms, exits,
        enumerate_splits(graph), server_sf=args.slowdown,
    )
    server = TcpServer(core, args.host, args.port,
                       admission_delay_s=args.admission_delay_ms / 1000.0)
    host, port = server.address
    print(f"serving on {host}:{port}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.stop()
    return 0


def cmd_client(args) -> int:
    from .engine import ClientEngine, Conditions, ExecutionPolicy
    from .graph import enumerate_splits, load_graph
    from .packing import PackEstimator
    from .profiles import load_platform_profile, load_trace
    from .runtime import RuntimeProfilerState
    from .scheduler import Configuration, PlanContext
    from .transport import TcpClientTransport

    graph = load_graph(args.graph)
    device = load_platform_profile(args.device_profile)
    server = load_platform_profile(args.server_profile)
    exits = load_trace(args.exit_trace)
    splits = enumerate_splits(graph)
    ctx = PlanContext.build(graph, device, server, exits, splits)
    split = next((s for s in splits if s.split_id == args.split_id), None)
    if split is None:
        print(f"error [scenario]: no split with id {args.split_id}", file=sys.stderr)
        return 3
    config = Configuration(split=split, thr_conf=args.thr)
    state = RuntimeProfilerState()
    state.net.observe(args.bandwidth_mbps, args.latency_ms, 0.0)
    transport = TcpClientTransport(args.host, args.port)
    engine = ClientEngine(ctx, PackEstimator(pack_mbps=device.pack_mbps), transport)
    cond = Conditions(args.bandwidth_mbps, args.latency_ms)
    rows = []
    try:
        for sample in exits.samples[: args.samples]:
            rec = engine.run_sample(sample, config, ExecutionPolicy("progressive"),
                                    cond, state, 0.0)
            rows.append(rec)
    finally:
        transport.close()
    correct = sum(r.correct for r in rows)
    print(f"{len(rows)} samples, accuracy {correct / max(len(rows), 1):.4f}")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write("sample_id,exit_id,origin,correct,latency_ms\n")
            for r in rows:
                fh.write(f"{r.sample_id},{r.exit_id},{r.origin},{r.correct},{r.latency_ms!r}\n")
        print(args.out)
    return 0


def cmd_gen_profiles(args) -> int:
    import yaml

    from .graph import save_graph
    from .packing import calibrate_pack_mbps
    from .profiles import save_platform_profile, save_trace
    from .sim import save_network_trace
    from .synth import (
        make_exit_profile,
        make_graph,
        make_network_trace,
        make_platform_profiles,
    )

    os.makedirs(args.out, exist_ok=True)
    graph = make_graph(seed=args.seed, n_blocks=args.blocks)
    pack_mbps = calibrate_pack_mbps(seed=args.seed) if args.calibrate_pack else 220.0
    device, server = make_platform_profiles(graph, seed=args.seed, pack_mbps=pack_mbps)
    exits = make_exit_profile(graph, n_samples=args.samples, seed=args.seed)
    trace = make_network_trace(seed=args.seed, duration_s=args.trace_duration_s)

    paths = {
        "graph": os.path.join(args.out, "graph.yaml"),
        "device_profile": os.path.join(args.out, "device.profile"),
        "server_profile": os.path.join(args.out, "server.profile"),
        "exit_trace": os.path.join(args.out, "exit_trace.csv"),
        "network_trace": os.path.join(args.out, "network_trace.csv"),
    }
    save_graph(graph, paths["graph"])
    save_platform_profile(device, paths["device_profile"], graph.name)
    save_platform_profile(server, paths["server_profile"], graph.name)
    save_trace(exits, paths["exit_trace"])
    save_network_trace(trace, paths["network_trace"])

    scenario = {
        "name": f"synth-{args.seed}",
        "graph": "graph.yaml",
        "device_profile": "device.profile",
        "server_profile": "server.profile",
        "exit_trace": "exit_trace.csv",
        "network_trace": "network_trace.csv",
        "samples": min(args.samples, 1000),
        "seed": args.seed,
        "sla": {
            "hard": [{"metric": "accuracy", "op": ">=", "thr": 0.85}],
            "soft": [{"metric": "throughput_ips", "mode": "max"},
                     {"metric": "server_cost_ms", "mode": "min"}],
        },
    }
    scenario_path = os.path.join(args.out, "scenario.yaml")
    with open(scenario_path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(scenario, fh, sort_keys=False)
    for path in (*paths.values(), scenario_path):
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
