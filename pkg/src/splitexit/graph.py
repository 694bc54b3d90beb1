"""Layer-graph model of a CNN with early exits and split-point enumeration.

A network is an ordered list of layers (ids consecutive from 1, dependency
edges pointing backwards) plus a list of exit points attached at increasing
layer ids.  Candidate split points are the ReLU layers, bracketed by two
sentinels: ``none`` (device-only) and ``input`` (everything remote).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import yaml

from .errors import GraphError

LAYER_KINDS = ("conv", "relu", "pool", "fc", "add", "concat", "other")

SPLIT_NONE = "none"
SPLIT_INPUT = "input"
SPLIT_LAYER = "layer"

# Payloads carrying the raw network input are tagged with consumer id 0.
INPUT_CONSUMER_ID = 0


@dataclass(frozen=True)
class Layer:
    id: int
    name: str
    kind: str
    flops: int
    out_bytes: int
    deps: tuple[int, ...] = ()


@dataclass(frozen=True)
class ExitPoint:
    exit_id: int
    layer_id: int
    flop_fraction: float
    dev_overhead_ms: float = 0.0
    srv_overhead_ms: float = 0.0


@dataclass(frozen=True)
class SplitPoint:
    """A client/server cut.  ``layer_id`` is the last layer run on-device.

    Sentinels: kind ``input`` has layer_id 0 (cloud-only), kind ``none`` has
    layer_id == n_layers (device-only).  ``transfer_bytes`` sums out_bytes
    over every edge crossing the cut at 32-bit precision.
    """

    split_id: int
    kind: str
    layer_id: int
    transfer_bytes: int

    @property
    def is_none(self) -> bool:
        return self.kind == SPLIT_NONE

    @property
    def is_input(self) -> bool:
        return self.kind == SPLIT_INPUT


@dataclass(frozen=True)
class LayerGraph:
    name: str
    layers: tuple[Layer, ...]
    exits: tuple[ExitPoint, ...]
    input_bytes: int
    total_flops: int = field(default=0)

    def __post_init__(self):
        if self.total_flops == 0 and self.layers:
            object.__setattr__(
                self, "total_flops", sum(l.flops for l in self.layers)
            )

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def n_exits(self) -> int:
        return len(self.exits)

    def layer(self, layer_id: int) -> Layer:
        return self.layers[layer_id - 1]

    def consumers(self) -> dict[int, list[int]]:
        """Map producer layer id -> consumer layer ids (forward edges)."""
        out: dict[int, list[int]] = {l.id: [] for l in self.layers}
        for l in self.layers:
            for dep in l.deps:
                out[dep].append(l.id)
        return out

    def cut_edges(self, layer_id: int) -> list[tuple[int, int]]:
        """Edges (u -> v) with u <= layer_id < v, i.e. tensors crossing the cut."""
        edges = []
        for l in self.layers:
            if l.id <= layer_id:
                continue
            for dep in l.deps:
                if dep <= layer_id:
                    edges.append((dep, l.id))
        return edges

    def exits_at_or_before(self, layer_id: int) -> tuple[ExitPoint, ...]:
        return tuple(e for e in self.exits if e.layer_id <= layer_id)


def validate_graph(graph: LayerGraph) -> LayerGraph:
    """Check every structural invariant; raise GraphError naming the offender."""
    layers = graph.layers
    if not layers:
        raise GraphError("graph has no layers")
    for idx, layer in enumerate(layers):
        if layer.id != idx + 1:
            raise GraphError(
                f"layer ids must be consecutive from 1: found id {layer.id} at position {idx + 1}"
            )
        if layer.kind not in LAYER_KINDS:
            raise GraphError(f"layer {layer.id}: unknown kind {layer.kind!r}")
        if layer.flops < 0 or layer.out_bytes < 0:
            raise GraphError(f"layer {layer.id}: negative flops/out_bytes")
        for dep in layer.deps:
            if dep >= layer.id:
                raise GraphError(
                    f"layer {layer.id}: dep {dep} does not precede it (cyclic or out of trace order)"
                )
            if dep < 1:
                raise GraphError(f"layer {layer.id}: dep {dep} out of range")

    # Connectivity: every layer reachable from the input through dep edges.
    # Layers with no deps consume the raw input and are roots.
    consumers = graph.consumers()
    frontier = [l.id for l in layers if not l.deps]
    seen: set[int] = set()
    while frontier:
        u = frontier.pop()
        if u in seen:
            continue
        seen.add(u)
        frontier.extend(consumers[u])
    if len(seen) != len(layers):
        missing = sorted(set(l.id for l in layers) - seen)
        raise GraphError(f"graph is not connected: layers {missing} unreachable from the input")

    # out_bytes == 0 is only legal for terminal layers (no consumers).
    for l in layers:
        if l.out_bytes == 0 and consumers[l.id]:
            raise GraphError(
                f"layer {l.id}: out_bytes is 0 but layers {consumers[l.id]} consume its output"
            )

    if graph.exits:
        prev = 0
        for e in graph.exits:
            if not (1 <= e.layer_id <= len(layers)):
                raise GraphError(f"exit {e.exit_id}: attachment layer {e.layer_id} out of range")
            if e.layer_id <= prev:
                raise GraphError(f"non-monotone exits: exit {e.exit_id} attaches at layer {e.layer_id}")
            prev = e.layer_id
        for idx, e in enumerate(graph.exits):
            if e.exit_id != idx:
                raise GraphError(f"exit ids must be consecutive from 0: found {e.exit_id} at position {idx}")
            if not (0.0 < e.flop_fraction <= 1.0):
                raise GraphError(f"exit {e.exit_id}: flop_fraction {e.flop_fraction} outside (0, 1]")
        fracs = [e.flop_fraction for e in graph.exits]
        if any(b <= a for a, b in zip(fracs, fracs[1:])):
            raise GraphError("exit flop_fractions must be strictly increasing")
        if graph.exits[-1].layer_id != layers[-1].id:
            raise GraphError("the final exit must attach to the last layer")
    if graph.input_bytes <= 0:
        raise GraphError("input_bytes must be positive")
    return graph


def place_exits(
    graph: LayerGraph,
    fractions: list[float],
    dev_overhead_ms: float = 0.0,
    srv_overhead_ms: float = 0.0,
) -> LayerGraph:
    """Attach exits at FLOP-count fractions of the backbone.

    Each fraction lands on the earliest layer whose cumulative flops reach
    ``f * total_flops``; a final exit at the last layer is appended when the
    fractions do not include 1.0.  Deterministic and idempotent for fixed
    inputs (existing exits are replaced).
    """
    if not graph.layers:
        raise GraphError("cannot place exits on an empty graph")
    if any(not (0.0 < f <= 1.0) for f in fractions):
        raise GraphError("exit fractions must lie in (0, 1]")
    if any(b <= a for a, b in zip(fractions, fractions[1:])):
        raise GraphError("exit fractions must be strictly increasing")

    total = sum(l.flops for l in graph.layers)
    cum = 0
    cum_by_layer = []
    for l in graph.layers:
        cum += l.flops
        cum_by_layer.append(cum)

    want = list(fractions)
    if not want or want[-1] < 1.0:
        want.append(1.0)

    exits: list[ExitPoint] = []
    for f in want:
        target = f * total
        layer_id = next(
            (i + 1 for i, c in enumerate(cum_by_layer) if c >= target),
            graph.n_layers,
        )
        if exits and layer_id <= exits[-1].layer_id:
            # Two fractions landing on the same layer collapse to one exit.
            continue
        exits.append(
            ExitPoint(
                exit_id=len(exits),
                layer_id=layer_id,
                flop_fraction=cum_by_layer[layer_id - 1] / total,
                dev_overhead_ms=dev_overhead_ms,
                srv_overhead_ms=srv_overhead_ms,
            )
        )
    if exits[-1].layer_id != graph.n_layers:
        exits.append(
            ExitPoint(
                exit_id=len(exits),
                layer_id=graph.n_layers,
                flop_fraction=1.0,
                dev_overhead_ms=dev_overhead_ms,
                srv_overhead_ms=srv_overhead_ms,
            )
        )
    return validate_graph(replace(graph, exits=tuple(exits)))


def enumerate_splits(graph: LayerGraph) -> list[SplitPoint]:
    """Pruned split space: {none, input} plus one point per ReLU layer.

    transfer_bytes sums out_bytes over every cut edge, so skip-connection
    tensors are counted once per consuming edge; the input sentinel carries
    exactly the raw input size.
    """
    splits = [
        SplitPoint(0, SPLIT_NONE, graph.n_layers, 0),
        SplitPoint(1, SPLIT_INPUT, 0, graph.input_bytes),
    ]
    for l in graph.layers:
        if l.kind != "relu":
            continue
        bytes_ = sum(graph.layer(u).out_bytes for (u, _v) in graph.cut_edges(l.id))
        splits.append(SplitPoint(len(splits), SPLIT_LAYER, l.id, bytes_))
    return splits


def cut_payload_edges(graph: LayerGraph, split: SplitPoint) -> list[tuple[int, int, int]]:
    """Tensors to ship for a split: (producer, consumer, nbytes) per cut edge.

    For the input sentinel a single payload carries the raw input, tagged
    with consumer id 0; the server injects it into every root layer.
    """
    if split.is_none:
        return []
    if split.is_input:
        return [(0, INPUT_CONSUMER_ID, graph.input_bytes)]
    return [
        (u, v, graph.layer(u).out_bytes) for (u, v) in graph.cut_edges(split.layer_id)
    ]


def _as_layer(entry: dict, path: str) -> Layer:
    try:
        return Layer(
            id=int(entry["id"]),
            name=str(entry.get("name", f"layer{entry['id']}")),
            kind=str(entry["kind"]),
            flops=int(entry["flops"]),
            out_bytes=int(entry["out_bytes"]),
            deps=tuple(int(d) for d in entry.get("deps", [])),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise GraphError(f"{path}: bad layer entry {entry!r}: {exc}") from exc


def load_graph(path: str) -> LayerGraph:
    """Parse and validate a graph file (YAML/JSON, see docs/formats.md)."""
    if not os.path.exists(path):
        raise GraphError(f"graph file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise GraphError(f"{path}: parse error: {exc}") from exc
    if not isinstance(doc, dict) or "layers" not in doc:
        raise GraphError(f"{path}: expected a mapping with a 'layers' key")

    layers = tuple(_as_layer(e, path) for e in doc["layers"])
    exits = []
    for e in doc.get("exits", []):
        try:
            exits.append(
                ExitPoint(
                    exit_id=int(e["exit_id"]),
                    layer_id=int(e["layer_id"]),
                    flop_fraction=float(e.get("flop_fraction", 0.0)),
                    dev_overhead_ms=float(e.get("dev_overhead_ms", 0.0)),
                    srv_overhead_ms=float(e.get("srv_overhead_ms", 0.0)),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise GraphError(f"{path}: bad exit entry {e!r}: {exc}") from exc

    total = sum(l.flops for l in layers)
    if exits and all(e.flop_fraction == 0.0 for e in exits):
        # Fractions omitted from the file: derive them from cumulative flops.
        cum = {}
        acc = 0
        for l in layers:
            acc += l.flops
            cum[l.id] = acc
        exits = [
            replace(e, flop_fraction=cum[e.layer_id] / total if total else 1.0)
            for e in exits
        ]

    graph = LayerGraph(
        name=str(doc.get("name", os.path.basename(path))),
        layers=layers,
        exits=tuple(exits),
        input_bytes=int(doc.get("input_bytes", layers[0].out_bytes if layers else 0)),
    )
    return validate_graph(graph)


def save_graph(graph: LayerGraph, path: str) -> None:
    doc = {
        "name": graph.name,
        "input_bytes": graph.input_bytes,
        "layers": [
            {
                "id": l.id,
                "name": l.name,
                "kind": l.kind,
                "flops": l.flops,
                "out_bytes": l.out_bytes,
                "deps": list(l.deps),
            }
            for l in graph.layers
        ],
        "exits": [
            {
                "exit_id": e.exit_id,
                "layer_id": e.layer_id,
                "flop_fraction": e.flop_fraction,
                "dev_overhead_ms": e.dev_overhead_ms,
                "srv_overhead_ms": e.srv_overhead_ms,
            }
            for e in graph.exits
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(doc, fh, sort_keys=False)
