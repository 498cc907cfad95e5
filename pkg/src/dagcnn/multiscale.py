"""Multi-scale DAG construction on top of a chain backbone.

Node id layout of every graph built here: node 0 is the Input, backbone layer
``j`` is node ``j + 1``; branch nodes follow. Tap ids used throughout the
package are *backbone layer indices* of ReLU layers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ExecutionError, GraphError
from .graph import ExecContext, Graph, Kind, he_normal, small_normal

HEAD_STD = 0.01


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "conv" | "relu" | "pool"
    kernel: int = 0
    out_channels: int = 0
    stride: int = 1
    pad: int = 0
    window: int = 0

    def __str__(self):
        if self.kind == "conv":
            return f"conv {self.kernel} {self.out_channels} {self.stride} {self.pad}"
        if self.kind == "pool":
            return f"pool {self.window} {self.stride}"
        return "relu"


def parse_layer(text: str) -> LayerSpec:
    """Parse ``conv K OUT [STRIDE [PAD]]``, ``relu`` or ``pool WINDOW [STRIDE]``."""
    parts = text.split()
    if not parts:
        raise ValueError("empty layer descriptor")
    head, args = parts[0].lower(), [int(a) for a in parts[1:]]
    if head == "conv":
        if not 2 <= len(args) <= 4:
            raise ValueError(f"conv needs: conv KERNEL OUT [STRIDE [PAD]], got {text!r}")
        k, out = args[0], args[1]
        stride = args[2] if len(args) > 2 else 1
        pad = args[3] if len(args) > 3 else k // 2
        return LayerSpec("conv", kernel=k, out_channels=out, stride=stride, pad=pad)
    if head == "relu":
        if args:
            raise ValueError(f"relu takes no arguments, got {text!r}")
        return LayerSpec("relu")
    if head in ("pool", "maxpool"):
        if not 1 <= len(args) <= 2:
            raise ValueError(f"pool needs: pool WINDOW [STRIDE], got {text!r}")
        return LayerSpec("pool", window=args[0], stride=args[1] if len(args) > 1 else args[0])
    raise ValueError(f"unknown layer kind {parts[0]!r}")


@dataclass(frozen=True)
class BackboneSpec:
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        pending_conv = False
        for j, layer in enumerate(self.layers):
            if layer.kind == "conv":
                if pending_conv:
                    raise ValueError(f"conv at layer {j} follows a conv with no ReLU in between")
                pending_conv = True
            elif layer.kind == "relu":
                pending_conv = False
        if not self.relu_indices:
            raise ValueError("backbone needs at least one ReLU layer")

    @classmethod
    def parse(cls, lines, input_shape) -> "BackboneSpec":
        return cls(tuple(parse_layer(s) for s in lines if s.strip()), input_shape)

    @property
    def relu_indices(self) -> tuple[int, ...]:
        return tuple(j for j, layer in enumerate(self.layers) if layer.kind == "relu")

    @property
    def conv_indices(self) -> tuple[int, ...]:
        return tuple(j for j, layer in enumerate(self.layers) if layer.kind == "conv")


def node_of(layer_index: int) -> int:
    """Graph node id of backbone layer ``layer_index``."""
    return layer_index + 1


def validate_taps(backbone: BackboneSpec, taps) -> tuple[int, ...]:
    """Return taps as a sorted tuple; reject empty sets, duplicates and non-ReLU layers."""
    taps = [int(t) for t in taps]
    if not taps:
        raise ValueError("tap set is empty")
    if len(set(taps)) != len(taps):
        raise ValueError(f"duplicate taps in {taps}")
    relus = set(backbone.relu_indices)
    bad = [t for t in taps if t not in relus]
    if bad:
        raise ValueError(f"taps {bad} are not ReLU layers (ReLUs are at {sorted(relus)})")
    return tuple(sorted(taps))


def _rng(seed, *stream):
    return np.random.default_rng([int(seed), *stream])


def _add_backbone(g: Graph, backbone: BackboneSpec, upto: int, seed: int) -> int:
    H, W, C = backbone.input_shape
    prev = g.add(Kind.INPUT, height=H, width=W, channels=C)
    for j, layer in enumerate(backbone.layers[:upto + 1]):
        # one RNG stream per layer: initial weights do not depend on what follows
        if layer.kind == "conv":
            prev = g.add(Kind.CONV, [prev], he_normal(_rng(seed, 0, j)), kh=layer.kernel, kw=layer.kernel,
                         out_channels=layer.out_channels, stride=layer.stride, pad=layer.pad)
        elif layer.kind == "relu":
            prev = g.add(Kind.RELU, [prev])
        else:
            prev = g.add(Kind.MAXPOOL, [prev], window=layer.window, stride=layer.stride)
        assert prev == node_of(j)
    return prev


def _add_head(g: Graph, tap_layer: int, num_classes: int, seed: int, eps: float) -> int:
    pooled = g.add(Kind.GLOBAL_AVG_POOL, [node_of(tap_layer)])
    normed = g.add(Kind.L2_NORMALIZE, [pooled], eps=eps)
    return g.add(Kind.FULLY_CONNECTED, [normed], small_normal(_rng(seed, 1, tap_layer), HEAD_STD),
                 out_features=num_classes)


def build_multiscale(backbone: BackboneSpec, taps, num_classes: int, seed: int = 0, eps: float = 1e-12) -> Graph:
    """Backbone chain + per-tap (avg-pool, L2-normalize, FC) branches summed by one Add.

    Backbone layers past the highest tap are dropped (they cannot reach the
    loss). Weights come from per-layer / per-tap RNG streams derived from
    ``seed``, so models sharing a backbone start from identical weights.
    """
    if num_classes < 2:
        raise ValueError("need at least two classes")
    taps = validate_taps(backbone, taps)
    g = Graph()
    _add_backbone(g, backbone, max(taps), seed)
    heads = [_add_head(g, t, num_classes, seed, eps) for t in taps]
    total = g.add(Kind.ADD, heads)
    g.add(Kind.SOFTMAX_LOSS, [total], num_classes=num_classes)
    g.validate()
    return g


def build_chain(backbone: BackboneSpec, num_classes: int, seed: int = 0, eps: float = 1e-12) -> Graph:
    """Single-scale chain: backbone up to the last ReLU, pooled head, softmax. No Add node."""
    if num_classes < 2:
        raise ValueError("need at least two classes")
    last = backbone.relu_indices[-1]
    g = Graph()
    _add_backbone(g, backbone, last, seed)
    head = _add_head(g, last, num_classes, seed, eps)
    g.add(Kind.SOFTMAX_LOSS, [head], num_classes=num_classes)
    g.validate()
    return g


def graph_taps(graph: Graph) -> tuple[int, ...]:
    """Backbone indices of the ReLU layers that feed a pooled branch, ascending."""
    taps = []
    for node in graph.nodes:
        if node.kind == Kind.GLOBAL_AVG_POOL:
            parent = graph.nodes[node.parents[0]]
            if parent.kind == Kind.RELU:
                taps.append(parent.id - 1)
    return tuple(sorted(taps))


def tap_feature_node(graph: Graph, tap: int) -> int:
    """Node id of the L2-normalized pooled feature of ``tap``."""
    relu = node_of(tap)
    if relu >= len(graph) or graph.nodes[relu].kind != Kind.RELU:
        raise GraphError(f"backbone layer {tap} is not a ReLU node in this graph")
    for c in graph.children(relu):
        if graph.nodes[c].kind == Kind.GLOBAL_AVG_POOL:
            for cc in graph.children(c):
                if graph.nodes[cc].kind == Kind.L2_NORMALIZE:
                    return cc
    raise GraphError(f"layer {tap} is not tapped in this graph")


def multiscale_feature(graph: Graph, ctx: ExecContext, taps) -> np.ndarray:
    """Concatenate each tap's pooled, normalized vector in ascending tap order."""
    nodes = [tap_feature_node(graph, t) for t in sorted(int(t) for t in taps)]
    missing = [n for n in nodes if n not in ctx.values]
    if missing:
        raise ExecutionError("multiscale_feature needs a completed forward pass")
    return np.concatenate([ctx.values[n].ravel() for n in nodes])


def backbone_params(graph: Graph):
    """Parameters of the backbone (everything except the classifier heads)."""
    return [(nid, name, arr) for nid, name, arr in graph.parameters()
            if graph.nodes[nid].kind != Kind.FULLY_CONNECTED]


def head_params(graph: Graph):
    return [(nid, name, arr) for nid, name, arr in graph.parameters()
            if graph.nodes[nid].kind == Kind.FULLY_CONNECTED]


def transfer_backbone(src: Graph, dst: Graph) -> Graph:
    """Copy backbone weights of ``src`` into the matching nodes of ``dst`` (in place)."""
    for nid, name, arr in backbone_params(dst):
        if nid >= len(src) or src.nodes[nid].kind != dst.nodes[nid].kind:
            raise GraphError(f"source graph has no backbone node matching {nid}")
        sarr = src.nodes[nid].params.get(name)
        if sarr is None or sarr.shape != arr.shape:
            raise GraphError(f"backbone parameter {name!r} of node {nid} does not match")
        arr[...] = sarr
    return dst
