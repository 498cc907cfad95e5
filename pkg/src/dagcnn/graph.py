"""DAG model, executor and generalized backpropagation.

A :class:`Graph` is an id-indexed node table. Every node reads the outputs of
its parents; a node may feed any number of children (its fan-out), but only
``Add`` may have more than one parent.

Backward signals are *pulled*: once all children of node ``i`` have run
their local backward step, node ``i`` collects the per-edge signals addressed
to it, in ascending child id, sums them, and applies its own local gradient
once (:func:`backward`). :func:`backward_reference` keeps the unoptimized
per-branch form, applying the local gradient to every child signal
separately and summing the products; it exists as an oracle.
"""

from __future__ import annotations

import heapq
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import ExecutionError, FormatError, GraphError, NonFiniteError, ShapeError


class Kind(IntEnum):
    INPUT = 0
    CONV = 1
    RELU = 2
    MAXPOOL = 3
    GLOBAL_AVG_POOL = 4
    L2_NORMALIZE = 5
    FULLY_CONNECTED = 6
    ADD = 7
    SOFTMAX_LOSS = 8


# Hyperparameter names per kind, in serialized order.
HYPER_FIELDS: dict[Kind, tuple[str, ...]] = {
    Kind.INPUT: ("height", "width", "channels"),
    Kind.CONV: ("kh", "kw", "out_channels", "stride", "pad"),
    Kind.RELU: (),
    Kind.MAXPOOL: ("window", "stride"),
    Kind.GLOBAL_AVG_POOL: (),
    Kind.L2_NORMALIZE: ("eps",),
    Kind.FULLY_CONNECTED: ("out_features",),
    Kind.ADD: (),
    Kind.SOFTMAX_LOSS: ("num_classes",),
}

HYPER_DEFAULTS = {
    Kind.CONV: {"stride": 1, "pad": 0},
    Kind.L2_NORMALIZE: {"eps": T.DEFAULT_EPS},
}

Initializer = Callable[[str, tuple, int], np.ndarray]


def zeros_init(name, shape, fan_in):
    return np.zeros(shape)


def he_normal(rng: np.random.Generator) -> Initializer:
    """Weights ~ N(0, sqrt(2 / fan_in)), biases zero."""

    def init(name, shape, fan_in):
        if name == "bias":
            return np.zeros(shape)
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)

    return init


def small_normal(rng: np.random.Generator, std: float = 0.01) -> Initializer:
    """Weights ~ N(0, std), biases zero. Used for classifier heads."""

    def init(name, shape, fan_in):
        if name == "bias":
            return np.zeros(shape)
        return rng.normal(0.0, std, size=shape)

    return init


@dataclass
class Node:
    id: int
    kind: Kind
    parents: tuple[int, ...]
    hyper: dict = field(default_factory=dict)
    params: dict[str, np.ndarray] = field(default_factory=dict)
    shape: tuple[int, ...] = ()


class Graph:
    """Node table plus the designated input and loss nodes."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.input_id: int | None = None
        self.loss_id: int | None = None
        self._children: dict[int, list[int]] = {}

    def __len__(self):
        return len(self.nodes)

    def __getitem__(self, node_id: int) -> Node:
        return self.nodes[node_id]

    # -- construction ------------------------------------------------------

    def add(self, kind: Kind, parents=(), init: Initializer | None = None, **hyper) -> int:
        """Append a node and return its id. Parents must already exist."""
        kind = Kind(kind)
        parents = tuple(int(p) for p in parents)
        node_id = len(self.nodes)
        for p in parents:
            if not 0 <= p < node_id:
                raise GraphError(f"unknown parent {p} for new node {node_id}")
            if self.nodes[p].kind == Kind.SOFTMAX_LOSS:
                raise GraphError("SoftmaxLoss node cannot have children")
        node = Node(node_id, kind, parents, _resolve_hyper(kind, hyper))
        _check_arity(node)
        node.shape = _infer_shape(node, [self.nodes[p].shape for p in parents])
        _init_params(node, [self.nodes[p].shape for p in parents], init or zeros_init)
        if kind == Kind.INPUT:
            if self.input_id is not None:
                raise GraphError("graph already has an Input node")
            self.input_id = node_id
        if kind == Kind.SOFTMAX_LOSS:
            if self.loss_id is not None:
                raise GraphError("graph already has a SoftmaxLoss node")
            self.loss_id = node_id
        self.nodes.append(node)
        self._children[node_id] = []
        for p in parents:
            self._children[p].append(node_id)
        return node_id

    @classmethod
    def from_nodes(cls, nodes: list[Node], input_id, loss_id) -> "Graph":
        """Rebuild from a node table (e.g. a deserialized file), validating it."""
        g = cls()
        for i, node in enumerate(nodes):
            if node.id != i:
                raise GraphError(f"node ids must be dense: position {i} holds id {node.id}")
            for p in node.parents:
                if not 0 <= p < len(nodes):
                    raise GraphError(f"node {i} references unknown parent {p}")
            _check_arity(node)
        g.nodes = list(nodes)
        g._children = {i: [] for i in range(len(nodes))}
        for node in nodes:
            for p in node.parents:
                g._children[p].append(node.id)
        order = topo_order(g)  # raises on cycles
        for node in nodes:
            for p in node.parents:
                if p >= node.id:
                    raise GraphError(f"node {node.id} references parent {p} that does not precede it")
        for i in order:
            node = g.nodes[i]
            shape = _infer_shape(node, [g.nodes[p].shape for p in node.parents])
            for name, expected in _param_shapes(node, [g.nodes[p].shape for p in node.parents]).items():
                if name not in node.params or node.params[name].shape != expected:
                    raise GraphError(f"node {i} parameter {name!r} missing or not shaped {expected}")
            node.shape = shape
        g.input_id, g.loss_id = input_id, loss_id
        g.validate()
        return g

    # -- queries -----------------------------------------------------------

    def children(self, node_id: int) -> list[int]:
        """Child node ids, ascending. A child listing this node twice appears twice."""
        return list(self._children[node_id])

    def fan_out(self, node_id: int) -> int:
        return len(self._children[node_id])

    def parameters(self):
        """``(node_id, name, array)`` for every parameter, in node then insertion order."""
        return [(n.id, name, arr) for n in self.nodes for name, arr in n.params.items()]

    def validate(self):
        kinds = [n.kind for n in self.nodes]
        for nid in (self.input_id, self.loss_id):
            if nid is not None and not 0 <= nid < len(self.nodes):
                raise GraphError(f"designated node id {nid} out of range")
        if kinds.count(Kind.INPUT) != 1 or self.input_id is None or self.nodes[self.input_id].kind != Kind.INPUT:
            raise GraphError("graph needs exactly one Input node")
        n_loss = kinds.count(Kind.SOFTMAX_LOSS)
        if n_loss > 1:
            raise GraphError("graph has more than one SoftmaxLoss node")
        if n_loss == 1:
            if self.loss_id is None or self.nodes[self.loss_id].kind != Kind.SOFTMAX_LOSS:
                raise GraphError("loss_id does not designate the SoftmaxLoss node")
            if self._children[self.loss_id]:
                raise GraphError("SoftmaxLoss node cannot have children")
        elif self.loss_id is not None:
            raise GraphError("loss_id set on a graph without SoftmaxLoss")
        topo_order(self)

    def copy(self) -> "Graph":
        nodes = [
            Node(n.id, n.kind, n.parents, dict(n.hyper), {k: v.copy() for k, v in n.params.items()}, n.shape)
            for n in self.nodes
        ]
        g = Graph()
        g.nodes = nodes
        g.input_id, g.loss_id = self.input_id, self.loss_id
        g._children = {k: list(v) for k, v in self._children.items()}
        return g

    @property
    def input_shape(self):
        return self.nodes[self.input_id].shape

    @property
    def num_classes(self):
        return self.nodes[self.loss_id].hyper["num_classes"]


def add_node(graph: Graph, kind: Kind, parents=(), init: Initializer | None = None, **hyper) -> int:
    return graph.add(kind, parents, init, **hyper)


def _resolve_hyper(kind, hyper):
    fields = HYPER_FIELDS[kind]
    unknown = set(hyper) - set(fields)
    if unknown:
        raise GraphError(f"unknown hyperparameters for {kind.name}: {sorted(unknown)}")
    resolved = dict(HYPER_DEFAULTS.get(kind, {}))
    resolved.update(hyper)
    missing = [f for f in fields if f not in resolved]
    if missing:
        raise GraphError(f"{kind.name} missing hyperparameters {missing}")
    out = {}
    for f in fields:
        out[f] = float(resolved[f]) if f == "eps" else int(resolved[f])
    return out


def _check_arity(node):
    n = len(node.parents)
    if node.kind == Kind.INPUT:
        if n:
            raise GraphError("Input node takes no parents")
    elif node.kind == Kind.ADD:
        if n < 1:
            raise GraphError("Add needs at least one parent")
    elif n != 1:
        raise GraphError(f"{node.kind.name} takes exactly one parent, got {n} (only Add may have several)")


def _infer_shape(node, parent_shapes):
    k, h = node.kind, node.hyper
    if k == Kind.INPUT:
        shape = (h["height"], h["width"], h["channels"])
        if min(shape) < 1:
            raise ShapeError(f"input extents must be positive, got {shape}")
        return shape
    if k == Kind.ADD:
        first = parent_shapes[0]
        for s in parent_shapes[1:]:
            if s != first:
                raise ShapeError(f"Add node {node.id}: parent shapes differ ({first} vs {s})")
        return first
    (ps,) = parent_shapes
    if k == Kind.CONV:
        _need_hwc(node, ps)
        Ho, Wo = T.conv_output_hw(ps[0], ps[1], h["kh"], h["kw"], h["stride"], h["pad"])
        return (Ho, Wo, h["out_channels"])
    if k == Kind.MAXPOOL:
        _need_hwc(node, ps)
        Ho, Wo = T.pool_output_hw(ps[0], ps[1], h["window"], h["stride"])
        return (Ho, Wo, ps[2])
    if k == Kind.GLOBAL_AVG_POOL:
        _need_hwc(node, ps)
        return (1, 1, ps[2])
    if k in (Kind.RELU, Kind.L2_NORMALIZE):
        if not ps:
            raise ShapeError(f"{k.name} node {node.id} cannot follow a scalar")
        return ps
    if k == Kind.FULLY_CONNECTED:
        if not ps:
            raise ShapeError(f"FullyConnected node {node.id} cannot follow a scalar")
        return (h["out_features"],)
    if k == Kind.SOFTMAX_LOSS:
        if ps != (h["num_classes"],):
            raise ShapeError(f"SoftmaxLoss expects logits of shape ({h['num_classes']},), got {ps}")
        return ()
    raise GraphError(f"unhandled kind {k}")  # pragma: no cover


def _need_hwc(node, shape):
    if len(shape) != 3:
        raise ShapeError(f"{node.kind.name} node {node.id} needs an H x W x C input, got {shape}")


def _param_shapes(node, parent_shapes):
    h = node.hyper
    if node.kind == Kind.CONV:
        cin = parent_shapes[0][2]
        return {"weight": (h["kh"], h["kw"], cin, h["out_channels"]), "bias": (h["out_channels"],)}
    if node.kind == Kind.FULLY_CONNECTED:
        f = int(np.prod(parent_shapes[0]))
        return {"weight": (f, h["out_features"]), "bias": (h["out_features"],)}
    return {}


def _init_params(node, parent_shapes, init):
    shapes = _param_shapes(node, parent_shapes)
    fan_in = int(np.prod(shapes["weight"][:-1])) if shapes else 0
    for name, shape in shapes.items():
        arr = T.as_tensor(init(name, shape, fan_in))
        if arr.shape != shape:
            raise ShapeError(f"initializer returned {arr.shape} for {name} of node {node.id}, expected {shape}")
        node.params[name] = arr.copy()


# ---------------------------------------------------------------------------
# scheduling
# ---------------------------------------------------------------------------

def topo_order(graph: Graph) -> list[int]:
    """Kahn's algorithm with a min-heap, so ready nodes go in ascending id."""
    n = len(graph.nodes)
    indeg = [len(node.parents) for node in graph.nodes]
    children: list[list[int]] = [[] for _ in range(n)]
    for node in graph.nodes:
        for p in node.parents:
            children[p].append(node.id)
    ready = [i for i in range(n) if indeg[i] == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        i = heapq.heappop(ready)
        order.append(i)
        for c in children[i]:
            indeg[c] -= 1
            if indeg[c] == 0:
                heapq.heappush(ready, c)
    if len(order) != n:
        stuck = sorted(set(range(n)) - set(order))
        raise GraphError(f"cycle detected among nodes {stuck}")
    return order


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------

@dataclass
class ExecContext:
    """Mutable state of one forward/backward run over a read-only graph."""

    values: dict[int, np.ndarray] = field(default_factory=dict)
    aux: dict[int, object] = field(default_factory=dict)
    label: int | None = None
    loss: float | None = None
    # summed backward signal at each node's output (dz/d beta)
    out_grads: dict[int, np.ndarray] = field(default_factory=dict)
    # signal sent along edge (child, parent slot), dz/d alpha_child^(slot)
    edge_grads: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    param_grads: dict[tuple[int, str], np.ndarray] = field(default_factory=dict)
    kernels: object = None

    def logits(self, graph: Graph) -> np.ndarray:
        return self.values[graph.nodes[graph.loss_id].parents[0]]


def forward(graph: Graph, ctx: ExecContext, x, label=None, order=None):
    """Evaluate every node in topological order; returns the loss (None without a label).

    A node with several children computes its output once; all children read
    the same buffer.
    """
    x = T.as_tensor(x)
    if x.shape != graph.input_shape:
        raise ShapeError(f"input shape {x.shape} does not match graph input {graph.input_shape}")
    ctx.values.clear()
    ctx.aux.clear()
    ctx.out_grads.clear()
    ctx.edge_grads.clear()
    ctx.param_grads.clear()
    ctx.label = None if label is None else int(label)
    ctx.loss = None
    kern = ctx.kernels
    for i in order if order is not None else topo_order(graph):
        node = graph.nodes[i]
        ins = [ctx.values[p] for p in node.parents]
        k, h = node.kind, node.hyper
        if k == Kind.INPUT:
            out = x
        elif k == Kind.CONV:
            out = T.conv2d(ins[0], node.params["weight"], node.params["bias"], h["stride"], h["pad"], kernels_impl=kern)
        elif k == Kind.RELU:
            out = np.maximum(ins[0], 0.0)
        elif k == Kind.MAXPOOL:
            out, arg = T.maxpool2d(ins[0], h["window"], h["stride"], kernels_impl=kern)
            ctx.aux[i] = arg
        elif k == Kind.GLOBAL_AVG_POOL:
            out = T.global_avg_pool(ins[0])
        elif k == Kind.L2_NORMALIZE:
            out = T.l2_normalize(ins[0], h["eps"])
        elif k == Kind.FULLY_CONNECTED:
            out = T.fully_connected(ins[0], node.params["weight"], node.params["bias"])
        elif k == Kind.ADD:
            out = T.add_n(ins)
        elif k == Kind.SOFTMAX_LOSS:
            if ctx.label is None:
                out = T.softmax(ins[0])
            else:
                loss, grad = T.softmax_cross_entropy(ins[0], ctx.label)
                ctx.loss = loss
                ctx.aux[i] = grad
                out = np.asarray(loss)
        else:  # pragma: no cover
            raise GraphError(f"unhandled kind {k}")
        if not np.all(np.isfinite(out)):
            raise NonFiniteError(f"non-finite activation at node {i} ({k.name})", node=i)
        ctx.values[i] = out
    return ctx.loss


def _local_backward(graph: Graph, ctx: ExecContext, node: Node, g):
    """Apply one node's local gradient to an output signal ``g``.

    Returns ``(grads per parent slot, {param name: grad})``.
    """
    i, k, h = node.id, node.kind, node.hyper
    ins = [ctx.values[p] for p in node.parents]
    kern = ctx.kernels
    if k == Kind.CONV:
        dx, dw, db = T.conv2d_grad(ins[0], node.params["weight"], g, h["stride"], h["pad"], kernels_impl=kern)
        return [dx], {"weight": dw, "bias": db}
    if k == Kind.RELU:
        return [g * (ins[0] > 0.0)], {}
    if k == Kind.MAXPOOL:
        return [T.maxpool2d_grad(g, ctx.aux[i], ins[0].shape, kernels_impl=kern)], {}
    if k == Kind.GLOBAL_AVG_POOL:
        return [T.global_avg_pool_grad(g, ins[0].shape)], {}
    if k == Kind.L2_NORMALIZE:
        return [T.l2_normalize_grad(ins[0], g, h["eps"])], {}
    if k == Kind.FULLY_CONNECTED:
        dx, dw, db = T.fully_connected_grad(ins[0], node.params["weight"], g)
        return [dx], {"weight": dw, "bias": db}
    if k == Kind.ADD:
        return T.add_n_grad(g, len(node.parents)), {}
    if k == Kind.SOFTMAX_LOSS:
        return [ctx.aux[i] * g], {}
    if k == Kind.INPUT:
        return [], {}
    raise GraphError(f"unhandled kind {k}")  # pragma: no cover


def _incoming(graph: Graph, ctx: ExecContext, node_id: int) -> list[np.ndarray]:
    """Per-edge signals addressed to ``node_id``, ascending child id then slot."""
    signals = []
    for c in sorted(set(graph.children(node_id))):
        for slot, p in enumerate(graph.nodes[c].parents):
            if p == node_id:
                signals.append(ctx.edge_grads[(c, slot)])
    return signals


def _check_ready(graph, ctx):
    if graph.loss_id is None:
        raise ExecutionError("graph has no SoftmaxLoss node; nothing to differentiate")
    if ctx.loss is None or graph.loss_id not in ctx.values:
        raise ExecutionError("backward called before a labelled forward pass")


def _sum_in_order(arrays, shape):
    if not arrays:
        return np.zeros(shape)
    total = np.array(arrays[0], dtype=np.float64, copy=True)
    for a in arrays[1:]:
        total += a
    return total


def _finish(ctx, node, slot_grads, pgrads):
    for slot, dg in enumerate(slot_grads):
        if not np.all(np.isfinite(dg)):
            raise NonFiniteError(f"non-finite gradient leaving node {node.id} ({node.kind.name})", node=node.id)
        ctx.edge_grads[(node.id, slot)] = dg
    for name, dp in pgrads.items():
        if not np.all(np.isfinite(dp)):
            raise NonFiniteError(f"non-finite {name} gradient at node {node.id}", node=node.id)
        ctx.param_grads[(node.id, name)] = dp


def backward(graph: Graph, ctx: ExecContext, order=None, skip=frozenset()) -> dict[tuple[int, str], np.ndarray]:
    """Reverse-mode pass with the duplicate-output fast path.

    Each node sums the signals from all of its children first and applies its
    local gradient once. Add nodes hand the same signal to every parent.
    Nodes in ``skip`` are not visited; callers may only skip nodes none of
    whose descendants-to-be-visited need their signal (see
    :func:`prune_set`). Returns ``{(node_id, param_name): gradient}``.
    """
    _check_ready(graph, ctx)
    ctx.out_grads.clear()
    ctx.edge_grads.clear()
    ctx.param_grads.clear()
    order = order if order is not None else topo_order(graph)
    for i in reversed(order):
        if i in skip:
            continue
        node = graph.nodes[i]
        if i == graph.loss_id:
            g = np.asarray(1.0)
        else:
            g = _sum_in_order(_incoming(graph, ctx, i), node.shape)
        ctx.out_grads[i] = g
        slot_grads, pgrads = _local_backward(graph, ctx, node, g)
        _finish(ctx, node, slot_grads, pgrads)
    return ctx.param_grads


def backward_reference(graph: Graph, ctx: ExecContext, order=None) -> dict[tuple[int, str], np.ndarray]:
    """Per-branch reverse-mode pass, kept as an oracle for :func:`backward`.

    Every child signal is pushed through the local gradient on its own and the
    resulting products are summed, in ascending child id.
    """
    _check_ready(graph, ctx)
    ctx.out_grads.clear()
    ctx.edge_grads.clear()
    ctx.param_grads.clear()
    order = order if order is not None else topo_order(graph)
    for i in reversed(order):
        node = graph.nodes[i]
        if i == graph.loss_id:
            signals = [np.asarray(1.0)]
        else:
            signals = _incoming(graph, ctx, i)
        ctx.out_grads[i] = _sum_in_order(signals, node.shape)
        if not signals:
            signals = [np.zeros(node.shape)]
        per_branch = [_local_backward(graph, ctx, node, s) for s in signals]
        n_slots = len(node.parents)
        slot_grads = []
        for slot in range(n_slots):
            if node.kind == Kind.ADD:
                # local gradient of Add is 1 for every input: multiply explicitly
                terms = [sg[slot] * np.ones(node.shape) for sg, _ in per_branch]
            else:
                terms = [sg[slot] for sg, _ in per_branch]
            slot_grads.append(_sum_in_order(terms, graph.nodes[node.parents[slot]].shape))
        pgrads = {}
        for name in node.params:
            pgrads[name] = _sum_in_order([pg[name] for _, pg in per_branch], node.params[name].shape)
        _finish(ctx, node, slot_grads, pgrads)
    return ctx.param_grads


def prune_set(graph: Graph, trainable_nodes) -> frozenset:
    """Nodes whose backward step is useless when only ``trainable_nodes`` need gradients.

    A node is needed if it, or any of its ancestors, owns a trainable parameter.
    """
    trainable_nodes = set(trainable_nodes)
    need = {}
    for i in topo_order(graph):
        need[i] = i in trainable_nodes or any(need[p] for p in graph.nodes[i].parents)
    return frozenset(i for i, n in need.items() if not n)


def loss_and_grads(graph: Graph, x, label, kernels=None, reference=False):
    """Convenience: one labelled forward + backward in a fresh context."""
    ctx = ExecContext(kernels=kernels)
    order = topo_order(graph)
    loss = forward(graph, ctx, x, label, order)
    grads = (backward_reference if reference else backward)(graph, ctx, order)
    return loss, grads, ctx


# ---------------------------------------------------------------------------
# model file format
# ---------------------------------------------------------------------------

MODEL_MAGIC = b"DAGNET1\0"
MODEL_VERSION = 1
_NO_NODE = 0xFFFFFFFF


def _hyper_words(node) -> list[int]:
    words = []
    for f in HYPER_FIELDS[node.kind]:
        if f == "eps":
            bits = struct.unpack("<Q", struct.pack("<d", node.hyper[f]))[0]
            words += [bits & 0xFFFFFFFF, bits >> 32]
        else:
            words.append(node.hyper[f])
    return words


def _hyper_from_words(kind, words) -> dict:
    hyper, it = {}, iter(words)
    for f in HYPER_FIELDS[kind]:
        if f == "eps":
            lo, hi = next(it), next(it)
            hyper[f] = struct.unpack("<d", struct.pack("<Q", lo | (hi << 32)))[0]
        else:
            hyper[f] = next(it)
    return hyper


def _hyper_word_count(kind) -> int:
    return sum(2 if f == "eps" else 1 for f in HYPER_FIELDS[kind])


def encode_param_blob(params) -> bytes:
    """Encode ``[(owner_id, name, array)]`` as the parameter section of a model file."""
    out = [struct.pack("<I", len(params))]
    for owner, name, arr in params:
        raw_name = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f8")
        out.append(struct.pack("<IB", owner, len(raw_name)) + raw_name)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated file: wanted {n} bytes at offset {self.pos}, {len(self.buf) - self.pos} left")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_param_blob(reader: _Reader):
    (count,) = reader.unpack("<I")
    params = []
    for _ in range(count):
        owner, name_len = reader.unpack("<IB")
        name = reader.take(name_len).decode("utf-8")
        (rank,) = reader.unpack("<B")
        extents = reader.unpack(f"<{rank}I") if rank else ()
        n = int(np.prod(extents)) if rank else 1
        arr = np.frombuffer(reader.take(8 * n), dtype="<f8").astype(np.float64).reshape(extents)
        params.append((owner, name, arr))
    return params


def model_to_bytes(graph: Graph) -> bytes:
    graph.validate()
    out = [MODEL_MAGIC, struct.pack("<II", MODEL_VERSION, len(graph.nodes))]
    for node in graph.nodes:
        words = _hyper_words(node)
        out.append(struct.pack("<IB", node.id, int(node.kind)))
        out.append(struct.pack(f"<{len(words)}I", *words))
        out.append(struct.pack("<B", len(node.parents)) + struct.pack(f"<{len(node.parents)}I", *node.parents))
    out.append(encode_param_blob(graph.parameters()))
    loss_id = _NO_NODE if graph.loss_id is None else graph.loss_id
    out.append(struct.pack("<II", graph.input_id, loss_id))
    return b"".join(out)


def model_from_bytes(buf: bytes) -> Graph:
    r = _Reader(buf)
    if r.take(8) != MODEL_MAGIC:
        raise FormatError("bad magic: not a DAGNET1 model file")
    version, n_nodes = r.unpack("<II")
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported model format version {version}")
    nodes = []
    for _ in range(n_nodes):
        node_id, kind_code = r.unpack("<IB")
        try:
            kind = Kind(kind_code)
        except ValueError:
            raise FormatError(f"unknown layer kind code {kind_code}") from None
        words = r.unpack(f"<{_hyper_word_count(kind)}I")
        (n_par,) = r.unpack("<B")
        parents = r.unpack(f"<{n_par}I")
        nodes.append(Node(node_id, kind, tuple(parents), _hyper_from_words(kind, words)))
    for owner, name, arr in decode_param_blob(r):
        if owner >= len(nodes):
            raise FormatError(f"parameter {name!r} owned by unknown node {owner}")
        nodes[owner].params[name] = arr
    input_id, loss_id = r.unpack("<II")
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after model data")
    return Graph.from_nodes(nodes, input_id, None if loss_id == _NO_NODE else loss_id)


def save_model(graph: Graph, path):
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(graph))


def load_model(path) -> Graph:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
