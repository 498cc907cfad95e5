"""SGD training, evaluation, gradient checking and the gradient-flow experiments."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset
from .errors import NonFiniteError
from .graph import ExecContext, Graph, Kind, backward, forward, prune_set, topo_order
from .multiscale import BackboneSpec, build_chain, build_multiscale

log = logging.getLogger(__name__)

MODES = ("finetune", "ots")


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    mode: str = "finetune"
    grad_trace: bool = True
    weight_decay: float = 0.0
    head_lr_mult: float = 1.0
    balanced: bool = False
    jobs: int = 1

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")
        if not self.head_lr_mult > 0:
            raise ValueError("head_lr_mult must be positive")

    def to_dict(self):
        return asdict(self)


def sgd_step(params, grads, velocities, lr, momentum=0.0, weight_decay=0.0):
    """Classical momentum, in place: ``v <- m v - lr (g + wd p)``, ``p <- p + v``."""
    for p, g, v in zip(params, grads, velocities):
        if p.shape != g.shape or p.shape != v.shape:
            raise ValueError(f"shape mismatch in sgd_step: {p.shape}, {g.shape}, {v.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient passed to sgd_step")
        v *= momentum
        if weight_decay:
            v -= lr * (g + weight_decay * p)
        else:
            v -= lr * g
        p += v
    return params


def epoch_order(labels, seed: int, epoch: int, balanced: bool = False) -> np.ndarray:
    """Visiting order of the training rows for one epoch.

    Plain mode is a seeded permutation. Balanced mode keeps that permutation's
    order within each class but spreads every class evenly over the epoch, so
    consecutive minibatches carry near-equal class counts.
    """
    labels = np.asarray(labels)
    perm = np.random.default_rng([int(seed), int(epoch)]).permutation(len(labels))
    if not balanced:
        return perm
    lab = labels[perm]
    key = np.empty(len(perm))
    for k in np.unique(lab):
        members = np.flatnonzero(lab == k)
        key[members] = (np.arange(len(members)) + 0.5) / len(members)
    return perm[np.argsort(key, kind="stable")]


def first_conv_node(graph: Graph) -> int | None:
    for node in graph.nodes:
        if node.kind == Kind.CONV:
            return node.id
    return None


def trainable_nodes(graph: Graph, mode: str) -> list[int]:
    """Nodes whose parameters are updated; ``ots`` keeps only the FC heads."""
    if mode == "ots":
        return [n.id for n in graph.nodes if n.kind == Kind.FULLY_CONNECTED]
    return [n.id for n in graph.nodes if n.params]


# ---------------------------------------------------------------------------
# per-example execution with ordered reduction
# ---------------------------------------------------------------------------

class _Runner:
    """Runs labelled forward/backward passes, one ExecContext per example."""

    def __init__(self, graph: Graph, jobs: int = 1, skip=frozenset(), kernels=None):
        self.graph = graph
        self.order = topo_order(graph)
        self.skip = skip
        self.kernels = kernels
        self.jobs = jobs
        self.pool = ThreadPoolExecutor(jobs) if jobs > 1 else None

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _map(self, fn, items):
        if self.pool is None:
            return [fn(it) for it in items]
        return list(self.pool.map(fn, items))

    def _one_grad(self, item):
        x, y = item
        ctx = ExecContext(kernels=self.kernels)
        loss = forward(self.graph, ctx, x, y, self.order)
        pred = int(np.argmax(ctx.logits(self.graph)))
        grads = backward(self.graph, ctx, self.order, self.skip)
        return loss, pred, grads

    def _one_eval(self, item):
        x, y = item
        ctx = ExecContext(kernels=self.kernels)
        loss = forward(self.graph, ctx, x, y, self.order)
        return loss, ctx.logits(self.graph).copy()

    def batch_gradient(self, images, labels, keys):
        """Mean loss, predictions and mean gradients for ``keys``.

        Per-example gradients are summed in the order given, whatever
        ``jobs`` is, so results are bit-identical across worker counts.
        """
        results = self._map(self._one_grad, list(zip(images, labels)))
        total = {k: np.zeros_like(self.graph.nodes[k[0]].params[k[1]]) for k in keys}
        losses, preds = [], []
        for loss, pred, grads in results:
            losses.append(loss)
            preds.append(pred)
            for k in keys:
                total[k] += grads[k]
        n = len(results)
        for k in keys:
            total[k] /= n
        return float(np.sum(losses)) / n, np.array(preds), total, np.array(losses)

    def logits(self, images, labels):
        results = self._map(self._one_eval, list(zip(images, labels)))
        return np.array([r[0] for r in results]), np.stack([r[1] for r in results])


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def predict(logits) -> np.ndarray:
    """Argmax of the summed class scores; ties resolve to the lower class id."""
    return np.argmax(np.asarray(logits), axis=1)


def confusion_matrix(labels, preds, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels), np.asarray(preds)), 1)
    return cm


def accuracy_report(labels, preds, num_classes: int) -> dict:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("cannot evaluate an empty split")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise IndexError(f"labels out of range for {num_classes} classes")
    cm = confusion_matrix(labels, preds, num_classes)
    support = cm.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(support > 0, np.diag(cm) / np.maximum(support, 1), np.nan)
    return {"accuracy": float(np.trace(cm)) / labels.size, "per_class": per_class, "confusion": cm}


def evaluate(graph: Graph, data: Dataset, split: str = "test", jobs: int = 1, kernels=None) -> dict:
    """Accuracy, mean loss, per-class accuracy and confusion counts on one split."""
    images, labels, _ = data.split(split)
    with _Runner(graph, jobs, kernels=kernels) as runner:
        losses, logits = runner.logits(images, labels)
    report = accuracy_report(labels, predict(logits), graph.num_classes)
    report["loss"] = float(np.mean(losses))
    return report


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    graph: Graph
    metrics: list[dict] = field(default_factory=list)
    grad_trace: list[float] = field(default_factory=list)       # epoch-averaged
    grad_trace_last: list[float] = field(default_factory=list)  # final minibatch of each epoch

    def rows(self, split):
        return [m for m in self.metrics if m["split"] == split]


def train(graph: Graph, data: Dataset, config: TrainConfig, kernels=None) -> TrainResult:
    """Minibatch SGD on the mean softmax loss over the train split.

    The input graph is left untouched; a trained copy is returned. In ``ots``
    mode only the fully-connected heads move.
    """
    if data.num_classes != graph.num_classes:
        raise ValueError(f"dataset has {data.num_classes} classes but the graph predicts {graph.num_classes}")
    g = graph.copy()
    images, labels, idx = data.split("train")
    has_val = "val" in data.splits and len(data.splits["val"]) > 0
    train_nodes = trainable_nodes(g, config.mode)
    keys = [(nid, name) for nid in train_nodes for name in g.nodes[nid].params]
    params = [g.nodes[nid].params[name] for nid, name in keys]
    velocities = [np.zeros_like(p) for p in params]
    is_head = [g.nodes[nid].kind == Kind.FULLY_CONNECTED for nid, _ in keys]
    groups = [[j for j, h in enumerate(is_head) if not h], [j for j, h in enumerate(is_head) if h]]
    group_lr = [config.lr, config.lr * config.head_lr_mult]
    trace_node = first_conv_node(g)
    trace_on = config.grad_trace and trace_node is not None and trace_node in train_nodes
    result = TrainResult(g)
    n = len(idx)
    with _Runner(g, config.jobs, prune_set(g, train_nodes), kernels) as runner:
        for epoch in range(1, config.epochs + 1):
            perm = epoch_order(labels, config.seed, epoch, config.balanced)
            loss_sum, correct, trace_vals = 0.0, 0, []
            for start in range(0, n, config.batch_size):
                # ascending dataset index inside a minibatch fixes the reduction order
                b = np.sort(perm[start:start + config.batch_size])
                mean_loss, preds, grads, losses = runner.batch_gradient(images[b], labels[b], keys)
                if not np.isfinite(mean_loss):
                    raise NonFiniteError(f"non-finite loss at epoch {epoch}, batch starting {start}")
                loss_sum += float(np.sum(losses))
                correct += int(np.sum(preds == labels[b]))
                if trace_on:
                    trace_vals.append(float(np.mean(np.abs(grads[(trace_node, "weight")]))))
                for members, lr in zip(groups, group_lr):
                    sgd_step([params[j] for j in members], [grads[keys[j]] for j in members],
                             [velocities[j] for j in members], lr, config.momentum, config.weight_decay)
            row = {"epoch": epoch, "split": "train", "loss": loss_sum / n, "accuracy": correct / n,
                   "grad_mean_abs_layer1": float(np.mean(trace_vals)) if trace_on else float("nan"),
                   "grad_mean_abs_layer1_last": trace_vals[-1] if trace_on else float("nan")}
            result.metrics.append(row)
            if trace_on:
                result.grad_trace.append(row["grad_mean_abs_layer1"])
                result.grad_trace_last.append(row["grad_mean_abs_layer1_last"])
            if has_val:
                vimg, vlab, _ = data.split("val")
                vloss, vlogits = runner.logits(vimg, vlab)
                result.metrics.append({"epoch": epoch, "split": "val", "loss": float(np.mean(vloss)),
                                       "accuracy": float(np.mean(predict(vlogits) == vlab)),
                                       "grad_mean_abs_layer1": float("nan"),
                                       "grad_mean_abs_layer1_last": float("nan")})
            log.info("epoch %d: train loss %.4f acc %.3f", epoch, row["loss"], row["accuracy"])
    return result


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckResult:
    max_rel_error: float
    worst: tuple | None  # (node_id, param_name, flat index)
    errors: dict          # (node_id, name) -> max rel error for that tensor
    checked: int


def rel_error(a, b, floor=1e-8):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def gradient_check(graph: Graph, x, label, step: float = 1e-5, max_entries: int | None = None,
                   seed: int = 0, kernels=None) -> GradCheckResult:
    """Compare analytic parameter gradients with central differences.

    Tensors with more than ``max_entries`` elements are checked on a random
    subsample of entries.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    g = graph.copy()
    order = topo_order(g)
    ctx = ExecContext(kernels=kernels)
    forward(g, ctx, x, label, order)
    analytic = {k: v.copy() for k, v in backward(g, ctx, order).items()}
    rng = np.random.default_rng(seed)

    def loss_at():
        c = ExecContext(kernels=kernels)
        val = forward(g, c, x, label, order)
        if not np.isfinite(val):
            raise NonFiniteError("non-finite loss at a perturbed point")
        return val

    worst, worst_err, errors, checked = None, 0.0, {}, 0
    for nid, name, arr in g.parameters():
        flat = arr.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = np.sort(rng.choice(flat.size, max_entries, replace=False))
        a = analytic[(nid, name)].reshape(-1)
        tensor_err = 0.0
        for e in entries:
            orig = flat[e]
            flat[e] = orig + step
            lp = loss_at()
            flat[e] = orig - step
            lm = loss_at()
            flat[e] = orig
            num = (lp - lm) / (2 * step)
            err = float(rel_error(a[e], num))
            checked += 1
            tensor_err = max(tensor_err, err)
            if err > worst_err or worst is None:
                worst_err, worst = err, (nid, name, int(e))
        errors[(nid, name)] = tensor_err
    return GradCheckResult(worst_err, worst, errors, checked)


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------

@dataclass
class GradTraceResult:
    chain: list[float]
    dag: list[float]
    chain_last: list[float]
    dag_last: list[float]

    @property
    def ratio(self) -> list[float]:
        return [d / c if c > 0 else float("inf") for d, c in zip(self.dag, self.chain)]


def grad_trace_experiment(backbone: BackboneSpec, taps, data: Dataset, config: TrainConfig,
                          kernels=None) -> GradTraceResult:
    """Train a chain and a DAG from identical initial weights, recording the
    mean |gradient| at the first conv layer after every epoch."""
    cfg = TrainConfig(**{**config.to_dict(), "mode": "finetune", "grad_trace": True})
    chain = build_chain(backbone, data.num_classes, seed=cfg.seed)
    dag = build_multiscale(backbone, taps, data.num_classes, seed=cfg.seed)
    rc = train(chain, data, cfg, kernels)
    rd = train(dag, data, cfg, kernels)
    return GradTraceResult(rc.grad_trace, rd.grad_trace, rc.grad_trace_last, rd.grad_trace_last)


DIAGNOSTIC_CELLS = (("chain", "ots"), ("chain", "finetune"), ("dag", "ots"), ("dag", "finetune"))


def diagnostic_matrix(backbone: BackboneSpec, taps, data: Dataset, config: TrainConfig, kernels=None):
    """Off-the-shelf vs fine-tuned, chain vs DAG, all from the same initial weights.

    Returns a list of row dicts and the trained graphs keyed by ``(model, mode)``.
    """
    rows, graphs = [], {}
    for model, mode in DIAGNOSTIC_CELLS:
        cfg = TrainConfig(**{**config.to_dict(), "mode": mode})
        if model == "chain":
            g0 = build_chain(backbone, data.num_classes, seed=cfg.seed)
        else:
            g0 = build_multiscale(backbone, taps, data.num_classes, seed=cfg.seed)
        res = train(g0, data, cfg, kernels)
        row = {"model": model, "mode": mode}
        for split in ("train", "val", "test"):
            if split in data.splits and len(data.splits[split]):
                row[f"{split}_accuracy"] = evaluate(res.graph, data, split, cfg.jobs, kernels)["accuracy"]
        rows.append(row)
        graphs[(model, mode)] = res.graph
    return rows, graphs
