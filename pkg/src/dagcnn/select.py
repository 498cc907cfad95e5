"""Layer analysis: per-layer probes, per-class best layer, greedy scale
selection, pooled vs. full features, nearest-neighbour retrieval."""

from __future__ import annotations

import csv
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .data import Dataset
from .errors import FormatError
from .graph import ExecContext, Graph, Kind, _Reader, decode_param_blob, encode_param_blob, forward, topo_order
from .multiscale import node_of


# ---------------------------------------------------------------------------
# feature banks
# ---------------------------------------------------------------------------

@dataclass
class LayerFeatureBank:
    """Per-layer feature matrices for one dataset, rows aligned with ``labels``.

    ``pooled[layer]`` is ``(N, F)``: spatial mean then L2 normalization.
    ``full[layer]`` (optional) is ``(N, H*W*F)``: the flattened map, L2-normalized.
    """

    layers: tuple[int, ...]
    labels: np.ndarray
    num_classes: int
    pooled: dict[int, np.ndarray]
    full: dict[int, np.ndarray] | None = None
    splits: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.layers = tuple(int(l) for l in self.layers)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        for store in (self.pooled, self.full or {}):
            for layer, mat in store.items():
                if mat.shape[0] != len(self.labels):
                    raise ValueError(f"layer {layer}: {mat.shape[0]} rows for {len(self.labels)} labels")

    def features(self, layers, kind="pooled") -> np.ndarray:
        store = self.pooled if kind == "pooled" else self.full
        if store is None:
            raise ValueError("this bank holds no full-dimensional features")
        return np.concatenate([store[l] for l in sorted(layers)], axis=1)

    def rows(self, split) -> np.ndarray:
        if split not in self.splits or len(self.splits[split]) == 0:
            raise ValueError(f"bank has no (non-empty) {split!r} split")
        return self.splits[split]


def _unit_rows(mat, eps=1e-12):
    norms = np.sqrt(np.einsum("ij,ij->i", mat, mat))
    return mat / np.maximum(norms, eps)[:, None]


def extract_feature_bank(graph: Graph, data: Dataset, layers=None, full=False, jobs=1,
                         kernels=None) -> LayerFeatureBank:
    """Run the backbone of ``graph`` over every image and collect ReLU activations."""
    relus = [n.id - 1 for n in graph.nodes if n.kind == Kind.RELU]
    layers = tuple(sorted(relus if layers is None else (int(l) for l in layers)))
    for l in layers:
        if l not in relus:
            raise ValueError(f"layer {l} is not a ReLU of this graph (ReLUs: {relus})")
    # evaluate only what the requested layers need
    keep = set()
    stack = [node_of(l) for l in layers]
    while stack:
        i = stack.pop()
        if i not in keep:
            keep.add(i)
            stack.extend(graph.nodes[i].parents)
    order = [i for i in topo_order(graph) if i in keep]

    def run(x):
        ctx = ExecContext(kernels=kernels)
        forward(graph, ctx, x, None, order)
        return [ctx.values[node_of(l)] for l in layers]

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            acts = list(pool.map(run, data.images))
    else:
        acts = [run(x) for x in data.images]
    pooled, fulls = {}, {} if full else None
    for k, l in enumerate(layers):
        maps = np.stack([a[k] for a in acts])
        pooled[l] = _unit_rows(maps.mean(axis=(1, 2)))
        if full:
            fulls[l] = _unit_rows(maps.reshape(len(maps), -1))
    return LayerFeatureBank(layers, data.labels, data.num_classes, pooled, fulls,
                            {k: v.copy() for k, v in data.splits.items()})


BANK_MAGIC = b"DAGBANK1"
BANK_VERSION = 1
_BANK_META = 0xFFFFFFFF


def bank_to_bytes(bank: LayerFeatureBank) -> bytes:
    """``DAGBANK1`` header + version + class count, then a model-format parameter blob."""
    entries = [(_BANK_META, "labels", bank.labels.astype(np.float64))]
    for name, idx in sorted(bank.splits.items()):
        entries.append((_BANK_META, f"split:{name}", idx.astype(np.float64)))
    for l in bank.layers:
        entries.append((l, "pooled", bank.pooled[l]))
        if bank.full is not None:
            entries.append((l, "full", bank.full[l]))
    head = BANK_MAGIC + struct.pack("<II", BANK_VERSION, bank.num_classes)
    return head + encode_param_blob(entries)


def bank_from_bytes(buf: bytes) -> LayerFeatureBank:
    r = _Reader(buf)
    if r.take(8) != BANK_MAGIC:
        raise FormatError("bad magic: not a DAGBANK1 feature bank")
    version, num_classes = r.unpack("<II")
    if version != BANK_VERSION:
        raise FormatError(f"unsupported feature bank version {version}")
    labels, splits, pooled, full = None, {}, {}, {}
    for owner, name, arr in decode_param_blob(r):
        if owner == _BANK_META and name == "labels":
            labels = arr.astype(np.int64)
        elif owner == _BANK_META and name.startswith("split:"):
            splits[name[6:]] = arr.astype(np.int64)
        elif name == "pooled":
            pooled[owner] = arr
        elif name == "full":
            full[owner] = arr
        else:
            raise FormatError(f"unexpected bank entry {name!r}")
    if r.pos != len(buf):
        raise FormatError("trailing bytes after feature bank")
    if labels is None:
        raise FormatError("feature bank has no labels")
    return LayerFeatureBank(tuple(sorted(pooled)), labels, num_classes, pooled, full or None, splits)


def save_bank(bank, path):
    with open(path, "wb") as fh:
        fh.write(bank_to_bytes(bank))


def load_bank(path) -> LayerFeatureBank:
    with open(path, "rb") as fh:
        return bank_from_bytes(fh.read())


# ---------------------------------------------------------------------------
# linear softmax head
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HeadTrainer:
    """Full-batch gradient descent on a softmax linear classifier.

    Weights start at zero, so the run is fully deterministic. When the
    feature width exceeds the sample count, the equivalent dual form
    ``W = X^T A`` is iterated instead (same iterates, cheaper).

    With ``standardize`` each column is centred and scaled by its training
    standard deviation, then rows are divided by ``sqrt(d)``. The head is still
    linear in the raw features (the affine map is folded back into ``W, b``);
    only the conditioning of the descent changes. Pooled ReLU activations are
    nearly collinear, which otherwise stalls plain gradient descent.
    """

    lr: float = 1.0
    iterations: int = 300
    weight_decay: float = 0.0
    standardize: bool = True

    def fit(self, X, y, num_classes):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y)
        if len(np.unique(y)) < 2:
            raise ValueError("training split contains a single class")
        n, d = X.shape
        if self.standardize:
            mu = X.mean(axis=0)
            sd = X.std(axis=0)
            sd[sd < 1e-12] = 1.0
            scale = 1.0 / (sd * np.sqrt(d))
            head = replace(self, standardize=False).fit((X - mu) * scale, y, num_classes)
            W = head.W * scale[:, None]
            return _LinearHead(W, head.b - mu @ W)
        Y = np.zeros((n, num_classes))
        Y[np.arange(n), y] = 1.0
        b = np.zeros(num_classes)
        if d > n and not self.weight_decay:
            G = X @ X.T
            A = np.zeros((n, num_classes))
            for _ in range(self.iterations):
                R = (_softmax_rows(G @ A + b) - Y) / n
                A -= self.lr * R
                b -= self.lr * R.sum(axis=0)
            return _LinearHead(X.T @ A, b)
        W = np.zeros((d, num_classes))
        for _ in range(self.iterations):
            R = (_softmax_rows(X @ W + b) - Y) / n
            W -= self.lr * (X.T @ R + self.weight_decay * W)
            b -= self.lr * R.sum(axis=0)
        return _LinearHead(W, b)


def _softmax_rows(Z):
    Z = Z - Z.max(axis=1, keepdims=True)
    E = np.exp(Z)
    return E / E.sum(axis=1, keepdims=True)


@dataclass
class _LinearHead:
    W: np.ndarray
    b: np.ndarray

    def scores(self, X):
        return np.asarray(X) @ self.W + self.b

    def predict(self, X):
        return np.argmax(self.scores(X), axis=1)


def _fit_eval(bank, X, trainer, eval_split="val"):
    tr, ev = bank.rows("train"), bank.rows(eval_split)
    head = trainer.fit(X[tr], bank.labels[tr], bank.num_classes)
    return head, head.predict(X[tr]), head.predict(X[ev])


def per_layer_accuracy(bank: LayerFeatureBank, trainer: HeadTrainer = HeadTrainer(), kind="pooled",
                       eval_split="val") -> dict[int, dict[str, float]]:
    """``{layer: {"train": acc, "val": acc}}`` for a head trained on one layer at a time."""
    out = {}
    for l in bank.layers:
        _, ptr, pev = _fit_eval(bank, bank.features([l], kind), trainer, eval_split)
        out[l] = {"train": float(np.mean(ptr == bank.labels[bank.rows("train")])),
                  eval_split: float(np.mean(pev == bank.labels[bank.rows(eval_split)]))}
    return out


def per_class_best_layer(bank: LayerFeatureBank, trainer: HeadTrainer = HeadTrainer(), eval_split="val"):
    """Correct detections per (class, layer) and the best layer per class.

    ``counts[k, n]`` is how many evaluation images of class ``k`` the layer-``n``
    head labels ``k``. Ties in the argmax go to the lower layer.
    """
    if bank.num_classes < 2:
        raise ValueError("need at least two classes")
    ev = bank.rows(eval_split)
    counts = np.zeros((bank.num_classes, len(bank.layers)), dtype=np.int64)
    for n, l in enumerate(bank.layers):
        _, _, pev = _fit_eval(bank, bank.features([l]), trainer, eval_split)
        hits = pev == bank.labels[ev]
        np.add.at(counts[:, n], bank.labels[ev][hits], 1)
    best = np.array([bank.layers[j] for j in np.argmax(counts, axis=1)])
    return counts, best


def pooled_vs_full(bank: LayerFeatureBank, trainer: HeadTrainer = HeadTrainer(), eval_split="val"):
    """``{layer: {pooled_train, pooled_val, full_train, full_val}}``."""
    if bank.full is None:
        raise ValueError("bank was extracted without full-dimensional features")
    pooled = per_layer_accuracy(bank, trainer, "pooled", eval_split)
    full = per_layer_accuracy(bank, trainer, "full", eval_split)
    return {l: {"pooled_train": pooled[l]["train"], "pooled_val": pooled[l][eval_split],
                "full_train": full[l]["train"], "full_val": full[l][eval_split]} for l in bank.layers}


# ---------------------------------------------------------------------------
# greedy forward selection
# ---------------------------------------------------------------------------

class SelectionError(RuntimeError):
    def __init__(self, subset, cause):
        super().__init__(f"scorer failed on subset {subset}: {cause}")
        self.subset = subset


@dataclass
class SelectionTrace:
    steps: list[tuple[int, float]]
    selected: tuple[int, ...]
    stop_reason: str
    evaluations: list[tuple[tuple[int, ...], float]] = field(default_factory=list)

    @property
    def score(self) -> float:
        return self.steps[-1][1] if self.steps else 0.0


def forward_select(candidates, scorer: Callable[[tuple], float], jobs: int = 1) -> SelectionTrace:
    """Greedy forward selection with a strict-improvement stop rule.

    The empty set scores 0. Each round scores ``current + {c}`` for every
    remaining ``c`` (subsets are passed as sorted tuples), keeps the best
    (ties: lower id) and stops once that best does not beat the current score.
    """
    remaining = sorted(set(int(c) for c in candidates))
    if not remaining:
        raise ValueError("no candidates to select from")
    current, current_score = [], 0.0
    steps, evaluations = [], []

    def score(c):
        subset = tuple(sorted(current + [c]))
        try:
            return subset, float(scorer(subset))
        except Exception as exc:
            raise SelectionError(subset, exc) from exc

    pool = ThreadPoolExecutor(jobs) if jobs > 1 else None
    try:
        while True:
            if not remaining:
                reason = "exhausted"
                break
            results = list(pool.map(score, remaining)) if pool else [score(c) for c in remaining]
            evaluations.extend(results)
            best_i = int(np.argmax([s for _, s in results]))  # first max == lowest id
            best_c, best_s = remaining[best_i], results[best_i][1]
            if best_s <= current_score:
                reason = "no improvement"
                break
            current.append(best_c)
            current_score = best_s
            steps.append((best_c, best_s))
            remaining.remove(best_c)
    finally:
        if pool:
            pool.shutdown()
    return SelectionTrace(steps, tuple(sorted(current)), reason, evaluations)


def subset_scorer(bank: LayerFeatureBank, trainer: HeadTrainer = HeadTrainer(), eval_split="val"):
    """Validation accuracy of a softmax head on the concatenated pooled features of a subset."""

    def score(subset):
        _, _, pev = _fit_eval(bank, bank.features(subset), trainer, eval_split)
        return float(np.mean(pev == bank.labels[bank.rows(eval_split)]))

    return score


# ---------------------------------------------------------------------------
# retrieval
# ---------------------------------------------------------------------------

def retrieve_nearest(query, gallery, M: int = 7):
    """Indices of the ``M`` gallery rows closest in L2 distance, and those distances.

    Equal distances keep ascending gallery index order.
    """
    gallery = np.asarray(gallery, dtype=np.float64)
    query = np.asarray(query, dtype=np.float64).ravel()
    if gallery.ndim != 2 or gallery.shape[1] != query.size:
        raise ValueError(f"gallery {gallery.shape} incompatible with query of length {query.size}")
    if not 1 <= M <= len(gallery):
        raise ValueError(f"M={M} must lie in [1, {len(gallery)}]")
    dist = np.sqrt(((gallery - query) ** 2).sum(axis=1))
    idx = np.argsort(dist, kind="stable")[:M]
    return idx, dist[idx]


# ---------------------------------------------------------------------------
# CSV output
# ---------------------------------------------------------------------------

def write_trace_csv(trace: SelectionTrace, path):
    """Columns: ``step, layer, score, subset`` (subset as ``;``-joined ids)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "layer", "score", "subset"])
        chosen = []
        for k, (layer, score) in enumerate(trace.steps, start=1):
            chosen.append(layer)
            w.writerow([k, layer, repr(score), ";".join(str(c) for c in sorted(chosen))])


def read_trace_csv(path):
    with open(path, newline="") as fh:
        return [(int(r["layer"]), float(r["score"])) for r in csv.DictReader(fh)]


def write_layer_csv(rows: dict, path, columns):
    """One row per layer; ``rows[layer][col]`` for every column."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", *columns])
        for layer in sorted(rows):
            w.writerow([layer, *(repr(rows[layer][c]) for c in columns)])


def write_per_class_csv(counts, best, layers, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", *(f"layer_{l}" for l in layers), "best_layer"])
        for k in range(counts.shape[0]):
            w.writerow([k, *counts[k].tolist(), int(best[k])])
