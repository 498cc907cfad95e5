"""Command-line entry point: ``dagcnn <command> [options]``.

Every command resolves one configuration (built-in defaults, then an optional
INI file, then flags), runs, and writes ``manifest.json`` next to its outputs.
Exit codes: 0 success, 1 internal or numeric failure, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from ._kernels import ACTIVE
from .data import SynthTaskConfig, load_idx, prepare, save_idx_dataset, synth_multiscale
from .errors import DagCnnError, FormatError, GraphError
from .graph import load_model, save_model
from .multiscale import BackboneSpec, build_chain, build_multiscale
from .select import (HeadTrainer, extract_feature_bank, forward_select, per_class_best_layer,
                     per_layer_accuracy, pooled_vs_full, retrieve_nearest, save_bank, subset_scorer,
                     write_layer_csv, write_per_class_csv, write_trace_csv)
from .train import (TrainConfig, diagnostic_matrix, evaluate, gradient_check, grad_trace_experiment,
                    train)

log = logging.getLogger("dagcnn")

DEFAULT_LAYERS = ("conv 3 8", "relu", "conv 3 8", "relu", "pool 2",
                  "conv 3 16", "relu", "conv 3 16", "relu", "pool 2",
                  "conv 3 32", "relu", "conv 3 32", "relu")

# section -> key -> (type, default). Types: int, float, bool, str, "floats", "lines".
SCHEMA = {
    "run": {"seed": (int, 0), "jobs": (int, 1)},
    "data": {
        "images": (str, ""), "labels": (str, ""), "num_classes": (int, 0),
        "size": (int, 32), "k_coarse": (int, 4), "k_fine": (int, 4), "per_class": (int, 40),
        "noise": (float, 0.1), "blob_frac": (float, 0.35), "jitter": (bool, True),
        "resize": (str, ""), "fractions": ("floats", (0.6, 0.2, 0.2)),
    },
    "model": {"layers": ("lines", DEFAULT_LAYERS), "taps": (str, "all"), "kind": (str, "dag")},
    "train": {
        "lr": (float, 0.01), "momentum": (float, 0.9), "batch_size": (int, 32), "epochs": (int, 10),
        "mode": (str, "finetune"), "weight_decay": (float, 0.0), "head_lr_mult": (float, 1.0),
        "balanced": (bool, False), "grad_trace": (bool, True),
    },
    "select": {"head_lr": (float, 1.0), "iterations": (int, 300), "standardize": (bool, True)},
}


class UsageError(Exception):
    """Bad arguments or unusable inputs (exit code 2)."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _convert(kind, text, where):
    try:
        if kind is bool:
            low = str(text).strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind == "floats":
            return tuple(float(v) for v in str(text).replace(",", " ").split())
        if kind == "lines":
            if isinstance(text, (list, tuple)):
                return tuple(text)
            parts = [p.strip() for chunk in str(text).splitlines() for p in chunk.split(";")]
            return tuple(p for p in parts if p)
        return kind(text)
    except ValueError:
        raise UsageError(f"bad value {text!r} for {where}") from None


def load_config(path=None, overrides=None) -> dict:
    """Defaults, then the INI file at ``path``, then ``overrides[section][key]``."""
    cfg = {sec: {k: default for k, (_, default) in keys.items()} for sec, keys in SCHEMA.items()}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file not found: {p}")
        parser = configparser.ConfigParser()
        try:
            parser.read(p)
        except configparser.Error as exc:
            raise UsageError(f"cannot parse config {p}: {exc}") from None
        for sec in parser.sections():
            if sec not in SCHEMA:
                raise UsageError(f"unknown config section [{sec}] in {p}")
            for key, text in parser.items(sec):
                if key not in SCHEMA[sec]:
                    raise UsageError(f"unknown key {key!r} in [{sec}] of {p}")
                cfg[sec][key] = _convert(SCHEMA[sec][key][0], text, f"[{sec}] {key}")
    for sec, values in (overrides or {}).items():
        for key, value in values.items():
            if value is not None:
                cfg[sec][key] = _convert(SCHEMA[sec][key][0], value, f"--{key.replace('_', '-')}")
    return cfg


def config_to_ini(cfg: dict) -> str:
    parser = configparser.ConfigParser()
    for sec, values in cfg.items():
        parser[sec] = {}
        for key, value in values.items():
            if isinstance(value, tuple):
                value = "\n".join(str(v) for v in value) if SCHEMA[sec][key][0] == "lines" \
                    else " ".join(repr(v) for v in value)
            parser[sec][key] = str(value)
    out = []

    class _Sink:
        def write(self, s):
            out.append(s)

    parser.write(_Sink())
    return "".join(out)


# ---------------------------------------------------------------------------
# run bookkeeping
# ---------------------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """Collects inputs and outputs of one command and writes its manifest."""

    def __init__(self, command, argv, out_dir, cfg):
        self.command = command
        self.argv = list(argv)
        self.out = Path(out_dir)
        self.cfg = cfg
        self.inputs = {}
        self.outputs = []
        self.extra = {}
        self.t0 = time.perf_counter()
        self.out.mkdir(parents=True, exist_ok=True)

    def add_input(self, path):
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"input file not found: {p}")
        self.inputs[str(p)] = sha256_file(p)
        return p

    def path(self, name) -> Path:
        self.outputs.append(name)
        return self.out / name

    def finish(self, status=0):
        cfg_name = "config.ini"
        (self.out / cfg_name).write_text(config_to_ini(self.cfg))
        outputs = {name: sha256_file(self.out / name)
                   for name in sorted(set(self.outputs) | {cfg_name}) if (self.out / name).is_file()}
        manifest = {
            "command": self.command,
            "argv": self.argv,
            "config": self.cfg,
            "seed": self.cfg["run"]["seed"],
            "inputs": self.inputs,
            "outputs": outputs,
            "results": self.extra,
            "kernels": ACTIVE.name,
            "version": __version__,
            "status": status,
            "duration_s": round(time.perf_counter() - self.t0, 3),
        }
        (self.out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=_jsonable) + "\n")
        return status


def _jsonable(obj):
    if isinstance(obj, tuple):
        return list(obj)
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


# ---------------------------------------------------------------------------
# shared builders
# ---------------------------------------------------------------------------

def _synth_config(d, seed):
    try:
        return SynthTaskConfig(size=d["size"], k_coarse=d["k_coarse"], k_fine=d["k_fine"],
                               per_class=d["per_class"], noise=d["noise"], jitter=d["jitter"],
                               blob_frac=d["blob_frac"], seed=seed)
    except ValueError as exc:
        raise UsageError(f"[data] {exc}") from None


def load_dataset(cfg, run: Run):
    d, seed = cfg["data"], cfg["run"]["seed"]
    if bool(d["images"]) != bool(d["labels"]):
        raise UsageError("give both --images and --labels, or neither for the synthetic task")
    fractions = d["fractions"]
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise UsageError(f"[data] fractions must be three non-negative numbers summing to 1, got {fractions}")
    if d["images"]:
        img_path, lab_path = run.add_input(d["images"]), run.add_input(d["labels"])
        try:
            raw = load_idx(img_path, lab_path, d["num_classes"] or None)
        except FormatError as exc:
            raise UsageError(f"cannot read dataset: {exc}") from None
    else:
        raw = synth_multiscale(_synth_config(d, seed), fractions)
    target = None
    if d["resize"]:
        try:
            target = tuple(int(v) for v in d["resize"].lower().replace("x", " ").split())
        except ValueError:
            raise UsageError(f"[data] resize must look like HxW, got {d['resize']!r}") from None
    return prepare(raw, target, fractions, seed)


def backbone_from(cfg, data) -> BackboneSpec:
    try:
        return BackboneSpec.parse(cfg["model"]["layers"], data.image_shape)
    except ValueError as exc:
        raise UsageError(f"[model] layers: {exc}") from None


def train_config(cfg, **changes) -> TrainConfig:
    t = cfg["train"]
    try:
        return TrainConfig(lr=t["lr"], momentum=t["momentum"], batch_size=t["batch_size"], epochs=t["epochs"],
                           seed=cfg["run"]["seed"], mode=t["mode"], grad_trace=t["grad_trace"],
                           weight_decay=t["weight_decay"], head_lr_mult=t["head_lr_mult"],
                           balanced=t["balanced"], jobs=cfg["run"]["jobs"], **changes)
    except ValueError as exc:
        raise UsageError(f"[train] {exc}") from None


def head_trainer(cfg) -> HeadTrainer:
    s = cfg["select"]
    return HeadTrainer(lr=s["head_lr"], iterations=s["iterations"], standardize=s["standardize"])


def run_selection(cfg, backbone, data, run: Run):
    """Greedy tap selection on the pooled features of the freshly initialised backbone."""
    probe = build_chain(backbone, data.num_classes, seed=cfg["run"]["seed"])
    bank = extract_feature_bank(probe, data, jobs=cfg["run"]["jobs"])
    trace = forward_select(backbone.relu_indices, subset_scorer(bank, head_trainer(cfg)), jobs=cfg["run"]["jobs"])
    write_trace_csv(trace, run.path("selection.csv"))
    log.info("selected taps %s (%s)", list(trace.selected), trace.stop_reason)
    return trace


def resolve_taps(cfg, backbone, data, run: Run):
    spec = str(cfg["model"]["taps"]).strip().lower()
    if spec == "all":
        return backbone.relu_indices
    if spec == "auto":
        trace = run_selection(cfg, backbone, data, run)
        run.extra["selection"] = {"steps": trace.steps, "stop_reason": trace.stop_reason}
        return trace.selected
    try:
        taps = [int(t) for t in spec.replace(",", " ").split()]
    except ValueError:
        raise UsageError(f"--taps must be a comma list of layer ids, 'all' or 'auto', got {spec!r}") from None
    relus = set(backbone.relu_indices)
    bad = [t for t in taps if t not in relus]
    if not taps or bad:
        raise UsageError(f"taps {bad or taps} are not ReLU layers (ReLUs: {sorted(relus)})")
    return tuple(sorted(set(taps)))


def build_model(cfg, backbone, data, run: Run):
    kind = cfg["model"]["kind"]
    if kind == "chain":
        return build_chain(backbone, data.num_classes, seed=cfg["run"]["seed"]), ()
    if kind != "dag":
        raise UsageError(f"[model] kind must be 'dag' or 'chain', got {kind!r}")
    taps = resolve_taps(cfg, backbone, data, run)
    return build_multiscale(backbone, taps, data.num_classes, seed=cfg["run"]["seed"]), taps


def load_model_input(path, run: Run):
    p = run.add_input(path)
    try:
        return load_model(p)
    except FormatError as exc:
        raise UsageError(f"cannot load model {p}: {exc}") from None


def _check_classes(graph, data):
    if graph.num_classes != data.num_classes:
        raise UsageError(f"model predicts {graph.num_classes} classes but the dataset has {data.num_classes}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

METRIC_COLUMNS = ("epoch", "split", "loss", "accuracy", "grad_mean_abs_layer1", "grad_mean_abs_layer1_last")


def cmd_train(args, cfg, run: Run) -> int:
    data = load_dataset(cfg, run)
    backbone = backbone_from(cfg, data)
    graph, taps = build_model(cfg, backbone, data, run)
    result = train(graph, data, train_config(cfg))
    save_model(result.graph, run.path("model.dagnet"))
    _write_rows(run.path("metrics.csv"), METRIC_COLUMNS,
                ([m[c] for c in METRIC_COLUMNS] for m in result.metrics))
    run.extra["taps"] = list(taps)
    final = result.metrics[-1]
    print(f"trained {cfg['model']['kind']} taps={list(taps)} mode={cfg['train']['mode']}: "
          f"epoch {final['epoch']} {final['split']} accuracy {final['accuracy']:.4f}")
    return 0


def cmd_eval(args, cfg, run: Run) -> int:
    graph = load_model_input(args.model, run)
    data = load_dataset(cfg, run)
    _check_classes(graph, data)
    rep = evaluate(graph, data, args.split, cfg["run"]["jobs"])
    _write_rows(run.path("eval.csv"), ("split", "accuracy", "loss"), [(args.split, rep["accuracy"], rep["loss"])])
    _write_rows(run.path("per_class.csv"), ("class", "support", "accuracy"),
                [(k, int(rep["confusion"][k].sum()), float(rep["per_class"][k]))
                 for k in range(graph.num_classes)])
    _write_rows(run.path("confusion.csv"), ("true", *(f"pred_{k}" for k in range(graph.num_classes))),
                [(k, *rep["confusion"][k].tolist()) for k in range(graph.num_classes)])
    print(f"{args.split} accuracy {rep['accuracy']:.4f} loss {rep['loss']:.6f}")
    return 0


def cmd_select(args, cfg, run: Run) -> int:
    data = load_dataset(cfg, run)
    if args.model:
        graph = load_model_input(args.model, run)
        _check_classes(graph, data)
        candidates = tuple(n.id - 1 for n in graph.nodes if n.kind.name == "RELU")
    else:
        backbone = backbone_from(cfg, data)
        graph = build_chain(backbone, data.num_classes, seed=cfg["run"]["seed"])
        candidates = backbone.relu_indices
    trainer = head_trainer(cfg)
    jobs = cfg["run"]["jobs"]
    bank = extract_feature_bank(graph, data, candidates, full=args.full, jobs=jobs)
    save_bank(bank, run.path("bank.dagbank"))
    if args.full:
        rows = pooled_vs_full(bank, trainer)
        write_layer_csv(rows, run.path("layers.csv"), ("pooled_train", "pooled_val", "full_train", "full_val"))
    else:
        rows = per_layer_accuracy(bank, trainer)
        write_layer_csv(rows, run.path("layers.csv"), ("train", "val"))
    counts, best = per_class_best_layer(bank, trainer)
    write_per_class_csv(counts, best, bank.layers, run.path("per_class.csv"))
    trace = forward_select(candidates, subset_scorer(bank, trainer), jobs=jobs)
    write_trace_csv(trace, run.path("selection.csv"))
    run.extra["selected"] = list(trace.selected)
    print(f"selected layers {list(trace.selected)} val accuracy {trace.score:.4f} ({trace.stop_reason})")
    return 0


def cmd_diagnose(args, cfg, run: Run) -> int:
    if args.gradcheck:
        return _gradcheck(args, cfg, run)
    data = load_dataset(cfg, run)
    backbone = backbone_from(cfg, data)
    if args.gradtrace:
        taps = resolve_taps(cfg, backbone, data, run)
        res = grad_trace_experiment(backbone, taps, data, train_config(cfg))
        _write_rows(run.path("gradtrace.csv"), ("epoch", "chain", "dag", "ratio", "chain_last", "dag_last"),
                    [(e + 1, c, d, r, cl, dl) for e, (c, d, r, cl, dl)
                     in enumerate(zip(res.chain, res.dag, res.ratio, res.chain_last, res.dag_last))])
        print("dag/chain first-conv gradient ratio per epoch: " + " ".join(f"{r:.3g}" for r in res.ratio))
        return 0
    taps = resolve_taps(cfg, backbone, data, run)
    rows, graphs = diagnostic_matrix(backbone, taps, data, train_config(cfg))
    cols = ("model", "mode", "train_accuracy", "val_accuracy", "test_accuracy")
    _write_rows(run.path("diagnostic.csv"), cols, ([r.get(c, float("nan")) for c in cols] for r in rows))
    if args.save_models:
        for (model, mode), g in graphs.items():
            save_model(g, run.path(f"{model}_{mode}.dagnet"))
    for r in rows:
        print(f"{r['model']:>5} {r['mode']:>8}  test {r.get('test_accuracy', float('nan')):.4f}")
    return 0


def _gradcheck(args, cfg, run: Run) -> int:
    seed = cfg["run"]["seed"]
    rng = np.random.default_rng([seed, 31337])
    size = args.gradcheck_size
    shape = (size, size, 1)
    backbone = BackboneSpec.parse(cfg["model"]["layers"], shape) if args.gradcheck_layers is None \
        else BackboneSpec.parse(args.gradcheck_layers.split(";"), shape)
    graph = build_multiscale(backbone, backbone.relu_indices, 4, seed=seed)
    # spread-out weights keep every gradient entry well above the relative-error floor
    for _, _, arr in graph.parameters():
        arr[...] = rng.uniform(-1.0, 1.0, size=arr.shape)
    x = rng.normal(size=shape)
    label = int(rng.integers(0, 4))
    res = gradient_check(graph, x, label, step=args.step, max_entries=args.max_entries, seed=seed)
    _write_rows(run.path("gradcheck.csv"), ("node", "param", "max_rel_error"),
                [(nid, name, err) for (nid, name), err in sorted(res.errors.items())])
    run.extra["gradcheck"] = {"max_rel_error": res.max_rel_error, "worst": res.worst, "checked": res.checked}
    ok = res.max_rel_error < 1e-4
    print(f"max relative error {res.max_rel_error:.3e} over {res.checked} entries "
          f"(worst at node {res.worst[0]} {res.worst[1]}[{res.worst[2]}]): {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def cmd_retrieve(args, cfg, run: Run) -> int:
    graph = load_model_input(args.model, run)
    data = load_dataset(cfg, run)
    relus = [n.id - 1 for n in graph.nodes if n.kind.name == "RELU"]
    bad = [l for l in args.layer if l not in relus]
    if bad:
        raise UsageError(f"layers {bad} are not ReLU tap candidates of this model (ReLUs: {relus})")
    gallery_rows = data.splits[args.gallery] if args.gallery != "all" else np.arange(len(data))
    if not 1 <= args.M <= len(gallery_rows):
        raise UsageError(f"M={args.M} must lie in [1, {len(gallery_rows)}] for the {args.gallery!r} gallery")
    if not 0 <= args.query < len(data):
        raise UsageError(f"query index {args.query} outside the dataset (size {len(data)})")
    bank = extract_feature_bank(graph, data, sorted(set(args.layer)), jobs=cfg["run"]["jobs"])
    rows = []
    for layer in args.layer:
        feats = bank.pooled[layer]
        idx, dist = retrieve_nearest(feats[args.query], feats[gallery_rows], args.M)
        print(f"layer {layer}: query {args.query} (label {int(data.labels[args.query])})")
        for rank, (i, d) in enumerate(zip(idx, dist), start=1):
            item = int(gallery_rows[i])
            rows.append((layer, rank, item, int(data.labels[item]), float(d)))
            print(f"  {rank:2d}. index {item:5d}  label {int(data.labels[item]):3d}  distance {d:.6f}")
    _write_rows(run.path("retrieve.csv"), ("layer", "rank", "index", "label", "distance"), rows)
    return 0


def cmd_gen_synth(args, cfg, run: Run) -> int:
    d = cfg["data"]
    ds = synth_multiscale(_synth_config(d, cfg["run"]["seed"]), d["fractions"])
    save_idx_dataset(ds, run.path("images.idx"), run.path("labels.idx"))
    print(f"wrote {len(ds)} images of {ds.image_shape} with {ds.num_classes} classes to {run.out}")
    return 0


def cmd_replay(args, cfg, run: Run) -> int:
    """Re-run a manifest's command into a fresh directory and compare output digests."""
    manifest = json.loads(run.add_input(args.manifest).read_text())
    argv = list(manifest["argv"])
    if "--out" not in argv:
        raise UsageError("manifest argv has no --out to redirect")
    argv[argv.index("--out") + 1] = str(run.out / "rerun")
    status = main(argv)
    if status != manifest.get("status", 0):
        print(f"replay exited {status}, recorded run exited {manifest.get('status')}")
        return 1
    new = json.loads((run.out / "rerun" / "manifest.json").read_text())["outputs"]
    old = manifest["outputs"]
    diffs = sorted(k for k in set(old) | set(new) if old.get(k) != new.get(k))
    _write_rows(run.path("replay.csv"), ("output", "recorded", "replayed", "identical"),
                [(k, old.get(k, ""), new.get(k, ""), old.get(k) == new.get(k)) for k in sorted(set(old) | set(new))])
    if diffs:
        print("outputs differ: " + ", ".join(diffs))
        return 1
    print(f"all {len(old)} outputs reproduced bit-identically")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _common(p, data=True, model=True, training=True):
    p.add_argument("--config", help="INI config file; flags override its values")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="single source of all randomness")
    p.add_argument("--jobs", type=int, help="worker threads (results do not depend on it)")
    p.add_argument("-v", "--verbose", action="store_true")
    if data:
        g = p.add_argument_group("data")
        g.add_argument("--images", help="IDX image file (omit for the synthetic task)")
        g.add_argument("--labels", help="IDX label file")
        g.add_argument("--num-classes", type=int)
        g.add_argument("--per-class", type=int, help="synthetic images per class")
        g.add_argument("--resize", help="HxW target size")
    if model:
        g = p.add_argument_group("model")
        g.add_argument("--layers", help="backbone layers separated by ';', e.g. 'conv 3 8;relu;pool 2'")
        g.add_argument("--taps", help="comma list of ReLU layer ids, 'all' or 'auto'")
        g.add_argument("--kind", choices=("dag", "chain"))
    if training:
        g = p.add_argument_group("training")
        g.add_argument("--mode", choices=("finetune", "ots"))
        g.add_argument("--lr", type=float)
        g.add_argument("--momentum", type=float)
        g.add_argument("--batch-size", type=int)
        g.add_argument("--epochs", type=int)
        g.add_argument("--head-lr-mult", type=float)
        g.add_argument("--weight-decay", type=float)
        g.add_argument("--balanced", choices=("yes", "no"), help="class-balanced minibatches")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dagcnn", description="Multi-scale DAG-CNN experiments.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a DAG or chain model")
    _common(p)

    p = sub.add_parser("eval", help="evaluate a saved model on one split")
    _common(p, model=False, training=False)
    p.add_argument("--model", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))

    p = sub.add_parser("select", help="per-layer, per-class and greedy multi-scale analysis")
    _common(p, training=False)
    p.add_argument("--model", help="saved model whose backbone provides features (default: fresh init)")
    p.add_argument("--full", action="store_true", help="also compare full-dimensional features")
    p.add_argument("--head-lr", type=float)
    p.add_argument("--iterations", type=int)

    p = sub.add_parser("diagnose", help="OTS vs fine-tune matrix, gradient check or gradient trace")
    _common(p)
    mx = p.add_mutually_exclusive_group()
    mx.add_argument("--gradcheck", action="store_true", help="finite-difference check of a random DAG")
    mx.add_argument("--gradtrace", action="store_true", help="first-conv gradient trace, chain vs DAG")
    p.add_argument("--save-models", action="store_true")
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--max-entries", type=int, default=24, help="entries checked per parameter tensor")
    p.add_argument("--gradcheck-size", type=int, default=8)
    p.add_argument("--gradcheck-layers", help="backbone for --gradcheck (default: the configured one)")

    p = sub.add_parser("retrieve", help="nearest neighbours in pooled feature space")
    _common(p, model=False, training=False)
    p.add_argument("--model", required=True)
    p.add_argument("--layer", type=int, action="append", required=True, help="ReLU layer id (repeatable)")
    p.add_argument("--query", type=int, default=0, help="dataset index of the query image")
    p.add_argument("--gallery", default="all", choices=("all", "train", "val", "test"))
    p.add_argument("-M", type=int, default=7, help="number of neighbours")

    p = sub.add_parser("gen-synth", help="write the synthetic coarse x fine task as IDX files")
    _common(p, data=False, model=False, training=False)
    p.add_argument("--per-class", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--noise", type=float)

    p = sub.add_parser("replay", help="re-run a recorded command and compare its outputs")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.add_argument("-v", "--verbose", action="store_true")
    return ap


_FLAG_KEYS = {
    "run": ("seed", "jobs"),
    "data": ("images", "labels", "num_classes", "per_class", "resize", "size", "noise"),
    "model": ("layers", "taps", "kind"),
    "train": ("mode", "lr", "momentum", "batch_size", "epochs", "head_lr_mult", "weight_decay", "balanced"),
    "select": ("head_lr", "iterations"),
}

COMMANDS = {"train": cmd_train, "eval": cmd_eval, "select": cmd_select, "diagnose": cmd_diagnose,
            "retrieve": cmd_retrieve, "gen-synth": cmd_gen_synth, "replay": cmd_replay}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    stage = "configuration"
    try:
        overrides = {sec: {k: getattr(args, k, None) for k in keys} for sec, keys in _FLAG_KEYS.items()}
        if getattr(args, "layers", None):
            overrides["model"]["layers"] = args.layers.split(";")
        cfg = load_config(getattr(args, "config", None), overrides)
        if cfg["run"]["jobs"] < 1:
            raise UsageError("--jobs must be >= 1")
        run = Run(args.command, argv, args.out, cfg)
        if getattr(args, "config", None):
            run.add_input(args.config)
        stage = args.command
        status = COMMANDS[args.command](args, cfg, run)
        run.finish(status)
        return status
    except UsageError as exc:
        print(f"dagcnn {args.command}: error ({stage}): {exc}", file=sys.stderr)
        return 2
    except (GraphError, DagCnnError, FloatingPointError, RuntimeError, ValueError) as exc:
        print(f"dagcnn {args.command}: failed ({stage}): {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
