import csv
import json

import numpy as np
import pytest

from dagcnn.cli import load_config, config_to_ini, main
from dagcnn.graph import load_model
from dagcnn.multiscale import graph_taps

LAYERS = "conv 3 4;relu;pool 2;conv 3 6;relu;conv 3 6;relu"


@pytest.fixture()
def cfg_file(tmp_path):
    p = tmp_path / "small.ini"
    p.write_text("[data]\nsize = 12\nk_coarse = 2\nk_fine = 2\nper_class = 5\n\n"
                 "[train]\nepochs = 2\nbatch_size = 8\n\n[select]\niterations = 50\n")
    return p


def run(*argv):
    return main([str(a) for a in argv])


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def manifest(out):
    return json.loads((out / "manifest.json").read_text())


def test_config_layers(tmp_path, cfg_file):
    cfg = load_config(cfg_file, {"train": {"lr": "0.5"}, "model": {"layers": LAYERS.split(";")}})
    assert cfg["data"]["size"] == 12 and cfg["train"]["lr"] == 0.5 and cfg["train"]["epochs"] == 2
    assert cfg["model"]["layers"][0] == "conv 3 4"
    again = tmp_path / "again.ini"
    again.write_text(config_to_ini(cfg))
    assert load_config(again) == cfg


@pytest.mark.parametrize("text", ["[nope]\na = 1\n", "[train]\nnope = 1\n", "[train]\nlr = fast\n"])
def test_config_errors(tmp_path, text):
    p = tmp_path / "bad.ini"
    p.write_text(text)
    assert run("train", "--config", p, "--out", tmp_path / "o") == 2


def test_train_eval_retrieve(tmp_path, cfg_file):
    out = tmp_path / "train"
    assert run("train", "--config", cfg_file, "--layers", LAYERS, "--out", out, "--taps", "1,6") == 0
    m = manifest(out)
    assert m["status"] == 0 and m["results"]["taps"] == [1, 6]
    assert set(m["outputs"]) == {"model.dagnet", "metrics.csv", "config.ini"}
    assert str(cfg_file) in m["inputs"]
    g = load_model(out / "model.dagnet")
    assert graph_taps(g) == (1, 6)
    header, *body = rows(out / "metrics.csv")
    assert header == ["epoch", "split", "loss", "accuracy", "grad_mean_abs_layer1", "grad_mean_abs_layer1_last"]
    assert [r[:2] for r in body] == [["1", "train"], ["1", "val"], ["2", "train"], ["2", "val"]]

    ev = tmp_path / "eval"
    assert run("eval", "--config", cfg_file, "--model", out / "model.dagnet", "--out", ev) == 0
    (split, acc, loss), = rows(ev / "eval.csv")[1:]
    assert split == "test" and 0 <= float(acc) <= 1 and float(loss) > 0
    conf = np.array([[int(v) for v in r[1:]] for r in rows(ev / "confusion.csv")[1:]])
    support = [int(r[1]) for r in rows(ev / "per_class.csv")[1:]]
    assert conf.sum(axis=1).tolist() == support

    rt = tmp_path / "ret"
    assert run("retrieve", "--config", cfg_file, "--model", out / "model.dagnet", "--layer", 1, "--layer", 6,
               "--query", 3, "-M", 4, "--out", rt) == 0
    body = rows(rt / "retrieve.csv")[1:]
    assert len(body) == 8
    assert body[0][:3] == ["1", "1", "3"] and float(body[0][4]) == 0.0
    assert run("retrieve", "--config", cfg_file, "--model", out / "model.dagnet", "--layer", 2,
               "--out", rt) == 2
    assert run("retrieve", "--config", cfg_file, "--model", out / "model.dagnet", "--layer", 1, "-M", 999,
               "--out", rt) == 2
    assert run("retrieve", "--config", cfg_file, "--model", out / "model.dagnet", "--layer", 1, "-M", 0,
               "--out", rt) == 2


def test_taps_auto_matches_selection_trace(tmp_path, cfg_file):
    out = tmp_path / "auto"
    assert run("train", "--config", cfg_file, "--layers", LAYERS, "--taps", "auto", "--epochs", 1,
               "--out", out) == 0
    m = manifest(out)
    trace = rows(out / "selection.csv")[1:]
    selected = sorted(int(r[1]) for r in trace)
    assert m["results"]["taps"] == selected
    assert list(graph_taps(load_model(out / "model.dagnet"))) == selected
    assert [s[0] for s in m["results"]["selection"]["steps"]] == [int(r[1]) for r in trace]


def test_select_command(tmp_path, cfg_file):
    out = tmp_path / "sel"
    assert run("select", "--config", cfg_file, "--layers", LAYERS, "--full", "--out", out) == 0
    assert rows(out / "layers.csv")[0] == ["layer", "pooled_train", "pooled_val", "full_train", "full_val"]
    assert [r[0] for r in rows(out / "layers.csv")[1:]] == ["1", "4", "6"]
    assert rows(out / "per_class.csv")[0] == ["class", "layer_1", "layer_4", "layer_6", "best_layer"]
    assert (out / "bank.dagbank").read_bytes()[:8] == b"DAGBANK1"
    assert manifest(out)["results"]["selected"] == sorted(int(r[1]) for r in rows(out / "selection.csv")[1:])


def test_diagnose_matrix_and_gradtrace(tmp_path, cfg_file):
    out = tmp_path / "diag"
    assert run("diagnose", "--config", cfg_file, "--layers", LAYERS, "--epochs", 1, "--save-models",
               "--out", out) == 0
    body = rows(out / "diagnostic.csv")
    assert body[0] == ["model", "mode", "train_accuracy", "val_accuracy", "test_accuracy"]
    assert [tuple(r[:2]) for r in body[1:]] == [("chain", "ots"), ("chain", "finetune"), ("dag", "ots"),
                                                  ("dag", "finetune")]
    assert (out / "dag_ots.dagnet").is_file()

    gt = tmp_path / "gt"
    assert run("diagnose", "--gradtrace", "--config", cfg_file, "--layers", LAYERS, "--out", gt) == 0
    body = rows(gt / "gradtrace.csv")
    assert body[0] == ["epoch", "chain", "dag", "ratio", "chain_last", "dag_last"]
    for r in body[1:]:
        assert float(r[3]) == pytest.approx(float(r[2]) / float(r[1]))


def test_gradcheck_exit_code(tmp_path):
    out = tmp_path / "gc"
    assert run("diagnose", "--gradcheck", "--gradcheck-layers", "conv 3 2;relu;conv 3 2;relu", "--out", out) == 0
    assert manifest(out)["results"]["gradcheck"]["max_rel_error"] < 1e-4
    # a step this large breaks the finite-difference approximation, so the check must fail
    assert run("diagnose", "--gradcheck", "--gradcheck-layers", "conv 3 2;relu;conv 3 2;relu", "--step", "0.5",
               "--out", tmp_path / "gc2") == 1


def test_gen_synth_then_train_from_idx(tmp_path):
    gen = tmp_path / "gen"
    assert run("gen-synth", "--per-class", 3, "--size", 10, "--out", gen) == 0
    assert (gen / "images.idx").read_bytes()[:4] == b"\x00\x00\x08\x03"
    out = tmp_path / "t"
    assert run("train", "--images", gen / "images.idx", "--labels", gen / "labels.idx", "--layers",
               "conv 3 4;relu", "--epochs", 1, "--out", out) == 0
    assert set(manifest(out)["inputs"]) == {str(gen / "images.idx"), str(gen / "labels.idx")}


def test_usage_errors(tmp_path, cfg_file):
    out = tmp_path / "x"
    assert run("train", "--images", tmp_path / "missing.idx", "--labels", tmp_path / "m.idx", "--out", out) == 2
    assert run("train", "--images", tmp_path / "missing.idx", "--out", out) == 2
    assert run("eval", "--config", cfg_file, "--model", tmp_path / "missing.dagnet", "--out", out) == 2
    assert run("train", "--config", cfg_file, "--layers", "conv 3 4;relu", "--taps", "0", "--out", out) == 2
    assert run("train", "--config", cfg_file, "--lr", "-1", "--out", out) == 2
    assert run("train", "--config", cfg_file, "--jobs", "0", "--out", out) == 2
    bad = tmp_path / "bad.dagnet"
    bad.write_bytes(b"NOTAMODEL")
    assert run("eval", "--config", cfg_file, "--model", bad, "--out", out) == 2
    with pytest.raises(SystemExit) as info:
        main(["train"])
    assert info.value.code == 2


def test_replay_reproduces_outputs(tmp_path, cfg_file):
    out = tmp_path / "orig"
    assert run("train", "--config", cfg_file, "--layers", LAYERS, "--taps", "auto", "--out", out) == 0
    rep = tmp_path / "rep"
    assert run("replay", out / "manifest.json", "--out", rep) == 0
    body = rows(rep / "replay.csv")[1:]
    assert body and all(r[3] == "True" for r in body)
    for name in ("model.dagnet", "metrics.csv", "selection.csv"):
        assert (out / name).read_bytes() == (rep / "rerun" / name).read_bytes()

    # a tampered record is detected
    m = manifest(out)
    m["outputs"]["metrics.csv"] = "0" * 64
    (out / "manifest.json").write_text(json.dumps(m))
    assert run("replay", out / "manifest.json", "--out", tmp_path / "rep2") == 1


def test_jobs_do_not_change_outputs(tmp_path, cfg_file):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("train", "--config", cfg_file, "--layers", LAYERS, "--out", a) == 0
    assert run("train", "--config", cfg_file, "--layers", LAYERS, "--jobs", 3, "--out", b) == 0
    for name in ("model.dagnet", "metrics.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
