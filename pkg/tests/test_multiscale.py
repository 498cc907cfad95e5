import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dagcnn.errors import ExecutionError, GraphError
from dagcnn.graph import ExecContext, Kind, forward, loss_and_grads, topo_order
from dagcnn.multiscale import (BackboneSpec, LayerSpec, backbone_params, build_chain, build_multiscale, graph_taps,
                               head_params, multiscale_feature, node_of, parse_layer, tap_feature_node,
                               transfer_backbone, validate_taps)

SMALL = ("conv 3 8", "relu", "conv 3 16", "relu", "pool 2", "conv 3 32", "relu")


def small_backbone(size=8, channels=1):
    return BackboneSpec.parse(SMALL, (size, size, channels))


def seven_relu_backbone():
    lines = []
    for _ in range(7):
        lines += ["conv 3 4", "relu"]
    return BackboneSpec.parse(lines, (6, 6, 3))


# -- parsing and validation --------------------------------------------------------

def test_parse_layer():
    assert parse_layer("conv 3 8") == LayerSpec("conv", kernel=3, out_channels=8, stride=1, pad=1)
    assert parse_layer("conv 5 4 2 0") == LayerSpec("conv", kernel=5, out_channels=4, stride=2, pad=0)
    assert parse_layer("relu") == LayerSpec("relu")
    assert parse_layer("pool 2") == LayerSpec("pool", window=2, stride=2)
    assert parse_layer("pool 3 1") == LayerSpec("pool", window=3, stride=1)
    for text in ("conv 3 8", "relu", "pool 3 1", "conv 5 4 2 0"):
        assert parse_layer(str(parse_layer(text))) == parse_layer(text)


@pytest.mark.parametrize("text", ["", "conv 3", "relu 2", "pool", "dense 4", "conv a b"])
def test_parse_layer_errors(text):
    with pytest.raises(ValueError):
        parse_layer(text)


def test_backbone_invariants():
    with pytest.raises(ValueError, match="no ReLU"):
        BackboneSpec.parse(["conv 3 4", "conv 3 4", "relu"], (4, 4, 1))
    with pytest.raises(ValueError, match="ReLU"):
        BackboneSpec.parse(["conv 3 4", "pool 2"], (4, 4, 1))
    b = small_backbone()
    assert b.relu_indices == (1, 3, 6)
    assert b.conv_indices == (0, 2, 5)
    assert node_of(3) == 4


def test_validate_taps():
    b = small_backbone()
    assert validate_taps(b, [6, 1]) == (1, 6)
    for bad in ([], [1, 1], [0], [4], [1, 99]):
        with pytest.raises(ValueError):
            validate_taps(b, bad)


# -- construction ----------------------------------------------------------------------

def test_fc_shapes_follow_tap_channels():
    g = build_multiscale(small_backbone(), [1, 3, 6], num_classes=4)
    shapes = [arr.shape for _, name, arr in head_params(g) if name == "weight"]
    assert shapes == [(8, 4), (16, 4), (32, 4)]


def test_seven_taps_single_add():
    b = seven_relu_backbone()
    g = build_multiscale(b, b.relu_indices, num_classes=67)
    adds = [n for n in g.nodes if n.kind == Kind.ADD]
    assert len(adds) == 1 and len(adds[0].parents) == 7
    assert g[g.loss_id].parents == (adds[0].id,)
    assert g[g.loss_id].hyper["num_classes"] == 67


def test_branch_structure_and_fan_out():
    b = small_backbone()
    g = build_multiscale(b, [1, 3, 6], num_classes=3)
    for t in (1, 3, 6):
        relu = node_of(t)
        kinds = sorted(g[c].kind for c in g.children(relu))
        assert Kind.GLOBAL_AVG_POOL in kinds
        assert g.fan_out(relu) == (1 if t == 6 else 2)
        gap = next(c for c in g.children(relu) if g[c].kind == Kind.GLOBAL_AVG_POOL)
        (l2,) = g.children(gap)
        (fc,) = g.children(l2)
        assert (g[l2].kind, g[fc].kind) == (Kind.L2_NORMALIZE, Kind.FULLY_CONNECTED)
    assert graph_taps(g) == (1, 3, 6)


def test_layers_past_top_tap_are_dropped():
    g = build_multiscale(small_backbone(), [1], num_classes=2)
    assert graph_taps(g) == (1,)
    assert not any(n.kind == Kind.CONV and n.id > node_of(1) for n in g.nodes)


def test_errors():
    b = small_backbone()
    with pytest.raises(ValueError):
        build_multiscale(b, [], 3)
    with pytest.raises(ValueError):
        build_multiscale(b, [2], 3)
    with pytest.raises(ValueError):
        build_multiscale(b, [1], 1)


@settings(max_examples=30, deadline=None)
@given(st.sets(st.sampled_from((1, 3, 6)), min_size=1), st.integers(2, 6), st.integers(0, 50))
def test_built_graph_always_valid(taps, K, seed):
    g = build_multiscale(small_backbone(), taps, K, seed=seed)
    g.validate()
    assert sorted(topo_order(g)) == list(range(len(g)))
    assert graph_taps(g) == tuple(sorted(taps))


def test_shared_backbone_init():
    b = small_backbone()
    a = build_multiscale(b, [1, 3, 6], 3, seed=4)
    c = build_chain(b, 3, seed=4)
    for (na, _, pa), (nc, _, pc) in zip(backbone_params(a), backbone_params(c)):
        assert na == nc and pa.tobytes() == pc.tobytes()


# -- single tap degenerates to the chain ------------------------------------------------------

def test_single_tap_equals_chain():
    b = small_backbone()
    dag = build_multiscale(b, [6], 5, seed=2)
    chain = build_chain(b, 5, seed=2)
    assert not any(n.kind == Kind.ADD for n in chain.nodes)
    x = np.random.default_rng(0).normal(size=(8, 8, 1))
    ld, gd, _ = loss_and_grads(dag, x, 3)
    lc, gc, _ = loss_and_grads(chain, x, 3)
    assert abs(ld - lc) < 1e-12
    # chain nodes keep their ids in the DAG; shared parameters match
    assert set(gc) <= set(gd)
    for k in gc:
        np.testing.assert_allclose(gd[k], gc[k], rtol=0, atol=1e-12)


# -- multiscale feature -------------------------------------------------------------------------

def test_multiscale_feature_length_and_unit_segments():
    b = small_backbone()
    g = build_multiscale(b, [1, 3, 6], 3, seed=1)
    ctx = ExecContext()
    forward(g, ctx, np.random.default_rng(1).uniform(0, 1, (8, 8, 1)))
    f = multiscale_feature(g, ctx, [6, 1, 3])
    assert f.shape == (8 + 16 + 32,)
    for lo, hi in ((0, 8), (8, 24), (24, 56)):
        n = np.linalg.norm(f[lo:hi])
        assert n == pytest.approx(1.0, abs=1e-12) or n == 0.0
    np.testing.assert_array_equal(f[:8], ctx.values[tap_feature_node(g, 1)].ravel())


def test_multiscale_feature_single_tap_and_duplicates():
    b = small_backbone()
    g = build_multiscale(b, [1], 3, seed=1)
    ctx = ExecContext()
    forward(g, ctx, np.random.default_rng(2).uniform(0, 1, (8, 8, 1)))
    f = multiscale_feature(g, ctx, [1])
    assert f.shape == (8,) and np.linalg.norm(f) == pytest.approx(1.0, abs=1e-12)

    # two branches that see the same activations give the same segment twice
    b2 = BackboneSpec.parse(["conv 1 4", "relu", "pool 1", "relu"], (3, 3, 1))
    g2 = build_multiscale(b2, [1, 3], 2, seed=0)
    ctx2 = ExecContext()
    forward(g2, ctx2, np.random.default_rng(3).uniform(0, 1, (3, 3, 1)))
    f2 = multiscale_feature(g2, ctx2, [1, 3])
    np.testing.assert_array_equal(f2[:4], f2[4:])


def test_multiscale_feature_needs_forward():
    g = build_multiscale(small_backbone(), [1, 3], 3)
    with pytest.raises(ExecutionError):
        multiscale_feature(g, ExecContext(), [1, 3])
    with pytest.raises(GraphError):
        tap_feature_node(g, 6)


def test_transfer_backbone():
    b = small_backbone()
    src = build_chain(b, 3, seed=10)
    dst = build_multiscale(b, [1, 3, 6], 3, seed=11)
    heads_before = [a.copy() for _, _, a in head_params(dst)]
    transfer_backbone(src, dst)
    for (_, _, ps), (_, _, pd) in zip(backbone_params(src), backbone_params(dst)):
        assert ps.tobytes() == pd.tobytes()
    for before, (_, _, after) in zip(heads_before, head_params(dst)):
        assert before.tobytes() == after.tobytes()
    other = build_chain(BackboneSpec.parse(["conv 3 4", "relu"], (8, 8, 1)), 3)
    with pytest.raises(GraphError):
        transfer_backbone(other, dst)
