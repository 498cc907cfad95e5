import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dagcnn.data import (Dataset, SynthTaskConfig, assign_splits, bilinear_resize, decode_idx, encode_idx, load_idx,
                         prepare, preprocess, read_idx, save_idx_dataset, synth_multiscale, write_idx)
from dagcnn.errors import FormatError, ShapeError
from dagcnn.select import HeadTrainer


def idx_bytes(magic, dims, payload):
    return struct.pack(">I", magic) + struct.pack(f">{len(dims)}I", *dims) + bytes(payload)


# -- IDX -------------------------------------------------------------------------------------

def test_hand_built_idx_pair(tmp_path):
    images = idx_bytes(0x00000803, (2, 1, 1), [0, 255])
    assert len(images) == 18
    labels = idx_bytes(0x00000801, (2,), [1, 0])
    (tmp_path / "i.idx").write_bytes(images)
    (tmp_path / "l.idx").write_bytes(labels)
    ds = load_idx(tmp_path / "i.idx", tmp_path / "l.idx")
    assert ds.images.shape == (2, 1, 1, 1)
    assert ds.images[:, 0, 0, 0].tolist() == [0.0, 1.0]
    assert ds.labels.tolist() == [1, 0] and ds.num_classes == 2


def test_idx_errors(tmp_path):
    good = idx_bytes(0x00000803, (2, 1, 1), [0, 255])
    with pytest.raises(FormatError, match="magic"):
        decode_idx(b"\x01" + good[1:])
    with pytest.raises(FormatError, match="dtype"):
        decode_idx(idx_bytes(0x00000D03, (2, 1, 1), [0] * 8))
    for cut in (2, 10, 17):
        with pytest.raises(FormatError):
            decode_idx(good[:cut])
    with pytest.raises(FormatError):
        decode_idx(good + b"\0")
    (tmp_path / "i.idx").write_bytes(good)
    (tmp_path / "l.idx").write_bytes(idx_bytes(0x00000801, (3,), [0, 1, 0]))
    with pytest.raises(FormatError, match="count"):
        load_idx(tmp_path / "i.idx", tmp_path / "l.idx")
    with pytest.raises(FormatError):
        encode_idx(np.zeros(3, dtype=np.int32))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 5), min_size=1, max_size=4), st.integers(0, 2**32 - 1))
def test_idx_round_trip_byte_exact(dims, seed):
    arr = np.random.default_rng(seed).integers(0, 256, size=dims, dtype=np.uint8)
    buf = encode_idx(arr)
    back = decode_idx(buf)
    assert back.shape == arr.shape and back.tobytes() == arr.tobytes()
    assert encode_idx(back) == buf


def test_idx_file_round_trip(tmp_path):
    ds = synth_multiscale(SynthTaskConfig(size=8, k_coarse=2, k_fine=2, per_class=3, seed=0))
    save_idx_dataset(ds, tmp_path / "i.idx", tmp_path / "l.idx")
    back = load_idx(tmp_path / "i.idx", tmp_path / "l.idx", num_classes=4)
    assert back.images.tobytes() == ds.images.tobytes()
    assert back.labels.tolist() == ds.labels.tolist()
    write_idx(tmp_path / "j.idx", read_idx(tmp_path / "i.idx"))
    assert (tmp_path / "j.idx").read_bytes() == (tmp_path / "i.idx").read_bytes()


def test_dataset_invariants():
    with pytest.raises(ShapeError):
        Dataset(np.zeros((2, 3, 3)), np.zeros(2), 2)
    with pytest.raises(ShapeError):
        Dataset(np.zeros((2, 3, 3, 1)), np.zeros(3), 2)
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 3, 3, 1)), np.array([0, 2]), 2)
    ds = Dataset(np.zeros((2, 3, 3, 1)), np.array([0, 1]), 2, {"train": np.array([], dtype=int)})
    with pytest.raises(ValueError):
        ds.split("train")
    with pytest.raises(KeyError):
        ds.split("val")


# -- preprocessing --------------------------------------------------------------------------

def test_bilinear_ramp_by_hand():
    ramp = np.arange(1.0, 17.0).reshape(4, 4, 1)
    out = bilinear_resize(ramp, 2, 2)[..., 0]
    # output pixel centres fall at source coordinates 0.5 and 2.5: each is the mean of a 2x2 block
    expected = [[(1 + 2 + 5 + 6) / 4, (3 + 4 + 7 + 8) / 4], [(9 + 10 + 13 + 14) / 4, (11 + 12 + 15 + 16) / 4]]
    np.testing.assert_allclose(out, expected, atol=1e-12)
    assert expected == [[3.5, 5.5], [11.5, 13.5]]


def test_bilinear_identity_and_constant():
    img = np.random.default_rng(0).uniform(size=(5, 7, 2))
    np.testing.assert_array_equal(bilinear_resize(img, 5, 7), img)
    np.testing.assert_allclose(bilinear_resize(np.full((3, 3, 1), 0.7), 8, 5), 0.7, atol=1e-15)


def test_preprocess_examples():
    img = np.random.default_rng(1).uniform(size=(4, 4, 3))
    np.testing.assert_array_equal(preprocess(img, (4, 4), 0.0), img)
    np.testing.assert_array_equal(preprocess(np.full((6, 9, 2), 0.3), (4, 4), [0.3, 0.3]), np.zeros((4, 4, 2)))
    # short side scaled to the target, then centre crop
    wide = np.zeros((4, 8, 1))
    wide[:, 3:5] = 1.0
    out = preprocess(wide, (2, 2), 0.0)
    assert out.shape == (2, 2, 1)
    np.testing.assert_allclose(out[..., 0], [[0.5, 0.5], [0.5, 0.5]])
    with pytest.raises(ValueError):
        preprocess(img, (0, 4), 0.0)
    with pytest.raises(ShapeError):
        preprocess(img[..., 0], (4, 4), 0.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(1, 3), st.integers(1, 8), st.integers(1, 8),
       st.integers(0, 1000))
def test_preprocess_shape_and_finite(H, W, C, th, tw, seed):
    img = np.random.default_rng(seed).uniform(size=(H, W, C))
    out = preprocess(img, (th, tw), np.full(C, 0.5))
    assert out.shape == (th, tw, C)
    assert np.all(np.isfinite(out))


def test_prepare_subtracts_train_mean():
    ds = synth_multiscale(SynthTaskConfig(size=8, k_coarse=2, k_fine=2, per_class=5, seed=2))
    p = prepare(ds, target=(6, 6))
    assert p.images.shape == (20, 6, 6, 1)
    assert abs(p.images[p.splits["train"]].mean()) < 1e-12
    assert p.preprocessing["target"] == [6, 6]


# -- splits ---------------------------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=1, max_size=80), st.integers(0, 100))
def test_splits_disjoint_and_exhaustive(labels, seed):
    s = assign_splits(labels, (0.6, 0.2, 0.2), seed)
    allidx = np.concatenate([s["train"], s["val"], s["test"]])
    assert sorted(allidx.tolist()) == list(range(len(labels)))
    again = assign_splits(labels, (0.6, 0.2, 0.2), seed)
    assert all(np.array_equal(s[k], again[k]) for k in s)


def test_split_fraction_errors():
    for bad in ((0.5, 0.5), (0.7, 0.2, 0.2), (1.2, -0.1, -0.1)):
        with pytest.raises(ValueError):
            assign_splits([0, 1], bad)


# -- synthetic task ------------------------------------------------------------------------------

def test_synth_deterministic_and_balanced():
    cfg = SynthTaskConfig(size=16, k_coarse=3, k_fine=2, per_class=7, noise=0.0, seed=5)
    a, b = synth_multiscale(cfg), synth_multiscale(cfg)
    assert a.images.tobytes() == b.images.tobytes()
    assert np.bincount(a.labels).tolist() == [7] * 6
    assert a.num_classes == 6
    c = synth_multiscale(SynthTaskConfig(size=16, k_coarse=3, k_fine=2, per_class=7, noise=0.0, seed=6))
    assert a.images.tobytes() != c.images.tobytes()
    for name in ("train", "val", "test"):
        assert np.bincount(a.labels[a.splits[name]], minlength=6).min() >= 1


def test_synth_pixels_survive_idx(tmp_path):
    ds = synth_multiscale(SynthTaskConfig(size=12, per_class=2, seed=1))
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
    np.testing.assert_array_equal(np.rint(ds.images * 255) / 255, ds.images)


def test_synth_label_layout():
    cfg = SynthTaskConfig(size=16, k_coarse=2, k_fine=3, per_class=1, noise=0.0, jitter=False, seed=0)
    ds = synth_multiscale(cfg)
    img = ds.images[..., 0]
    # same coarse class -> same blob support; same fine class -> different support
    support = img > 0
    assert np.array_equal(support[0], support[1]) and np.array_equal(support[1], support[2])
    assert not np.array_equal(support[0], support[3])


def test_texture_mean_is_phase_free():
    # every blob holds whole texture periods, so the intensity mean carries no fine-class signal
    cfg = SynthTaskConfig(size=32, k_coarse=1, k_fine=6, per_class=12, noise=0.0, seed=0)
    ds = synth_multiscale(cfg)
    means = ds.images.mean(axis=(1, 2, 3))
    assert np.ptp(means) < 1e-2


@pytest.mark.parametrize("kw", [dict(k_coarse=1, k_fine=1), dict(noise=-1.0), dict(size=6), dict(per_class=0),
                                dict(k_coarse=9), dict(blob_frac=0.5)])
def test_synth_config_errors(kw):
    with pytest.raises(ValueError):
        SynthTaskConfig(**kw)


def _probe(X, ds):
    tr, va = ds.splits["train"], ds.splits["val"]
    head = HeadTrainer(iterations=1000).fit(X[tr], ds.labels[tr], ds.num_classes)
    return float(np.mean(head.predict(X[va]) == ds.labels[va]))


def test_fine_labels_invisible_to_global_layout_probe():
    # coarse block means keep the global layout and discard texture
    accs = []
    for seed in range(3):
        ds = synth_multiscale(SynthTaskConfig(k_coarse=1, k_fine=4, per_class=100, seed=seed))
        X = ds.images[..., 0].reshape(len(ds), 2, 16, 2, 16).mean(axis=(2, 4)).reshape(len(ds), -1)
        accs.append(_probe(X, ds))
    assert abs(np.mean(accs) - 0.25) < 0.06


def test_coarse_labels_visible_to_high_layer_probe():
    from dagcnn.cli import DEFAULT_LAYERS
    from dagcnn.multiscale import BackboneSpec, build_chain
    from dagcnn.select import extract_feature_bank

    ds = synth_multiscale(SynthTaskConfig(k_coarse=4, k_fine=1, per_class=40, seed=0))
    b = BackboneSpec.parse(DEFAULT_LAYERS, ds.image_shape)
    bank = extract_feature_bank(build_chain(b, ds.num_classes, seed=0), ds, layers=[b.relu_indices[-1]])
    assert _probe(bank.pooled[b.relu_indices[-1]], ds) >= 0.5
