"""Datasets: IDX ingestion, preprocessing and the synthetic coarse x fine task."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ShapeError

SPLITS = ("train", "val", "test")

IDX_UBYTE = 0x08
IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    """Labelled images of one common shape.

    ``images`` is ``(N, H, W, C)`` float64, ``labels`` is ``(N,)`` int64 and
    ``splits`` maps split names to sorted index arrays.
    """

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    splits: dict[str, np.ndarray] = field(default_factory=dict)
    preprocessing: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ShapeError(f"images must be N x H x W x C, got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ShapeError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def split(self, name: str):
        """``(images, labels, indices)`` of one split."""
        if name not in self.splits:
            raise KeyError(f"dataset has no {name!r} split")
        idx = self.splits[name]
        if len(idx) == 0:
            raise ValueError(f"split {name!r} is empty")
        return self.images[idx], self.labels[idx], idx


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------

def read_idx(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_idx(fh.read())


def decode_idx(buf: bytes) -> np.ndarray:
    if len(buf) < 4:
        raise FormatError("truncated IDX header")
    zero0, zero1, dtype, ndim = buf[0], buf[1], buf[2], buf[3]
    if zero0 or zero1:
        raise FormatError(f"bad IDX magic {buf[:4].hex()}")
    if dtype != IDX_UBYTE:
        raise FormatError(f"unsupported IDX dtype 0x{dtype:02x}; only unsigned byte is accepted")
    if ndim < 1:
        raise FormatError("IDX file declares zero dimensions")
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise FormatError("truncated IDX dimension table")
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    count = int(np.prod(dims))
    if len(buf) - header != count:
        kind = "truncated" if len(buf) - header < count else "oversized"
        raise FormatError(f"{kind} IDX payload: expected {count} bytes, found {len(buf) - header}")
    return np.frombuffer(buf, dtype=np.uint8, offset=header).reshape(dims)


def encode_idx(arr) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise FormatError(f"IDX writer only supports uint8, got {arr.dtype}")
    head = bytes([0, 0, IDX_UBYTE, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr).tobytes()


def write_idx(path, arr):
    with open(path, "wb") as fh:
        fh.write(encode_idx(arr))


def load_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    """Read an image/label IDX pair; pixels are scaled to [0, 1]."""
    with open(images_path, "rb") as fh:
        raw_images = fh.read()
    with open(labels_path, "rb") as fh:
        raw_labels = fh.read()
    images = decode_idx(raw_images)
    labels = decode_idx(raw_labels)
    if images.ndim not in (3, 4):
        raise FormatError(f"image file must have 3 (N,H,W) or 4 (N,H,W,C) dims, got {images.ndim}")
    if labels.ndim != 1:
        raise FormatError(f"label file must have 1 dim, got {labels.ndim}")
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"image count {images.shape[0]} != label count {labels.shape[0]}")
    if images.ndim == 3:
        images = images[..., None]
    k = int(labels.max()) + 1 if num_classes is None else num_classes
    return Dataset(images.astype(np.float64) / 255.0, labels.astype(np.int64), k)


def save_idx_dataset(ds: Dataset, images_path, labels_path):
    """Write images (quantized to bytes) and labels; inverse of :func:`load_idx`."""
    q = np.rint(np.clip(ds.images, 0.0, 1.0) * 255.0).astype(np.uint8)
    if q.shape[-1] == 1:
        q = q[..., 0]
    write_idx(images_path, q)
    write_idx(labels_path, ds.labels.astype(np.uint8))


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def bilinear_resize(image, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centred bilinear resampling with edge clamping."""
    image = np.asarray(image, dtype=np.float64)
    H, W = image.shape[:2]

    def coords(n_out, n_in):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    r0, r1, fr = coords(out_h, H)
    c0, c1, fc = coords(out_w, W)
    fr = fr[:, None, None]
    fc = fc[None, :, None]
    top = image[r0][:, c0] * (1 - fc) + image[r0][:, c1] * fc
    bot = image[r1][:, c0] * (1 - fc) + image[r1][:, c1] * fc
    return top * (1 - fr) + bot * fr


def preprocess(image, target, mean) -> np.ndarray:
    """Scale so the short side fits ``target``, centre-crop to it, subtract the channel mean."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ShapeError(f"image must be H x W x C, got {image.shape}")
    th, tw = (int(t) for t in target)
    if th < 1 or tw < 1:
        raise ValueError(f"degenerate target size {target}")
    H, W, C = image.shape
    if (H, W) != (th, tw):
        scale = max(th / H, tw / W)
        nh, nw = max(th, int(round(H * scale))), max(tw, int(round(W * scale)))
        if (nh, nw) != (H, W):
            image = bilinear_resize(image, nh, nw)
        top, left = (nh - th) // 2, (nw - tw) // 2
        image = image[top:top + th, left:left + tw]
    mean = np.broadcast_to(np.asarray(mean, dtype=np.float64), (C,))
    return image - mean


def assign_splits(labels, fractions=(0.6, 0.2, 0.2), seed=0) -> dict[str, np.ndarray]:
    """Stratified, disjoint and exhaustive train/val/test assignment."""
    labels = np.asarray(labels)
    fractions = np.asarray(fractions, dtype=np.float64)
    if fractions.shape != (3,) or np.any(fractions < 0) or not np.isclose(fractions.sum(), 1.0):
        raise ValueError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    rng = np.random.default_rng([seed, 7919])
    parts = {name: [] for name in SPLITS}
    for k in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == k))
        n_train = int(round(fractions[0] * len(idx)))
        n_val = int(round(fractions[1] * len(idx)))
        parts["train"].append(idx[:n_train])
        parts["val"].append(idx[n_train:n_train + n_val])
        parts["test"].append(idx[n_train + n_val:])
    return {name: np.sort(np.concatenate(p)).astype(np.int64) for name, p in parts.items()}


def prepare(ds: Dataset, target=None, fractions=(0.6, 0.2, 0.2), seed=0) -> Dataset:
    """Split ``ds`` and apply preprocessing with the mean taken over the train split."""
    splits = ds.splits or assign_splits(ds.labels, fractions, seed)
    target = tuple(ds.image_shape[:2]) if target is None else tuple(int(t) for t in target)
    resized = np.stack([preprocess(img, target, 0.0) for img in ds.images]) if len(ds) else ds.images
    mean = resized[splits["train"]].mean(axis=(0, 1, 2))
    images = resized - mean
    record = {"target": list(target), "mean": [float(m) for m in mean]}
    return Dataset(images, ds.labels, ds.num_classes, splits, record)


# ---------------------------------------------------------------------------
# synthetic coarse x fine task
# ---------------------------------------------------------------------------

@dataclass
class SynthTaskConfig:
    """Coarse classes differ in blob arrangement, fine classes in the texture inside the blobs."""

    size: int = 32
    k_coarse: int = 4
    k_fine: int = 4
    per_class: int = 40
    noise: float = 0.1
    jitter: bool = True
    blob_frac: float = 0.35
    seed: int = 0

    def __post_init__(self):
        if self.k_coarse < 1 or self.k_fine < 1 or self.k_coarse * self.k_fine < 2:
            raise ValueError("need k_coarse * k_fine >= 2")
        if self.k_coarse > len(LAYOUTS) or self.k_fine > len(TEXTURES):
            raise ValueError(f"at most {len(LAYOUTS)} coarse and {len(TEXTURES)} fine classes are defined")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        if self.size < 8:
            raise ValueError("image size below 8 px cannot render the textures")
        if self.per_class < 1:
            raise ValueError("per_class must be positive")
        if not 0 < self.blob_frac <= 0.4:
            raise ValueError("blob_frac must lie in (0, 0.4]")

    @property
    def num_classes(self):
        return self.k_coarse * self.k_fine


# Blob centres in units of one blob side, relative to the layout origin.
# Two-blob layouts first; the three-blob ones use smaller blobs so every
# layout covers roughly the same area.
LAYOUTS = (
    ((0.0, 0.0), (0.0, 1.5)),   # side by side
    ((0.0, 0.0), (1.5, 0.0)),   # stacked
    ((0.0, 0.0), (1.5, 1.5)),   # diagonal
    ((1.5, 0.0), (0.0, 1.5)),   # anti-diagonal
    ((0.0, 0.0), (0.0, 1.5), (0.0, 3.0)),
    ((0.0, 0.0), (1.5, 0.0), (3.0, 0.0)),
)


def _texture(kind, h, w, phase):
    r = np.arange(h)[:, None] + phase[0]
    c = np.arange(w)[None, :] + phase[1]
    if kind == 0:
        t = (r // 1) % 2
    elif kind == 1:
        t = (c // 1) % 2
    elif kind == 2:
        t = (r + c) % 2
    elif kind == 3:
        t = ((r + c) // 2) % 2
    elif kind == 4:
        t = (r // 2) % 2
    else:
        t = (c // 2) % 2
    return np.broadcast_to(2.0 * t - 1.0, (h, w))


TEXTURES = tuple(range(6))


def _render(layout, texture, size, rng, jitter, blob_frac):
    """One image: textured blobs in a layout, on a zero background.

    With ``jitter`` the whole arrangement is shifted cyclically by a uniform
    random offset, so absolute position carries no class information and only
    the relative placement of the blobs does.
    """
    n_blobs = len(LAYOUTS[layout])
    frac = blob_frac if n_blobs == 2 else blob_frac * 0.8
    # a whole number of texture periods per blob: every texture then averages
    # exactly 0.5 over a blob, whatever its phase
    side = max(4, 4 * int(round(size * frac / 4)))
    offsets = np.array(LAYOUTS[layout])
    extent = (offsets.max(axis=0) * side).astype(int) + side
    origin = np.maximum(size - extent, 0) // 2
    img = np.zeros((size, size))
    phase = rng.integers(0, 4, size=2)
    tex = _texture(texture, size, size, phase)
    for dy, dx in offsets:
        top, left = origin[0] + int(dy * side), origin[1] + int(dx * side)
        img[top:top + side, left:left + side] = 0.5 + 0.35 * tex[top:top + side, left:left + side]
    if jitter:
        img = np.roll(img, tuple(int(v) for v in rng.integers(0, size, size=2)), axis=(0, 1))
    return img


def synth_multiscale(config: SynthTaskConfig, fractions=(0.6, 0.2, 0.2)) -> Dataset:
    """Generate the balanced coarse x fine task; label = coarse * k_fine + fine.

    Pixels are quantized to multiples of 1/255 so the set survives an IDX
    round-trip unchanged.
    """
    rng = np.random.default_rng([config.seed, 104729])
    K = config.num_classes
    n = K * config.per_class
    labels = np.repeat(np.arange(K), config.per_class)
    images = np.empty((n, config.size, config.size, 1))
    for i, y in enumerate(labels):
        coarse, fine = divmod(int(y), config.k_fine)
        img = _render(coarse, fine, config.size, rng, config.jitter, config.blob_frac)
        if config.noise > 0:
            img = img + rng.normal(0.0, config.noise, size=img.shape)
        images[i, :, :, 0] = np.rint(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    splits = assign_splits(labels, fractions, config.seed)
    return Dataset(images, labels, K, splits, {"synthetic": {
        "size": config.size, "k_coarse": config.k_coarse, "k_fine": config.k_fine,
        "per_class": config.per_class, "noise": config.noise, "jitter": config.jitter,
        "blob_frac": config.blob_frac, "seed": config.seed,
    }})
