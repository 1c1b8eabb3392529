"""Dataset loading.

Two dataset ids are supported:

* ``mnist`` - the standard IDX files on disk (``train-images-idx3-ubyte`` etc.,
  optionally gzipped), zero-padded from 28x28 to 32x32.
* ``digits`` - a fully self-contained synthetic 10-class digit corpus rendered
  from the DejaVu Sans glyphs bundled with matplotlib, with per-sample affine
  warps, blur and noise. Deterministic given (split, seed, index), so it can
  stand in for MNIST on machines with no dataset downloads.

Images are float32 arrays of shape [N, C, H, W] with values in [-1, 1],
H == W a power of two.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import IngestionError

RESOLUTION = 32
NUM_CLASSES = 10

_TEMPLATE_SIZE = 64
_TEMPLATE_FONT_SIZE = 44


@dataclass
class Dataset:
    """An in-memory labeled image set."""

    images: np.ndarray  # [N, C, H, W] float32 in [-1, 1]
    labels: np.ndarray  # [N] int64
    name: str = "dataset"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be [N, C, H, W], got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels length mismatch")
        n, c, h, w = self.images.shape
        if n > 0:
            if h != w or (h & (h - 1)) != 0 or h < 4:
                raise ValueError(f"resolution must be a power of two >= 4, got {h}x{w}")
            lo, hi = float(self.images.min()), float(self.images.max())
            if lo < -1.0 - 1e-6 or hi > 1.0 + 1e-6:
                raise ValueError(f"pixel values outside [-1, 1]: [{lo}, {hi}]")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def resolution(self) -> int:
        return self.images.shape[2]

    @property
    def channels(self) -> int:
        return self.images.shape[1]

    def subset(self, indices) -> "Dataset":
        return Dataset(self.images[indices], self.labels[indices], name=self.name)


# ---------------------------------------------------------------------------
# Synthetic digit corpus
# ---------------------------------------------------------------------------

_GLYPH_CACHE: dict = {}


def _glyph_templates() -> np.ndarray:
    """Render the ten digit glyphs once at template resolution, centered."""
    if "templates" in _GLYPH_CACHE:
        return _GLYPH_CACHE["templates"]
    import matplotlib
    from PIL import Image, ImageDraw, ImageFont

    font_path = os.path.join(
        matplotlib.get_data_path(), "fonts", "ttf", "DejaVuSans.ttf"
    )
    font = ImageFont.truetype(font_path, _TEMPLATE_FONT_SIZE)
    out = np.zeros((NUM_CLASSES, _TEMPLATE_SIZE, _TEMPLATE_SIZE), dtype=np.float32)
    for d in range(NUM_CLASSES):
        img = Image.new("L", (_TEMPLATE_SIZE, _TEMPLATE_SIZE), 0)
        draw = ImageDraw.Draw(img)
        left, top, right, bottom = draw.textbbox((0, 0), str(d), font=font)
        x = (_TEMPLATE_SIZE - (right - left)) / 2 - left
        y = (_TEMPLATE_SIZE - (bottom - top)) / 2 - top
        draw.text((x, y), str(d), fill=255, font=font)
        out[d] = np.asarray(img, dtype=np.float32) / 255.0
    _GLYPH_CACHE["templates"] = out
    return out


def _render_digit(label: int, rng: np.random.Generator, resolution: int) -> np.ndarray:
    """One augmented digit image in [0, 1] at the target resolution."""
    template = _glyph_templates()[label]

    angle = rng.uniform(-0.22, 0.22)  # radians, ~12.6 degrees
    scale = rng.uniform(0.82, 1.12)
    shear = rng.uniform(-0.12, 0.12)
    shift = rng.uniform(-2.2, 2.2, size=2)  # in output pixels

    # Output -> template coordinates: undo shift/rotation/scale about the center.
    zoom = _TEMPLATE_SIZE / resolution / scale
    cos_a, sin_a = np.cos(angle), np.sin(angle)
    rot = np.array([[cos_a, -sin_a], [sin_a, cos_a]])
    shr = np.array([[1.0, shear], [0.0, 1.0]])
    mat = rot @ shr * zoom
    center_out = np.array([resolution / 2, resolution / 2]) + shift
    center_tpl = np.array([_TEMPLATE_SIZE / 2, _TEMPLATE_SIZE / 2])
    offset = center_tpl - mat @ center_out

    img = ndimage.affine_transform(
        template, mat, offset=offset, output_shape=(resolution, resolution),
        order=1, mode="constant", cval=0.0,
    )
    img = ndimage.gaussian_filter(img, sigma=rng.uniform(0.35, 0.75))
    img *= rng.uniform(0.85, 1.0)  # stroke intensity jitter
    img += rng.normal(0.0, rng.uniform(0.015, 0.05), size=img.shape)
    return np.clip(img, 0.0, 1.0)


def make_digits(
    n: int,
    seed: int = 0,
    split: str = "train",
    resolution: int = RESOLUTION,
    balanced: bool = True,
) -> Dataset:
    """Build the synthetic digit corpus. Deterministic given (n, seed, split)."""
    split_key = {"train": 0, "test": 1, "val": 2}.get(split)
    if split_key is None:
        raise ValueError(f"unknown split {split!r}")
    labels = np.arange(n) % NUM_CLASSES if balanced else None
    images = np.empty((n, 1, resolution, resolution), dtype=np.float32)
    out_labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([seed, split_key, i]))
        label = int(labels[i]) if labels is not None else int(rng.integers(NUM_CLASSES))
        out_labels[i] = label
        images[i, 0] = _render_digit(label, rng, resolution)
    return Dataset(images * 2.0 - 1.0, out_labels, name=f"digits-{split}")


# ---------------------------------------------------------------------------
# MNIST IDX ingestion
# ---------------------------------------------------------------------------

def _open_idx(path: str):
    if os.path.exists(path):
        return open(path, "rb")
    if os.path.exists(path + ".gz"):
        return gzip.open(path + ".gz", "rb")
    raise IngestionError(f"dataset file not found: {path}[.gz]")


def read_idx_images(path: str) -> np.ndarray:
    """Read an IDX3 image file to uint8 [N, H, W]."""
    with _open_idx(path) as f:
        magic, n, rows, cols = struct.unpack(">IIII", f.read(16))
        if magic != 2051:
            raise IngestionError(f"{path}: bad IDX image magic {magic}")
        data = np.frombuffer(f.read(n * rows * cols), dtype=np.uint8)
        if data.size != n * rows * cols:
            raise IngestionError(f"{path}: truncated image payload")
        return data.reshape(n, rows, cols)


def read_idx_labels(path: str) -> np.ndarray:
    """Read an IDX1 label file to int64 [N]."""
    with _open_idx(path) as f:
        magic, n = struct.unpack(">II", f.read(8))
        if magic != 2049:
            raise IngestionError(f"{path}: bad IDX label magic {magic}")
        data = np.frombuffer(f.read(n), dtype=np.uint8)
        if data.size != n:
            raise IngestionError(f"{path}: truncated label payload")
        return data.astype(np.int64)


def load_mnist(root: str, split: str = "train") -> Dataset:
    """Load the IDX MNIST files under ``root``, zero-padded to 32x32."""
    prefix = {"train": "train", "test": "t10k"}.get(split)
    if prefix is None:
        raise ValueError(f"unknown split {split!r}")
    if not os.path.isdir(root):
        raise IngestionError(f"dataset root does not exist: {root}")
    images = read_idx_images(os.path.join(root, f"{prefix}-images-idx3-ubyte"))
    labels = read_idx_labels(os.path.join(root, f"{prefix}-labels-idx1-ubyte"))
    if len(images) != len(labels):
        raise IngestionError(f"{root}: image/label count mismatch")
    n, rows, cols = images.shape
    pad_r, pad_c = RESOLUTION - rows, RESOLUTION - cols
    if pad_r < 0 or pad_c < 0:
        raise IngestionError(f"{root}: images larger than {RESOLUTION}x{RESOLUTION}")
    padded = np.pad(
        images,
        ((0, 0), (pad_r // 2, pad_r - pad_r // 2), (pad_c // 2, pad_c - pad_c // 2)),
    )
    floats = padded.astype(np.float32) / 255.0 * 2.0 - 1.0
    return Dataset(floats[:, None], labels, name=f"mnist-{split}")


# ---------------------------------------------------------------------------
# Registry
# ---------------------------------------------------------------------------

DEFAULT_SIZES = {"digits": {"train": 20000, "test": 4000}}


def load_dataset(
    dataset_id: str,
    split: str = "train",
    root: str | None = None,
    size: int | None = None,
    seed: int = 0,
) -> Dataset:
    """Resolve a dataset id to an in-memory :class:`Dataset`."""
    if dataset_id == "mnist":
        root = root or os.environ.get("FEATRECON_DATA", "data/mnist")
        ds = load_mnist(root, split)
        if size is not None:
            ds = ds.subset(np.arange(min(size, len(ds))))
        return ds
    if dataset_id == "digits":
        n = size if size is not None else DEFAULT_SIZES["digits"][split if split in ("train", "test") else "test"]
        return make_digits(n, seed=seed, split=split)
    raise IngestionError(f"unknown dataset id {dataset_id!r}")
