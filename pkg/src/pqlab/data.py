"""Dataset loading and generation: IDX files, a synthetic pattern task, elastic deformation."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

DEFAULT_MNIST_DIR = Path(__file__).resolve().parents[2] / "data" / "mnist10k"


class IDXFormatError(ValueError):
    pass


@dataclass
class LabeledImages:
    images: np.ndarray  # N x H x W x C, float32 in [0, 1]
    labels: np.ndarray  # N, int64

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "LabeledImages":
        return LabeledImages(self.images[idx], self.labels[idx])

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1


def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, magic: int, ndim: int, path) -> np.ndarray:
    if len(raw) < 4 + 4 * ndim:
        raise IDXFormatError(f"{path}: truncated header")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise IDXFormatError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(">" + "I" * ndim, raw[4:4 + 4 * ndim])
    body = raw[4 + 4 * ndim:]
    if len(body) != int(np.prod(dims)):
        raise IDXFormatError(f"{path}: payload has {len(body)} bytes, header promises {int(np.prod(dims))}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def load_idx_dataset(images_path, labels_path) -> LabeledImages:
    """Read an IDX image/label file pair (optionally gzip-compressed); pixels scaled to [0, 1]."""
    images = _parse_idx(_read_bytes(images_path), IMAGE_MAGIC, 3, images_path)
    labels = _parse_idx(_read_bytes(labels_path), LABEL_MAGIC, 1, labels_path)
    if len(images) != len(labels):
        raise IDXFormatError(f"{len(images)} images but {len(labels)} labels")
    return LabeledImages((images.astype(np.float32) / 255.0)[..., None], labels.astype(np.int64))


def load_mnist(directory=None, train_size: int | None = None, test_size: int | None = None):
    """Load the train/test IDX pairs under ``directory`` (the bundled 10k subset by default)."""
    d = Path(directory) if directory else DEFAULT_MNIST_DIR

    def find(stem):
        for name in (stem, stem + ".gz"):
            if (d / name).exists():
                return d / name
        raise FileNotFoundError(d / stem)

    train = load_idx_dataset(find("train-images-idx3-ubyte"), find("train-labels-idx1-ubyte"))
    test = load_idx_dataset(find("t10k-images-idx3-ubyte"), find("t10k-labels-idx1-ubyte"))
    if train_size is not None:
        train = train.subset(slice(0, train_size))
    if test_size is not None:
        test = test.subset(slice(0, test_size))
    return train, test


def write_idx(path, array: np.ndarray, magic: int) -> None:
    payload = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in array.shape)
    payload += np.asarray(array, dtype=np.uint8).tobytes()
    Path(path).write_bytes(gzip.compress(payload) if str(path).endswith(".gz") else payload)


def synth_dataset(classes: int, size: int, dim: int = 16, seed: int = 0, noise: float = 0.08,
                  trigger_size: int = 6, channels: int = 1) -> LabeledImages:
    """Deterministic K-class task of oriented bars with pixel noise.

    Class ``k`` draws a bar at angle ``pi * k / K`` through a jittered centre. The
    bottom-right ``trigger_size`` square is masked out so no class pattern
    overlaps the trigger footprint.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    labels = np.arange(size) % classes
    rng.shuffle(labels)
    yy, xx = np.mgrid[0:dim, 0:dim].astype(np.float64)
    images = np.empty((size, dim, dim, channels), dtype=np.float32)
    limit = dim - trigger_size
    for i, k in enumerate(labels):
        theta = np.pi * k / classes + rng.normal(0, 0.06)
        cy, cx = (limit / 2.0) + rng.normal(0, 0.8, 2)
        dist = np.abs((yy - cy) * np.cos(theta) - (xx - cx) * np.sin(theta))
        along = np.abs((yy - cy) * np.sin(theta) + (xx - cx) * np.cos(theta))
        bar = np.clip(1.6 - dist, 0, 1) * (along < dim * 0.35)
        img = np.clip(0.85 * bar + rng.normal(0, noise, (dim, dim)), 0, 1)
        img[dim - trigger_size:, dim - trigger_size:] = 0.0
        images[i] = img[..., None].astype(np.float32)
    return LabeledImages(images, labels.astype(np.int64))


def elastic_deform(images: np.ndarray, alpha: float = 34.0, sigma: float = 4.0, seed: int = 0) -> np.ndarray:
    """Random smooth displacement-field warp of NHWC images (Simard-style)."""
    rng = np.random.default_rng(seed)
    n, h, w, c = images.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    out = np.empty_like(images)
    for i in range(n):
        dy = ndimage.gaussian_filter(rng.uniform(-1, 1, (h, w)), sigma) * alpha
        dx = ndimage.gaussian_filter(rng.uniform(-1, 1, (h, w)), sigma) * alpha
        coords = np.array([yy + dy, xx + dx])
        for ch in range(c):
            out[i, :, :, ch] = ndimage.map_coordinates(images[i, :, :, ch], coords, order=1, mode="constant")
    return np.clip(out, 0, 1).astype(images.dtype)


def resize_to(images: np.ndarray, dim: int) -> np.ndarray:
    """Bilinear resize of NHWC images to ``dim x dim``."""
    n, h, w, c = images.shape
    if (h, w) == (dim, dim):
        return images
    zoom = (1, dim / h, dim / w, 1)
    return np.clip(ndimage.zoom(images, zoom, order=1), 0, 1).astype(images.dtype)
