"""MNIST / Fashion-MNIST loading from IDX files and reproducible splitting.

Pixels are mapped to ``v / 255`` and nothing else, so first-layer inputs
stay nonnegative.  Splits are drawn with a SplitMix64 Fisher-Yates shuffle,
which makes them identical on every machine for a given seed.
"""

from __future__ import annotations

import gzip
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import LabelOutOfRange, NotEnoughData, Truncated, WrongMagic

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
N_CLASSES = 10

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class ImageSet:
    pixels: np.ndarray  # (count, rows, cols), float64 in [0, 1]

    def __post_init__(self):
        if self.pixels.ndim != 3:
            raise ValueError(f"pixels must be 3-D, got shape {self.pixels.shape}")
        self.pixels.setflags(write=False)

    @property
    def count(self) -> int:
        return self.pixels.shape[0]

    @property
    def rows(self) -> int:
        return self.pixels.shape[1]

    @property
    def cols(self) -> int:
        return self.pixels.shape[2]


@dataclass(frozen=True)
class LabelSet:
    labels: np.ndarray  # (count,), int64 in [0, 9]

    def __post_init__(self):
        self.labels.setflags(write=False)

    @property
    def count(self) -> int:
        return self.labels.shape[0]


@dataclass(frozen=True)
class DataSplit:
    train: tuple[ImageSet, LabelSet]
    val: tuple[ImageSet, LabelSet]
    seed: int
    train_idx: np.ndarray
    val_idx: np.ndarray


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _header(raw: bytes, n_words: int, magic: int, path) -> tuple[int, ...]:
    if len(raw) >= 4:
        (found,) = struct.unpack(">I", raw[:4])
        if found != magic:
            raise WrongMagic(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    if len(raw) < 4 * n_words:
        raise Truncated(f"{path}: header needs {4 * n_words} bytes, file has {len(raw)}")
    return struct.unpack(f">{n_words}I", raw[: 4 * n_words])[1:]


def load_idx_images(path) -> ImageSet:
    raw = _read_bytes(path)
    count, rows, cols = _header(raw, 4, IMAGE_MAGIC, path)
    n = count * rows * cols
    body = raw[16:]
    if len(body) < n:
        raise Truncated(f"{path}: expected {n} pixel bytes, found {len(body)}")
    pix = np.frombuffer(body, dtype=np.uint8, count=n).reshape(count, rows, cols)
    return ImageSet(pix.astype(np.float64) / 255.0)


def load_idx_labels(path) -> LabelSet:
    raw = _read_bytes(path)
    (count,) = _header(raw, 2, LABEL_MAGIC, path)
    body = raw[8:]
    if len(body) < count:
        raise Truncated(f"{path}: expected {count} label bytes, found {len(body)}")
    labels = np.frombuffer(body, dtype=np.uint8, count=count).astype(np.int64)
    if count and labels.max() >= N_CLASSES:
        bad = int(np.argmax(labels >= N_CLASSES))
        raise LabelOutOfRange(f"{path}: label {labels[bad]} at index {bad}")
    return LabelSet(labels)


def idx_image_bytes(images: ImageSet) -> bytes:
    """Serialize an ImageSet back to raw IDX bytes (pixels rounded to the byte grid)."""
    pix = np.rint(np.asarray(images.pixels) * 255.0).astype(np.uint8)
    return struct.pack(">4I", IMAGE_MAGIC, images.count, images.rows, images.cols) + pix.tobytes()


def idx_label_bytes(labels: LabelSet) -> bytes:
    return struct.pack(">2I", LABEL_MAGIC, labels.count) + np.asarray(labels.labels, dtype=np.uint8).tobytes()


def write_idx(path, payload: bytes) -> None:
    path = Path(path)
    if path.suffix == ".gz":
        # mtime=0 keeps the archive byte-stable
        with open(path, "wb") as fh, gzip.GzipFile(fileobj=fh, mode="wb", mtime=0, filename="") as gz:
            gz.write(payload)
    else:
        path.write_bytes(payload)


class SplitMix64:
    """SplitMix64 (Steele, Lea & Flood 2014); used only for dataset splits."""

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def below(self, bound: int) -> int:
        """Unbiased integer in [0, bound) by rejection."""
        limit = (1 << 64) - ((1 << 64) % bound)
        while True:
            r = self.next_u64()
            if r < limit:
                return r % bound


def splitmix_permutation(n: int, seed: int) -> np.ndarray:
    perm = list(range(n))
    rng = SplitMix64(seed)
    for i in range(n - 1, 0, -1):
        j = rng.below(i + 1)
        perm[i], perm[j] = perm[j], perm[i]
    return np.array(perm, dtype=np.int64)


def make_split(images: ImageSet, labels: LabelSet, train_n: int, val_n: int, seed: int) -> DataSplit:
    if images.count != labels.count:
        raise ValueError(f"{images.count} images but {labels.count} labels")
    if train_n < 0 or val_n < 0:
        raise ValueError("split sizes must be nonnegative")
    if train_n + val_n > images.count:
        raise NotEnoughData(f"asked for {train_n} + {val_n} examples, only {images.count} available")
    perm = splitmix_permutation(images.count, seed)
    tr, va = perm[:train_n], perm[train_n: train_n + val_n]

    def take(idx):
        return ImageSet(images.pixels[idx].copy()), LabelSet(labels.labels[idx].copy())

    train = take(tr)
    missing = sorted(set(range(N_CLASSES)) - set(train[1].labels.tolist()))
    if train_n > 0 and missing:
        warnings.warn(f"training split (n={train_n}, seed={seed}) has no examples of classes {missing}")
    return DataSplit(train=train, val=take(va), seed=seed, train_idx=tr, val_idx=va)


_CANDIDATES = {
    "images": ("train-images-idx3-ubyte", "images-idx3-ubyte"),
    "labels": ("train-labels-idx1-ubyte", "labels-idx1-ubyte"),
}


def find_idx_file(data_dir, kind: str) -> Path:
    data_dir = Path(data_dir)
    for stem in _CANDIDATES[kind]:
        for name in (stem, stem + ".gz"):
            if (data_dir / name).is_file():
                return data_dir / name
    names = ", ".join(s + "[.gz]" for s in _CANDIDATES[kind])
    raise FileNotFoundError(f"no IDX {kind} file ({names}) in {data_dir}")


def load_dataset(data_dir) -> tuple[ImageSet, LabelSet]:
    """Load the image/label pair found in ``data_dir``."""
    images = load_idx_images(find_idx_file(data_dir, "images"))
    labels = load_idx_labels(find_idx_file(data_dir, "labels"))
    if images.count != labels.count:
        raise ValueError(f"{data_dir}: {images.count} images but {labels.count} labels")
    return images, labels
