"""MNIST IDX ingestion.

The IDX files are big-endian: images carry magic 0x00000803 (2051) followed
by count, rows, cols and raw unsigned bytes; labels carry magic 0x00000801
(2049) followed by count and one byte per label.  Gzipped files are accepted
transparently so the originals can be stored compressed.
"""

import gzip
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConsistencyError, FormatError

IMAGES_MAGIC = 2051
LABELS_MAGIC = 2049


@dataclass
class Dataset:
    """Flattened samples (pixels scaled to [0,1]) with integer class labels."""

    samples: np.ndarray  # (count, dim) float32
    labels: np.ndarray  # (count,) int64

    def __post_init__(self):
        if self.samples.shape[0] != self.labels.shape[0]:
            raise ConsistencyError(
                f"{self.samples.shape[0]} samples vs {self.labels.shape[0]} labels"
            )

    @property
    def count(self) -> int:
        return self.samples.shape[0]

    def subset(self, n: int, seed: int | None = None) -> "Dataset":
        """First n samples, or a seeded random draw of n when seed is given."""
        if seed is None:
            idx = np.arange(min(n, self.count))
        else:
            idx = np.random.default_rng(seed).permutation(self.count)[:n]
        return Dataset(self.samples[idx], self.labels[idx])


def _read_bytes(path) -> bytes:
    with open(path, "rb") as f:
        head = f.read(2)
        f.seek(0)
        if head == b"\x1f\x8b":
            return gzip.decompress(f.read())
        return f.read()


def _read_idx_images(path) -> np.ndarray:
    raw = _read_bytes(path)
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated IDX image header")
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IMAGES_MAGIC:
        raise FormatError(f"{path}: magic {magic}, expected {IMAGES_MAGIC} for images")
    expected = 16 + count * rows * cols
    if len(raw) != expected:
        raise FormatError(f"{path}: {len(raw)} bytes, expected {expected}")
    pixels = np.frombuffer(raw, dtype=np.uint8, offset=16)
    return pixels.reshape(count, rows * cols)


def _read_idx_labels(path) -> np.ndarray:
    raw = _read_bytes(path)
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated IDX label header")
    magic, count = struct.unpack(">II", raw[:8])
    if magic != LABELS_MAGIC:
        raise FormatError(f"{path}: magic {magic}, expected {LABELS_MAGIC} for labels")
    if len(raw) != 8 + count:
        raise FormatError(f"{path}: {len(raw)} bytes, expected {8 + count}")
    return np.frombuffer(raw, dtype=np.uint8, offset=8)


def load_mnist_idx(images_path, labels_path) -> Dataset:
    """Load an IDX image/label file pair into a Dataset.

    Pixel bytes are scaled by 1/255 into float32; labels must be 0..9.
    """
    images = _read_idx_images(images_path)
    labels = _read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise ConsistencyError(
            f"image count {images.shape[0]} != label count {labels.shape[0]}"
        )
    if labels.size and labels.max() > 9:
        raise ConsistencyError(f"label {labels.max()} out of range 0..9")
    samples = images.astype(np.float32) / np.float32(255.0)
    return Dataset(samples, labels.astype(np.int64))


def write_idx_images(path, images: np.ndarray, rows: int, cols: int) -> None:
    """Write a (count, rows*cols) uint8 array as an IDX image file."""
    images = np.ascontiguousarray(images, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IMAGES_MAGIC, images.shape[0], rows, cols))
        f.write(images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">II", LABELS_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())
