"""Magnitude pruning and the relative-index sparse layer format.

Pruning keeps the weights whose magnitude exceeds a per-layer threshold
chosen to hit a target density, then retrains the survivors under a 0/1
mask.  Surviving entries are stored as gaps to the previous nonzero in
row-major order; a gap wider than the index bit-width can express is
bridged by filler entries that advance the cursor by the maximum gap and
carry the value 0.0.  A stored diff s means a gap of s+1, so b bits cover
gaps 1..2^b and the all-ones diff doubles as the filler's full jump.
"""

from dataclasses import dataclass

import numpy as np

from .errors import CorruptionError
from .mnist import Dataset
from .nets import Network, TrainConfig, sgd_train

DEFAULT_INDEX_BITS = 5  # fully connected layers


@dataclass
class RelativeIndexStream:
    """(diff, value) entries over a flattened row-major layer."""

    bits_per_index: int
    diffs: np.ndarray  # (entries,) uint16, each < 2^bits
    values: np.ndarray  # (entries,) float32, exactly 0.0 on fillers
    fillers: np.ndarray  # (entries,) bool
    logical_length: int

    def __post_init__(self):
        if not 1 <= self.bits_per_index <= 16:
            raise ValueError("bits_per_index must be in 1..16")
        if not (len(self.diffs) == len(self.values) == len(self.fillers)):
            raise ValueError("stream arrays disagree in length")
        if len(self.diffs) and self.diffs.max() >= (1 << self.bits_per_index):
            raise ValueError("stored diff exceeds bit width")
        if np.any(self.values[self.fillers] != 0.0):
            raise ValueError("filler entries must carry value 0.0")

    @property
    def entry_count(self) -> int:
        return len(self.diffs)

    @property
    def filler_count(self) -> int:
        return int(self.fillers.sum())

    def positions(self) -> np.ndarray:
        """Absolute flat positions of all entries (fillers included)."""
        return np.cumsum(self.diffs.astype(np.int64) + 1) - 1


@dataclass
class SparseLayer:
    shape: tuple[int, int]
    stream: RelativeIndexStream
    nnz: int  # genuine (non-filler) entries

    def __post_init__(self):
        rows, cols = self.shape
        if self.stream.logical_length != rows * cols:
            raise ValueError("stream logical_length does not match shape")
        if self.nnz != self.stream.entry_count - self.stream.filler_count:
            raise ValueError("nnz does not match genuine entry count")


def compute_threshold(matrix: np.ndarray, target_density: float) -> float:
    """Magnitude cutoff whose strict exceedance keeps ~target_density of entries.

    The threshold is the largest dropped magnitude; entries tied with it are
    dropped, so the kept fraction can fall below the target only by ties.
    """
    if not 0 < target_density <= 1:
        raise ValueError("target_density must be in (0, 1]")
    mags = np.sort(np.abs(np.asarray(matrix)).ravel())
    n = mags.size
    keep = int(round(target_density * n))
    cut = n - keep
    if cut <= 0:
        lo = float(mags[0])
        return lo / 2 if lo > 0 else 0.0
    return float(mags[cut - 1])


def prune(matrix: np.ndarray, threshold: float) -> np.ndarray:
    """0/1 mask keeping entries with |w| strictly above the threshold."""
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    return (np.abs(matrix) > threshold).astype(np.float32)


def density(mask: np.ndarray) -> float:
    return float(np.count_nonzero(mask)) / mask.size


@dataclass
class PruneConfig:
    target_densities: list[float]
    retrain: TrainConfig

    def __post_init__(self):
        for d in self.target_densities:
            if not 0 < d <= 1:
                raise ValueError("target densities must be in (0, 1]")


def prune_and_retrain(
    net: Network, dataset: Dataset, config: PruneConfig, lr_schedule=None
) -> tuple[Network, list[np.ndarray]]:
    """Threshold each layer to its target density, then retrain under the masks."""
    if len(config.target_densities) != len(net.layers):
        raise ValueError("need one target density per layer")
    masks = []
    for layer, target in zip(net.layers, config.target_densities):
        thr = compute_threshold(layer.weights, target)
        masks.append(prune(layer.weights, thr))
    net, _ = sgd_train(net, dataset, config.retrain, mask=masks, lr_schedule=lr_schedule)
    return net, masks


def encode_relative(matrix: np.ndarray, mask: np.ndarray, bits_per_index: int) -> SparseLayer:
    """Encode the masked matrix as a relative-index stream.

    Walking the row-major flattening with a cursor starting at -1, each
    surviving entry is emitted as its gap from the cursor minus one; while
    the gap exceeds 2^bits a filler (max diff, value 0.0) advances the
    cursor by 2^bits.
    """
    if not 1 <= bits_per_index <= 16:
        raise ValueError("bits_per_index must be in 1..16")
    matrix = np.asarray(matrix)
    if matrix.shape != mask.shape:
        raise ValueError("mask shape does not match matrix")
    rows, cols = matrix.shape
    max_gap = 1 << bits_per_index

    flat_mask = np.ravel(mask) != 0
    positions = np.flatnonzero(flat_mask)
    kept = np.ravel(matrix)[positions].astype(np.float32)

    prev = np.concatenate(([-1], positions[:-1]))
    gaps = positions - prev
    fillers_before = (gaps - 1) // max_gap  # whole max_gap jumps bridged first
    residual = gaps - fillers_before * max_gap  # in 1..max_gap

    total = int(positions.size + fillers_before.sum())
    diffs = np.full(total, max_gap - 1, dtype=np.uint16)
    values = np.zeros(total, dtype=np.float32)
    is_filler = np.ones(total, dtype=bool)

    genuine_at = np.cumsum(fillers_before) + np.arange(positions.size)
    diffs[genuine_at] = (residual - 1).astype(np.uint16)
    values[genuine_at] = kept
    is_filler[genuine_at] = False

    stream = RelativeIndexStream(bits_per_index, diffs, values, is_filler, rows * cols)
    return SparseLayer((rows, cols), stream, int(positions.size))


def decode_relative(layer: SparseLayer) -> np.ndarray:
    """Dense float32 matrix with stream values at their decoded positions."""
    stream = layer.stream
    out = np.zeros(stream.logical_length, dtype=np.float32)
    if stream.entry_count:
        pos = stream.positions()
        if pos[-1] >= stream.logical_length:
            raise CorruptionError(
                f"decoded position {int(pos[-1])} outside layer of {stream.logical_length}"
            )
        out[pos] = stream.values
    return out.reshape(layer.shape)


def csr_storage_count(nnz: int, n_rows: int) -> int:
    """Numbers needed by a classic compressed sparse row layout."""
    return 2 * nnz + n_rows + 1
