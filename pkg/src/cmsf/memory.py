"""FIFO memory bank of target embeddings plus the previous-pass cache used
to build the auxiliary (second-view) bank.

The bank holds, per entry: the unit-norm target embedding, the dataset index
it came from, the true label (-1 when unknown), and an optional pseudo label
with its confidence. Entries leave strictly first-in-first-out; the epoch
cache absorbs embeddings only as they are evicted, so within a single pass
over the data the cache never contains an embedding computed during that
same pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import UNLABELED


class BankError(ValueError):
    pass


@dataclass
class BankView:
    """Immutable snapshot in insertion order (oldest first). Row r is the
    bank "position" used for deterministic tie-breaking in selection."""

    embeddings: np.ndarray        # (n, D)
    dataset_indices: np.ndarray   # (n,) int64
    labels: np.ndarray            # (n,) int64, UNLABELED when unknown
    pseudo_labels: np.ndarray     # (n,) int64, UNLABELED when unset
    pseudo_conf: np.ndarray       # (n,) float64 in [0, 1]

    @property
    def size(self) -> int:
        return self.embeddings.shape[0]


@dataclass
class EvictedBatch:
    embeddings: np.ndarray
    dataset_indices: np.ndarray
    labels: np.ndarray
    pseudo_labels: np.ndarray
    pseudo_conf: np.ndarray

    @property
    def size(self) -> int:
        return self.embeddings.shape[0]


class MemoryBank:
    """Fixed-capacity FIFO ring over target embeddings."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1 or dim < 1:
            raise BankError(f"capacity and dim must be >= 1, got {capacity}, {dim}")
        self.capacity = capacity
        self.dim = dim
        self.count = 0
        self._next = 0
        self._emb = np.zeros((capacity, dim))
        self._didx = np.zeros(capacity, dtype=np.int64)
        self._lab = np.full(capacity, UNLABELED, dtype=np.int64)
        self._plab = np.full(capacity, UNLABELED, dtype=np.int64)
        self._pconf = np.zeros(capacity)

    @property
    def start(self) -> int:
        return (self._next - self.count) % self.capacity

    def push(self, embeddings: np.ndarray, dataset_indices: np.ndarray,
             labels: np.ndarray | None = None,
             pseudo_labels: np.ndarray | None = None,
             pseudo_conf: np.ndarray | None = None) -> EvictedBatch:
        """Insert a batch, evicting the oldest entries when full.

        Returns the evicted entries (possibly empty); callers feed these to
        the EpochCache. Batch size must not exceed capacity.
        """
        embeddings = np.asarray(embeddings, dtype=np.float64)
        b = embeddings.shape[0]
        if b > self.capacity:
            raise BankError(f"batch {b} exceeds capacity {self.capacity}")
        if embeddings.ndim != 2 or embeddings.shape[1] != self.dim:
            raise BankError(f"embeddings {embeddings.shape} vs dim {self.dim}")
        dataset_indices = np.asarray(dataset_indices, dtype=np.int64)
        if dataset_indices.shape != (b,):
            raise BankError("dataset_indices length must match batch")
        labels = self._coerce(labels, b, UNLABELED, np.int64)
        pseudo_labels = self._coerce(pseudo_labels, b, UNLABELED, np.int64)
        pseudo_conf = self._coerce(pseudo_conf, b, 0.0, np.float64)

        n_evict = max(0, self.count + b - self.capacity)
        if n_evict:
            slots = (self.start + np.arange(n_evict)) % self.capacity
            evicted = EvictedBatch(self._emb[slots].copy(), self._didx[slots].copy(),
                                   self._lab[slots].copy(), self._plab[slots].copy(),
                                   self._pconf[slots].copy())
        else:
            evicted = EvictedBatch(np.zeros((0, self.dim)), np.zeros(0, dtype=np.int64),
                                   np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64),
                                   np.zeros(0))
        write = (self._next + np.arange(b)) % self.capacity
        self._emb[write] = embeddings
        self._didx[write] = dataset_indices
        self._lab[write] = labels
        self._plab[write] = pseudo_labels
        self._pconf[write] = pseudo_conf
        self._next = (self._next + b) % self.capacity
        self.count = min(self.capacity, self.count + b)
        return evicted

    @staticmethod
    def _coerce(arr, b: int, fill, dtype) -> np.ndarray:
        if arr is None:
            return np.full(b, fill, dtype=dtype)
        arr = np.asarray(arr, dtype=dtype)
        if arr.shape != (b,):
            raise BankError(f"per-entry array shape {arr.shape} != ({b},)")
        return arr

    def snapshot(self) -> BankView:
        order = (self.start + np.arange(self.count)) % self.capacity
        return BankView(self._emb[order].copy(), self._didx[order].copy(),
                        self._lab[order].copy(), self._plab[order].copy(),
                        self._pconf[order].copy())


class EpochCache:
    """Per-dataset-index embedding cache fed exclusively by bank evictions.

    Because an entry must age out of the bank before it lands here, reading
    the cache during pass p only ever yields embeddings computed in pass p-1
    or earlier (the bank outlives a full pass whenever capacity >= batch
    count per pass, and otherwise still delays reuse by the bank's length).
    """

    def __init__(self, dataset_size: int, dim: int):
        if dataset_size < 1 or dim < 1:
            raise BankError("dataset_size and dim must be >= 1")
        self.embs = np.zeros((dataset_size, dim))
        self.present = np.zeros(dataset_size, dtype=bool)

    def absorb(self, evicted: EvictedBatch) -> None:
        if evicted.size == 0:
            return
        idx = evicted.dataset_indices
        if idx.min() < 0 or idx.max() >= self.embs.shape[0]:
            raise BankError("evicted dataset index out of range")
        self.embs[idx] = evicted.embeddings
        self.present[idx] = True

    @property
    def fill_count(self) -> int:
        return int(self.present.sum())


def build_aux_bank(view: BankView, cache: EpochCache) -> tuple[np.ndarray, np.ndarray]:
    """Auxiliary bank aligned 1:1 with the main bank snapshot.

    Row j is the cached earlier-pass embedding of the same dataset element
    when available, else falls back to the main-bank embedding itself (so a
    cold cache makes the auxiliary space identical to the main one).
    Returns (aux_embeddings, from_cache_mask).
    """
    out = view.embeddings.copy()
    if view.size == 0:
        return out, np.zeros(0, dtype=bool)
    mask = cache.present[view.dataset_indices]
    src = view.dataset_indices[mask]
    out[mask] = cache.embs[src]
    return out, mask
