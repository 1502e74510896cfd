"""Synthetic datasets, label-noise injection, embedding-space augmentations,
and dataset file I/O.

Datasets are desk-scale stand-ins for large labeled image corpora: Gaussian
mixtures (optionally with a two-level class hierarchy), a noise injector that
corrupts an exact fraction of labels, and stochastic augmentations (scale /
additive noise / coordinate dropout) that play the role of the two image
views fed to the encoder pair.

In-memory labels use -1 as the "unlabeled" sentinel. The binary file format
stores labels as u32 with 0xFFFFFFFF for unlabeled; CSV uses -1.
"""

from __future__ import annotations

import csv
import os
import struct
from dataclasses import dataclass

import numpy as np

from .core import EPS_NORM

UNLABELED = -1
_FILE_UNLABELED = 0xFFFFFFFF
_MAGIC = b"CMSF"
_VERSION = 1


class BadConfig(ValueError):
    pass


class NoLabels(ValueError):
    pass


class DegenerateOutput(ValueError):
    pass


class ParseError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


class MagicMismatch(ParseError):
    pass


class VersionUnsupported(ParseError):
    pass


@dataclass
class Dataset:
    """N samples of dimension D with integer class labels.

    coarse_labels, when present, give a superclass id per sample consistent
    with a subclass->superclass map (used by the hierarchical generator).
    """

    samples: np.ndarray            # (N, D) float64
    labels: np.ndarray             # (N,) int64, UNLABELED for missing
    num_classes: int
    coarse_labels: np.ndarray | None = None
    name: str = "dataset"

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.samples.ndim != 2 or self.samples.shape[0] < 1 or self.samples.shape[1] < 2:
            raise BadConfig(f"samples must be (N>=1, D>=2), got {self.samples.shape}")
        if self.labels.shape != (self.samples.shape[0],):
            raise BadConfig("labels length must match N")
        labeled = self.labels != UNLABELED
        if np.any((self.labels[labeled] < 0) | (self.labels[labeled] >= self.num_classes)):
            raise BadConfig("labels out of range")
        if self.coarse_labels is not None:
            self.coarse_labels = np.asarray(self.coarse_labels, dtype=np.int64)
            if self.coarse_labels.shape != self.labels.shape:
                raise BadConfig("coarse_labels length must match N")

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def labeled_mask(self) -> np.ndarray:
        return self.labels != UNLABELED

    def equal(self, other: "Dataset") -> bool:
        same = (
            np.array_equal(self.samples, other.samples)
            and np.array_equal(self.labels, other.labels)
            and self.num_classes == other.num_classes
        )
        if not same:
            return False
        if (self.coarse_labels is None) != (other.coarse_labels is None):
            return False
        if self.coarse_labels is not None:
            return np.array_equal(self.coarse_labels, other.coarse_labels)
        return True


@dataclass
class AugmentSpec:
    """Stochastic embedding-space view: scale by s~U(lo,hi), add N(0, sigma^2)
    per coordinate, then zero each coordinate independently w.p. dropout_p."""

    gaussian_sigma: float = 0.1
    dropout_p: float = 0.1
    scale_range: tuple[float, float] = (0.8, 1.2)

    def __post_init__(self):
        lo, hi = self.scale_range
        if self.gaussian_sigma < 0 or not (0 <= self.dropout_p < 1) or not (0 < lo <= hi):
            raise BadConfig(f"invalid augment spec {self}")

    @staticmethod
    def identity() -> "AugmentSpec":
        return AugmentSpec(0.0, 0.0, (1.0, 1.0))


def _spread_means(raw: np.ndarray, min_sep: float) -> np.ndarray:
    """Rescale candidate means so the closest pair is exactly min_sep apart.

    Scaling both ways makes the separation parameter an exact knob for how
    much neighboring clusters overlap (unit sample noise is fixed).
    """
    k = raw.shape[0]
    if k == 1:
        return raw
    dists = np.linalg.norm(raw[:, None, :] - raw[None, :, :], axis=2)
    np.fill_diagonal(dists, np.inf)
    closest = float(dists.min())
    if closest <= 0:
        raise BadConfig("degenerate coincident cluster means")
    return raw * (min_sep / closest)


def gen_mixture(num_classes: int, per_class: int, dim: int, cluster_sep: float,
                rng: np.random.Generator, name: str = "mixture") -> Dataset:
    """Gaussian mixture with class means mutually >= cluster_sep apart.

    Samples are rounded to float32 precision so that dataset files (which
    store f32) round-trip bit-identically.
    """
    if num_classes < 2 or per_class < 1 or dim < 2 or cluster_sep <= 0:
        raise BadConfig("need >= 2 classes, per_class >= 1, dim >= 2, cluster_sep > 0")
    means = _spread_means(rng.normal(size=(num_classes, dim)), cluster_sep)
    n = num_classes * per_class
    points = rng.normal(size=(n, dim))
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), per_class)
    points += means[labels]
    points = points.astype(np.float32).astype(np.float64)
    return Dataset(points, labels, num_classes, name=name)


def gen_hierarchical(num_super: int, sub_per_super: int, per_sub: int, dim: int,
                     rng: np.random.Generator, name: str = "hierarchical") -> Dataset:
    """Two-level mixture: subcluster means sampled near their supercluster mean.

    labels = fine subclass ids, coarse_labels = superclass ids. The sub-to-super
    map is surjective by construction (sub id s belongs to super s // sub_per_super).
    """
    if min(num_super, sub_per_super, per_sub) < 1 or dim < 2:
        raise BadConfig("all counts must be >= 1 and dim >= 2")
    super_means = _spread_means(rng.normal(size=(num_super, dim)), 12.0)
    # offsets large vs the unit sample noise so fine classes stay separable
    sub_means = (super_means[:, None, :] + 2.5 * rng.normal(size=(num_super, sub_per_super, dim))).reshape(
        num_super * sub_per_super, dim)
    n = num_super * sub_per_super * per_sub
    fine = np.repeat(np.arange(num_super * sub_per_super, dtype=np.int64), per_sub)
    points = sub_means[fine] + rng.normal(size=(n, dim))
    points = points.astype(np.float32).astype(np.float64)
    coarse = fine // sub_per_super
    return Dataset(points, fine, num_super * sub_per_super, coarse_labels=coarse, name=name)


def inject_label_noise(d: Dataset, rate: float, rng: np.random.Generator) -> Dataset:
    """Redraw the labels of exactly round(rate * N) uniformly chosen samples.

    Each corrupted label is drawn uniformly from the *other* classes, so every
    changed label actually differs from the original. Returns a new dataset.
    """
    if not (0.0 <= rate <= 1.0):
        raise BadConfig(f"rate {rate} outside [0, 1]")
    if not np.all(d.labeled_mask()):
        raise NoLabels("label noise requires a fully labeled dataset")
    if d.num_classes < 2:
        raise NoLabels("need at least 2 classes to corrupt labels")
    count = int(round(rate * d.n))
    chosen = rng.choice(d.n, size=count, replace=False)
    labels = d.labels.copy()
    # uniform over the other classes: draw in [0, C-2] and skip the original
    draws = rng.integers(0, d.num_classes - 1, size=count)
    newlab = np.where(draws >= labels[chosen], draws + 1, draws)
    labels[chosen] = newlab
    return Dataset(d.samples.copy(), labels, d.num_classes,
                   coarse_labels=None if d.coarse_labels is None else d.coarse_labels.copy(),
                   name=d.name + f"+noise{rate:g}")


def _augment_once(X: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    n, d = X.shape
    lo, hi = spec.scale_range
    s = rng.uniform(lo, hi, size=(n, 1))
    out = s * X
    if spec.gaussian_sigma > 0:
        out = out + spec.gaussian_sigma * rng.normal(size=(n, d))
    if spec.dropout_p > 0:
        out = out * (rng.uniform(size=(n, d)) >= spec.dropout_p)
    return out


def augment_batch(X: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    """Apply the augmentation to each row; degenerate rows are retried once."""
    X = np.asarray(X, dtype=np.float64)
    out = _augment_once(X, spec, rng)
    norms = np.linalg.norm(out, axis=1)
    bad = norms <= EPS_NORM
    if np.any(bad):
        retry = _augment_once(X[bad], spec, rng)
        rnorms = np.linalg.norm(retry, axis=1)
        if np.any(rnorms <= EPS_NORM):
            raise DegenerateOutput("augmentation produced a near-zero vector twice")
        out[bad] = retry
    return out


def augment(x: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    """Single-vector convenience wrapper around augment_batch."""
    return augment_batch(np.asarray(x, dtype=np.float64)[None, :], spec, rng)[0]


# ---------------------------------------------------------------------------
# file formats

def save_dataset(d: Dataset, path) -> None:
    """Binary format: magic 'CMSF', u32 version, u64 N, u32 D, u32 num_classes,
    u8 has_coarse, N*D little-endian f32 samples, N u32 labels,
    then N u32 coarse labels if has_coarse."""
    with open(path, "wb") as f:
        has_coarse = d.coarse_labels is not None
        f.write(_MAGIC)
        f.write(struct.pack("<IQII B", _VERSION, d.n, d.dim, d.num_classes, int(has_coarse)))
        f.write(d.samples.astype("<f4").tobytes())
        lab = np.where(d.labels == UNLABELED, _FILE_UNLABELED, d.labels).astype("<u4")
        f.write(lab.tobytes())
        if has_coarse:
            f.write(d.coarse_labels.astype("<u4").tobytes())


def _read_exact(f, size: int, what: str) -> bytes:
    buf = f.read(size)
    if len(buf) != size:
        raise ParseError(f"truncated file while reading {what}", f.tell())
    return buf


def load_dataset(path, name: str | None = None) -> Dataset:
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != _MAGIC:
            raise MagicMismatch(f"bad magic {magic!r}", 0)
        version, n, dim, num_classes, has_coarse = struct.unpack(
            "<IQII B", _read_exact(f, struct.calcsize("<IQII B"), "header"))
        if version != _VERSION:
            raise VersionUnsupported(f"unsupported version {version}", 4)
        samples = np.frombuffer(_read_exact(f, 4 * n * dim, "samples"), dtype="<f4")
        samples = samples.reshape(n, dim).astype(np.float64)
        labels = np.frombuffer(_read_exact(f, 4 * n, "labels"), dtype="<u4").astype(np.int64)
        labels[labels == _FILE_UNLABELED] = UNLABELED
        coarse = None
        if has_coarse:
            coarse = np.frombuffer(_read_exact(f, 4 * n, "coarse labels"), dtype="<u4").astype(np.int64)
        trailing = f.read(1)
        if trailing:
            raise ParseError("trailing bytes after dataset payload", f.tell() - 1)
    return Dataset(samples, labels, num_classes, coarse_labels=coarse,
                   name=name or os.path.splitext(os.path.basename(str(path)))[0])


def save_csv(d: Dataset, path) -> None:
    """Convenience CSV: header f0..f{D-1},label; -1 marks unlabeled.

    The canonical format is the binary one; CSV drops coarse labels and
    relies on repr round-tripping of the (f32-precision) sample values.
    """
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([f"f{i}" for i in range(d.dim)] + ["label"])
        for row, lab in zip(d.samples, d.labels):
            w.writerow([repr(float(v)) for v in row] + [int(lab)])


def load_csv(path, num_classes: int | None = None, name: str | None = None) -> Dataset:
    with open(path, newline="") as f:
        r = csv.reader(f)
        try:
            header = next(r)
        except StopIteration:
            raise ParseError("empty CSV", 0) from None
        if header[-1] != "label" or not all(h == f"f{i}" for i, h in enumerate(header[:-1])):
            raise ParseError(f"unexpected CSV header {header!r}", 0)
        dim = len(header) - 1
        rows, labels = [], []
        for lineno, row in enumerate(r, start=2):
            if len(row) != dim + 1:
                raise ParseError(f"row {lineno} has {len(row)} fields, expected {dim + 1}", lineno)
            try:
                rows.append([float(v) for v in row[:dim]])
                labels.append(int(row[dim]))
            except ValueError as e:
                raise ParseError(f"row {lineno}: {e}", lineno) from None
    samples = np.array(rows, dtype=np.float64)
    labels = np.array(labels, dtype=np.int64)
    if num_classes is None:
        labeled = labels[labels != UNLABELED]
        num_classes = int(labeled.max()) + 1 if labeled.size else 0
    return Dataset(samples, labels, num_classes,
                   name=name or os.path.splitext(os.path.basename(str(path)))[0])


def split_dataset(d: Dataset, test_fraction: float, rng: np.random.Generator
                  ) -> tuple[Dataset, Dataset]:
    """Random train/test split of one dataset (same mixture for both sides)."""
    if not (0 < test_fraction < 1):
        raise BadConfig("test_fraction must be in (0, 1)")
    perm = rng.permutation(d.n)
    n_test = max(1, int(round(test_fraction * d.n)))
    test_idx = np.sort(perm[:n_test])
    train_idx = np.sort(perm[n_test:])

    def _take(idx, suffix):
        return Dataset(d.samples[idx].copy(), d.labels[idx].copy(), d.num_classes,
                       coarse_labels=None if d.coarse_labels is None else d.coarse_labels[idx].copy(),
                       name=d.name + suffix)

    return _take(train_idx, "+train"), _take(test_idx, "+test")


def mask_labels(d: Dataset, labeled_fraction: float, rng: np.random.Generator) -> Dataset:
    """Keep labels for a uniformly chosen fraction of samples, hide the rest.

    Used to build semi-supervised splits; the returned dataset has UNLABELED
    everywhere outside the kept subset.
    """
    if not (0 < labeled_fraction <= 1):
        raise BadConfig("labeled_fraction must be in (0, 1]")
    keep = rng.choice(d.n, size=max(1, int(round(labeled_fraction * d.n))), replace=False)
    labels = np.full(d.n, UNLABELED, dtype=np.int64)
    labels[keep] = d.labels[keep]
    return Dataset(d.samples.copy(), labels, d.num_classes,
                   coarse_labels=None if d.coarse_labels is None else d.coarse_labels.copy(),
                   name=d.name + f"+labels{labeled_fraction:g}")
