"""Neighbor selection and the constraint family that restricts it.

Selection is exact top-k by similarity with a deterministic tie rule: equal
similarities are won by the lower bank position. Constraints shrink the
candidate set before selection runs:

  none  - full bank (plain mean-shift grouping)
  sup   - bank entries sharing the query's true label
  self  - top-k' of the query's earlier-pass embedding in an auxiliary bank
  semi  - label match through true or confident pseudo labels, relaxing to
          the full bank when the query's own pseudo label is not confident
  semi_basic - sup for labeled queries, unconstrained for unlabeled ones
  cross - top-k' in a frozen second embedding space

All masks are boolean (batch, bank_size); selection then picks the top-k
inside the mask. When fewer than k candidates are allowed the whole allowed
set is used.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import UNLABELED
from .encoder import Mlp, SgdState, mlp_backward, mlp_forward, mlp_init, sgd_step

MODES = ("none", "self", "sup", "semi", "semi_basic", "cross")


class BadConstraint(ValueError):
    pass


@dataclass
class ConstraintSpec:
    """How neighbor search is constrained during training."""

    mode: str = "none"
    k: int = 5                      # neighbors pulled toward (target included)
    kprime: int | None = 50         # aux-space candidates; None = unconstrained
    conf_threshold: float = 0.85    # pseudo-label confidence gate (semi)
    include_target: bool = True     # query's own target embedding joins the set

    def __post_init__(self):
        if self.mode not in MODES:
            raise BadConstraint(f"unknown mode {self.mode!r}, expected one of {MODES}")
        if self.k < 1:
            raise BadConstraint("k must be >= 1")
        if self.kprime is not None and self.kprime < 1:
            raise BadConstraint("kprime must be >= 1 or None")
        if not (0.0 <= self.conf_threshold <= 1.0):
            raise BadConstraint("conf_threshold must be in [0, 1]")


def unit_sims(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Similarity matrix for already unit-norm rows, clamped to [-1, 1] so no
    bank member can outrank the query's own embedding through rounding."""
    return np.clip(a @ b.T, -1.0, 1.0)


def topk_indices(sims: np.ndarray, k: int, mask: np.ndarray | None = None
                 ) -> tuple[np.ndarray, np.ndarray]:
    """Exact top-k per row: largest sims, ties won by lower column index.

    Returns (indices (B, min(k, n)) padded with -1, sizes (B,)). Row r's
    valid entries indices[r, :sizes[r]] are ordered by (sim desc, index asc).
    A mask row with fewer than k True entries yields all of them.
    """
    sims = np.asarray(sims, dtype=np.float64)
    if sims.ndim != 2:
        raise BadConstraint(f"sims must be 2-d, got {sims.shape}")
    if k < 1:
        raise BadConstraint("k must be >= 1")
    B, n = sims.shape
    work = sims if mask is None else np.where(mask, sims, -np.inf)
    kmax = min(k, n)
    out = np.full((B, kmax), -1, dtype=np.int64)
    sizes = np.zeros(B, dtype=np.int64)
    if n == 0:
        return out, sizes

    if k >= n:
        # small banks: one stable descending sort gives the tie rule for free
        order = np.argsort(-work, axis=1, kind="stable")
        for r in range(B):
            row = order[r]
            valid = row[np.isfinite(work[r, row])] if mask is not None else row
            sizes[r] = valid.size
            out[r, :valid.size] = valid
        return out, sizes

    part = np.argpartition(work, n - k, axis=1)[:, n - k:]
    boundary = np.min(np.take_along_axis(work, part, axis=1), axis=1)
    for r in range(B):
        wr = work[r]
        b = boundary[r]
        if mask is not None:
            allowed = int(mask[r].sum())
            if allowed == 0:
                continue
            if allowed < k:
                chosen = np.flatnonzero(mask[r])
                order = np.lexsort((chosen, -wr[chosen]))
                chosen = chosen[order]
                sizes[r] = chosen.size
                out[r, :chosen.size] = chosen
                continue
        sure = np.flatnonzero(wr > b)
        need = k - sure.size
        if need > 0:
            tied = np.flatnonzero(wr == b)[:need]
            chosen = np.concatenate([sure, tied])
        else:
            chosen = sure
        order = np.lexsort((chosen, -wr[chosen]))
        chosen = chosen[order]
        sizes[r] = chosen.size
        out[r, :chosen.size] = chosen
    return out, sizes


def mask_from_topk(indices: np.ndarray, sizes: np.ndarray, n: int) -> np.ndarray:
    """Boolean (B, n) mask with True at each row's selected indices."""
    B = indices.shape[0]
    mask = np.zeros((B, n), dtype=bool)
    rows = np.repeat(np.arange(B), sizes)
    cols = np.concatenate([indices[r, :sizes[r]] for r in range(B)]) if B else np.zeros(0, dtype=np.int64)
    mask[rows, cols] = True
    return mask


def neighbor_ranks(sims: np.ndarray, indices: np.ndarray, sizes: np.ndarray) -> np.ndarray:
    """1-based rank of each selected index under the unconstrained ordering
    (same tie rule). Padded slots get rank 0."""
    B, n = sims.shape
    ranks = np.zeros(indices.shape, dtype=np.int64)
    for r in range(B):
        for c in range(int(sizes[r])):
            j = indices[r, c]
            s = sims[r, j]
            ranks[r, c] = 1 + int(np.sum(sims[r] > s)) + int(np.sum(sims[r, :j] == s))
    return ranks


# ---------------------------------------------------------------------------
# constraint builders: each returns a (B, n) bool mask or None for "no mask"

def constrain_none(batch: int, bank_size: int) -> None:
    return None


def constrain_sup(query_labels: np.ndarray, bank_labels: np.ndarray) -> np.ndarray:
    """Same true label. Queries must be labeled."""
    query_labels = np.asarray(query_labels, dtype=np.int64)
    if np.any(query_labels == UNLABELED):
        raise BadConstraint("supervised constraint needs labeled queries")
    return query_labels[:, None] == bank_labels[None, :]


def constrain_self(query_aux: np.ndarray, aux_bank: np.ndarray, kprime: int | None
                   ) -> np.ndarray | None:
    """Candidates = top-k' of the query's auxiliary embedding in the
    auxiliary bank. kprime None (or >= bank size) leaves search unconstrained."""
    n = aux_bank.shape[0]
    if kprime is None or kprime >= n:
        return None
    sims = unit_sims(query_aux, aux_bank)
    idx, sizes = topk_indices(sims, kprime)
    return mask_from_topk(idx, sizes, n)


def constrain_semi(query_labels: np.ndarray, query_pseudo: np.ndarray,
                   query_conf: np.ndarray, bank_labels: np.ndarray,
                   bank_pseudo: np.ndarray, bank_conf: np.ndarray,
                   threshold: float) -> tuple[np.ndarray, np.ndarray]:
    """Label-match mask through true or confident pseudo labels.

    A query's effective label is its true label when known, otherwise its
    pseudo label if confident. Bank entries match when their true label
    equals it, or their pseudo label does with confidence >= threshold.
    Queries with no confident label relax to the full bank. Returns
    (mask, relaxed) where relaxed marks the rows that fell back.
    """
    query_labels = np.asarray(query_labels, dtype=np.int64)
    query_pseudo = np.asarray(query_pseudo, dtype=np.int64)
    query_conf = np.asarray(query_conf, dtype=np.float64)
    labeled = query_labels != UNLABELED
    confident = (query_pseudo != UNLABELED) & (query_conf >= threshold)
    eff = np.where(labeled, query_labels, np.where(confident, query_pseudo, UNLABELED))
    relaxed = eff == UNLABELED
    bank_ok = (bank_labels[None, :] == eff[:, None]) | (
        (bank_pseudo[None, :] == eff[:, None]) & (bank_conf[None, :] >= threshold))
    mask = np.where(relaxed[:, None], True, bank_ok)
    return mask, relaxed


def constrain_semi_basic(query_labels: np.ndarray, bank_labels: np.ndarray) -> np.ndarray:
    """Labeled queries restrict to same-true-label entries; unlabeled queries
    search the whole bank. No pseudo labels involved."""
    query_labels = np.asarray(query_labels, dtype=np.int64)
    labeled = query_labels != UNLABELED
    mask = query_labels[:, None] == bank_labels[None, :]
    mask[~labeled] = True
    return mask


def constrain_cross(query_frozen: np.ndarray, frozen_bank: np.ndarray,
                    kprime: int | None) -> np.ndarray | None:
    """Same mechanics as the self constraint but in a frozen embedding space."""
    return constrain_self(query_frozen, frozen_bank, kprime)


# ---------------------------------------------------------------------------
# selection result

@dataclass
class NeighborBatch:
    """Selected bank members per query (target handled separately).

    bank_indices is (B, kb) padded with -1; includes_target means one of the
    k slots was spent on the query's own target embedding, so kb = k - 1.
    """

    bank_indices: np.ndarray
    bank_sizes: np.ndarray
    includes_target: bool

    def member_counts(self) -> np.ndarray:
        return self.bank_sizes + (1 if self.includes_target else 0)


def select_neighbors(sims_u: np.ndarray, spec_k: int, include_target: bool,
                     mask: np.ndarray | None = None) -> NeighborBatch:
    """Pick the neighbor set for each query from bank similarities of its
    target embedding.

    The query's own target embedding has similarity exactly 1.0 and beats
    any bank member on ties, so with include_target it always occupies the
    first slot and the bank contributes k-1 entries. k=1 with the target
    included reduces to pulling toward the target alone.
    """
    kb = spec_k - 1 if include_target else spec_k
    B, n = sims_u.shape
    if kb == 0 or n == 0:
        return NeighborBatch(np.full((B, 0), -1, dtype=np.int64),
                             np.zeros(B, dtype=np.int64), include_target)
    idx, sizes = topk_indices(sims_u, kb, mask)
    return NeighborBatch(idx, sizes, include_target)


# ---------------------------------------------------------------------------
# pseudo-label sources for the semi constraint

@dataclass
class PseudoHead:
    net: Mlp
    num_classes: int


@dataclass
class KnnPseudo:
    """Weighted-kNN pseudo-labeler over a frozen labeled reference set; the
    drop-in alternative to the MLP head."""

    embs: np.ndarray
    labels: np.ndarray
    num_classes: int
    k: int = 10


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def train_pseudo_head(embs: np.ndarray, labels: np.ndarray, num_classes: int,
                      rng: np.random.Generator, hidden: int = 64, epochs: int = 40,
                      lr: float = 0.01, momentum: float = 0.9,
                      weight_decay: float = 1e-4, batch_size: int = 64) -> PseudoHead:
    """Small classifier on frozen embeddings, cross-entropy + SGD momentum."""
    embs = np.asarray(embs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if np.any(labels == UNLABELED):
        raise BadConstraint("pseudo head training needs labeled embeddings")
    n, d = embs.shape
    net = mlp_init([d, hidden, num_classes], rng)
    state = SgdState.for_nets(net)
    decay = [True] * len(net.weights) + [False] * len(net.biases)
    for _ in range(epochs):
        order = rng.permutation(n)
        for s in range(0, n, batch_size):
            sel = order[s:s + batch_size]
            X, y = embs[sel], labels[sel]
            logits, tape = mlp_forward(net, X)
            probs = softmax(logits)
            grad = probs.copy()
            grad[np.arange(sel.size), y] -= 1.0
            grad /= sel.size
            gW, gb, _ = mlp_backward(net, tape, grad)
            sgd_step(net.params(), gW + gb, state, lr, momentum, weight_decay, decay)
    return PseudoHead(net, num_classes)


def pseudo_predict(head: PseudoHead, embs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(argmax label, max softmax probability) per row."""
    logits, _ = mlp_forward(head.net, np.asarray(embs, dtype=np.float64))
    probs = softmax(logits)
    return probs.argmax(axis=1).astype(np.int64), probs.max(axis=1)


def knn_pseudo_label(labeled_embs: np.ndarray, labeled_labels: np.ndarray,
                     query_embs: np.ndarray, num_classes: int, k: int = 10
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Similarity-weighted vote among the k nearest labeled embeddings.

    Confidence is the winning class's share of the total (shifted) vote
    weight, so it lives in (0, 1] like a softmax probability.
    """
    B = np.asarray(query_embs).shape[0]
    if np.asarray(labeled_embs).shape[0] == 0:
        return np.full(B, UNLABELED, dtype=np.int64), np.zeros(B)
    sims = unit_sims(np.asarray(query_embs, dtype=np.float64),
                     np.asarray(labeled_embs, dtype=np.float64))
    idx, sizes = topk_indices(sims, min(k, sims.shape[1]))
    labels = np.full(B, UNLABELED, dtype=np.int64)
    conf = np.zeros(B)
    for r in range(B):
        m = int(sizes[r])
        if m == 0:
            continue
        members = idx[r, :m]
        w = sims[r, members] + 1.0  # shift to [0, 2] so weights are nonnegative
        votes = np.zeros(num_classes)
        np.add.at(votes, labeled_labels[members], w)
        labels[r] = int(votes.argmax())
        total = votes.sum()
        conf[r] = votes[labels[r]] / total if total > 0 else 0.0
    return labels, conf
