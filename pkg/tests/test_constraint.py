"""Exact tie-aware top-k and rank computation against brute-force oracles,
the four constraint builders, and the two pseudo-label sources."""

import numpy as np
import pytest

from cmsf.core import Stream, l2_normalize_rows, make_rng
from cmsf.data import UNLABELED
from cmsf.constraint import (BadConstraint, ConstraintSpec, KnnPseudo, MODES,
                             constrain_cross, constrain_none, constrain_self,
                             constrain_semi, constrain_semi_basic,
                             constrain_sup, knn_pseudo_label, mask_from_topk,
                             neighbor_ranks, pseudo_predict, select_neighbors,
                             softmax, topk_indices, train_pseudo_head,
                             unit_sims)


def oracle_topk(sims_row, k, allowed=None):
    """Sort by similarity descending, lower bank position wins ties."""
    n = len(sims_row)
    pool = range(n) if allowed is None else [j for j in range(n) if allowed[j]]
    order = sorted(pool, key=lambda j: (-sims_row[j], j))
    return order[:k]


def oracle_rank(sims_row, j):
    """1-based position of member j in the full tie-aware ordering."""
    return 1 + sum(1 for i in range(len(sims_row))
                   if sims_row[i] > sims_row[j] or (sims_row[i] == sims_row[j] and i < j))


def test_topk_matches_oracle_with_ties():
    rng = make_rng(0, Stream.DATA)
    for rep in range(150):
        n = int(rng.integers(1, 40))
        B = int(rng.integers(1, 5))
        k = int(rng.integers(1, n + 3))
        # coarse grid plants plenty of exact ties
        sims = rng.integers(-3, 4, size=(B, n)) / 3.0
        mask = None
        if rep % 3 == 0:
            mask = rng.random((B, n)) < 0.6
        idx, sizes = topk_indices(sims, k, mask)
        for r in range(B):
            allowed = None if mask is None else mask[r]
            want = oracle_topk(sims[r], k, allowed)
            assert sizes[r] == len(want)
            assert list(idx[r, :sizes[r]]) == want
            assert np.all(idx[r, sizes[r]:] == -1)


def test_topk_k_geq_n_fast_path():
    rng = make_rng(1, Stream.DATA)
    sims = rng.integers(-2, 3, size=(3, 7)) / 2.0
    idx, sizes = topk_indices(sims, 7)
    idx_big, sizes_big = topk_indices(sims, 50)
    assert np.array_equal(sizes, np.full(3, 7))
    assert np.array_equal(sizes_big, np.full(3, 7))
    for r in range(3):
        assert list(idx[r]) == oracle_topk(sims[r], 7)
        assert list(idx_big[r, :7]) == oracle_topk(sims[r], 7)


def test_topk_all_masked_row():
    sims = np.array([[0.5, 0.2, 0.9]])
    mask = np.zeros((1, 3), dtype=bool)
    idx, sizes = topk_indices(sims, 2, mask)
    assert sizes[0] == 0
    assert np.all(idx[0] == -1)


def test_topk_rejects_bad_k():
    with pytest.raises(BadConstraint):
        topk_indices(np.zeros((1, 3)), 0)


def test_mask_from_topk_round_trip():
    sims = np.array([[0.9, 0.1, 0.5, 0.5]])
    idx, sizes = topk_indices(sims, 2)
    m = mask_from_topk(idx, sizes, 4)
    assert m.shape == (1, 4)
    assert np.array_equal(m[0], [True, False, True, False])


def test_neighbor_ranks_matches_oracle():
    rng = make_rng(2, Stream.DATA)
    for _ in range(60):
        n = int(rng.integers(2, 30))
        sims = rng.integers(-2, 3, size=(2, n)) / 2.0
        k = int(rng.integers(1, n + 1))
        idx, sizes = topk_indices(sims, k)
        ranks = neighbor_ranks(sims, idx, sizes)
        for r in range(2):
            for c in range(sizes[r]):
                assert ranks[r, c] == oracle_rank(sims[r], idx[r, c])


def test_unconstrained_topk_ranks_are_consecutive():
    # without a mask the c-th selected member has rank c+1 by construction
    rng = make_rng(3, Stream.DATA)
    sims = rng.normal(size=(4, 20))
    idx, sizes = topk_indices(sims, 6)
    ranks = neighbor_ranks(sims, idx, sizes)
    want = np.tile(np.arange(1, 7), (4, 1))
    assert np.array_equal(ranks, want)


# ---------------------------------------------------------------------------
# constraint builders

def test_constrain_none_is_none():
    assert constrain_none(4, 10) is None


def test_constrain_sup_exact_label_match():
    q = np.array([0, 1, 2])
    bank = np.array([0, 0, 1, 2, 2, UNLABELED])
    m = constrain_sup(q, bank)
    assert np.array_equal(m[0], [True, True, False, False, False, False])
    assert np.array_equal(m[1], [False, False, True, False, False, False])
    assert np.array_equal(m[2], [False, False, False, True, True, False])


def test_constrain_self_topk_in_aux_space():
    rng = make_rng(4, Stream.DATA)
    w = l2_normalize_rows(rng.normal(size=(3, 5)))
    aux = l2_normalize_rows(rng.normal(size=(12, 5)))
    m = constrain_self(w, aux, 4)
    sims = unit_sims(w, aux)
    for r in range(3):
        want = set(oracle_topk(sims[r], 4))
        assert set(np.flatnonzero(m[r])) == want
    # kprime None or >= bank means no restriction (signalled as no mask)
    assert constrain_self(w, aux, None) is None
    assert constrain_self(w, aux, 12) is None
    assert constrain_self(w, aux, 99) is None


def test_constrain_semi_effective_labels_and_relaxation():
    t = 0.8
    q_lab = np.array([2, UNLABELED, UNLABELED])
    q_pse = np.array([0, 1, 1])
    q_conf = np.array([0.99, 0.95, 0.5])  # row 2 not confident -> relax
    bank_lab = np.array([2, 1, UNLABELED, UNLABELED])
    bank_pse = np.array([0, 1, 1, 2])
    bank_conf = np.array([0.9, 0.99, 0.3, 0.99])
    m, relaxed = constrain_semi(q_lab, q_pse, q_conf, bank_lab, bank_pse,
                                bank_conf, t)
    assert np.array_equal(relaxed, [False, False, True])
    # row 0: true label 2 wins over its pseudo; matches bank true 2 or pseudo 2 conf>=t
    assert np.array_equal(m[0], [True, False, False, True])
    # row 1: confident pseudo 1; bank true 1, or pseudo 1 with conf >= t
    assert np.array_equal(m[1], [False, True, False, False])
    # row 2: relaxed to the whole bank
    assert np.all(m[2])


def test_constrain_semi_threshold_zero_never_relaxes():
    q_lab = np.full(2, UNLABELED)
    q_pse = np.array([1, 0])
    q_conf = np.zeros(2)
    bank_lab = np.array([1, 0])
    bank_pse = np.full(2, UNLABELED)
    bank_conf = np.zeros(2)
    m, relaxed = constrain_semi(q_lab, q_pse, q_conf, bank_lab, bank_pse,
                                bank_conf, 0.0)
    assert not np.any(relaxed)
    assert np.array_equal(m, np.eye(2, dtype=bool))


def test_constrain_semi_basic():
    q = np.array([1, UNLABELED])
    bank = np.array([1, 0, UNLABELED])
    m = constrain_semi_basic(q, bank)
    assert np.array_equal(m[0], [True, False, False])
    assert np.all(m[1])


def test_constrain_cross_same_mechanics_as_self():
    rng = make_rng(5, Stream.DATA)
    w = l2_normalize_rows(rng.normal(size=(2, 4)))
    fb = l2_normalize_rows(rng.normal(size=(9, 4)))
    assert np.array_equal(constrain_cross(w, fb, 3), constrain_self(w, fb, 3))


def test_constraint_spec_validation():
    ConstraintSpec("self", 5, 50, 0.85, True)
    with pytest.raises(BadConstraint):
        ConstraintSpec("bogus", 5, 50, 0.85, True)
    with pytest.raises(BadConstraint):
        ConstraintSpec("self", 0, 50, 0.85, True)
    with pytest.raises(BadConstraint):
        ConstraintSpec("self", 5, 0, 0.85, True)
    with pytest.raises(BadConstraint):
        ConstraintSpec("semi", 5, 50, 1.5, True)
    assert set(MODES) == {"none", "self", "sup", "semi", "semi_basic", "cross"}


# ---------------------------------------------------------------------------
# neighbor selection

def test_select_neighbors_reserves_target_slot():
    rng = make_rng(6, Stream.DATA)
    sims = rng.normal(size=(3, 10))
    nb = select_neighbors(sims, 5, True, None)
    assert nb.includes_target
    assert nb.bank_indices.shape[1] == 4  # k - 1 bank members
    assert np.all(nb.bank_sizes == 4)
    assert np.array_equal(nb.member_counts(), np.full(3, 5))

    nb2 = select_neighbors(sims, 5, False, None)
    assert nb2.bank_indices.shape[1] == 5
    assert np.array_equal(nb2.member_counts(), np.full(3, 5))


def test_select_neighbors_k1_with_target_takes_nothing():
    sims = np.random.default_rng(0).normal(size=(2, 6))
    nb = select_neighbors(sims, 1, True, None)
    assert np.all(nb.bank_sizes == 0)
    assert np.array_equal(nb.member_counts(), [1, 1])


def test_select_neighbors_respects_mask():
    sims = np.array([[0.9, 0.8, 0.7, 0.6]])
    mask = np.array([[False, True, False, True]])
    nb = select_neighbors(sims, 3, False, mask)
    assert list(nb.bank_indices[0, :nb.bank_sizes[0]]) == [1, 3]


# ---------------------------------------------------------------------------
# pseudo-label sources

def test_softmax_rows_and_stability():
    p = softmax(np.array([[0.0, 0.0], [1000.0, 0.0]]))
    assert np.allclose(p.sum(axis=1), 1.0)
    assert np.allclose(p[0], [0.5, 0.5])
    assert p[1, 0] > 0.999


def test_pseudo_head_fits_separated_blobs():
    rng = make_rng(7, Stream.DATA)
    means = rng.normal(size=(4, 8)) * 4
    X = l2_normalize_rows(np.repeat(means, 30, axis=0)
                          + rng.normal(size=(120, 8)) * 0.3)
    y = np.repeat(np.arange(4), 30)
    head = train_pseudo_head(X, y, 4, make_rng(7, Stream.HEAD), epochs=60, lr=0.1)
    lab, conf = pseudo_predict(head, X)
    assert np.mean(lab == y) >= 0.95
    assert np.all(conf >= 0.25 - 1e-12) and np.all(conf <= 1.0)


def test_pseudo_head_rejects_unlabeled():
    with pytest.raises(BadConstraint):
        train_pseudo_head(np.zeros((3, 2)), np.array([0, UNLABELED, 1]), 2,
                          make_rng(8, Stream.HEAD))


def test_knn_pseudo_label_hand_case():
    ref = np.array([[1.0, 0.0], [0.0, 1.0]])
    labs = np.array([0, 1])
    q = np.array([[0.96, 0.28], [0.28, 0.96]])  # unit rows near each axis
    lab, conf = knn_pseudo_label(ref, labs, q, 2, k=1)
    assert list(lab) == [0, 1]
    assert np.all(conf == 1.0)  # single-member vote
    # with k=2 the confidence is the winner's share of (sim + 1) weights
    lab2, conf2 = knn_pseudo_label(ref, labs, q, 2, k=2)
    assert list(lab2) == [0, 1]
    w_win, w_lose = 1.96, 1.28
    assert np.allclose(conf2, w_win / (w_win + w_lose))


def test_knn_pseudo_empty_reference():
    lab, conf = knn_pseudo_label(np.zeros((0, 3)), np.zeros(0, dtype=np.int64),
                                 l2_normalize_rows(np.ones((2, 3))), 4)
    assert np.all(lab == UNLABELED)
    assert np.all(conf == 0.0)
