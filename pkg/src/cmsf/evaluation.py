"""Embedding quality metrics: nearest-neighbor classification, a linear
probe, neighbor purity, and a diagnostics sweep that measures how far the
constraint pushes selection beyond the unconstrained nearest neighbors.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .constraint import (mask_from_topk, neighbor_ranks, topk_indices,
                         unit_sims)
from .core import Stream, make_rng, parallel_map
from .data import UNLABELED, Dataset
from .encoder import Mlp, SgdState, mlp_backward, mlp_forward, mlp_init, sgd_step
from .memory import build_aux_bank


class EvalError(ValueError):
    pass


def _require_labeled(labels: np.ndarray, what: str) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if np.any(labels == UNLABELED):
        raise EvalError(f"{what} must be fully labeled")
    return labels


def knn_eval(train_emb: np.ndarray, train_labels: np.ndarray,
             test_emb: np.ndarray, test_labels: np.ndarray, k: int = 1,
             tau: float = 0.07, threads: int = 1, chunk: int = 256) -> float:
    """Accuracy of cosine kNN classification of test embeddings.

    k=1 predicts the single nearest neighbor's label; k>1 takes an
    exp(sim/tau)-weighted vote. Inputs must be unit-norm rows.
    """
    train_labels = _require_labeled(train_labels, "train labels")
    test_labels = _require_labeled(test_labels, "test labels")
    num_classes = int(max(train_labels.max(), test_labels.max())) + 1
    test_emb = np.asarray(test_emb, dtype=np.float64)
    chunks = [(s, test_emb[s:s + chunk]) for s in range(0, test_emb.shape[0], chunk)]

    def _predict(item):
        _, q = item
        sims = unit_sims(q, train_emb)
        idx, sizes = topk_indices(sims, min(k, sims.shape[1]))
        if k == 1:
            return train_labels[idx[:, 0]]
        pred = np.zeros(q.shape[0], dtype=np.int64)
        for r in range(q.shape[0]):
            m = int(sizes[r])
            members = idx[r, :m]
            w = np.exp(sims[r, members] / tau)
            votes = np.zeros(num_classes)
            np.add.at(votes, train_labels[members], w)
            pred[r] = int(votes.argmax())
        return pred

    preds = parallel_map(_predict, chunks, threads)
    pred = np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)
    return float(np.mean(pred == test_labels))


def linear_probe(train_emb: np.ndarray, train_labels: np.ndarray,
                 test_emb: np.ndarray, test_labels: np.ndarray,
                 rng: np.random.Generator, epochs: int = 50, lr: float = 0.1,
                 momentum: float = 0.9, batch_size: int = 64) -> float:
    """Accuracy of a softmax linear classifier trained on frozen embeddings."""
    train_labels = _require_labeled(train_labels, "train labels")
    test_labels = _require_labeled(test_labels, "test labels")
    X = np.asarray(train_emb, dtype=np.float64)
    n, d = X.shape
    num_classes = int(max(train_labels.max(), test_labels.max())) + 1
    net = mlp_init([d, num_classes], rng)
    state = SgdState.for_nets(net)
    for _ in range(epochs):
        order = rng.permutation(n)
        for s in range(0, n, batch_size):
            sel = order[s:s + batch_size]
            logits, tape = mlp_forward(net, X[sel])
            z = logits - logits.max(axis=1, keepdims=True)
            p = np.exp(z)
            p /= p.sum(axis=1, keepdims=True)
            grad = p
            grad[np.arange(sel.size), train_labels[sel]] -= 1.0
            grad /= sel.size
            gW, gb, _ = mlp_backward(net, tape, grad)
            sgd_step(net.params(), gW + gb, state, lr, momentum)
    logits, _ = mlp_forward(net, np.asarray(test_emb, dtype=np.float64))
    return float(np.mean(logits.argmax(axis=1) == test_labels))


def selection_purity(indices: np.ndarray, sizes: np.ndarray,
                     query_labels: np.ndarray, bank_labels: np.ndarray) -> float:
    """Fraction of selected members sharing the query's true label, counted
    over (query, member) pairs where both labels are known. NaN if no pair
    qualifies."""
    match = 0
    total = 0
    for r in range(indices.shape[0]):
        if query_labels[r] == UNLABELED:
            continue
        members = indices[r, :sizes[r]]
        lab = bank_labels[members]
        known = lab != UNLABELED
        total += int(known.sum())
        match += int(np.sum(lab[known] == query_labels[r]))
    return match / total if total else float("nan")


@dataclass
class RankHistogram:
    """Counts of ranks in doubling buckets: [1], [2], (2,4], (4,8], ..."""

    uppers: list[int]
    counts: list[int]

    @staticmethod
    def from_ranks(ranks: np.ndarray, max_rank: int) -> "RankHistogram":
        uppers = [1, 2]
        while uppers[-1] < max_rank:
            uppers.append(uppers[-1] * 2)
        counts = []
        lo = 0
        for hi in uppers:
            counts.append(int(np.sum((ranks > lo) & (ranks <= hi))))
            lo = hi
        return RankHistogram(uppers, counts)

    def labels(self) -> list[str]:
        out = []
        lo = 0
        for hi in self.uppers:
            out.append(str(hi) if hi - lo == 1 else f"{lo + 1}-{hi}")
            lo = hi
        return out


@dataclass
class DiagReport:
    """Constraint diagnostics over a fixed probe set of queries."""

    mode: str
    k: int
    m: int
    num_queries: int
    bank_size: int
    kth_ranks: list[int]            # rank of the k-th constrained neighbor
    median_kth_rank: float
    mean_kth_rank: float
    purity_constrained: float
    purity_unconstrained: float
    rank_hist: RankHistogram

    def to_dict(self) -> dict:
        return {
            "mode": self.mode, "k": self.k, "m": self.m,
            "num_queries": self.num_queries, "bank_size": self.bank_size,
            "median_kth_rank": self.median_kth_rank,
            "mean_kth_rank": self.mean_kth_rank,
            "purity_constrained": self.purity_constrained,
            "purity_unconstrained": self.purity_unconstrained,
            "rank_hist_uppers": list(self.rank_hist.uppers),
            "rank_hist_counts": list(self.rank_hist.counts),
        }

    def save_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, sort_keys=True, indent=2)
            f.write("\n")

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["rank_bucket", "count"])
            for lab, c in zip(self.rank_hist.labels(), self.rank_hist.counts):
                w.writerow([lab, c])


def diagnostics_sweep(result, data: Dataset, num_queries: int = 512,
                      k: int | None = None, m: int | None = None,
                      diag_labels: np.ndarray | None = None) -> DiagReport:
    """Probe the trained state: how constrained selection differs from plain
    nearest neighbors.

    For a seeded sample of queries, runs the mode's constraint against the
    final bank, selects the top-k inside it (bank members only, no target
    slot), and reports (a) the rank each k-th selected member would have in
    the unconstrained ordering and (b) label purity of constrained top-k
    vs unconstrained top-m. When m is not given it is set to the median
    k-th rank, i.e. purity is compared at equal search depth.
    """
    from .trainer import embed_dataset

    cfg = result.config
    k = cfg.k if k is None else k
    view = result.bank.snapshot()
    if view.size == 0:
        raise EvalError("empty memory bank; train first")
    if diag_labels is None:
        diag_labels = data.labels
    diag_labels = np.asarray(diag_labels, dtype=np.int64)

    rng = make_rng(cfg.seed, Stream.PROBE)
    nq = min(num_queries, data.n)
    qidx = rng.choice(data.n, size=nq, replace=False)
    u = embed_dataset(result.pair.target, data.samples[qidx], cfg.threads)
    sims_u = unit_sims(u, view.embeddings)

    mask = None
    if cfg.mode == "self":
        aux_emb, _ = build_aux_bank(view, result.cache)
        have = result.cache.present[qidx]
        w = np.where(have[:, None], result.cache.embs[qidx], u)
        sims_aux = unit_sims(w, aux_emb)
        if cfg.kprime is not None and cfg.kprime < view.size:
            aidx, asizes = topk_indices(sims_aux, cfg.kprime)
            mask = mask_from_topk(aidx, asizes, view.size)
    elif cfg.mode in ("sup", "semi_basic"):
        q_lab = diag_labels[qidx]
        mask = q_lab[:, None] == view.labels[None, :]
        if cfg.mode == "semi_basic":
            mask[q_lab == UNLABELED] = True
    elif cfg.mode == "semi":
        from .constraint import constrain_semi
        from .trainer import _pseudo_for
        q_pseudo, q_conf = _pseudo_for(result.head, u)
        mask, _ = constrain_semi(data.labels[qidx], q_pseudo, q_conf,
                                 view.labels, view.pseudo_labels,
                                 view.pseudo_conf, cfg.conf_threshold)
    elif cfg.mode == "cross":
        if result.frozen is None:
            raise EvalError("cross mode diagnostics need the frozen encoder")
        w = embed_dataset(result.frozen, data.samples[qidx], cfg.threads)
        if cfg.kprime is not None and cfg.kprime < view.size:
            # frozen-space bank must be rebuilt from current entries
            frozen_bank = embed_dataset(result.frozen,
                                        data.samples[view.dataset_indices],
                                        cfg.threads)
            aidx, asizes = topk_indices(unit_sims(w, frozen_bank), cfg.kprime)
            mask = mask_from_topk(aidx, asizes, view.size)

    c_idx, c_sizes = topk_indices(sims_u, k, mask)
    ranks = neighbor_ranks(sims_u, c_idx, c_sizes)
    full = c_sizes >= min(k, view.size)
    kth = ranks[np.arange(nq), np.minimum(c_sizes - 1, k - 1).clip(0)]
    kth = kth[full & (c_sizes > 0)]

    if m is None:
        m = max(k, int(round(float(np.median(kth)))) if kth.size else k)
    u_idx, u_sizes = topk_indices(sims_u, m)
    bank_true = diag_labels[view.dataset_indices]
    pur_c = selection_purity(c_idx, c_sizes, diag_labels[qidx], bank_true)
    pur_u = selection_purity(u_idx, u_sizes, diag_labels[qidx], bank_true)

    hist = RankHistogram.from_ranks(np.asarray(kth), view.size)
    return DiagReport(cfg.mode, k, m, nq, view.size, [int(r) for r in kth],
                      float(np.median(kth)) if kth.size else float("nan"),
                      float(np.mean(kth)) if kth.size else float("nan"),
                      pur_c, pur_u, hist)


@dataclass
class EvalReport:
    """Flat metric bundle written by the eval/analyze paths."""

    name: str
    n_train: int
    n_test: int
    metrics: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"name": self.name, "n_train": self.n_train,
                "n_test": self.n_test, "metrics": dict(self.metrics)}

    def save_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, sort_keys=True, indent=2)
            f.write("\n")

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["metric", "value"])
            w.writerow(["name", self.name])
            w.writerow(["n_train", self.n_train])
            w.writerow(["n_test", self.n_test])
            for key in sorted(self.metrics):
                w.writerow([key, repr(float(self.metrics[key]))])


def evaluate_encoder(net: Mlp, train_data: Dataset, test_data: Dataset,
                     knn_k: int = 1, probe: bool = False, seed: int = 0,
                     threads: int = 1, name: str = "eval") -> EvalReport:
    """kNN (and optional linear probe) accuracy of an encoder's embeddings."""
    from .trainer import embed_dataset

    train_emb = embed_dataset(net, train_data.samples, threads)
    test_emb = embed_dataset(net, test_data.samples, threads)
    report = EvalReport(name, train_data.n, test_data.n)
    report.metrics["knn1_acc"] = knn_eval(train_emb, train_data.labels,
                                          test_emb, test_data.labels, k=1,
                                          threads=threads)
    if knn_k > 1:
        report.metrics[f"knn{knn_k}_acc"] = knn_eval(
            train_emb, train_data.labels, test_emb, test_data.labels,
            k=knn_k, threads=threads)
    if probe:
        rng = make_rng(seed, Stream.PROBE, 1)
        report.metrics["linear_probe_acc"] = linear_probe(
            train_emb, train_data.labels, test_emb, test_data.labels, rng)
    return report
