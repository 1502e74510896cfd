"""Training loops: the constrained mean-shift trainer, plain reference
trainers used for reduction-equivalence checks, and a supervised
cross-entropy baseline.

One step: augment the batch twice; the target encoder embeds view 1 into u,
the online encoder + predictor embed view 2 into v (both unit norm); the
constraint picks a candidate subset of the memory bank; v is pulled toward
the top-k most similar bank entries to u inside that subset (plus u itself);
gradients update online + predictor, the target follows by EMA, and the
batch's u vectors are pushed into the bank.

The neighbor loss kernel here is shared by every trainer so that reductions
(no constraint == plain grouping, k=1 == pull-to-target only, first-pass
self-constraint == doubled plain grouping) hold bit for bit.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .constraint import (ConstraintSpec, KnnPseudo, NeighborBatch, PseudoHead,
                         constrain_cross, constrain_self, constrain_semi,
                         constrain_semi_basic, constrain_sup, knn_pseudo_label,
                         pseudo_predict, select_neighbors, softmax,
                         train_pseudo_head, unit_sims)
from .core import (Stream, l2_normalize_backward_rows, l2_normalize_rows,
                   make_rng, parallel_map)
from .data import UNLABELED, AugmentSpec, Dataset, augment_batch
from .encoder import (EncoderPair, Mlp, SgdState, cosine_lr, mlp_backward,
                      mlp_forward, mlp_init, sgd_step)
from .memory import EpochCache, MemoryBank, build_aux_bank


class TrainError(ValueError):
    pass


@dataclass
class TrainConfig:
    mode: str = "none"
    epochs: int = 30
    batch_size: int = 64
    bank_size: int = 4096
    emb_dim: int = 32
    enc_hidden: tuple[int, ...] = (64,)
    pred_hidden: tuple[int, ...] = (64,)
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    ema_momentum: float = 0.99
    k: int = 5
    kprime: int | None = 50
    conf_threshold: float = 0.85
    include_target: bool = True
    msf_aux_weight: float = 0.0       # extra unconstrained term (mode none)
    pseudo_source: str = "head"       # "head" or "knn"
    head_updates_per_epoch: int = 2
    head_hidden: int = 64
    head_epochs: int = 40
    head_lr: float = 0.01
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    seed: int = 0
    threads: int = 1
    eval_every: int = 0               # epochs between kNN probes; 0 = never

    def spec(self) -> ConstraintSpec:
        return ConstraintSpec(self.mode, self.k, self.kprime,
                              self.conf_threshold, self.include_target)

    def enc_sizes(self, dim: int) -> list[int]:
        return [dim, *self.enc_hidden, self.emb_dim]

    def pred_sizes(self) -> list[int]:
        return [self.emb_dim, *self.pred_hidden, self.emb_dim]


@dataclass
class BatchDiag:
    """Per-step diagnostics handed to the on_batch callback."""

    epoch: int
    step: int
    global_step: int
    loss: float
    purity: float                 # nan when no labeled member pair existed
    relaxed: int                  # queries that fell back to the full bank
    lr: float
    neighbors: NeighborBatch
    sims_u: np.ndarray
    mask: np.ndarray | None


@dataclass
class TrainResult:
    pair: EncoderPair
    metrics: list[dict]
    bank: MemoryBank
    cache: EpochCache | None
    head: PseudoHead | None
    frozen: Mlp | None
    config: TrainConfig


def neighbor_loss(v: np.ndarray, target_z: np.ndarray | None,
                  bank_z: np.ndarray, valid: np.ndarray
                  ) -> tuple[float, np.ndarray]:
    """Mean squared unit-sphere distance from v to its neighbor set.

    Per row: (1/|S|) sum over members z of (2 - 2 v.z); batch loss is the
    mean over rows (rows with an empty set contribute zero). Returns the
    loss and its gradient with respect to v. Callers must pass bank_z with
    a consistent padded width since the sum runs over the padded axis.
    """
    B = v.shape[0]
    counts = valid.sum(axis=1).astype(np.float64)
    row_loss = np.zeros(B)
    grad_acc = np.zeros_like(v)
    if target_z is not None:
        sims_t = np.clip(np.sum(v * target_z, axis=1), -1.0, 1.0)
        row_loss += 2.0 - 2.0 * sims_t
        grad_acc += -2.0 * target_z
        counts += 1.0
    if bank_z.shape[1] > 0:
        sims_b = np.clip(np.einsum("bd,bkd->bk", v, bank_z), -1.0, 1.0)
        row_loss += np.where(valid, 2.0 - 2.0 * sims_b, 0.0).sum(axis=1)
        grad_acc += np.einsum("bk,bkd->bd", np.where(valid, -2.0, 0.0), bank_z)
    safe = np.maximum(counts, 1.0)
    loss = float(np.sum(np.where(counts > 0, row_loss / safe, 0.0)) / B)
    grad_v = grad_acc / safe[:, None] / B
    grad_v[counts == 0] = 0.0
    return loss, grad_v


def gather_neighbors(bank_emb: np.ndarray, nb: NeighborBatch, width: int
                     ) -> tuple[np.ndarray, np.ndarray]:
    """(bank_z (B, width, D), valid (B, width)) for the loss kernel."""
    B = nb.bank_indices.shape[0]
    D = bank_emb.shape[1] if bank_emb.ndim == 2 else 0
    bank_z = np.zeros((B, width, D))
    valid = np.zeros((B, width), dtype=bool)
    kb = nb.bank_indices.shape[1]
    if kb > 0 and bank_emb.shape[0] > 0:
        safe_idx = np.clip(nb.bank_indices, 0, bank_emb.shape[0] - 1)
        bank_z[:, :kb, :] = bank_emb[safe_idx]
        valid[:, :kb] = np.arange(kb)[None, :] < nb.bank_sizes[:, None]
    return bank_z, valid


def batch_purity(nb: NeighborBatch, query_true: np.ndarray, bank_true: np.ndarray
                 ) -> tuple[int, int]:
    """(matching members, counted members) over pairs where both the query
    and the bank member have a known true label."""
    match = 0
    total = 0
    for r in range(nb.bank_indices.shape[0]):
        if query_true[r] == UNLABELED:
            continue
        members = nb.bank_indices[r, :nb.bank_sizes[r]]
        lab = bank_true[members]
        known = lab != UNLABELED
        total += int(known.sum())
        match += int(np.sum(lab[known] == query_true[r]))
    return match, total


def _forward_embed(net: Mlp, X: np.ndarray) -> np.ndarray:
    out, _ = mlp_forward(net, X)
    return l2_normalize_rows(out)


def embed_dataset(net: Mlp, samples: np.ndarray, threads: int = 1,
                  chunk: int = 256) -> np.ndarray:
    """Unit-norm embeddings of all rows, computed in fixed-size chunks so the
    decomposition (and therefore the floats) never depends on thread count."""
    chunks = [samples[s:s + chunk] for s in range(0, samples.shape[0], chunk)]
    outs = parallel_map(lambda c: _forward_embed(net, c), chunks, threads)
    return np.concatenate(outs, axis=0) if outs else np.zeros((0, net.sizes[-1]))


def _train_head(feat_cache: np.ndarray, feat_present: np.ndarray, data: Dataset,
                cfg: TrainConfig, epoch: int, update_idx: int) -> PseudoHead | None:
    """Fit the pseudo-label head on the labeled target features cached so far.

    The features are frozen snapshots stashed per mini-batch, so early in
    epoch 0 only part of the labeled set is available; returns None until at
    least one cached feature exists."""
    idx = np.flatnonzero(feat_present & data.labeled_mask())
    if idx.size == 0:
        return None
    rng = make_rng(cfg.seed, Stream.HEAD, epoch, update_idx)
    return train_pseudo_head(feat_cache[idx], data.labels[idx], data.num_classes,
                             rng, hidden=cfg.head_hidden, epochs=cfg.head_epochs,
                             lr=cfg.head_lr, batch_size=cfg.batch_size)


def _knn_ref(feat_cache: np.ndarray, feat_present: np.ndarray, data: Dataset,
             cfg: TrainConfig) -> KnnPseudo | None:
    idx = np.flatnonzero(feat_present & data.labeled_mask())
    if idx.size == 0:
        return None
    return KnnPseudo(feat_cache[idx].copy(), data.labels[idx].copy(),
                     data.num_classes)


def _pseudo_for(head: PseudoHead | KnnPseudo | None, embs: np.ndarray
                ) -> tuple[np.ndarray, np.ndarray]:
    if head is None:
        n = embs.shape[0]
        return np.full(n, UNLABELED, dtype=np.int64), np.zeros(n)
    if isinstance(head, KnnPseudo):
        return knn_pseudo_label(head.embs, head.labels, embs, head.num_classes,
                                head.k)
    return pseudo_predict(head, embs)


def train(data: Dataset, cfg: TrainConfig, run_dir: str | None = None,
          on_batch=None, diag_labels: np.ndarray | None = None,
          eval_data: Dataset | None = None,
          frozen: Mlp | None = None) -> TrainResult:
    """Run the full training loop; see the module docstring for one step.

    diag_labels supplies ground truth for purity diagnostics when the
    dataset itself carries hidden labels. frozen is the second embedding
    space for cross mode (a fresh randomly initialized encoder when omitted).
    """
    spec = cfg.spec()
    if cfg.mode in ("sup",) and not np.all(data.labeled_mask()):
        raise TrainError("sup mode needs a fully labeled dataset")
    if cfg.mode in ("semi", "semi_basic") and not np.any(data.labeled_mask()):
        raise TrainError(f"{cfg.mode} mode needs at least one labeled sample")
    if cfg.pseudo_source not in ("head", "knn"):
        raise TrainError(f"unknown pseudo_source {cfg.pseudo_source!r}")

    rng_init = make_rng(cfg.seed, Stream.INIT)
    pair = EncoderPair.create(cfg.enc_sizes(data.dim), cfg.pred_sizes(), rng_init,
                              cfg.ema_momentum)
    state = SgdState.for_nets(pair.online, pair.predictor)
    decay_mask = pair.decay_mask()

    bank = MemoryBank(cfg.bank_size, cfg.emb_dim)
    cache = EpochCache(data.n, cfg.emb_dim) if cfg.mode == "self" else None
    if cfg.mode == "cross" and frozen is None:
        frozen = mlp_init(cfg.enc_sizes(data.dim), make_rng(cfg.seed, Stream.INIT, 1))
    aux_bank = MemoryBank(cfg.bank_size, frozen.sizes[-1]) if cfg.mode == "cross" else None
    head: PseudoHead | KnnPseudo | None = None
    feat_cache = np.zeros((data.n, cfg.emb_dim)) if cfg.mode == "semi" else None
    feat_present = np.zeros(data.n, dtype=bool) if cfg.mode == "semi" else None

    if diag_labels is None:
        diag_labels = data.labels
    diag_labels = np.asarray(diag_labels, dtype=np.int64)

    steps_per_epoch = (data.n + cfg.batch_size - 1) // cfg.batch_size
    total_steps = steps_per_epoch * cfg.epochs
    aux_w = 1.0 if cfg.mode == "self" else cfg.msf_aux_weight
    head_steps = set()
    if cfg.mode == "semi" and cfg.head_updates_per_epoch > 0:
        head_steps = {max(0, (j + 1) * steps_per_epoch // cfg.head_updates_per_epoch - 1)
                      for j in range(cfg.head_updates_per_epoch)}

    metrics: list[dict] = []
    metrics_path = None
    if run_dir is not None:
        os.makedirs(run_dir, exist_ok=True)
        with open(os.path.join(run_dir, "config.json"), "w") as f:
            json.dump(asdict(cfg), f, sort_keys=True, indent=2)
            f.write("\n")
        metrics_path = os.path.join(run_dir, "metrics.jsonl")
        open(metrics_path, "w").close()

    global_step = 0
    for epoch in range(cfg.epochs):
        order = make_rng(cfg.seed, Stream.SHUFFLE, epoch).permutation(data.n)
        step_losses: list[float] = []
        pur_match = 0
        pur_total = 0
        relaxed_total = 0
        query_total = 0
        lr = cfg.lr
        for step in range(steps_per_epoch):
            sel = order[step * cfg.batch_size:(step + 1) * cfg.batch_size]
            x = data.samples[sel]
            rng1 = make_rng(cfg.seed, Stream.AUGMENT1, epoch, step)
            rng2 = make_rng(cfg.seed, Stream.AUGMENT2, epoch, step)
            x1 = augment_batch(x, cfg.augment, rng1)
            x2 = augment_batch(x, cfg.augment, rng2)

            def _target_path():
                out, _ = mlp_forward(pair.target, x1)
                return l2_normalize_rows(out)

            def _online_path():
                g_out, tape_g = mlp_forward(pair.online, x2)
                p_out, tape_p = mlp_forward(pair.predictor, g_out)
                return g_out, tape_g, p_out, tape_p

            res = parallel_map(lambda f: f(), [_target_path, _online_path],
                               min(cfg.threads, 2))
            u = res[0]
            g_out, tape_g, p_out, tape_p = res[1]
            v = l2_normalize_rows(p_out)

            view = bank.snapshot()
            sims_u = unit_sims(u, view.embeddings) if view.size else np.zeros((len(sel), 0))

            q_pseudo = q_conf = None
            mask = None
            relaxed = np.zeros(len(sel), dtype=bool)
            if view.size:
                if cfg.mode == "sup":
                    mask = constrain_sup(data.labels[sel], view.labels)
                elif cfg.mode == "self":
                    aux_emb, _ = build_aux_bank(view, cache)
                    have = cache.present[sel]
                    w = np.where(have[:, None], cache.embs[sel], u)
                    mask = constrain_self(w, aux_emb, cfg.kprime)
                elif cfg.mode == "semi":
                    q_pseudo, q_conf = _pseudo_for(head, u)
                    mask, relaxed = constrain_semi(
                        data.labels[sel], q_pseudo, q_conf, view.labels,
                        view.pseudo_labels, view.pseudo_conf, cfg.conf_threshold)
                elif cfg.mode == "semi_basic":
                    mask = constrain_semi_basic(data.labels[sel], view.labels)
                elif cfg.mode == "cross":
                    w = _forward_embed(frozen, x)
                    aux_view = aux_bank.snapshot()
                    mask = constrain_cross(w, aux_view.embeddings, cfg.kprime)

            nb = select_neighbors(sims_u, cfg.k, cfg.include_target, mask)
            width = cfg.k - 1 if cfg.include_target else cfg.k
            bank_z, valid = gather_neighbors(view.embeddings, nb, width)
            tz = u if cfg.include_target else None
            loss, grad_v = neighbor_loss(v, tz, bank_z, valid)
            if aux_w != 0.0 and cfg.mode in ("none", "self"):
                nb_u = select_neighbors(sims_u, cfg.k, cfg.include_target, None)
                bz_u, val_u = gather_neighbors(view.embeddings, nb_u, width)
                loss_u, grad_u = neighbor_loss(v, tz, bz_u, val_u)
                loss = loss + aux_w * loss_u
                grad_v = grad_v + aux_w * grad_u

            grad_p = l2_normalize_backward_rows(p_out, grad_v)
            gW_p, gb_p, grad_g = mlp_backward(pair.predictor, tape_p, grad_p)
            gW_e, gb_e, _ = mlp_backward(pair.online, tape_g, grad_g)
            lr = cosine_lr(cfg.lr, global_step, total_steps)
            sgd_step(pair.trainable_params(), gW_e + gb_e + gW_p + gb_p, state,
                     lr, cfg.momentum, cfg.weight_decay, decay_mask)
            pair.step_ema()

            if cfg.mode == "semi":
                if q_pseudo is None:
                    q_pseudo, q_conf = _pseudo_for(head, u)
                evicted = bank.push(u, sel, data.labels[sel], q_pseudo, q_conf)
                lab = data.labels[sel] != UNLABELED
                feat_cache[sel[lab]] = u[lab]
                feat_present[sel[lab]] = True
            else:
                evicted = bank.push(u, sel, data.labels[sel])
            if cache is not None:
                cache.absorb(evicted)
            if aux_bank is not None:
                aux_bank.push(_forward_embed(frozen, x), sel)

            m, t = batch_purity(nb, diag_labels[sel], diag_labels[view.dataset_indices])
            pur_match += m
            pur_total += t
            relaxed_total += int(relaxed.sum())
            query_total += len(sel)
            step_losses.append(loss)
            if on_batch is not None:
                on_batch(BatchDiag(epoch, step, global_step, loss,
                                   m / t if t else float("nan"),
                                   int(relaxed.sum()), lr, nb, sims_u, mask))
            if cfg.mode == "semi" and step in head_steps:
                if cfg.pseudo_source == "knn":
                    head = _knn_ref(feat_cache, feat_present, data, cfg)
                else:
                    head = _train_head(feat_cache, feat_present, data, cfg,
                                       epoch, step)
            global_step += 1

        rec = {
            "epoch": epoch,
            "loss": float(np.mean(np.asarray(step_losses))),
            "purity": (pur_match / pur_total) if pur_total else None,
            "relaxed_frac": (relaxed_total / query_total) if cfg.mode == "semi" else None,
            "bank_fill": int(bank.count),
            "cache_fill": int(cache.fill_count) if cache is not None else None,
            "lr": float(lr),
            "knn_acc": None,
        }
        if eval_data is not None and cfg.eval_every and (epoch + 1) % cfg.eval_every == 0:
            from .evaluation import knn_eval
            train_emb = embed_dataset(pair.target, data.samples, cfg.threads)
            test_emb = embed_dataset(pair.target, eval_data.samples, cfg.threads)
            rec["knn_acc"] = knn_eval(train_emb, diag_labels, test_emb,
                                      eval_data.labels, k=1)
        metrics.append(rec)
        if metrics_path is not None:
            with open(metrics_path, "a") as f:
                f.write(json.dumps(rec, sort_keys=True) + "\n")

    if run_dir is not None:
        from .encoder import save_checkpoint
        save_checkpoint(os.path.join(run_dir, "checkpoint.cmck"), pair,
                        global_step, cfg.epochs)
    return TrainResult(pair, metrics, bank, cache, head, frozen, cfg)


# ---------------------------------------------------------------------------
# reference trainers (independent bank + selection, shared numeric kernels)

def train_msf_reference(data: Dataset, cfg: TrainConfig) -> tuple[EncoderPair, list[float]]:
    """Plain mean-shift grouping with a list-based FIFO bank and brute-force
    sorted selection. Matches train(mode="none") bit for bit."""
    rng_init = make_rng(cfg.seed, Stream.INIT)
    pair = EncoderPair.create(cfg.enc_sizes(data.dim), cfg.pred_sizes(), rng_init,
                              cfg.ema_momentum)
    state = SgdState.for_nets(pair.online, pair.predictor)
    decay_mask = pair.decay_mask()
    bank_rows: list[np.ndarray] = []
    steps_per_epoch = (data.n + cfg.batch_size - 1) // cfg.batch_size
    total_steps = steps_per_epoch * cfg.epochs
    kb = cfg.k - 1 if cfg.include_target else cfg.k
    losses: list[float] = []
    global_step = 0
    for epoch in range(cfg.epochs):
        order = make_rng(cfg.seed, Stream.SHUFFLE, epoch).permutation(data.n)
        epoch_losses = []
        for step in range(steps_per_epoch):
            sel = order[step * cfg.batch_size:(step + 1) * cfg.batch_size]
            x = data.samples[sel]
            x1 = augment_batch(x, cfg.augment, make_rng(cfg.seed, Stream.AUGMENT1, epoch, step))
            x2 = augment_batch(x, cfg.augment, make_rng(cfg.seed, Stream.AUGMENT2, epoch, step))
            u = _forward_embed(pair.target, x1)
            g_out, tape_g = mlp_forward(pair.online, x2)
            p_out, tape_p = mlp_forward(pair.predictor, g_out)
            v = l2_normalize_rows(p_out)

            n = len(bank_rows)
            bank_arr = np.array(bank_rows) if n else np.zeros((0, cfg.emb_dim))
            sims = unit_sims(u, bank_arr) if n else np.zeros((len(sel), 0))
            B = len(sel)
            bank_z = np.zeros((B, kb, cfg.emb_dim))
            valid = np.zeros((B, kb), dtype=bool)
            for r in range(B):
                ranked = sorted(range(n), key=lambda j: (-sims[r, j], j))[:kb]
                for c, j in enumerate(ranked):
                    bank_z[r, c] = bank_arr[j]
                    valid[r, c] = True
            tz = u if cfg.include_target else None
            loss, grad_v = neighbor_loss(v, tz, bank_z, valid)
            grad_p = l2_normalize_backward_rows(p_out, grad_v)
            gW_p, gb_p, grad_g = mlp_backward(pair.predictor, tape_p, grad_p)
            gW_e, gb_e, _ = mlp_backward(pair.online, tape_g, grad_g)
            lr = cosine_lr(cfg.lr, global_step, total_steps)
            sgd_step(pair.trainable_params(), gW_e + gb_e + gW_p + gb_p, state,
                     lr, cfg.momentum, cfg.weight_decay, decay_mask)
            pair.step_ema()
            for row in u:
                bank_rows.append(row.copy())
                if len(bank_rows) > cfg.bank_size:
                    bank_rows.pop(0)
            epoch_losses.append(loss)
            global_step += 1
        losses.append(float(np.mean(np.asarray(epoch_losses))))
    return pair, losses


def train_byol_reference(data: Dataset, cfg: TrainConfig) -> tuple[EncoderPair, list[float]]:
    """Pull v straight to u, no bank anywhere. Matches train(mode="none",
    k=1, include_target=True) bit for bit."""
    rng_init = make_rng(cfg.seed, Stream.INIT)
    pair = EncoderPair.create(cfg.enc_sizes(data.dim), cfg.pred_sizes(), rng_init,
                              cfg.ema_momentum)
    state = SgdState.for_nets(pair.online, pair.predictor)
    decay_mask = pair.decay_mask()
    steps_per_epoch = (data.n + cfg.batch_size - 1) // cfg.batch_size
    total_steps = steps_per_epoch * cfg.epochs
    losses: list[float] = []
    global_step = 0
    for epoch in range(cfg.epochs):
        order = make_rng(cfg.seed, Stream.SHUFFLE, epoch).permutation(data.n)
        epoch_losses = []
        for step in range(steps_per_epoch):
            sel = order[step * cfg.batch_size:(step + 1) * cfg.batch_size]
            x = data.samples[sel]
            x1 = augment_batch(x, cfg.augment, make_rng(cfg.seed, Stream.AUGMENT1, epoch, step))
            x2 = augment_batch(x, cfg.augment, make_rng(cfg.seed, Stream.AUGMENT2, epoch, step))
            u = _forward_embed(pair.target, x1)
            g_out, tape_g = mlp_forward(pair.online, x2)
            p_out, tape_p = mlp_forward(pair.predictor, g_out)
            v = l2_normalize_rows(p_out)
            B = len(sel)
            loss, grad_v = neighbor_loss(v, u, np.zeros((B, 0, cfg.emb_dim)),
                                         np.zeros((B, 0), dtype=bool))
            grad_p = l2_normalize_backward_rows(p_out, grad_v)
            gW_p, gb_p, grad_g = mlp_backward(pair.predictor, tape_p, grad_p)
            gW_e, gb_e, _ = mlp_backward(pair.online, tape_g, grad_g)
            lr = cosine_lr(cfg.lr, global_step, total_steps)
            sgd_step(pair.trainable_params(), gW_e + gb_e + gW_p + gb_p, state,
                     lr, cfg.momentum, cfg.weight_decay, decay_mask)
            pair.step_ema()
            epoch_losses.append(loss)
            global_step += 1
        losses.append(float(np.mean(np.asarray(epoch_losses))))
    return pair, losses


# ---------------------------------------------------------------------------
# supervised baseline

def train_xent_baseline(data: Dataset, cfg: TrainConfig) -> tuple[Mlp, Mlp, list[float]]:
    """Encoder + linear-head classifier trained by cross-entropy on the
    (possibly noisy) labels, same augmentations and schedule as the
    grouping trainers. Returns (encoder, head, per-epoch losses); kNN
    evaluation uses the encoder's unit-norm outputs."""
    if not np.all(data.labeled_mask()):
        raise TrainError("cross-entropy baseline needs a fully labeled dataset")
    rng_init = make_rng(cfg.seed, Stream.INIT)
    enc = mlp_init(cfg.enc_sizes(data.dim), rng_init)
    head = mlp_init([cfg.emb_dim, data.num_classes], rng_init)
    state = SgdState.for_nets(enc, head)
    decay_mask = ([True] * len(enc.weights) + [False] * len(enc.biases)
                  + [True] * len(head.weights) + [False] * len(head.biases))
    steps_per_epoch = (data.n + cfg.batch_size - 1) // cfg.batch_size
    total_steps = steps_per_epoch * cfg.epochs
    losses: list[float] = []
    global_step = 0
    for epoch in range(cfg.epochs):
        order = make_rng(cfg.seed, Stream.SHUFFLE, epoch).permutation(data.n)
        epoch_losses = []
        for step in range(steps_per_epoch):
            sel = order[step * cfg.batch_size:(step + 1) * cfg.batch_size]
            x1 = augment_batch(data.samples[sel], cfg.augment,
                               make_rng(cfg.seed, Stream.AUGMENT1, epoch, step))
            y = data.labels[sel]
            h_out, tape_e = mlp_forward(enc, x1)
            logits, tape_h = mlp_forward(head, h_out)
            z = logits - logits.max(axis=1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
            loss = float(-logp[np.arange(len(sel)), y].mean())
            grad = np.exp(logp)
            grad[np.arange(len(sel)), y] -= 1.0
            grad /= len(sel)
            gW_h, gb_h, grad_enc = mlp_backward(head, tape_h, grad)
            gW_e, gb_e, _ = mlp_backward(enc, tape_e, grad_enc)
            lr = cosine_lr(cfg.lr, global_step, total_steps)
            sgd_step(enc.params() + head.params(), gW_e + gb_e + gW_h + gb_h,
                     state, lr, cfg.momentum, cfg.weight_decay, decay_mask)
            epoch_losses.append(loss)
            global_step += 1
        losses.append(float(np.mean(np.asarray(epoch_losses))))
    return enc, head, losses


def _finetune_stage(enc: Mlp, head: Mlp, data: Dataset, idx: np.ndarray,
                    labels: np.ndarray, cfg: TrainConfig, epochs: int,
                    lr: float, stage: int) -> None:
    """One cross-entropy fine-tuning pass over the samples in idx (labels is
    positionally aligned with idx). Step schedule: lr drops x0.1 three
    quarters of the way in, the published 15-of-20 recipe rescaled."""
    state = SgdState.for_nets(enc, head)
    decay_mask = ([True] * len(enc.weights) + [False] * len(enc.biases)
                  + [True] * len(head.weights) + [False] * len(head.biases))
    steps_per_epoch = (idx.size + cfg.batch_size - 1) // cfg.batch_size
    drop_at = (3 * epochs) // 4 if epochs >= 4 else epochs
    global_step = 0
    for epoch in range(epochs):
        step_lr = lr * (0.1 if epoch >= drop_at else 1.0)
        order = make_rng(cfg.seed, Stream.HEAD, 3 * 10**6 + stage,
                         epoch).permutation(idx.size)
        for step in range(steps_per_epoch):
            pos = order[step * cfg.batch_size:(step + 1) * cfg.batch_size]
            x = augment_batch(data.samples[idx[pos]], cfg.augment,
                              make_rng(cfg.seed, Stream.HEAD,
                                       4 * 10**6 + stage, global_step))
            y = labels[pos]
            h_out, tape_e = mlp_forward(enc, x)
            logits, tape_h = mlp_forward(head, h_out)
            probs = softmax(logits)
            grad = probs.copy()
            grad[np.arange(len(pos)), y] -= 1.0
            grad /= len(pos)
            gW_h, gb_h, grad_enc = mlp_backward(head, tape_h, grad)
            gW_e, gb_e, _ = mlp_backward(enc, tape_e, grad_enc)
            sgd_step(enc.params() + head.params(), gW_e + gb_e + gW_h + gb_h,
                     state, step_lr, cfg.momentum, cfg.weight_decay, decay_mask)
            global_step += 1


def semi_finetune(pair: EncoderPair, data: Dataset, cfg: TrainConfig,
                  epochs: int = 20, lr: float = 0.005,
                  conf_threshold: float = 0.9, stages: int = 2
                  ) -> tuple[Mlp, Mlp, np.ndarray]:
    """Two-stage supervised-plus-pseudo-label fine-tune of the online encoder.

    Stage 1 trains a copy of the encoder with a fresh 2-layer head on the
    labeled subset. The tuned model pseudo-labels the unlabeled samples;
    those with softmax confidence >= conf_threshold join the labeled set for
    stage 2 (same length, fresh optimizer state). Returns (encoder, head,
    indices of the pseudo-labeled samples used); stages=1 stops early for
    inspection of the first stage.
    """
    labeled = np.flatnonzero(data.labeled_mask())
    if labeled.size == 0:
        raise TrainError("fine-tuning needs labeled samples")
    enc = pair.online.copy()
    head = mlp_init([cfg.emb_dim, cfg.head_hidden, data.num_classes],
                    make_rng(cfg.seed, Stream.HEAD, 10**6))
    _finetune_stage(enc, head, data, labeled, data.labels[labeled], cfg,
                    epochs, lr, stage=1)
    pseudo_idx = np.zeros(0, dtype=np.int64)
    if stages < 2:
        return enc, head, pseudo_idx

    idx2 = labeled
    lab2 = data.labels[labeled]
    unl = np.flatnonzero(~data.labeled_mask())
    if unl.size:
        h_out, _ = mlp_forward(enc, data.samples[unl])
        logits, _ = mlp_forward(head, h_out)
        probs = softmax(logits)
        keep = probs.max(axis=1) >= conf_threshold
        pseudo_idx = unl[keep]
        if pseudo_idx.size:
            idx2 = np.concatenate([labeled, pseudo_idx])
            lab2 = np.concatenate([lab2, probs.argmax(axis=1)[keep].astype(np.int64)])
    _finetune_stage(enc, head, data, idx2, lab2, cfg, epochs, lr, stage=2)
    return enc, head, pseudo_idx
