"""Two-phase training.

Phase I fits each stream's predictor (projection, context projections,
classifier) on full evidence with class-balanced BCE; the hard top-k path is
never invoked. Phase II freezes the predictors and trains only the selector
MLPs: units are scored, a hard top-k mask is taken for the forward pass, and
gradients reach the selector through the softmax surrogate.

Plain SGD, per-epoch shuffling from a seeded generator, and val-AUROC model
selection keep runs bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Cohort, Instance
from .metrics import auroc
from .model import (PREDICTOR_PARTS, ModelBundle, freeze_predictors, new_bundle,
                    note_backward, note_forward, score_units, ste_score_grad,
                    ste_topk, ts_backward, ts_forward, with_part)
from .numerics import add_grads, derive_seed, make_rng, mlp_backward_batch, \
    mlp_forward_batch, sgd_step, sigmoid, zero_grads


@dataclass(frozen=True)
class TrainConfig:
    epochs_phase1: int = 30
    epochs_phase2: int = 15
    lr: float = 0.05
    batch_size: int = 32
    k_train: int = 5
    ste_temp: float = 1.0
    hidden: int = 16
    ctx_out: int = 4
    sel_hidden: int = 16
    clf_hidden: int = 16
    seed: int = 0

    def validate(self, T: int):
        if not 1 <= self.k_train <= T:
            raise ValueError("k_train must be in [1, T]")
        if self.lr <= 0 or self.batch_size < 1:
            raise ValueError("bad lr or batch_size")


def class_balanced_bce(logit: float, y: int, pos_weight: float):
    """Weighted BCE from the pre-sigmoid logit, with its logit gradient.

    loss = -w_y [y log p + (1-y) log(1-p)], w_1 = pos_weight, w_0 = 1,
    computed in log-space so saturated logits cannot overflow. The returned
    gradient is w_y (p - y).
    """
    w = pos_weight if y == 1 else 1.0
    # softplus(x) = log(1 + e^x) = logaddexp(0, x)
    loss = w * float(np.logaddexp(0.0, -logit if y == 1 else logit))
    grad = w * (float(sigmoid(logit)) - y)
    return loss, grad


def pos_weight_for(instances: list[Instance]) -> float:
    """Exact negative/positive class ratio of a split."""
    labels = np.array([i.label for i in instances])
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("degenerate cohort: train split has a single class")
    return n_neg / n_pos


def _full_stream_mask(bundle: ModelBundle, inst: Instance, stream_name: str):
    if stream_name == "ts":
        return np.ones(bundle.dims.T)
    return inst.presence.astype(np.float64)


def _stream_fwd(stream_name):
    return ts_forward if stream_name == "ts" else note_forward


def _stream_bwd(stream_name):
    return ts_backward if stream_name == "ts" else note_backward


def stream_probabilities(bundle: ModelBundle, stream_name: str,
                         instances: list[Instance]) -> np.ndarray:
    """Per-stream full-evidence probabilities, for val AUROC."""
    fwd = _stream_fwd(stream_name)
    out = np.empty(len(instances))
    for i, inst in enumerate(instances):
        logit, _ = fwd(bundle, inst, _full_stream_mask(bundle, inst, stream_name))
        out[i] = sigmoid(logit)
    return out


def _batches(n: int, batch_size: int, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _train_stream_phase1(bundle, stream_name, cohort, cfg, pos_w, log):
    train = cohort.split("train")
    val = cohort.split("val")
    val_labels = np.array([i.label for i in val])
    rng = make_rng(derive_seed(cfg.seed, f"phase1:{stream_name}"))
    fwd, bwd = _stream_fwd(stream_name), _stream_bwd(stream_name)
    best_auroc, best_stream = -np.inf, bundle.stream(stream_name)

    for epoch in range(cfg.epochs_phase1):
        epoch_loss = 0.0
        for batch in _batches(len(train), cfg.batch_size, rng):
            stream = bundle.stream(stream_name)
            acc = {p: zero_grads(stream.part(p)) for p in PREDICTOR_PARTS}
            for idx in batch:
                inst = train[idx]
                logit, cache = fwd(bundle, inst, _full_stream_mask(bundle, inst, stream_name))
                loss, dlogit = class_balanced_bce(logit, inst.label, pos_w)
                grads, _ = bwd(bundle, cache, dlogit)
                for p in PREDICTOR_PARTS:
                    add_grads(acc[p], grads[p])
                epoch_loss += loss
            scale = 1.0 / len(batch)
            for p in PREDICTOR_PARTS:
                bundle = with_part(bundle, stream_name, p,
                                   sgd_step(stream.part(p), acc[p], cfg.lr * scale))
        val_auroc = auroc(val_labels, stream_probabilities(bundle, stream_name, val))
        log.append({"phase": 1, "stream": stream_name, "epoch": epoch,
                    "split": "train", "loss": epoch_loss / len(train), "auroc": ""})
        log.append({"phase": 1, "stream": stream_name, "epoch": epoch,
                    "split": "val", "loss": "", "auroc": val_auroc})
        if val_auroc > best_auroc:
            best_auroc, best_stream = val_auroc, bundle.stream(stream_name)

    for p in PREDICTOR_PARTS:
        bundle = with_part(bundle, stream_name, p, best_stream.part(p))
    return bundle


def train_phase1(cohort: Cohort, cfg: TrainConfig):
    """Train both predictors on full evidence; selectors stay at init.

    Returns (bundle, log rows). The best val-AUROC epoch's parameters are
    kept per stream.
    """
    cfg.validate(cohort.dims.T)
    pos_w = pos_weight_for(cohort.split("train"))
    bundle = new_bundle(cohort.dims, make_rng(derive_seed(cfg.seed, "init")),
                        hidden=cfg.hidden, ctx_out=cfg.ctx_out,
                        sel_hidden=cfg.sel_hidden, clf_hidden=cfg.clf_hidden,
                        ste_temp=cfg.ste_temp)
    log: list[dict] = []
    for stream_name in ("ts", "note"):
        bundle = _train_stream_phase1(bundle, stream_name, cohort, cfg, pos_w, log)
    return bundle, log


def _stream_units(inst: Instance, stream_name: str):
    if stream_name == "ts":
        return inst.ts, np.ones(inst.ts.shape[0], dtype=np.int8)
    return inst.note_emb, inst.presence


def _train_stream_phase2(bundle, stream_name, cohort, cfg, pos_w, log):
    train = cohort.split("train")
    val = cohort.split("val")
    val_labels = np.array([i.label for i in val])
    rng = make_rng(derive_seed(cfg.seed, f"phase2:{stream_name}"))
    fwd, bwd = _stream_fwd(stream_name), _stream_bwd(stream_name)

    def masked_prob(inst):
        units, presence = _stream_units(inst, stream_name)
        scores = score_units(bundle.stream(stream_name), units, presence)
        hard, _ = ste_topk(scores, cfg.k_train, cfg.ste_temp)
        logit, _ = fwd(bundle, inst, hard)
        return sigmoid(logit)

    for epoch in range(cfg.epochs_phase2):
        epoch_loss = 0.0
        for batch in _batches(len(train), cfg.batch_size, rng):
            stream = bundle.stream(stream_name)
            acc = zero_grads(stream.selector)
            for idx in batch:
                inst = train[idx]
                units, presence = _stream_units(inst, stream_name)
                sel_out, sel_cache = mlp_forward_batch(stream.selector, units)
                scores = sel_out[:, 0].copy()
                scores[presence == 0] = -np.inf
                hard, soft = ste_topk(scores, cfg.k_train, cfg.ste_temp)
                logit, cache = fwd(bundle, inst, hard)
                loss, dlogit = class_balanced_bce(logit, inst.label, pos_w)
                _, dmask = bwd(bundle, cache, dlogit)
                dscores = ste_score_grad(soft, dmask, cfg.ste_temp)
                sel_grads, _ = mlp_backward_batch(stream.selector, sel_cache,
                                                  dscores[:, None])
                add_grads(acc, sel_grads)
                epoch_loss += loss
            scale = 1.0 / len(batch)
            bundle = with_part(bundle, stream_name, "selector",
                               sgd_step(stream.selector, acc, cfg.lr * scale))
        val_auroc = auroc(val_labels, np.array([masked_prob(i) for i in val]))
        log.append({"phase": 2, "stream": stream_name, "epoch": epoch,
                    "split": "train", "loss": epoch_loss / len(train), "auroc": ""})
        log.append({"phase": 2, "stream": stream_name, "epoch": epoch,
                    "split": "val", "loss": "", "auroc": val_auroc})
    return bundle


def train_phase2(cohort: Cohort, bundle: ModelBundle, cfg: TrainConfig):
    """Train only the selectors through STE top-k masking.

    Predictors are frozen first; any attempt to update them raises
    FrozenPartError, so phase-2 structurally cannot leak gradients.
    Returns (bundle, log rows).
    """
    cfg.validate(cohort.dims.T)
    pos_w = pos_weight_for(cohort.split("train"))
    bundle = freeze_predictors(bundle)
    log: list[dict] = []
    for stream_name in ("ts", "note"):
        bundle = _train_stream_phase2(bundle, stream_name, cohort, cfg, pos_w, log)
    return bundle, log


def train_full(cohort: Cohort, cfg: TrainConfig):
    """Phase I then Phase II; returns (bundle, combined log)."""
    bundle, log1 = train_phase1(cohort, cfg)
    bundle, log2 = train_phase2(cohort, bundle, cfg)
    return bundle, log1 + log2
