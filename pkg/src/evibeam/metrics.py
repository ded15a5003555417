"""Predictive and faithfulness metrics.

AUROC uses the rank (Mann-Whitney) formulation with ties counted half;
AUPRC is average precision with stepwise interpolation; ECE uses equal-width
bins. Sufficiency evaluates masked predictions against labels and against
the full-input probabilities; comprehensiveness measures the confidence drop
in the originally predicted class when selected evidence is removed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Instance, MaskPair, complement
from .model import EvalCache, ModelBundle, build_eval_cache


def auroc(labels, scores) -> float:
    """P(random positive outranks random negative), ties counting 1/2."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.shape != scores.shape or labels.ndim != 1:
        raise ValueError("labels/scores shape mismatch")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auroc needs both classes")
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(scores.size, dtype=np.float64)
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # average rank, 1-based
        i = j + 1
    r_pos = float(ranks[labels == 1].sum())
    return (r_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def auprc(labels, scores) -> float:
    """Average precision: sum of precision at each recall increment."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int((labels == 1).sum())
    if n_pos == 0:
        raise ValueError("auprc needs at least one positive")
    order = np.argsort(-scores, kind="mergesort")
    y = labels[order]
    s = scores[order]
    tp = np.cumsum(y == 1)
    fp = np.cumsum(y == 0)
    # threshold boundaries: last index of each tied-score group
    last = np.nonzero(np.append(s[1:] != s[:-1], True))[0]
    tp_g, fp_g = tp[last], fp[last]
    precision = tp_g / (tp_g + fp_g)
    recall_inc = np.diff(np.append(0, tp_g)) / n_pos
    return float((precision * recall_inc).sum())


def ece(labels, probs, n_bins: int = 10) -> float:
    """Expected calibration error over equal-width bins; empty bins skipped."""
    labels = np.asarray(labels, dtype=np.float64)
    probs = np.asarray(probs, dtype=np.float64)
    if np.any((probs < 0) | (probs > 1)):
        raise ValueError("probs must lie in [0, 1]")
    idx = np.minimum((probs * n_bins).astype(np.int64), n_bins - 1)
    total = 0.0
    for b in range(n_bins):
        sel = idx == b
        n_b = int(sel.sum())
        if n_b == 0:
            continue
        acc = labels[sel].mean()
        conf = probs[sel].mean()
        total += (n_b / probs.size) * abs(acc - conf)
    return total


def fidelity_mae(p_full, p_masked) -> float:
    """Mean absolute gap between full-input and masked probabilities."""
    p_full = np.asarray(p_full, dtype=np.float64)
    p_masked = np.asarray(p_masked, dtype=np.float64)
    if p_full.shape != p_masked.shape:
        raise ValueError("length mismatch")
    return float(np.abs(p_full - p_masked).mean())


def caches_for(bundle: ModelBundle, instances: list[Instance]) -> list[EvalCache]:
    return [build_eval_cache(bundle, inst) for inst in instances]


def sufficiency_eval(bundle: ModelBundle, instances: list[Instance],
                     masks: list[MaskPair], caches: list[EvalCache] | None = None):
    """(auroc, auprc, fidelity_mae) of masked predictions.

    AUROC/AUPRC score the masked probabilities against true labels; the MAE
    compares them to the full-input probabilities.
    """
    if len(masks) != len(instances):
        raise ValueError("one mask per instance required")
    if caches is None:
        caches = caches_for(bundle, instances)
    labels = np.array([inst.label for inst in instances])
    p_masked = np.array([c.probability(m) for c, m in zip(caches, masks)])
    p_full = np.array([c.p_full for c in caches])
    return auroc(labels, p_masked), auprc(labels, p_masked), fidelity_mae(p_full, p_masked)


def comprehensiveness(bundle: ModelBundle, instances: list[Instance],
                      masks: list[MaskPair], caches: list[EvalCache] | None = None) -> float:
    """Mean drop in confidence for the originally predicted class when the
    selected evidence is removed (complement evaluated instead)."""
    if len(masks) != len(instances):
        raise ValueError("one mask per instance required")
    if caches is None:
        caches = caches_for(bundle, instances)
    drops = np.empty(len(instances))
    for i, (inst, mask, cache) in enumerate(zip(instances, masks, caches)):
        rem = complement(mask, inst.presence)
        p_rem = cache.probability(rem)
        if cache.y_hat_full == 1:
            drops[i] = cache.p_full - p_rem
        else:
            drops[i] = (1.0 - cache.p_full) - (1.0 - p_rem)
    return float(drops.mean())


@dataclass(frozen=True)
class MetricsReport:
    """One (method, budget) cell of the evaluation grid."""

    method: str
    k: int
    auroc: float
    auprc: float
    fidelity_mae: float
    ece: float
    comprehensiveness: float
    mean_evidence: float
    exhaustion_rate: float
    n: int
    seed: int

    def __post_init__(self):
        if self.n <= 0:
            raise ValueError("n must be positive")


SUITE_COLUMNS = ("method", "k", "auroc", "auprc", "fidelity_mae", "ece",
                 "comprehensiveness", "mean_evidence", "exhaustion_rate", "n", "seed")


def report_row(r: MetricsReport) -> str:
    vals = [r.method, r.k, r.auroc, r.auprc, r.fidelity_mae, r.ece,
            r.comprehensiveness, r.mean_evidence, r.exhaustion_rate, r.n, r.seed]
    return ",".join(repr(v) if isinstance(v, float) else str(v) for v in vals)
