"""Comparison mask producers: selector-score ranking, random selection,
input-times-gradient saliency, and the exhaustive-enumeration oracle used
for optimality-gap checks.
"""

from __future__ import annotations

from itertools import combinations
from math import comb

import numpy as np

from .data import Instance, MaskPair, empty_mask, mask_with_unit, parse_unit_tag, unit_tag
from .model import (EvalCache, ModelBundle, build_eval_cache, note_backward,
                    note_forward, score_units, ts_backward, ts_forward)
from .numerics import make_rng
from .search import SearchConfig, SearchState, candidate_units, score_state

ORACLE_MAX_UNITS = 14


def _stream_scores(bundle: ModelBundle, inst: Instance):
    ts = score_units(bundle.ts_stream, inst.ts, np.ones(bundle.dims.T, dtype=np.int8))
    note = score_units(bundle.note_stream, inst.note_emb, inst.presence)
    return ts, note


def _znorm(scores: np.ndarray) -> np.ndarray:
    finite = np.isfinite(scores)
    if not finite.any():
        return scores
    vals = scores[finite]
    sd = vals.std()
    out = scores.copy()
    out[finite] = (vals - vals.mean()) / sd if sd > 0 else 0.0
    return out


def mask_from_tags(tags, inst: Instance, dims) -> MaskPair:
    mask = empty_mask(dims)
    for tag in tags:
        mask = mask_with_unit(mask, tag)
    return mask


def topk_ranking_mask(bundle: ModelBundle, inst: Instance, k: int,
                      normalize: bool = False, per_modality: bool = False) -> MaskPair:
    """Top-k units by individual selector score, no search.

    Scores are pooled globally across modalities by default (ties by
    modality tag then index). normalize z-scores each modality first;
    per_modality splits the budget evenly instead of pooling, with leftover
    capacity spilling to the other stream.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    ts, note = _stream_scores(bundle, inst)
    if normalize:
        ts, note = _znorm(ts), _znorm(note)
    entries = [(float(s), ("note", j)) for j, s in enumerate(note) if np.isfinite(s)]
    entries += [(float(s), ("ts", t)) for t, s in enumerate(ts) if np.isfinite(s)]
    entries.sort(key=lambda e: (-e[0], e[1]))
    if per_modality:
        ts_pool = [e for e in entries if e[1][0] == "ts"]
        note_pool = [e for e in entries if e[1][0] == "note"]
        k_ts = min(k // 2 + k % 2, len(ts_pool))
        k_note = min(k - k_ts, len(note_pool))
        k_ts = min(k - k_note, len(ts_pool))  # spill unused note budget back
        chosen = ts_pool[:k_ts] + note_pool[:k_note]
    else:
        chosen = entries[:k]
    return mask_from_tags([unit_tag(*e[1]) for e in chosen], inst, bundle.dims)


def random_mask(inst: Instance, k: int, seed: int, T: int | None = None) -> MaskPair:
    """Uniform k-subset of the valid units."""
    T = inst.ts.shape[0] if T is None else T
    valid = [unit_tag("ts", t) for t in range(T)]
    valid += [unit_tag("note", j) for j in np.nonzero(inst.presence)[0]]
    if k > len(valid):
        raise ValueError(f"k={k} exceeds {len(valid)} valid units")
    rng = make_rng(seed)
    picked = rng.choice(len(valid), size=k, replace=False)
    dims_T = T
    mask = MaskPair(ts_mask=np.zeros(dims_T, dtype=np.int8),
                    note_mask=np.zeros(inst.presence.shape[0], dtype=np.int8))
    for i in picked:
        mask = mask_with_unit(mask, valid[int(i)])
    return mask


def saliency_rank(bundle: ModelBundle, inst: Instance) -> list[str]:
    """Valid units ordered by input-times-gradient magnitude.

    The gradient of the fused full-input logit is taken with respect to a
    relaxed mask at all-ones; since the mask value is 1, the attribution is
    just the absolute mask gradient.
    """
    _, ts_cache = ts_forward(bundle, inst, np.ones(bundle.dims.T))
    _, d_ts = ts_backward(bundle, ts_cache, 1.0)
    presence = inst.presence.astype(np.float64)
    _, note_cache = note_forward(bundle, inst, presence)
    _, d_note = note_backward(bundle, note_cache, 1.0)
    entries = [(abs(float(g)), ("ts", t)) for t, g in enumerate(d_ts)]
    entries += [(abs(float(g)), ("note", j)) for j, g in enumerate(d_note)
                if inst.presence[j] == 1]
    entries.sort(key=lambda e: (-e[0], e[1]))
    return [unit_tag(*e[1]) for e in entries]


def saliency_mask(bundle: ModelBundle, inst: Instance, k: int) -> MaskPair:
    if k < 1:
        raise ValueError("k must be >= 1")
    return mask_from_tags(saliency_rank(bundle, inst)[:k], inst, bundle.dims)


def exhaustive_best(bundle: ModelBundle, inst: Instance, k_max: int,
                    cfg: SearchConfig, cache: EvalCache | None = None):
    """Brute-force best state over all masks with 1 <= size <= k_max.

    Enumerates subsets of the candidate units, scores each with the search
    objective, and returns (mask, state) under the beam tie-breaking rule.
    A tractability guard refuses instances with more than 14 candidates.
    """
    if cache is None:
        cache = build_eval_cache(bundle, inst)
    candidates = candidate_units(bundle, inst, cfg)
    n = len(candidates)
    if n > ORACLE_MAX_UNITS:
        raise ValueError(f"instance too large for oracle ({n} > {ORACLE_MAX_UNITS} units)")
    if n == 0:
        raise ValueError("no candidate units to enumerate")
    best: tuple | None = None
    best_state: SearchState | None = None
    n_evaluated = 0
    for size in range(1, min(k_max, n) + 1):
        for subset in combinations(candidates, size):
            mask = mask_from_tags(subset, inst, bundle.dims)
            state = score_state(cache, mask, cfg)
            n_evaluated += 1
            key = (-state.score, state.size, tuple(sorted(subset)))
            if best is None or key < best:
                best, best_state = key, state
    expected = sum(comb(n, j) for j in range(1, min(k_max, n) + 1))
    assert n_evaluated == expected, "oracle enumeration count mismatch"
    return best_state.mask, best_state
