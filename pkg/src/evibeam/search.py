"""Inference-time beam search for compact evidence sets.

States are mask pairs over the two searchable streams. Each step expands
every beam state by one unused candidate unit, scores all expansions in one
batched pass against the per-instance eval cache, keeps the top-B states
(score desc, then fewer units, then lexicographic unit tags), and stops when
the best state clears both stopping thresholds or the step budget runs out.
On exhaustion the best state of the final beam is returned; exhaustion is
recorded as trace metadata and doubles as a reliability diagnostic.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import (TERM_BUDGET_EXHAUSTED, TERM_THRESHOLDS_MET, Cohort, Instance,
                   MaskPair, Trace, TraceStep, empty_mask, mask_with_unit,
                   parse_unit_tag, unit_tag)
from .metrics import MetricsReport, comprehensiveness, ece, sufficiency_eval
from .model import EvalCache, ModelBundle, build_eval_cache, score_units, sigmoid
from .synth import spurious_flag

STABILITY_SPACES = ("probability", "logit")


@dataclass(frozen=True)
class SearchConfig:
    beam_width: int = 8
    max_steps: int = 10
    n_ts_candidates: int = 24
    n_note_candidates: int = 20
    stability_weight: float = 1.0    # lambda: weight of the stability term
    sparsity_weight: float = 0.05    # mu: per-unit evidence cost
    conf_threshold: float = 0.9      # stop gate on confidence C
    stability_threshold: float = 0.9  # stop gate on stability S
    stability_space: str = "probability"

    def __post_init__(self):
        if self.beam_width < 1 or self.max_steps < 1:
            raise ValueError("beam_width and max_steps must be >= 1")
        if self.stability_weight < 0 or self.sparsity_weight < 0:
            raise ValueError("weights must be nonnegative")
        if self.stability_space not in STABILITY_SPACES:
            raise ValueError(f"stability_space must be one of {STABILITY_SPACES}")

    def with_budget(self, k: int) -> "SearchConfig":
        """Budgeted evaluation: dynamic stopping with the step cap set to k."""
        return replace(self, max_steps=k)

    def without_thresholds(self) -> "SearchConfig":
        return replace(self, conf_threshold=np.inf, stability_threshold=np.inf)


@dataclass(frozen=True)
class SearchState:
    mask: MaskPair
    confidence: float
    stability: float
    size: int
    score: float
    prob: float


def _stability(cfg: SearchConfig, p_full: float, p: float,
               logit_full: float, logit_m: float) -> float:
    if cfg.stability_space == "probability":
        return 1.0 - abs(p_full - p)
    d = abs(logit_full - logit_m)
    return 1.0 - d / (1.0 + d)


def _confidence(y_hat_full: int, p: float) -> float:
    return p if y_hat_full == 1 else 1.0 - p


def score_state(cache: EvalCache, mask: MaskPair, cfg: SearchConfig) -> SearchState:
    """Score one mask pair: confidence + lambda * stability - mu * size."""
    l_ts = cache.stream_logit("ts", mask.ts_mask)
    l_note = cache.stream_logit("note", mask.note_mask)
    p = float(sigmoid(l_ts + l_note))
    conf = _confidence(cache.y_hat_full, p)
    stab = _stability(cfg, cache.p_full, p,
                      cache.logit_full_ts + cache.logit_full_note, l_ts + l_note)
    size = mask.size()
    score = conf + cfg.stability_weight * stab - cfg.sparsity_weight * size
    return SearchState(mask=mask, confidence=conf, stability=stab, size=size,
                       score=score, prob=p)


def candidate_units(bundle: ModelBundle, inst: Instance, cfg: SearchConfig) -> list[str]:
    """Per-modality top-N unit tags by selector score, score-descending with
    ties broken by ascending index."""
    out = []
    for name, units, presence, cap in (
        ("ts", inst.ts, np.ones(bundle.dims.T, dtype=np.int8), cfg.n_ts_candidates),
        ("note", inst.note_emb, inst.presence, cfg.n_note_candidates),
    ):
        scores = score_units(bundle.stream(name), units, presence)
        order = np.lexsort((np.arange(scores.size), -scores))
        valid = [int(i) for i in order if np.isfinite(scores[i])]
        out.extend(unit_tag(name, i) for i in valid[:cap])
    return out


class _Node:
    __slots__ = ("state", "parent", "unit", "used", "tags", "sum_ts", "cnt_ts",
                 "sum_note", "cnt_note")

    def __init__(self, state, parent, unit, used, tags, sum_ts, cnt_ts,
                 sum_note, cnt_note):
        self.state = state
        self.parent = parent
        self.unit = unit
        self.used = used      # frozenset of tags
        self.tags = tags      # sorted tuple of tags, for deterministic ties
        self.sum_ts = sum_ts
        self.cnt_ts = cnt_ts
        self.sum_note = sum_note
        self.cnt_note = cnt_note

    def sort_key(self):
        return (-self.state.score, self.state.size, self.tags)


def _trace_from_node(cache: EvalCache, node, termination: str, dims) -> Trace:
    steps = []
    cur = node
    while cur is not None and cur.unit is not None:
        s = cur.state
        steps.append(TraceStep(unit=cur.unit, confidence=s.confidence,
                               stability=s.stability, size=s.size,
                               score=s.score, prob=s.prob))
        cur = cur.parent
    steps.reverse()
    final = node.state.mask if node.unit is not None else empty_mask(dims)
    return Trace(instance_id=cache.inst.id, p_full=cache.p_full,
                 y_hat_full=cache.y_hat_full, steps=tuple(steps),
                 final_mask=final, termination=termination)


def beam_search(bundle: ModelBundle, inst: Instance, cfg: SearchConfig,
                cache: EvalCache | None = None) -> Trace:
    """Search for a compact evidence set reproducing the full-input decision.

    The eval cache is built exactly once per search (or supplied by the
    caller); every expansion is scored through it.
    """
    if cache is None:
        cache = build_eval_cache(bundle, inst)
    dims = bundle.dims
    candidates = candidate_units(bundle, inst, cfg)
    root = _Node(state=None, parent=None, unit=None, used=frozenset(), tags=(),
                 sum_ts=np.zeros(cache.H_ts.shape[1]), cnt_ts=0,
                 sum_note=np.zeros(cache.H_note.shape[1]), cnt_note=0)
    if not candidates:
        return _trace_from_node(cache, root, TERM_BUDGET_EXHAUSTED, dims)

    cand_stream, cand_idx = zip(*(parse_unit_tag(t) for t in candidates))
    logit_full = cache.logit_full_ts + cache.logit_full_note
    beam = [root]
    for step in range(1, cfg.max_steps + 1):
        eligible = [(node, ci) for node in beam
                    for ci, tag in enumerate(candidates) if tag not in node.used]
        if not eligible:
            break
        n = len(eligible)
        sums_ts = np.empty((n, cache.H_ts.shape[1]))
        cnts_ts = np.empty(n)
        sums_note = np.empty((n, cache.H_note.shape[1]))
        cnts_note = np.empty(n)
        for row, (node, ci) in enumerate(eligible):
            if cand_stream[ci] == "ts":
                sums_ts[row] = node.sum_ts + cache.H_ts[cand_idx[ci]]
                cnts_ts[row] = node.cnt_ts + 1
                sums_note[row] = node.sum_note
                cnts_note[row] = node.cnt_note
            else:
                sums_ts[row] = node.sum_ts
                cnts_ts[row] = node.cnt_ts
                sums_note[row] = node.sum_note + cache.H_note[cand_idx[ci]]
                cnts_note[row] = node.cnt_note + 1
        l_ts = cache.batch_logits("ts", sums_ts, cnts_ts)
        l_note = cache.batch_logits("note", sums_note, cnts_note)
        logits = l_ts + l_note
        probs = sigmoid(logits)
        if cache.y_hat_full == 1:
            confs = probs
        else:
            confs = 1.0 - probs
        if cfg.stability_space == "probability":
            stabs = 1.0 - np.abs(cache.p_full - probs)
        else:
            d = np.abs(logit_full - logits)
            stabs = 1.0 - d / (1.0 + d)
        scores = confs + cfg.stability_weight * stabs - cfg.sparsity_weight * step

        nodes = []
        for row, (node, ci) in enumerate(eligible):
            tag = candidates[ci]
            state = SearchState(mask=mask_with_unit(
                node.state.mask if node.unit is not None else empty_mask(dims), tag),
                confidence=float(confs[row]), stability=float(stabs[row]),
                size=step, score=float(scores[row]), prob=float(probs[row]))
            nodes.append(_Node(
                state=state, parent=node, unit=tag,
                used=node.used | {tag}, tags=tuple(sorted(node.used | {tag})),
                sum_ts=sums_ts[row], cnt_ts=int(cnts_ts[row]),
                sum_note=sums_note[row], cnt_note=int(cnts_note[row])))
        nodes.sort(key=_Node.sort_key)
        seen = set()
        beam = []
        for nd in nodes:
            if nd.used in seen:
                continue
            seen.add(nd.used)
            beam.append(nd)
            if len(beam) == cfg.beam_width:
                break
        best = beam[0]
        if (best.state.confidence >= cfg.conf_threshold
                and best.state.stability >= cfg.stability_threshold):
            return _trace_from_node(cache, best, TERM_THRESHOLDS_MET, dims)
    return _trace_from_node(cache, beam[0], TERM_BUDGET_EXHAUSTED, dims)


def run_search_suite(bundle: ModelBundle, instances: list[Instance],
                     cfg: SearchConfig, budgets: list[int], seed: int = 0,
                     method: str = "beam"):
    """Beam search at each budget over a split; returns (reports, traces).

    One eval cache is built per instance and shared across budgets.
    """
    caches = [build_eval_cache(bundle, inst) for inst in instances]
    labels = np.array([inst.label for inst in instances])
    reports: list[MetricsReport] = []
    traces_by_budget: dict[int, list[Trace]] = {}
    for k in budgets:
        cfg_k = cfg.with_budget(k)
        traces = [beam_search(bundle, inst, cfg_k, cache=c)
                  for inst, c in zip(instances, caches)]
        masks = [t.final_mask for t in traces]
        roc, ap, mae = sufficiency_eval(bundle, instances, masks, caches=caches)
        p_masked = np.array([c.probability(m) for c, m in zip(caches, masks)])
        reports.append(MetricsReport(
            method=method, k=k, auroc=roc, auprc=ap, fidelity_mae=mae,
            ece=ece(labels, p_masked),
            comprehensiveness=comprehensiveness(bundle, instances, masks, caches=caches),
            mean_evidence=float(np.mean([t.evidence_size for t in traces])),
            exhaustion_rate=float(np.mean([t.exhausted for t in traces])),
            n=len(instances), seed=seed))
        traces_by_budget[k] = traces
    return reports, traces_by_budget


@dataclass(frozen=True)
class ExhaustionStats:
    tp_rate: float
    fp_rate: float
    ratio: float  # fp_rate / tp_rate; inf if tp_rate=0 < fp_rate; nan if both 0


def exhaustion_stats(traces: list[Trace], labels) -> ExhaustionStats:
    """Budget-exhaustion rates among positive predictions, split TP vs FP."""
    labels = np.asarray(labels)
    if len(traces) != labels.size:
        raise ValueError("one label per trace required")
    pos = [(t, y) for t, y in zip(traces, labels) if t.y_hat_full == 1]
    if not pos:
        raise ValueError("no positive predictions")
    tp = [t for t, y in pos if y == 1]
    fp = [t for t, y in pos if y == 0]
    tp_rate = float(np.mean([t.exhausted for t in tp])) if tp else 0.0
    fp_rate = float(np.mean([t.exhausted for t in fp])) if fp else 0.0
    if tp_rate > 0:
        ratio = fp_rate / tp_rate
    elif fp_rate > 0:
        ratio = float("inf")
    else:
        ratio = float("nan")
    return ExhaustionStats(tp_rate=tp_rate, fp_rate=fp_rate, ratio=ratio)


def selective_abstention(traces: list[Trace], labels):
    """Abstain on exhausted positive predictions.

    Returns (flags, fp_caught, tp_lost): the abstention flag per trace, the
    fraction of false positives flagged, and the fraction of true positives
    flagged.
    """
    labels = np.asarray(labels)
    flags = [t.y_hat_full == 1 and t.exhausted for t in traces]
    fp_idx = [i for i, (t, y) in enumerate(zip(traces, labels))
              if t.y_hat_full == 1 and y == 0]
    tp_idx = [i for i, (t, y) in enumerate(zip(traces, labels))
              if t.y_hat_full == 1 and y == 1]
    fp_caught = float(np.mean([flags[i] for i in fp_idx])) if fp_idx else 0.0
    tp_lost = float(np.mean([flags[i] for i in tp_idx])) if tp_idx else 0.0
    return flags, fp_caught, tp_lost


def evidence_to_converge(trace: Trace, max_steps: int) -> int:
    """Steps until thresholds were met; exhausted searches count the cap."""
    return len(trace.steps) if trace.termination == TERM_THRESHOLDS_MET else max_steps


def _convergence_summary(traces: list[Trace], max_steps: int) -> dict:
    ev = [evidence_to_converge(t, max_steps) for t in traces]
    conv = [t.termination == TERM_THRESHOLDS_MET for t in traces]
    return {"n": len(traces),
            "mean_evidence_to_converge": float(np.mean(ev)) if ev else float("nan"),
            "convergence_rate": float(np.mean(conv)) if conv else float("nan")}


def spurious_experiment(clean_cohort: Cohort, spurious_cohort: Cohort,
                        train_cfg, search_cfg: SearchConfig) -> dict:
    """Train one model per cohort with identical config/seed and compare
    search behavior on each cohort's own test split.

    Reports mean evidence-to-converge and convergence rate per model, their
    ratios, and per-flag breakdowns on the spurious model (by injected flag
    value and by flag/label agreement).
    """
    from .training import train_full  # local import to avoid a cycle

    result = {}
    per_model_traces = {}
    for name, cohort in (("clean", clean_cohort), ("spurious", spurious_cohort)):
        bundle, _ = train_full(cohort, train_cfg)
        test = cohort.split("test")
        traces = [beam_search(bundle, inst, search_cfg) for inst in test]
        result[name] = _convergence_summary(traces, search_cfg.max_steps)
        per_model_traces[name] = (test, traces)

    result["evidence_ratio"] = (result["spurious"]["mean_evidence_to_converge"]
                                / result["clean"]["mean_evidence_to_converge"])
    result["convergence_rate_ratio"] = (result["spurious"]["convergence_rate"]
                                        / result["clean"]["convergence_rate"])

    feature = spurious_cohort.meta.get("spurious_feature")
    if feature is not None:
        test, traces = per_model_traces["spurious"]
        flags = [spurious_flag(inst, int(feature)) for inst in test]
        by_flag = {}
        for value in (0, 1):
            sel = [t for t, f in zip(traces, flags) if f == value]
            by_flag[f"flag={value}"] = _convergence_summary(sel, search_cfg.max_steps)
        for agree, tag in ((True, "flag_consistent"), (False, "flag_inconsistent")):
            sel = [t for t, f, inst in zip(traces, flags, test)
                   if (f == inst.label) == agree]
            by_flag[tag] = _convergence_summary(sel, search_cfg.max_steps)
        result["spurious_breakdown"] = by_flag
    return result
