"""Canonical in-memory and on-disk representation of instances, cohorts,
evidence masks, and search traces.

On disk a cohort is UTF-8 JSON lines: one header object carrying dims and a
format version, then one record per instance. The writer is canonical
(fixed key order, shortest-round-trip floats, compact separators) so that
save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

COHORT_FORMAT_VERSION = 1
TRACE_FORMAT_VERSION = 1

SPLITS = ("train", "val", "test")

TERM_THRESHOLDS_MET = "thresholds_met"
TERM_BUDGET_EXHAUSTED = "budget_exhausted"


class DataError(Exception):
    """Raised on parse errors or invariant violations in cohort/trace files."""


@dataclass(frozen=True)
class CohortDims:
    T: int
    D: int
    M_max: int
    E_dim: int
    D_cxr: int
    D_ecg: int


@dataclass(frozen=True)
class ContextBlock:
    """Fixed global-prior vectors; all-zero whenever the has_* flag is 0."""

    cxr: np.ndarray
    has_cxr: int
    ecg: np.ndarray
    has_ecg: int


@dataclass(frozen=True)
class MaskPair:
    """Binary selection masks over the two searchable streams."""

    ts_mask: np.ndarray
    note_mask: np.ndarray

    def size(self) -> int:
        return int(self.ts_mask.sum() + self.note_mask.sum())

    def key(self) -> tuple:
        return (self.ts_mask.tobytes(), self.note_mask.tobytes())


@dataclass(frozen=True)
class Instance:
    """One subject: hourly unit features, note-chunk embeddings with a
    presence mask, context vectors, and a binary label."""

    id: str
    ts: np.ndarray          # (T, D)
    note_emb: np.ndarray    # (M_max, E_dim)
    presence: np.ndarray    # (M_max,) in {0,1}
    context: ContextBlock
    label: int
    split: str
    gt: MaskPair | None = None  # planted ground truth, synthetic cohorts only

    @property
    def n_valid_notes(self) -> int:
        return int(self.presence.sum())


@dataclass
class Cohort:
    dims: CohortDims
    instances: list[Instance]
    meta: dict = field(default_factory=dict)  # extra header fields, preserved on save

    def split(self, name: str) -> list[Instance]:
        return [inst for inst in self.instances if inst.split == name]

    def labels(self, name: str) -> np.ndarray:
        return np.array([inst.label for inst in self.split(name)], dtype=np.int64)


@dataclass(frozen=True)
class TraceStep:
    unit: str         # "ts:<hour>" or "note:<index>", zero-based
    confidence: float
    stability: float
    size: int
    score: float
    prob: float


@dataclass(frozen=True)
class Trace:
    """Auditable record of one search: the returned state's lineage plus the
    full-input prediction it was asked to reproduce."""

    instance_id: str
    p_full: float
    y_hat_full: int
    steps: tuple[TraceStep, ...]
    final_mask: MaskPair
    termination: str

    @property
    def evidence_size(self) -> int:
        return self.final_mask.size()

    @property
    def exhausted(self) -> bool:
        return self.termination == TERM_BUDGET_EXHAUSTED


def unit_tag(stream: str, index: int) -> str:
    return f"{stream}:{index}"


def parse_unit_tag(tag: str) -> tuple[str, int]:
    stream, _, idx = tag.partition(":")
    if stream not in ("ts", "note") or not idx.isdigit():
        raise DataError(f"bad unit tag {tag!r}")
    return stream, int(idx)


def empty_mask(dims: CohortDims) -> MaskPair:
    return MaskPair(
        ts_mask=np.zeros(dims.T, dtype=np.int8),
        note_mask=np.zeros(dims.M_max, dtype=np.int8),
    )


def full_mask(dims: CohortDims, presence: np.ndarray) -> MaskPair:
    return MaskPair(
        ts_mask=np.ones(dims.T, dtype=np.int8),
        note_mask=presence.astype(np.int8).copy(),
    )


def mask_with_unit(mask: MaskPair, tag: str) -> MaskPair:
    """New MaskPair with one extra unit selected."""
    stream, idx = parse_unit_tag(tag)
    ts = mask.ts_mask.copy()
    note = mask.note_mask.copy()
    if stream == "ts":
        ts[idx] = 1
    else:
        note[idx] = 1
    return MaskPair(ts_mask=ts, note_mask=note)


def complement(mask: MaskPair, presence: np.ndarray) -> MaskPair:
    """Inverse selection: all unselected hours, all unselected valid chunks."""
    return MaskPair(
        ts_mask=(1 - mask.ts_mask).astype(np.int8),
        note_mask=((1 - mask.note_mask) * presence).astype(np.int8),
    )


def validate_mask(mask: MaskPair, dims: CohortDims, presence: np.ndarray,
                  instance_id: str = "?", what: str = "mask"):
    if mask.ts_mask.shape != (dims.T,) or mask.note_mask.shape != (dims.M_max,):
        raise DataError(f"instance {instance_id}: {what} has wrong shape")
    for arr in (mask.ts_mask, mask.note_mask):
        if not np.isin(arr, (0, 1)).all():
            raise DataError(f"instance {instance_id}: {what} is not binary")
    if (mask.note_mask > presence).any():
        raise DataError(f"instance {instance_id}: {what} note_mask selects padding")


def validate_instance(inst: Instance, dims: CohortDims):
    ident = inst.id
    if inst.split not in SPLITS:
        raise DataError(f"instance {ident}: unknown split {inst.split!r}")
    if inst.label not in (0, 1):
        raise DataError(f"instance {ident}: label must be 0/1")
    if inst.ts.shape != (dims.T, dims.D):
        raise DataError(f"instance {ident}: ts shape {inst.ts.shape} != ({dims.T}, {dims.D})")
    if inst.note_emb.shape != (dims.M_max, dims.E_dim):
        raise DataError(f"instance {ident}: note_emb shape mismatch")
    if inst.presence.shape != (dims.M_max,) or not np.isin(inst.presence, (0, 1)).all():
        raise DataError(f"instance {ident}: presence must be binary of length M_max")
    for name, vec, size, flag in (
        ("cxr", inst.context.cxr, dims.D_cxr, inst.context.has_cxr),
        ("ecg", inst.context.ecg, dims.D_ecg, inst.context.has_ecg),
    ):
        if vec.shape != (size,):
            raise DataError(f"instance {ident}: {name} length != {size}")
        if flag not in (0, 1):
            raise DataError(f"instance {ident}: has_{name} must be 0/1")
        if flag == 0 and np.any(vec != 0.0):
            raise DataError(f"instance {ident}: {name} must be all zeros when has_{name}=0")
    # padded note rows must be exactly zero
    if np.any(inst.note_emb[inst.presence == 0] != 0.0):
        raise DataError(f"instance {ident}: note_emb has nonzero padded rows")
    for arr in (inst.ts, inst.note_emb, inst.context.cxr, inst.context.ecg):
        if not np.isfinite(arr).all():
            raise DataError(f"instance {ident}: non-finite values")
    if inst.gt is not None:
        validate_mask(inst.gt, dims, inst.presence, ident, what="ground-truth mask")


def validate_cohort(cohort: Cohort):
    seen = set()
    for inst in cohort.instances:
        if inst.id in seen:
            raise DataError(f"duplicate instance id {inst.id}")
        seen.add(inst.id)
        validate_instance(inst, cohort.dims)


# --- serialization ---------------------------------------------------------

def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def _grid(a: np.ndarray):
    return [[float(v) for v in row] for row in a]


def _vec(a: np.ndarray):
    return [float(v) for v in a]


def _ivec(a: np.ndarray):
    return [int(v) for v in a]


def _header_dict(cohort: Cohort) -> dict:
    d = cohort.dims
    head = {
        "version": COHORT_FORMAT_VERSION,
        "T": d.T, "D": d.D, "M_max": d.M_max,
        "E_dim": d.E_dim, "D_cxr": d.D_cxr, "D_ecg": d.D_ecg,
    }
    for key in sorted(cohort.meta):
        head[key] = cohort.meta[key]
    return head


def _record_dict(inst: Instance) -> dict:
    rec = {
        "id": inst.id,
        "split": inst.split,
        "label": int(inst.label),
        "ts": _grid(inst.ts),
        "note_emb": _grid(inst.note_emb),
        "presence": _ivec(inst.presence),
        "cxr": _vec(inst.context.cxr),
        "has_cxr": int(inst.context.has_cxr),
        "ecg": _vec(inst.context.ecg),
        "has_ecg": int(inst.context.has_ecg),
    }
    if inst.gt is not None:
        rec["gt_ts"] = _ivec(inst.gt.ts_mask)
        rec["gt_note"] = _ivec(inst.gt.note_mask)
    return rec


def atomic_write_text(path: str, text: str):
    """Write via temp file + rename so readers never observe partial files."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", text=True)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_cohort(cohort: Cohort, path: str):
    lines = [_dumps(_header_dict(cohort))]
    lines.extend(_dumps(_record_dict(inst)) for inst in cohort.instances)
    atomic_write_text(path, "\n".join(lines) + "\n")


def _require(rec: dict, key: str, lineno: int):
    if key not in rec:
        raise DataError(f"line {lineno}: missing field {key!r}")
    return rec[key]


def load_cohort(path: str) -> Cohort:
    with open(path, encoding="utf-8") as fh:
        raw = fh.read().splitlines()
    if not raw:
        raise DataError("line 1: empty cohort file (missing header)")
    try:
        head = json.loads(raw[0])
    except json.JSONDecodeError as exc:
        raise DataError(f"line 1: header parse error: {exc}") from None
    if head.get("version") != COHORT_FORMAT_VERSION:
        raise DataError(f"line 1: unsupported format version {head.get('version')!r}")
    try:
        dims = CohortDims(T=int(head["T"]), D=int(head["D"]), M_max=int(head["M_max"]),
                          E_dim=int(head["E_dim"]), D_cxr=int(head["D_cxr"]),
                          D_ecg=int(head["D_ecg"]))
    except KeyError as exc:
        raise DataError(f"line 1: header missing {exc}") from None
    meta = {k: v for k, v in head.items()
            if k not in ("version", "T", "D", "M_max", "E_dim", "D_cxr", "D_ecg")}

    instances = []
    for lineno, line in enumerate(raw[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"line {lineno}: parse error: {exc}") from None
        gt = None
        if "gt_ts" in rec or "gt_note" in rec:
            gt = MaskPair(
                ts_mask=np.array(_require(rec, "gt_ts", lineno), dtype=np.int8),
                note_mask=np.array(_require(rec, "gt_note", lineno), dtype=np.int8),
            )
        inst = Instance(
            id=str(_require(rec, "id", lineno)),
            split=str(_require(rec, "split", lineno)),
            label=int(_require(rec, "label", lineno)),
            ts=np.array(_require(rec, "ts", lineno), dtype=np.float64).reshape(dims.T, dims.D),
            note_emb=np.array(_require(rec, "note_emb", lineno), dtype=np.float64).reshape(dims.M_max, dims.E_dim),
            presence=np.array(_require(rec, "presence", lineno), dtype=np.int8),
            context=ContextBlock(
                cxr=np.array(_require(rec, "cxr", lineno), dtype=np.float64),
                has_cxr=int(_require(rec, "has_cxr", lineno)),
                ecg=np.array(_require(rec, "ecg", lineno), dtype=np.float64),
                has_ecg=int(_require(rec, "has_ecg", lineno)),
            ),
            gt=gt,
        )
        instances.append(inst)
    cohort = Cohort(dims=dims, instances=instances, meta=meta)
    validate_cohort(cohort)
    return cohort


# --- trace files -----------------------------------------------------------

def trace_dict(trace: Trace) -> dict:
    return {
        "id": trace.instance_id,
        "p_full": float(trace.p_full),
        "y_hat_full": int(trace.y_hat_full),
        "steps": [
            {"unit": s.unit, "confidence": float(s.confidence),
             "stability": float(s.stability), "size": int(s.size),
             "score": float(s.score), "prob": float(s.prob)}
            for s in trace.steps
        ],
        "final_ts": _ivec(trace.final_mask.ts_mask),
        "final_note": _ivec(trace.final_mask.note_mask),
        "termination": trace.termination,
    }


def trace_from_dict(rec: dict) -> Trace:
    return Trace(
        instance_id=str(rec["id"]),
        p_full=float(rec["p_full"]),
        y_hat_full=int(rec["y_hat_full"]),
        steps=tuple(
            TraceStep(unit=s["unit"], confidence=float(s["confidence"]),
                      stability=float(s["stability"]), size=int(s["size"]),
                      score=float(s["score"]), prob=float(s["prob"]))
            for s in rec["steps"]
        ),
        final_mask=MaskPair(ts_mask=np.array(rec["final_ts"], dtype=np.int8),
                            note_mask=np.array(rec["final_note"], dtype=np.int8)),
        termination=str(rec["termination"]),
    )


def save_traces(traces: list[Trace], path: str):
    atomic_write_text(path, "\n".join(_dumps(trace_dict(t)) for t in traces) + "\n")


def load_traces(path: str) -> list[Trace]:
    traces = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                traces.append(trace_from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError) as exc:
                raise DataError(f"line {lineno}: bad trace record: {exc}") from None
    return traces
