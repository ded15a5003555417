"""Two-stream selector/predictor model with late logit fusion.

Each searchable modality gets one stream: a selector MLP that scores units,
a per-unit projection, context projections for the global priors, and a
classifier head mapping the pooled representation to a single logit. The
time-series encoder projects each (hour row, one-hot hour) pair and
mean-pools over the selected hours; notes are a masked mean pool over
projected chunk embeddings. Both streams inject projected context by
concatenation, and the fused probability is sigmoid(l_ts + l_note).

All forwards accept real-valued masks so the straight-through top-k path
can differentiate through them; hard 0/1 masks are the inference case.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .data import CohortDims, Instance, MaskPair, atomic_write_text, validate_mask
from .numerics import (Layer, Mlp, init_mlp, make_rng, mlp_backward,
                       mlp_backward_batch, mlp_forward, mlp_forward_batch,
                       sigmoid, softmax_temp)

MODEL_FORMAT_VERSION = 1

STREAM_NAMES = ("ts", "note")
PART_NAMES = ("selector", "unit_proj", "ctx_proj_cxr", "ctx_proj_ecg", "classifier")
PREDICTOR_PARTS = ("unit_proj", "ctx_proj_cxr", "ctx_proj_ecg", "classifier")

# instrumentation: how many eval caches have been built (tests reset this)
CACHE_BUILDS = 0


class FrozenPartError(RuntimeError):
    """Attempted parameter update on a frozen model part."""


@dataclass(frozen=True)
class StreamModel:
    """Selector + predictor for one modality."""

    selector: Mlp       # unit features -> scalar relevance score
    unit_proj: Mlp      # per-unit projection feeding the mean pool
    ctx_proj_cxr: Mlp
    ctx_proj_ecg: Mlp
    classifier: Mlp     # [pooled; ctx_cxr; ctx_ecg] -> logit

    def part(self, name: str) -> Mlp:
        if name not in PART_NAMES:
            raise ValueError(f"unknown part {name!r}")
        return getattr(self, name)

    def __post_init__(self):
        pooled = self.unit_proj.out_dim
        ctx = self.ctx_proj_cxr.out_dim + self.ctx_proj_ecg.out_dim
        if self.classifier.in_dim != pooled + ctx:
            raise ValueError("classifier input width != pooled + context widths")
        if self.selector.out_dim != 1 or self.classifier.out_dim != 1:
            raise ValueError("selector and classifier must output scalars")


@dataclass(frozen=True)
class ModelBundle:
    dims: CohortDims
    ts_stream: StreamModel
    note_stream: StreamModel
    ste_temp: float = 1.0
    eps: float = 1e-8
    frozen: frozenset = frozenset()   # part keys like "ts.selector"

    def __post_init__(self):
        if self.ste_temp <= 0 or self.eps <= 0:
            raise ValueError("ste_temp and eps must be positive")

    def stream(self, name: str) -> StreamModel:
        if name == "ts":
            return self.ts_stream
        if name == "note":
            return self.note_stream
        raise ValueError(f"unknown stream {name!r}")


def part_key(stream_name: str, part: str) -> str:
    return f"{stream_name}.{part}"


def with_part(bundle: ModelBundle, stream_name: str, part: str, mlp: Mlp) -> ModelBundle:
    """Replace one part, refusing if it is frozen."""
    key = part_key(stream_name, part)
    if key in bundle.frozen:
        raise FrozenPartError(f"part {key} is frozen")
    stream = replace(bundle.stream(stream_name), **{part: mlp})
    if stream_name == "ts":
        return replace(bundle, ts_stream=stream)
    return replace(bundle, note_stream=stream)


def freeze_parts(bundle: ModelBundle, keys) -> ModelBundle:
    return replace(bundle, frozen=bundle.frozen | frozenset(keys))


def freeze_predictors(bundle: ModelBundle) -> ModelBundle:
    keys = [part_key(s, p) for s in STREAM_NAMES for p in PREDICTOR_PARTS]
    return freeze_parts(bundle, keys)


def new_bundle(dims: CohortDims, rng, hidden: int = 16, ctx_out: int = 4,
               sel_hidden: int = 16, clf_hidden: int = 16,
               ste_temp: float = 1.0, eps: float = 1e-8) -> ModelBundle:
    """Fresh bundle with uniform fan-in init, biases at zero."""
    def stream(unit_dim, proj_in):
        return StreamModel(
            selector=init_mlp([unit_dim, sel_hidden, 1], ["relu", "identity"], rng),
            unit_proj=init_mlp([proj_in, hidden], ["identity"], rng),
            ctx_proj_cxr=init_mlp([dims.D_cxr, ctx_out], ["identity"], rng),
            ctx_proj_ecg=init_mlp([dims.D_ecg, ctx_out], ["identity"], rng),
            classifier=init_mlp([hidden + 2 * ctx_out, clf_hidden, 1],
                                ["relu", "identity"], rng),
        )
    return ModelBundle(
        dims=dims,
        ts_stream=stream(dims.D, dims.D + dims.T),
        note_stream=stream(dims.E_dim, dims.E_dim),
        ste_temp=ste_temp,
        eps=eps,
    )


def zero_bundle(dims: CohortDims, **kw) -> ModelBundle:
    """All-zero-parameter bundle; handy as a degenerate reference."""
    b = new_bundle(dims, make_rng(0), **kw)
    def zeroed(m: Mlp) -> Mlp:
        return Mlp(tuple(Layer(np.zeros_like(l.w), np.zeros_like(l.b), l.act)
                         for l in m.layers))
    for s in STREAM_NAMES:
        for p in PART_NAMES:
            b = with_part(b, s, p, zeroed(b.stream(s).part(p)))
    return b


# --- selector scoring and STE top-k ----------------------------------------

def score_units(stream: StreamModel, units: np.ndarray, presence: np.ndarray) -> np.ndarray:
    """Selector scores per unit; -inf wherever the presence mask is 0."""
    units = np.asarray(units, dtype=np.float64)
    presence = np.asarray(presence)
    if units.shape[0] != presence.shape[0]:
        raise ValueError("units row count != presence length")
    out, _ = mlp_forward_batch(stream.selector, units)
    scores = out[:, 0].copy()
    scores[presence == 0] = -np.inf
    return scores


def ste_topk(scores: np.ndarray, k: int, tau: float):
    """Hard top-k mask plus the softmax surrogate used for gradients.

    The hard mask keeps the min(k, #finite) largest scores, ties broken by
    lower index. The training-time composite value equals the hard mask in
    the forward pass while gradients flow through the surrogate only.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = np.asarray(scores, dtype=np.float64)
    n_finite = int(np.isfinite(scores).sum())
    if n_finite == 0:
        raise ValueError("no finite scores")
    order = np.lexsort((np.arange(scores.size), -scores))
    hard = np.zeros(scores.size)
    hard[order[:min(k, n_finite)]] = 1.0
    return hard, softmax_temp(scores, tau)


def ste_score_grad(soft: np.ndarray, mask_grad: np.ndarray, tau: float) -> np.ndarray:
    """Chain a d(loss)/d(mask) vector through the softmax surrogate.

    Returns d(loss)/d(scores) = J_softmax(s/tau)^T mask_grad. Entries whose
    surrogate weight is 0 (masked -inf scores) get zero gradient.
    """
    inner = float(soft @ mask_grad)
    return soft * (mask_grad - inner) / tau


# --- masked stream forwards (differentiable in the mask) --------------------

def _check_instance(dims: CohortDims, inst: Instance):
    if inst.ts.shape != (dims.T, dims.D) or inst.note_emb.shape != (dims.M_max, dims.E_dim):
        raise ValueError(f"instance {inst.id} does not match model dims")


def _hour_onehot(T: int) -> np.ndarray:
    return np.eye(T)


def ts_forward(bundle: ModelBundle, inst: Instance, mask):
    """Time-series stream logit under a (possibly real-valued) hour mask.

    Each hour row is concatenated with a one-hot hour encoding, projected,
    and mean-pooled with the mask as pooling weight. The mask is applied
    once, at the pool: for binary masks this is identical to zeroing
    non-selected hours first (m * proj(m*x) == m * proj(x) on {0,1}), and it
    keeps the straight-through gradient informative for unselected hours.
    Returns (logit, cache); the cache feeds ts_backward.
    """
    stream = bundle.ts_stream
    _check_instance(bundle.dims, inst)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != (bundle.dims.T,):
        raise ValueError("ts mask length mismatch")
    U = np.concatenate([inst.ts, _hour_onehot(bundle.dims.T)], axis=1)
    H, proj_cache = mlp_forward_batch(stream.unit_proj, U)
    denom = mask.sum() + bundle.eps
    summed = mask @ H
    pooled = summed / denom
    c1, c1_cache = mlp_forward(stream.ctx_proj_cxr, inst.context.cxr)
    c2, c2_cache = mlp_forward(stream.ctx_proj_ecg, inst.context.ecg)
    z = np.concatenate([pooled, c1, c2])
    out, clf_cache = mlp_forward(stream.classifier, z)
    cache = {"mask": mask, "H": H, "proj_cache": proj_cache, "summed": summed,
             "denom": denom, "c1_cache": c1_cache, "c2_cache": c2_cache,
             "clf_cache": clf_cache, "inst": inst}
    return float(out[0]), cache


def ts_backward(bundle: ModelBundle, cache, dlogit: float):
    """Gradients of dlogit * ts_logit w.r.t. stream parameters and the mask."""
    stream = bundle.ts_stream
    h = stream.unit_proj.out_dim
    c1w = stream.ctx_proj_cxr.out_dim
    clf_grads, dz = mlp_backward(stream.classifier, cache["clf_cache"],
                                 np.array([float(dlogit)]))
    dpooled, dc1, dc2 = dz[:h], dz[h:h + c1w], dz[h + c1w:]
    cxr_grads, _ = mlp_backward(stream.ctx_proj_cxr, cache["c1_cache"], dc1)
    ecg_grads, _ = mlp_backward(stream.ctx_proj_ecg, cache["c2_cache"], dc2)
    denom, mask, H = cache["denom"], cache["mask"], cache["H"]
    dsum = dpooled / denom
    ddenom = -float(cache["summed"] @ dpooled) / denom ** 2
    dH = np.outer(mask, dsum)
    proj_grads, _ = mlp_backward_batch(stream.unit_proj, cache["proj_cache"], dH)
    dmask = H @ dsum + ddenom
    grads = {"unit_proj": proj_grads, "ctx_proj_cxr": cxr_grads,
             "ctx_proj_ecg": ecg_grads, "classifier": clf_grads}
    return grads, dmask


def note_forward(bundle: ModelBundle, inst: Instance, mask):
    """Notes stream logit under a chunk mask; padding must stay unselected."""
    stream = bundle.note_stream
    _check_instance(bundle.dims, inst)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != (bundle.dims.M_max,):
        raise ValueError("note mask length mismatch")
    presence = inst.presence.astype(np.float64)
    if np.any((mask > 0) & (presence == 0)):
        raise ValueError(f"instance {inst.id}: padding selected")
    Phi, proj_cache = mlp_forward_batch(stream.unit_proj, inst.note_emb)
    w = mask * presence
    denom = w.sum() + bundle.eps
    summed = w @ Phi
    pooled = summed / denom
    c1, c1_cache = mlp_forward(stream.ctx_proj_cxr, inst.context.cxr)
    c2, c2_cache = mlp_forward(stream.ctx_proj_ecg, inst.context.ecg)
    z = np.concatenate([pooled, c1, c2])
    out, clf_cache = mlp_forward(stream.classifier, z)
    cache = {"w": w, "presence": presence, "Phi": Phi, "proj_cache": proj_cache,
             "summed": summed, "denom": denom, "c1_cache": c1_cache,
             "c2_cache": c2_cache, "clf_cache": clf_cache}
    return float(out[0]), cache


def note_backward(bundle: ModelBundle, cache, dlogit: float):
    stream = bundle.note_stream
    h = stream.unit_proj.out_dim
    c1w = stream.ctx_proj_cxr.out_dim
    clf_grads, dz = mlp_backward(stream.classifier, cache["clf_cache"],
                                 np.array([float(dlogit)]))
    dpooled, dc1, dc2 = dz[:h], dz[h:h + c1w], dz[h + c1w:]
    cxr_grads, _ = mlp_backward(stream.ctx_proj_cxr, cache["c1_cache"], dc1)
    ecg_grads, _ = mlp_backward(stream.ctx_proj_ecg, cache["c2_cache"], dc2)
    denom = cache["denom"]
    dsum = dpooled / denom
    ddenom = -float(cache["summed"] @ dpooled) / denom ** 2
    dPhi = np.outer(cache["w"], dsum)
    proj_grads, _ = mlp_backward_batch(stream.unit_proj, cache["proj_cache"], dPhi)
    dmask = cache["presence"] * (cache["Phi"] @ dsum + ddenom)
    grads = {"unit_proj": proj_grads, "ctx_proj_cxr": cxr_grads,
             "ctx_proj_ecg": ecg_grads, "classifier": clf_grads}
    return grads, dmask


def ts_logit(bundle: ModelBundle, inst: Instance, mask) -> float:
    return ts_forward(bundle, inst, mask)[0]


def note_logit(bundle: ModelBundle, inst: Instance, mask) -> float:
    return note_forward(bundle, inst, mask)[0]


def fuse(l_ts: float, l_note: float) -> float:
    """Late fusion by logit summation."""
    return float(sigmoid(l_ts + l_note))


def full_input_decision(bundle: ModelBundle, inst: Instance):
    """(p_full, y_hat) with every unit selected; ties at 0.5 go positive."""
    p = fuse(ts_logit(bundle, inst, np.ones(bundle.dims.T)),
             note_logit(bundle, inst, inst.presence.astype(np.float64)))
    return p, int(p >= 0.5)


# --- per-instance evaluation cache ------------------------------------------

class EvalCache:
    """Precomputed per-unit projections and context projections for one
    instance, so each masked evaluation costs one pooling + classifier pass
    per stream. Read-only after construction."""

    def __init__(self, bundle: ModelBundle, inst: Instance):
        global CACHE_BUILDS
        CACHE_BUILDS += 1
        self.bundle = bundle
        self.inst = inst
        dims = bundle.dims
        _check_instance(dims, inst)
        U = np.concatenate([inst.ts, _hour_onehot(dims.T)], axis=1)
        self.H_ts, _ = mlp_forward_batch(bundle.ts_stream.unit_proj, U)
        self.H_note, _ = mlp_forward_batch(bundle.note_stream.unit_proj, inst.note_emb)
        self.presence = inst.presence.astype(np.float64)
        self.ctx = {}
        for name in STREAM_NAMES:
            stream = bundle.stream(name)
            c1, _ = mlp_forward(stream.ctx_proj_cxr, inst.context.cxr)
            c2, _ = mlp_forward(stream.ctx_proj_ecg, inst.context.ecg)
            self.ctx[name] = np.concatenate([c1, c2])
        self.logit_full_ts = self.stream_logit("ts", np.ones(dims.T))
        self.logit_full_note = self.stream_logit("note", self.presence)
        self.p_full = fuse(self.logit_full_ts, self.logit_full_note)
        self.y_hat_full = int(self.p_full >= 0.5)

    def stream_logit(self, name: str, mask) -> float:
        """Logit of one stream for a binary mask, from cached projections."""
        mask = np.asarray(mask, dtype=np.float64)
        if name == "ts":
            H, w = self.H_ts, mask
        else:
            if np.any((mask > 0) & (self.presence == 0)):
                raise ValueError(f"instance {self.inst.id}: padding selected")
            H, w = self.H_note, mask * self.presence
        denom = w.sum() + self.bundle.eps
        pooled = (w @ H) / denom
        z = np.concatenate([pooled, self.ctx[name]])
        out, _ = mlp_forward(self.bundle.stream(name).classifier, z)
        return float(out[0])

    def probability(self, mask: MaskPair) -> float:
        return fuse(self.stream_logit("ts", mask.ts_mask),
                    self.stream_logit("note", mask.note_mask))

    def batch_logits(self, name: str, sums: np.ndarray, counts: np.ndarray) -> np.ndarray:
        """Classifier logits for many pooled-sum states of one stream.

        sums is (n, h) of mask-weighted projection sums, counts (n,) of mask
        popcounts; used by the beam search to score expansions in one pass.
        """
        pooled = sums / (counts + self.bundle.eps)[:, None]
        ctx = np.broadcast_to(self.ctx[name], (pooled.shape[0], self.ctx[name].size))
        Z = np.concatenate([pooled, ctx], axis=1)
        out, _ = mlp_forward_batch(self.bundle.stream(name).classifier, Z)
        return out[:, 0]


def build_eval_cache(bundle: ModelBundle, inst: Instance) -> EvalCache:
    return EvalCache(bundle, inst)


def evaluate_masked(bundle: ModelBundle, inst: Instance, mask: MaskPair,
                    cache: EvalCache | None = None) -> float:
    """Fused probability under an evidence mask pair."""
    validate_mask(mask, bundle.dims, inst.presence, inst.id)
    if cache is None:
        cache = build_eval_cache(bundle, inst)
    return cache.probability(mask)


# --- model file IO -----------------------------------------------------------

def _mlp_to_dict(m: Mlp) -> dict:
    return {"layers": [{"w": [[float(v) for v in row] for row in l.w],
                        "b": [float(v) for v in l.b],
                        "act": l.act} for l in m.layers]}


def _mlp_from_dict(d: dict) -> Mlp:
    return Mlp(tuple(Layer(w=np.array(l["w"], dtype=np.float64),
                           b=np.array(l["b"], dtype=np.float64),
                           act=l["act"]) for l in d["layers"]))


def bundle_to_dict(bundle: ModelBundle, meta: dict | None = None) -> dict:
    d = bundle.dims
    out = {
        "version": MODEL_FORMAT_VERSION,
        "dims": {"T": d.T, "D": d.D, "M_max": d.M_max, "E_dim": d.E_dim,
                 "D_cxr": d.D_cxr, "D_ecg": d.D_ecg},
        "ste_temp": float(bundle.ste_temp),
        "eps": float(bundle.eps),
        "frozen": sorted(bundle.frozen),
        "streams": {name: {part: _mlp_to_dict(bundle.stream(name).part(part))
                           for part in PART_NAMES}
                    for name in STREAM_NAMES},
    }
    if meta:
        for k in sorted(meta):
            out[k] = meta[k]
    return out


def bundle_from_dict(d: dict) -> ModelBundle:
    if d.get("version") != MODEL_FORMAT_VERSION:
        raise ValueError(f"unsupported model version {d.get('version')!r}")
    dims = CohortDims(**{k: int(v) for k, v in d["dims"].items()})
    streams = {}
    for name in STREAM_NAMES:
        parts = {part: _mlp_from_dict(d["streams"][name][part]) for part in PART_NAMES}
        streams[name] = StreamModel(**parts)
    return ModelBundle(dims=dims, ts_stream=streams["ts"], note_stream=streams["note"],
                       ste_temp=float(d["ste_temp"]), eps=float(d["eps"]),
                       frozen=frozenset(d.get("frozen", [])))


def save_model(bundle: ModelBundle, path: str, meta: dict | None = None):
    atomic_write_text(path, json.dumps(bundle_to_dict(bundle, meta),
                                       separators=(",", ":"), allow_nan=False) + "\n")


def load_model(path: str) -> ModelBundle:
    with open(path, encoding="utf-8") as fh:
        return bundle_from_dict(json.load(fh))
