"""Synthetic cohorts with planted ground-truth evidence.

Positive instances get a signal bump on a few hour rows (over a fixed subset
of feature channels) and a few label-informative note-chunk embeddings; the
planted units are recorded as per-instance ground-truth masks so selector
recovery and faithfulness claims can be tested at desk scale. A configurable
fraction of positives carries its signal only in notes, which forces any
faithful explainer to search across modalities.

Generation is a pure function of the config: every instance draws from its
own seed derived from (cfg.seed, split, index).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import Cohort, CohortDims, ContextBlock, Instance, MaskPair
from .numerics import derive_seed, make_rng


@dataclass(frozen=True)
class SynthConfig:
    n_train: int = 2000
    n_val: int = 400
    n_test: int = 400
    T: int = 24
    D: int = 8
    M_max: int = 20
    E_dim: int = 16
    D_cxr: int = 4
    D_ecg: int = 4
    prevalence: float = 0.12
    planted_ts: int = 3
    planted_note: int = 2
    signal_strength: float = 2.5
    noise_sd: float = 1.0
    notes_only_frac: float = 0.3   # positives whose signal lives only in notes
    note_signal_scale: float = 2.0  # counteracts mean-pool dilution over chunks
    ctx_coef: float = 0.2          # weak label component in context vectors
    ctx_presence: float = 0.85
    seed: int = 0

    def validate(self):
        if not 0.0 < self.prevalence < 1.0:
            raise ValueError("prevalence must be in (0, 1)")
        if self.planted_ts > self.T:
            raise ValueError("planted_ts > T")
        if self.planted_note > self.M_max:
            raise ValueError("planted_note > M_max")
        if self.noise_sd < 0 or self.signal_strength < 0:
            raise ValueError("negative scale")

    @property
    def dims(self) -> CohortDims:
        return CohortDims(T=self.T, D=self.D, M_max=self.M_max, E_dim=self.E_dim,
                          D_cxr=self.D_cxr, D_ecg=self.D_ecg)


@dataclass(frozen=True)
class SpuriousConfig:
    train_correlation: float = 0.8
    test_correlation: float = 0.0
    feature: int = 0

    def validate(self):
        for c in (self.train_correlation, self.test_correlation):
            if not 0.0 <= c <= 1.0:
                raise ValueError("correlations must be in [0, 1]")


def _unit_vector(rng, dim):
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def _make_instance(cfg: SynthConfig, split: str, index: int, channels, note_dir,
                   cxr_dir, ecg_dir) -> Instance:
    rng = make_rng(derive_seed(cfg.seed, f"inst:{split}:{index}"))
    label = int(rng.random() < cfg.prevalence)

    ts = cfg.noise_sd * rng.standard_normal((cfg.T, cfg.D))
    n_valid = int(rng.integers(cfg.planted_note, cfg.M_max + 1))
    presence = np.zeros(cfg.M_max, dtype=np.int8)
    presence[:n_valid] = 1
    note_emb = np.zeros((cfg.M_max, cfg.E_dim))
    note_emb[:n_valid] = cfg.noise_sd * rng.standard_normal((n_valid, cfg.E_dim))

    gt_ts = np.zeros(cfg.T, dtype=np.int8)
    gt_note = np.zeros(cfg.M_max, dtype=np.int8)
    if label == 1:
        notes_only = rng.random() < cfg.notes_only_frac
        if not notes_only:
            rows = rng.choice(cfg.T, size=cfg.planted_ts, replace=False)
            ts[np.ix_(rows, channels)] += cfg.signal_strength
            gt_ts[rows] = 1
        chunks = rng.choice(n_valid, size=cfg.planted_note, replace=False)
        note_emb[chunks] += cfg.note_signal_scale * cfg.signal_strength * note_dir
        gt_note[chunks] = 1

    has_cxr = int(rng.random() < cfg.ctx_presence)
    has_ecg = int(rng.random() < cfg.ctx_presence)
    cxr = np.zeros(cfg.D_cxr)
    ecg = np.zeros(cfg.D_ecg)
    if has_cxr:
        cxr = cfg.noise_sd * rng.standard_normal(cfg.D_cxr) \
            + cfg.ctx_coef * cfg.signal_strength * label * cxr_dir
    if has_ecg:
        ecg = cfg.noise_sd * rng.standard_normal(cfg.D_ecg) \
            + cfg.ctx_coef * cfg.signal_strength * label * ecg_dir

    return Instance(
        id=f"{split}-{index:05d}",
        ts=ts,
        note_emb=note_emb,
        presence=presence,
        context=ContextBlock(cxr=cxr, has_cxr=has_cxr, ecg=ecg, has_ecg=has_ecg),
        label=label,
        split=split,
        gt=MaskPair(ts_mask=gt_ts, note_mask=gt_note),
    )


def signal_channels(cfg: SynthConfig) -> np.ndarray:
    """Feature columns carrying the planted time-series signal.

    Column 0 is never used so that spurious injection (default feature 0)
    cannot overwrite genuine signal.
    """
    rng = make_rng(derive_seed(cfg.seed, "channels"))
    n = min(3, cfg.D - 1)
    return np.sort(rng.choice(np.arange(1, cfg.D), size=n, replace=False))


def generate_cohort(cfg: SynthConfig) -> Cohort:
    """Deterministically generate a cohort with planted evidence."""
    cfg.validate()
    channels = signal_channels(cfg)
    dir_rng = make_rng(derive_seed(cfg.seed, "directions"))
    note_dir = _unit_vector(dir_rng, cfg.E_dim)
    cxr_dir = _unit_vector(dir_rng, cfg.D_cxr)
    ecg_dir = _unit_vector(dir_rng, cfg.D_ecg)

    instances = []
    for split, count in (("train", cfg.n_train), ("val", cfg.n_val), ("test", cfg.n_test)):
        for i in range(count):
            instances.append(_make_instance(cfg, split, i, channels, note_dir,
                                            cxr_dir, ecg_dir))
    return Cohort(dims=cfg.dims, instances=instances)


def inject_spurious(cohort: Cohort, scfg: SpuriousConfig, seed: int) -> Cohort:
    """Overwrite one feature column with a binary flag tied to the label.

    With correlation c > 0 the flag equals the label with probability c
    (expected flag/label agreement is exactly c); c = 0 means the flag is an
    independent fair coin. Train and val splits use train_correlation, the
    test split uses test_correlation. The flag is constant across all hours
    so any selected window exposes it.
    """
    scfg.validate()
    if scfg.feature >= cohort.dims.D:
        raise ValueError(f"feature index {scfg.feature} >= D={cohort.dims.D}")
    out = []
    for inst in cohort.instances:
        corr = scfg.test_correlation if inst.split == "test" else scfg.train_correlation
        rng = make_rng(derive_seed(seed, f"spurious:{inst.id}"))
        if corr == 0.0:
            flag = int(rng.random() < 0.5)
        else:
            flag = inst.label if rng.random() < corr else 1 - inst.label
        ts = inst.ts.copy()
        ts[:, scfg.feature] = float(flag)
        out.append(replace(inst, ts=ts))
    meta = dict(cohort.meta)
    meta["spurious_feature"] = int(scfg.feature)
    return Cohort(dims=cohort.dims, instances=out, meta=meta)


def spurious_flag(inst: Instance, feature: int) -> int:
    """Read back the injected binary flag from an instance."""
    return int(inst.ts[0, feature] == 1.0)


def inject_label_noise(cohort: Cohort, rate: float, seed: int) -> Cohort:
    """Flip each instance's label with the given probability (all splits)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("rate must be in [0, 1)")
    out = []
    for inst in cohort.instances:
        rng = make_rng(derive_seed(seed, f"noise:{inst.id}"))
        label = inst.label
        if rng.random() < rate:
            label = 1 - label
        out.append(replace(inst, label=label))
    meta = dict(cohort.meta)
    meta["label_noise"] = float(rate)
    return Cohort(dims=cohort.dims, instances=out, meta=meta)
