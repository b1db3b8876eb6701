"""ECG record containers, standardization, splitting, subsampling and a
synthetic 12-lead generator.

Every seeded operation here is a pure function of its inputs and seed.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

logger = logging.getLogger(__name__)

TASKS = ("mi", "sttc", "cd", "hyp")
N_LEADS = 12
TARGET_RATE = 250
TARGET_LEN = 2500
FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")


class DataFormatError(ValueError):
    """Raised when a dataset directory cannot be parsed."""


class ShapeError(ValueError):
    pass


class LeakageError(RuntimeError):
    """Raised when a training routine is handed a test split."""


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass
class ECGRecord:
    record_id: str
    patient_id: str
    leads: np.ndarray
    sample_rate: int = TARGET_RATE
    mv_unit: float = 1.0

    @property
    def n_leads(self) -> int:
        return int(self.leads.shape[0])

    @property
    def n_samples(self) -> int:
        return int(self.leads.shape[1])

    def is_canonical(self) -> bool:
        return (
            self.leads.shape == (N_LEADS, TARGET_LEN)
            and self.sample_rate == TARGET_RATE
            and self.mv_unit == 1.0
            and self.leads.dtype == np.float32
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ECGRecord):
            return NotImplemented
        return (
            self.record_id == other.record_id
            and self.patient_id == other.patient_id
            and self.sample_rate == other.sample_rate
            and self.mv_unit == other.mv_unit
            and self.leads.shape == other.leads.shape
            and np.array_equal(self.leads, other.leads)
        )


@dataclass(frozen=True)
class LabelSet:
    mi: bool = False
    sttc: bool = False
    cd: bool = False
    hyp: bool = False

    def get(self, task: str) -> bool:
        return bool(getattr(self, _task_key(task)))

    def to_dict(self) -> dict:
        return {t: bool(getattr(self, t)) for t in TASKS}

    @classmethod
    def from_dict(cls, d: dict) -> "LabelSet":
        unknown = set(d) - set(TASKS)
        if unknown:
            raise DataFormatError(f"unknown label keys {sorted(unknown)}")
        return cls(**{k: bool(v) for k, v in d.items()})


def _task_key(task: str) -> str:
    key = task.lower()
    if key not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    return key


@dataclass
class Dataset:
    """Ordered records plus an optional record_id -> LabelSet map.

    ``split`` tags where the dataset came from so training code can refuse
    to touch test data; ``meta`` carries warnings and provenance.
    """

    records: list[ECGRecord]
    labels: Optional[dict[str, LabelSet]] = None
    split: Optional[str] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [r.record_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ValueError("record_ids must be unique")
        if self.labels is not None:
            missing = [i for i in ids if i not in self.labels]
            if missing:
                raise ValueError(f"records without labels: {missing[:5]}")

    def __len__(self) -> int:
        return len(self.records)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        if self.records != other.records:
            return False
        if (self.labels is None) != (other.labels is None):
            return False
        if self.labels is None:
            return True
        return all(self.labels[r.record_id] == other.labels[r.record_id] for r in self.records)

    @property
    def record_ids(self) -> list[str]:
        return [r.record_id for r in self.records]

    @property
    def patient_ids(self) -> list[str]:
        return [r.patient_id for r in self.records]

    def subset(self, indices: Iterable[int], **meta) -> "Dataset":
        recs = [self.records[i] for i in indices]
        labels = None
        if self.labels is not None:
            labels = {r.record_id: self.labels[r.record_id] for r in recs}
        return Dataset(recs, labels, split=self.split, meta={**self.meta, **meta})

    def task_labels(self, task: str) -> np.ndarray:
        if self.labels is None:
            raise ValueError("dataset has no labels")
        key = _task_key(task)
        return np.array([self.labels[r.record_id].get(key) for r in self.records], dtype=np.int64)

    def signals(self) -> np.ndarray:
        """Stack all leads into one float32 array [N x leads x samples]."""
        if not self.records:
            return np.zeros((0, N_LEADS, TARGET_LEN), dtype=np.float32)
        return np.stack([r.leads for r in self.records]).astype(np.float32, copy=False)


def require_trainable(dataset: Dataset) -> None:
    if dataset.split == "test":
        raise LeakageError("test split handed to a training routine")


# --- standardization -------------------------------------------------------

def resample(signal: np.ndarray, src_rate: float, dst_rate: float) -> np.ndarray:
    """Linearly interpolate every lead onto a uniform grid at ``dst_rate``."""
    if src_rate <= 0 or dst_rate <= 0:
        raise ValueError("sample rates must be positive")
    signal = np.asarray(signal)
    n = signal.shape[-1]
    if n < 2:
        raise ValueError("need at least two samples to resample")
    if src_rate == dst_rate:
        return signal.copy()
    n_out = _round_half_up(n * dst_rate / src_rate)
    t_src = np.arange(n) / float(src_rate)
    t_dst = np.arange(n_out) / float(dst_rate)
    flat = signal.reshape(-1, n)
    out = np.stack([np.interp(t_dst, t_src, row) for row in flat])
    return out.reshape(signal.shape[:-1] + (n_out,))


def rescale_units(signal: np.ndarray, mv_unit: float) -> np.ndarray:
    if mv_unit <= 0:
        raise ValueError("mv_unit must be positive")
    signal = np.asarray(signal)
    if mv_unit == 1:
        return signal.copy()
    return signal * mv_unit


def fit_duration(signal: np.ndarray, target_len: int = TARGET_LEN) -> np.ndarray:
    """Center-crop or symmetrically zero-pad along time to ``target_len``."""
    signal = np.asarray(signal)
    n = signal.shape[-1]
    if n == target_len:
        return signal.copy()
    if n > target_len:
        start = (n - target_len) // 2
        return signal[..., start:start + target_len].copy()
    left = (target_len - n) // 2
    right = target_len - n - left
    pad = [(0, 0)] * (signal.ndim - 1) + [(left, right)]
    return np.pad(signal, pad)


def standardize(record: ECGRecord) -> ECGRecord:
    if record.n_leads != N_LEADS:
        raise ShapeError(f"{record.record_id}: expected {N_LEADS} leads, got {record.n_leads}")
    if record.is_canonical():
        return replace(record, leads=record.leads.copy())
    x = rescale_units(record.leads.astype(np.float64), record.mv_unit)
    x = resample(x, record.sample_rate, TARGET_RATE)
    x = fit_duration(x, TARGET_LEN).astype(np.float32)
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{record.record_id}: non-finite values after standardization")
    return ECGRecord(record.record_id, record.patient_id, x, TARGET_RATE, 1.0)


def standardize_dataset(dataset: Dataset) -> Dataset:
    return Dataset([standardize(r) for r in dataset.records], dataset.labels,
                   split=dataset.split, meta=dict(dataset.meta))


# --- splitting and subsampling --------------------------------------------

def _largest_remainder(total: int, fractions: tuple[float, ...]) -> list[int]:
    raw = [f * total for f in fractions]
    counts = [int(math.floor(r)) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    return counts


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.72
    val: float = 0.08
    test: float = 0.2
    seed: int = 0

    def __post_init__(self):
        fr = (self.train, self.val, self.test)
        if any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must be non-negative and sum to 1, got {fr}")


def split_by_patient(dataset: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Assign whole patients to train/val/test; deterministic per seed."""
    if len(dataset) == 0:
        raise ValueError("cannot split an empty dataset")
    patients = sorted(set(dataset.patient_ids))
    rng = np.random.default_rng(spec.seed)
    order = [patients[i] for i in rng.permutation(len(patients))]
    n_tr, n_va, _ = _largest_remainder(len(patients), (spec.train, spec.val, spec.test))
    assign = {}
    for k, p in enumerate(order):
        assign[p] = "train" if k < n_tr else ("val" if k < n_tr + n_va else "test")
    out = []
    for name in SPLITS:
        idx = [i for i, r in enumerate(dataset.records) if assign[r.patient_id] == name]
        part = dataset.subset(idx, split_seed=spec.seed)
        part.split = name
        out.append(part)
    return tuple(out)


def subsample_data_usage(labeled: Dataset, pct: float, seed: int) -> Dataset:
    """Keep round(pct*N) records, spreading the picks across patients.

    Patients are visited in a seeded random order, one record per patient per
    round, so the subset covers as many patients as its size allows.
    """
    if labeled.labels is None:
        raise ValueError("data-usage subsampling needs labels")
    if not 0 < pct <= 1:
        raise ValueError("pct must lie in (0, 1]")
    n = len(labeled)
    k = _round_half_up(pct * n)
    if k >= n:
        return labeled.subset(range(n), data_usage=pct)
    rng = np.random.default_rng(seed)
    by_patient: dict[str, list[int]] = {}
    for i, r in enumerate(labeled.records):
        by_patient.setdefault(r.patient_id, []).append(i)
    patients = sorted(by_patient)
    patients = [patients[i] for i in rng.permutation(len(patients))]
    queues = [list(rng.permutation(by_patient[p])) for p in patients]
    chosen: list[int] = []
    depth = 0
    while len(chosen) < k:
        for q in queues:
            if depth < len(q):
                chosen.append(int(q[depth]))
                if len(chosen) == k:
                    break
        depth += 1
    return labeled.subset(sorted(chosen), data_usage=pct)


def subsample_case_ratio(labeled: Dataset, task: str, ratio: float, seed: int) -> Dataset:
    """Keep every negative and thin positives so they make up ``ratio``."""
    if not 0 < ratio < 1:
        raise ValueError("ratio must lie in (0, 1)")
    y = labeled.task_labels(task)
    pos = np.flatnonzero(y == 1)
    neg = np.flatnonzero(y == 0)
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError(f"dataset needs both classes for task {task}")
    n_pos = _round_half_up(ratio * len(neg) / (1 - ratio))
    meta = {"case_ratio": ratio, "case_ratio_task": _task_key(task)}
    if n_pos > len(pos):
        msg = f"requested {n_pos} positives for {task} but only {len(pos)} available"
        logger.warning(msg)
        meta["warnings"] = list(labeled.meta.get("warnings", [])) + [msg]
        n_pos = len(pos)
    rng = np.random.default_rng(seed)
    keep_pos = rng.choice(pos, size=n_pos, replace=False) if n_pos < len(pos) else pos
    idx = np.sort(np.concatenate([neg, keep_pos]))
    return labeled.subset(idx.tolist(), **meta)


# --- synthetic generator ---------------------------------------------------

# lead order: I, II, III, aVR, aVL, aVF, V1..V6; columns P, Q, R, S, ST, T
_BASE_GAINS = np.array([
    [0.5, 0.6, 0.6, 0.5, 1.0, 0.5],
    [0.8, 1.0, 1.0, 0.8, 1.0, 0.8],
    [0.4, 0.5, 0.4, 0.4, 1.0, 0.3],
    [-0.6, -0.6, -0.8, -0.6, 1.0, -0.6],
    [0.2, 0.3, 0.3, 0.3, 1.0, 0.3],
    [0.6, 0.7, 0.7, 0.6, 1.0, 0.6],
    [0.3, 0.2, 0.3, 1.6, 1.0, 0.2],
    [0.4, 0.4, 0.6, 1.4, 1.0, 0.6],
    [0.4, 0.6, 0.9, 1.0, 1.0, 0.8],
    [0.4, 0.8, 1.2, 0.7, 1.0, 0.9],
    [0.4, 0.9, 1.1, 0.4, 1.0, 0.8],
    [0.4, 0.8, 0.8, 0.3, 1.0, 0.6],
])

# per-lead weights for where each pathology is expressed
_MI_LEADS = np.array([0.2, 0.3, 0.3, 0.1, 0.2, 0.3, 1.0, 1.0, 1.0, 0.8, 0.3, 0.2])
_STTC_LEADS = np.array([1.0, 0.6, 0.3, -0.6, 1.0, 0.4, 0.2, 0.3, 0.5, 0.8, 1.0, 1.0])
_HYP_LEADS = np.array([0.5, 0.4, 0.2, 0.4, 0.6, 0.2, 0.6, 0.8, 1.0, 1.0, 1.0, 1.0])

# beat-relative centre (s), width (s), amplitude (mV)
_WAVES = {
    "P": (-0.20, 0.025, 0.15),
    "Q": (-0.035, 0.010, -0.12),
    "R": (0.0, 0.011, 1.0),
    "S": (0.035, 0.011, -0.25),
    "ST": (0.15, 0.06, 0.0),
    "T": (0.30, 0.045, 0.30),
}


@dataclass(frozen=True)
class SynthSpec:
    """Generator parameters; a zero magnitude disables that pathology."""

    mi: float = 1.0
    sttc: float = 1.0
    cd: float = 1.0
    hyp: float = 1.0
    prevalence: tuple[float, float, float, float] = (0.25, 0.24, 0.22, 0.12)
    noise_sigma: float = 0.03
    wander_amplitude: float = 0.15
    wander_freq: tuple[float, float] = (0.05, 0.3)
    offset_sigma: float = 0.1
    hr_range: tuple[float, float] = (55.0, 95.0)
    amplitude_range: tuple[float, float] = (0.75, 1.25)
    severity_range: tuple[float, float] = (0.5, 1.3)

    def magnitude(self, task: str) -> float:
        return float(getattr(self, _task_key(task)))


def _beat_waves(t: np.ndarray, beats: np.ndarray, widths: dict, amps: dict) -> np.ndarray:
    out = np.zeros((len(_WAVES), t.size))
    dt = t[None, :] - beats[:, None]
    for k, (name, (centre, _, _)) in enumerate(_WAVES.items()):
        w = widths[name]
        if amps[name] == 0:
            continue
        out[k] = amps[name] * np.exp(-0.5 * ((dt - centre) / w) ** 2).sum(axis=0)
    return out


def _synth_record(rng: np.random.Generator, traits: dict, labels: LabelSet, spec: SynthSpec) -> np.ndarray:
    t = np.arange(TARGET_LEN) / TARGET_RATE
    hr = traits["hr"] * rng.uniform(0.95, 1.05)
    rr = 60.0 / hr
    start = rng.uniform(-rr, 0)
    n_beats = int(np.ceil((t[-1] - start) / rr)) + 2
    jitter = rng.normal(0, 0.02 * rr, n_beats)
    beats = start + rr * np.arange(n_beats) + jitter

    widths = {k: v[1] for k, v in _WAVES.items()}
    amps = {k: v[2] for k, v in _WAVES.items()}
    sev = traits["severity"]
    gains = traits["gains"].copy()
    if labels.cd:
        scale = 1.0 + spec.cd * sev["cd"]
        for w in ("Q", "R", "S"):
            widths[w] *= scale
    # ST component carries unit amplitude; its per-lead gain sets the offset
    amps["ST"] = 1.0
    gains[:, 4] = 0.0
    if labels.mi:
        gains[:, 1] += -2.5 * spec.mi * sev["mi"] * _MI_LEADS
        gains[:, 4] += -0.12 * spec.mi * sev["mi"] * _MI_LEADS
    if labels.sttc:
        gains[:, 4] += 0.2 * spec.sttc * sev["sttc"] * _STTC_LEADS
        gains[:, 5] *= 1.0 - 1.2 * spec.sttc * sev["sttc"] * np.abs(_STTC_LEADS)
    if labels.hyp:
        gains[:, 2] *= 1.0 + 1.3 * spec.hyp * sev["hyp"] * _HYP_LEADS
        gains[6:9, 3] *= 1.0 + 1.3 * spec.hyp * sev["hyp"]

    waves = _beat_waves(t, beats, widths, amps)
    x = traits["amplitude"] * gains @ waves
    # electrode offsets plus respiratory wander shared across leads
    x += rng.normal(0, spec.offset_sigma, size=(N_LEADS, 1))
    freq = rng.uniform(*spec.wander_freq)
    wander = np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))
    x += spec.wander_amplitude * rng.uniform(0.3, 1.0, size=(N_LEADS, 1)) * wander[None, :]
    x += rng.normal(0, spec.noise_sigma, size=x.shape)
    return x.astype(np.float32)


def synth_generate(spec: SynthSpec, n_patients: int, records_per_patient: int = 2,
                   seed: int = 0) -> Dataset:
    """Generate a labeled synthetic 12-lead dataset at 250 Hz / 10 s."""
    if n_patients < 1:
        raise ValueError("n_patients must be >= 1")
    if records_per_patient < 1:
        raise ValueError("records_per_patient must be >= 1")
    rng = np.random.default_rng(seed)
    records, labels = [], {}
    for p in range(n_patients):
        pid = f"p{p:05d}"
        flags = {}
        for task, prev in zip(TASKS, spec.prevalence):
            flags[task] = bool(spec.magnitude(task) > 0 and rng.random() < prev)
        lab = LabelSet(**flags)
        traits = {
            "hr": rng.uniform(*spec.hr_range),
            "amplitude": rng.uniform(*spec.amplitude_range),
            "gains": _BASE_GAINS * rng.uniform(0.85, 1.15, size=_BASE_GAINS.shape),
            "severity": {t: rng.uniform(*spec.severity_range) for t in TASKS},
        }
        for k in range(records_per_patient):
            rid = f"{pid}_r{k:02d}"
            records.append(ECGRecord(rid, pid, _synth_record(rng, traits, lab, spec)))
            labels[rid] = lab
    return Dataset(records, labels, meta={"synth_seed": seed})


# --- on-disk container -----------------------------------------------------

def write_dataset(dataset: Dataset, path) -> Path:
    """Write ``manifest.jsonl`` plus one little-endian float32 blob per record."""
    root = Path(path)
    (root / "signals").mkdir(parents=True, exist_ok=True)
    lines = []
    for rec in dataset.records:
        fname = f"signals/{rec.record_id}.f32"
        np.ascontiguousarray(rec.leads, dtype="<f4").tofile(root / fname)
        entry = {
            "record_id": rec.record_id,
            "patient_id": rec.patient_id,
            "file": fname,
            "sample_rate": rec.sample_rate,
            "mv_unit": rec.mv_unit,
            "n_leads": rec.n_leads,
            "n_samples": rec.n_samples,
            "format_version": FORMAT_VERSION,
        }
        if dataset.labels is not None:
            entry["labels"] = dataset.labels[rec.record_id].to_dict()
        lines.append(json.dumps(entry, sort_keys=True))
    (root / "manifest.jsonl").write_text("\n".join(lines) + ("\n" if lines else ""))
    return root


_REQUIRED = ("record_id", "patient_id", "file", "sample_rate", "mv_unit",
             "n_leads", "n_samples", "format_version")


def read_dataset(path, split: Optional[str] = None) -> Dataset:
    root = Path(path)
    manifest = root / "manifest.jsonl"
    if not manifest.exists():
        raise DataFormatError(f"{root}: missing manifest.jsonl")
    records, labels = [], {}
    has_labels = None
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            entry = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"manifest line {lineno}: {exc}") from exc
        rid = entry.get("record_id", f"<line {lineno}>")
        missing = [k for k in _REQUIRED if k not in entry]
        if missing:
            raise DataFormatError(f"record {rid}: missing fields {missing}")
        if entry["format_version"] != FORMAT_VERSION:
            raise DataFormatError(f"record {rid}: unknown format_version {entry['format_version']}")
        if entry["n_leads"] != N_LEADS:
            raise ShapeError(f"record {rid}: expected {N_LEADS} leads, got {entry['n_leads']}")
        blob = root / entry["file"]
        if not blob.exists():
            raise DataFormatError(f"record {rid}: missing signal file {entry['file']}")
        data = np.fromfile(blob, dtype="<f4")
        expected = entry["n_leads"] * entry["n_samples"]
        if data.size != expected:
            raise DataFormatError(f"record {rid}: expected {expected} values, found {data.size}")
        leads = data.reshape(entry["n_leads"], entry["n_samples"]).astype(np.float32)
        records.append(ECGRecord(rid, str(entry["patient_id"]), leads,
                                 int(entry["sample_rate"]), float(entry["mv_unit"])))
        this_has = "labels" in entry
        if has_labels is None:
            has_labels = this_has
        elif has_labels != this_has:
            raise DataFormatError(f"record {rid}: labels present on some records only")
        if this_has:
            labels[rid] = LabelSet.from_dict(entry["labels"])
    try:
        return Dataset(records, labels if has_labels else None, split=split,
                       meta={"source": str(root)})
    except ValueError as exc:
        raise DataFormatError(str(exc)) from exc
