"""Self-supervised objectives (contrastive, masked reconstruction, hybrid)
and the pre-training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import Checkpoint
from .data import Dataset, ECGRecord
from .model import FoundationModel, ModelConfig, init_params, patchify, pool

logger = logging.getLogger(__name__)

METHODS = ("CL", "GL", "HL")


class PretrainError(RuntimeError):
    def __init__(self, step: int, breakdown: "LossBreakdown"):
        super().__init__(f"non-finite loss at step {step}: {breakdown}")
        self.step = step
        self.breakdown = breakdown


# --- augmentation and masking ---------------------------------------------

@dataclass(frozen=True)
class AugmentPolicy:
    amplitude_scale_range: Optional[tuple[float, float]] = (0.8, 1.2)
    gaussian_noise_sigma: Optional[float] = 0.05
    max_time_shift: Optional[float] = 0.1
    time_mask_fraction: Optional[float] = 0.1
    baseline_shift_sigma: Optional[float] = 0.1
    wander_amplitude: Optional[float] = 0.1

    def __post_init__(self):
        r = self.amplitude_scale_range
        if r is not None and not (0 <= r[0] <= r[1]):
            raise ValueError("amplitude_scale_range must be ordered and non-negative")
        for name in ("max_time_shift", "time_mask_fraction"):
            v = getattr(self, name)
            if v is not None and not 0 <= v < 1:
                raise ValueError(f"{name} must lie in [0, 1)")

    @classmethod
    def disabled(cls) -> "AugmentPolicy":
        return cls(None, None, None, None, None, None)


def augment(record: Union[ECGRecord, np.ndarray], policy: AugmentPolicy,
            seed: Union[int, np.random.Generator]) -> Union[ECGRecord, np.ndarray]:
    """One random view: amplitude scale, baseline offset and wander, noise,
    circular shift, time mask."""
    if isinstance(record, ECGRecord):
        return replace(record, leads=augment(record.leads, policy, seed))
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    x = np.array(record, dtype=np.float32, copy=True)
    n = x.shape[-1]
    if policy.amplitude_scale_range is not None:
        x *= np.float32(rng.uniform(*policy.amplitude_scale_range))
    if policy.baseline_shift_sigma:
        x += rng.normal(0.0, policy.baseline_shift_sigma, size=(x.shape[0], 1)).astype(np.float32)
    if policy.wander_amplitude:
        t = np.arange(n) / 250.0
        phase = np.sin(2 * np.pi * rng.uniform(0.05, 0.5) * t + rng.uniform(0, 2 * np.pi))
        amp = rng.uniform(0, policy.wander_amplitude, size=(x.shape[0], 1))
        x += (amp * phase).astype(np.float32)
    if policy.gaussian_noise_sigma:
        x += rng.normal(0.0, policy.gaussian_noise_sigma, size=x.shape).astype(np.float32)
    if policy.max_time_shift:
        limit = int(policy.max_time_shift * n)
        x = np.roll(x, int(rng.integers(-limit, limit + 1)), axis=-1)
    if policy.time_mask_fraction:
        width = int(policy.time_mask_fraction * n)
        if width:
            start = int(rng.integers(0, n - width + 1))
            x[..., start:start + width] = 0.0
    return x


def mask_patches(seq_len: int, ratio: float, seed: Union[int, np.random.Generator]
                 ) -> tuple[np.ndarray, np.ndarray]:
    """Random (visible, masked) partition of ``range(seq_len)``, both sorted."""
    if not 0 <= ratio < 1:
        raise ValueError("mask ratio must lie in [0, 1)")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n_mask = int(math.floor(ratio * seq_len + 0.5))
    n_mask = min(n_mask, seq_len - 1)
    perm = rng.permutation(seq_len)
    return np.sort(perm[n_mask:]), np.sort(perm[:n_mask])


# --- losses ----------------------------------------------------------------

def info_nce(anchors: torch.Tensor, candidates: torch.Tensor, positive_index, tau: float) -> torch.Tensor:
    """Mean over anchors of -log softmax(anchor . candidates / tau)[positive].

    The denominator runs over every candidate, the positive included.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    logits = anchors @ candidates.T / tau
    pos = torch.as_tensor(positive_index, dtype=torch.long)
    return (torch.logsumexp(logits, dim=1) - logits[torch.arange(len(pos)), pos]).mean()


def _multi_positive_nce(z: torch.Tensor, positives: torch.Tensor, tau: float) -> Optional[torch.Tensor]:
    """-log(sum_pos exp / sum_all exp) per anchor, self excluded from both sums.

    Anchors without a positive are dropped; returns None if none remain.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    n = z.shape[0]
    eye = torch.eye(n, dtype=torch.bool)
    positives = positives & ~eye
    keep = positives.any(dim=1)
    if not bool(keep.any()):
        return None
    logits = (z @ z.T / tau).masked_fill(eye, float("-inf"))
    denom = torch.logsumexp(logits, dim=1)
    numer = torch.logsumexp(logits.masked_fill(~positives, float("-inf")), dim=1)
    return (denom - numer)[keep].mean()


def sample_contrastive_loss(view1: torch.Tensor, view2: torch.Tensor, tau: float) -> torch.Tensor:
    """Symmetric NT-Xent: each view's positive is its sibling; the other
    2N-2 embeddings in the batch are negatives."""
    n = view1.shape[0]
    z = torch.cat([view1, view2], dim=0)
    idx = torch.arange(n)
    pos = torch.zeros(2 * n, 2 * n, dtype=torch.bool)
    pos[idx, idx + n] = True
    pos[idx + n, idx] = True
    return _multi_positive_nce(z, pos, tau)


def patient_contrastive_loss(projections: torch.Tensor, patient_ids: Sequence[str],
                             tau: float) -> Optional[torch.Tensor]:
    """Multi-positive InfoNCE where every other embedding of the same patient
    is a positive. Returns None when no anchor has a same-patient partner."""
    codes = {p: i for i, p in enumerate(dict.fromkeys(patient_ids))}
    ids = torch.tensor([codes[p] for p in patient_ids])
    return _multi_positive_nce(projections, ids[:, None] == ids[None, :], tau)


def reconstruction_loss(predicted: torch.Tensor, target: torch.Tensor, masked) -> torch.Tensor:
    """Mean absolute error over the masked patches only.

    ``masked`` is a boolean [batch x seq_len] mask or per-sample index tensor.
    """
    if predicted.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(predicted.shape)} vs {tuple(target.shape)}")
    masked = torch.as_tensor(masked)
    if masked.dtype != torch.bool:
        idx = masked.long()
        if idx.ndim == 1:
            idx = idx.expand(predicted.shape[0], -1)
        masked = torch.zeros(predicted.shape[:2], dtype=torch.bool)
        masked.scatter_(1, idx, True)
    if not bool(masked.any()):
        raise ValueError("reconstruction loss needs at least one masked position")
    return (predicted - target).abs()[masked].mean()


@dataclass
class LossBreakdown:
    total: Union[float, torch.Tensor]
    patient_contrastive: Optional[Union[float, torch.Tensor]] = None
    sample_contrastive: Optional[Union[float, torch.Tensor]] = None
    reconstruction: Optional[Union[float, torch.Tensor]] = None

    def detached(self) -> "LossBreakdown":
        def f(v):
            if v is None:
                return None
            return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        return LossBreakdown(f(self.total), f(self.patient_contrastive),
                             f(self.sample_contrastive), f(self.reconstruction))

    def is_finite(self) -> bool:
        d = self.detached()
        vals = [d.total, d.patient_contrastive, d.sample_contrastive, d.reconstruction]
        return all(math.isfinite(v) for v in vals if v is not None)

    def as_row(self) -> dict:
        d = self.detached()
        return {"total": d.total, "patient": d.patient_contrastive,
                "sample": d.sample_contrastive, "reconstruction": d.reconstruction}


def hybrid_loss(reconstruction=None, patient=None, sample=None) -> LossBreakdown:
    """Total = reconstruction + patient + sample over whichever are present."""
    parts = [v for v in (reconstruction, patient, sample) if v is not None]
    if not parts:
        raise ValueError("no loss components given")
    total = parts[0]
    for v in parts[1:]:
        total = total + v
    return LossBreakdown(total, patient, sample, reconstruction)


# --- training loop -----------------------------------------------------------

@dataclass(frozen=True)
class BatchPlan:
    patients: int = 16
    records_per_patient: int = 2
    views: int = 2

    @property
    def effective_batch(self) -> int:
        return self.patients * self.records_per_patient * self.views


@dataclass
class PretrainHyper:
    steps: int = 200
    plan: BatchPlan = field(default_factory=BatchPlan)
    lr: float = 1e-4
    weight_decay: float = 1e-5
    tau: float = 0.1
    mask_ratio: float = 0.75
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)


class _BatchSampler:
    """Seeded patient-grouped batch assembly."""

    def __init__(self, dataset: Dataset, seed: int):
        self.signals = dataset.signals()
        self.patients = sorted(set(dataset.patient_ids))
        self.by_patient: dict[str, list[int]] = {}
        for i, r in enumerate(dataset.records):
            self.by_patient.setdefault(r.patient_id, []).append(i)
        self.pids = dataset.patient_ids
        self.rng = np.random.default_rng(seed)

    def draw(self, plan: BatchPlan) -> np.ndarray:
        k = min(plan.patients, len(self.patients))
        chosen = self.rng.choice(len(self.patients), size=k, replace=False)
        idx = []
        for c in chosen:
            recs = self.by_patient[self.patients[c]]
            m = min(plan.records_per_patient, len(recs))
            idx.extend(self.rng.choice(recs, size=m, replace=False).tolist())
        return np.asarray(idx)


def _masks(rng: np.random.Generator, batch: int, seq_len: int, ratio: float):
    vis, msk = zip(*(mask_patches(seq_len, ratio, rng) for _ in range(batch)))
    return torch.as_tensor(np.stack(vis)), torch.as_tensor(np.stack(msk))


def compute_losses(model: FoundationModel, method: str, x: torch.Tensor, patient_ids: Sequence[str],
                   hyper: PretrainHyper, rng: np.random.Generator) -> LossBreakdown:
    """Loss breakdown for one batch of records ``x`` [B x 12 x T]."""
    method = method.upper()
    cfg = model.config
    if method == "GL":
        vis, msk = _masks(rng, x.shape[0], cfg.seq_len, hyper.mask_ratio)
        if msk.shape[1] == 0:
            raise ValueError("mask ratio too small: no patch masked")
        pred = model.decode(model.encode_visible(x, vis), vis, msk)
        rec = reconstruction_loss(pred, patchify(x, cfg.patch), msk)
        return hybrid_loss(reconstruction=rec)

    v = hyper.plan.views
    arr = x.detach().cpu().numpy()
    views = np.stack([augment(arr[i], hyper.augment, rng) for i in range(len(arr)) for _ in range(v)])
    xv = torch.as_tensor(views, dtype=x.dtype)
    pids = [p for p in patient_ids for _ in range(v)]
    rec = None
    if method == "CL":
        h = model.embed(xv)
    else:
        vis, msk = _masks(rng, xv.shape[0], cfg.seq_len, hyper.mask_ratio)
        latent = model.encode_visible(xv, vis)
        h = pool(latent)
        if msk.shape[1]:
            pred = model.decode(latent, vis, msk)
            rec = reconstruction_loss(pred, patchify(xv, cfg.patch), msk)
    z = model.project(h)
    sample = None
    if v >= 2:
        zz = z.reshape(-1, v, z.shape[-1])
        sample = sample_contrastive_loss(zz[:, 0], zz[:, 1], hyper.tau)
    patient = patient_contrastive_loss(z, pids, hyper.tau)
    if method == "CL" and patient is None and sample is None:
        raise ValueError("batch plan gives no contrastive positives")
    return hybrid_loss(reconstruction=rec, patient=patient, sample=sample)


def pretrain(dataset: Dataset, config: ModelConfig, method: str, hyper: Optional[PretrainHyper] = None,
             seed: int = 0, dtype=torch.float32) -> tuple[Checkpoint, list[LossBreakdown]]:
    """Run ``hyper.steps`` AdamW steps of the chosen objective."""
    method = method.upper()
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    hyper = hyper or PretrainHyper()
    model = init_params(config, seed, method).to(dtype)
    sampler = _BatchSampler(dataset, seed + 1)
    aug_rng = np.random.default_rng(seed + 2)
    opt = torch.optim.AdamW(model.parameters(), lr=hyper.lr, weight_decay=hyper.weight_decay)
    history: list[LossBreakdown] = []
    model.train()
    for step in range(hyper.steps):
        idx = sampler.draw(hyper.plan)
        x = torch.as_tensor(sampler.signals[idx], dtype=dtype)
        pids = [sampler.pids[i] for i in idx]
        losses = compute_losses(model, method, x, pids, hyper, aug_rng)
        if not losses.is_finite():
            raise PretrainError(step, losses.detached())
        opt.zero_grad()
        losses.total.backward()
        opt.step()
        history.append(losses.detached())
        if step % 50 == 0:
            logger.info("step %d %s", step, history[-1].as_row())
    summary = {}
    if history:
        summary = {"steps": len(history), "first": history[0].as_row(), "last": history[-1].as_row()}
    ckpt = Checkpoint.from_model(model, method, seed, step=hyper.steps, history=summary)
    return ckpt, history


@torch.no_grad()
def evaluate_losses(model: FoundationModel, method: str, records: np.ndarray, patient_ids: Sequence[str],
                    hyper: PretrainHyper, seed: int = 0) -> LossBreakdown:
    """Loss breakdown on a fixed batch with seeded masks/views (no update)."""
    model.eval()
    x = torch.as_tensor(records, dtype=next(model.parameters()).dtype)
    return compute_losses(model, method, x, patient_ids, hyper, np.random.default_rng(seed)).detached()


def write_history_csv(history: Sequence[LossBreakdown], path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "total", "patient", "sample", "reconstruction"])
        for i, b in enumerate(history):
            row = b.as_row()
            w.writerow([i] + ["" if row[k] is None else repr(row[k])
                              for k in ("total", "patient", "sample", "reconstruction")])
