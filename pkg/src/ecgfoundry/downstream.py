"""Task heads on top of pre-trained encoders: linear probing, fine-tuning,
and the two baselines (end-to-end supervised, random-init probe)."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import Checkpoint
from .data import Dataset, _task_key, require_trainable
from .metrics import EvalReport, TaskMetrics, UndefinedMetricError, auprc, auroc, f1
from .model import Classifier, FoundationModel, ModelConfig, init_params, trunc_normal

logger = logging.getLogger(__name__)

REGIMES = ("probe", "finetune", "supervised", "random-probe")


@dataclass(frozen=True)
class TaskSpec:
    task: str
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-4
    weight_decay: float = 1e-5
    seed: int = 0
    patience: int = 5

    def __post_init__(self):
        object.__setattr__(self, "task", _task_key(self.task))
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class TrainedModel:
    classifier: Classifier
    regime: str
    task: str
    frozen: bool
    source: Optional[str] = None
    history: list = field(default_factory=list)

    @property
    def config(self) -> ModelConfig:
        return self.classifier.encoder.config

    def to_checkpoint(self, seed: int = 0) -> Checkpoint:
        arrays = {k: v.detach().cpu().numpy().astype(np.float32)
                  for k, v in self.classifier.state_dict().items()}
        meta = {"regime": self.regime, "task": self.task, "frozen": self.frozen, "source": self.source}
        return Checkpoint(self.config, None, seed, arrays, len(self.history),
                          {"loss": self.history}, meta)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "TrainedModel":
        clf = Classifier(FoundationModel(ckpt.config, decoder=False, projection=False))
        clf.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in ckpt.arrays.items()})
        m = ckpt.meta
        return cls(clf, m["regime"], m["task"], m["frozen"], m.get("source"),
                   ckpt.history.get("loss", []))


def _encoder_from(checkpoint: Checkpoint) -> FoundationModel:
    """Encoder-only copy of a checkpoint; decoder/projection weights dropped."""
    enc = FoundationModel(checkpoint.config, decoder=False, projection=False)
    state = {k: torch.from_numpy(v.copy()) for k, v in checkpoint.arrays.items()
             if k.startswith(("patch_conv.", "blocks.", "norm."))}
    enc.load_state_dict(state)
    return enc


def _new_head(dim: int, seed: int) -> nn.Linear:
    head = nn.Linear(dim, 1)
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        head.weight.copy_(torch.from_numpy(trunc_normal(rng, (1, dim))))
        head.bias.zero_()
    return head


def _labels(dataset: Dataset, task: str) -> np.ndarray:
    y = dataset.task_labels(task)
    if y.min() == y.max():
        raise ValueError(f"training set for {task} contains a single class")
    return y


@torch.no_grad()
def embed_records(encoder: FoundationModel, signals: np.ndarray, batch_size: int = 128) -> torch.Tensor:
    encoder.eval()
    out = [encoder.embed(torch.as_tensor(signals[i:i + batch_size]))
           for i in range(0, len(signals), batch_size)]
    if not out:
        return torch.zeros(0, encoder.config.dim)
    return torch.cat(out)


def _val_auroc(score_fn, val: Optional[tuple]) -> Optional[float]:
    if val is None:
        return None
    x_val, y_val = val
    try:
        return auroc(score_fn(x_val), y_val)
    except UndefinedMetricError:
        return None


def _fit(params, forward, x: torch.Tensor, y: torch.Tensor, spec: TaskSpec, score_fn,
         val: Optional[tuple], snapshot, restore) -> list[float]:
    """Mini-batch AdamW on BCE with optional early stopping on val AUROC."""
    opt = torch.optim.AdamW(params, lr=spec.lr, weight_decay=spec.weight_decay)
    rng = np.random.default_rng(spec.seed + 7)
    history: list[float] = []
    best, best_state, bad = -1.0, None, 0
    for epoch in range(spec.epochs):
        perm = rng.permutation(len(y))
        total = 0.0
        for i in range(0, len(perm), spec.batch_size):
            idx = torch.as_tensor(perm[i:i + spec.batch_size])
            logits = forward(x[idx]).squeeze(-1)
            loss = F.binary_cross_entropy_with_logits(logits, y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
        history.append(total / len(y))
        score = _val_auroc(score_fn, val)
        if score is None:
            continue
        if score > best:
            best, best_state, bad = score, snapshot(), 0
        else:
            bad += 1
            if bad >= spec.patience:
                logger.info("early stop at epoch %d (best val AUROC %.4f)", epoch, best)
                break
    if best_state is not None:
        restore(best_state)
    return history


def _val_arrays(val: Optional[Dataset], task: str):
    if val is None or len(val) == 0:
        return None
    return val.signals(), val.task_labels(task)


def linear_probe(checkpoint: Checkpoint, train: Dataset, spec: TaskSpec,
                 val: Optional[Dataset] = None, regime: str = "probe") -> TrainedModel:
    """Train only a linear head on frozen, pre-computed pooled embeddings."""
    require_trainable(train)
    y = torch.as_tensor(_labels(train, spec.task), dtype=torch.float32)
    encoder = _encoder_from(checkpoint)
    for p in encoder.parameters():
        p.requires_grad_(False)
    raw = embed_records(encoder, train.signals())
    # standardise features with train statistics (a non-affine batch norm)
    mu, sd = raw.mean(0), raw.std(0, unbiased=False).clamp_min(1e-6)
    feats = (raw - mu) / sd
    head = _new_head(checkpoint.config.dim, spec.seed)

    val_arr = _val_arrays(val, spec.task)
    if val_arr is not None:
        val_feats = (embed_records(encoder, val_arr[0]) - mu) / sd
        val_arr = (val_feats, val_arr[1])

    def score_fn(f):
        with torch.no_grad():
            return head(f).squeeze(-1).numpy()

    history = _fit(head.parameters(), head, feats, y, spec, score_fn, val_arr,
                   lambda: copy.deepcopy(head.state_dict()), head.load_state_dict)
    with torch.no_grad():  # fold the standardisation into the head
        w = head.weight / sd
        head.bias -= (w * mu).sum()
        head.weight.copy_(w)
    clf = Classifier(encoder)
    clf.head = head
    return TrainedModel(clf, regime, spec.task, True, _source(checkpoint), history)


def random_probe(config: ModelConfig, train: Dataset, spec: TaskSpec,
                 val: Optional[Dataset] = None) -> TrainedModel:
    """Probe on a freshly initialised encoder, through the same path as linear_probe."""
    ckpt = Checkpoint.from_model(init_params(config, spec.seed, None), None, spec.seed)
    return linear_probe(ckpt, train, spec, val, regime="random-probe")


def _train_end_to_end(encoder: FoundationModel, train: Dataset, spec: TaskSpec,
                      val: Optional[Dataset], regime: str, source: Optional[str]) -> TrainedModel:
    require_trainable(train)
    y = torch.as_tensor(_labels(train, spec.task), dtype=torch.float32)
    x = torch.as_tensor(train.signals())
    clf = Classifier(encoder)
    clf.head = _new_head(encoder.config.dim, spec.seed)
    val_arr = _val_arrays(val, spec.task)

    def forward(xb):
        clf.train()
        return clf(xb)

    def score_fn(xv):
        return _predict_array(clf, xv)

    history = _fit(clf.parameters(), forward, x, y, spec, score_fn, val_arr,
                   lambda: copy.deepcopy(clf.state_dict()), clf.load_state_dict)
    return TrainedModel(clf, regime, spec.task, False, source, history)


def fine_tune(checkpoint: Checkpoint, train: Dataset, spec: TaskSpec,
              val: Optional[Dataset] = None) -> TrainedModel:
    return _train_end_to_end(_encoder_from(checkpoint), train, spec, val, "finetune", _source(checkpoint))


def supervised_baseline(config: ModelConfig, train: Dataset, spec: TaskSpec,
                        val: Optional[Dataset] = None) -> TrainedModel:
    encoder = init_params(config, spec.seed, None)
    enc = FoundationModel(config, decoder=False, projection=False)
    enc.load_state_dict(encoder.encoder_state())
    return _train_end_to_end(enc, train, spec, val, "supervised", None)


def _source(ckpt: Checkpoint) -> str:
    return f"{ckpt.method or 'init'}:{ckpt.content_hash()}"


@torch.no_grad()
def _predict_array(clf: Classifier, signals: np.ndarray, batch_size: int = 128) -> np.ndarray:
    clf.eval()
    out = [torch.sigmoid(clf(torch.as_tensor(signals[i:i + batch_size])).squeeze(-1))
           for i in range(0, len(signals), batch_size)]
    return torch.cat(out).numpy().astype(np.float64) if out else np.zeros(0)


def predict(model: TrainedModel, records) -> np.ndarray:
    """Scores in [0, 1], one per record, in input order."""
    signals = records.signals() if isinstance(records, Dataset) else np.asarray(records, dtype=np.float32)
    return _predict_array(model.classifier, signals)


def evaluate(models: dict[str, TrainedModel], dataset: Dataset, **meta) -> EvalReport:
    """Per-task metrics of task-specific models on ``dataset``."""
    tasks = {}
    signals = dataset.signals()
    for task, model in models.items():
        s = _predict_array(model.classifier, signals)
        y = dataset.task_labels(task)
        tasks[task] = TaskMetrics(auroc(s, y), auprc(s, y), f1(s, y))
    return EvalReport(tasks, {"split": dataset.split, **meta})


def write_predictions_csv(model: TrainedModel, dataset: Dataset, path) -> None:
    import csv

    scores = predict(model, dataset)
    labels = dataset.task_labels(model.task) if dataset.labels is not None else None
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["record_id", "score", "label"])
        for i, rid in enumerate(dataset.record_ids):
            w.writerow([rid, repr(float(scores[i])), "" if labels is None else int(labels[i])])
