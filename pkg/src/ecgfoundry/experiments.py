"""Grid orchestration, scarcity runs, risk decomposition and report tables.

Every training job is keyed by a content hash of everything that determines
its output, so an interrupted grid picks up where it stopped and a completed
one is left untouched on rerun.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import (TASKS, Dataset, SplitSpec, read_dataset, split_by_patient,
                   subsample_case_ratio, subsample_data_usage)
from .downstream import (REGIMES, TaskSpec, TrainedModel, evaluate, fine_tune, linear_probe,
                         predict, random_probe, supervised_baseline)
from .metrics import RiskMeasurements, RiskReport, auroc, decompose
from .model import ModelConfig, count_params
from .pretrain import AugmentPolicy, BatchPlan, PretrainHyper, pretrain

logger = logging.getLogger(__name__)

STATUSES = ("ok", "OOM", "failed")
METRIC_COLUMNS = [f"AUROC_{t.upper()}" for t in TASKS] + [f"AUPRC_{t.upper()}" for t in TASKS]
COLUMNS = ["Case", "Windows", "Depth", "Dims", *METRIC_COLUMNS, "Criteria"]


# --- configuration -----------------------------------------------------------

class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class PretrainSettings(_Strict):
    steps: int = Field(200, ge=0)
    lr: float = Field(1e-3, gt=0)
    weight_decay: float = Field(1e-5, ge=0)
    tau: float = Field(0.1, gt=0)
    mask_ratio: float = Field(0.75, ge=0, lt=1)
    patients: int = Field(16, ge=1)
    records_per_patient: int = Field(2, ge=1)
    views: int = Field(2, ge=1)
    augment: bool = True

    def hyper(self) -> PretrainHyper:
        return PretrainHyper(
            steps=self.steps,
            plan=BatchPlan(self.patients, self.records_per_patient, self.views),
            lr=self.lr, weight_decay=self.weight_decay, tau=self.tau, mask_ratio=self.mask_ratio,
            augment=AugmentPolicy() if self.augment else AugmentPolicy.disabled(),
        )


class DownstreamSettings(_Strict):
    epochs: int = Field(20, ge=0)
    batch_size: int = Field(64, ge=1)
    lr: float = Field(1e-3, gt=0)
    weight_decay: float = Field(1e-5, ge=0)
    patience: int = Field(5, ge=1)

    def spec(self, task: str, seed: int) -> TaskSpec:
        return TaskSpec(task, self.epochs, self.batch_size, self.lr, self.weight_decay, seed, self.patience)


class GridSpec(_Strict):
    """Architecture grid plus the training knobs shared by every case."""

    version: Literal[1]
    patches: list[int] = Field(min_length=1)
    depths: list[int] = Field(min_length=1)
    dims: list[int] = Field(min_length=1)
    methods: list[Literal["CL", "GL", "HL"]] = Field(default=["CL", "GL", "HL"], min_length=1)
    tasks: list[str] = Field(default=list(TASKS), min_length=1)
    regimes: list[Literal["probe", "finetune", "supervised", "random-probe"]] = Field(
        default=["probe", "finetune"], min_length=1)
    data_usage: list[float] = Field(default=[1.0], min_length=1)
    case_ratio: list[float] = Field(default_factory=list)
    seeds: list[int] = Field(default=[0], min_length=1)
    parameter_budget: int = Field(gt=0)
    decoder_depth: int = Field(2, ge=1)
    proj_dim: int = Field(128, ge=1)
    split: tuple[float, float, float] = (0.72, 0.08, 0.2)
    pretrain: PretrainSettings = PretrainSettings()
    downstream: DownstreamSettings = DownstreamSettings()

    @field_validator("methods", mode="before")
    @classmethod
    def _upper(cls, v):
        return [m.upper() for m in v] if isinstance(v, list) else v

    @field_validator("tasks")
    @classmethod
    def _tasks(cls, v):
        bad = [t for t in v if t.lower() not in TASKS]
        if bad:
            raise ValueError(f"unknown tasks {bad}")
        return [t.lower() for t in v]

    @field_validator("data_usage")
    @classmethod
    def _usage(cls, v):
        if any(not 0 < u <= 1 for u in v):
            raise ValueError("data_usage levels must lie in (0, 1]")
        return v

    @field_validator("case_ratio")
    @classmethod
    def _ratio(cls, v):
        if any(not 0 < r < 1 for r in v):
            raise ValueError("case_ratio levels must lie in (0, 1)")
        return v

    def model_config_for(self, patch: int, depth: int, dim: int) -> ModelConfig:
        return ModelConfig(patch=patch, depth=depth, dim=dim, decoder_depth=self.decoder_depth,
                           proj_dim=self.proj_dim)


def load_grid_spec(path) -> GridSpec:
    return GridSpec.model_validate_json(Path(path).read_text())


# --- case enumeration ---------------------------------------------------------

@dataclass(frozen=True)
class Case:
    index: int
    method: Optional[str]
    patch: int
    depth: int
    dim: int


def enumerate_architectures(grid: GridSpec) -> list[tuple[int, int, int]]:
    """(patch, depth, dim) triples, windows-major, then depth, then dims."""
    return [(p, d, w) for p in grid.patches for d in grid.depths for w in grid.dims]


def enumerate_cases(grid: GridSpec) -> list[Case]:
    """Pre-training cases, method-major; the index restarts for each method."""
    arch = enumerate_architectures(grid)
    return [Case(i, m, *a) for m in grid.methods for i, a in enumerate(arch)]


def is_oom(grid: GridSpec, case: Case) -> bool:
    config = grid.model_config_for(case.patch, case.depth, case.dim)
    return count_params(config, case.method) > grid.parameter_budget


def oom_pattern(grid: GridSpec) -> list[tuple[Optional[str], int]]:
    """(method, case index) of every pre-training case over budget."""
    return [(c.method, c.index) for c in enumerate_cases(grid) if is_oom(grid, c)]


def case_seed(master: int, case_index: int) -> int:
    return int(np.random.SeedSequence([master, case_index]).generate_state(1)[0])


# --- rows ------------------------------------------------------------------------

@dataclass
class ResultRow:
    case: int
    method: Optional[str]
    regime: str
    patch: int
    depth: int
    dim: int
    seed: int  # master seed; per-case seeds derive from it via case_seed
    status: str
    metrics: Optional[dict] = None  # task -> {"auroc", "auprc", "f1"}
    level_kind: str = "usage"
    level: float = 1.0
    checkpoint: Optional[str] = None
    config_hash: Optional[str] = None
    n_train: Optional[int] = None
    n_test: Optional[int] = None
    error: Optional[str] = None

    def __post_init__(self):
        if self.status not in STATUSES:
            raise ValueError(f"status must be one of {STATUSES}")
        if self.status == "OOM" and self.metrics is not None:
            raise ValueError("OOM rows carry no metrics")

    @property
    def criteria(self) -> Optional[float]:
        if self.metrics is None:
            return None
        return sum(m["auroc"] + m["auprc"] for m in self.metrics.values())

    @property
    def group(self) -> tuple:
        return (self.regime, self.method or "", self.seed, self.level_kind, self.level)

    def to_dict(self) -> dict:
        return {**asdict(self), "criteria": self.criteria}

    @classmethod
    def from_dict(cls, d: dict) -> "ResultRow":
        return cls(**{k: v for k, v in d.items() if k != "criteria"})


def _sha(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def dataset_fingerprint(dataset: Dataset) -> str:
    h = hashlib.sha256()
    for r in dataset.records:
        h.update(f"{r.record_id}|{r.patient_id}|{r.sample_rate}|{r.mv_unit}|".encode())
        h.update(np.ascontiguousarray(r.leads, dtype="<f4").tobytes())
        if dataset.labels is not None:
            h.update(json.dumps(dataset.labels[r.record_id].to_dict(), sort_keys=True).encode())
    return h.hexdigest()[:16]


# --- training and evaluation of one setting -----------------------------------

@dataclass
class Splits:
    train: Dataset
    val: Dataset
    test: Dataset

    @classmethod
    def from_dataset(cls, labeled: Dataset, fractions, seed: int) -> "Splits":
        return cls(*split_by_patient(labeled, SplitSpec(*fractions, seed=seed)))


def _train_one(regime: str, source: Union[Checkpoint, ModelConfig], train: Dataset,
               val: Dataset, spec: TaskSpec) -> TrainedModel:
    val = val if len(val) else None
    if regime == "probe":
        return linear_probe(source, train, spec, val)
    if regime == "finetune":
        return fine_tune(source, train, spec, val)
    config = source.config if isinstance(source, Checkpoint) else source
    if regime == "supervised":
        return supervised_baseline(config, train, spec, val)
    if regime == "random-probe":
        return random_probe(config, train, spec, val)
    raise ValueError(f"unknown regime {regime!r}")


def _level_train(train: Dataset, kind: str, level: float, task: str, seed: int) -> Dataset:
    if kind == "usage":
        return subsample_data_usage(train, level, seed)
    return subsample_case_ratio(train, task, level, seed)


def train_and_evaluate(regime: str, source: Union[Checkpoint, ModelConfig], splits: Splits,
                       tasks, settings: DownstreamSettings, seed: int,
                       kind: str = "usage", level: float = 1.0) -> tuple[dict, int]:
    """Train one head per task on the (subsampled) train split; test metrics.

    Returns ({task: {"auroc", "auprc", "f1"}}, largest train size used).
    """
    metrics, n_train = {}, 0
    for task in tasks:
        train = _level_train(splits.train, kind, level, task, seed)
        n_train = max(n_train, len(train))
        model = _train_one(regime, source, train, splits.val, settings.spec(task, seed))
        m = evaluate({task: model}, splits.test).tasks[task]
        metrics[task] = {"auroc": m.auroc, "auprc": m.auprc, "f1": m.f1}
    return metrics, n_train


# --- grid runner --------------------------------------------------------------------

def _load(data) -> Dataset:
    return data if isinstance(data, Dataset) else read_dataset(data)


def _levels(grid: GridSpec) -> list[tuple[str, float]]:
    return [("usage", u) for u in grid.data_usage] + [("ratio", r) for r in grid.case_ratio]


class _Store:
    """Row and checkpoint files under one results directory (or memory only)."""

    def __init__(self, out_dir):
        self.root = Path(out_dir) if out_dir is not None else None
        if self.root is not None:
            (self.root / "rows").mkdir(parents=True, exist_ok=True)
            (self.root / "checkpoints").mkdir(parents=True, exist_ok=True)

    def row_path(self, key: str) -> Optional[Path]:
        return None if self.root is None else self.root / "rows" / f"{key}.json"

    def ckpt_path(self, key: str) -> Optional[Path]:
        return None if self.root is None else self.root / "checkpoints" / f"{key}.ckpt"

    def get_row(self, key: str) -> Optional[ResultRow]:
        p = self.row_path(key)
        if p is None or not p.exists():
            return None
        return ResultRow.from_dict(json.loads(p.read_text()))

    def put_row(self, key: str, row: ResultRow) -> None:
        p = self.row_path(key)
        if p is not None:
            p.write_text(json.dumps(row.to_dict(), sort_keys=True, indent=1) + "\n")


def run_grid(grid: GridSpec, labeled, unlabeled=None, out_dir=None) -> list[ResultRow]:
    """Run every (seed, case, regime, level) job of ``grid``.

    ``labeled`` is split by patient per seed; pre-training uses ``unlabeled``
    when given, otherwise the labeled train split with labels ignored.
    Configurations over ``parameter_budget`` become OOM rows without training.
    A failing job yields a "failed" row and the grid carries on.
    """
    labeled = _load(labeled)
    unlabeled = _load(unlabeled) if unlabeled is not None else None
    store = _Store(out_dir)
    settings = grid.model_dump(include={"pretrain", "downstream", "split", "tasks"})
    fp_lab = dataset_fingerprint(labeled)
    fp_unl = dataset_fingerprint(unlabeled) if unlabeled is not None else None
    levels = _levels(grid)
    rows: list[ResultRow] = []

    ssl_regimes = [r for r in ("probe", "finetune") if r in grid.regimes]
    base_regimes = [r for r in ("supervised", "random-probe") if r in grid.regimes]

    for master in grid.seeds:
        splits = Splits.from_dataset(labeled, grid.split, master)
        pre_data = unlabeled if unlabeled is not None else splits.train
        jobs = [(c, ssl_regimes) for c in enumerate_cases(grid)]
        jobs += [(Case(i, None, *a), base_regimes) for i, a in enumerate(enumerate_architectures(grid))]
        for case, regimes in jobs:
            if not regimes:
                continue
            config = grid.model_config_for(case.patch, case.depth, case.dim)
            seed = case_seed(master, case.index)
            cfg_hash = _sha({"config": config.to_dict(), "method": case.method})
            ck_key = _sha({"cfg": cfg_hash, "seed": seed, "pretrain": settings["pretrain"],
                           "data": fp_unl or [fp_lab, grid.split, master]})
            oom = is_oom(grid, case)
            source: Union[Checkpoint, ModelConfig, None] = None
            ck_file: Optional[str] = None
            for regime in regimes:
                for kind, level in levels:
                    key = _sha({"ck": ck_key, "regime": regime, "kind": kind, "level": level,
                                "settings": settings, "labeled": fp_lab, "master": master})
                    done = store.get_row(key)
                    if done is not None:
                        rows.append(done)
                        continue
                    row = ResultRow(case.index, case.method, regime, case.patch, case.depth, case.dim,
                                    master, "OOM", level_kind=kind, level=level, config_hash=cfg_hash,
                                    n_test=len(splits.test))
                    if not oom:
                        try:
                            if source is None:
                                source, ck_file = _source_for(case, config, pre_data, grid, seed,
                                                              store, ck_key)
                            metrics, n_train = train_and_evaluate(regime, source, splits, grid.tasks,
                                                                  grid.downstream, seed, kind, level)
                            row.status, row.metrics, row.n_train = "ok", metrics, n_train
                            row.checkpoint = ck_file
                        except Exception as exc:  # recorded per row, grid continues
                            logger.exception("case %s %s %s failed", case.index, case.method, regime)
                            row.status, row.error = "failed", f"{type(exc).__name__}: {exc}"
                    store.put_row(key, row)
                    rows.append(row)
    return rows


def _source_for(case: Case, config: ModelConfig, pre_data: Dataset, grid: GridSpec, seed: int,
                store: _Store, key: str):
    if case.method is None:
        return config, None
    path = store.ckpt_path(key)
    if path is not None and path.exists():
        return load_checkpoint(path), str(path)
    ckpt, _ = pretrain(pre_data, config, case.method, grid.pretrain.hyper(), seed=seed)
    if path is None:
        return ckpt, None
    save_checkpoint(ckpt, path)
    return ckpt, str(path)


def load_rows(path) -> list[ResultRow]:
    """Rows from a results directory, a rows/ directory, or a JSON report."""
    p = Path(path)
    if p.is_file():
        return [ResultRow.from_dict(d) for d in json.loads(p.read_text())]
    row_dir = p / "rows" if (p / "rows").is_dir() else p
    return [ResultRow.from_dict(json.loads(f.read_text())) for f in sorted(row_dir.glob("*.json"))]


# --- scarcity --------------------------------------------------------------------------

def scarcity_suite(checkpoints: dict[str, Checkpoint], splits: Splits, usage=(1.0, 0.5, 0.25, 0.1),
                   ratios=(), seeds=(0,), tasks=TASKS, regimes=("finetune", "supervised"),
                   settings: Optional[DownstreamSettings] = None) -> list[ResultRow]:
    """Rows for each seed x regime x checkpoint x level.

    Only the train split is thinned; val and test are passed through as is.
    Checkpoint-free regimes (supervised, random-probe) run once per distinct
    architecture among the checkpoints.
    """
    settings = settings or DownstreamSettings()
    levels = [("usage", u) for u in usage] + [("ratio", r) for r in ratios]
    rows = []
    for seed in seeds:
        for regime in regimes:
            if regime in ("probe", "finetune"):
                sources = [(ck.method, ck) for ck in checkpoints.values()]
            else:
                configs = {ck.config for ck in checkpoints.values()}
                sources = [(None, cfg) for cfg in sorted(configs, key=lambda c: (c.patch, c.depth, c.dim))]
            for method, source in sources:
                cfg = source.config if isinstance(source, Checkpoint) else source
                for kind, level in levels:
                    metrics, n_train = train_and_evaluate(regime, source, splits, tasks, settings,
                                                          seed, kind, level)
                    rows.append(ResultRow(0, method, regime, cfg.patch, cfg.depth, cfg.dim, seed, "ok",
                                          metrics, kind, level, n_train=n_train, n_test=len(splits.test)))
    return rows


# --- risk decomposition -------------------------------------------------------------------

class RiskDecompositionError(RuntimeError):
    def __init__(self, constituent: str, cause: BaseException):
        super().__init__(f"{constituent} failed: {type(cause).__name__}: {cause}")
        self.constituent = constituent


def _risk_on(model: TrainedModel, dataset: Dataset) -> float:
    return 1.0 - auroc(predict(model, dataset), dataset.task_labels(model.task))


def half_by_patient(dataset: Dataset, seed: int) -> Dataset:
    """Records of a seeded half of the patients."""
    half, _, _ = split_by_patient(dataset, SplitSpec(0.5, 0.0, 0.5, seed=seed))
    half.split = dataset.split
    return half


def risk_decomposition(config: ModelConfig, method: str, unlabeled: Dataset, splits: Splits,
                       tasks=TASKS, pretrain_settings: Optional[PretrainSettings] = None,
                       settings: Optional[DownstreamSettings] = None, seed: int = 0
                       ) -> dict[str, RiskReport]:
    """Four-term decomposition per task, with risk = 1 - AUROC."""
    pretrain_settings = pretrain_settings or PretrainSettings()
    settings = settings or DownstreamSettings()
    hyper = pretrain_settings.hyper()

    def run(name, fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except Exception as exc:
            raise RiskDecompositionError(name, exc) from exc

    full, _ = run("pretrain[full]", pretrain, unlabeled, config, method, hyper, seed=seed)
    half_set = half_by_patient(unlabeled, seed)
    half, _ = run("pretrain[half]", pretrain, half_set, config, method, hyper, seed=seed)
    val = splits.val if len(splits.val) else None
    out = {}
    for task in tasks:
        spec = settings.spec(task, seed)
        sup = run(f"supervised[{task}]", supervised_baseline, config, splits.train, spec, val)
        probe = run(f"probe[{task}]", linear_probe, full, splits.train, spec, val)
        probe_half = run(f"probe-half[{task}]", linear_probe, half, splits.train, spec, val)
        out[task] = decompose(RiskMeasurements(
            supervised_train=_risk_on(sup, splits.train),
            probe_train=_risk_on(probe, splits.train),
            probe_test=_risk_on(probe, splits.test),
            probe_test_half_encoder=_risk_on(probe_half, splits.test),
        ))
    return out


# --- report tables --------------------------------------------------------------------------

def _cell(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def table_rows(rows: list[ResultRow]) -> list[dict]:
    """Rows in table form, stably sorted by case index.

    OOM and failed rows carry their status in every metric cell.
    """
    out = []
    for r in sorted(rows, key=lambda r: r.case):
        t = {"Case": r.case, "Windows": r.patch, "Depth": r.depth, "Dims": r.dim}
        for col in METRIC_COLUMNS + ["Criteria"]:
            t[col] = None if r.status == "ok" else r.status
        if r.status == "ok":
            for task, m in r.metrics.items():
                t[f"AUROC_{task.upper()}"] = float(m["auroc"])
                t[f"AUPRC_{task.upper()}"] = float(m["auprc"])
            t["Criteria"] = float(r.criteria)
        out.append(t)
    return out


def format_csv(table: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for t in table:
        w.writerow([_cell(t[c]) for c in COLUMNS])
    return buf.getvalue()


def _parse_cell(col: str, s: str):
    if s == "":
        return None
    if col in ("Case", "Windows", "Depth", "Dims"):
        return int(s)
    if s in STATUSES:
        return s
    return float(s)


def parse_csv(text: str) -> list[dict]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header != COLUMNS:
        raise ValueError(f"unexpected header {header}")
    return [{c: _parse_cell(c, s) for c, s in zip(COLUMNS, line)} for line in reader]


def format_markdown(table: list[dict]) -> str:
    lines = ["| " + " | ".join(COLUMNS) + " |", "|" + "---|" * len(COLUMNS)]
    for t in table:
        cells = [f"{t[c]:.4f}" if isinstance(t[c], float) else _cell(t[c]) for c in COLUMNS]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def _group_name(group: tuple) -> str:
    regime, method, seed, kind, level = group
    return f"{regime}_{method or 'none'}_seed{seed}_{kind}{level!r}"


def emit_report(rows: list[ResultRow], fmt: str, out_dir) -> list[Path]:
    """Write report files; returns the paths written.

    csv: one table per (regime, method, seed, level); json: every row with
    full provenance in one file; md: all tables in one file.
    """
    fmt = {"markdown": "md"}.get(fmt, fmt)
    if fmt not in ("csv", "json", "md"):
        raise ValueError(f"unknown report format {fmt!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    groups: dict[tuple, list[ResultRow]] = {}
    for r in rows:
        groups.setdefault(r.group, []).append(r)
    ordered = sorted(groups, key=lambda g: (REGIMES.index(g[0]), g[1], g[2], g[3], g[4]))

    if fmt == "json":
        body = [r.to_dict() for g in ordered for r in sorted(groups[g], key=lambda r: r.case)]
        path = out / "report.json"
        path.write_text(json.dumps(body, sort_keys=True, indent=1) + "\n")
        return [path]
    if fmt == "md":
        parts = []
        for g in ordered:
            parts.append(f"## {_group_name(g)}\n\n{format_markdown(table_rows(groups[g]))}")
        if not parts:
            parts.append(format_markdown([]))
        path = out / "report.md"
        path.write_text("\n".join(parts))
        return [path]
    if not ordered:
        path = out / "report.csv"
        path.write_text(format_csv([]))
        return [path]
    paths = []
    for g in ordered:
        path = out / f"{_group_name(g)}.csv"
        path.write_text(format_csv(table_rows(groups[g])))
        paths.append(path)
    return paths
