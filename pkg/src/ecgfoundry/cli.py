"""``foundry`` command line."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Literal, Optional

from pydantic import Field, ValidationError

from .checkpoint import load_checkpoint, save_checkpoint
from .data import (TASKS, SplitSpec, SynthSpec, read_dataset, split_by_patient, standardize_dataset,
                   subsample_case_ratio, subsample_data_usage, synth_generate, write_dataset)
from .downstream import (TrainedModel, fine_tune, linear_probe, random_probe, supervised_baseline,
                         write_predictions_csv)
from .experiments import (DownstreamSettings, PretrainSettings, Splits, _Strict, emit_report,
                          load_grid_spec, load_rows, risk_decomposition, run_grid)
from .model import ModelConfig
from .pretrain import pretrain, write_history_csv


class ConfigFile(_Strict):
    """Model architecture plus optional training settings."""

    version: Literal[1]
    patch: int = Field(125, ge=1)
    depth: int = Field(2, ge=1)
    dim: int = Field(256, ge=1)
    decoder_depth: int = Field(2, ge=1)
    n_heads: Optional[int] = None
    mlp_ratio: int = Field(4, ge=1)
    proj_dim: int = Field(128, ge=1)
    pretrain: PretrainSettings = PretrainSettings()
    downstream: DownstreamSettings = DownstreamSettings()

    def model(self) -> ModelConfig:
        return ModelConfig(patch=self.patch, depth=self.depth, dim=self.dim,
                           decoder_depth=self.decoder_depth, n_heads=self.n_heads,
                           mlp_ratio=self.mlp_ratio, proj_dim=self.proj_dim)


def load_config(path) -> ConfigFile:
    return ConfigFile.model_validate_json(Path(path).read_text())


# --- data ---------------------------------------------------------------------

def _data_synth(a):
    ds = synth_generate(SynthSpec(), a.n_patients, a.records_per_patient, seed=a.seed)
    write_dataset(ds, a.out)
    print(f"wrote {len(ds)} records to {a.out}")


def _data_standardize(a):
    ds = standardize_dataset(read_dataset(a.data))
    write_dataset(ds, a.out)
    print(f"wrote {len(ds)} records to {a.out}")


def _data_split(a):
    parts = split_by_patient(read_dataset(a.data), SplitSpec(*a.fractions, seed=a.seed))
    for part in parts:
        write_dataset(part, Path(a.out) / part.split)
        print(f"{part.split}: {len(part)} records")


def _data_subsample(a):
    ds = read_dataset(a.data)
    if a.case_ratio is not None:
        if a.task is None:
            raise SystemExit("--case-ratio needs --task")
        sub = subsample_case_ratio(ds, a.task, a.case_ratio, a.seed)
    else:
        sub = subsample_data_usage(ds, a.usage, a.seed)
    for w in sub.meta.get("warnings", []):
        print(f"warning: {w}", file=sys.stderr)
    write_dataset(sub, a.out)
    print(f"wrote {len(sub)} of {len(ds)} records to {a.out}")


# --- training -------------------------------------------------------------------

def _pretrain(a):
    cfg = load_config(a.config)
    settings = cfg.pretrain if a.steps is None else cfg.pretrain.model_copy(update={"steps": a.steps})
    ckpt, history = pretrain(read_dataset(a.data), cfg.model(), a.method, settings.hyper(), seed=a.seed)
    save_checkpoint(ckpt, a.out)
    hist_path = a.history or str(Path(a.out).with_suffix(".loss.csv"))
    write_history_csv(history, hist_path)
    print(f"checkpoint {a.out} ({ckpt.content_hash()}), losses {hist_path}")


def _source(a):
    if a.ckpt == "random":
        if a.config is None:
            raise SystemExit("--ckpt random needs --config")
        return None, load_config(a.config)
    cfg = load_config(a.config) if a.config else None
    return load_checkpoint(a.ckpt), cfg


def _downstream(a, regime: str):
    ckpt, cfg = _source(a)
    settings = cfg.downstream if cfg else DownstreamSettings()
    overrides = {k: getattr(a, k) for k in ("epochs", "lr") if getattr(a, k) is not None}
    spec = settings.model_copy(update=overrides).spec(a.task, a.seed)
    train = read_dataset(a.data, split="train")
    val = read_dataset(a.val, split="val") if a.val else None
    if regime == "supervised":
        config = cfg.model() if cfg else ckpt.config
        model = supervised_baseline(config, train, spec, val)
    elif ckpt is None:
        if regime != "probe":
            raise SystemExit("--ckpt random is only meaningful for probe")
        model = random_probe(cfg.model(), train, spec, val)
    elif regime == "probe":
        model = linear_probe(ckpt, train, spec, val)
    else:
        model = fine_tune(ckpt, train, spec, val)
    save_checkpoint(model.to_checkpoint(a.seed), a.out)
    print(f"{model.regime} model for {model.task} written to {a.out}")
    if a.eval:
        test = read_dataset(a.eval, split="test")
        pred_path = a.predictions or str(Path(a.out).with_suffix(".predictions.csv"))
        write_predictions_csv(model, test, pred_path)
        print(f"predictions {pred_path}")


def _predict(a):
    model = TrainedModel.from_checkpoint(load_checkpoint(a.model))
    write_predictions_csv(model, read_dataset(a.data, split="test"), a.out)


# --- experiments -----------------------------------------------------------------

def _grid(a):
    grid = load_grid_spec(a.spec)
    rows = run_grid(grid, a.data, a.unlabeled, a.out)
    counts = {}
    for r in rows:
        counts[r.status] = counts.get(r.status, 0) + 1
    print(f"{len(rows)} rows: " + ", ".join(f"{k}={v}" for k, v in sorted(counts.items())))


def _report(a):
    rows = load_rows(a.rows)
    out = a.out or (Path(a.rows) / "report" if Path(a.rows).is_dir() else Path("report"))
    for p in emit_report(rows, a.format, out):
        print(p)


def _riskdecomp(a):
    cfg = load_config(a.config)
    labeled = read_dataset(a.data)
    splits = Splits.from_dataset(labeled, (0.72, 0.08, 0.2), a.seed)
    tasks = a.task or list(TASKS)
    reports = risk_decomposition(cfg.model(), a.method, read_dataset(a.unlabeled), splits, tasks,
                                 cfg.pretrain, cfg.downstream, a.seed)
    body = {t: r.to_dict() for t, r in reports.items()}
    text = json.dumps(body, indent=1, sort_keys=True) + "\n"
    if a.out:
        Path(a.out).write_text(text)
    print(text, end="")


# --- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="foundry", description="ECG foundation-model experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    data = sub.add_parser("data", help="dataset preparation")
    dsub = data.add_subparsers(dest="action", required=True)
    s = dsub.add_parser("synth", help="generate a labeled synthetic dataset")
    s.add_argument("--n-patients", type=int, default=1000)
    s.add_argument("--records-per-patient", type=int, default=2)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_data_synth)
    s = dsub.add_parser("standardize", help="resample/rescale/crop to 250 Hz, 10 s, mV")
    s.add_argument("--data", required=True)
    s.add_argument("--seed", type=int, default=0, help="unused; accepted for symmetry")
    s.add_argument("--out", required=True)
    s.set_defaults(func=_data_standardize)
    s = dsub.add_parser("split", help="patient-disjoint train/val/test split")
    s.add_argument("--data", required=True)
    s.add_argument("--fractions", type=float, nargs=3, default=(0.72, 0.08, 0.2))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_data_split)
    s = dsub.add_parser("subsample", help="data-usage or case-ratio subsampling")
    s.add_argument("--data", required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--usage", type=float, help="fraction of records to keep, in (0, 1]")
    g.add_argument("--case-ratio", type=float, help="positive fraction, in (0, 1)")
    s.add_argument("--task", choices=TASKS)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_data_subsample)

    s = sub.add_parser("pretrain", help="self-supervised pre-training")
    s.add_argument("--method", type=str.upper, choices=["CL", "GL", "HL"], required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--history", help="loss CSV path (default: next to the checkpoint)")
    s.set_defaults(func=_pretrain)

    helps = {"probe": "linear probe on a frozen encoder ('random' for the random-init baseline)",
             "finetune": "fine-tune encoder and head from a checkpoint",
             "supervised": "end-to-end supervised baseline from random init"}
    for name in ("probe", "finetune", "supervised"):
        s = sub.add_parser(name, help=helps[name])
        s.add_argument("--ckpt", default="random", help="checkpoint file or 'random'")
        s.add_argument("--config", help="config JSON (architecture for random/supervised, settings)")
        s.add_argument("--task", type=str.lower, choices=TASKS, required=True)
        s.add_argument("--data", required=True, help="training split directory")
        s.add_argument("--val", help="validation split directory (early stopping)")
        s.add_argument("--eval", help="test split directory to score")
        s.add_argument("--predictions", help="predictions CSV path")
        s.add_argument("--epochs", type=int)
        s.add_argument("--lr", type=float)
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--out", required=True)
        s.set_defaults(func=lambda a, r=name: _downstream(a, r))

    s = sub.add_parser("predict", help="score a dataset with a trained task model")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_predict)

    s = sub.add_parser("grid", help="run an experiment grid")
    s.add_argument("--spec", required=True)
    s.add_argument("--data", required=True, help="labeled dataset directory")
    s.add_argument("--unlabeled", help="pre-training dataset (default: labeled train split)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=_grid)

    s = sub.add_parser("report", help="emit result tables")
    s.add_argument("--rows", required=True, help="results directory or JSON report")
    s.add_argument("--format", choices=["csv", "json", "md", "markdown"], default="csv")
    s.add_argument("--out")
    s.set_defaults(func=_report)

    s = sub.add_parser("riskdecomp", help="four-term risk decomposition")
    s.add_argument("--config", required=True)
    s.add_argument("--method", type=str.upper, choices=["CL", "GL", "HL"], required=True)
    s.add_argument("--unlabeled", required=True)
    s.add_argument("--data", required=True, help="labeled dataset, split by patient")
    s.add_argument("--task", type=str.lower, choices=TASKS, action="append")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=_riskdecomp)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ValidationError, ValueError, FileNotFoundError) as exc:
        print(f"foundry: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
