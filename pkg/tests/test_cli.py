import json

import pytest

from ecgfoundry.checkpoint import load_checkpoint
from ecgfoundry.cli import main
from ecgfoundry.data import read_dataset


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["data", "synth", "--n-patients", "40", "--seed", "2", "--out", str(d / "syn")]) == 0
    assert main(["data", "split", "--data", str(d / "syn"), "--seed", "0", "--out", str(d / "sp")]) == 0
    (d / "cfg.json").write_text(json.dumps({
        "version": 1, "patch": 625, "depth": 1, "dim": 16, "decoder_depth": 1, "proj_dim": 8,
        "pretrain": {"steps": 2, "patients": 4}, "downstream": {"epochs": 1}}))
    return d


def test_data_commands(workdir):
    syn = read_dataset(workdir / "syn")
    parts = [read_dataset(workdir / "sp" / s) for s in ("train", "val", "test")]
    assert sum(len(p) for p in parts) == len(syn) == 80
    assert main(["data", "subsample", "--data", str(workdir / "sp" / "train"), "--usage", "0.5",
                 "--seed", "0", "--out", str(workdir / "half")]) == 0
    assert len(read_dataset(workdir / "half")) == int(0.5 * len(parts[0]) + 0.5)
    assert main(["data", "standardize", "--data", str(workdir / "syn"), "--out", str(workdir / "std")]) == 0
    assert read_dataset(workdir / "std") == syn


def test_pretrain_probe_and_predictions(workdir):
    ck = workdir / "hl.ckpt"
    assert main(["pretrain", "--method", "hl", "--config", str(workdir / "cfg.json"),
                 "--data", str(workdir / "sp" / "train"), "--steps", "2", "--seed", "0", "--out", str(ck)]) == 0
    assert load_checkpoint(ck).method == "HL"
    assert (workdir / "hl.loss.csv").read_text().startswith("step,total,patient,sample,reconstruction\n")
    out = workdir / "probe.ckpt"
    assert main(["probe", "--ckpt", str(ck), "--task", "cd", "--data", str(workdir / "sp" / "train"),
                 "--eval", str(workdir / "sp" / "test"), "--seed", "0", "--out", str(out)]) == 0
    lines = (workdir / "probe.predictions.csv").read_text().splitlines()
    assert lines[0] == "record_id,score,label"
    assert main(["probe", "--ckpt", "random", "--config", str(workdir / "cfg.json"), "--task", "mi",
                 "--data", str(workdir / "sp" / "train"), "--out", str(workdir / "rp.ckpt")]) == 0
    assert load_checkpoint(workdir / "rp.ckpt").meta["regime"] == "random-probe"


def test_config_requires_version_and_rejects_unknown_keys(workdir, capsys):
    for body in ({"patch": 125}, {"version": 1, "patchsize": 125}):
        bad = workdir / "bad.json"
        bad.write_text(json.dumps(body))
        rc = main(["pretrain", "--method", "gl", "--config", str(bad), "--data", str(workdir / "syn"),
                   "--out", str(workdir / "x.ckpt")])
        assert rc == 2
    assert "version" in capsys.readouterr().err


def test_grid_and_report(workdir):
    spec = workdir / "grid.json"
    spec.write_text(json.dumps({
        "version": 1, "patches": [625], "depths": [1], "dims": [16], "methods": ["GL"], "tasks": ["cd"],
        "decoder_depth": 1, "proj_dim": 8, "parameter_budget": 10**7,
        "pretrain": {"steps": 1, "patients": 4}, "downstream": {"epochs": 1}}))
    assert main(["grid", "--spec", str(spec), "--data", str(workdir / "syn"), "--out", str(workdir / "res")]) == 0
    assert main(["report", "--rows", str(workdir / "res"), "--format", "csv", "--out", str(workdir / "rep")]) == 0
    tables = sorted((workdir / "rep").glob("*.csv"))
    assert [p.name for p in tables] == ["finetune_GL_seed0_usage1.0.csv", "probe_GL_seed0_usage1.0.csv"]
    assert tables[0].read_text().startswith("Case,Windows,Depth,Dims,AUROC_MI")
