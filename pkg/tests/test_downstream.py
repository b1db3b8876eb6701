import numpy as np
import pytest
import torch

from ecgfoundry.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from ecgfoundry.data import LeakageError, SplitSpec, split_by_patient
from ecgfoundry.downstream import (TaskSpec, TrainedModel, evaluate, fine_tune, linear_probe, predict,
                                   random_probe, supervised_baseline, write_predictions_csv)
from ecgfoundry.model import init_params
from ecgfoundry.pretrain import BatchPlan, PretrainHyper, pretrain


@pytest.fixture(scope="module")
def splits(small_dataset):
    return split_by_patient(small_dataset, SplitSpec(0.6, 0.1, 0.3, seed=0))


@pytest.fixture(scope="module")
def ckpt(small_dataset):
    from ecgfoundry.model import ModelConfig
    cfg = ModelConfig(patch=250, depth=1, dim=16, decoder_depth=1, proj_dim=8)
    return pretrain(small_dataset, cfg, "HL", PretrainHyper(steps=2, plan=BatchPlan(4, 2, 2)), seed=0)[0]


SPEC = TaskSpec("cd", epochs=3, batch_size=16, lr=1e-3)


def _encoder_arrays(model: TrainedModel):
    return {k[len("encoder."):]: v.numpy() for k, v in model.classifier.state_dict().items()
            if k.startswith("encoder.")}


def test_probe_keeps_encoder_frozen(splits, ckpt):
    tr, va, _ = splits
    model = linear_probe(ckpt, tr, SPEC, va)
    assert model.frozen and model.regime == "probe"
    for k, v in _encoder_arrays(model).items():
        np.testing.assert_array_equal(v, ckpt.arrays[k])
    assert not any(p.requires_grad for p in model.classifier.encoder.parameters())


def test_finetune_updates_encoder(splits, ckpt):
    tr, va, _ = splits
    model = fine_tune(ckpt, tr, SPEC, va)
    assert not model.frozen
    changed = [k for k, v in _encoder_arrays(model).items() if not np.array_equal(v, ckpt.arrays[k])]
    assert changed


def test_random_probe_is_probe_on_initialisation(splits, ckpt):
    tr, va, te = splits
    rp = random_probe(ckpt.config, tr, SPEC, va)
    init = Checkpoint.from_model(init_params(ckpt.config, SPEC.seed, None), None, SPEC.seed)
    lp = linear_probe(init, tr, SPEC, va)
    np.testing.assert_array_equal(predict(rp, te), predict(lp, te))
    assert rp.regime == "random-probe"


def test_supervised_starts_from_standard_init(splits, ckpt):
    tr, _, _ = splits
    model = supervised_baseline(ckpt.config, tr, TaskSpec("cd", epochs=0))
    ref = init_params(ckpt.config, 0, None).encoder_state()
    for k, v in _encoder_arrays(model).items():
        torch.testing.assert_close(torch.from_numpy(v), ref[k])


def test_training_refuses_test_split(splits, ckpt):
    _, _, te = splits
    with pytest.raises(LeakageError):
        linear_probe(ckpt, te, SPEC)
    with pytest.raises(LeakageError):
        supervised_baseline(ckpt.config, te, SPEC)


def test_single_class_train_set_rejected(splits, ckpt):
    tr, _, _ = splits
    neg = tr.subset([i for i, y in enumerate(tr.task_labels("cd")) if y == 0])
    with pytest.raises(ValueError):
        linear_probe(ckpt, neg, SPEC)


def test_predictions_are_probabilities_in_input_order(splits, ckpt):
    tr, va, te = splits
    model = linear_probe(ckpt, tr, SPEC, va)
    s = predict(model, te)
    assert s.shape == (len(te),) and np.all((s >= 0) & (s <= 1))
    rev = te.subset(range(len(te) - 1, -1, -1))
    np.testing.assert_array_equal(predict(model, rev), s[::-1])


def test_runs_are_deterministic(splits, ckpt):
    tr, va, te = splits
    a = predict(fine_tune(ckpt, tr, SPEC, va), te)
    b = predict(fine_tune(ckpt, tr, SPEC, va), te)
    np.testing.assert_array_equal(a, b)


def test_trained_model_round_trip(tmp_path, splits, ckpt):
    tr, va, te = splits
    model = linear_probe(ckpt, tr, SPEC, va)
    save_checkpoint(model.to_checkpoint(), tmp_path / "m.ckpt")
    back = TrainedModel.from_checkpoint(load_checkpoint(tmp_path / "m.ckpt"))
    assert back.task == "cd" and back.regime == "probe" and back.frozen
    np.testing.assert_array_equal(predict(back, te), predict(model, te))


def test_evaluate_and_prediction_csv(tmp_path, splits, ckpt):
    tr, va, te = splits
    models = {t: linear_probe(ckpt, tr, TaskSpec(t, epochs=2), va) for t in ("mi", "cd")}
    rep = evaluate(models, te)
    assert set(rep.tasks) == {"mi", "cd"} and rep.meta["split"] == "test"
    assert rep.criteria == pytest.approx(sum(m.auroc + m.auprc for m in rep.tasks.values()), abs=1e-12)
    write_predictions_csv(models["mi"], te, tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "record_id,score,label" and len(lines) == len(te) + 1
    rid, score, label = lines[1].split(",")
    assert rid == te.record_ids[0] and 0 <= float(score) <= 1 and label in ("0", "1")
