import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecgfoundry.data import (DataFormatError, Dataset, ECGRecord, LabelSet, LeakageError, ShapeError,
                             SplitSpec, SynthSpec, fit_duration, read_dataset, require_trainable,
                             resample, rescale_units, split_by_patient, standardize,
                             subsample_case_ratio, subsample_data_usage, synth_generate,
                             write_dataset)


def _toy(patients, labels=None, n=2500):
    recs = [ECGRecord(f"r{i}", p, np.full((12, n), i, dtype=np.float32)) for i, p in enumerate(patients)]
    lab = None
    if labels is not None:
        lab = {f"r{i}": LabelSet(mi=bool(y)) for i, y in enumerate(labels)}
    return Dataset(recs, lab)


# --- standardisation ------------------------------------------------------------

def test_resample_halves_length():
    x = np.random.default_rng(0).normal(size=(12, 5000))
    y = resample(x, 500, 250)
    assert y.shape == (12, 2500)
    np.testing.assert_allclose(y[:, 10], x[:, 20])


def test_resample_identity_and_constant():
    x = np.random.default_rng(1).normal(size=(3, 77))
    np.testing.assert_array_equal(resample(x, 250, 250), x)
    c = np.full((2, 4000), 0.7)
    np.testing.assert_allclose(resample(c, 400, 250), 0.7)
    assert resample(c, 400, 250).shape == (2, 2500)


def test_resample_rejects_bad_rates():
    with pytest.raises(ValueError):
        resample(np.zeros((1, 10)), 0, 250)
    with pytest.raises(ValueError):
        resample(np.zeros((1, 10)), 250, -1)


def test_rescale_units():
    assert rescale_units(np.array([200.0]), 0.005)[0] == pytest.approx(1.0)
    x = np.arange(4.0)
    np.testing.assert_array_equal(rescale_units(x, 1), x)
    np.testing.assert_array_equal(rescale_units(np.zeros(3), 0.1), 0)
    with pytest.raises(ValueError):
        rescale_units(x, 0)


def test_fit_duration_crop_and_pad():
    x = np.arange(2600.0)[None]
    np.testing.assert_array_equal(fit_duration(x), x[:, 50:2550])
    y = fit_duration(np.ones((1, 2400)))
    assert y.shape == (1, 2500)
    assert y[0, :50].sum() == 0 and y[0, -50:].sum() == 0 and y[0, 50:2450].all()
    z = np.ones((1, 2500))
    np.testing.assert_array_equal(fit_duration(z), z)


def test_standardize_mimic_and_code15_shapes():
    rng = np.random.default_rng(2)
    mimic = ECGRecord("m", "p", rng.normal(size=(12, 5000)) * 200, 500, 0.005)
    out = standardize(mimic)
    assert out.leads.shape == (12, 2500) and out.sample_rate == 250 and out.mv_unit == 1.0
    assert out.is_canonical()
    code = ECGRecord("c", "p", rng.normal(size=(12, 4096)), 400, 1.0)
    out = standardize(code)
    assert out.leads.shape == (12, 2500) and out.sample_rate == 250


def test_standardize_canonical_is_bitwise_identity_and_idempotent():
    rec = synth_generate(SynthSpec(), 1, 1, seed=0).records[0]
    assert standardize(rec) == rec
    raw = ECGRecord("x", "p", np.random.default_rng(0).normal(size=(12, 3000)), 360, 0.5)
    once = standardize(raw)
    assert standardize(once) == once


def test_standardize_rejects_wrong_lead_count():
    with pytest.raises(ShapeError):
        standardize(ECGRecord("x", "p", np.zeros((11, 2500), dtype=np.float32)))


# --- splits ---------------------------------------------------------------------------

@given(st.lists(st.integers(0, 15), min_size=1, max_size=60), st.integers(0, 2**31 - 1),
       st.sampled_from([(0.72, 0.08, 0.2), (0.5, 0.0, 0.5), (1.0, 0.0, 0.0), (0.34, 0.33, 0.33)]))
@settings(max_examples=200, deadline=None)
def test_splits_are_patient_disjoint_and_complete(pids, seed, fractions):
    ds = _toy([f"p{p}" for p in pids], n=4)
    parts = split_by_patient(ds, SplitSpec(*fractions, seed=seed))
    seen = [set(p.patient_ids) for p in parts]
    assert not (seen[0] & seen[1] or seen[0] & seen[2] or seen[1] & seen[2])
    assert sorted(r for p in parts for r in p.record_ids) == sorted(ds.record_ids)
    assert [p.split for p in parts] == ["train", "val", "test"]


def test_split_sizes_follow_fractions_by_patient():
    ds = _toy([f"p{i // 2}" for i in range(200)], n=4)
    tr, va, te = split_by_patient(ds, SplitSpec(seed=1))
    assert [len(set(p.patient_ids)) for p in (tr, va, te)] == [72, 8, 20]


def test_split_single_patient_and_determinism():
    ds = _toy(["a", "a", "a"], n=4)
    sizes = [len(p) for p in split_by_patient(ds, SplitSpec(seed=0))]
    assert sorted(sizes) == [0, 0, 3]
    big = _toy([f"p{i}" for i in range(100)], n=4)
    a = split_by_patient(big, SplitSpec(seed=5))
    b = split_by_patient(big, SplitSpec(seed=5))
    assert [p.record_ids for p in a] == [p.record_ids for p in b]


def test_split_rejects_bad_fractions_and_empty():
    with pytest.raises(ValueError):
        SplitSpec(0.5, 0.2, 0.2)
    with pytest.raises(ValueError):
        split_by_patient(Dataset([]), SplitSpec())


def test_test_split_refused_for_training():
    _, _, te = split_by_patient(_toy(["a", "b", "c", "d", "e"], n=4), SplitSpec(0.6, 0.2, 0.2))
    with pytest.raises(LeakageError):
        require_trainable(te)


# --- subsampling ----------------------------------------------------------------------

def test_data_usage_sizes():
    ds = _toy([f"p{i // 4}" for i in range(200)], [i % 3 == 0 for i in range(200)], n=4)
    assert len(subsample_data_usage(ds, 0.25, 0)) == 50
    full = subsample_data_usage(ds, 1.0, 0)
    assert sorted(full.record_ids) == sorted(ds.record_ids)
    for bad in (0.0, 1.5):
        with pytest.raises(ValueError):
            subsample_data_usage(ds, bad, 0)


def test_data_usage_spreads_over_patients():
    ds = _toy([f"p{i // 4}" for i in range(200)], [0] * 200, n=4)
    sub = subsample_data_usage(ds, 0.25, 3)
    assert len(set(sub.patient_ids)) == 50


def test_data_usage_preserves_prevalence():
    ds = synth_generate(SynthSpec(), 500, 2, seed=4)
    for task in ("mi", "hyp"):
        base = ds.task_labels(task).mean()
        for seed in range(10):
            sub = subsample_data_usage(ds, 0.25, seed)
            assert abs(sub.task_labels(task).mean() - base) <= 0.05


def test_case_ratio_exact_arithmetic():
    ds = _toy([f"p{i}" for i in range(115)], [1] * 20 + [0] * 95, n=4)
    sub = subsample_case_ratio(ds, "mi", 0.05, 0)
    y = sub.task_labels("mi")
    assert (y == 0).sum() == 95 and (y == 1).sum() == 5
    same = subsample_case_ratio(_toy([f"p{i}" for i in range(100)], [1] * 5 + [0] * 95, n=4), "MI", 0.05, 0)
    assert len(same) == 100


def test_case_ratio_caps_and_warns():
    ds = _toy([f"p{i}" for i in range(12)], [1] * 2 + [0] * 10, n=4)
    sub = subsample_case_ratio(ds, "mi", 0.5, 0)
    assert sub.task_labels("mi").sum() == 2
    assert sub.meta["warnings"]


@given(st.integers(1, 60), st.integers(1, 300), st.floats(0.005, 0.6), st.integers(0, 1000))
@settings(max_examples=300, deadline=None)
def test_case_ratio_realized_within_one_sample(n_pos, n_neg, r, seed):
    ds = _toy([f"p{i}" for i in range(n_pos + n_neg)], [1] * n_pos + [0] * n_neg, n=2)
    sub = subsample_case_ratio(ds, "mi", r, seed)
    y = sub.task_labels("mi")
    if sub.meta.get("warnings"):
        assert y.sum() == n_pos
    else:
        assert abs(y.mean() - r) <= 1 / len(y)


def test_case_ratio_needs_both_classes():
    with pytest.raises(ValueError):
        subsample_case_ratio(_toy(["a", "b"], [0, 0], n=4), "mi", 0.1, 0)


# --- synthetic generator -----------------------------------------------------------

def test_synth_zero_magnitudes_give_all_negative():
    ds = synth_generate(SynthSpec(mi=0, sttc=0, cd=0, hyp=0), 40, 1, seed=0)
    assert all(not any(l.to_dict().values()) for l in ds.labels.values())


def test_synth_is_deterministic_and_canonical():
    a = synth_generate(SynthSpec(), 5, 2, seed=9)
    b = synth_generate(SynthSpec(), 5, 2, seed=9)
    assert a == b
    assert all(r.is_canonical() for r in a.records)
    assert synth_generate(SynthSpec(), 5, 2, seed=10) != a


def test_synth_labels_are_patient_level():
    ds = synth_generate(SynthSpec(), 30, 3, seed=1)
    by_patient = {}
    for r in ds.records:
        by_patient.setdefault(r.patient_id, set()).add(ds.labels[r.record_id])
    assert all(len(v) == 1 for v in by_patient.values())


# --- on-disk container ------------------------------------------------------------

def test_round_trip(tmp_path):
    ds = synth_generate(SynthSpec(), 5, 2, seed=0)
    write_dataset(ds, tmp_path / "d")
    assert read_dataset(tmp_path / "d") == ds
    unlabeled = Dataset(ds.records[:3])
    write_dataset(unlabeled, tmp_path / "u")
    back = read_dataset(tmp_path / "u")
    assert back == unlabeled and back.labels is None


def test_blob_is_little_endian_lead_major(tmp_path):
    leads = np.arange(12 * 2500, dtype=np.float32).reshape(12, 2500)
    write_dataset(Dataset([ECGRecord("a", "p", leads)]), tmp_path)
    raw = (tmp_path / "signals" / "a.f32").read_bytes()
    assert np.frombuffer(raw, dtype="<f4")[2500] == leads[1, 0]


def _manifest(tmp_path):
    ds = synth_generate(SynthSpec(), 2, 1, seed=0)
    write_dataset(ds, tmp_path)
    path = tmp_path / "manifest.jsonl"
    return path, [json.loads(l) for l in path.read_text().splitlines()]


def test_missing_blob_is_a_parse_error(tmp_path):
    _manifest(tmp_path)
    (tmp_path / "signals" / "p00001_r00.f32").unlink()
    with pytest.raises(DataFormatError, match="p00001_r00"):
        read_dataset(tmp_path)


def test_eleven_leads_is_a_shape_error(tmp_path):
    path, entries = _manifest(tmp_path)
    entries[0]["n_leads"] = 11
    path.write_text("\n".join(json.dumps(e) for e in entries))
    with pytest.raises(ShapeError, match="p00000_r00"):
        read_dataset(tmp_path)


@pytest.mark.parametrize("edit", [
    lambda e: e.update(format_version=2),
    lambda e: e.update(n_samples=2400),
    lambda e: e.pop("patient_id"),
])
def test_malformed_manifest_names_record(tmp_path, edit):
    path, entries = _manifest(tmp_path)
    edit(entries[1])
    path.write_text("\n".join(json.dumps(e) for e in entries))
    with pytest.raises(DataFormatError, match="p00001_r00"):
        read_dataset(tmp_path)
