import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecgfoundry.metrics import (EvalReport, RiskMeasurements, TaskMetrics, UndefinedMetricError,
                                auprc, auroc, criteria, decompose, f1)
from oracles import auprc_prefixes, auroc_pairs


def _instance(rng, n):
    y = rng.integers(0, 2, n)
    y[0], y[1] = 0, 1
    s = rng.integers(0, 6, n) / 5.0  # few distinct values, so plenty of ties
    return s, y


def test_auroc_worked_example():
    assert auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75


def test_auroc_extremes():
    assert auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auroc([0.3] * 5, [0, 1, 0, 1, 1]) == 0.5


def test_auroc_single_class_is_undefined():
    with pytest.raises(UndefinedMetricError):
        auroc([0.1, 0.2], [1, 1])


def test_auprc_worked_examples():
    assert auprc([0.9, 0.8, 0.7], [1, 0, 1]) == pytest.approx(5 / 6, abs=1e-15)
    assert auprc([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0
    assert auprc([0.5] * 8, [1, 0, 0, 1, 0, 0, 0, 1]) == pytest.approx(3 / 8, abs=1e-15)


def test_auprc_without_positives_is_undefined():
    with pytest.raises(UndefinedMetricError):
        auprc([0.1, 0.2], [0, 0])


def test_f1_conventions():
    assert f1([0.9, 0.1], [1, 0]) == 1.0
    assert f1([0.1, 0.2], [1, 0]) == 0.0
    # TP=1, FP=1, FN=1
    assert f1([0.9, 0.8, 0.1, 0.2], [1, 0, 1, 0]) == 0.5


def test_metrics_match_oracles_on_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(300):
        s, y = _instance(rng, int(rng.integers(2, 51)))
        assert auroc(s, y) == float(auroc_pairs(s, y))
        assert abs(auprc(s, y) - auprc_prefixes(s, y)) < 1e-12


scores_labels = st.integers(2, 40).flatmap(lambda n: st.tuples(
    st.lists(st.integers(-500, 500).map(lambda k: k / 100), min_size=n, max_size=n),
    st.lists(st.integers(0, 1), min_size=n, max_size=n),
)).filter(lambda sl: 0 < sum(sl[1]) < len(sl[1]))


@given(scores_labels)
def test_auroc_invariant_under_monotone_transform(sl):
    s, y = np.array(sl[0]), sl[1]
    assert auroc(np.tanh(s / 3) * 7 + 2, y) == pytest.approx(auroc(s, y), abs=1e-12)


@given(scores_labels)
def test_auroc_of_negated_scores_complements(sl):
    s, y = np.array(sl[0]), sl[1]
    assert auroc(s, y) + auroc(-s, y) == pytest.approx(1.0, abs=1e-12)


@given(scores_labels)
@settings(max_examples=50)
def test_auprc_constant_scores_equal_prevalence(sl):
    y = sl[1]
    assert auprc(np.zeros(len(y)), y) == pytest.approx(np.mean(y), abs=1e-12)


@given(scores_labels)
def test_metrics_are_pure(sl):
    s, y = sl
    assert auroc(s, y) == auroc(list(s), list(y))
    assert auprc(s, y) == auprc(list(s), list(y))


def test_criteria_sums_aurocs_and_auprcs():
    rep = EvalReport({"mi": TaskMetrics(0.7, 0.4), "cd": TaskMetrics(0.9, 0.6)})
    assert rep.criteria == pytest.approx(2.6, abs=1e-12)
    assert criteria({t: (0.0, 0.0) for t in "abcd"}) == 0.0
    assert EvalReport.from_dict(rep.to_dict()).criteria == rep.criteria


def test_risk_decomposition_equal_risks_cancel():
    r = decompose(RiskMeasurements(0.2, 0.2, 0.2, 0.2))
    assert r.approximation_error == 0.2
    assert r.representation_usability_error == 0.0
    assert r.probe_generalization_error == 0.0
    assert r.encoder_generalization_error == 0.0


def test_risk_decomposition_allows_negative_terms():
    r = decompose(RiskMeasurements(0.3, 0.25, 0.185, 0.2))
    assert r.representation_usability_error < 0
    assert math.isclose(r.probe_generalization_error, -0.065)
    assert r.encoder_generalization_error > 0
