import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conformal_audit.data import ScoreRecord
from conformal_audit.errors import AuditError
from conformal_audit.metrics import (
    average_ranks,
    average_set_size,
    coverage_disparity,
    marginal_coverage,
    max_softmax_prob,
    predictive_entropy,
    rule_in_accuracy,
    rule_out_accuracy,
    set_size_disparity,
    spearman,
)
from conformal_audit.prediction import PredictionSet


def _ps(classes):
    return PredictionSet(tuple(classes), len(classes), "aps")


# ---------------------------------------------------------------- coverage

def test_coverage_counting():
    sets = [_ps([0]), _ps([1]), _ps([0, 1]), _ps([2]), _ps([0]),
            _ps([1]), _ps([2]), _ps([0]), _ps([1]), _ps([0, 2])]
    labels = [0, 1, 1, 2, 0, 1, 2, 0, 1, 1]  # last one misses
    assert marginal_coverage(sets, labels) == pytest.approx(0.9)


def test_full_sets_always_cover():
    sets = [_ps([0, 1, 2])] * 5
    assert marginal_coverage(sets, [0, 1, 2, 1, 0]) == 1.0


def test_coverage_length_mismatch():
    with pytest.raises(AuditError):
        marginal_coverage([_ps([0])], [0, 1])


def test_average_set_size():
    assert average_set_size([_ps([0]), _ps([0, 1, 2])]) == pytest.approx(2.0)
    assert average_set_size([_ps([1])] * 7) == 1.0


def test_average_size_matches_mean_oracle(rng):
    sizes = rng.integers(1, 9, size=1000)
    sets = [_ps(range(s)) for s in sizes]
    assert average_set_size(sets) == pytest.approx(sizes.sum() / len(sizes))


# -------------------------------------------------------------- disparities

def test_disparity_two_groups():
    assert coverage_disparity({"a": 0.9, "b": 0.8}) == pytest.approx(0.05)


def test_disparity_three_groups_enumerated():
    # pairs: |0.9-0.9| + |0.9-0.8| + |0.9-0.8| = 0.2, over |A| = 3
    got = coverage_disparity({"a": 0.9, "b": 0.9, "c": 0.8})
    assert got == pytest.approx(0.2 / 3)


def test_disparity_equal_is_zero():
    assert set_size_disparity({"a": 2.5, "b": 2.5, "c": 2.5}) == 0.0


def test_set_size_disparity_two_groups():
    assert set_size_disparity({"a": 3.0, "b": 2.0}) == pytest.approx(0.5)


def test_disparity_needs_two_groups():
    with pytest.raises(AuditError):
        coverage_disparity({"a": 0.9})


def test_disparity_normalize_pairs_option():
    vals = {"a": 0.9, "b": 0.8, "c": 0.7}
    plain = coverage_disparity(vals)
    per_pair = coverage_disparity(vals, normalize_pairs=True)
    assert plain == pytest.approx(0.4 / 3)
    assert per_pair == pytest.approx(0.4 / 3 * 3 / 3)  # 3 pairs, |A| = 3 coincide here
    vals4 = {"a": 1.0, "b": 0.0, "c": 0.5, "d": 0.5}
    assert coverage_disparity(vals4, normalize_pairs=True) == pytest.approx(
        coverage_disparity(vals4) * 4 / 6
    )


@given(seed=st.integers(0, 10**6))
@settings(max_examples=40, deadline=None)
def test_disparity_relabel_invariant(seed):
    r = np.random.default_rng(seed)
    vals = {f"g{i}": float(r.uniform(0, 1)) for i in range(4)}
    perm = {f"g{i}": f"h{j}" for i, j in enumerate(r.permutation(4))}
    relabeled = {perm[g]: v for g, v in vals.items()}
    assert coverage_disparity(vals) == pytest.approx(coverage_disparity(relabeled))


@given(vals=st.lists(st.floats(0, 1), min_size=2, max_size=6))
@settings(max_examples=60, deadline=None)
def test_disparity_zero_iff_all_equal(vals):
    named = {f"g{i}": v for i, v in enumerate(vals)}
    d = coverage_disparity(named)
    if len(set(vals)) == 1:
        assert d == 0.0
    else:
        assert d > 0.0


# ------------------------------------------------------------ rule in / out

def test_rule_in_undefined_marker():
    sets = [_ps([0])]
    out = rule_in_accuracy(sets, [0], ["g"], critical={2})
    assert out["g"] is None


def test_rule_in_counting():
    sets = [_ps([2]), _ps([2, 3]), _ps([3]), _ps([1]), _ps([0])]
    labels = [2, 3, 3, 2, 0]
    groups = ["1", "1", "1", "1", "1"]
    # four critical-label records; the label is in the set for the first three
    out = rule_in_accuracy(sets, labels, groups, critical={2, 3})
    assert out["1"] == pytest.approx(3 / 4)


def test_rule_out_full_sets_fail():
    sets = [_ps([0, 1, 2])] * 3
    out = rule_out_accuracy(sets, [0, 1, 0], ["g"] * 3, critical={2})
    assert out["g"] == 0.0


def test_rule_out_singletons_pass():
    sets = [_ps([0]), _ps([1])]
    out = rule_out_accuracy(sets, [0, 1], ["g", "g"], critical={2})
    assert out["g"] == 1.0


def test_rule_out_enumerated():
    sets = [_ps([0]), _ps([0, 5]), _ps([1])]
    out = rule_out_accuracy(sets, [0, 0, 1], ["g"] * 3, critical={5})
    assert out["g"] == pytest.approx(2 / 3)


@given(seed=st.integers(0, 10**6))
@settings(max_examples=40, deadline=None)
def test_rule_protocols_partition(seed):
    r = np.random.default_rng(seed)
    n = int(r.integers(5, 40))
    k = 6
    labels = r.integers(0, k, size=n).tolist()
    groups = [f"g{int(x)}" for x in r.integers(0, 3, size=n)]
    sets = [_ps(sorted(set(r.integers(0, k, size=3).tolist()))) for _ in range(n)]
    critical = {0, 4}
    n_in = sum(1 for y in labels if y in critical)
    n_out = sum(1 for y in labels if y not in critical)
    assert n_in + n_out == n
    rule_in_accuracy(sets, labels, groups, critical)
    rule_out_accuracy(sets, labels, groups, critical)


# ------------------------------------------------------------- uncertainty

def test_max_softmax_prob():
    assert max_softmax_prob(ScoreRecord("a", "g", 0, probs=np.full(4, 0.25))) == 0.25
    one_hot = np.zeros(4)
    one_hot[2] = 1.0
    assert max_softmax_prob(ScoreRecord("a", "g", 0, probs=one_hot)) == 1.0
    rec = ScoreRecord("a", "g", 0, probs=None,
                      mc_samples=np.array([[1.0, 0.0], [0.0, 1.0]]))
    assert max_softmax_prob(rec) == pytest.approx(0.5)


def test_entropy_one_hot_is_zero():
    p = np.zeros(5)
    p[1] = 1.0
    rec = ScoreRecord("a", "g", 0, probs=p)
    assert predictive_entropy(rec) == 0.0


def test_entropy_uniform_hand_value():
    rec = ScoreRecord("a", "g", 0, probs=np.full(3, 1 / 3))
    assert predictive_entropy(rec) == pytest.approx(math.log(3) / 3, abs=1e-12)


def test_entropy_mc_hand_value():
    rec = ScoreRecord("a", "g", 0, probs=None,
                      mc_samples=np.array([[1.0, 0.0], [0.0, 1.0]]))
    assert predictive_entropy(rec) == pytest.approx(math.log(2) / 2, abs=1e-12)


def test_entropy_class_averaged_flag():
    rec = ScoreRecord("a", "g", 0, probs=np.full(4, 0.25))
    assert predictive_entropy(rec, class_averaged=False) == pytest.approx(math.log(4))
    assert predictive_entropy(rec) == pytest.approx(math.log(4) / 4)


@given(seed=st.integers(0, 10**6))
@settings(max_examples=40, deadline=None)
def test_entropy_permutation_invariant_and_uniform_max(seed):
    r = np.random.default_rng(seed)
    g = r.gamma(1.0, size=6)
    p = g / g.sum()
    rec = ScoreRecord("a", "g", 0, probs=p)
    perm = r.permutation(6)
    rec_p = ScoreRecord("a", "g", 0, probs=p[perm])
    assert predictive_entropy(rec) == pytest.approx(predictive_entropy(rec_p), abs=1e-12)
    uniform = ScoreRecord("u", "g", 0, probs=np.full(6, 1 / 6))
    assert predictive_entropy(rec) <= predictive_entropy(uniform) + 1e-12


# ----------------------------------------------------------------- spearman

def test_spearman_perfect_monotone():
    x = [1.0, 2.0, 3.0, 4.0, 5.0]
    assert spearman(x, x) == pytest.approx(1.0)
    assert spearman(x, [-v for v in x]) == pytest.approx(-1.0)


def test_spearman_hand_value():
    assert spearman([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8)


def test_spearman_degenerate_returns_zero():
    assert spearman([1.0, 1.0, 1.0], [1.0, 2.0, 3.0]) == 0.0


def test_spearman_needs_three():
    with pytest.raises(AuditError):
        spearman([1.0, 2.0], [1.0, 2.0])


def test_average_ranks_ties():
    np.testing.assert_allclose(average_ranks([10.0, 20.0, 20.0, 30.0]),
                               [1.0, 2.5, 2.5, 4.0])


@given(seed=st.integers(0, 10**6))
@settings(max_examples=40, deadline=None)
def test_spearman_invariant_under_increasing_transform(seed):
    r = np.random.default_rng(seed)
    x = r.normal(size=12)
    y = r.normal(size=12)
    rho = spearman(x, y)
    assert spearman(np.exp(x), y) == pytest.approx(rho, abs=1e-12)
    assert spearman(x, 3 * y + 7) == pytest.approx(rho, abs=1e-12)


def test_spearman_with_ties_matches_scipy(rng):
    from scipy.stats import spearmanr

    for _ in range(25):
        x = rng.integers(0, 5, size=20).astype(float)
        y = rng.integers(0, 5, size=20).astype(float)
        if len(set(x)) < 2 or len(set(y)) < 2:
            continue
        assert spearman(x, y) == pytest.approx(spearmanr(x, y).statistic, abs=1e-12)


# ------------------------------------------------------------- audit report

def test_audit_predictor_assembly():
    from conformal_audit.calibration import fit_group
    from conformal_audit.metrics import audit_predictor
    from conformal_audit.synth import generate, shifted_groups_config

    cal = generate(shifted_groups_config(250, seed=61, critical_classes=(0,)))
    test = generate(shifted_groups_config(250, seed=62, critical_classes=(0,)))
    row = audit_predictor(fit_group(cal, 0.2), test)
    assert row.method == "gaps" and row.alpha == 0.2
    assert set(row.group_coverage) == {"easy", "medium", "hard"}
    assert row.coverage_disparity is not None and row.coverage_disparity >= 0
    assert all(1 <= v <= test.k for v in row.group_set_size.values())
    assert row.rule_in is not None and row.rule_out is not None
    assert any("single probability vectors" in f for f in row.flags)
    d = row.to_dict()
    assert d["aggregate_coverage"] == row.aggregate_coverage


def test_audit_predictor_without_critical_classes_flags_it():
    from conformal_audit.calibration import fit_aggregate
    from conformal_audit.metrics import audit_predictor
    from conformal_audit.synth import generate, single_group_config

    table = generate(single_group_config(200, seed=63, t_samples=4))
    row = audit_predictor(fit_aggregate(table, 0.3), table)
    assert row.rule_in is None and row.rule_out is None
    assert any("no critical classes" in f for f in row.flags)
    assert not any("single probability vectors" in f for f in row.flags)
