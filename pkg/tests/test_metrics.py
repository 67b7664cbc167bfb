import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cosa.metrics import metrics_mer, metrics_msa


def oracle_msa(pred, truth):
    n = len(pred)
    mae = sum(abs(p - t) for p, t in zip(pred, truth)) / n
    mp, mt = sum(pred) / n, sum(truth) / n
    cov = sum((p - mp) * (t - mt) for p, t in zip(pred, truth))
    corr = cov / math.sqrt(sum((p - mp) ** 2 for p in pred) * sum((t - mt) ** 2 for t in truth))
    pairs = [(p > 0, t > 0) for p, t in zip(pred, truth) if t != 0]
    acc2 = sum(a == b for a, b in pairs) / len(pairs)
    tp = sum(a and b for a, b in pairs)
    fp = sum(a and not b for a, b in pairs)
    fn = sum(b and not a for a, b in pairs)
    f1 = 2 * tp / (2 * tp + fp + fn)
    cls = lambda v: min(3, max(-3, math.floor(v + 0.5)))
    acc7 = sum(cls(p) == cls(t) for p, t in zip(pred, truth)) / n
    return {"mae": mae, "corr": corr, "acc2": acc2, "f1": f1, "acc7": acc7}


def test_msa_matches_brute_force_oracle(rng):
    truth = rng.uniform(-3, 3, 200)
    truth[:7] = 0.0
    pred = truth + rng.normal(0, 0.8, 200)
    got = metrics_msa(pred, truth)
    for key, value in oracle_msa(list(pred), list(truth)).items():
        assert got[key] == pytest.approx(value, abs=1e-9), key


def test_msa_examples():
    perfect = metrics_msa([-2, 0.5, 3], [-2, 0.5, 3])
    assert perfect["mae"] == 0 and perfect["corr"] == pytest.approx(1.0)
    assert perfect["acc2"] == 1.0 and perfect["acc7"] == 1.0
    two = metrics_msa([0.5, -0.2], [1, -1])
    assert two["acc2"] == 1.0 and two["mae"] == pytest.approx(0.65)
    assert metrics_msa([3.6, 0.0], [3.0, 1.0])["acc7"] == 0.5
    assert metrics_msa([3.6, 0.0], [3.0, 0.2])["acc7"] == 1.0


def test_msa_degenerate_inputs():
    rep = metrics_msa([1.0, 1.0, 1.0], [0.5, -1.0, 2.0])
    assert math.isnan(rep["corr"]) and "corr_undefined" in rep.flags
    zeros = metrics_msa([1.0, -1.0], [0.0, 0.0])
    assert math.isnan(zeros["acc2"]) and "acc2_no_nonzero_labels" in zeros.flags
    assert metrics_msa([1.0, -1.0], [0.0, 0.0], include_zero=True)["acc2"] == 0.5
    with pytest.raises(ValueError):
        metrics_msa([1.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        metrics_msa([], [])


def test_acc7_ceiling_variant():
    assert metrics_msa([0.2], [1.0], acc7_ceil=True)["acc7"] == 1.0
    assert metrics_msa([0.2], [1.0])["acc7"] == 0.0


def test_weighted_f1_variant(rng):
    truth = rng.uniform(-3, 3, 60)
    pred = truth + rng.normal(0, 1.5, 60)
    pos_t, pos_p = truth > 0, pred > 0
    f1 = lambda p, t: 2 * np.sum(p & t) / (2 * np.sum(p & t) + np.sum(p & ~t) + np.sum(~p & t))
    expected = (pos_t.sum() * f1(pos_p, pos_t) + (~pos_t).sum() * f1(~pos_p, ~pos_t)) / 60
    assert metrics_msa(pred, truth, f1_average="weighted")["f1"] == pytest.approx(expected, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_msa_invariances(seed):
    rng = np.random.default_rng(seed)
    truth = rng.uniform(-3, 3, 40)
    pred = rng.uniform(-3, 3, 40)
    base = metrics_msa(pred, truth)
    perm = rng.permutation(40)
    shuffled = metrics_msa(pred[perm], truth[perm])
    for key in ("mae", "corr", "acc2", "f1", "acc7"):
        assert shuffled[key] == pytest.approx(base[key], abs=1e-12)
    # sign-preserving strictly monotone map
    warped = metrics_msa(np.sign(pred) * np.abs(pred) ** 3, truth)
    assert warped["acc2"] == base["acc2"] and warped["f1"] == base["f1"]
    # nudges that stay inside each rounding cell leave Acc7 unchanged
    margin = 0.5 - np.abs(pred - np.round(pred))
    nudged = pred + np.sign(rng.standard_normal(40)) * 0.9 * margin
    assert metrics_msa(nudged, truth)["acc7"] == base["acc7"]


def test_mer_perfect_and_constant_predictor():
    truth = np.array([0, 1, 2, 3] * 5)
    perfect = metrics_mer(np.eye(4)[truth], truth, 4, ["Happy", "Sad", "Angry", "Neutral"])
    assert perfect["acc_avg"] == 1.0 and perfect["f1_avg"] == 1.0
    const = metrics_mer(np.tile([0.0, 0.0, 5.0, 0.0], (20, 1)), truth, 4)
    # brute-force one-vs-rest confusion counts
    for c in range(4):
        pred_c, true_c = np.full(20, c == 2), truth == c
        tp, fp = np.sum(pred_c & true_c), np.sum(pred_c & ~true_c)
        fn, tn = np.sum(~pred_c & true_c), np.sum(~pred_c & ~true_c)
        assert const.per_class[f"class{c}"]["acc"] == (tp + tn) / 20
        f1 = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0
        assert const.per_class[f"class{c}"]["f1"] == pytest.approx(f1)
    assert const["acc_avg"] == pytest.approx(np.mean([0.75, 0.75, 0.25, 0.75]))


def test_mer_degenerate_and_errors():
    single = metrics_mer(np.array([[0.1, 0.9, 0.0]]), np.array([1]), 3)
    assert single["accuracy"] == 1.0
    assert "absent_class:class0" in single.flags and single.per_class["class0"]["f1"] == 0.0
    with pytest.raises(ValueError):
        metrics_mer(np.zeros((2, 3)), np.array([0, 3]), 3)
    with pytest.raises(ValueError):
        metrics_mer(np.zeros((2, 2)), np.array([0, 1]), 3)


def test_tables_render():
    msa = metrics_msa([1.0, -1.0, 2.0], [1.0, -0.5, 2.5]).table("Co-SA")
    assert "ACC7" in msa and "MAE" in msa and "Co-SA" in msa
    mer = metrics_mer(np.eye(2), np.array([0, 1]), 2, ["Happy", "Sad"]).table()
    assert "Happy Acc" in mer and "Average F1" in mer
