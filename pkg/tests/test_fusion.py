import math

import numpy as np
import pytest
import torch

from cosa.data import MODALITIES
from cosa.diffcore import grad_check, zero_last_layer_
from cosa.fusion import PredictionHead, apply_actions, fuse, fused_width, loss_prediction, mean_absolute_error
from cosa.metrics import metrics_msa


def test_apply_actions_examples():
    f = torch.randn(2, 3, 4)
    assert torch.equal(apply_actions(f, torch.ones(2, 3)), f)
    assert torch.count_nonzero(apply_actions(f, torch.zeros(2, 3))) == 0
    unit = f / f.norm(dim=-1, keepdim=True)
    halved = apply_actions(unit, torch.full((2, 3), 0.5)).norm(dim=-1)
    assert torch.allclose(halved, torch.full((2, 3), 0.5))


def test_fuse_identities():
    f = {m: torch.randn(2, 3, 4) for m in MODALITIES}
    assert torch.equal(fuse(f, "add", active=("A",)), f["A"])
    assert torch.equal(fuse(f, "concat"), torch.cat([f[m] for m in MODALITIES], dim=-1))
    zeros = {m: apply_actions(v, torch.zeros(2, 3)) for m, v in f.items()}
    assert torch.count_nonzero(fuse(zeros, "add")) == 0
    only_t = fuse(f, "concat", active=("T",))
    assert torch.count_nonzero(only_t[..., :8]) == 0 and torch.equal(only_t[..., 8:], f["T"])
    assert fused_width(4, "concat") == 12 and fused_width(4, "add") == 4


def test_fuse_errors():
    f = {m: torch.randn(1, 2, 3) for m in MODALITIES}
    with pytest.raises(ValueError, match="at least one"):
        fuse(f, "add", active=())
    with pytest.raises(ValueError, match="unknown fusion"):
        fuse(f, "product")


def test_additive_fusion_is_order_free_concat_is_not():
    f = {m: torch.randn(2, 3, 4, dtype=torch.float64) for m in MODALITIES}
    rotated = dict(zip(MODALITIES, [f["A"], f["T"], f["V"]]))
    assert torch.allclose(fuse(f), fuse(rotated), atol=1e-12)
    assert not torch.equal(fuse(f, "concat"), fuse(rotated, "concat"))


def test_zero_head_predicts_zero_and_uniform():
    joint = torch.randn(3, 5, 8)
    msa = PredictionHead(8, 1, seed=0)
    zero_last_layer_(msa.mlp)
    assert torch.count_nonzero(msa(joint)) == 0
    mer = PredictionHead(8, 4, mode="concat", seed=0)
    zero_last_layer_(mer.mlp)
    probs = torch.softmax(mer(torch.randn(3, 5, 24)), dim=-1)
    assert torch.allclose(probs, torch.full((3, 4), 0.25))
    assert torch.equal(msa(joint), msa(joint))
    with pytest.raises(ValueError):
        PredictionHead(8, 1, mode="bogus")


def test_prediction_loss_values():
    y = torch.tensor([1.0, -2.0, 0.5])
    assert loss_prediction(y.clone(), y, "msa").item() == 0.0
    assert loss_prediction(torch.zeros(5, 4), torch.tensor([0, 1, 2, 3, 1]), "mer").item() == pytest.approx(math.log(4))
    with pytest.raises(ValueError):
        loss_prediction(torch.zeros(1, 4), torch.tensor([7]), "mer")
    with pytest.raises(ValueError):
        loss_prediction(y, y, "other")


def test_prediction_loss_matches_oracle(rng):
    pred, y = rng.standard_normal(20), rng.uniform(-3, 3, 20)
    oracle = sum(abs(p - t) for p, t in zip(pred, y)) / 20
    assert loss_prediction(torch.tensor(pred), torch.tensor(y), "msa").item() == pytest.approx(oracle, abs=1e-12)
    logits, labels = rng.standard_normal((20, 4)), rng.integers(0, 4, 20)
    ce = np.mean([np.log(np.exp(r).sum()) - r[c] for r, c in zip(logits, labels)])
    got = loss_prediction(torch.tensor(logits), torch.tensor(labels), "mer").item()
    assert got == pytest.approx(ce, abs=1e-6)


def test_msa_loss_equals_mae_metric(rng):
    pred, y = rng.standard_normal(50).astype(np.float32), rng.uniform(-3, 3, 50).astype(np.float32)
    loss = loss_prediction(torch.tensor(pred, dtype=torch.float64), torch.tensor(y, dtype=torch.float64), "msa")
    assert loss.item() == metrics_msa(pred, y)["mae"]
    assert float(mean_absolute_error(pred.astype(np.float64), y.astype(np.float64))) == loss.item()


@pytest.mark.parametrize("mode", ["add", "concat"])
def test_grad_check_fuse_predict_loss(float64, rng, mode):
    head = PredictionHead(4, 1, mode=mode, hidden_dim=5, seed=2).double()
    f = {m: torch.tensor(rng.standard_normal((3, 2, 4))) for m in MODALITIES}
    w = {m: torch.tensor(rng.uniform(0, 1, (3, 2))) for m in MODALITIES}
    y = torch.tensor(rng.uniform(-3, 3, 3))
    loss_fn = lambda: loss_prediction(head(fuse({m: apply_actions(f[m], w[m]) for m in MODALITIES}, mode)), y, "msa")
    report = grad_check(head, loss_fn, h=1e-6, tol=1e-3)
    assert report.passed, str(report)
