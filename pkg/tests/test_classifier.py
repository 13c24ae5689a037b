from unittest.mock import patch

import numpy as np
import pytest
import torch
from torch import nn

from app.classifier import (
    SiameseClassifier, ClassifierParams, bce_loss, decide, forward, load_classifier, predict, predict_proba,
    sample_batch, save_classifier, train_stage1, train_stage2_lastlayer, train_variant,
)
from app.config import TrainConfig
from app.errors import ConfigurationError, ContractError
from app.seeding import seeded, torch_generator
from app.vqcodec import to_tensor


@pytest.fixture
def config():
    return TrainConfig(width=16, depth=1, heads=2, patch=8, batch_size=4, max_iterations=6, eval_every=2,
                       patience=2, lr_backbone=1e-3, lr_head=1e-3)


@pytest.fixture
def params(config):
    with seeded(0):
        model = SiameseClassifier(config, 32)
    return ClassifierParams(model=model, config=config, stage="R0")


def test_forward_and_predict(params, pairs32):
    """Test one logit per pair and the 0.5 decision threshold"""
    pre = np.stack([p.pre for p in pairs32[:3]])
    post = np.stack([p.post for p in pairs32[:3]])
    assert forward(pre, post, params).shape == (3,)

    probability, decision = predict(pairs32[0].pre, pairs32[0].post, params)
    assert 0.0 < probability < 1.0
    assert decision == int(probability > 0.5)

    probs = predict_proba(params, pairs32, chunk=5)
    assert probs.shape == (16,)
    assert probs.dtype == np.float64


def test_forward_contracts(params, pairs32):
    with pytest.raises(ContractError):
        forward(pairs32[0].pre, np.zeros((16, 16, 3), dtype=np.uint8), params)
    with pytest.raises(ContractError):
        forward(np.zeros((64, 64, 3), dtype=np.uint8), np.zeros((64, 64, 3), dtype=np.uint8), params)


def test_bce_loss_values():
    """Test the loss matches the closed form and stays finite for large logits"""
    logits = torch.tensor([0.0, 2.0, -3.0])
    labels = torch.tensor([1.0, 0.0, 1.0])
    expected = -(labels * torch.log(torch.sigmoid(logits)) + (1 - labels) * torch.log(1 - torch.sigmoid(logits)))
    assert torch.allclose(bce_loss(logits, labels), expected.mean())
    assert torch.isfinite(bce_loss(torch.tensor([1000.0, -1000.0]), torch.tensor([0.0, 1.0])))


def test_bce_loss_gradient():
    """Test analytic gradients against finite differences in float64"""
    logits = torch.tensor([0.3, -1.2, 2.5, 0.0], dtype=torch.float64, requires_grad=True)
    labels = torch.tensor([1.0, 0.0, 1.0, 0.0], dtype=torch.float64)
    assert torch.autograd.gradcheck(lambda x: bce_loss(x, labels), (logits,), eps=1e-6, atol=1e-6)


def test_stage1_keeps_best_checkpoint(config, pairs32):
    """Test early stopping restores the earliest best validation AUPRC"""
    train, val = pairs32[:12], pairs32[12:]
    params = train_stage1(train, val, config)
    assert params.stage == "R0"
    iterations = [i for i, _ in params.history]
    assert iterations[0] == config.eval_every
    scores = [s for _, s in params.history]
    best = max(scores)
    assert params.best_iteration == params.history[scores.index(best)][0]
    assert len(params.history) <= config.max_iterations // config.eval_every


def test_validation_needs_positives(config, pairs32):
    undamaged = [p for p in pairs32 if p.label == 0]
    with pytest.raises(ConfigurationError):
        train_stage1(pairs32, undamaged, config)
    with pytest.raises(ConfigurationError):
        train_stage1([], pairs32, config)


def test_head_only_finetuning_freezes_encoder(config, pairs32):
    """Test R4 leaves every encoder weight byte-identical"""
    base = train_stage1(pairs32[:12], pairs32[12:], config)
    before = base.encoder_state()
    tuned = train_stage2_lastlayer(base, pairs32[:12], pairs32[12:], config)
    assert tuned.stage == "R4"
    after = tuned.encoder_state()
    assert all(torch.equal(before[k], after[k]) for k in before)
    # the base model itself is untouched
    assert all(torch.equal(before[k], v) for k, v in base.encoder_state().items())


def test_train_variant_requirements(config, pairs32):
    real, synthetic, val = pairs32[:8], pairs32[8:12], pairs32[12:]
    with pytest.raises(ConfigurationError):
        train_variant("R5", real, synthetic, val, config)
    with pytest.raises(ConfigurationError):
        train_variant("R1", real, None, val, config)
    with pytest.raises(ConfigurationError):
        train_variant("R0", None, synthetic, val, config)
    with pytest.raises(ConfigurationError):
        train_variant("R0", real, None, None, config)

    source_val = config.model_copy(update={"validation": "source"})
    with pytest.raises(ConfigurationError):
        train_variant("R0", real, None, val, source_val)


def test_train_variants(config, pairs32):
    """Test every variant trains and reports its stage"""
    real, synthetic, val = pairs32[:8], pairs32[8:12], pairs32[12:]
    base = train_variant("R0", real, None, val, config)
    for variant in ("R1", "R2", "R3", "R4"):
        params = train_variant(variant, real, synthetic, val, config, base=base)
        assert params.stage == variant
        assert params.history

    tuned = train_variant("R4", real, synthetic, val, config, base=base)
    assert all(torch.equal(v, tuned.encoder_state()[k]) for k, v in base.encoder_state().items())


def test_training_is_seeded(config, pairs32):
    a = train_stage1(pairs32[:12], pairs32[12:], config)
    b = train_stage1(pairs32[:12], pairs32[12:], config)
    assert a.hash == b.hash


def test_save_and_load_classifier(tmp_path, params, pairs32):
    params.history = [(2, 0.5)]
    params.best_iteration = 2
    path = save_classifier(params, tmp_path / "R0.pt")
    loaded = load_classifier(path)
    assert loaded.hash == params.hash
    assert loaded.stage == "R0"
    assert loaded.history == [(2, 0.5)]
    assert np.allclose(predict_proba(loaded, pairs32), predict_proba(params, pairs32))


def test_features_concatenate_pre_then_post(params, pairs32):
    """Test both images pass through the one shared encoder, pre first"""
    model = params.model.eval()
    pre = to_tensor(np.stack([p.pre for p in pairs32[:2]]))
    post = to_tensor(np.stack([p.post for p in pairs32[:2]]))
    width = params.config.width
    with torch.no_grad():
        features = model.features(pre, post)
        assert features.shape == (2, 2 * width)
        assert torch.allclose(features[:, :width], model.encoder(pre))
        assert torch.allclose(features[:, width:], model.encoder(post))
        swapped = model.features(post, pre)
        assert torch.allclose(swapped, torch.cat([features[:, width:], features[:, :width]], dim=-1))
        assert torch.allclose(model(pre, post), model.head(features).squeeze(-1))
        same = model.features(pre, pre)
        assert torch.equal(same[:, :width], same[:, width:])


def test_decision_threshold_is_strict():
    assert decide(0.5) == 0
    assert decide(0.5000001) == 1
    assert decide(0.4999999) == 0
    assert decide(1.0) == 1 and decide(0.0) == 0


def test_predict_applies_the_threshold_to_the_logit(params, pairs32):
    """Test a zero logit is undamaged and a logit of 3 is damaged"""
    pre, post = pairs32[0].pre, pairs32[0].post
    with patch("app.classifier.forward", return_value=torch.tensor([0.0])):
        assert predict(pre, post, params) == (0.5, 0)
    with patch("app.classifier.forward", return_value=torch.tensor([3.0])):
        probability, decision = predict(pre, post, params)
    assert probability == pytest.approx(0.9526, abs=1e-4)
    assert decision == 1


def test_sample_batch_is_uniform():
    generator = torch_generator(0)
    counts = torch.bincount(sample_batch(12, 60_000, generator), minlength=12).double()
    assert counts.sum() == 60_000
    assert torch.all((counts / 60_000 - 1 / 12).abs() <= 0.01)


def test_union_variant_samples_real_and_synthetic(config, pairs32):
    """Test R2 trains on the concatenation and draws synthetic pairs at their share"""
    real, synthetic, val = pairs32[:8], pairs32[8:12], pairs32[12:]
    with patch("app.classifier.train_stage1", wraps=train_stage1) as stage1, \
            patch("app.classifier.sample_batch", wraps=sample_batch) as sampler:
        train_variant("R2", real, synthetic, val, config)
    trained_on = stage1.call_args.args[0]
    assert [p.id for p in trained_on] == [p.id for p in real] + [p.id for p in synthetic]
    assert all(call.args[0] == len(real) + len(synthetic) for call in sampler.call_args_list)

    drawn = sample_batch(len(trained_on), 30_000, torch_generator(1))
    synthetic_share = float((drawn >= len(real)).double().mean())
    assert abs(synthetic_share - len(synthetic) / len(trained_on)) <= 0.02


def test_backprop_matches_central_differences():
    """Test autograd gradients of a three-layer net under bce_loss in float64"""
    with seeded(3):
        net = nn.Sequential(nn.Linear(5, 4), nn.Tanh(), nn.Linear(4, 3), nn.ReLU(), nn.Linear(3, 1)).double()
    inputs = torch.randn(6, 5, dtype=torch.float64, generator=torch_generator(4))
    labels = torch.tensor([1.0, 0.0, 1.0, 1.0, 0.0, 0.0], dtype=torch.float64)

    def loss():
        return bce_loss(net(inputs).squeeze(-1), labels)

    net.zero_grad()
    loss().backward()
    eps = 1e-6
    for parameter in net.parameters():
        analytic = parameter.grad.clone()
        flat = parameter.data.view(-1)
        for i in range(flat.numel()):
            original = float(flat[i])
            with torch.no_grad():
                flat[i] = original + eps
                upper = float(loss())
                flat[i] = original - eps
                lower = float(loss())
                flat[i] = original
            assert abs((upper - lower) / (2 * eps) - float(analytic.view(-1)[i])) <= 1e-6
