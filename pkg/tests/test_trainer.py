import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from shrinksv.amsoftmax import AmSoftmax
from shrinksv.errors import ConfigurationError, NumericError
from shrinksv.shrinkage import ModelConfig, SpeakerNet
from shrinksv.synthetic import make_corpus, speaker_recipes
from shrinksv.trainer import AdamState, TrainConfig, adam_step, load_checkpoint, lr_at_epoch, train

TINY = dict(stage_channels=(8, 8, 16, 16), blocks_per_stage=(1, 1, 1, 1))


@pytest.mark.parametrize("epoch, expected", [(0, 0.001), (1, 0.001), (2, 0.0009), (3, 0.0009)])
def test_lr_examples(epoch, expected):
    assert lr_at_epoch(TrainConfig(), epoch) == pytest.approx(expected, rel=1e-15)


def test_lr_epoch_ten():
    assert lr_at_epoch(TrainConfig(), 10) == pytest.approx(5.9049e-4, rel=1e-14)


@given(st.integers(0, 500))
def test_lr_positive_non_increasing(e):
    cfg = TrainConfig()
    assert 0 < lr_at_epoch(cfg, e + 1) <= lr_at_epoch(cfg, e)


def test_lr_rejects_negative_epoch():
    with pytest.raises(ValueError):
        lr_at_epoch(TrainConfig(), -1)


@pytest.mark.parametrize("kwargs", [dict(batch_size=1), dict(epochs=0)])
def test_config_invariants(kwargs):
    with pytest.raises(ConfigurationError):
        TrainConfig(**kwargs)


def test_adam_three_hand_steps():
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    p = np.array([1.5])
    state = AdamState()
    m = v = 0.0
    x = 1.5
    for t, g in enumerate([0.5, -1.0, 2.0], start=1):
        adam_step({"w": p}, {"w": np.array([g])}, state, lr)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        assert abs(p[0] - x) < 1e-12
    assert state.step == 3


def test_adam_zero_gradient_and_zero_lr(rng):
    p = rng.standard_normal((3, 4))
    before = p.copy()
    state = AdamState()
    adam_step({"w": p}, {"w": np.zeros_like(p)}, state, 0.1)
    np.testing.assert_array_equal(p, before)
    assert state.step == 1
    adam_step({"w": p}, {"w": rng.standard_normal(p.shape)}, state, 0.0)
    np.testing.assert_array_equal(p, before)
    assert state.step == 2


def test_adam_constant_gradient_limit():
    p = np.array([0.0, 0.0])
    g = np.array([3.0, -0.2])
    state = AdamState()
    for _ in range(2000):
        prev = p.copy()
        adam_step({"w": p}, {"w": g}, state, 0.01)
    np.testing.assert_allclose(p - prev, -0.01 * np.sign(g), rtol=1e-6)


def test_adam_non_finite_names_parameter():
    with pytest.raises(NumericError, match="conv1.kernel"):
        adam_step({"conv1.kernel": np.zeros(2)}, {"conv1.kernel": np.array([1.0, np.nan])}, AdamState(), 0.1)


def _setup(n_speakers, margin=0.2, scale=30.0, seed=3):
    rng = np.random.default_rng(seed)
    model = SpeakerNet(ModelConfig.preset("Q", "SAP", **TINY), rng)
    loss = AmSoftmax(512, n_speakers, rng, margin, scale)
    return model, loss


def _corpus(n_speakers, per_speaker=4, n_samples=12000):
    return make_corpus(speaker_recipes(n_speakers, seed=7), per_speaker, n_samples, seed=11)


def test_empty_and_single_speaker_datasets():
    model, loss = _setup(2)
    with pytest.raises(ConfigurationError):
        train(TrainConfig(epochs=1), model, loss, [])
    with pytest.raises(ConfigurationError):
        train(TrainConfig(epochs=1), model, loss, _corpus(1))


def test_two_speakers_learned_and_reproducible(tmp_path):
    cfg = TrainConfig(batch_size=8, epochs=30, crop_len=8000, seed=5)
    data = _corpus(2)
    model, loss = _setup(2)
    result = train(cfg, model, loss, data, out_dir=tmp_path / "a")
    assert result.history[-1][4] >= 0.95
    assert len(result.checkpoints) == 30
    lines = (tmp_path / "a" / "metrics.csv").read_text().splitlines()
    assert lines[0] == "epoch,step,lr,loss,acc" and len(lines) == 31

    model2, loss2 = _setup(2)
    again = train(cfg, model2, loss2, data)
    assert again.history == result.history

    restored = load_checkpoint(result.checkpoints[-1])
    for (name, p), (_, q) in zip(model.named_parameters(), restored.named_parameters()):
        np.testing.assert_array_equal(p.data.astype(np.float32), q.data, err_msg=name)


def test_first_epoch_loss_near_uniform_prior():
    # with no margin, an untrained network scores every class alike
    n = 8
    model, loss = _setup(n, margin=0.0)
    result = train(TrainConfig(batch_size=16, epochs=1, crop_len=8000), model, loss, _corpus(n))
    assert abs(result.history[0][3] - math.log(n)) <= 0.2 * math.log(n)
