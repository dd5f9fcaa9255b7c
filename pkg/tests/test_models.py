import math

import numpy as np
import pytest

from atas.autodiff import ShapeError
from atas.models import (LinearScoreModel, ModelConfig, build, load_checkpoint, load_into,
                         save_checkpoint)
from conftest import tiny_cnn, tiny_mlp


def test_same_seed_same_parameters():
    a = build(ModelConfig("mlp", input_shape=(1, 4, 4), widths=(5,), seed=3))
    b = build(ModelConfig("mlp", input_shape=(1, 4, 4), widths=(5,), seed=3))
    for k in a.params:
        assert np.array_equal(a.params[k], b.params[k])


def test_mlp_parameter_count():
    m = build(ModelConfig("mlp", input_shape=(1, 28, 28), widths=(100,)))
    assert m.params.count() == 79_510


def test_logits_finite(tiny_data):
    m = tiny_cnn(tiny_data)
    assert np.isfinite(m.logits(tiny_data.images[:5])).all()


def test_zero_weights_give_log10_and_zero_input_grad():
    m = build(ModelConfig("mlp", input_shape=(1, 4, 4), widths=(6,), num_classes=10))
    for k in m.params:
        m.params[k][...] = 0
    x = np.random.default_rng(0).uniform(size=(3, 1, 4, 4))
    loss, _, gx = m.loss_and_grads(x, np.array([0, 4, 9]), need_input_grad=True)
    assert loss == pytest.approx(math.log(10), abs=1e-12)
    assert np.all(gx == 0)


def test_duplicate_example_mean_semantics(tiny_data):
    m = tiny_mlp(tiny_data)
    x, y = tiny_data.images[:2], tiny_data.labels[:2]
    dup = m.loss(np.concatenate([x, x[:1]]), np.concatenate([y, y[:1]]))
    l0, l1 = m.loss(x[:1], y[:1]), m.loss(x[1:], y[1:])
    assert dup == pytest.approx((2 * l0 + l1) / 3, rel=1e-12)


def test_batch_input_grad_is_per_example_over_b(tiny_data):
    m = tiny_cnn(tiny_data)
    x, y = tiny_data.images[:2], tiny_data.labels[:2]
    _, _, gx = m.loss_and_grads(x, y, need_input_grad=True)
    for i in range(2):
        _, _, gi = m.loss_and_grads(x[i:i + 1], y[i:i + 1], need_input_grad=True)
        assert np.allclose(gx[i] * 2, gi[0], atol=1e-14)


def test_argmax_and_tie_rule():
    m = build(ModelConfig("mlp", input_shape=(1, 1, 1), widths=(), num_classes=3))
    m.params["fc0.w"][...] = 0
    m.params["fc0.b"][...] = [0.1, 0.9, 0.1]
    assert m.predict(np.zeros((1, 1, 1, 1)))[0] == 1
    m2 = build(ModelConfig("mlp", input_shape=(1, 1, 1), widths=(), num_classes=2))
    m2.params["fc0.w"][...] = 0
    m2.params["fc0.b"][...] = [0.5, 0.5]
    assert m2.predict(np.zeros((1, 1, 1, 1)))[0] == 0


def test_permuting_final_layer_permutes_predictions(tiny_data):
    m = tiny_mlp(tiny_data, seed=2)
    before = m.predict(tiny_data.images)
    perm = np.array([2, 0, 3, 1])
    m.params["fc1.w"][...] = m.params["fc1.w"][:, perm]
    m.params["fc1.b"][...] = m.params["fc1.b"][perm]
    after = m.predict(tiny_data.images)
    assert np.array_equal(perm[after], before)


def test_cnn_gradients_match_finite_differences(tiny_data):
    m = tiny_cnn(tiny_data, seed=1)
    x, y = tiny_data.images[:2], tiny_data.labels[:2]
    _, grads, gx = m.loss_and_grads(x, y, need_input_grad=True)
    rng = np.random.default_rng(0)
    h = 1e-5
    for name in ("conv0.w", "fc.w"):
        for _ in range(5):
            idx = tuple(rng.integers(0, s) for s in m.params[name].shape)
            orig = m.params[name][idx]
            m.params[name][idx] = orig + h
            lp = m.loss(x, y)
            m.params[name][idx] = orig - h
            lm = m.loss(x, y)
            m.params[name][idx] = orig
            num = (lp - lm) / (2 * h)
            assert abs(num - grads[name][idx]) <= 1e-4 * (abs(num) + abs(grads[name][idx])) + 1e-9


def test_checkpoint_round_trip(tmp_path, tiny_data):
    m = tiny_cnn(tiny_data, seed=4)
    save_checkpoint(tmp_path / "m.ckpt", m.params)
    assert (tmp_path / "m.ckpt").read_bytes()[:8] == b"ATASCKPT"
    other = tiny_cnn(tiny_data, seed=5)
    load_into(other, load_checkpoint(tmp_path / "m.ckpt"))
    for k in m.params:
        assert np.array_equal(m.params[k], other.params[k])


def test_checkpoint_errors(tmp_path, tiny_data):
    (tmp_path / "bad").write_bytes(b"NOTACKPT")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad")
    m = tiny_cnn(tiny_data)
    save_checkpoint(tmp_path / "m.ckpt", m.params)
    with pytest.raises(ShapeError):
        load_into(tiny_mlp(tiny_data), load_checkpoint(tmp_path / "m.ckpt"))


def test_bad_configs():
    with pytest.raises(ValueError):
        ModelConfig("resnet")
    with pytest.raises(ShapeError):
        ModelConfig("cnn", input_shape=(1, 6, 6), channels=(2, 2))
    with pytest.raises(ShapeError):
        build(ModelConfig("mlp", input_shape=(1, 2, 2), widths=(3,))).loss_and_grads(
            np.zeros((2, 1, 2, 2)), np.array([0]))


def test_linear_score_model_gradient():
    w = np.array([[1.0, -1.0, 0.0]])
    m = LinearScoreModel(w[0])
    loss, _, gx = m.loss_and_grads(np.full((2, 3), 0.5), need_input_grad=True)
    assert loss == pytest.approx(0.0)
    assert np.allclose(gx, w / 2)
