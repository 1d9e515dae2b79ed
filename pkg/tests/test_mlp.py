import json
import math

import numpy as np
import pytest

from synthmotion.labels import encode_soft
from synthmotion.probe.mlp import (
    AdamW,
    Layer,
    MlpModel,
    backward,
    ce_loss_and_grad,
    forward,
    kl_loss_and_grad,
    load_checkpoint,
    save_checkpoint,
    softmax,
)


def toy_model(seed=0, batchnorm=(True, True, False)):
    return MlpModel.build([5, 7, 6, 50], seed=seed, batchnorm=list(batchnorm))


def max_rel_err(a, n, floor=1e-7):
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def numeric_grads(model, loss_at, h=1e-4):
    out = {}
    for key, _, _, arr in model.named_params():
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = arr[i]
            arr[i] = old + h
            lp = loss_at()
            arr[i] = old - h
            lm = loss_at()
            arr[i] = old
            g[i] = (lp - lm) / (2 * h)
        out[key] = g
    return out


# --------------------------------------------------------------------------
# forward
# --------------------------------------------------------------------------

def test_zero_weights_give_uniform():
    m = toy_model(batchnorm=(False, False, False))
    for layer in m.layers:
        layer.weight[:] = 0
        layer.bias[:] = 0
    probs, _ = forward(m, np.random.default_rng(0).normal(size=(4, 5)))
    np.testing.assert_allclose(probs, 1 / 50, atol=1e-15)


def test_hand_computed_single_unit():
    # x -> relu(w1 x + b1) -> w2 h + b2 (two logits)
    l1 = Layer(np.array([[0.7]]), np.array([-0.2]), "relu")
    l2 = Layer(np.array([[1.5, -0.5]]), np.array([0.1, 0.3]), "none")
    m = MlpModel([l1, l2])
    for x in (-1.0, 0.0, 0.4, 2.0):
        h = max(0.7 * x - 0.2, 0.0)
        z = (1.5 * h + 0.1, -0.5 * h + 0.3)
        e = [math.exp(v) for v in z]
        probs, _ = forward(m, np.array([[x]]))
        assert abs(probs[0, 0] - e[0] / sum(e)) <= 1e-12
        assert abs(probs[0, 1] - e[1] / sum(e)) <= 1e-12


def test_eval_deterministic_and_normalized():
    m = toy_model()
    x = np.random.default_rng(1).normal(size=(9, 5)) * 30
    a, _ = forward(m, x)
    b, _ = forward(m, x)
    assert a.tobytes() == b.tobytes()
    np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-9)


def test_forward_errors():
    m = toy_model()
    with pytest.raises(ValueError):
        forward(m, np.zeros((3, 4)))
    with pytest.raises(ValueError):
        forward(m, np.zeros((1, 5)), "train")
    with pytest.raises(ValueError):
        forward(m, np.zeros((3, 5)), "predict")


def test_train_mode_updates_running_stats():
    m = toy_model()
    x = np.random.default_rng(2).normal(size=(16, 5))
    before = m.layers[0].running_mean.copy()
    _, cache = forward(m, x, "train")
    z = x @ m.layers[0].weight + m.layers[0].bias
    np.testing.assert_allclose(m.layers[0].running_mean, 0.9 * before + 0.1 * z.mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(m.layers[0].running_var, 0.9 + 0.1 * z.var(axis=0, ddof=1), atol=1e-12)
    assert np.all(m.layers[0].running_var > 0)


def test_inverted_dropout_preserves_mean():
    layer = Layer(np.eye(4), np.zeros(4), "none", dropout=0.7)
    m = MlpModel([layer], "none")
    x = np.ones((20000, 4))
    out, _ = forward(m, x, "train", rng=np.random.default_rng(3))
    assert abs(out.mean() - 1.0) < 0.03
    assert set(np.unique(np.round(out, 9))) <= {0.0, round(1 / 0.3, 9)}
    np.testing.assert_array_equal(forward(m, x, "eval")[0], x)


# --------------------------------------------------------------------------
# gradients
# --------------------------------------------------------------------------

@pytest.mark.parametrize("mode", ["train", "eval"])
def test_gradients_match_finite_differences_kl(mode):
    rng = np.random.default_rng(4)
    m = toy_model(seed=4)
    # nontrivial running stats for eval mode
    for layer in m.layers:
        if layer.batchnorm:
            layer.running_mean = rng.normal(size=layer.bias.shape)
            layer.running_var = rng.uniform(0.5, 2.0, size=layer.bias.shape)
            layer.gamma = rng.uniform(0.5, 1.5, size=layer.bias.shape)
            layer.beta = rng.normal(scale=0.2, size=layer.bias.shape)
    x = rng.normal(size=(8, 5))
    t = encode_soft(rng.uniform(0, 4.5, size=8))

    def loss_at():
        probs, _ = forward(m, x, mode, update_stats=False)
        return kl_loss_and_grad(probs, t)[0]

    probs, cache = forward(m, x, mode, update_stats=False)
    _, dlogits = kl_loss_and_grad(probs, t)
    analytic = backward(m, cache, dlogits)
    numeric = numeric_grads(m, loss_at)
    for key, num in numeric.items():
        assert max_rel_err(analytic[key], num) <= 1e-4, key


def test_gradients_match_finite_differences_weighted_ce():
    rng = np.random.default_rng(5)
    m = MlpModel.build([4, 6, 3], seed=5, batchnorm=[True, False])
    x = rng.normal(size=(10, 4))
    y = rng.integers(0, 3, size=10)
    w = np.array([3.0, 1.0, 0.5])

    def loss_at():
        probs, _ = forward(m, x, "train", update_stats=False)
        return ce_loss_and_grad(probs, y, w)[0]

    probs, cache = forward(m, x, "train", update_stats=False)
    analytic = backward(m, cache, ce_loss_and_grad(probs, y, w)[1])
    for key, num in numeric_grads(m, loss_at).items():
        assert max_rel_err(analytic[key], num) <= 1e-4, key


def test_logit_gradient_is_pred_minus_target():
    rng = np.random.default_rng(6)
    logits = rng.normal(size=(5, 50))
    probs = softmax(logits)
    t = encode_soft(rng.uniform(0, 4, 5))
    _, g = kl_loss_and_grad(probs, t)
    np.testing.assert_allclose(g, (probs - t) / 5, atol=1e-10)
    _, g0 = kl_loss_and_grad(probs, probs)
    assert np.abs(g0).max() <= 1e-10
    # the same at the logits by finite differences of the KL
    h = 1e-6
    num = np.zeros_like(logits)
    for i in range(5):
        for j in range(50):
            lp, lm = logits.copy(), logits.copy()
            lp[i, j] += h
            lm[i, j] -= h
            num[i, j] = (kl_loss_and_grad(softmax(lp), t)[0] - kl_loss_and_grad(softmax(lm), t)[0]) / (2 * h)
    np.testing.assert_allclose(g, num, atol=1e-8)


def test_kl_loss_nonnegative():
    rng = np.random.default_rng(7)
    for _ in range(50):
        probs = softmax(rng.normal(size=(4, 50)) * 3)
        assert kl_loss_and_grad(probs, encode_soft(rng.uniform(-1, 5, 4)))[0] >= 0


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------

def test_decoupled_weight_decay_law():
    m = toy_model()
    lr, wd = 0.01, 0.05
    opt = AdamW(m, lr, wd)
    w0 = m.layers[1].weight.copy()
    zero = {key: np.zeros_like(arr) for key, _, _, arr in m.named_params()}
    for step in range(1, 6):
        opt.step(zero)
        np.testing.assert_allclose(m.layers[1].weight, w0 * (1 - lr * wd) ** step, rtol=1e-14)


def test_adam_first_step_is_lr_times_sign():
    m = MlpModel([Layer(np.zeros((2, 2)), np.zeros(2), "none")])
    opt = AdamW(m, 0.1, 0.0)
    g = {"0.weight": np.array([[2.0, -3.0], [0.5, 0.0]]), "0.bias": np.array([1e-3, -4.0])}
    opt.step(g)
    np.testing.assert_allclose(m.layers[0].weight, -0.1 * np.sign(g["0.weight"]), atol=1e-6)
    np.testing.assert_allclose(m.layers[0].bias, -0.1 * np.sign(g["0.bias"]), atol=1e-4)


def test_frozen_layers_not_updated():
    m = toy_model()
    m.layers[0].trainable = False
    w0 = m.layers[0].weight.copy()
    x = np.random.default_rng(8).normal(size=(6, 5))
    probs, cache = forward(m, x, "train")
    AdamW(m, 0.1, 0.1).step(backward(m, cache, kl_loss_and_grad(probs, encode_soft(np.ones(6)))[1]))
    np.testing.assert_array_equal(m.layers[0].weight, w0)
    assert not np.array_equal(m.layers[1].weight, toy_model().layers[1].weight)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    m = toy_model(seed=9)
    m.input_mean = np.arange(5.0)
    m.input_scale = np.full(5, 2.0)
    m.meta = {"trunk_layers": 2}
    forward(m, np.random.default_rng(9).normal(size=(4, 5)), "train")
    save_checkpoint(m, tmp_path / "m.bin", {"feature_version": "v1"})
    back = load_checkpoint(tmp_path / "m.bin")
    assert back.param_hash() == m.param_hash()
    assert back.sizes == m.sizes and back.meta == m.meta
    x = np.random.default_rng(10).normal(size=(3, 5))
    assert forward(back, x)[0].tobytes() == forward(m, x)[0].tobytes()
    desc = json.loads((tmp_path / "m.bin.json").read_text())
    assert desc["sizes"] == [5, 7, 6, 50] and desc["feature_version"] == "v1"
    raw = (tmp_path / "m.bin").read_bytes()
    assert raw[:4] == b"SMLP" and int.from_bytes(raw[4:8], "little") == 1


def test_checkpoint_rejects_garbage(tmp_path):
    save_checkpoint(toy_model(), tmp_path / "m.bin")
    raw = bytearray((tmp_path / "m.bin").read_bytes())
    raw[:4] = b"XXXX"
    (tmp_path / "m.bin").write_bytes(bytes(raw))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "m.bin")
