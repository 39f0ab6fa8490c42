import json

import numpy as np
import pytest

from gesturegen import models as M
from gesturegen import neural_core as nc
from gesturegen.neural_core import LayerSpec


def net_of(*specs, seed=0):
    return nc.Network(list(specs), rng_seed=seed, dtype=np.float64)


# ---------------------------------------------------------------- forward examples

def test_relu_and_eval_dropout():
    assert net_of(LayerSpec("relu", 2, 2)).forward(np.array([[-1.0, 2.0]])).tolist() == [[0.0, 2.0]]
    x = np.arange(6.0).reshape(2, 3)
    d = net_of(LayerSpec("dropout", 3, 3, {"dropout_p": 0.5}))
    np.testing.assert_array_equal(d.forward(x, train=False), x)


def test_dropout_train_scaling_is_unbiased():
    d = net_of(LayerSpec("dropout", 50, 50, {"dropout_p": 0.3}))
    y = d.forward(np.ones((2000, 50)), train=True)
    assert set(np.unique(y).round(9)) <= {0.0, round(1 / 0.7, 9)}
    assert abs(y.mean() - 1.0) < 0.01


def test_gru_zero_weights_gives_zero_output():
    net = net_of(LayerSpec("gru", 3, 8, {"gru_direction": "bidirectional"}))
    for p in net.parameters():
        p.values[...] = 0
    out = net.forward(np.random.default_rng(0).normal(size=(2, 5, 3)))
    assert out.shape == (2, 5, 8)
    assert not out.any()


def test_gru_output_dims():
    x = np.zeros((2, 4, 3))
    assert net_of(LayerSpec("gru", 3, 10, {"gru_direction": "bidirectional"})).forward(x).shape == (2, 4, 10)
    assert net_of(LayerSpec("gru", 3, 5)).forward(x).shape == (2, 4, 5)
    last = LayerSpec("gru", 3, 10, {"gru_direction": "bidirectional", "return_sequences": False})
    assert net_of(last).forward(x).shape == (2, 10)


def test_gru_matches_hand_recurrence():
    rng = np.random.default_rng(1)
    net = net_of(LayerSpec("gru", 2, 3))
    W, U, b = (net.layers[0].params[k].values for k in ("fw_W", "fw_U", "fw_b"))
    x = rng.normal(size=(1, 4, 2))
    sig = lambda v: 1 / (1 + np.exp(-v))
    h = np.zeros(3)
    for t in range(4):
        xt = x[0, t]
        r = sig(xt @ W[:, :3] + h @ U[:, :3] + b[:3])
        z = sig(xt @ W[:, 3:6] + h @ U[:, 3:6] + b[3:6])
        n = np.tanh(xt @ W[:, 6:] + r * (h @ U[:, 6:]) + b[6:])
        h = (1 - z) * n + z * h
    np.testing.assert_allclose(net.forward(x)[0, -1], h, rtol=1e-12)


def test_batchnorm_train_statistics():
    net = net_of(LayerSpec("batch_norm", 4, 4))
    x = np.random.default_rng(2).normal(5, 3, size=(64, 4))
    net.forward(x, train=True)
    z = net.layers[0].last_normalized
    assert np.abs(z.mean(axis=0)).max() < 1e-6
    assert np.abs(z.var(axis=0) - 1).max() < 1e-4


def test_dim_mismatch_errors():
    with pytest.raises(ValueError):
        net_of(LayerSpec("affine", 3, 4), LayerSpec("relu", 5, 5))
    with pytest.raises(ValueError):
        net_of(LayerSpec("affine", 3, 4)).forward(np.zeros((2, 5)))
    with pytest.raises(ValueError):
        LayerSpec("dropout", 3, 3, {"dropout_p": 1.0})


# ---------------------------------------------------------------- backward

def test_affine_sum_loss_gradients():
    net = net_of(LayerSpec("affine", 3, 2))
    x = np.random.default_rng(3).normal(size=(5, 3))
    net.forward(x, train=True)
    net.backward(np.ones((5, 2)))
    np.testing.assert_allclose(net.layers[0].params["W"].grad, x.sum(axis=0)[:, None] * np.ones((1, 2)))
    np.testing.assert_allclose(net.layers[0].params["b"].grad, [5.0, 5.0])


def test_zero_loss_grad_gives_zero_grads():
    net = net_of(LayerSpec("affine", 3, 4), LayerSpec("relu", 4, 4), LayerSpec("gru", 4, 4))
    out = net.forward(np.random.default_rng(4).normal(size=(2, 3, 3)), train=True)
    net.backward(np.zeros_like(out))
    assert all(not p.grad.any() for p in net.parameters())


def test_backward_without_forward_raises():
    net = net_of(LayerSpec("affine", 3, 4))
    with pytest.raises(RuntimeError):
        net.backward(np.zeros((1, 4)))
    net.forward(np.zeros((1, 3)), train=False)
    with pytest.raises(RuntimeError):
        net.backward(np.zeros((1, 4)))


def test_mse_loss_values():
    loss, g = nc.mse_loss(np.ones((2, 3)), np.ones((2, 3)))
    assert loss == 0 and not g.any()
    loss, g = nc.mse_loss(np.full(4, 3.0), np.ones(4))
    assert loss == 4.0
    np.testing.assert_allclose(g, np.full(4, 1.0))
    rng = np.random.default_rng(5)
    p, t = rng.normal(size=6), rng.normal(size=6)
    _, g = nc.mse_loss(p, t)
    for i in range(6):
        e = np.zeros(6)
        e[i] = 1e-6
        num = (nc.mse_loss(p + e, t)[0] - nc.mse_loss(p - e, t)[0]) / 2e-6
        assert abs(num - g[i]) < 1e-8


# ---------------------------------------------------------------- gradient checks

LAYER_CASES = {
    "affine": [LayerSpec("affine", 4, 3)],
    "linear_out": [LayerSpec("linear_out", 4, 3)],
    "relu": [LayerSpec("affine", 4, 5), LayerSpec("relu", 5, 5), LayerSpec("linear_out", 5, 3)],
    "batch_norm": [LayerSpec("affine", 4, 5, {"bias": False}), LayerSpec("batch_norm", 5, 5)],
    "dropout": [LayerSpec("affine", 4, 5), LayerSpec("dropout", 5, 5, {"dropout_p": 0.3}),
                LayerSpec("linear_out", 5, 3)],
    "gru_forward": [LayerSpec("gru", 4, 3)],
    "gru_bidirectional": [LayerSpec("gru", 4, 6, {"gru_direction": "bidirectional"})],
    "gru_last_state": [LayerSpec("gru", 4, 6, {"gru_direction": "bidirectional", "return_sequences": False})],
}


@pytest.mark.parametrize("name", sorted(LAYER_CASES))
def test_gradient_check_per_layer_kind(name):
    rng = np.random.default_rng(6)
    net = net_of(*LAYER_CASES[name], seed=1)
    seq = any(s.kind == "gru" for s in net.specs)
    x = rng.normal(size=(3, 5, 4) if seq else (4, 4))
    target = rng.normal(size=net.forward(x, train=True).shape)
    assert nc.gradient_check(net, x, target, check_input=True) < 1e-4


def test_linear_layer_gradient_nearly_exact():
    rng = np.random.default_rng(7)
    net = net_of(LayerSpec("affine", 4, 3))
    x = rng.normal(size=(4, 4))
    assert nc.gradient_check(net, x, rng.normal(size=(4, 3))) < 1e-7


def small_architectures():
    cfg = M.ModelConfig(hidden=4, fc_layers=2, C=2, bottleneck=3, dropout=0.1)
    enc, dec = M.dae_specs(6, 3)
    return {
        "aud2pose": (M.speech_network_specs(5, 6, cfg, True, False), (3, 5, 5)),
        "aud2motion": (M.speech_network_specs(5, 3, cfg, False, True), (2, 4, 5)),
        "speeche": (M.speech_network_specs(5, 3, cfg, True, False), (3, 5, 5)),
        "dae": (enc + dec, (4, 6)),
    }


@pytest.mark.parametrize("name", ["aud2pose", "aud2motion", "speeche", "dae"])
def test_gradient_check_assembled(name):
    specs, shape = small_architectures()[name]
    rng = np.random.default_rng(8)
    net = nc.Network(specs, rng_seed=2, dtype=np.float64)
    x = rng.normal(size=shape)
    target = rng.normal(size=net.forward(x, train=True).shape)
    assert nc.gradient_check(net, x, target) < 1e-4


# ---------------------------------------------------------------- Adam

def test_adam_zero_gradient_leaves_params():
    net = net_of(LayerSpec("affine", 3, 2))
    before = [p.values.copy() for p in net.parameters()]
    opt = nc.Adam(net.parameters())
    nc.adam_step(net.parameters(), opt)
    for b, p in zip(before, net.parameters()):
        np.testing.assert_array_equal(b, p.values)


def test_adam_first_step_is_lr_sign():
    p = nc.ParamTensor(np.array([1.0, -2.0, 0.5]))
    p.grad[...] = [3.0, -0.2, 1e-3]
    nc.Adam([p], lr=0.01).step()
    np.testing.assert_allclose(p.values - [1.0, -2.0, 0.5], -0.01 * np.sign([3.0, -0.2, 1e-3]), atol=0.01 * 1e-4)


def test_adam_minimises_quadratic():
    p = nc.ParamTensor(np.array([1.0]))
    opt = nc.Adam([p], lr=0.1)
    for _ in range(200):
        p.grad[...] = 2 * p.values
        opt.step()
    assert abs(p.values[0]) < 0.05
    assert opt.t == 200


# ---------------------------------------------------------------- checkpoints

def _trained_bits():
    specs, shape = small_architectures()["aud2pose"]
    net = nc.Network(specs, rng_seed=3, dtype=np.float64)
    x = np.random.default_rng(9).normal(size=shape)
    net.forward(x, train=True)  # move batch-norm running stats away from defaults
    return net, x


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    net, x = _trained_bits()
    nc.save_checkpoint(net, tmp_path / "c.json", "aud2pose", {"k": 1}, {"note": "x"})
    back, doc = nc.load_checkpoint(tmp_path / "c.json")
    assert doc["model_kind"] == "aud2pose" and doc["normalization"] == {"k": 1}
    np.testing.assert_array_equal(back.forward(x, train=False), net.forward(x, train=False))


def test_checkpoint_missing_param_and_version(tmp_path):
    net, _ = _trained_bits()
    doc = nc.network_state(net)
    name = sorted(doc["params"])[0]
    del doc["params"][name]
    with pytest.raises(nc.CheckpointError, match=name.replace(".", r"\.")):
        nc.network_from_state(doc)
    doc = nc.network_state(net)
    doc["format_version"] = 99
    p = tmp_path / "v.json"
    p.write_text(json.dumps(doc))
    with pytest.raises(nc.CheckpointError, match="format_version"):
        nc.load_checkpoint(p)


def test_eval_forward_deterministic():
    net, x = _trained_bits()
    np.testing.assert_array_equal(net.forward(x, train=False), net.forward(x, train=False))
