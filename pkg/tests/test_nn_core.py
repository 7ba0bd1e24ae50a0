import math

import numpy as np
import pytest

from fingercascade import nn_core as nn


def naive_conv(x, w, b, stride, pad):
    """Direct six-loop convolution over (N, C, H, W)."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for i in range(n):
        for oc in range(o):
            for r in range(ho):
                for s in range(wo):
                    acc = b[oc]
                    for ic in range(c):
                        for u in range(k):
                            for v in range(k):
                                acc += w[oc, ic, u, v] * xp[i, ic, r * stride + u, s * stride + v]
                    out[i, oc, r, s] = acc
    return out


def naive_pool(x, win, stride):
    n, c, h, w = x.shape
    ho, wo = (h - win) // stride + 1, (w - win) // stride + 1
    out = np.zeros((n, c, ho, wo))
    for i in range(n):
        for ch in range(c):
            for r in range(ho):
                for s in range(wo):
                    out[i, ch, r, s] = x[i, ch, r * stride:r * stride + win,
                                         s * stride:s * stride + win].max()
    return out


def run_layers(layers, x, weights=()):
    """Forward ``x`` through ``layers`` followed by flatten and an identity fc head."""
    shapes = nn.NetworkSpec(x.shape[1:], tuple(layers) + (nn.flatten(), nn.fc(1)), 1)
    dim = shapes.activation_shapes()[-2][0]
    spec = nn.NetworkSpec(x.shape[1:], tuple(layers) + (nn.flatten(), nn.fc(dim)), dim)
    head = [np.eye(dim, dtype=x.dtype), np.zeros(dim, dtype=x.dtype)]
    return nn.forward(spec, list(weights) + head, x)


# -- layer definitions -----------------------------------------------------

def test_relu_example():
    out = run_layers([nn.relu()], np.array([[[[-1.0, 0.0, 2.0]]]], dtype=np.float32))
    np.testing.assert_array_equal(out, [[0, 0, 2]])


def test_maxpool_example():
    out = run_layers([nn.maxpool(2, 2)], np.array([[[[1.0, 2.0], [3.0, 4.0]]]], dtype=np.float32))
    np.testing.assert_array_equal(out, [[4.0]])


def test_identity_kernel_conv():
    x = np.arange(20, dtype=np.float32).reshape(1, 1, 4, 5)
    w = [np.ones((1, 1, 1, 1), np.float32), np.zeros(1, np.float32)]
    np.testing.assert_array_equal(run_layers([nn.conv(1, 1)], x, w), x.reshape(1, 20))


@pytest.mark.parametrize("k,stride,pad", [(3, 1, 1), (3, 2, 0), (2, 1, 0), (1, 1, 0), (3, 2, 1)])
def test_conv_matches_direct_loops(k, stride, pad):
    rng = np.random.default_rng(k * 10 + stride + pad)
    x = rng.standard_normal((2, 3, 7, 6))
    w = [rng.standard_normal((4, 3, k, k)), rng.standard_normal(4)]
    out = run_layers([nn.conv(4, k, stride, pad)], x, w)
    np.testing.assert_allclose(out, naive_conv(x, *w, stride, pad).reshape(2, -1), atol=1e-10)


@pytest.mark.parametrize("win,stride", [(2, 2), (3, 1), (2, 1), (3, 3)])
def test_pool_matches_direct_loops(win, stride):
    x = np.random.default_rng(win + stride).standard_normal((2, 3, 7, 8))
    np.testing.assert_array_equal(run_layers([nn.maxpool(win, stride)], x),
                                  naive_pool(x, win, stride).reshape(2, -1))


def test_shape_algebra():
    spec = nn.NetworkSpec((3, 17, 11), (nn.conv(5, 3, 2, 1), nn.relu(), nn.maxpool(2, 2),
                                        nn.flatten(), nn.fc(4)), 4)
    h = (17 + 2 - 3) // 2 + 1
    w = (11 + 2 - 3) // 2 + 1
    assert spec.activation_shapes()[0] == (5, h, w)
    assert spec.activation_shapes()[2] == (5, h // 2, w // 2)
    assert spec.activation_shapes()[-1] == (4,)


def test_spec_rejects_collapsing_layer_with_index():
    with pytest.raises(nn.SpecError) as e:
        nn.NetworkSpec((1, 4, 4), (nn.maxpool(2), nn.maxpool(2), nn.maxpool(2), nn.flatten(),
                                   nn.fc(2)), 2)
    assert e.value.layer_index == 2


def test_spec_rejects_output_dim_mismatch():
    with pytest.raises(nn.SpecError):
        nn.NetworkSpec((1, 4, 4), (nn.flatten(), nn.fc(3)), 4)


def test_forward_rejects_wrong_batch_shape():
    spec = nn.NetworkSpec((1, 4, 4), (nn.flatten(), nn.fc(2)), 2)
    w = nn.init_weights(spec, 0)
    with pytest.raises(nn.SpecError) as e:
        nn.forward(spec, w, np.zeros((1, 1, 5, 4), np.float32))
    assert e.value.layer_index == -1


@pytest.mark.parametrize("bad", [dict(kind="conv", out_channels=0, kernel_size=3),
                                 dict(kind="conv", out_channels=2, kernel_size=0),
                                 dict(kind="maxpool", window=0),
                                 dict(kind="fc", out_features=0),
                                 dict(kind="dropout")])
def test_layer_spec_invariants(bad):
    with pytest.raises(ValueError):
        nn.LayerSpec(**bad)


def test_ladder_output_dims():
    assert nn.hand_net_spec().output_dim == 4
    assert nn.hand_net_spec().input_shape == (3, 112, 112)
    assert nn.finger_net_spec().output_dim == 4
    assert nn.finger_net_spec(multi_point=False).output_dim == 2


# -- loss and gradients ------------------------------------------------------

def test_zero_residual_gives_zero_loss_and_output_grad():
    spec = nn.NetworkSpec((1, 2, 2), (nn.flatten(), nn.fc(3), nn.relu(), nn.fc(2)), 2)
    w = nn.init_weights(spec, 3)
    x = np.random.default_rng(0).standard_normal((4, 1, 2, 2)).astype(np.float32)
    y = nn.forward(spec, w, x)
    loss, grads = nn.loss_and_grad(spec, w, x, y)
    assert loss == 0.0
    assert all(not g.any() for g in grads[-2:])


def test_loss_is_mean_squared_euclidean():
    spec = nn.NetworkSpec((1, 1, 2), (nn.flatten(), nn.fc(2)), 2)
    w = [np.eye(2, dtype=np.float64), np.zeros(2)]
    x = np.array([[[[1.0, 2.0]]], [[[0.0, 0.0]]]])
    y = np.array([[4.0, 6.0], [0.0, 1.0]])
    loss, _ = nn.loss_and_grad(spec, w, x, y)
    assert loss == pytest.approx((9 + 16 + 1) / 2)


def test_scalar_linear_gradient():
    spec = nn.NetworkSpec((1, 1, 1), (nn.flatten(), nn.fc(1)), 1)
    wv, x, t = 0.7, 1.5, 2.0
    w = [np.array([[wv]]), np.zeros(1)]
    _, g = nn.loss_and_grad(spec, w, np.array([[[[x]]]]), np.array([[t]]))
    assert g[0][0, 0] == pytest.approx(2 * (wv * x - t) * x)
    assert g[1][0] == pytest.approx(2 * (wv * x - t))


def test_gradients_match_test_side_finite_differences():
    spec = nn.NetworkSpec((2, 6, 6), (nn.conv(3, 3, 1, 1), nn.relu(), nn.maxpool(2), nn.flatten(),
                                      nn.fc(5), nn.relu(), nn.fc(2)), 2)
    rng = np.random.default_rng(8)
    w = [a.astype(np.float64) for a in nn.init_weights(spec, 8, dtype=np.float64)]
    w = [a if a.ndim > 1 else rng.uniform(-0.1, 0.1, a.shape) for a in w]
    x = rng.standard_normal((3, 2, 6, 6))
    y = rng.uniform(0, 1, (3, 2))
    _, grads = nn.loss_and_grad(spec, w, x, y)

    def loss(ws):
        return float(np.sum((nn.forward(spec, ws, x) - y) ** 2) / 3)

    eps = 1e-6
    for p in range(len(w)):
        for idx in list(np.ndindex(w[p].shape))[:25]:
            orig = w[p][idx]
            w[p][idx] = orig + eps
            lp = loss(w)
            w[p][idx] = orig - eps
            lm = loss(w)
            w[p][idx] = orig
            num = (lp - lm) / (2 * eps)
            assert grads[p][idx] == pytest.approx(num, rel=1e-4, abs=1e-7)


def test_non_finite_loss_reported():
    spec = nn.NetworkSpec((1, 1, 1), (nn.flatten(), nn.fc(1)), 1)
    w = [np.array([[np.inf]], np.float32), np.zeros(1, np.float32)]
    with pytest.raises(nn.NonFiniteLossError):
        nn.loss_and_grad(spec, w, np.ones((1, 1, 1, 1), np.float32), np.zeros((1, 1), np.float32))


def test_loss_non_negative(rng):
    spec = nn.NetworkSpec((1, 3, 3), (nn.flatten(), nn.fc(4), nn.relu(), nn.fc(2)), 2)
    for s in range(10):
        w = nn.init_weights(spec, s)
        x = rng.standard_normal((2, 1, 3, 3)).astype(np.float32)
        loss, _ = nn.loss_and_grad(spec, w, x, rng.standard_normal((2, 2)))
        assert loss > 0


def tiny_conv_fc():
    return nn.NetworkSpec((1, 5, 5), (nn.conv(2, 3), nn.flatten(), nn.fc(2)), 2)


def test_grad_check_tiny_net():
    for seed in range(3):
        assert nn.grad_check(tiny_conv_fc(), seed) < 1e-2


def test_grad_check_linear_net():
    spec = nn.NetworkSpec((1, 3, 3), (nn.flatten(), nn.fc(3)), 3)
    assert nn.grad_check(spec, 1) < 1e-4


def test_grad_check_deterministic():
    assert nn.grad_check(tiny_conv_fc(), 5) == nn.grad_check(tiny_conv_fc(), 5)


def test_grad_check_float64_mode():
    assert nn.grad_check(tiny_conv_fc(), 2, dtype=np.float64) < 1e-5


def test_grad_check_detects_wrong_gradient(monkeypatch):
    spec = nn.NetworkSpec((1, 3, 3), (nn.flatten(), nn.fc(2)), 2)
    real = nn.loss_and_grad

    def skewed(*a, **k):
        loss, g = real(*a, **k)
        return loss, [x * 1.1 for x in g]

    monkeypatch.setattr(nn, "loss_and_grad", skewed)
    assert nn.grad_check(spec, 0) > 0.05


# -- optimizer -------------------------------------------------------------

def test_plain_gradient_step():
    cfg = nn.TrainConfig(learning_rate=0.1, momentum=0.0)
    v = [np.zeros(1)]
    assert nn.sgd_step([np.array([1.0])], [np.array([2.0])], cfg, v)[0][0] == pytest.approx(0.8)


def test_zero_gradient_is_fixed_point():
    cfg = nn.TrainConfig(learning_rate=0.5, momentum=0.9)
    w = [np.array([1.0, -2.0])]
    out = nn.sgd_step(w, [np.zeros(2)], cfg, [np.zeros(2)])
    np.testing.assert_array_equal(out[0], w[0])


def test_momentum_second_step():
    lr, g = 0.1, 2.0
    cfg = nn.TrainConfig(learning_rate=lr, momentum=0.9)
    v = [np.zeros(1)]
    w1 = nn.sgd_step([np.array([0.0])], [np.array([g])], cfg, v)
    w2 = nn.sgd_step(w1, [np.array([g])], cfg, v)
    assert w1[0][0] - w2[0][0] == pytest.approx(lr * g * 1.9)


def test_clipped_step_example():
    # gradient (3, 4) has norm 5; clipping to 1 turns it into (0.6, 0.8)
    cfg = nn.TrainConfig(learning_rate=1.0, momentum=0.0, grad_clip=1.0)
    out = nn.sgd_step([np.zeros(1), np.zeros(1)], [np.array([3.0]), np.array([4.0])], cfg,
                      [np.zeros(1), np.zeros(1)])
    assert out[0][0] == pytest.approx(-0.6) and out[1][0] == pytest.approx(-0.8)


def test_clip_gradients_bounds_norm_and_keeps_direction(rng):
    for _ in range(50):
        g = [rng.standard_normal(s) * rng.uniform(0.01, 100) for s in [(3, 4), (4,), (2, 2, 2)]]
        bound = rng.uniform(0.1, 10)
        out = nn.clip_gradients(g, bound)
        norm = np.sqrt(sum((x**2).sum() for x in g))
        new = np.sqrt(sum((x**2).sum() for x in out))
        assert new == pytest.approx(min(norm, bound), rel=1e-9)
        flat, flat_out = np.concatenate([x.ravel() for x in g]), np.concatenate([x.ravel() for x in out])
        np.testing.assert_allclose(flat_out * norm / new, flat, rtol=1e-9)


def test_clip_disabled_by_default():
    cfg = nn.TrainConfig(learning_rate=1.0, momentum=0.0)
    out = nn.sgd_step([np.zeros(1)], [np.array([1e6])], cfg, [np.zeros(1)])
    assert out[0][0] == -1e6


def test_sgd_shape_mismatch():
    cfg = nn.TrainConfig()
    with pytest.raises(ValueError):
        nn.sgd_step([np.zeros(2)], [np.zeros(3)], cfg, [np.zeros(2)])


@pytest.mark.parametrize("kw", [dict(learning_rate=-1), dict(momentum=1.0), dict(batch_size=0),
                                dict(epochs=-1), dict(weight_init_scale=0), dict(grad_clip=-1)])
def test_train_config_validation(kw):
    with pytest.raises(ValueError):
        nn.TrainConfig(**kw)


def test_init_weights_deterministic_and_bounded():
    spec = tiny_conv_fc()
    a, b = nn.init_weights(spec, 4), nn.init_weights(spec, 4)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)
    kernel = a[0]
    assert np.abs(kernel).max() <= 2.0 / math.sqrt(9)
    assert not a[1].any()


# -- serialization ---------------------------------------------------------

def test_save_load_round_trip(tmp_path):
    spec = nn.conv_ladder_spec(32, 4, channels=(4, 4, 8, 8, 8), hidden=(16, 8))
    w = nn.init_weights(spec, 9)
    nn.save_weights(spec, w, tmp_path / "w.cdw")
    spec2, w2 = nn.load_weights(tmp_path / "w.cdw")
    assert spec2 == spec
    for x, y in zip(w, w2):
        assert x.dtype == y.dtype == np.float32
        assert x.tobytes() == y.tobytes()


def test_weights_file_layout(tmp_path):
    spec = nn.NetworkSpec((1, 1, 2), (nn.flatten(), nn.fc(1)), 1)
    w = [np.array([[1.5, -2.0]], np.float32), np.array([0.25], np.float32)]
    nn.save_weights(spec, w, tmp_path / "w.cdw")
    data = (tmp_path / "w.cdw").read_bytes()
    assert data[:4] == b"CDW1"
    hlen = int.from_bytes(data[4:8], "little")
    assert np.frombuffer(data[8 + hlen:], "<f4").tolist() == [1.5, -2.0, 0.25]


def test_truncated_file_names_byte_range(tmp_path):
    spec = tiny_conv_fc()
    nn.save_weights(spec, nn.init_weights(spec, 0), tmp_path / "w.cdw")
    data = (tmp_path / "w.cdw").read_bytes()
    (tmp_path / "t.cdw").write_bytes(data[:-10])
    with pytest.raises(nn.WeightsFileError, match=rf"missing bytes \[{len(data) - 10}, \d+\)"):
        nn.load_weights(tmp_path / "t.cdw")


def test_wrong_magic(tmp_path):
    (tmp_path / "x.cdw").write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(nn.WeightsFileError, match="not a weights file"):
        nn.load_weights(tmp_path / "x.cdw")


def test_shape_table_mismatch(tmp_path):
    spec = tiny_conv_fc()
    nn.save_weights(spec, nn.init_weights(spec, 0), tmp_path / "w.cdw")
    data = bytearray((tmp_path / "w.cdw").read_bytes())
    hlen = int.from_bytes(data[4:8], "little")
    header = data[8:8 + hlen].decode().replace("[2, 1, 3, 3]", "[2, 1, 3, 4]")
    assert len(header) == hlen
    data[8:8 + hlen] = header.encode()
    (tmp_path / "w.cdw").write_bytes(bytes(data))
    with pytest.raises(nn.WeightsFileError, match="shape table entry 0"):
        nn.load_weights(tmp_path / "w.cdw")


def test_training_epoch_bit_reproducible():
    spec = tiny_conv_fc()
    cfg = nn.TrainConfig(learning_rate=0.05, momentum=0.9)
    x = np.random.default_rng(1).standard_normal((8, 1, 5, 5)).astype(np.float32)
    y = np.random.default_rng(2).uniform(0, 1, (8, 2)).astype(np.float32)

    def run():
        w = nn.init_weights(spec, 0)
        v = nn.zeros_like(w)
        for i in range(0, 8, 4):
            _, g = nn.loss_and_grad(spec, w, x[i:i + 4], y[i:i + 4])
            w = nn.sgd_step(w, g, cfg, v)
        return b"".join(a.tobytes() for a in w)

    assert run() == run()
