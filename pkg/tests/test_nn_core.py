import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings, strategies as st

from scunwarp import nn_core as nc
from scunwarp.errors import CheckpointError, DimensionMismatch, NoGraph


def conv_oracle(x, w, b, stride, pad):
    C, H, W = x.shape
    O, _, kh, kw = w.shape
    xp = np.zeros((C, H + 2 * pad, W + 2 * pad))
    xp[:, pad:pad + H, pad:pad + W] = x
    oh, ow = (H + 2 * pad - kh) // stride + 1, (W + 2 * pad - kw) // stride + 1
    out = np.zeros((O, oh, ow))
    for o in range(O):
        for i in range(oh):
            for j in range(ow):
                acc = b[o]
                for c in range(C):
                    for u in range(kh):
                        for v in range(kw):
                            acc += w[o, c, u, v] * xp[c, i * stride + u, j * stride + v]
                out[o, i, j] = acc
    return out


def test_mlp_examples():
    m = nc.Mlp([3, 5, 2])
    for p in m.parameters():
        nn.init.zeros_(p)
    assert torch.all(m(torch.randn(4, 3)) == 0)
    ident = nc.Mlp([3, 3])
    with torch.no_grad():
        ident.layers[0].weight.copy_(torch.eye(3))
        ident.layers[0].bias.zero_()
    x = torch.randn(7, 3)
    assert torch.equal(ident(x), x)
    with pytest.raises(DimensionMismatch):
        ident(torch.randn(2, 4))


def test_mlp_matches_matmul_oracle():
    rng = np.random.default_rng(0)
    m = nc.Mlp([6, 8, 4])
    nc.init_weights(m, 3)
    x = rng.normal(size=(10, 6)).astype(np.float32)
    W1, b1 = m.layers[0].weight.detach().numpy(), m.layers[0].bias.detach().numpy() + 0.1
    with torch.no_grad():
        m.layers[0].bias.add_(0.1)
    W2, b2 = m.layers[1].weight.detach().numpy(), m.layers[1].bias.detach().numpy()
    ref = np.maximum(x @ W1.T + b1, 0) @ W2.T + b2
    assert np.allclose(m(torch.from_numpy(x)).detach().numpy(), ref, atol=1e-6)


def test_backward_examples():
    w = torch.randn(5, requires_grad=True)
    const = (w * 0).sum() + 3.0
    assert all(torch.all(g == 0) for g in nc.backward(const, [w]))
    x = torch.randn(5)
    (gw,) = nc.backward((w * x).sum(), [w])
    assert torch.equal(gw, x)
    unused = torch.randn(2, requires_grad=True)
    assert torch.all(nc.backward((w * x).sum(), [w, unused])[1] == 0)
    with pytest.raises(NoGraph):
        nc.backward(torch.tensor(1.0), [w])
    with pytest.raises(DimensionMismatch):
        nc.backward(w * 2, [w])


def test_mlp_l1_gradients_match_finite_differences():
    torch.manual_seed(0)
    m = nc.Mlp([4, 8, 3]).double()
    x, y = torch.randn(16, 4, dtype=torch.float64), torch.randn(16, 3, dtype=torch.float64)
    checks = nc.gradient_check(lambda: nc.l1_loss(m(x), y), m, n_samples=40, step=1e-3, seed=1)
    # L1 has kinks; a 1e-3 step can straddle one, so skip the few samples that do
    good = [c for c in checks if c.rel_error < 1e-4]
    assert len(good) >= 36
    smooth = nc.gradient_check(lambda: (m(x) - y).pow(2).mean(), m, n_samples=40, step=1e-3, seed=1)
    assert max(c.rel_error for c in smooth) < 1e-4


@pytest.mark.parametrize("layer", ["conv", "bn", "softmax", "mlp"])
def test_layer_gradient_checks(layer):
    torch.manual_seed(1)
    x = torch.randn(2, 3, 5, 5, dtype=torch.float64)
    if layer == "conv":
        mod = nn.Conv2d(3, 4, 3, padding=1).double()
        f = lambda: nc.conv2d(x, mod.weight, mod.bias, 1, 1).sin().sum()  # noqa: E731
    elif layer == "bn":
        mod = nc.BatchNorm(3).double()
        with torch.no_grad():
            mod.weight.uniform_(0.5, 1.5)
            mod.bias.normal_()
        f = lambda: (mod(x) * torch.arange(150, dtype=torch.float64).view(2, 3, 5, 5)).sum()  # noqa: E731
        mod.eval()
    elif layer == "softmax":
        mod = nn.Linear(5, 5).double()
        f = lambda: (nc.softmax(mod(x), -1) * x).sum()  # noqa: E731
    else:
        mod = nc.Mlp([5, 7, 5]).double()
        f = lambda: mod(x).tanh().sum()  # noqa: E731
    checks = nc.gradient_check(f, mod, n_samples=32, step=1e-6, seed=2)
    assert max(c.rel_error for c in checks) < 1e-4


def test_adam_examples():
    p = torch.ones(3)
    state = nc.AdamState()
    nc.adam_step([p], [torch.zeros(3)], state, lr=0.1)
    assert torch.equal(p, torch.ones(3)) and state.step == 1
    p = torch.zeros(2, dtype=torch.float64)
    g = torch.tensor([3.0, -0.5], dtype=torch.float64)
    state = nc.AdamState()
    nc.adam_step([p], [g], state, lr=0.01)
    # m_hat = g and v_hat = g^2 on the first step
    assert torch.allclose(p, -0.01 * g / (g.abs() + 1e-8), atol=1e-12)


def test_adam_two_step_recurrence():
    lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
    g = 0.7
    p = torch.tensor([1.5], dtype=torch.float64)
    state = nc.AdamState()
    x, m, v = 1.5, 0.0, 0.0
    for t in (1, 2):
        nc.adam_step([p], [torch.tensor([g], dtype=torch.float64)], state, lr, b1, b2, eps)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1**t)) / ((v / (1 - b2**t)) ** 0.5 + eps)
    assert abs(p.item() - x) < 1e-7


def test_l1_examples():
    a = torch.randn(3, 4, 4)
    assert nc.l1_loss(a, a).item() == 0
    assert nc.l1_loss(a + 0.25, a).item() == pytest.approx(0.25, abs=1e-6)
    rng = np.random.default_rng(2)
    p, t = rng.normal(size=(3, 5, 5)), rng.normal(size=(3, 5, 5))
    assert nc.l1_loss(torch.tensor(p), torch.tensor(t)).item() == pytest.approx(np.abs(p - t).mean(), abs=1e-7)
    mask = rng.random((5, 5)) > 0.5
    ref = np.abs(p - t)[:, mask].mean()
    got = nc.l1_loss(torch.tensor(p), torch.tensor(t), torch.tensor(mask).unsqueeze(0)).item()
    assert got == pytest.approx(ref, abs=1e-7)


def test_conv_examples():
    x = torch.randn(3, 6, 6)
    w = torch.zeros(3, 3, 1, 1)
    for c in range(3):
        w[c, c] = 1
    assert torch.equal(nc.conv2d(x, w), x)
    const = torch.full((1, 6, 6), 0.5)
    out = nc.conv2d(const, torch.ones(1, 1, 3, 3), padding=1)
    assert torch.allclose(out[0, 1:-1, 1:-1], torch.full((4, 4), 4.5))
    with pytest.raises(DimensionMismatch):
        nc.conv2d(x, torch.ones(1, 2, 3, 3))


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
def test_conv_matches_loop_oracle(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x, w, b = rng.normal(size=(2, 7, 6)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    out = nc.conv2d(torch.tensor(x, dtype=torch.float32), torch.tensor(w, dtype=torch.float32),
                    torch.tensor(b, dtype=torch.float32), stride, pad).numpy()
    assert np.allclose(out, conv_oracle(x, w, b, stride, pad), atol=1e-5)


def test_batch_norm_examples():
    C = 3
    ones, zeros = torch.ones(C), torch.zeros(C)
    x = torch.randn(4, C, 8, 8, dtype=torch.float64)
    x = (x - x.mean((0, 2, 3), keepdim=True)) / x.var((0, 2, 3), unbiased=False, keepdim=True).sqrt()
    out = nc.batch_norm(x.float(), ones, zeros, None, None, training=True)
    assert torch.allclose(out, x.float(), atol=1e-5)
    const = torch.full((2, C, 4, 4), 3.0)
    assert torch.all(nc.batch_norm(const, ones, zeros, None, None, training=True).abs() < 1e-6)
    r = torch.randn(4, C, 8, 8) * 3 + 2
    out = nc.batch_norm(r, ones, zeros, torch.zeros(C), torch.ones(C), training=True).double()
    assert out.mean((0, 2, 3)).abs().max() < 1e-5
    assert (out.var((0, 2, 3), unbiased=False) - 1).abs().max() < 1e-3


def test_batch_norm_running_stats():
    bn = nc.BatchNorm(2)
    x = torch.randn(3, 2, 4, 4) + 5
    bn.train()
    bn(x)
    assert torch.allclose(bn.running_mean, 0.1 * x.mean((0, 2, 3)), atol=1e-6)
    bn.eval()
    assert torch.allclose(bn(x), (x - bn.running_mean.view(1, 2, 1, 1))
                          / (bn.running_var.view(1, 2, 1, 1) + 1e-5).sqrt(), atol=1e-5)


def test_softmax_examples():
    assert torch.allclose(nc.softmax(torch.zeros(5)), torch.full((5,), 0.2))
    x = torch.tensor([0.0, 1000.0, 1.0])
    assert nc.softmax(x)[1].item() == pytest.approx(1.0)
    rng = np.random.default_rng(3)
    r = rng.normal(size=(4, 6))
    ref = np.exp(r) / np.exp(r).sum(-1, keepdims=True)
    assert np.allclose(nc.softmax(torch.tensor(r), -1).numpy(), ref, atol=1e-7)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_rows_sum_to_one(vals):
    s = nc.softmax(torch.tensor(vals, dtype=torch.float64))
    assert abs(s.sum().item() - 1) < 1e-12 and torch.all(s >= 0)


def test_forward_deterministic():
    m = nc.Mlp([4, 16, 4])
    nc.init_weights(m, 5)
    x = torch.randn(32, 4)
    assert torch.equal(m(x), m(x))
    m2 = nc.Mlp([4, 16, 4])
    nc.init_weights(m2, 5)
    assert all(torch.equal(a, b) for a, b in zip(m.parameters(), m2.parameters()))


def test_checkpoint_round_trip(tmp_path):
    m = nn.Sequential(nc.Mlp([3, 4, 2]), nc.BatchNorm(2))
    nc.init_weights(m, 9)
    ckpt = nc.checkpoint_from_module(m, {"widths": [3, 4, 2]}, step=12, seed=9)
    nc.save_checkpoint(tmp_path / "m.bin", ckpt)
    back = nc.load_checkpoint(tmp_path / "m.bin")
    assert back.arch == {"widths": [3, 4, 2]} and back.step == 12 and back.seed == 9
    state = m.state_dict()
    for k, v in back.state_dict().items():
        assert torch.equal(v, state[k])
    assert nc.checkpoint_bytes(back) == nc.checkpoint_bytes(ckpt)


def test_checkpoint_rejects_bad_files(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"NOTACKPT" + bytes(12))
    with pytest.raises(CheckpointError):
        nc.load_checkpoint(p)
    m = nc.Mlp([2, 2])
    data = bytearray(nc.checkpoint_bytes(nc.checkpoint_from_module(m, {})))
    data[8] = 99
    p.write_bytes(bytes(data))
    with pytest.raises(CheckpointError):
        nc.load_checkpoint(p)
    p.write_bytes(nc.checkpoint_bytes(nc.checkpoint_from_module(m, {}))[:-3])
    with pytest.raises(CheckpointError):
        nc.load_checkpoint(p)
