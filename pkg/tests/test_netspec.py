import logging
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_config, tiny_network
from deepsca.netspec import (CbamConfig, NetworkConfig, build_attention_network, channel_attention_forward,
                             pooled_length, residual_block_forward, spatial_attention_forward)
from deepsca.presets import PRESET_NAMES, dataset_preset
from deepsca.traces import LeakageKind


def _t(a):
    return torch.tensor(a, dtype=torch.float64)


def _sig(z):
    return 1.0 / (1.0 + np.exp(-z))


def _channel_params(c, r, rng, scale=1.0):
    h = c // r
    return {"w1": rng.normal(size=(h, c)) * scale, "b1": rng.normal(size=h) * scale,
            "w2": rng.normal(size=(c, h)) * scale, "b2": rng.normal(size=c) * scale}


def _oracle_channel(f, p):
    c, t = f.shape
    gap = [sum(f[i, j] for j in range(t)) / t for i in range(c)]
    gmp = [max(f[i, j] for j in range(t)) for i in range(c)]

    def mlp(v):
        h = [max(0.0, sum(p["w1"][a, i] * v[i] for i in range(c)) + p["b1"][a]) for a in range(p["w1"].shape[0])]
        return [sum(p["w2"][i, a] * h[a] for a in range(len(h))) + p["b2"][i] for i in range(c)]

    m1, m2 = mlp(gap), mlp(gmp)
    out = np.empty_like(f)
    for i in range(c):
        w = _sig(m1[i] + m2[i])
        for j in range(t):
            out[i, j] = w * f[i, j]
    return out


def _oracle_spatial(f, weight, bias):
    c, t = f.shape
    k = weight.shape[-1]
    pooled = [[sum(f[i, j] for i in range(c)) / c for j in range(t)], [max(f[i, j] for i in range(c)) for j in range(t)]]
    out = np.empty_like(f)
    for j in range(t):
        acc = bias[0]
        for ch in range(2):
            for q in range(k):
                src = j + q - k // 2
                if 0 <= src < t:
                    acc += weight[0, ch, q] * pooled[ch][src]
        for i in range(c):
            out[i, j] = _sig(acc) * f[i, j]
    return out


def _torch_params(p):
    return {k: _t(v) for k, v in p.items()}


# --- channel attention -------------------------------------------------------

def test_channel_attention_zero_params_halves_input():
    rng = np.random.default_rng(0)
    f = rng.normal(size=(4, 8))
    p = {k: np.zeros_like(v) for k, v in _channel_params(4, 2, rng).items()}
    out = channel_attention_forward(_t(f), _torch_params(p)).numpy()
    assert np.allclose(out, 0.5 * f, atol=0, rtol=1e-15)


def test_channel_attention_zero_input():
    rng = np.random.default_rng(1)
    out = channel_attention_forward(_t(np.zeros((4, 8))), _torch_params(_channel_params(4, 2, rng)))
    assert torch.all(out == 0)


def test_channel_attention_matches_oracle():
    rng = np.random.default_rng(2)
    f = rng.normal(size=(4, 8))
    p = _channel_params(4, 2, rng)
    out = channel_attention_forward(_t(f), _torch_params(p)).numpy()
    assert np.max(np.abs(out - _oracle_channel(f, p))) < 1e-6


def test_channel_attention_channel_mismatch():
    rng = np.random.default_rng(3)
    with pytest.raises(ValueError, match="channels"):
        channel_attention_forward(_t(rng.normal(size=(6, 8))), _torch_params(_channel_params(4, 2, rng)))


# --- spatial attention ---------------------------------------------------------

def test_spatial_attention_zero_params_halves_input():
    f = np.random.default_rng(4).normal(size=(3, 16))
    out = spatial_attention_forward(_t(f), {"weight": _t(np.zeros((1, 2, 7))), "bias": _t(np.zeros(1))}).numpy()
    assert np.allclose(out, 0.5 * f, atol=0, rtol=1e-15)


def test_spatial_attention_constant_input_interior():
    rng = np.random.default_rng(5)
    w, b = rng.normal(size=(1, 2, 5)), rng.normal(size=1)
    out = spatial_attention_forward(_t(np.full((3, 16), 2.5)), {"weight": _t(w), "bias": _t(b)}).numpy()
    # away from the zero-padded edges the conv sees a constant map
    expected = _sig(2.5 * w.sum() + b[0]) * 2.5
    assert np.allclose(out[:, 2:-2], expected, atol=1e-12)


def test_spatial_attention_matches_oracle():
    rng = np.random.default_rng(6)
    f = rng.normal(size=(3, 16))
    w, b = rng.normal(size=(1, 2, 7)), rng.normal(size=1)
    out = spatial_attention_forward(_t(f), {"weight": _t(w), "bias": _t(b)}).numpy()
    assert np.max(np.abs(out - _oracle_spatial(f, w, b))) < 1e-6


def test_spatial_kernel_wider_than_input():
    with pytest.raises(ValueError, match="wider"):
        spatial_attention_forward(_t(np.ones((2, 4))), {"weight": _t(np.zeros((1, 2, 7))), "bias": _t(np.zeros(1))})


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 12), st.sampled_from([1, 2, 4]))
def test_attention_never_amplifies(seed, t, r):
    rng = np.random.default_rng(seed)
    c = 4
    f = rng.normal(size=(c, t))
    p = _channel_params(c, r, rng, scale=0.5)
    k = 1 if t < 3 else 3
    sp = {"weight": _t(rng.normal(size=(1, 2, k)) * 0.5), "bias": _t(rng.normal(size=1) * 0.5)}
    for out in (channel_attention_forward(_t(f), _torch_params(p)).numpy(), spatial_attention_forward(_t(f), sp).numpy()):
        assert out.shape == f.shape
        assert np.all(np.abs(out) < np.abs(f))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_channel_attention_is_time_reversal_invariant(seed):
    rng = np.random.default_rng(seed)
    f = rng.normal(size=(8, 10))
    p = _torch_params(_channel_params(8, 4, rng))
    fwd = channel_attention_forward(_t(f), p)
    rev = channel_attention_forward(_t(f[:, ::-1].copy()), p)
    assert torch.allclose(rev.flip(-1), fwd, rtol=1e-12, atol=1e-14)


# --- residual block ----------------------------------------------------------------

def test_residual_block_zero_branch_is_pooled_relu():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(3, 10))
    zero = (_t(np.zeros((3, 3, 11))), _t(np.zeros(3)))
    params = {"convs": [zero, zero], "shortcut": (_t(np.eye(3)[:, :, None]), _t(np.zeros(3)))}
    out = residual_block_forward(_t(x), params).numpy()
    relu = np.maximum(x, 0)
    assert np.allclose(out, relu.reshape(3, 5, 2).mean(-1), atol=1e-15)


@pytest.mark.parametrize("t", [1, 2, 7, 8, 25, 700])
def test_residual_block_output_length(t):
    params = {"convs": [(_t(np.ones((2, 1, 3))), _t(np.zeros(2)))], "shortcut": (_t(np.ones((2, 1, 1))), _t(np.zeros(2)))}
    out = residual_block_forward(_t(np.ones((1, t))), params)
    assert out.shape == (2, math.ceil(t / 2)) and pooled_length(t) == math.ceil(t / 2)


def test_residual_block_shortcut_mismatch():
    params = {"convs": [(_t(np.ones((2, 1, 3))), _t(np.zeros(2)))], "shortcut": (_t(np.ones((3, 1, 1))), _t(np.zeros(3)))}
    with pytest.raises(ValueError, match="shortcut"):
        residual_block_forward(_t(np.ones((1, 8))), params)


def test_residual_block_gradients_match_finite_differences():
    rng = np.random.default_rng(8)
    c_in, c, t = 2, 4, 12
    params = {
        "convs": [(_t(rng.normal(size=(c, c_in, 3)) * 0.5), _t(rng.normal(size=c) * 0.1)),
                  (_t(rng.normal(size=(c, c, 3)) * 0.5), _t(rng.normal(size=c) * 0.1))],
        "shortcut": (_t(rng.normal(size=(c, c_in, 1))), _t(rng.normal(size=c) * 0.1)),
        "channel": _torch_params(_channel_params(c, 2, rng, scale=0.5)),
        "spatial": {"weight": _t(rng.normal(size=(1, 2, 3)) * 0.5), "bias": _t(rng.normal(size=1) * 0.1)},
    }
    leaves = [w for pair in params["convs"] for w in pair] + list(params["shortcut"])
    leaves += list(params["channel"].values()) + list(params["spatial"].values())
    for leaf in leaves:
        leaf.requires_grad_(True)
    x = _t(rng.normal(size=(c_in, t)))
    probe = _t(rng.normal(size=(c, t // 2)))

    def objective():
        return (residual_block_forward(x, params) * probe).sum()

    grads = torch.autograd.grad(objective(), leaves)
    h, worst = 1e-5, 0.0
    with torch.no_grad():
        for leaf, g in zip(leaves, grads):
            flat, gflat = leaf.view(-1), g.reshape(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + h
                up = float(objective())
                flat[i] = orig - h
                down = float(objective())
                flat[i] = orig
                fd = (up - down) / (2 * h)
                denom = max(abs(fd), abs(float(gflat[i])), 1e-7)
                worst = max(worst, abs(fd - float(gflat[i])) / denom)
    assert worst < 1e-4


# --- configs and presets ------------------------------------------------------------

def test_dpav4_preset():
    p = dataset_preset("dpav4")
    assert p.network.filters_per_block == (128, 256, 512) and p.network.n3 == 3
    assert (p.training.epochs, p.training.batch_size) == (60, 200)
    assert p.network.fc_hidden_units == 1024


def test_aes_rd_preset():
    p = dataset_preset("aes_rd")
    assert p.network.filters_per_block == (64, 64, 128, 128, 256)
    assert p.network.dropout_rates == (0.2, 0.2)
    assert (p.training.epochs, p.training.batch_size) == (101, 256)


def test_aes_hd_preset():
    p = dataset_preset("aes_hd")
    assert p.training.epochs == 75
    assert p.leakage_model.kind is LeakageKind.LAST_ROUND_HD
    assert (p.leakage_model.i1, p.leakage_model.i2) == (12, 8)
    assert p.network.filters_per_block == (128, 256, 512)


def test_ascad_preset():
    p = dataset_preset("ascad")
    assert p.network.fc_hidden_units == 4096 and p.training.epochs == 75
    assert p.network.input_length == 700


def test_unknown_preset():
    with pytest.raises(ValueError, match="nope"):
        dataset_preset("nope")


@pytest.mark.parametrize("name", PRESET_NAMES)
def test_preset_shapes_without_building_full_width(name):
    net = dataset_preset(name).network
    assert net.n1 == 2 and net.n2 == 2 and net.conv_kernel == 11 and net.pool_stride == 2
    assert net.final_length == math.ceil(net.input_length / 2 ** net.n3)
    # same lengths and depth, narrow filters: the real forward pass agrees with the config arithmetic
    narrow = NetworkConfig.from_dict({**net.to_dict(), "filters_per_block": [16] * net.n3, "fc_hidden_units": 8})
    g = build_attention_network(narrow)
    taps = g.forward_taps(torch.zeros(2, net.input_length))
    assert taps["post_final_pooling"].shape == (2, 16, net.final_length)
    assert taps["pre_softmax"].shape == (2, 256)


def test_config_validation():
    with pytest.raises(ValueError):
        tiny_config(channels=6, r=4).validate()
    with pytest.raises(ValueError):
        tiny_config(spatial_kernel=4).validate()
    with pytest.raises(ValueError):
        tiny_config(dropout=(0.1,)).validate()


def test_nonstandard_fields_are_flagged(caplog):
    cfg = NetworkConfig.from_dict({**tiny_config().to_dict(), "n1": 3})
    assert "n1" in cfg.nonstandard_fields()
    with caplog.at_level(logging.WARNING):
        build_attention_network(cfg)
    assert "n1" in caplog.text


def test_config_json_round_trip():
    cfg = NetworkConfig(input_length=100, filters_per_block=(8, 16), dropout_rates=(0.1, 0.3),
                        cbam=CbamConfig(reduction_ratio=4, spatial_kernel=5, residual_block_index=1))
    assert NetworkConfig.from_dict(cfg.to_dict()) == cfg


# --- built graph ------------------------------------------------------------------------

def test_build_is_deterministic():
    x = torch.randn(5, 32, generator=torch.Generator().manual_seed(0))
    a, b, c = tiny_network(seed=3), tiny_network(seed=3), tiny_network(seed=4)
    assert torch.equal(a(x), b(x))
    assert not torch.equal(a(x), c(x))


def test_probability_rows_sum_to_one():
    g = tiny_network().eval()
    x = torch.randn(20, 32, generator=torch.Generator().manual_seed(1)) * 3
    with torch.no_grad():
        p = torch.softmax(g(x).double(), dim=1)
    assert p.shape == (20, 256)
    assert torch.max(torch.abs(p.sum(1) - 1)) < 1e-6


def test_cbam_only_in_hosting_block():
    cfg = NetworkConfig(input_length=32, filters_per_block=(4, 8), fc_hidden_units=8,
                        cbam=CbamConfig(reduction_ratio=2, spatial_kernel=3, residual_block_index=1))
    g = build_attention_network(cfg)
    assert [b.has_cbam for b in g.blocks] == [False, True]
    assert len(g.cbam_modules()) == 2


def test_identity_shortcut_when_channels_match():
    cfg = NetworkConfig(input_length=16, filters_per_block=(4, 4), fc_hidden_units=8,
                        cbam=CbamConfig(reduction_ratio=2, spatial_kernel=3))
    g = build_attention_network(cfg)
    assert torch.equal(g.blocks[1].shortcut.weight[:, :, 0], torch.eye(4))


def test_trace_length_mismatch():
    with pytest.raises(ValueError, match="input_length"):
        tiny_network()(torch.zeros(1, 31))
