import math

import numpy as np
import pytest
import torch
from torch import nn

from conftest import DESK_LEAK, desk_model, desk_split, tiny_network
from deepsca.aes import HW_TABLE
from deepsca.analysis import (CpaResult, WeightMap, cgv_aggregate, cgv_feature_matrix, cgv_weight_map,
                              class_gradients, cpa, expand_map, pearson_columns)
from deepsca.netspec import NetworkConfig, build_attention_network
from deepsca.presets import PRESET_NAMES, dataset_preset
from deepsca.traces import LeakageModelSpec, SynthConfig, TraceSet, synthesize


class Surrogate(nn.Module):
    """A = the input itself (one feature channel), y = W A: the linear case of the weight map."""

    def __init__(self, weights):
        super().__init__()
        self.w = nn.Parameter(torch.tensor(weights, dtype=torch.float64))

    def forward_taps(self, x):
        feats = x.unsqueeze(1)
        return {"post_final_pooling": feats, "pre_softmax": self.scores_from_features(feats)}

    def scores_from_features(self, feats):
        return feats.flatten(1) @ self.w.T

    def forward(self, x):
        return self.forward_taps(x)["pre_softmax"]


def _two_pass_pearson(a, b):
    n = len(a)
    ma, mb = sum(a) / n, sum(b) / n
    cov = sum((a[i] - ma) * (b[i] - mb) for i in range(n))
    va = sum((a[i] - ma) ** 2 for i in range(n))
    vb = sum((b[i] - mb) ** 2 for i in range(n))
    return cov / math.sqrt(va * vb)


# --- CPA -------------------------------------------------------------------------------------

def test_cpa_noiseless(noiseless_set):
    res = cpa(noiseless_set, LeakageModelSpec.sbox(1))
    k = int(noiseless_set.fixed_key[0])
    assert res.known_key == k
    assert abs(res.correlation[k, 17] - 1.0) < 1e-9
    assert np.all(np.delete(res.correlation, 17, axis=1) == 0)
    assert np.all(np.abs(res.correlation) <= 1)


def test_cpa_matches_two_pass_oracle():
    rng = np.random.default_rng(0)
    ts = TraceSet(samples=rng.normal(size=(50, 6)), plaintexts=rng.integers(0, 256, (50, 16)),
                  key=rng.integers(0, 256, 16))
    res = cpa(ts, LeakageModelSpec.sbox(1))
    from deepsca.aes import SBOX
    for k in (0, 13, 255):
        h = [float(HW_TABLE[SBOX[int(p) ^ k]]) for p in ts.plaintexts[:, 0]]
        for t in range(6):
            want = _two_pass_pearson(h, [float(v) for v in ts.samples[:, t]])
            assert abs(res.correlation[k, t] - want) < 1e-10


def test_cpa_negation(small_synth):
    lm = LeakageModelSpec.sbox(1)
    a = cpa(small_synth, lm).correlation
    b = cpa(small_synth.with_samples(-small_synth.samples), lm).correlation
    assert np.allclose(a, -b, rtol=0, atol=1e-12)


def test_cpa_needs_three_traces(noiseless_set):
    with pytest.raises(ValueError, match="3"):
        cpa(noiseless_set.subset(np.arange(2)), LeakageModelSpec.sbox(1))


def test_constant_hypothesis_rows_are_zeroed():
    rng = np.random.default_rng(1)
    # every trace shares the plaintext byte, so each hypothesis column is constant
    pt = np.zeros((10, 16), np.uint8)
    ts = TraceSet(samples=rng.normal(size=(10, 4)), plaintexts=pt, key=np.zeros(16, np.uint8))
    res = cpa(ts, LeakageModelSpec.sbox(1))
    assert np.all(res.correlation == 0)
    assert len(res.constant_hypotheses) == 256


def test_pearson_zero_variance_column():
    h = np.arange(5.0)[:, None]
    x = np.stack([np.arange(5.0), np.ones(5)], axis=1)
    assert np.allclose(pearson_columns(h, x), [[1.0, 0.0]])


def test_cpa_known_key_peaks_at_leak():
    hits = 0
    for seed in range(20):
        leak = int(np.random.default_rng(100 + seed).integers(0, 50))
        ts = synthesize(SynthConfig(n_traces=1000, n_samples=50, leak_positions=(leak,), snr=1.0, seed=100 + seed))
        res = cpa(ts, LeakageModelSpec.sbox(1))
        hits += int(np.argmax(np.abs(res.known_key_row)) == leak)
    assert hits >= 19


def test_cpa_csv(tmp_path, noiseless_set):
    cpa(noiseless_set, LeakageModelSpec.sbox(1)).to_csv(tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "t,known_key_corr,max_abs_corr" and len(lines) == 41


# --- CGV ----------------------------------------------------------------------------------------

def test_surrogate_weight_map():
    g = Surrogate([[2.0, 1.0, 1.0], [1.0, -1.0, -1.0]])
    wm = cgv_weight_map(g, np.array([1.0, -2.0, 3.0]), 0)
    assert np.array_equal(wm.coarse, [2.0, 0.0, 3.0])
    assert np.array_equal(wm.expanded, [2.0, 0.0, 3.0])
    assert wm.target_class == 0 and wm.count == 1


def test_weight_map_depends_on_class():
    g = Surrogate([[2.0, 1.0, 1.0], [1.0, -1.0, -1.0]])
    x = np.array([1.0, -2.0, 3.0])
    a, b = cgv_weight_map(g, x, 0), cgv_weight_map(g, x, 1)
    assert np.array_equal(b.coarse, [1.0, 2.0, 0.0])
    assert not np.array_equal(a.coarse, b.coarse)


def test_zero_trace_through_bias_free_network():
    g = tiny_network()
    assert all(float(p.detach().abs().sum()) == 0 for n, p in g.named_parameters() if n.endswith("bias"))
    wm = cgv_weight_map(g, np.zeros(32), 5)
    assert np.all(wm.expanded == 0)


def test_class_gradients_match_finite_differences():
    g = tiny_network(seed=2).double()
    for p in g.parameters():
        if p.dim() == 1:
            nn.init.normal_(p, std=0.1, generator=torch.Generator().manual_seed(0))
    trace = np.random.default_rng(3).normal(size=32)
    c = 17
    a, alpha = class_gradients(g, trace, c)
    feats = torch.tensor(a.T.copy()).unsqueeze(0)
    h, worst = 1e-5, 0.0
    with torch.no_grad():
        for j in range(a.shape[0]):
            for i in range(a.shape[1]):
                orig = float(feats[0, i, j])
                feats[0, i, j] = orig + h
                up = float(g.scores_from_features(feats)[0, c])
                feats[0, i, j] = orig - h
                down = float(g.scores_from_features(feats)[0, c])
                feats[0, i, j] = orig
                fd = (up - down) / (2 * h)
                denom = max(abs(fd), abs(alpha[j, i]), 1e-7)
                worst = max(worst, abs(fd - alpha[j, i]) / denom)
    assert worst < 1e-4


def test_feature_matrix_shape_and_determinism():
    g = tiny_network()
    x = np.random.default_rng(4).normal(size=32)
    a = cgv_feature_matrix(g, x)
    assert a.shape == (16, 4)
    assert np.array_equal(a, cgv_feature_matrix(g, x.copy()))


@pytest.mark.parametrize("name", PRESET_NAMES)
def test_feature_matrix_length_per_preset(name):
    net = dataset_preset(name).network
    narrow = NetworkConfig.from_dict({**net.to_dict(), "filters_per_block": [16] * net.n3, "fc_hidden_units": 8})
    a = cgv_feature_matrix(build_attention_network(narrow), np.zeros(net.input_length))
    assert a.shape == (math.ceil(net.input_length / 2 ** net.n3), 16)
    if name == "ascad":
        assert a.shape[0] == 88


def test_aggregate_of_one_and_of_duplicates():
    g = tiny_network(seed=1)
    x = np.random.default_rng(5).normal(size=(1, 32))
    single = cgv_weight_map(g, x[0], 3)
    one = cgv_aggregate(g, x, class_policy=3)
    dup = cgv_aggregate(g, np.repeat(x, 4, axis=0), class_policy=3)
    # float32 network: batched and single-trace passes agree to rounding
    assert np.allclose(one.expanded, single.expanded, rtol=0, atol=1e-6 * single.expanded.max())
    assert np.allclose(dup.expanded, single.expanded, rtol=0, atol=1e-6 * single.expanded.max())
    assert dup.count == 4


def test_aggregate_policies():
    g = tiny_network(seed=1)
    x = np.random.default_rng(6).normal(size=(5, 32))
    with torch.no_grad():
        pred = g(torch.tensor(x, dtype=torch.float32)).argmax(1).numpy()
    a = cgv_aggregate(g, x, "predicted")
    b = cgv_aggregate(g, x, "true", labels=pred)
    assert np.allclose(a.coarse, b.coarse)
    with pytest.raises(ValueError):
        cgv_aggregate(g, x, "true")
    with pytest.raises(ValueError, match="empty"):
        cgv_aggregate(g, np.zeros((0, 32)))


def test_maps_are_nonnegative():
    g = tiny_network(seed=7)
    x = np.random.default_rng(7).normal(size=(20, 32)) * 3
    for c in (0, 100, 255):
        assert np.all(cgv_aggregate(g, x, c).expanded >= 0)


@pytest.mark.parametrize("d,d_coarse", [(32, 16), (700, 88), (100, 50), (7, 4), (5, 5)])
def test_expansion_aligned_with_pooling(d, d_coarse):
    coarse = np.arange(d_coarse, dtype=float)
    out = expand_map(coarse, d)
    factor = math.ceil(d / d_coarse)
    assert out.shape == (d,)
    assert np.array_equal(out, coarse[np.arange(d) // factor])
    if d % d_coarse == 0:
        assert np.all(np.bincount(out.astype(int)) == d // d_coarse)


def test_weight_map_normalization_and_csv(tmp_path):
    wm = WeightMap(np.array([0.0, 2.0]), np.array([0.0, 0.0, 2.0, 2.0]), 1, 1)
    assert np.array_equal(wm.normalized(), [0, 0, 1, 1])
    assert np.array_equal(wm.expanded, [0, 0, 2, 2])
    wm.to_csv(tmp_path / "w.csv")
    assert (tmp_path / "w.csv").read_text().splitlines()[0] == "t,weight"


@pytest.mark.slow
def test_planted_leak_localization_over_twenty_trainings():
    _, att = desk_split()
    hits = 0
    for seed in range(20):
        wm = cgv_aggregate(desk_model(seed), att)
        hits += int(abs(int(np.argmax(wm.expanded)) - DESK_LEAK) <= 2)
    assert hits >= 16
