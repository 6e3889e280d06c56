import numpy as np
import pytest
import torch

from deepsca.aes import HW_TABLE
from deepsca.netspec import CbamConfig, NetworkConfig, build_attention_network
from deepsca.traces import LeakageModelSpec, SynthConfig, compute_labels, synthesize


def tiny_config(input_length=32, channels=4, cbam=True, r=2, spatial_kernel=7, fc=16, dropout=()):
    return NetworkConfig(
        input_length=input_length,
        filters_per_block=(channels,),
        fc_hidden_units=fc,
        dropout_rates=dropout,
        cbam=CbamConfig(enabled=cbam, reduction_ratio=r, spatial_kernel=spatial_kernel),
    )


def tiny_network(seed=0, **kw):
    return build_attention_network(tiny_config(**kw), seed=seed)


def template_probs(profiling, attack, position, lm=None):
    """Gaussian HW template at one sample: the Bayes-optimal model for the synthetic leak."""
    lm = lm or LeakageModelSpec.sbox(1)
    hw = HW_TABLE[compute_labels(profiling, lm)]
    x = profiling.samples[:, position].astype(np.float64)
    mu = np.array([x[hw == h].mean() for h in range(9)])
    var = np.mean([x[hw == h].var() for h in range(9)])
    xa = attack.samples[:, position].astype(np.float64)
    ll = -((xa[:, None] - mu[None, HW_TABLE[np.arange(256)]]) ** 2) / (2 * var)
    p = np.exp(ll - ll.max(axis=1, keepdims=True))
    return p / p.sum(axis=1, keepdims=True)


class _BrokenSigmoid(torch.autograd.Function):
    """Correct forward, deliberately wrong backward (drops the (1 - s) factor)."""

    @staticmethod
    def forward(ctx, x):
        s = torch.sigmoid(x)
        ctx.save_for_backward(s)
        return s

    @staticmethod
    def backward(ctx, grad):
        (s,) = ctx.saved_tensors
        return grad * s


def broken_sigmoid(x):
    return _BrokenSigmoid.apply(x)


@pytest.fixture(scope="session")
def noiseless_set():
    return synthesize(SynthConfig(n_traces=400, n_samples=40, leak_positions=(17,), snr=float("inf"), seed=3))


@pytest.fixture(scope="session")
def small_synth():
    return synthesize(SynthConfig(n_traces=2000, n_samples=40, leak_positions=(20,), snr=2.0, seed=11))


# --- desk-scale synthetic benchmark shared by the acceptance run and the CGV localization test ---

DESK_LEAK = 50
DESK_NETWORK = dict(filters_per_block=(16,), fc_hidden_units=64, dropout_rates=(0.4, 0.4),
                    cbam=dict(enabled=True, reduction_ratio=16, spatial_kernel=11))
DESK_TRAINING = dict(epochs=15, batch_size=200, optimizer="adamw", learning_rate=3e-3, weight_decay=1.0)

_desk_cache = {}


def desk_split(desync=0):
    """6000 synthetic traces (D=100, one leak, snr 1), split 5500/500 and standardized on profiling data."""
    from deepsca.traces import apply_standardizer, fit_standardizer, split_profiling_attack

    key = ("data", desync)
    if key not in _desk_cache:
        ts = synthesize(SynthConfig(n_traces=6000, n_samples=100, leak_positions=(DESK_LEAK,), snr=1.0,
                                    desync_max=desync, seed=0))
        prof, att = split_profiling_attack(ts, 5500, 500, seed=0)
        st = fit_standardizer(prof)
        _desk_cache[key] = (apply_standardizer(st, prof), apply_standardizer(st, att))
    return _desk_cache[key]


def desk_model(seed, desync=0):
    from deepsca.engine import TrainingConfig, train

    key = ("model", desync, seed)
    if key not in _desk_cache:
        prof, _ = desk_split(desync)
        cfg = NetworkConfig.from_dict({"input_length": 100, **DESK_NETWORK})
        graph = build_attention_network(cfg, seed=seed)
        labels = compute_labels(prof, LeakageModelSpec.sbox(1))
        _desk_cache[key] = train(graph, prof, labels, TrainingConfig(seed=seed, **DESK_TRAINING))
    return _desk_cache[key]


# --- acceptance summary: one line per criterion at the end of the run ---

ACCEPTANCE = {}


def record_criterion(number, passed, detail):
    ACCEPTANCE[number] = (bool(passed), detail)
    return bool(passed)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
