"""
Training the attention network and attacking a key byte
=======================================================

Profile a reduced attention network on synthetic traces, then recover the
key byte from held-out traces and plot the average rank curve. Takes about
half a minute on one CPU core.
"""

# %%
import tempfile
from pathlib import Path

import numpy as np

from deepsca.attack import average_rank_curve, required_traces
from deepsca.engine import TrainingConfig, predict_proba, save_checkpoint, train
from deepsca.netspec import CbamConfig, NetworkConfig, build_attention_network
from deepsca.plotting import plot_rank_curve
from deepsca.traces import (LeakageModelSpec, SynthConfig, apply_standardizer, compute_labels, fit_standardizer,
                            split_profiling_attack, synthesize)

out = Path(tempfile.mkdtemp(prefix="deepsca_tutorial_"))
lm = LeakageModelSpec.sbox(1)

# %%
# Data: one leak at sample 50, SNR 2. The standardizer is fitted on the
# profiling part only and then applied to both parts.
ts = synthesize(SynthConfig(n_traces=6000, n_samples=100, leak_positions=(50,), snr=2.0, seed=0))
prof, att = split_profiling_attack(ts, 5500, 500, seed=0)
st = fit_standardizer(prof)
prof, att = apply_standardizer(st, prof), apply_standardizer(st, att)

# %%
# A one-block network: 16 filters, CBAM in that block, two hidden layers of 64.
# The full-size presets live in ``deepsca.presets``; this is the desk-scale cut.
cfg = NetworkConfig(input_length=100, filters_per_block=(16,), fc_hidden_units=64, dropout_rates=(0.4, 0.4),
                    cbam=CbamConfig(reduction_ratio=16, spatial_kernel=11))
graph = build_attention_network(cfg, seed=0)
for layer in graph.layer_descriptors():
    print(f"{layer['name']:>22}  {layer['kind']:<18} {layer['out_shape']}")

# %%
train_cfg = TrainingConfig(epochs=10, batch_size=200, optimizer="adamw", learning_rate=3e-3, weight_decay=1.0, seed=0)
model = train(graph, prof, compute_labels(prof, lm), train_cfg,
              progress=lambda row: print(f"epoch {row['epoch']:2d}  loss {row['loss']:.4f}  acc {row['accuracy']:.3f}"))
model.standardizer = st
save_checkpoint(out / "model.h5", model)

# %%
# Attack: accumulate log-likelihoods over random orderings of the attack
# traces and track the rank of the true key byte.
probs = predict_proba(model, att)
labels = compute_labels(att, lm)
print("attack NLL", round(float(-np.log(probs[np.arange(len(labels)), labels]).mean()), 3),
      "vs uniform", round(float(np.log(256)), 3))

curve = average_rank_curve(probs, att, lm, n_max=200, repeats=100, seed=0)
for n in (1, 10, 25, 50, 100, 200):
    print(f"mean rank after {n:3d} traces: {curve.mean_rank[n - 1]:.2f}")
print("required traces, rank = 0:", required_traces(curve, "zero"), " rank < 1:", required_traces(curve, "below1"))

plot_rank_curve(curve, out / "rank_curve.svg", title="synthetic, SNR 2")
curve.to_csv(out / "rank_curve.csv")
print("plots and checkpoint in", out)
