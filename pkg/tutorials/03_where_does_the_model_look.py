"""
Where does the model look? CPA against class gradient maps
==========================================================

CPA uses the known key to point at the leaking samples. The class gradient
map asks the trained network the same question without the key: which
pooled time steps push the class score up. On synthetic traces the two
should agree.
"""

# %%
import tempfile
from pathlib import Path

import numpy as np

from deepsca.analysis import cgv_aggregate, cgv_feature_matrix, cgv_weight_map, cpa
from deepsca.engine import TrainingConfig, train
from deepsca.netspec import CbamConfig, NetworkConfig, build_attention_network
from deepsca.plotting import plot_weight_map
from deepsca.traces import (LeakageModelSpec, SynthConfig, apply_standardizer, compute_labels, fit_standardizer,
                            split_profiling_attack, synthesize)

out = Path(tempfile.mkdtemp(prefix="deepsca_cgv_"))
lm = LeakageModelSpec.sbox(1)

# two leaks this time, at samples 30 and 70
ts = synthesize(SynthConfig(n_traces=6000, n_samples=100, leak_positions=(30, 70), snr=1.0, seed=4))
prof, att = split_profiling_attack(ts, 5500, 500, seed=0)
st = fit_standardizer(prof)
prof_s, att_s = apply_standardizer(st, prof), apply_standardizer(st, att)

# %%
# Ground truth from CPA on the raw traces.
res = cpa(ts, lm)
top = np.argsort(-np.abs(res.known_key_row))[:2]
print("CPA: strongest samples", sorted(top.tolist()))

# %%
cfg = NetworkConfig(input_length=100, filters_per_block=(16,), fc_hidden_units=64, dropout_rates=(0.4, 0.4),
                    cbam=CbamConfig(reduction_ratio=16, spatial_kernel=11))
model = train(build_attention_network(cfg, seed=1), prof_s, compute_labels(prof_s, lm),
              TrainingConfig(epochs=10, batch_size=200, optimizer="adamw", learning_rate=3e-3, weight_decay=1.0))

# %%
# The map is built on the features after the last pooling: here 50 time steps
# (100 / 2) by 16 channels. Each coarse entry covers two input samples.
print("feature matrix A:", cgv_feature_matrix(model, att_s.samples[0]).shape)

single = cgv_weight_map(model, att_s.samples[0], int(compute_labels(att, lm)[0]))
print("one trace, true class: argmax at sample", int(single.expanded.argmax()))

# averaging over the attack traces (each with its predicted class) is far steadier
wm = cgv_aggregate(model, att_s)
peaks = np.argsort(-wm.coarse)[:2] * 2
print("aggregate map: top coarse steps start at samples", sorted(peaks.tolist()))

plot_weight_map(wm, out / "cgv.svg", trace=ts.samples.mean(axis=0), cpa=res)
wm.to_csv(out / "cgv.csv")
print("figure in", out / "cgv.svg")
