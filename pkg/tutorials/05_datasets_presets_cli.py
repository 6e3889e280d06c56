"""
Datasets, presets and the command line
======================================

The public datasets come in different shapes; everything is brought into one
HDF5 container first. The full-scale settings per dataset are available as
presets, and the ``deepsca`` command drives the whole pipeline from JSON
configs, writing a ``run.json`` next to every result.
"""

# %%
import json
import tempfile
from pathlib import Path

import numpy as np

from deepsca.cli import main
from deepsca.presets import PRESET_NAMES, dataset_preset
from deepsca.traces import (SynthConfig, ascad_fields, load_ascad_hdf5, load_canonical, save_ascad_hdf5,
                            split_profiling_attack, synthesize)

work = Path(tempfile.mkdtemp(prefix="deepsca_cli_"))

# %%
# Presets: network, schedule, leakage model and split sizes per dataset.
for name in PRESET_NAMES:
    p = dataset_preset(name)
    print(f"{name:>7}: D={p.network.input_length:<5} filters={p.network.filters_per_block} "
          f"epochs={p.training.epochs} batch={p.training.batch_size} target={p.leakage_model.describe()}")

# %%
# The ASCAD group layout, written from synthetic data and read back.
ts = synthesize(SynthConfig(n_traces=1200, n_samples=40, leak_positions=(12,), snr=2.0, seed=3))
prof, att = split_profiling_attack(ts, 1000, 200, seed=0)
save_ascad_hdf5(work / "ascad_like.h5", prof, att)
print(ascad_fields(work / "ascad_like.h5", "Attack_traces"))
print("attack group:", load_ascad_hdf5(work / "ascad_like.h5", "Attack_traces").n_traces, "traces")

# %%
# The command line: synthesize, train from a JSON config, attack, explain.
assert main(["synth", "--n-traces", "3000", "--n-samples", "40", "--leak-positions", "12", "--snr", "2",
             "--seed", "7", "--out", str(work / "data")]) == 0

config = {
    "data": str(work / "data" / "traces.h5"),
    "network": {"filters_per_block": [8], "fc_hidden_units": 32,
                "cbam": {"reduction_ratio": 4, "spatial_kernel": 7}},
    "training": {"epochs": 6, "batch_size": 100, "optimizer": "adamw", "learning_rate": 3e-3, "weight_decay": 1.0},
    "leakage_model": {"kind": "SBOX", "byte_index": 1},
    "n_profiling": 2500,
    "n_attack": 500,
    "out": str(work / "model"),
}
(work / "train.json").write_text(json.dumps(config, indent=2))
assert main(["train", "--config", str(work / "train.json")]) == 0

assert main(["attack", "--model", str(work / "model" / "model.h5"), "--data", str(work / "model" / "attack_set.h5"),
             "--max-traces", "200", "--repeats", "50", "--out", str(work / "attack")]) == 0
assert main(["cgv", "--model", str(work / "model" / "model.h5"), "--data", str(work / "model" / "attack_set.h5"),
             "--out", str(work / "cgv")]) == 0

# %%
# ``run.json`` holds the resolved config, seeds and input hashes. Feeding it
# back with ``--config`` repeats the run.
record = json.loads((work / "model" / "run.json").read_text())
print(json.dumps({k: record[k] for k in ("command", "seeds", "tool_version")}, indent=2))
record["config"]["out"] = str(work / "model_again")
(work / "again.json").write_text(json.dumps(record))
assert main(["train", "--config", str(work / "again.json")]) == 0
same = (work / "model" / "history.csv").read_bytes() == (work / "model_again" / "history.csv").read_bytes()
print("re-run reproduces history.csv byte for byte:", same)
print("artifacts under", work)
