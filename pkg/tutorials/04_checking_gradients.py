"""
Checking gradients by finite differences
========================================

Training and the class gradient maps both rely on reverse-mode gradients.
``gradient_check`` compares them with central differences in double
precision, on the loss and on a pre-softmax class score. A sigmoid with a
broken derivative makes a handy negative control.
"""

# %%
import numpy as np
import torch

from deepsca.engine import gradient_check
from deepsca.netspec import CbamConfig, NetworkConfig, build_attention_network

cfg = NetworkConfig(input_length=32, filters_per_block=(8,), fc_hidden_units=16,
                    cbam=CbamConfig(reduction_ratio=2, spatial_kernel=7))
graph = build_attention_network(cfg, seed=0)
rng = np.random.default_rng(0)
batch = (rng.normal(size=(4, 32)), rng.integers(0, 256, 4))

report = gradient_check(graph, batch)
print(f"max relative error {report.max_rel_error:.2e} over {report.n_coordinates} coordinates -> passed={report.passed}")
for group, err in sorted(report.group_errors.items(), key=lambda kv: -kv[1])[:5]:
    print(f"  {group:<45} {err:.2e}")


# %%
# Swap in a sigmoid whose backward pass forgets the (1 - s) factor.
class BadSigmoid(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        s = torch.sigmoid(x)
        ctx.save_for_backward(s)
        return s

    @staticmethod
    def backward(ctx, grad):
        (s,) = ctx.saved_tensors
        return grad * s


graph.set_gate(BadSigmoid.apply)
bad = gradient_check(graph, batch)
print(f"corrupted sigmoid: max relative error {bad.max_rel_error:.2e} -> passed={bad.passed}")
worst = max(bad.group_errors, key=bad.group_errors.get)
print("worst group:", worst)
