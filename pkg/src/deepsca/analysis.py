"""Leakage localization: CPA ground truth and Class Gradient Visualization."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
import torch

from .aes import hamming_weight
from .attack import candidate_label_table
from .traces import LeakageModelSpec, TraceSet


@dataclass
class CpaResult:
    correlation: np.ndarray  # 256 x D
    known_key: Optional[int]
    description: str
    constant_hypotheses: list = field(default_factory=list)

    @property
    def known_key_row(self) -> np.ndarray:
        if self.known_key is None:
            raise ValueError("trace set has no fixed key")
        return self.correlation[self.known_key]

    def to_csv(self, path) -> None:
        peak = np.abs(self.correlation).max(axis=0)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            header = ["t", "max_abs_corr"]
            if self.known_key is not None:
                header.insert(1, "known_key_corr")
            w.writerow(header)
            for t in range(self.correlation.shape[1]):
                row = [t, repr(float(peak[t]))]
                if self.known_key is not None:
                    row.insert(1, repr(float(self.correlation[self.known_key, t])))
                w.writerow(row)


def pearson_columns(h, x) -> np.ndarray:
    """Correlation of every column of ``h`` (N x K) with every column of ``x`` (N x D).

    Columns with zero variance yield 0.
    """
    h = np.asarray(h, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    hc = h - h.mean(axis=0)
    xc = x - x.mean(axis=0)
    hn = np.sqrt((hc ** 2).sum(axis=0))
    xn = np.sqrt((xc ** 2).sum(axis=0))
    denom = np.outer(hn, xn)
    num = hc.T @ xc
    with np.errstate(divide="ignore", invalid="ignore"):
        corr = np.where(denom > 0, num / np.where(denom > 0, denom, 1.0), 0.0)
    return np.clip(corr, -1.0, 1.0)


def cpa(ts: TraceSet, lm: LeakageModelSpec, power_model=hamming_weight) -> CpaResult:
    """Pearson correlation between modeled leakage per key hypothesis and each sample."""
    if ts.n_traces < 3:
        raise ValueError(f"CPA needs at least 3 traces, got {ts.n_traces}")
    hyp = np.asarray(power_model(candidate_label_table(lm, ts)), dtype=np.float64)
    constant = [int(k) for k in np.flatnonzero(hyp.std(axis=0) == 0)]
    corr = pearson_columns(hyp, ts.samples)
    known = int(ts.fixed_key[lm.key_byte]) if ts.has_fixed_key else None
    name = getattr(power_model, "__name__", "power_model")
    return CpaResult(corr, known, f"{name}({lm.describe()})", constant)


# ---------------------------------------------------------------------------
# Class Gradient Visualization


@dataclass
class WeightMap:
    coarse: np.ndarray
    expanded: np.ndarray
    target_class: Union[int, str]
    count: int = 1

    def normalized(self) -> np.ndarray:
        """Expanded map scaled to [0, 1] (plotting only)."""
        top = self.expanded.max()
        return self.expanded / top if top > 0 else self.expanded.copy()

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "weight"])
            for t, v in enumerate(self.expanded):
                w.writerow([t, repr(float(v))])


def _graph(model):
    return getattr(model, "graph", model)


def _as_batch(graph, traces):
    x = traces.samples if isinstance(traces, TraceSet) else np.asarray(traces)
    if x.ndim == 1:
        x = x[None, :]
    dtype = next(graph.parameters()).dtype
    return torch.tensor(np.asarray(x), dtype=dtype)


def expand_map(coarse, length) -> np.ndarray:
    """Nearest-neighbour upsampling: repeat each entry ceil(D / D') times, cut to D."""
    coarse = np.asarray(coarse)
    factor = math.ceil(length / coarse.shape[-1])
    return np.repeat(coarse, factor, axis=-1)[..., :length]


def cgv_feature_matrix(model, trace) -> np.ndarray:
    """Post-final-pooling features of one trace, time-major (D' x V)."""
    graph = _graph(model)
    if not hasattr(graph, "forward_taps"):
        raise ValueError("model does not expose the post_final_pooling tap")
    graph.eval()
    with torch.no_grad():
        feats = graph.forward_taps(_as_batch(graph, trace))["post_final_pooling"]
    return feats[0].T.numpy().copy()


def _features_and_gradients(graph, x, classes):
    graph.eval()
    with torch.no_grad():
        feats = graph.forward_taps(x)["post_final_pooling"]
    feats = feats.detach().requires_grad_(True)
    scores = graph.scores_from_features(feats)
    picked = scores[torch.arange(scores.shape[0]), torch.as_tensor(classes, dtype=torch.long)]
    # traces are independent in eval mode, so one backward pass gives every trace's gradient
    (alpha,) = torch.autograd.grad(picked.sum(), feats)
    return feats.detach(), alpha


def _coarse_maps(graph, x, classes):
    feats, alpha = _features_and_gradients(graph, x, classes)
    # (B, V, D'): sum over features V
    return torch.relu((feats * alpha).sum(dim=1)).numpy()


def class_gradients(model, trace, target_class):
    """Feature matrix A and d(score_c)/dA for one trace, both time-major (D' x V)."""
    graph = _graph(model)
    feats, alpha = _features_and_gradients(graph, _as_batch(graph, trace), [int(target_class)])
    return feats[0].T.numpy().copy(), alpha[0].T.numpy().copy()


def cgv_weight_map(model, trace, target_class: int) -> WeightMap:
    """Class-gradient weight map of one trace for pre-softmax class ``target_class``."""
    if not 0 <= int(target_class) < 256:
        raise ValueError(f"class must lie in [0, 255], got {target_class}")
    graph = _graph(model)
    x = _as_batch(graph, trace)
    coarse = _coarse_maps(graph, x, [int(target_class)])[0].astype(np.float64)
    return WeightMap(coarse, expand_map(coarse, x.shape[-1]), int(target_class), 1)


def cgv_aggregate(model, traces, class_policy="predicted", labels=None, batch_size=512) -> WeightMap:
    """Mean weight map over traces.

    ``class_policy``: ``"predicted"`` (argmax class per trace), ``"true"``
    (``labels`` per trace) or an integer class used for every trace.
    """
    graph = _graph(model)
    x = _as_batch(graph, traces)
    n = x.shape[0]
    if n == 0:
        raise ValueError("cannot aggregate an empty trace list")
    if class_policy == "true":
        if labels is None:
            raise ValueError("class_policy='true' needs labels")
        classes = np.asarray(labels, dtype=np.int64)
    elif class_policy == "predicted":
        graph.eval()
        with torch.no_grad():
            classes = np.concatenate(
                [graph(x[s:s + batch_size]).argmax(1).numpy() for s in range(0, n, batch_size)]
            )
    else:
        classes = np.full(n, int(class_policy), dtype=np.int64)
    total = None
    for s in range(0, n, batch_size):
        part = _coarse_maps(graph, x[s:s + batch_size], classes[s:s + batch_size]).astype(np.float64).sum(axis=0)
        total = part if total is None else total + part
    coarse = total / n
    policy = class_policy if isinstance(class_policy, str) else int(class_policy)
    return WeightMap(coarse, expand_map(coarse, x.shape[-1]), policy, n)
