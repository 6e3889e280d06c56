"""Key-byte recovery: log-likelihood scores, key rank and average rank curves."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .traces import LeakageModelSpec, TraceSet, hypothesis_labels

EPS = 1e-40
THRESHOLDS = ("zero", "below1")


def candidate_label_table(lm: LeakageModelSpec, ts: TraceSet) -> np.ndarray:
    """N x 256 table: label of trace j under key-byte hypothesis k."""
    return hypothesis_labels(lm, ts.plaintexts, ts.ciphertexts, ts.masks, np.arange(256, dtype=np.uint8)[None, :])


def log_likelihood_table(probs, labels) -> np.ndarray:
    """Per-trace, per-hypothesis log(max(p, eps))."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim != 2 or labels.ndim != 2 or probs.shape[0] != labels.shape[0]:
        raise ValueError(f"shape mismatch: probs {probs.shape}, labels {labels.shape}")
    picked = np.take_along_axis(probs, labels.astype(np.intp), axis=1)
    return np.log(np.maximum(picked, EPS))


def log_likelihood_scores(probs, labels) -> np.ndarray:
    """Score g_k = sum_j log(max(p[j, label[j, k]], eps)) for every key candidate."""
    return log_likelihood_table(probs, labels).sum(axis=0)


def rank(g, true_key) -> float:
    """Midrank of the true key: candidates scoring higher, plus half the ties."""
    g = np.asarray(g, dtype=np.float64)
    target = g[int(true_key)]
    higher = np.count_nonzero(g > target)
    ties = np.count_nonzero(g == target) - 1
    return higher + ties / 2.0


def _ranks_rows(cum, true_key):
    target = cum[:, true_key][:, None]
    higher = np.count_nonzero(cum > target, axis=1)
    ties = np.count_nonzero(cum == target, axis=1) - 1
    return higher + ties / 2.0


@dataclass
class RankCurve:
    mean_rank: np.ndarray
    per_repeat: np.ndarray
    repeats: int
    seed: int

    @property
    def n_traces(self) -> np.ndarray:
        return np.arange(1, len(self.mean_rank) + 1)

    def percentile(self, q) -> np.ndarray:
        return np.percentile(self.per_repeat, q, axis=0)

    def to_csv(self, path) -> None:
        p10, p90 = self.percentile(10), self.percentile(90)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n", "mean_rank", "p10", "p90"])
            for n, m, lo, hi in zip(self.n_traces, self.mean_rank, p10, p90):
                w.writerow([int(n), repr(float(m)), repr(float(lo)), repr(float(hi))])


def rank_curve_from_probs(probs, labels, true_key, n_max, repeats=300, seed=0) -> RankCurve:
    """Average rank over ``repeats`` random orderings of the attack traces."""
    ll = log_likelihood_table(probs, labels)
    n_avail = ll.shape[0]
    if n_max > n_avail:
        raise ValueError(f"n_max={n_max} exceeds the {n_avail} available attack traces")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    rng = np.random.default_rng(seed)
    per_repeat = np.empty((repeats, n_max))
    for r in range(repeats):
        order = rng.permutation(n_avail)[:n_max]
        per_repeat[r] = _ranks_rows(np.cumsum(ll[order], axis=0), int(true_key))
    return RankCurve(mean_rank=per_repeat.mean(axis=0), per_repeat=per_repeat, repeats=repeats, seed=seed)


def average_rank_curve(model, attack_set: TraceSet, lm: LeakageModelSpec, n_max, repeats=300, seed=0) -> RankCurve:
    """Rank curve of the attack set's fixed key under ``model``.

    ``model`` is a trained model or a precomputed N x 256 probability matrix.
    """
    from .engine import predict_proba

    probs = model if isinstance(model, np.ndarray) else predict_proba(model, attack_set)
    true_key = int(attack_set.fixed_key[lm.key_byte])
    return rank_curve_from_probs(probs, candidate_label_table(lm, attack_set), true_key, n_max, repeats, seed)


def required_traces(curve, threshold="zero") -> Optional[int]:
    """Smallest n whose mean rank meets the threshold and stays there to the end.

    ``threshold``: ``"zero"`` (rank == 0) or ``"below1"`` (rank < 1).
    """
    values = np.asarray(curve.mean_rank if isinstance(curve, RankCurve) else curve, dtype=np.float64)
    if threshold == "zero":
        ok = values == 0.0
    elif threshold == "below1":
        ok = values < 1.0
    else:
        raise ValueError(f"threshold must be one of {THRESHOLDS}")
    if not ok.size or not ok[-1]:
        return None
    failing = np.flatnonzero(~ok)
    return int(failing[-1] + 2) if failing.size else 1
