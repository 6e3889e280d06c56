"""Training, inference, gradient verification and checkpoints."""

from __future__ import annotations

import copy
import csv
import dataclasses
import hashlib
import json
import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Optional

import h5py
import numpy as np
import torch
import torch.nn.functional as F

from . import __version__
from .netspec import AttentionNetwork, NetworkConfig
from .traces import Standardizer, TraceSet

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "deepsca-checkpoint"
CHECKPOINT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch, batch, loss):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainingConfig:
    epochs: int = 60
    batch_size: int = 200
    optimizer: str = "adam"
    learning_rate: float = 1e-4
    betas: tuple = (0.9, 0.999)
    momentum: float = 0.0
    weight_decay: float = 0.0
    grad_clip: Optional[float] = None
    lr_schedule: str = "constant"
    seed: int = 0
    validation_fraction: float = 0.0
    deterministic: bool = True
    loss: str = "categorical_crossentropy"

    def validate(self):
        if int(self.epochs) < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if int(self.batch_size) < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer not in ("adam", "adamw", "sgd"):
            raise ValueError(f"optimizer must be 'adam', 'adamw' or 'sgd', got {self.optimizer!r}")
        if self.lr_schedule not in ("constant", "one_cycle"):
            raise ValueError(f"lr_schedule must be 'constant' or 'one_cycle', got {self.lr_schedule!r}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in [0, 1)")
        if self.loss != "categorical_crossentropy":
            raise ValueError("only categorical_crossentropy is supported")
        return self

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


@dataclass
class TrainedModel:
    graph: AttentionNetwork
    training: TrainingConfig
    history: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)
    standardizer: Optional[Standardizer] = None

    @property
    def config(self) -> NetworkConfig:
        return self.graph.config

    def preprocess(self, ts: TraceSet) -> TraceSet:
        """Apply the stored profiling standardizer, if any."""
        if self.standardizer is None:
            return ts
        return ts.with_samples(self.standardizer.transform(ts.samples))


def dataset_hash(samples, labels=None) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(samples, dtype=np.float32).tobytes())
    if labels is not None:
        h.update(np.ascontiguousarray(labels, dtype=np.int64).tobytes())
    return h.hexdigest()[:16]


@contextmanager
def determinism(enabled=True):
    """Single-threaded deterministic kernels for the duration of the block."""
    if not enabled:
        yield
        return
    prev_threads = torch.get_num_threads()
    prev_det = torch.are_deterministic_algorithms_enabled()
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.set_num_threads(prev_threads)
        torch.use_deterministic_algorithms(prev_det)


def _as_samples(traces):
    if isinstance(traces, TraceSet):
        return traces.samples
    return np.asarray(traces)


def _make_optimizer(params, cfg):
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.learning_rate, betas=tuple(cfg.betas), weight_decay=cfg.weight_decay)
    if cfg.optimizer == "adamw":
        return torch.optim.AdamW(params, lr=cfg.learning_rate, betas=tuple(cfg.betas), weight_decay=cfg.weight_decay)
    return torch.optim.SGD(params, lr=cfg.learning_rate, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def train(graph: AttentionNetwork, profiling, labels, cfg: TrainingConfig, provenance=None, progress=None) -> TrainedModel:
    """Minibatch training on categorical cross-entropy.

    The input graph is left untouched; a trained copy is returned. ``progress``
    is an optional callable receiving each epoch's history row.
    """
    cfg.validate()
    x_all = np.asarray(_as_samples(profiling), dtype=np.float32)
    y_all = np.asarray(labels, dtype=np.int64)
    if y_all.shape != (x_all.shape[0],):
        raise ValueError(f"labels: expected shape ({x_all.shape[0]},), got {y_all.shape}")
    n_classes = graph.config.n_classes
    if y_all.min() < 0 or y_all.max() >= n_classes:
        raise ValueError(f"labels must lie in [0, {n_classes - 1}]")
    if x_all.shape[1] != graph.config.input_length:
        raise ValueError(f"trace length {x_all.shape[1]} does not match input_length {graph.config.input_length}")

    gen = torch.Generator().manual_seed(int(cfg.seed))
    n = x_all.shape[0]
    n_val = int(round(cfg.validation_fraction * n))
    order = torch.randperm(n, generator=gen).numpy()
    val_idx, train_idx = order[:n_val], order[n_val:]
    x_train = torch.from_numpy(x_all[np.sort(train_idx)])
    y_train = torch.from_numpy(y_all[np.sort(train_idx)])

    model = copy.deepcopy(graph)
    history = []
    with determinism(cfg.deterministic), torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(cfg.seed))
        opt = _make_optimizer(model.parameters(), cfg)
        n_batches = math.ceil(x_train.shape[0] / int(cfg.batch_size))
        sched = None
        if cfg.lr_schedule == "one_cycle" and cfg.learning_rate > 0:
            sched = torch.optim.lr_scheduler.OneCycleLR(
                opt, max_lr=cfg.learning_rate, total_steps=int(cfg.epochs) * n_batches
            )
        for epoch in range(1, int(cfg.epochs) + 1):
            model.train()
            perm = torch.randperm(x_train.shape[0], generator=gen)
            total_loss, correct, seen = 0.0, 0, 0
            for b, start in enumerate(range(0, x_train.shape[0], int(cfg.batch_size))):
                idx = perm[start:start + int(cfg.batch_size)]
                xb, yb = x_train[idx], y_train[idx]
                opt.zero_grad()
                logits = model(xb)
                loss = F.cross_entropy(logits, yb)
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(epoch, b, float(loss.detach()))
                loss.backward()
                if cfg.grad_clip:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
                opt.step()
                if sched is not None:
                    sched.step()
                total_loss += float(loss.detach()) * len(idx)
                correct += int((logits.argmax(1) == yb).sum())
                seen += len(idx)
            row = {"epoch": epoch, "loss": total_loss / seen, "accuracy": correct / seen}
            if n_val:
                probs = predict_proba(model, x_all[np.sort(val_idx)])
                yv = y_all[np.sort(val_idx)]
                row["val_loss"] = float(-np.mean(np.log(np.maximum(probs[np.arange(len(yv)), yv], 1e-40))))
                row["val_accuracy"] = float(np.mean(probs.argmax(1) == yv))
            history.append(row)
            log.info("epoch %d loss %.4f acc %.4f", epoch, row["loss"], row["accuracy"])
            if progress is not None:
                progress(row)
    model.eval()
    prov = {
        "seed": int(cfg.seed),
        "dataset_hash": dataset_hash(x_all, y_all),
        "tool_version": __version__,
    }
    prov.update(provenance or {})
    return TrainedModel(graph=model, training=cfg, history=history, provenance=prov)


def predict_proba(model, traces, batch_size=1024) -> np.ndarray:
    """Softmax probabilities (N x n_classes, float64) in inference mode."""
    graph = model.graph if isinstance(model, TrainedModel) else model
    x = np.asarray(_as_samples(traces), dtype=np.float32)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != graph.config.input_length:
        raise ValueError(f"trace length {x.shape[1]} does not match input_length {graph.config.input_length}")
    dtype = next(graph.parameters()).dtype
    was_training = graph.training
    graph.eval()
    out = []
    try:
        with torch.no_grad():
            for start in range(0, x.shape[0], batch_size):
                logits = graph(torch.from_numpy(x[start:start + batch_size]).to(dtype))
                out.append(torch.softmax(logits.double(), dim=1).numpy())
    finally:
        graph.train(was_training)
    return np.concatenate(out, axis=0)


# ---------------------------------------------------------------------------
# gradient verification


@dataclass
class GradientCheckReport:
    max_rel_error: float
    group_errors: dict
    tolerance: float
    n_coordinates: int

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tolerance)


def _objectives(loss, labels, score_class):
    def loss_fn(logits):
        if loss == "squared":
            target = F.one_hot(labels, logits.shape[1]).to(logits.dtype)
            return 0.5 * ((logits - target) ** 2).sum(dim=1).mean()
        return F.cross_entropy(logits, labels)

    def score_fn(logits):
        return logits[:, score_class].sum()

    return {"loss": loss_fn, "score": score_fn}


def gradient_check(graph, batch, tolerance=1e-4, n_param_coords=200, n_input_coords=32, step=1e-5,
                   seed=0, loss="cross_entropy", score_class=None, floor=1e-7) -> GradientCheckReport:
    """Compare reverse-mode gradients with central finite differences in float64.

    Checked objectives are the batch loss and the summed pre-softmax score of
    ``score_class`` (default: label of the first trace). Errors are
    ``|g - fd| / max(|g|, |fd|, floor)`` and reported per parameter tensor
    and for the input.
    """
    x, labels = batch
    model = copy.deepcopy(graph).double().eval()
    x = torch.as_tensor(np.asarray(x), dtype=torch.float64).clone()
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.int64)
    if score_class is None:
        score_class = int(labels[0])
    objectives = _objectives(loss, labels, score_class)

    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    flat_sizes = [p.numel() for _, p in named]
    total = sum(flat_sizes)
    rng = np.random.default_rng(seed)
    offsets = np.cumsum([0] + flat_sizes)
    if total <= n_param_coords:
        picks = np.arange(total)
    else:
        # a couple of coordinates from every tensor so small ones (attention MLPs, biases) are never skipped
        seeded = np.concatenate([offsets[t] + rng.choice(size, min(size, 2), replace=False)
                                 for t, size in enumerate(flat_sizes)])
        rest = np.setdiff1d(np.arange(total), seeded)
        extra = max(0, n_param_coords - len(seeded))
        picks = np.sort(np.concatenate([seeded, rng.choice(rest, min(extra, len(rest)), replace=False)]))
    in_picks = rng.choice(x.numel(), min(n_input_coords, x.numel()), replace=False)

    errors = {}

    def record(group, a, num):
        denom = max(abs(a), abs(num), floor)
        err = abs(a - num) / denom if denom > 0 else 0.0
        errors[group] = max(errors.get(group, 0.0), err)

    for obj_name, fn in objectives.items():
        xg = x.clone().requires_grad_(True)
        value = fn(model(xg))
        grads = torch.autograd.grad(value, [p for _, p in named] + [xg], allow_unused=True)
        param_grads = [torch.zeros_like(p) if g is None else g for (_, p), g in zip(named, grads[:-1])]
        input_grad = grads[-1]

        def evaluate(inp):
            with torch.no_grad():
                return float(fn(model(inp)))

        for flat in picks:
            t = int(np.searchsorted(offsets, flat, side="right") - 1)
            name, p = named[t]
            local = int(flat - offsets[t])
            view = p.data.view(-1)
            orig = float(view[local])
            view[local] = orig + step
            up = evaluate(x)
            view[local] = orig - step
            down = evaluate(x)
            view[local] = orig
            record(f"{obj_name}:{name}", float(param_grads[t].view(-1)[local]), (up - down) / (2 * step))

        flat_x = x.view(-1)
        for i in in_picks:
            orig = float(flat_x[i])
            flat_x[i] = orig + step
            up = evaluate(x)
            flat_x[i] = orig - step
            down = evaluate(x)
            flat_x[i] = orig
            record(f"{obj_name}:input", float(input_grad.view(-1)[i]), (up - down) / (2 * step))

    return GradientCheckReport(
        max_rel_error=max(errors.values()) if errors else 0.0,
        group_errors=errors,
        tolerance=tolerance,
        n_coordinates=int(len(picks) + len(in_picks)),
    )


# ---------------------------------------------------------------------------
# persistence


def save_checkpoint(path, model: TrainedModel) -> None:
    with h5py.File(path, "w") as f:
        f.attrs["format"] = CHECKPOINT_FORMAT
        f.attrs["format_version"] = CHECKPOINT_VERSION
        f.attrs["network_config"] = model.config.to_json()
        f.attrs["training_config"] = json.dumps(model.training.to_dict(), sort_keys=True)
        f.attrs["history"] = json.dumps(model.history)
        f.attrs["provenance"] = json.dumps(model.provenance, sort_keys=True)
        if model.standardizer is not None:
            pre = f.create_group("preprocessing")
            pre.create_dataset("mean", data=model.standardizer.mean)
            pre.create_dataset("scale", data=model.standardizer.scale)
        params = f.create_group("parameters")
        for name, tensor in model.graph.state_dict().items():
            params.create_dataset(name, data=tensor.detach().cpu().numpy())


def load_checkpoint(path) -> TrainedModel:
    with h5py.File(path, "r") as f:
        if f.attrs.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} file")
        version = int(f.attrs["format_version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        cfg = NetworkConfig.from_dict(json.loads(f.attrs["network_config"]))
        training = TrainingConfig.from_dict(json.loads(f.attrs["training_config"]))
        history = json.loads(f.attrs["history"])
        provenance = json.loads(f.attrs["provenance"])
        state = {name: torch.from_numpy(ds[()]) for name, ds in f["parameters"].items()}
        standardizer = None
        if "preprocessing" in f:
            standardizer = Standardizer(f["preprocessing/mean"][()], f["preprocessing/scale"][()])
    graph = AttentionNetwork(cfg)
    graph.load_state_dict(state)
    graph.eval()
    return TrainedModel(graph=graph, training=training, history=history, provenance=provenance,
                        standardizer=standardizer)


def write_history_csv(path, history) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "accuracy"])
        for row in history:
            writer.writerow([row["epoch"], repr(float(row["loss"])), repr(float(row["accuracy"]))])


def uniform_cross_entropy(n_classes=256) -> float:
    return math.log(n_classes)
