"""Attention network: residual 1-D CNN with a CBAM block.

Layout of the network for ``n3`` residual blocks::

    input (B, D) -> (B, 1, D)
    n3 x [ n2 x (conv -> ReLU)  +  shortcut conv ] -> ReLU -> [CBAM] -> avg-pool
    flatten -> n1 x (dense -> ReLU [-> dropout]) -> dense(256)   (pre-softmax)

CBAM (channel attention, then spatial attention) sits in a single residual
block, after the shortcut merge and before pooling.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

log = logging.getLogger(__name__)


@dataclass
class CbamConfig:
    enabled: bool = True
    residual_block_index: int = 0
    reduction_ratio: int = 16
    spatial_kernel: int = 11


@dataclass
class NetworkConfig:
    input_length: int
    filters_per_block: tuple = (128, 256, 512)
    n1: int = 2
    n2: int = 2
    conv_kernel: int = 11
    conv_stride: int = 1
    pool_kind: str = "average"
    pool_size: int = 2
    pool_stride: int = 2
    activation: str = "relu"
    fc_hidden_units: int = 1024
    dropout_rates: tuple = ()
    n_classes: int = 256
    cbam: CbamConfig = field(default_factory=CbamConfig)

    def __post_init__(self):
        self.filters_per_block = tuple(int(f) for f in self.filters_per_block)
        self.dropout_rates = tuple(float(r) for r in self.dropout_rates)
        if isinstance(self.cbam, dict):
            self.cbam = CbamConfig(**self.cbam)

    @property
    def n3(self) -> int:
        return len(self.filters_per_block)

    def validate(self):
        if self.input_length < 1:
            raise ValueError("input_length must be >= 1")
        if self.n1 < 1 or self.n2 < 1 or self.n3 < 1:
            raise ValueError("n1, n2 and the number of residual blocks must be >= 1")
        if any(f < 1 for f in self.filters_per_block):
            raise ValueError("filters_per_block entries must be >= 1")
        if self.conv_stride != 1:
            raise ValueError("conv_stride must be 1 (shortcut addition needs equal lengths)")
        if self.pool_kind != "average":
            raise ValueError("pool_kind must be 'average'")
        if self.activation != "relu":
            raise ValueError("activation must be 'relu'")
        if self.dropout_rates and len(self.dropout_rates) != self.n1:
            raise ValueError(f"dropout_rates must be empty or have n1={self.n1} entries")
        if any(not 0.0 <= r < 1.0 for r in self.dropout_rates):
            raise ValueError("dropout rates must lie in [0, 1)")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        cb = self.cbam
        if cb.enabled:
            if not 0 <= cb.residual_block_index < self.n3:
                raise ValueError(f"cbam.residual_block_index must be in [0, {self.n3})")
            channels = self.filters_per_block[cb.residual_block_index]
            if cb.reduction_ratio < 1 or channels % cb.reduction_ratio:
                raise ValueError(
                    f"cbam.reduction_ratio={cb.reduction_ratio} must divide the hosting block's {channels} channels"
                )
            if cb.spatial_kernel % 2 == 0:
                raise ValueError("cbam.spatial_kernel must be odd")
            length = self.block_lengths()[cb.residual_block_index]
            if cb.spatial_kernel > length:
                raise ValueError(f"cbam.spatial_kernel={cb.spatial_kernel} wider than the feature length {length}")
        return self

    def nonstandard_fields(self) -> list:
        """Fields overridden away from the reference attention network."""
        flagged = []
        if self.n1 != 2:
            flagged.append("n1")
        if self.n2 != 2:
            flagged.append("n2")
        if self.conv_kernel != 11:
            flagged.append("conv_kernel")
        if self.pool_size != 2 or self.pool_stride != 2:
            flagged.append("pool")
        return flagged

    def block_lengths(self) -> list:
        """Time length entering each residual block, then the final pooled length."""
        lengths = [self.input_length]
        for _ in range(self.n3):
            lengths.append(pooled_length(lengths[-1], self.pool_size, self.pool_stride))
        return lengths

    @property
    def final_length(self) -> int:
        return self.block_lengths()[-1]

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["filters_per_block"] = list(self.filters_per_block)
        d["dropout_rates"] = list(self.dropout_rates)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d.pop("n3", None)
        if "cbam" in d:
            d["cbam"] = CbamConfig(**d["cbam"])
        return cls(**d)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def pooled_length(length, size=2, stride=2):
    return max(1, math.ceil((length - size) / stride) + 1) if length >= size else 1


# ---------------------------------------------------------------------------
# functional forms (operate on (B, C, T) or (C, T) tensors)


def _batched(x):
    return (x.unsqueeze(0), True) if x.dim() == 2 else (x, False)


def channel_attention_forward(feat, params, gate=torch.sigmoid):
    """Scale each channel by sigmoid(MLP(GAP(F)) + MLP(GMP(F))).

    ``params`` holds the shared MLP: ``w1`` (C/r, C), ``b1``, ``w2`` (C, C/r), ``b2``.
    """
    x, squeeze = _batched(feat)
    c = x.shape[1]
    if params["w1"].shape[1] != c or params["w2"].shape[0] != c:
        raise ValueError(f"channel attention params expect {params['w1'].shape[1]} channels, got {c}")

    def mlp(v):
        h = F.relu(F.linear(v, params["w1"], params["b1"]))
        return F.linear(h, params["w2"], params["b2"])

    weights = gate(mlp(x.mean(dim=2)) + mlp(x.amax(dim=2)))
    out = x * weights.unsqueeze(2)
    return out.squeeze(0) if squeeze else out


def spatial_attention_forward(feat, params, gate=torch.sigmoid):
    """Scale each timestep by sigmoid(conv([mean_c F; max_c F])).

    ``params``: ``weight`` (1, 2, k) with odd k, ``bias`` (1,).
    """
    x, squeeze = _batched(feat)
    k = params["weight"].shape[-1]
    if k > x.shape[2]:
        raise ValueError(f"spatial kernel {k} wider than feature length {x.shape[2]}")
    pooled = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
    weights = gate(F.conv1d(pooled, params["weight"], params["bias"], padding=k // 2))
    out = x * weights
    return out.squeeze(0) if squeeze else out


def residual_block_forward(x, params, pool_size=2, pool_stride=2, gate=torch.sigmoid):
    """pool(CBAM?(ReLU(branch(x) + shortcut(x)))) for one residual block.

    ``params``: ``convs`` list of (weight, bias) applied as conv -> ReLU;
    ``shortcut`` (weight, bias) width-1 conv; optional ``channel`` and
    ``spatial`` attention params.
    """
    x, squeeze = _batched(x)
    h = x
    for w, b in params["convs"]:
        h = F.relu(F.conv1d(h, w, b, padding="same"))
    sw, sb = params["shortcut"]
    shortcut = F.conv1d(x, sw, sb)
    if shortcut.shape != h.shape:
        raise ValueError(f"shortcut output {tuple(shortcut.shape)} does not match branch {tuple(h.shape)}")
    h = F.relu(h + shortcut)
    if params.get("channel") is not None:
        h = channel_attention_forward(h, params["channel"], gate)
        h = spatial_attention_forward(h, params["spatial"], gate)
    out = F.avg_pool1d(h, pool_size, pool_stride, ceil_mode=True)
    return out.squeeze(0) if squeeze else out


# ---------------------------------------------------------------------------
# modules


class ChannelAttention(nn.Module):
    def __init__(self, channels, reduction_ratio):
        super().__init__()
        hidden = channels // reduction_ratio
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)
        self.gate = torch.sigmoid

    def params(self):
        return {"w1": self.fc1.weight, "b1": self.fc1.bias, "w2": self.fc2.weight, "b2": self.fc2.bias}

    def forward(self, x):
        return channel_attention_forward(x, self.params(), self.gate)


class SpatialAttention(nn.Module):
    def __init__(self, kernel_size):
        super().__init__()
        self.conv = nn.Conv1d(2, 1, kernel_size, padding=kernel_size // 2)
        self.gate = torch.sigmoid

    def params(self):
        return {"weight": self.conv.weight, "bias": self.conv.bias}

    def forward(self, x):
        return spatial_attention_forward(x, self.params(), self.gate)


class ResidualBlock(nn.Module):
    def __init__(self, in_channels, out_channels, n_basic, kernel, pool_size, pool_stride, cbam=None):
        super().__init__()
        self.convs = nn.ModuleList(
            nn.Conv1d(in_channels if i == 0 else out_channels, out_channels, kernel, padding="same")
            for i in range(n_basic)
        )
        self.shortcut = nn.Conv1d(in_channels, out_channels, 1)
        self.channel_attention = None
        self.spatial_attention = None
        if cbam is not None:
            self.channel_attention = ChannelAttention(out_channels, cbam.reduction_ratio)
            self.spatial_attention = SpatialAttention(cbam.spatial_kernel)
        self.pool_size = pool_size
        self.pool_stride = pool_stride

    @property
    def has_cbam(self):
        return self.channel_attention is not None

    def params(self):
        p = {
            "convs": [(c.weight, c.bias) for c in self.convs],
            "shortcut": (self.shortcut.weight, self.shortcut.bias),
        }
        if self.has_cbam:
            p["channel"] = self.channel_attention.params()
            p["spatial"] = self.spatial_attention.params()
        return p

    def forward(self, x):
        h = x
        for conv in self.convs:
            h = F.relu(conv(h))
        h = F.relu(h + self.shortcut(x))
        if self.has_cbam:
            h = self.spatial_attention(self.channel_attention(h))
        return F.avg_pool1d(h, self.pool_size, self.pool_stride, ceil_mode=True)


class AttentionNetwork(nn.Module):
    """The built model graph. ``forward`` returns pre-softmax class scores.

    Taps: ``post_final_pooling`` is the (B, V, D') feature tensor after the
    last residual block; ``pre_softmax`` is the (B, n_classes) score matrix.
    """

    TAPS = ("post_final_pooling", "pre_softmax")

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        cfg.validate()
        self.config = cfg
        blocks = []
        in_ch = 1
        for idx, out_ch in enumerate(cfg.filters_per_block):
            use_cbam = cfg.cbam.enabled and idx == cfg.cbam.residual_block_index
            blocks.append(
                ResidualBlock(in_ch, out_ch, cfg.n2, cfg.conv_kernel, cfg.pool_size, cfg.pool_stride,
                              cfg.cbam if use_cbam else None)
            )
            in_ch = out_ch
        self.blocks = nn.ModuleList(blocks)
        width = in_ch * cfg.final_length
        hidden = []
        for _ in range(cfg.n1):
            hidden.append(nn.Linear(width, cfg.fc_hidden_units))
            width = cfg.fc_hidden_units
        self.hidden = nn.ModuleList(hidden)
        self.dropouts = nn.ModuleList(nn.Dropout(r) for r in cfg.dropout_rates)
        self.output = nn.Linear(width, cfg.n_classes)

    def _as_input(self, x):
        if x.dim() == 2:
            x = x.unsqueeze(1)
        if x.shape[-1] != self.config.input_length:
            raise ValueError(f"trace length {x.shape[-1]} does not match model input_length {self.config.input_length}")
        return x

    def forward_taps(self, x) -> dict:
        h = self._as_input(x)
        for block in self.blocks:
            h = block(h)
        taps = {"post_final_pooling": h}
        z = h.flatten(1)
        for i, layer in enumerate(self.hidden):
            z = F.relu(layer(z))
            if self.dropouts:
                z = self.dropouts[i](z)
        taps["pre_softmax"] = self.output(z)
        return taps

    def scores_from_features(self, feats):
        """Pre-softmax scores computed from a post-final-pooling tensor."""
        z = feats.flatten(1)
        for i, layer in enumerate(self.hidden):
            z = F.relu(layer(z))
            if self.dropouts:
                z = self.dropouts[i](z)
        return self.output(z)

    def forward(self, x):
        return self.forward_taps(x)["pre_softmax"]

    def cbam_modules(self):
        return [m for b in self.blocks if b.has_cbam for m in (b.channel_attention, b.spatial_attention)]

    def set_gate(self, gate):
        """Replace the sigmoid used by every attention module."""
        for m in self.cbam_modules():
            m.gate = gate

    def layer_descriptors(self) -> list:
        cfg = self.config
        lengths = cfg.block_lengths()
        layers = []
        in_ch = 1
        for idx, block in enumerate(self.blocks):
            ch = cfg.filters_per_block[idx]
            t = lengths[idx]
            for j in range(cfg.n2):
                layers.append({"name": f"block{idx}.conv{j}", "kind": "conv1d+relu",
                               "kernel": cfg.conv_kernel, "out_shape": (ch, t)})
            layers.append({"name": f"block{idx}.shortcut", "kind": "conv1d", "kernel": 1,
                           "in_channels": in_ch, "out_shape": (ch, t)})
            layers.append({"name": f"block{idx}.merge", "kind": "add+relu", "out_shape": (ch, t)})
            if block.has_cbam:
                layers.append({"name": f"block{idx}.channel_attention", "kind": "cbam-channel",
                               "reduction_ratio": cfg.cbam.reduction_ratio, "out_shape": (ch, t)})
                layers.append({"name": f"block{idx}.spatial_attention", "kind": "cbam-spatial",
                               "kernel": cfg.cbam.spatial_kernel, "out_shape": (ch, t)})
            layers.append({"name": f"block{idx}.pool", "kind": "avgpool1d", "out_shape": (ch, lengths[idx + 1])})
            in_ch = ch
        layers[-1]["tap"] = "post_final_pooling"
        width = in_ch * lengths[-1]
        layers.append({"name": "flatten", "kind": "flatten", "out_shape": (width,)})
        for i in range(cfg.n1):
            layers.append({"name": f"fc{i}", "kind": "dense+relu", "out_shape": (cfg.fc_hidden_units,)})
            if cfg.dropout_rates:
                layers.append({"name": f"dropout{i}", "kind": "dropout", "rate": cfg.dropout_rates[i],
                               "out_shape": (cfg.fc_hidden_units,)})
        layers.append({"name": "output", "kind": "dense", "out_shape": (cfg.n_classes,), "tap": "pre_softmax"})
        layers.append({"name": "softmax", "kind": "softmax", "out_shape": (cfg.n_classes,)})
        return layers


def _glorot_(weight, generator):
    if weight.dim() == 3:
        receptive = weight.shape[2]
        fan_in, fan_out = weight.shape[1] * receptive, weight.shape[0] * receptive
    else:
        fan_out, fan_in = weight.shape
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    with torch.no_grad():
        weight.copy_(torch.rand(weight.shape, generator=generator, dtype=weight.dtype) * 2 * bound - bound)


def build_attention_network(cfg: NetworkConfig, seed=0) -> AttentionNetwork:
    """Construct the network with seeded Glorot-uniform weights and zero biases."""
    flagged = cfg.nonstandard_fields()
    if flagged:
        log.warning("network config departs from the reference architecture: %s", ", ".join(flagged))
    net = AttentionNetwork(cfg)
    gen = torch.Generator().manual_seed(int(seed))
    for name, p in net.named_parameters():
        if name.endswith("bias"):
            with torch.no_grad():
                p.zero_()
        else:
            _glorot_(p, gen)
    # identity shortcut when the channel count is unchanged
    for block in net.blocks:
        sc = block.shortcut
        if sc.in_channels == sc.out_channels:
            with torch.no_grad():
                sc.weight.copy_(torch.eye(sc.out_channels).unsqueeze(2))
    return net
