"""Trace sets, leakage models, synthetic traces and dataset containers."""

from __future__ import annotations

import dataclasses
import enum
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import h5py
import numpy as np

from .aes import HW_TABLE, INV_SBOX, SBOX, inv_shiftrows_partner

SCHEMA_VERSION = 1


class DatasetError(ValueError):
    """A trace container or TraceSet violates its schema."""


def _byte_array(name, value, ndim):
    arr = np.asarray(value)
    if arr.ndim != ndim:
        raise DatasetError(f"{name}: expected {ndim}-d array, got shape {arr.shape}")
    if arr.size and (arr.min() < 0 or arr.max() > 255):
        raise DatasetError(f"{name}: byte values outside [0, 255]")
    return arr.astype(np.uint8)


def _frozen(arr):
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class TraceSet:
    """Aligned N x D measurements with per-trace AES metadata.

    ``key`` is either one 16-byte key shared by all traces or an N x 16
    array of per-trace keys (typical for profiling captures).
    """

    samples: np.ndarray
    plaintexts: np.ndarray
    key: np.ndarray
    ciphertexts: Optional[np.ndarray] = None
    masks: Optional[np.ndarray] = None
    source_tag: str = ""

    def __post_init__(self):
        samples = np.asarray(self.samples)
        if samples.ndim != 2:
            raise DatasetError(f"samples: expected N x D matrix, got shape {samples.shape}")
        n, d = samples.shape
        if n < 1 or d < 1:
            raise DatasetError(f"samples: need N >= 1 and D >= 1, got {samples.shape}")
        if not np.issubdtype(samples.dtype, np.floating):
            samples = samples.astype(np.float32)
        object.__setattr__(self, "samples", _frozen(samples))

        for name in ("plaintexts", "ciphertexts", "masks"):
            value = getattr(self, name)
            if value is None:
                if name == "plaintexts":
                    raise DatasetError("plaintexts: field is required")
                continue
            arr = _byte_array(name, value, 2)
            if arr.shape != (n, 16):
                raise DatasetError(f"{name}: expected shape ({n}, 16), got {arr.shape}")
            object.__setattr__(self, name, _frozen(arr))

        key = np.asarray(self.key)
        key = _byte_array("key", key, key.ndim)
        if key.shape != (16,) and key.shape != (n, 16):
            raise DatasetError(f"key: expected shape (16,) or ({n}, 16), got {key.shape}")
        object.__setattr__(self, "key", _frozen(key))

    @property
    def n_traces(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def has_fixed_key(self) -> bool:
        if self.key.ndim == 1:
            return True
        return bool(np.all(self.key == self.key[0]))

    @property
    def fixed_key(self) -> np.ndarray:
        """The single secret key k*; raises if keys vary across traces."""
        if not self.has_fixed_key:
            raise DatasetError("key: trace set does not have a single fixed key")
        return self.key if self.key.ndim == 1 else self.key[0]

    def key_matrix(self) -> np.ndarray:
        if self.key.ndim == 1:
            return np.broadcast_to(self.key, (self.n_traces, 16))
        return self.key

    def subset(self, idx) -> "TraceSet":
        idx = np.asarray(idx)
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return TraceSet(
            samples=self.samples[idx],
            plaintexts=self.plaintexts[idx],
            key=self.key if self.key.ndim == 1 else self.key[idx],
            ciphertexts=pick(self.ciphertexts),
            masks=pick(self.masks),
            source_tag=self.source_tag,
        )

    def with_samples(self, samples) -> "TraceSet":
        return dataclasses.replace(self, samples=samples)

    def equals(self, other: "TraceSet") -> bool:
        """Field-by-field equality (arrays compared exactly)."""
        for name in ("samples", "plaintexts", "key", "ciphertexts", "masks"):
            a, b = getattr(self, name), getattr(other, name)
            if (a is None) != (b is None):
                return False
            if a is not None and (a.shape != b.shape or not np.array_equal(a, b)):
                return False
        return self.source_tag == other.source_tag


# ---------------------------------------------------------------------------
# leakage models


class LeakageKind(str, enum.Enum):
    SBOX_XOR_MASK = "SBOX_XOR_MASK"
    SBOX = "SBOX"
    LAST_ROUND_HD = "LAST_ROUND_HD"


@dataclass(frozen=True)
class LeakageModelSpec:
    """Labeling rule for the targeted intermediate.

    All byte indices count from 1, like the AES_HD pair (12, 8) and the
    ASCAD target byte 3. ``mask_byte`` selects which mask column enters
    the SBOX_XOR_MASK label and defaults to ``byte_index``.
    """

    kind: LeakageKind
    byte_index: int = 1
    i1: Optional[int] = None
    i2: Optional[int] = None
    mask_byte: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", LeakageKind(self.kind))
        if self.kind is LeakageKind.LAST_ROUND_HD:
            i1 = 12 if self.i1 is None else int(self.i1)
            expected = inv_shiftrows_partner(i1)
            i2 = expected if self.i2 is None else int(self.i2)
            if i2 != expected:
                raise ValueError(f"i2 must be the inverse-ShiftRows partner of i1={i1} ({expected}), got {i2}")
            object.__setattr__(self, "i1", i1)
            object.__setattr__(self, "i2", i2)
        else:
            if not 1 <= int(self.byte_index) <= 16:
                raise ValueError(f"byte_index must be in [1, 16], got {self.byte_index}")
            object.__setattr__(self, "byte_index", int(self.byte_index))
        if self.mask_byte is not None and not 1 <= int(self.mask_byte) <= 16:
            raise ValueError(f"mask_byte must be in [1, 16], got {self.mask_byte}")

    @classmethod
    def sbox(cls, byte_index=1):
        return cls(LeakageKind.SBOX, byte_index=byte_index)

    @classmethod
    def sbox_xor_mask(cls, byte_index=1, mask_byte=None):
        return cls(LeakageKind.SBOX_XOR_MASK, byte_index=byte_index, mask_byte=mask_byte)

    @classmethod
    def last_round_hd(cls, i1=12, i2=None):
        return cls(LeakageKind.LAST_ROUND_HD, i1=i1, i2=i2)

    @property
    def key_byte(self) -> int:
        """0-based index of the key byte this model depends on."""
        if self.kind is LeakageKind.LAST_ROUND_HD:
            return self.i1 - 1
        return self.byte_index - 1

    def to_dict(self):
        d = {"kind": self.kind.value}
        if self.kind is LeakageKind.LAST_ROUND_HD:
            d.update(i1=self.i1, i2=self.i2)
        else:
            d["byte_index"] = self.byte_index
            if self.mask_byte is not None:
                d["mask_byte"] = self.mask_byte
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def describe(self) -> str:
        if self.kind is LeakageKind.SBOX:
            return f"Sbox[P{self.byte_index} ^ k]"
        if self.kind is LeakageKind.SBOX_XOR_MASK:
            m = self.mask_byte or self.byte_index
            return f"Sbox[P{self.byte_index} ^ k] ^ M{m}"
        return f"InvSbox[C{self.i1} ^ k] ^ C{self.i2}"


def _require(ts_field, name):
    if ts_field is None:
        raise DatasetError(f"{name}: metadata field required by the leakage model is missing")
    return ts_field


def hypothesis_labels(lm: LeakageModelSpec, plaintexts=None, ciphertexts=None, masks=None, keys=None):
    """Labels under ``lm`` for each trace and key-byte value.

    ``keys`` broadcasts against the trace axis: pass an (N,) vector for one
    key byte per trace, or ``np.arange(256)[None, :]`` for the full N x 256
    hypothesis table.
    """
    keys = np.asarray(keys, dtype=np.uint8)
    if lm.kind is LeakageKind.LAST_ROUND_HD:
        c = _require(ciphertexts, "ciphertexts")
        c1 = c[:, lm.i1 - 1]
        c2 = c[:, lm.i2 - 1]
        if keys.ndim == 2:
            c1, c2 = c1[:, None], c2[:, None]
        return INV_SBOX[c1 ^ keys] ^ c2
    p = _require(plaintexts, "plaintexts")[:, lm.byte_index - 1]
    if keys.ndim == 2:
        p = p[:, None]
    out = SBOX[p ^ keys]
    if lm.kind is LeakageKind.SBOX_XOR_MASK:
        m = _require(masks, "masks")[:, (lm.mask_byte or lm.byte_index) - 1]
        out = out ^ (m[:, None] if keys.ndim == 2 else m)
    return out


def compute_labels(ts: TraceSet, lm: LeakageModelSpec, key=None) -> np.ndarray:
    """Per-trace class labels in [0, 255] under the trace set's key (or ``key``)."""
    if key is None:
        key_bytes = ts.key_matrix()[:, lm.key_byte]
    else:
        key = np.asarray(key, dtype=np.uint8)
        key_bytes = key[lm.key_byte] if key.ndim == 1 else key[:, lm.key_byte]
        key_bytes = np.broadcast_to(key_bytes, (ts.n_traces,))
    return hypothesis_labels(lm, ts.plaintexts, ts.ciphertexts, ts.masks, key_bytes)


# ---------------------------------------------------------------------------
# canonical container


def save_canonical(ts: TraceSet, path) -> None:
    with h5py.File(path, "w") as f:
        f.attrs["schema_version"] = SCHEMA_VERSION
        f.attrs["source_tag"] = ts.source_tag
        f.create_dataset("samples", data=ts.samples.astype(np.float32))
        f.create_dataset("plaintexts", data=ts.plaintexts)
        f.create_dataset("key", data=ts.key)
        if ts.ciphertexts is not None:
            f.create_dataset("ciphertexts", data=ts.ciphertexts)
        if ts.masks is not None:
            f.create_dataset("masks", data=ts.masks)


def load_canonical(path) -> TraceSet:
    with h5py.File(path, "r") as f:
        version = f.attrs.get("schema_version")
        if version is None or int(version) != SCHEMA_VERSION:
            raise DatasetError(f"schema_version: expected {SCHEMA_VERSION}, got {version}")
        fields = {}
        for name in ("samples", "plaintexts", "key"):
            if name not in f:
                raise DatasetError(f"{name}: dataset missing from container {path}")
            fields[name] = f[name][()]
        for name in ("ciphertexts", "masks"):
            fields[name] = f[name][()] if name in f else None
        tag = f.attrs.get("source_tag", "")
        if isinstance(tag, bytes):
            tag = tag.decode()
    samples = fields["samples"]
    if samples.ndim == 2 and fields["plaintexts"].shape[0] != samples.shape[0]:
        raise DatasetError(
            f"plaintexts: shape mismatch, {fields['plaintexts'].shape[0]} rows vs {samples.shape[0]} traces"
        )
    return TraceSet(source_tag=str(tag), **fields)


# ---------------------------------------------------------------------------
# ASCAD layout

ASCAD_GROUPS = {"profiling": "Profiling_traces", "attack": "Attack_traces"}
_FIELD_ALIASES = {
    "plaintexts": ("plaintext", "plaintexts", "pt", "plain"),
    "ciphertexts": ("ciphertext", "ciphertexts", "ct", "cipher"),
    "masks": ("masks", "mask"),
    "key": ("key", "keys", "k"),
}


def ascad_fields(path, group_name) -> dict:
    """Report datasets and metadata field names found in an ASCAD-style group."""
    group_name = ASCAD_GROUPS.get(group_name, group_name)
    with h5py.File(path, "r") as f:
        if group_name not in f:
            raise DatasetError(f"group {group_name!r} not found; available: {sorted(f.keys())}")
        g = f[group_name]
        meta = g["metadata"].dtype.names if "metadata" in g else ()
        return {"datasets": sorted(g.keys()), "metadata_fields": list(meta or ())}


def _match_field(names, wanted):
    lower = {n.lower(): n for n in names}
    for alias in _FIELD_ALIASES[wanted]:
        if alias in lower:
            return lower[alias]
    return None


def load_ascad_hdf5(path, group_name) -> TraceSet:
    """Read one group (``Profiling_traces``/``Attack_traces``) of an ASCAD file.

    Metadata field names are matched case-insensitively against common
    spellings. An 18-column mask field (ASCAD v1: r_in, r_out, then 16 byte
    masks) keeps only the 16 per-byte masks.
    """
    group_name = ASCAD_GROUPS.get(group_name, group_name)
    with h5py.File(path, "r") as f:
        if group_name not in f:
            raise DatasetError(f"group {group_name!r} not found; available: {sorted(f.keys())}")
        g = f[group_name]
        if "traces" not in g:
            raise DatasetError(f"traces: dataset missing in group {group_name!r}")
        if "metadata" not in g:
            raise DatasetError(f"metadata: dataset missing in group {group_name!r}")
        samples = g["traces"][()]
        meta = g["metadata"][()]
    names = meta.dtype.names or ()
    found = {}
    for wanted in _FIELD_ALIASES:
        col = _match_field(names, wanted)
        found[wanted] = None if col is None else np.asarray(meta[col])
    for required in ("plaintexts", "key"):
        if found[required] is None:
            raise DatasetError(f"{required}: no matching metadata field; available fields: {list(names)}")
    masks = found["masks"]
    tag = f"ascad:{group_name}"
    if masks is not None and masks.shape[1] == 18:
        masks = masks[:, 2:]
        tag += ":masks[2:]"
    elif masks is not None and masks.shape[1] != 16:
        masks = None
        tag += ":masks-dropped"
    key = found["key"]
    if key.ndim == 2 and np.all(key == key[0]):
        key = key[0]
    return TraceSet(
        samples=samples.astype(np.float32) if not np.issubdtype(samples.dtype, np.floating) else samples,
        plaintexts=found["plaintexts"],
        ciphertexts=found["ciphertexts"],
        masks=masks,
        key=key,
        source_tag=tag,
    )


def save_ascad_hdf5(path, profiling: TraceSet, attack: TraceSet, labels_model: Optional[LeakageModelSpec] = None):
    """Write two trace sets in the ASCAD group layout."""
    with h5py.File(path, "w") as f:
        for group_name, ts in (("Profiling_traces", profiling), ("Attack_traces", attack)):
            g = f.create_group(group_name)
            g.create_dataset("traces", data=ts.samples)
            fields = [("plaintext", np.uint8, (16,)), ("key", np.uint8, (16,))]
            if ts.ciphertexts is not None:
                fields.append(("ciphertext", np.uint8, (16,)))
            if ts.masks is not None:
                fields.append(("masks", np.uint8, (16,)))
            meta = np.zeros(ts.n_traces, dtype=fields)
            meta["plaintext"] = ts.plaintexts
            meta["key"] = ts.key_matrix()
            if ts.ciphertexts is not None:
                meta["ciphertext"] = ts.ciphertexts
            if ts.masks is not None:
                meta["masks"] = ts.masks
            g.create_dataset("metadata", data=meta)
            if labels_model is not None:
                g.create_dataset("labels", data=compute_labels(ts, labels_model))


# ---------------------------------------------------------------------------
# splitting and normalization


def split_profiling_attack(ts: TraceSet, n_profiling: int, n_attack: int, seed=0):
    """Random disjoint profiling/attack subsets, reproducible under ``seed``."""
    if n_profiling < 1 or n_attack < 1:
        raise ValueError("n_profiling and n_attack must be >= 1")
    if n_profiling + n_attack > ts.n_traces:
        raise ValueError(
            f"insufficient traces: need {n_profiling} + {n_attack}, have {ts.n_traces}"
        )
    order = np.random.default_rng(seed).permutation(ts.n_traces)
    return ts.subset(np.sort(order[:n_profiling])), ts.subset(np.sort(order[n_profiling:n_profiling + n_attack]))


@dataclass(frozen=True, eq=False)
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    def transform(self, samples):
        return (np.asarray(samples, dtype=np.float64) - self.mean) / self.scale

    def inverse(self, samples):
        return np.asarray(samples, dtype=np.float64) * self.scale + self.mean


def fit_standardizer(profiling: TraceSet) -> Standardizer:
    """Per-column mean/std from profiling data; constant columns keep scale 1."""
    if profiling.n_traces < 2:
        raise ValueError("standardizer needs at least 2 profiling traces")
    x = profiling.samples.astype(np.float64)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    scale = np.where(std > 0, std, 1.0)
    return Standardizer(mean=mean, scale=scale)


def apply_standardizer(st: Standardizer, ts: TraceSet) -> TraceSet:
    if st.mean.shape[0] != ts.n_samples:
        raise ValueError(f"standardizer fitted on D={st.mean.shape[0]}, traces have D={ts.n_samples}")
    return ts.with_samples(st.transform(ts.samples))


# ---------------------------------------------------------------------------
# synthetic traces


@dataclass
class SynthConfig:
    """Simulated Hamming-weight leakage with optional masking and random delay.

    ``snr`` is the leakage variance over the noise variance at each leak
    position; ``math.inf`` gives noiseless traces. With ``masked`` the leak
    positions see ``HW(label ^ m)`` and ``mask_position`` sees ``HW(m)``.
    """

    n_traces: int = 10000
    n_samples: int = 100
    leak_positions: Sequence[int] = (50,)
    snr: float = 1.0
    desync_max: int = 0
    masked: bool = False
    seed: int = 0
    key: Optional[Sequence[int]] = None
    leakage_model: LeakageModelSpec = field(default_factory=LeakageModelSpec.sbox)
    mask_position: Optional[int] = None

    def validate(self):
        if int(self.n_traces) < 1:
            raise ValueError("n_traces must be >= 1")
        if int(self.n_samples) < 1:
            raise ValueError("n_samples must be >= 1")
        if not len(self.leak_positions):
            raise ValueError("leak_positions must not be empty")
        for t in self.leak_positions:
            if not 0 <= int(t) < self.n_samples:
                raise ValueError(f"leak_positions: {t} outside [0, {self.n_samples})")
        if not (self.snr > 0):
            raise ValueError(f"snr must be > 0, got {self.snr}")
        if int(self.desync_max) < 0:
            raise ValueError("desync_max must be >= 0")
        if self.key is not None and len(self.key) != 16:
            raise ValueError("key must have 16 bytes")
        if self.leakage_model.kind is LeakageKind.SBOX_XOR_MASK:
            raise ValueError("leakage_model: use SBOX or LAST_ROUND_HD; masking is set with masked=True")
        if self.masked:
            mp = self.resolved_mask_position()
            if not 0 <= mp < self.n_samples or mp in set(int(t) for t in self.leak_positions):
                raise ValueError(f"mask_position: {mp} must be in range and distinct from leak positions")

    def resolved_mask_position(self) -> int:
        if self.mask_position is not None:
            return int(self.mask_position)
        return (int(self.leak_positions[0]) + self.n_samples // 2) % self.n_samples

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["leak_positions"] = [int(t) for t in self.leak_positions]
        d["leakage_model"] = self.leakage_model.to_dict()
        d["key"] = None if self.key is None else [int(b) for b in self.key]
        d["snr"] = "inf" if math.isinf(self.snr) else self.snr
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "leakage_model" in d and isinstance(d["leakage_model"], dict):
            d["leakage_model"] = LeakageModelSpec.from_dict(d["leakage_model"])
        if "snr" in d:
            d["snr"] = float(d["snr"])
        if "leak_positions" in d:
            d["leak_positions"] = tuple(int(t) for t in d["leak_positions"])
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synth config field(s): {sorted(unknown)}")
        return cls(**d)


# HW of a uniform byte has variance 8 * 1/4
_HW_VARIANCE = 2.0


def synthesize(cfg: SynthConfig) -> TraceSet:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n, d = int(cfg.n_traces), int(cfg.n_samples)
    key = rng.integers(0, 256, 16, dtype=np.uint8)
    if cfg.key is not None:
        key = np.asarray(cfg.key, dtype=np.uint8)
    plaintexts = rng.integers(0, 256, (n, 16), dtype=np.uint8)
    # stand-in ciphertexts: uniformly random, not AES outputs
    ciphertexts = rng.integers(0, 256, (n, 16), dtype=np.uint8)
    masks = rng.integers(0, 256, (n, 16), dtype=np.uint8) if cfg.masked else None
    # dyadic grid so noiseless samples stay exact in float32
    baseline = np.round(rng.normal(0.0, 1.0, d) * 1024) / 1024
    noise_std = 0.0 if math.isinf(cfg.snr) else math.sqrt(_HW_VARIANCE / cfg.snr)
    noise = rng.normal(0.0, 1.0, (n, d)) * noise_std

    lm = cfg.leakage_model
    value = hypothesis_labels(lm, plaintexts, ciphertexts, None, np.full(n, key[lm.key_byte], dtype=np.uint8))
    samples = np.broadcast_to(baseline, (n, d)).copy()
    if cfg.masked:
        m = masks[:, lm.key_byte]
        leak = HW_TABLE[value ^ m].astype(np.float64)
        samples[:, cfg.resolved_mask_position()] += HW_TABLE[m]
    else:
        leak = HW_TABLE[value].astype(np.float64)
    for t in cfg.leak_positions:
        samples[:, int(t)] += leak
    samples += noise

    shifts = rng.integers(0, int(cfg.desync_max) + 1, n) if cfg.desync_max else np.zeros(n, dtype=np.int64)
    if cfg.desync_max:
        cols = (np.arange(d)[None, :] - shifts[:, None]) % d
        samples = np.take_along_axis(samples, cols, axis=1)

    tag = f"synth:seed={cfg.seed}:snr={cfg.snr}:desync={cfg.desync_max}:masked={cfg.masked}"
    return TraceSet(
        samples=samples.astype(np.float32),
        plaintexts=plaintexts,
        ciphertexts=ciphertexts,
        masks=masks,
        key=key,
        source_tag=tag,
    )


def estimate_snr(samples, classes) -> np.ndarray:
    """Per-column SNR: variance of class means over mean within-class variance."""
    samples = np.asarray(samples, dtype=np.float64)
    classes = np.asarray(classes)
    groups = np.unique(classes)
    means = np.stack([samples[classes == c].mean(axis=0) for c in groups])
    variances = np.stack([samples[classes == c].var(axis=0) for c in groups])
    weights = np.array([np.sum(classes == c) for c in groups], dtype=np.float64)
    weights /= weights.sum()
    overall = weights @ means
    signal = weights @ (means - overall) ** 2
    noise = weights @ variances
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(noise > 0, signal / noise, np.inf)
