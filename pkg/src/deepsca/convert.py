"""One-shot importers from public raw dataset layouts into the canonical container.

Supported inputs:

``npz``
    NumPy archive with ``traces`` (or ``samples``), ``plaintexts`` and
    optional ``ciphertexts``/``masks``/``key`` arrays.
``dpav4``
    DPAcontest v4 index file (one line per trace: key, plaintext,
    ciphertext, offset as hex, whitespace separated) plus a ``.npy`` matrix
    of the extracted samples in the same order. Masks are expanded from the
    RSM offsets: mask byte ``i`` is ``RSM_MASKS[(offset + i) % 16]``.
``aes_rd``
    MATLAB file of the random-delay traces (``CompressedTraces``,
    ``plaintext``); the key is passed separately.
``csv``
    Trace matrix as CSV plus a CSV of plaintexts or ciphertexts (AES_HD).
``ascad``
    One group of an ASCAD HDF5 file.
"""

import numpy as np

from .traces import DatasetError, TraceSet, load_ascad_hdf5

RSM_MASKS = np.array(
    [0x00, 0x0F, 0x36, 0x39, 0x53, 0x5C, 0x65, 0x6A, 0x95, 0x9A, 0xA3, 0xAC, 0xC6, 0xC9, 0xF0, 0xFF],
    dtype=np.uint8,
)

FORMATS = ("npz", "dpav4", "aes_rd", "csv", "ascad")


def parse_key(text):
    key = np.frombuffer(bytes.fromhex(text.replace(" ", "")), dtype=np.uint8)
    if key.shape != (16,):
        raise ValueError("key must be 16 bytes of hex")
    return key.copy()


def from_npz(path, key=None):
    with np.load(path) as z:
        names = set(z.files)
        samples_name = "traces" if "traces" in names else "samples"
        if samples_name not in names:
            raise DatasetError(f"samples: archive has no 'traces' or 'samples' array (found {sorted(names)})")
        get = lambda n: z[n] if n in names else None  # noqa: E731
        k = get("key") if key is None else key
        if k is None:
            raise DatasetError("key: not in archive and not given")
        return TraceSet(
            samples=z[samples_name],
            plaintexts=get("plaintexts"),
            ciphertexts=get("ciphertexts"),
            masks=get("masks"),
            key=k,
            source_tag=f"npz:{path}",
        )


def read_dpav4_index(path):
    keys, pts, cts, offsets = [], [], [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            keys.append(np.frombuffer(bytes.fromhex(parts[0][:32]), dtype=np.uint8))
            pts.append(np.frombuffer(bytes.fromhex(parts[1]), dtype=np.uint8))
            cts.append(np.frombuffer(bytes.fromhex(parts[2]), dtype=np.uint8))
            offsets.append(int(parts[3], 16))
    return np.stack(keys), np.stack(pts), np.stack(cts), np.asarray(offsets)


def from_dpav4(index_path, samples_path):
    keys, pts, cts, offsets = read_dpav4_index(index_path)
    samples = np.load(samples_path)
    if samples.shape[0] != len(offsets):
        raise DatasetError(f"samples: {samples.shape[0]} traces but index lists {len(offsets)}")
    masks = RSM_MASKS[(offsets[:, None] + np.arange(16)[None, :]) % 16]
    return TraceSet(samples=samples, plaintexts=pts, ciphertexts=cts, masks=masks, key=keys,
                    source_tag=f"dpav4:{index_path}")


def from_aes_rd(mat_path, key):
    from scipy.io import loadmat

    mat = loadmat(mat_path)
    trace_name = next((n for n in ("CompressedTraces", "traces", "Traces") if n in mat), None)
    pt_name = next((n for n in ("plaintext", "plaintexts", "Plaintext") if n in mat), None)
    if trace_name is None or pt_name is None:
        found = sorted(n for n in mat if not n.startswith("__"))
        raise DatasetError(f"aes_rd: need traces and plaintext variables, found {found}")
    traces = np.asarray(mat[trace_name])
    pts = np.asarray(mat[pt_name])
    if pts.shape[1] != 16 and pts.shape[0] == 16:
        pts = pts.T
    if traces.shape[0] != pts.shape[0]:
        traces = traces.T
    return TraceSet(samples=traces, plaintexts=pts, key=key, source_tag=f"aes_rd:{mat_path}")


def from_csv(traces_path, key, plaintexts_path=None, ciphertexts_path=None):
    samples = np.loadtxt(traces_path, delimiter=",", ndmin=2)
    n = samples.shape[0]
    pts = np.loadtxt(plaintexts_path, delimiter=",", ndmin=2, dtype=np.int64) if plaintexts_path else None
    cts = np.loadtxt(ciphertexts_path, delimiter=",", ndmin=2, dtype=np.int64) if ciphertexts_path else None
    if pts is None:
        # the container schema requires plaintexts; ciphertext-only sets get zeros
        pts = np.zeros((n, 16), dtype=np.uint8)
    return TraceSet(samples=samples, plaintexts=pts, ciphertexts=cts, key=key, source_tag=f"csv:{traces_path}")


def convert(fmt, inputs, key=None, group=None):
    """Dispatch on ``fmt``; ``inputs`` is the list of input paths."""
    if fmt == "npz":
        return from_npz(inputs[0], key)
    if fmt == "dpav4":
        if len(inputs) != 2:
            raise ValueError("dpav4 needs the index file and the samples .npy")
        return from_dpav4(inputs[0], inputs[1])
    if fmt == "aes_rd":
        if key is None:
            raise ValueError("aes_rd needs --key")
        return from_aes_rd(inputs[0], key)
    if fmt == "csv":
        if key is None:
            raise ValueError("csv needs --key")
        extra = dict(zip(("plaintexts_path", "ciphertexts_path"), inputs[1:]))
        return from_csv(inputs[0], key, **extra)
    if fmt == "ascad":
        return load_ascad_hdf5(inputs[0], group or "Attack_traces")
    raise ValueError(f"unknown format {fmt!r}; choose from {', '.join(FORMATS)}")
