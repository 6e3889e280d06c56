"""AES table primitives used by the leakage models and CPA hypotheses.

State bytes are indexed column-major, the FIPS-197 byte order: byte ``i``
sits at row ``i % 4`` and column ``i // 4`` of the 4x4 state. Every other
module relies on this convention.
"""

import numpy as np

# FIPS-197 forward S-box. Checked against the finite-field construction at import.
_SBOX_CONST = bytes.fromhex(
    "637c777bf26b6fc53001672bfed7ab76ca82c97dfa5947f0add4a2af9ca472c0"
    "b7fd9326363ff7cc34a5e5f171d8311504c723c31896059a071280e2eb27b275"
    "09832c1a1b6e5aa0523bd6b329e32f8453d100ed20fcb15b6acbbe394a4c58cf"
    "d0efaafb434d338545f9027f503c9fa851a3408f929d38f5bcb6da2110fff3d2"
    "cd0c13ec5f974417c4a77e3d645d197360814fdc222a908846eeb814de5e0bdb"
    "e0323a0a4906245cc2d3ac629195e479e7c8376d8dd54ea96c56f4ea657aae08"
    "ba78252e1ca6b4c6e8dd741f4bbd8b8a703eb5664803f60e613557b986c11d9e"
    "e1f8981169d98e949b1e87e9ce5528df8ca1890dbfe6426841992d0fb054bb16"
)


def _gf_mul(a, b):
    p = 0
    for _ in range(8):
        if b & 1:
            p ^= a
        hi = a & 0x80
        a = (a << 1) & 0xFF
        if hi:
            a ^= 0x1B
        b >>= 1
    return p


def _build_sbox():
    # log/antilog tables over the generator 0x03
    exp = [0] * 255
    log = [0] * 256
    x = 1
    for i in range(255):
        exp[i] = x
        log[x] = i
        x = _gf_mul(x, 3)
    table = []
    for b in range(256):
        inv = 0 if b == 0 else exp[(255 - log[b]) % 255]
        s = inv
        for shift in range(1, 5):
            s ^= ((inv << shift) | (inv >> (8 - shift))) & 0xFF
        table.append(s ^ 0x63)
    return table


_generated = _build_sbox()
if bytes(_generated) != _SBOX_CONST:
    raise RuntimeError("AES S-box table does not match its finite-field construction")

SBOX = np.frombuffer(_SBOX_CONST, dtype=np.uint8).copy()
SBOX.setflags(write=False)
INV_SBOX = np.zeros(256, dtype=np.uint8)
INV_SBOX[SBOX] = np.arange(256, dtype=np.uint8)
INV_SBOX.setflags(write=False)

HW_TABLE = np.array([bin(b).count("1") for b in range(256)], dtype=np.uint8)
HW_TABLE.setflags(write=False)


def _check_byte(b):
    b = int(b)
    if not 0 <= b <= 255:
        raise ValueError(f"byte value out of range [0, 255]: {b}")
    return b


def sbox(b):
    """Forward AES S-box of a single byte."""
    return int(SBOX[_check_byte(b)])


def inv_sbox(b):
    """Inverse AES S-box of a single byte."""
    return int(INV_SBOX[_check_byte(b)])


def hamming_weight(b):
    """Number of set bits in a byte. Accepts ints or uint8 arrays."""
    if isinstance(b, np.ndarray):
        return HW_TABLE[b.astype(np.uint8)]
    return int(HW_TABLE[_check_byte(b)])


def shift_rows(state):
    """Apply ShiftRows to a length-16 column-major state (any element type)."""
    state = list(state)
    out = [None] * 16
    for r in range(4):
        for c in range(4):
            out[r + 4 * c] = state[r + 4 * ((c + r) % 4)]
    return out


def inv_shift_rows(state):
    state = list(state)
    out = [None] * 16
    for r in range(4):
        for c in range(4):
            out[r + 4 * ((c + r) % 4)] = state[r + 4 * c]
    return out


def inv_shiftrows_partner(i1, base=1):
    """Ciphertext byte paired with ``i1`` by the last-round register model.

    The register slot that ends up holding ciphertext byte ``i2`` previously
    held the byte that ShiftRows moves to position ``i1``; inverse ShiftRows
    carries position ``i1`` back to ``i2``.

    ``base=1`` counts bytes 1..16 (the AES_HD convention, so 12 maps to 8);
    ``base=0`` uses raw state indices 0..15.
    """
    if base not in (0, 1):
        raise ValueError("base must be 0 or 1")
    i1 = int(i1)
    if not base <= i1 <= 15 + base:
        raise ValueError(f"state byte index out of range [{base}, {15 + base}]: {i1}")
    i = i1 - base
    r, c = i % 4, i // 4
    return r + 4 * ((c + r) % 4) + base
