"""Hot bit-level kernels: CRC-15, bit stuffing, destuffing.

The kernels operate on numpy uint8 arrays of bus levels (0 = dominant,
1 = recessive). By default they are JIT-compiled with numba; setting
``CANSIM_BACKEND=python`` (or ``numpy``) selects the interpreted fallback,
which is the exact same code uncompiled. ``benchmarks/codec_bench.py``
compares the two.
"""

from __future__ import annotations

import os

import numpy as np

CRC15_POLY = 0x4599  # x^15+x^14+x^10+x^8+x^7+x^4+x^3+1


def _crc15(bits):
    crc = 0
    for i in range(bits.shape[0]):
        crcnxt = (bits[i] ^ (crc >> 14)) & 1
        crc = (crc << 1) & 0x7FFF
        if crcnxt:
            crc ^= CRC15_POLY
    return crc


def _stuff(bits):
    n = bits.shape[0]
    out = np.empty(n + n // 4 + 2, dtype=np.uint8)
    m = 0
    run_level = np.uint8(2)  # sentinel: no run yet
    run_len = 0
    for i in range(n):
        b = bits[i]
        out[m] = b
        m += 1
        if b == run_level:
            run_len += 1
        else:
            run_level = b
            run_len = 1
        if run_len == 5:
            comp = np.uint8(1 - b)
            out[m] = comp
            m += 1
            run_level = comp
            run_len = 1
    return out, m


def _destuff(bits):
    n = bits.shape[0]
    out = np.empty(n, dtype=np.uint8)
    m = 0
    run_level = np.uint8(2)
    run_len = 0
    violation = -1
    i = 0
    while i < n:
        b = bits[i]
        if run_len == 5:
            if b == run_level:
                violation = i
                break
            # stuff bit: drop it, but it starts a new run on the wire
            run_level = b
            run_len = 1
            i += 1
            continue
        out[m] = b
        m += 1
        if b == run_level:
            run_len += 1
        else:
            run_level = b
            run_len = 1
        i += 1
    return out, m, violation


_requested = os.environ.get("CANSIM_BACKEND", "numba").strip().lower()
BACKEND = "python"

if _requested not in ("python", "numpy"):
    try:
        from numba import njit

        crc15_kernel = njit(cache=True)(_crc15)
        stuff_kernel = njit(cache=True)(_stuff)
        destuff_kernel = njit(cache=True)(_destuff)
        BACKEND = "numba"
    except ImportError:
        pass

if BACKEND != "numba":
    crc15_kernel = _crc15
    stuff_kernel = _stuff
    destuff_kernel = _destuff


def warmup() -> str:
    """Force JIT compilation so first real call is fast. Returns backend name."""
    probe = np.array([1, 1, 1, 1, 1, 0, 1, 0], dtype=np.uint8)
    crc15_kernel(probe)
    stuffed, m = stuff_kernel(probe)
    destuff_kernel(stuffed[:m])
    return BACKEND
