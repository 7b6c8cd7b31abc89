"""Carry-less 32-bit range coder over 16-bit cumulative frequency tables.

Integer arithmetic only, so the byte stream is identical on every platform.
Renormalization follows Subbotin's scheme: a byte is shifted out whenever
the top byte of ``low`` is settled, and the range is forcibly shrunk to the
next 2^16 boundary when it underflows without settling.
"""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass

import numpy as np

from .entropy_model import PRECISION, CdfTable
from .errors import CodingError, DecodeError

TOP = 1 << 24
BOT = 1 << 16
MASK = (1 << 32) - 1


@dataclass(frozen=True)
class Payload:
    data: bytes
    symbol_count: int


def _flat_tables(tables: CdfTable):
    offsets = np.zeros(tables.channels + 1, dtype=np.int64)
    offsets[1:] = np.cumsum([len(c) for c in tables.cumulative])
    flat = np.concatenate(tables.cumulative).astype(np.int64)
    return flat, offsets


def rc_encode(symbols, channel_ids, tables: CdfTable) -> Payload:
    """Range-code ``symbols[i]`` with the table of channel ``channel_ids[i]``."""
    symbols = np.asarray(symbols, dtype=np.int64).ravel()
    channel_ids = np.asarray(channel_ids, dtype=np.int64).ravel()
    if symbols.shape != channel_ids.shape:
        raise CodingError("symbols and channel_ids differ in length")
    if symbols.size:
        if channel_ids.min() < 0 or channel_ids.max() >= tables.channels:
            raise CodingError("channel id out of range")
        lo = tables.symbol_min[channel_ids]
        hi = tables.symbol_max[channel_ids]
        bad = np.nonzero((symbols < lo) | (symbols > hi))[0]
        if bad.size:
            i = bad[0]
            raise CodingError(
                f"symbol {symbols[i]} outside support [{lo[i]}, {hi[i]}] of channel {channel_ids[i]}")
        flat, offsets = _flat_tables(tables)
        idx = offsets[channel_ids] + (symbols - lo)
        starts = flat[idx].tolist()
        freqs = (flat[idx + 1] - flat[idx]).tolist()
    else:
        starts, freqs = [], []

    out = bytearray()
    low, rng = 0, MASK
    for c, f in zip(starts, freqs):
        r = rng >> PRECISION
        low += c * r
        rng = f * r
        while True:
            if (low ^ (low + rng)) < TOP:
                pass
            elif rng < BOT:
                rng = -low & (BOT - 1)
            else:
                break
            out.append(low >> 24)
            low = (low << 8) & MASK
            rng = (rng << 8) & MASK
    for _ in range(4):
        out.append(low >> 24)
        low = (low << 8) & MASK
    return Payload(bytes(out), int(symbols.size))


def rc_decode(payload: Payload, channel_ids, tables: CdfTable) -> np.ndarray:
    """Inverse of :func:`rc_encode`; ``channel_ids`` must match the encoder's."""
    channel_ids = np.asarray(channel_ids, dtype=np.int64).ravel()
    if channel_ids.size != payload.symbol_count:
        raise DecodeError(f"expected {payload.symbol_count} channel ids, got {channel_ids.size}")
    data = payload.data
    n = len(data)
    if n < 4:
        raise DecodeError(f"payload truncated: {n} bytes, need at least 4", offset=n)
    cums = [c.tolist() for c in tables.cumulative]
    mins = tables.symbol_min.tolist()
    total = 1 << PRECISION

    code = int.from_bytes(data[:4], "big")
    pos = 4
    low, rng = 0, MASK
    out = [0] * channel_ids.size
    for i, ch in enumerate(channel_ids.tolist()):
        cum = cums[ch]
        r = rng >> PRECISION
        value = ((code - low) & MASK) // r
        if value >= total:
            raise DecodeError(f"corrupt payload near byte {pos}", offset=pos)
        k = bisect_right(cum, value) - 1
        if k >= len(cum) - 1:
            raise DecodeError(f"corrupt payload near byte {pos}", offset=pos)
        c = cum[k]
        low += c * r
        rng = (cum[k + 1] - c) * r
        while True:
            if (low ^ (low + rng)) < TOP:
                pass
            elif rng < BOT:
                rng = -low & (BOT - 1)
            else:
                break
            if pos >= n:
                raise DecodeError(f"payload truncated at byte {pos}", offset=pos)
            code = ((code << 8) | data[pos]) & MASK
            pos += 1
            low = (low << 8) & MASK
            rng = (rng << 8) & MASK
        out[i] = k + mins[ch]
    if pos != n:
        raise DecodeError(f"{n - pos} trailing bytes after the last symbol", offset=pos)
    return np.array(out, dtype=np.int64)


def ideal_bits(symbols, channel_ids, tables: CdfTable) -> float:
    """Sum of -log2 p over the symbols under the frozen tables."""
    symbols = np.asarray(symbols, dtype=np.int64).ravel()
    channel_ids = np.asarray(channel_ids, dtype=np.int64).ravel()
    if symbols.size == 0:
        return 0.0
    flat, offsets = _flat_tables(tables)
    idx = offsets[channel_ids] + (symbols - tables.symbol_min[channel_ids])
    freqs = flat[idx + 1] - flat[idx]
    return float(np.sum(PRECISION - np.log2(freqs)))
