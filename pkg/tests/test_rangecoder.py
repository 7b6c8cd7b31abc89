import numpy as np
import pytest

from saecodec.entropy_model import TOTAL, CdfTable, quantize_pmf
from saecodec.errors import CodingError, DecodeError
from saecodec.rangecoder import Payload, ideal_bits, rc_decode, rc_encode


def random_tables(rng, channels, max_support=40):
    mins, cums = [], []
    for _ in range(channels):
        n = int(rng.integers(2, max_support))
        pmf = rng.dirichlet(np.full(n, 0.5))
        counts = quantize_pmf(pmf)
        cums.append(np.concatenate([[0], np.cumsum(counts)]).astype(np.int64))
        mins.append(int(rng.integers(-n, 1)))
    return CdfTable(np.array(mins, dtype=np.int64), cums)


def sample(rng, tables, n):
    ch = np.sort(rng.integers(0, tables.channels, size=n))
    sym = np.empty(n, dtype=np.int64)
    for c in range(tables.channels):
        sel = ch == c
        p = np.diff(tables.cumulative[c]) / TOTAL
        sym[sel] = tables.symbol_min[c] + rng.choice(len(p), size=sel.sum(), p=p)
    return sym, ch


def test_million_symbol_roundtrip_and_efficiency():
    rng = np.random.default_rng(0)
    tables = random_tables(rng, 16)
    sym, ch = sample(rng, tables, 10 ** 6)
    payload = rc_encode(sym, ch, tables)
    np.testing.assert_array_equal(rc_decode(payload, ch, tables), sym)
    ideal = ideal_bits(sym, ch, tables)
    assert len(payload.data) * 8 <= 1.01 * ideal + 128


@pytest.mark.parametrize("seed", range(5))
def test_roundtrip_small(seed):
    rng = np.random.default_rng(seed + 10)
    tables = random_tables(rng, 3, max_support=6)
    sym, ch = sample(rng, tables, int(rng.integers(1, 500)))
    payload = rc_encode(sym, ch, tables)
    np.testing.assert_array_equal(rc_decode(payload, ch, tables), sym)


def test_empty_payload():
    tables = random_tables(np.random.default_rng(1), 1)
    payload = rc_encode([], [], tables)
    assert len(payload.data) <= 8
    assert rc_decode(payload, [], tables).size == 0


def test_highly_skewed_table():
    tables = CdfTable(np.array([0]), [np.array([0, TOTAL - 1, TOTAL])])
    sym = np.zeros(10 ** 4, dtype=np.int64)
    payload = rc_encode(sym, np.zeros_like(sym), tables)
    assert len(payload.data) <= 40
    np.testing.assert_array_equal(rc_decode(payload, np.zeros_like(sym), tables), sym)


def test_rare_symbols_roundtrip():
    tables = CdfTable(np.array([0]), [np.array([0, 1, TOTAL - 1, TOTAL])])
    sym = np.array([0, 2, 0, 0, 1, 2, 2, 0] * 50)
    ch = np.zeros_like(sym)
    np.testing.assert_array_equal(rc_decode(rc_encode(sym, ch, tables), ch, tables), sym)


def test_out_of_support_symbol():
    tables = CdfTable(np.array([-1]), [np.array([0, 100, 200, TOTAL])])
    with pytest.raises(CodingError, match="outside support"):
        rc_encode([3], [0], tables)


def test_truncated_payload():
    rng = np.random.default_rng(3)
    tables = random_tables(rng, 2)
    sym, ch = sample(rng, tables, 2000)
    payload = rc_encode(sym, ch, tables)
    with pytest.raises(DecodeError):
        rc_decode(Payload(payload.data[: len(payload.data) // 2], payload.symbol_count), ch, tables)
    with pytest.raises(DecodeError):
        rc_decode(Payload(payload.data + b"\x00", payload.symbol_count), ch, tables)


def test_encoding_is_deterministic():
    rng = np.random.default_rng(4)
    tables = random_tables(rng, 4)
    sym, ch = sample(rng, tables, 5000)
    assert rc_encode(sym, ch, tables).data == rc_encode(sym, ch, tables).data
