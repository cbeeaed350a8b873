from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vflossy.codec import (
    RULES,
    Encoded,
    Parser,
    StreamExhausted,
    audit,
    decode,
    decode_sequence,
    encode_stream,
    encoded_from_bytes,
    encoded_to_bytes,
    pack_indices,
    parse_first,
    read_encoded,
    write_encoded,
)
from vflossy.dictionary import DictionaryBuilder, build_dictionary
from vflossy.errors import IntegrityError, ValidationError
from vflossy.rd_core import DistortionSpec
from vflossy.typespace import RateCache, TypeClass, is_transitional


def H(D, k=2):
    return DistortionSpec.hamming(k, D)


@pytest.fixture(scope="module")
def dict01():
    b = DictionaryBuilder(H(0.1))
    return b.build(b.choose_gamma(1024).gamma, 1024).dictionary


@pytest.fixture(scope="module")
def dict3():
    b = DictionaryBuilder(H(0.2, 3))
    return b.build(b.choose_gamma(512).gamma, 512).dictionary


def segment_units(src, word, grid):
    return int(grid[np.asarray(src), np.asarray(word)].sum())


class TestParseFirst:
    def test_all_zeros_lossless(self):
        d = build_dictionary(1.5, H(0.0), 64)
        r = parse_first(iter([0] * 20), d)
        # (1, 0) is already transitional: one more 1 would push the rate to 2
        assert is_transitional(TypeClass((1, 0)), 1.5, H(0.0))
        assert r.length == 1 and r.counts == (1, 0)
        assert d.codeword(r.index) == (0,)
        assert r.distortion == 0

    def test_all_zeros_crossing_runs_to_top(self):
        d = build_dictionary(1.5, H(0.0), 64)
        r = parse_first([0] * 20, d, rule="crossing")
        assert r.length == d.max_len
        assert d.codeword(r.index) == (0,) * d.max_len

    def test_large_level(self):
        d = build_dictionary(0.0, H(1.0), 4)
        r = parse_first([1, 0, 1, 1, 0, 0], d)
        assert r.length == 1
        assert r.realized_distortion <= 1.0

    def test_exhausted(self, dict01):
        with pytest.raises(StreamExhausted):
            parse_first([0, 1], dict01, rule="crossing")
        with pytest.raises(StreamExhausted):
            parse_first([], dict01)

    def test_bad_symbol(self, dict01):
        with pytest.raises(ValidationError):
            parse_first([0, 2, 1, 0] * 20, dict01)

    def test_unknown_rule(self, dict01):
        with pytest.raises(ValidationError, match="stopping rule"):
            Parser(dict01, "greedy")

    @pytest.mark.parametrize("rule", RULES)
    def test_random_streams_are_semifaithful(self, dict01, rule):
        rng = np.random.default_rng(0)
        parser = Parser(dict01, rule)
        grid = parser.grid
        streams = (rng.random((10_000, dict01.max_len + 1)) >= 0.3).astype(np.uint8)
        for row in streams:
            r = parser.parse(row)
            assert 1 <= r.length <= dict01.max_blocklength
            word = dict01.codeword(r.index)
            assert len(word) == r.length
            units = segment_units(row[: r.length], word, grid)
            assert units == r.distortion_units
            assert units <= dict01.spec.budget_units(r.length)
            assert r.distortion <= Fraction(1, 10)

    def test_lowest_index_wins(self, dict01):
        parser = Parser(dict01)
        rng = np.random.default_rng(5)
        for _ in range(200):
            row = (rng.random(dict01.max_len) >= 0.3).astype(np.uint8)
            r = parser.parse(row)
            start, words = parser.blocks[r.counts]
            units = (parser.grid[row[: r.length][None, :], words]).sum(axis=1)
            ok = np.flatnonzero(units <= dict01.spec.budget_units(r.length))
            assert r.index == start + ok[0]


class TestStopping:
    def test_first_transitional_matches_type_scan(self, dict01):
        rng = np.random.default_rng(1)
        cache = RateCache()
        parser = Parser(dict01)
        spec, gamma = dict01.spec, dict01.gamma
        for _ in range(1000):
            row = (rng.random(dict01.max_len) >= 0.3).astype(np.uint8)
            want = dict01.max_len
            for n in range(1, dict01.max_len):
                if is_transitional(TypeClass.of(row[:n], 2), gamma, spec, cache):
                    want = n
                    break
            assert parser.parse(row).length == want

    @pytest.mark.parametrize("rule", RULES)
    def test_vectorised_matches_sequential(self, dict3, rule):
        rng = np.random.default_rng(2)
        parser = Parser(dict3, rule)
        rows = rng.choice(3, size=(1000, dict3.max_len + 1), p=[0.2, 0.3, 0.5]).astype(np.uint8)
        fast = parser.stop_lengths(rows)
        slow = [parser.parse(r).length for r in rows]
        assert fast.tolist() == slow

    def test_crossing_stops_on_transitional(self, dict01):
        rng = np.random.default_rng(3)
        cache = RateCache()
        parser = Parser(dict01, "crossing")
        for _ in range(500):
            row = (rng.random(dict01.max_len + 1) >= 0.3).astype(np.uint8)
            r = parser.parse(row)
            if r.length < dict01.max_len:
                assert is_transitional(TypeClass(r.counts), dict01.gamma, dict01.spec, cache)

    def test_short_matrix_rejected(self, dict01):
        with pytest.raises(StreamExhausted):
            Parser(dict01).stop_lengths(np.zeros((2, 1), dtype=np.uint8))


class TestEncode:
    def test_single_segment_width(self, dict01):
        e = encode_stream([1, 0, 1] * 30, dict01, count=1)
        assert e.bit_length == dict01.index_width == len(e.bits)

    def test_round_trip_audit(self, dict01):
        rng = np.random.default_rng(4)
        x = (rng.random(100 * dict01.max_len) >= 0.3).astype(np.uint8)
        e = encode_stream(x, dict01, count=100)
        assert len(e.indices) == 100
        assert audit(x[: e.symbol_count], e, dict01) == []
        grid, _ = dict01.spec.grid()
        for (start, n), word in zip(e.boundaries, decode(e.bits, dict01)):
            assert segment_units(x[start : start + n], word, grid) <= dict01.spec.budget_units(n)

    @pytest.mark.parametrize("rule", RULES)
    def test_deterministic(self, dict3, rule):
        x = np.random.default_rng(6).choice(3, size=3000)
        a = encode_stream(x, dict3, rule=rule)
        b = encode_stream(x, dict3, rule=rule)
        assert a == b
        assert np.array_equal(a.bits, b.bits)
        assert a.boundaries == b.boundaries

    def test_whole_stream_with_tail(self, dict3):
        x = np.random.default_rng(7).choice(3, size=1001, p=[0.6, 0.3, 0.1])
        e = encode_stream(x, dict3)
        y = decode_sequence(e, dict3)
        assert len(y) == len(x) == e.symbol_count
        assert audit(x, e, dict3) == []

    def test_count_too_large(self, dict01):
        with pytest.raises(StreamExhausted):
            encode_stream([0, 1] * 5, dict01, count=100)

    def test_bad_symbols(self, dict01):
        with pytest.raises(ValidationError):
            encode_stream([0, 3, 1], dict01)

    def test_audit_catches_tampering(self, dict01):
        x = np.zeros(200, dtype=np.uint8)
        e = encode_stream(x, dict01)
        y = x.copy()
        y[:] = 1
        assert audit(y, e, dict01) != []


class TestDecode:
    def test_empty(self, dict01):
        assert decode(np.zeros(0, dtype=np.uint8), dict01) == []
        assert decode_sequence([], dict01).size == 0

    def test_out_of_range(self):
        d = build_dictionary(2.0, H(0.1), 1024)
        assert d.size < 2**d.index_width
        with pytest.raises(IntegrityError, match="outside"):
            decode(pack_indices([d.size], d.index_width), d)
        assert decode(pack_indices([d.size - 1], d.index_width), d) == [d.entries[-1].codeword]

    def test_ragged_bits(self, dict01):
        with pytest.raises(ValidationError, match="multiple"):
            decode(np.ones(dict01.index_width + 1, dtype=np.uint8), dict01)

    def test_wrong_dictionary(self, dict01, dict3):
        e = encode_stream([0, 1] * 50, dict01)
        with pytest.raises(IntegrityError, match="different dictionary"):
            decode(e, dict3)

    @settings(max_examples=30)
    @given(st.lists(st.integers(0, 2**16 - 1), max_size=20), st.integers(1, 16))
    def test_pack_round_trip(self, idx, width):
        idx = [v % (1 << width) for v in idx]
        from vflossy.codec import unpack_indices

        assert unpack_indices(pack_indices(idx, width), width).tolist() == idx


class TestFile:
    def test_round_trip(self, dict3, tmp_path):
        x = np.random.default_rng(8).choice(3, size=777)
        e = encode_stream(x, dict3)
        write_encoded(e, tmp_path / "x.vfle")
        back = read_encoded(tmp_path / "x.vfle")
        assert back == e
        assert np.array_equal(decode_sequence(back, dict3), decode_sequence(e, dict3))

    def test_header_layout(self, dict01):
        e = encode_stream([0, 1, 1] * 40, dict01)
        blob = encoded_to_bytes(e)
        assert blob[:4] == b"VFLE"
        assert int.from_bytes(blob[6:10], "little") == dict01.checksum()

    def test_corruption(self, dict01):
        blob = bytearray(encoded_to_bytes(encode_stream([0, 1, 1] * 40, dict01)))
        with pytest.raises(IntegrityError, match="checksum"):
            encoded_from_bytes(bytes(blob[:-1]))
        blob[12] ^= 1
        with pytest.raises(IntegrityError):
            encoded_from_bytes(bytes(blob))
        with pytest.raises(IntegrityError, match="magic"):
            encoded_from_bytes(b"XXXX" + bytes(blob[4:]))

    def test_empty_stream(self, dict01):
        e = encode_stream([], dict01)
        assert encoded_from_bytes(encoded_to_bytes(e)) == e
        assert isinstance(e, Encoded) and e.indices == () and e.tail == ()
