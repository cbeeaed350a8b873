"""Variable-to-fixed parsing, encoding and decoding against a dictionary.

Two stopping rules are available:

``first-transitional`` (default)
    stop at the first prefix whose type is transitional, i.e. a type the
    dictionary covers below its top blocklength.
``crossing``
    stop at the last prefix before the total empirical lossy rate of the
    realized stream first exceeds ``gamma``.  This looks one symbol ahead;
    the stop type is always transitional because the realized next letter
    witnesses the crossing.

Either way a prefix that reaches the dictionary's top blocklength stops
there.  A finite input whose remainder is too short for a full parse ends
in a literal tail of per-letter nearest reproductions.
"""

from __future__ import annotations

import io
import struct
import zlib
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable

import numpy as np

from . import seqs
from .dictionary import Dictionary
from .errors import IntegrityError, ValidationError
from .typespace import RateCache, enumerate_types

RULES = ("first-transitional", "crossing")
STREAM_MAGIC = b"VFLE"
STREAM_VERSION = 1


class StreamExhausted(ValidationError):
    """The input ended before the parse reached a stopping type."""


@dataclass(frozen=True)
class ParseResult:
    length: int
    index: int
    distortion_units: int
    distortion: Fraction
    counts: tuple[int, ...]

    @property
    def realized_distortion(self) -> float:
        return float(self.distortion)


class Parser:
    """Stopping tables and codeword blocks for one dictionary.

    Prefix types are hashed to ``sum_a counts[a] * (L + 1)**a`` with ``L`` the
    top blocklength, so stop checks are array lookups.
    """

    def __init__(self, d: Dictionary, rule: str = "first-transitional"):
        if rule not in RULES:
            raise ValidationError(f"unknown stopping rule {rule!r}; expected one of {RULES}")
        self.dictionary = d
        self.rule = rule
        self.k = d.alphabet_size
        self.top = d.max_len
        self.radix = np.array([(self.top + 1) ** a for a in range(self.k)], dtype=np.int64)
        self.grid, self.unit = d.spec.grid()
        self.blocks = d.lookup.blocks
        self.stop_ids = np.array(
            sorted(self.type_id(c) for c in self.blocks if sum(c) < self.top), dtype=np.int64
        )
        self.high_ids = self._high_rate_ids() if rule == "crossing" else np.zeros(0, dtype=np.int64)

    def type_id(self, counts) -> int:
        return int(np.dot(np.asarray(counts, dtype=np.int64), self.radix))

    def _high_rate_ids(self) -> np.ndarray:
        cache = RateCache()
        ids = []
        for n in range(1, self.top + 1):
            for t in enumerate_types(n, self.k):
                if cache.get(t, self.dictionary.spec) > self.dictionary.gamma:
                    ids.append(self.type_id(t.counts))
        return np.array(sorted(ids), dtype=np.int64)

    # -- vectorised parsing ------------------------------------------------

    def stop_lengths(self, streams: np.ndarray) -> np.ndarray:
        """Segment length for each row of a ``(trials, top)`` symbol matrix."""
        streams = np.asarray(streams)
        if streams.ndim != 2 or streams.shape[1] < self.top:
            raise StreamExhausted(f"each stream needs {self.top} symbols")
        onehot = streams[:, : self.top, None] == np.arange(self.k, dtype=streams.dtype)
        ids = np.cumsum(onehot, axis=1, dtype=np.int64) @ self.radix
        if self.rule == "first-transitional":
            hit = np.isin(ids[:, : self.top - 1], self.stop_ids)
            if hit.shape[1] == 0:
                return np.full(len(ids), self.top, dtype=np.int64)
            return np.where(hit.any(axis=1), np.argmax(hit, axis=1) + 1, self.top)
        over = np.isin(ids, self.high_ids)
        # prefixes of length 1 always have zero rate
        first_over = np.argmax(over, axis=1) + 1
        return np.where(over.any(axis=1), first_over - 1, self.top)

    def lookup(self, streams: np.ndarray, lengths: np.ndarray):
        """Codeword index and distortion units for each parsed segment."""
        streams = np.asarray(streams, dtype=np.uint8)
        lengths = np.asarray(lengths, dtype=np.int64)
        m = len(lengths)
        index = np.full(m, -1, dtype=np.int64)
        units = np.zeros(m, dtype=np.int64)
        counts = np.stack(
            [((streams == a) & (np.arange(streams.shape[1]) < lengths[:, None])).sum(axis=1) for a in range(self.k)],
            axis=1,
        )
        ids = counts.astype(np.int64) @ self.radix
        for tid in np.unique(ids):
            rows = np.flatnonzero(ids == tid)
            key = tuple(int(v) for v in counts[rows[0]])
            block = self.blocks.get(key)
            if block is None:
                raise IntegrityError(f"parsed type {key} has no covering in the dictionary")
            start, words = block
            n = words.shape[1]
            hit, u = seqs.first_within(
                streams[rows, :n], words, self.grid, self.dictionary.spec.budget_units(n)
            )
            if (hit < 0).any():
                raise IntegrityError(f"covering of type {key} misses a parsed segment")
            index[rows] = start + hit
            units[rows] = u
        return index, units

    # -- sequential parsing ------------------------------------------------

    def parse(self, symbols: Iterable[int]) -> ParseResult:
        """Read symbols one at a time until the stopping rule fires."""
        it = iter(symbols)
        stop_ids = set(self.stop_ids.tolist())
        high_ids = set(self.high_ids.tolist())
        radix = self.radix.tolist()

        def read(n):
            s = next(it, None)
            if s is None:
                raise StreamExhausted(f"stream ended after {n} symbols without a stop")
            s = int(s)
            if not 0 <= s < self.k:
                raise ValidationError(f"symbol {s} outside the source alphabet of size {self.k}")
            return s

        prefix: list[int] = []
        tid = 0
        look = None
        while True:
            s = read(len(prefix)) if look is None else look
            look = None
            prefix.append(s)
            tid += radix[s]
            n = len(prefix)
            if n == self.top:
                break
            if self.rule == "first-transitional":
                if tid in stop_ids:
                    break
            else:
                look = read(n)
                if tid + radix[look] in high_ids:
                    break
        arr = np.array([prefix], dtype=np.uint8)
        index, units = self.lookup(arr, np.array([n]))
        counts = tuple(prefix.count(a) for a in range(self.k))
        return self._result(n, int(index[0]), int(units[0]), counts)

    def _result(self, n, index, units, counts) -> ParseResult:
        return ParseResult(
            length=n,
            index=index,
            distortion_units=units,
            distortion=Fraction(units) * self.unit / n,
            counts=counts,
        )

    def segment(self, stream: np.ndarray) -> tuple[list[ParseResult], int]:
        """Parse ``stream`` repeatedly; returns the segments and where the unparsed tail starts."""
        stream = np.asarray(stream, dtype=np.uint8)
        if stream.size and int(stream.max()) >= self.k:
            raise ValidationError(f"symbol {int(stream.max())} outside the source alphabet of size {self.k}")
        out = []
        pos = 0
        top = self.top
        # full windows in bulk, segment by segment
        while stream.size - pos >= top:
            window = stream[pos : pos + top]
            n = int(self.stop_lengths(window[None, :])[0])
            idx, units = self.lookup(window[None, :n], np.array([n]))
            counts = tuple(int((window[:n] == a).sum()) for a in range(self.k))
            out.append(self._result(n, int(idx[0]), int(units[0]), counts))
            pos += n
        while pos < stream.size:
            try:
                r = self.parse(stream[pos:])
            except StreamExhausted:
                break
            out.append(r)
            pos += r.length
        return out, pos


def parse_first(stream, d: Dictionary, rule: str = "first-transitional") -> ParseResult:
    """One-shot parse of the first segment of ``stream``."""
    return Parser(d, rule).parse(stream)


# ---------------------------------------------------------------------------
# encoding


@dataclass(frozen=True)
class Encoded:
    checksum: int
    index_width: int
    indices: tuple[int, ...]
    boundaries: tuple[tuple[int, int], ...] = field(compare=False)
    symbol_count: int
    tail: tuple[int, ...]
    reproduction_size: int

    @property
    def bits(self) -> np.ndarray:
        return pack_indices(self.indices, self.index_width)

    @property
    def bit_length(self) -> int:
        return len(self.indices) * self.index_width


def pack_indices(indices, width: int) -> np.ndarray:
    """Indices as a flat 0/1 array, most significant bit first."""
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    shifts = np.arange(width - 1, -1, -1, dtype=np.int64)
    return ((idx[:, None] >> shifts) & 1).astype(np.uint8).reshape(-1)


def unpack_indices(bits, width: int) -> np.ndarray:
    bits = np.asarray(bits, dtype=np.int64).reshape(-1)
    if bits.size % width:
        raise ValidationError(f"bit length {bits.size} is not a multiple of the index width {width}")
    weights = 1 << np.arange(width - 1, -1, -1, dtype=np.int64)
    return bits.reshape(-1, width) @ weights


def nearest_letters(symbols: np.ndarray, grid: np.ndarray) -> np.ndarray:
    return np.argmin(grid, axis=1)[np.asarray(symbols, dtype=np.int64)].astype(np.uint8)


def encode_stream(
    stream, d: Dictionary, count: int | None = None, rule: str = "first-transitional"
) -> Encoded:
    """Parse ``stream`` into fixed-width indices.

    With ``count`` given exactly that many segments are emitted and the
    stream must be long enough.  Otherwise the whole stream is consumed and
    any remainder too short to parse is kept as a literal tail.
    """
    parser = Parser(d, rule)
    stream = np.asarray(list(stream) if not isinstance(stream, np.ndarray) else stream, dtype=np.int64)
    if stream.size and (stream.min() < 0 or stream.max() >= d.alphabet_size):
        raise ValidationError("stream symbols outside the source alphabet")
    segs, pos = parser.segment(stream.astype(np.uint8))
    tail: tuple[int, ...] = ()
    if count is not None:
        if len(segs) < count:
            raise StreamExhausted(f"stream supports {len(segs)} full parses, {count} requested")
        segs = segs[:count]
        pos = sum(s.length for s in segs)
        consumed = pos
    else:
        rest = stream[pos:]
        if rest.size:
            grid = parser.grid
            lit = nearest_letters(rest, grid)
            units = int(grid[rest, lit].sum())
            if units > d.spec.budget_units(rest.size):
                raise IntegrityError("stream tail has no reproduction within D")
            tail = tuple(int(v) for v in lit)
        consumed = stream.size
    bounds = []
    start = 0
    for s in segs:
        bounds.append((start, s.length))
        start += s.length
    return Encoded(
        checksum=d.checksum(),
        index_width=d.index_width,
        indices=tuple(s.index for s in segs),
        boundaries=tuple(bounds),
        symbol_count=int(consumed),
        tail=tail,
        reproduction_size=d.spec.reproduction_size,
    )


def decode(data, d: Dictionary) -> list[tuple[int, ...]]:
    """Reproduction segments for an :class:`Encoded` stream, a bit array or an index list.

    The literal tail of an :class:`Encoded` stream, if any, is the last segment.
    """
    tail: tuple[int, ...] = ()
    if isinstance(data, Encoded):
        if data.checksum != d.checksum():
            raise IntegrityError("encoded stream was produced with a different dictionary")
        indices = np.asarray(data.indices, dtype=np.int64)
        tail = data.tail
    else:
        indices = unpack_indices(data, d.index_width)
    out = []
    for i in indices.tolist():
        if not 0 <= i < d.size:
            raise IntegrityError(f"index {i} outside [0, {d.size})")
        out.append(d.entries[i].codeword)
    if tail:
        out.append(tail)
    return out


def decode_sequence(data, d: Dictionary) -> np.ndarray:
    segs = decode(data, d)
    if not segs:
        return np.zeros(0, dtype=np.uint8)
    return np.concatenate([np.asarray(s, dtype=np.uint8) for s in segs])


# ---------------------------------------------------------------------------
# encoded stream file


def _pack_bits(bits: np.ndarray) -> bytes:
    return np.packbits(np.asarray(bits, dtype=np.uint8), bitorder="big").tobytes()


def _unpack_bits(data: bytes, count: int) -> np.ndarray:
    return np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="big", count=count)


def encoded_to_bytes(e: Encoded) -> bytes:
    sym_bits = max(1, int(np.ceil(np.log2(e.reproduction_size))))
    out = io.BytesIO()
    out.write(STREAM_MAGIC)
    out.write(struct.pack("<HIHQQHI", STREAM_VERSION, e.checksum, e.index_width, len(e.indices),
                          e.symbol_count, e.reproduction_size, len(e.tail)))
    out.write(_pack_bits(e.bits))
    out.write(_pack_bits(pack_indices(e.tail, sym_bits)))
    body = out.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def encoded_from_bytes(data: bytes) -> Encoded:
    if len(data) < 8 or data[:4] != STREAM_MAGIC:
        raise IntegrityError("not an encoded stream (bad magic)")
    body, tail_crc = data[:-4], data[-4:]
    if zlib.crc32(body) != struct.unpack("<I", tail_crc)[0]:
        raise IntegrityError("encoded stream checksum mismatch")
    head = struct.calcsize("<HIHQQHI")
    try:
        version, checksum, width, segs, symbols, ky, tail_len = struct.unpack("<HIHQQHI", body[4 : 4 + head])
    except struct.error as exc:
        raise IntegrityError(f"encoded stream truncated: {exc}") from exc
    if version != STREAM_VERSION:
        raise IntegrityError(f"encoded stream version {version}, expected {STREAM_VERSION}")
    sym_bits = max(1, int(np.ceil(np.log2(ky))))
    pos = 4 + head
    nbytes = (segs * width + 7) // 8
    tbytes = (tail_len * sym_bits + 7) // 8
    if len(body) != pos + nbytes + tbytes:
        raise IntegrityError("encoded stream length does not match its header")
    idx = unpack_indices(_unpack_bits(body[pos : pos + nbytes], segs * width), width) if segs else []
    tail = unpack_indices(_unpack_bits(body[pos + nbytes :], tail_len * sym_bits), sym_bits) if tail_len else []
    bounds = []
    return Encoded(
        checksum=checksum,
        index_width=width,
        indices=tuple(int(v) for v in idx),
        boundaries=tuple(bounds),
        symbol_count=symbols,
        tail=tuple(int(v) for v in tail),
        reproduction_size=ky,
    )


def write_encoded(e: Encoded, path) -> None:
    Path(path).write_bytes(encoded_to_bytes(e))


def read_encoded(path) -> Encoded:
    return encoded_from_bytes(Path(path).read_bytes())


def audit(stream, e: Encoded, d: Dictionary) -> list[tuple[int, int, Fraction]]:
    """Segments whose reproduction is farther than D from the source (empty when faithful)."""
    stream = np.asarray(stream, dtype=np.int64)
    grid, unit = d.spec.grid()
    bad = []
    pos = 0
    for seg in decode(e, d):
        n = len(seg)
        units = int(grid[stream[pos : pos + n], np.asarray(seg, dtype=np.int64)].sum())
        if units > d.spec.budget_units(n):
            bad.append((pos, n, Fraction(units) * unit / n))
        pos += n
    if pos != stream.size:
        raise IntegrityError(f"decoded length {pos} differs from the source length {stream.size}")
    return bad
