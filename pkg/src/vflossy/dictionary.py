"""Parsing dictionary: threshold choice, assembly, indexing and persistence.

The dictionary for threshold ``gamma`` holds, for every blocklength
``n < max_len``, a covering of each transitional type of length ``n``, and
at ``n == max_len`` a covering of every type whose total empirical lossy
rate is still at most ``gamma``.  The last level makes the parse terminate:
a stream whose empirical rate never crosses ``gamma`` (for example one that
stays in the zero-rate corner of the simplex) is cut at ``max_len``.
"""

from __future__ import annotations

import hashlib
import io
import itertools
import logging
import math
import struct
import zlib
from dataclasses import dataclass, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from .covering import (
    DEFAULT_UPSILON,
    DRAW_CAP,
    Covering,
    CoveringCache,
    cover_exact,
    cover_randomized,
)
from .errors import BudgetError, CapacityError, IntegrityError, ValidationError
from .rd_core import DistortionSpec
from .typespace import RateCache, TypeClass, low_rate_types, transitional_set

log = logging.getLogger(__name__)

MAGIC = b"VFLD"
FORMAT_VERSION = 1
GAMMA_RESOLUTION = 1e-3


@dataclass(frozen=True)
class BuildConfig:
    upsilon: float = DEFAULT_UPSILON
    seed: int = 0
    # exact greedy covers below this blocklength, randomized at and above
    crossover: int = 8
    # scan cap is ceil(len_factor * gamma), i.e. 4 / R_min with R_min = 1 bit
    len_factor: float = 4.0
    draw_cap: int = DRAW_CAP

    def max_len(self, gamma: float) -> int:
        return max(1, math.ceil(self.len_factor * gamma - 1e-12))


def canonical_spec(spec: DistortionSpec) -> DistortionSpec:
    """Snap the matrix and level onto their rational grid so files round-trip exactly."""
    g, unit = spec.grid()
    matrix = tuple(tuple(float(int(v) * unit) for v in row) for row in g)
    return DistortionSpec(matrix, float(spec.level_fraction))


@dataclass(frozen=True)
class Entry:
    n: int
    counts: tuple[int, ...]
    codeword: tuple[int, ...]


@dataclass(frozen=True)
class Dictionary:
    gamma: float
    spec: DistortionSpec
    budget: int
    entries: tuple[Entry, ...]
    max_len: int
    upsilon: float = DEFAULT_UPSILON
    seed: int = 0
    crossover: int = 8
    len_factor: float = 4.0

    def __post_init__(self):
        if self.budget < 1:
            raise ValidationError("budget M must be >= 1")

    @property
    def size(self) -> int:
        return len(self.entries)

    @property
    def index_width(self) -> int:
        return max(1, math.ceil(math.log2(self.budget)))

    @property
    def max_blocklength(self) -> int:
        return max((e.n for e in self.entries), default=0)

    @property
    def alphabet_size(self) -> int:
        return self.spec.source_size

    def codeword(self, index: int) -> tuple[int, ...]:
        if not 0 <= index < len(self.entries):
            raise IndexError(f"codeword index {index} outside [0, {len(self.entries)})")
        return self.entries[index].codeword

    @property
    def lookup(self) -> "TypeIndex":
        cached = self.__dict__.get("_lookup")
        if cached is None:
            cached = TypeIndex.from_entries(self.entries)
            object.__setattr__(self, "_lookup", cached)
        return cached

    def types_at(self, n: int) -> list[tuple[int, ...]]:
        return sorted({e.counts for e in self.entries if e.n == n})

    def checksum(self) -> int:
        return zlib.crc32(to_bytes(self)[:-4])


@dataclass
class TypeIndex:
    """Per-type codeword blocks: counts -> (first index, codeword digit matrix)."""

    blocks: dict[tuple[int, ...], tuple[int, np.ndarray]]

    @classmethod
    def from_entries(cls, entries) -> "TypeIndex":
        blocks: dict[tuple[int, ...], list] = {}
        for i, e in enumerate(entries):
            start, words = blocks.setdefault(e.counts, [i, []])
            words.append(e.codeword)
        return cls({k: (v[0], np.array(v[1], dtype=np.uint8)) for k, v in blocks.items()})

    def __contains__(self, counts) -> bool:
        return tuple(counts) in self.blocks


@dataclass
class LevelStats:
    n: int
    types: int
    codewords: int
    terminal: bool
    bound: float

    @property
    def bound_holds(self) -> bool:
        return self.codewords <= self.bound


@dataclass
class BuildResult:
    dictionary: Dictionary
    levels: list[LevelStats]
    coverings: list[Covering]
    degenerate: bool


@dataclass
class GammaChoice:
    gamma: float
    size: int
    trace: list[tuple[float, int, bool]]
    closed_form: float
    monotone: bool = True

    def size_above(self) -> int | None:
        over = [s for g, s, ok in self.trace if not ok and s >= 0 and g > self.gamma]
        return min(over) if over else None


def closed_form_gamma(M: int, alphabet_size: int, upsilon: float, c_gamma: float = 1.0) -> float:
    """``log2 M - (upsilon + |X| - 1) log2 log2 M - c_gamma``; diagnostic only."""
    lm = math.log2(M)
    return lm - (upsilon + alphabet_size - 1) * math.log2(lm) - c_gamma


def distortion_symmetries(spec: DistortionSpec, max_letters: int = 6) -> list[tuple[int, ...]]:
    """Letter permutations ``p`` with ``d(p[x], p[y]) == d(x, y)`` (identity first)."""
    k = spec.source_size
    if k != spec.reproduction_size or k > max_letters:
        return [tuple(range(k))]
    m = spec.matrix
    return [
        p
        for p in itertools.permutations(range(k))
        if all(m[p[x]][p[y]] == m[x][y] for x in range(k) for y in range(k))
    ]


class DictionaryBuilder:
    """Builds dictionaries for one distortion spec, reusing rates and coverings across thresholds."""

    def __init__(self, spec: DistortionSpec, config: BuildConfig | None = None):
        self.spec = canonical_spec(spec)
        self.config = config or BuildConfig()
        self.rates = RateCache()
        self.coverings = CoveringCache()
        self.symmetries = distortion_symmetries(self.spec)

    def _make_covering(self, t: TypeClass) -> Covering:
        cfg = self.config
        if t.n < max(cfg.crossover, 2):
            return cover_exact(t, self.spec, upsilon=cfg.upsilon)
        return cover_randomized(t, self.spec, upsilon=cfg.upsilon, seed=cfg.seed, draw_cap=cfg.draw_cap)

    def covering(self, t: TypeClass) -> Covering:
        # a letter relabeling that preserves d maps coverings onto coverings
        rep, perm = min(
            (tuple(t.counts[p[a]] for a in range(len(p))), p) for p in self.symmetries
        )
        base = self.coverings.get(rep, lambda: self._make_covering(TypeClass(rep)))
        if rep == t.counts:
            return base
        words = tuple(sorted(tuple(perm[y] for y in w) for w in base.codewords))
        return replace(base, type=t, codewords=words)

    def level(self, n: int, gamma: float, max_len: int) -> list[TypeClass]:
        if n == max_len:
            return low_rate_types(n, gamma, self.spec, self.rates)
        return list(transitional_set(n, gamma, self.spec, self.rates).members)

    def size(self, gamma: float, limit: int | None = None) -> tuple[int, bool]:
        """Dictionary size at ``gamma``; stops early once it passes ``limit``."""
        max_len = self.config.max_len(gamma)
        total = 0
        for n in range(1, max_len + 1):
            for t in self.level(n, gamma, max_len):
                total += len(self.covering(t))
                if limit is not None and total > limit:
                    return total, False
        return total, True

    def build(self, gamma: float, budget: int) -> BuildResult:
        if gamma < 0:
            raise ValidationError("gamma must be >= 0")
        cfg = self.config
        max_len = cfg.max_len(gamma)
        entries = []
        levels = []
        used = []
        transitional_seen = False
        for n in range(1, max_len + 1):
            members = self.level(n, gamma, max_len)
            count = 0
            for t in members:
                cov = self.covering(t)
                used.append(cov)
                count += len(cov)
                entries.extend(Entry(n, t.counts, w) for w in cov.codewords)
                if len(entries) > budget:
                    raise BudgetError(
                        f"dictionary at gamma={gamma:.4f} exceeds M={budget}; lower gamma"
                    )
            if n < max_len and members:
                transitional_seen = True
            bound = len(members) * 2.0 ** (gamma + cfg.upsilon * math.log2(n))
            levels.append(LevelStats(n, len(members), count, n == max_len, bound))
        d = Dictionary(
            gamma=float(gamma),
            spec=self.spec,
            budget=int(budget),
            entries=tuple(entries),
            max_len=max_len,
            upsilon=float(cfg.upsilon),
            seed=int(cfg.seed),
            crossover=int(cfg.crossover),
            len_factor=float(cfg.len_factor),
        )
        degenerate = not transitional_seen
        if degenerate:
            log.warning("gamma=%.4f: no transitional types below the scan cap; dictionary is terminal-only", gamma)
        return BuildResult(d, levels, used, degenerate)

    def choose_gamma(self, budget: int, resolution: float = GAMMA_RESOLUTION) -> GammaChoice:
        """Largest ``gamma`` (to ``resolution``) whose dictionary has at most ``budget`` codewords."""
        if budget < 2:
            raise ValidationError("budget M must be >= 2")
        trace: list[tuple[float, int, bool]] = []

        def probe(g):
            try:
                s, ok = self.size(g, limit=budget)
            except CapacityError as exc:
                # a threshold whose coverings cannot be built is rejected
                log.info("gamma=%.4f rejected: %s", g, exc)
                s, ok = -1, False
            trace.append((g, s, ok))
            return s, ok

        lo = 0.0
        s_lo, ok = probe(lo)
        if not ok:
            raise BudgetError(f"M={budget} is too small: even gamma=0 needs {s_lo} codewords")
        hi = 1.0
        while probe(hi)[1]:
            lo, hi = hi, 2 * hi
        while hi - lo > resolution:
            mid = 0.5 * (lo + hi)
            if probe(mid)[1]:
                lo = mid
            else:
                hi = mid
        size = self.size(lo)[0]
        accepted = sorted((g, s) for g, s, ok in trace if ok)
        rejected = [g for g, s, ok in trace if not ok]
        monotone = all(a[1] <= b[1] for a, b in zip(accepted, accepted[1:])) and (
            not rejected or min(rejected) > accepted[-1][0]
        )
        if not monotone:
            log.warning("dictionary size is not monotone in gamma along the bisection trace")
        return GammaChoice(
            gamma=lo,
            size=size,
            trace=trace,
            closed_form=closed_form_gamma(budget, self.spec.source_size, self.config.upsilon),
            monotone=monotone,
        )


def build_dictionary(
    gamma: float, spec: DistortionSpec, budget: int, config: BuildConfig | None = None
) -> Dictionary:
    return DictionaryBuilder(spec, config).build(gamma, budget).dictionary


def choose_gamma(
    budget: int, spec: DistortionSpec, alphabet_size: int | None = None, config: BuildConfig | None = None
) -> GammaChoice:
    if alphabet_size is not None and alphabet_size != spec.source_size:
        raise ValidationError("alphabet size does not match the distortion matrix")
    return DictionaryBuilder(spec, config).choose_gamma(budget)


# ---------------------------------------------------------------------------
# persistence


def _symbol_bits(base: int) -> int:
    return max(1, math.ceil(math.log2(base)))


def _pack_codeword(word: tuple[int, ...], bits: int) -> bytes:
    acc = 0
    for s in word:
        acc = (acc << bits) | s
    total = bits * len(word)
    nbytes = (total + 7) // 8
    acc <<= nbytes * 8 - total
    return acc.to_bytes(nbytes, "big")


def _unpack_codeword(data: bytes, n: int, bits: int) -> tuple[int, ...]:
    acc = int.from_bytes(data, "big")
    acc >>= len(data) * 8 - bits * n
    mask = (1 << bits) - 1
    return tuple((acc >> (bits * (n - 1 - i))) & mask for i in range(n))


def _rational(value: float) -> tuple[int, int]:
    f = Fraction(value).limit_denominator(10**6)
    return f.numerator, f.denominator


def to_bytes(d: Dictionary) -> bytes:
    kx, ky = d.spec.source_size, d.spec.reproduction_size
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<H", FORMAT_VERSION))
    num, den = _rational(d.spec.level)
    out.write(struct.pack("<HHqqdd", kx, ky, num, den, d.gamma, d.upsilon))
    out.write(struct.pack("<QQQ", d.budget, d.size, d.seed))
    out.write(struct.pack("<HHd", d.max_len, d.crossover, d.len_factor))
    for row in d.spec.matrix:
        for v in row:
            out.write(struct.pack("<qq", *_rational(v)))
    bits = _symbol_bits(ky)
    for e in d.entries:
        out.write(struct.pack("<H", e.n))
        out.write(struct.pack(f"<{kx}I", *e.counts))
        out.write(_pack_codeword(e.codeword, bits))
    body = out.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def from_bytes(data: bytes) -> Dictionary:
    if len(data) < 10 or data[:4] != MAGIC:
        raise IntegrityError("not a dictionary file (bad magic)")
    body, tail = data[:-4], data[-4:]
    if zlib.crc32(body) != struct.unpack("<I", tail)[0]:
        raise IntegrityError("dictionary checksum mismatch (file corrupt or truncated)")
    buf = io.BytesIO(body)
    buf.read(4)
    (version,) = struct.unpack("<H", buf.read(2))
    if version != FORMAT_VERSION:
        raise IntegrityError(f"dictionary format version {version}, expected {FORMAT_VERSION}")
    try:
        kx, ky, num, den, gamma, upsilon = struct.unpack("<HHqqdd", buf.read(36))
        budget, size, seed = struct.unpack("<QQQ", buf.read(24))
        max_len, crossover, len_factor = struct.unpack("<HHd", buf.read(12))
        matrix = []
        for _ in range(kx):
            row = []
            for _ in range(ky):
                a, b = struct.unpack("<qq", buf.read(16))
                row.append(float(Fraction(a, b)))
            matrix.append(tuple(row))
        spec = DistortionSpec(tuple(matrix), float(Fraction(num, den)))
        bits = _symbol_bits(ky)
        entries = []
        for _ in range(size):
            (n,) = struct.unpack("<H", buf.read(2))
            counts = struct.unpack(f"<{kx}I", buf.read(4 * kx))
            nbytes = (bits * n + 7) // 8
            word = _unpack_codeword(buf.read(nbytes), n, bits)
            entries.append(Entry(n, tuple(counts), word))
    except struct.error as exc:
        raise IntegrityError(f"dictionary file truncated: {exc}") from exc
    if buf.read(1):
        raise IntegrityError("trailing bytes after dictionary entries")
    return Dictionary(
        gamma=gamma,
        spec=spec,
        budget=budget,
        entries=tuple(entries),
        max_len=max_len,
        upsilon=upsilon,
        seed=seed,
        crossover=crossover,
        len_factor=len_factor,
    )


def save(d: Dictionary, path) -> None:
    Path(path).write_bytes(to_bytes(d))


def load(path) -> Dictionary:
    return from_bytes(Path(path).read_bytes())


class DictionaryStore:
    """Dictionaries by (spec, M), chosen by bisection and cached on disk when ``root`` is set.

    Builders are kept per spec so coverings are shared across budgets.
    """

    def __init__(self, root=None, config: BuildConfig | None = None):
        self.root = Path(root) if root is not None else None
        self.config = config or BuildConfig()
        self._builders: dict = {}
        self._memo: dict = {}

    def key(self, spec: DistortionSpec, budget: int) -> str:
        spec = canonical_spec(spec)
        blob = repr((spec.matrix, spec.level, int(budget), sorted(self.config.__dict__.items())))
        return hashlib.sha256(blob.encode()).hexdigest()[:20]

    def path(self, spec: DistortionSpec, budget: int) -> Path | None:
        if self.root is None:
            return None
        return self.root / f"dict-{self.key(spec, budget)}.vfld"

    def builder(self, spec: DistortionSpec) -> DictionaryBuilder:
        spec = canonical_spec(spec)
        b = self._builders.get(spec)
        if b is None:
            b = self._builders[spec] = DictionaryBuilder(spec, self.config)
        return b

    def get(self, spec: DistortionSpec, budget: int) -> Dictionary:
        k = self.key(spec, budget)
        if k in self._memo:
            return self._memo[k]
        path = self.path(spec, budget)
        if path is not None and path.exists():
            d = load(path)
        else:
            b = self.builder(spec)
            d = b.build(b.choose_gamma(budget).gamma, budget).dictionary
            if path is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
                tmp = path.with_suffix(".tmp")
                save(d, tmp)
                tmp.replace(path)
        self._memo[k] = d
        return d
