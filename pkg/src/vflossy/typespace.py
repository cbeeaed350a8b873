"""Type classes, empirical lossy rates and transitional types."""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Iterator, Sequence

from .errors import CapacityError, ValidationError
from .rd_core import DistortionSpec, Pmf, rate

MAX_TYPE_COUNT = 10**7


@dataclass(frozen=True, order=True)
class TypeClass:
    counts: tuple[int, ...]

    def __post_init__(self):
        counts = tuple(int(c) for c in self.counts)
        object.__setattr__(self, "counts", counts)
        if len(counts) < 1 or any(c < 0 for c in counts):
            raise ValidationError(f"type: invalid counts {counts}")
        if sum(counts) < 1:
            raise ValidationError("type: blocklength must be >= 1")

    @classmethod
    def of(cls, seq: Sequence[int], alphabet_size: int) -> "TypeClass":
        counts = [0] * alphabet_size
        for s in seq:
            counts[s] += 1
        return cls(tuple(counts))

    @property
    def n(self) -> int:
        return sum(self.counts)

    @property
    def alphabet_size(self) -> int:
        return len(self.counts)

    @property
    def pmf(self) -> Pmf:
        return Pmf.from_counts(self.counts)

    def extend(self, letter: int) -> "TypeClass":
        c = list(self.counts)
        c[letter] += 1
        return TypeClass(tuple(c))

    def size(self) -> int:
        """Number of sequences in the class (multinomial coefficient)."""
        out = math.factorial(self.n)
        for c in self.counts:
            out //= math.factorial(c)
        return out


def type_count(n: int, alphabet_size: int) -> int:
    return math.comb(n + alphabet_size - 1, alphabet_size - 1)


def _compositions(n: int, k: int) -> Iterator[tuple[int, ...]]:
    if k == 1:
        yield (n,)
        return
    for first in range(n + 1):
        for rest in _compositions(n - first, k - 1):
            yield (first,) + rest


def enumerate_types(n: int, alphabet_size: int, cap: int = MAX_TYPE_COUNT) -> Iterator[TypeClass]:
    """Every type class of length ``n``, in ascending lexicographic order of counts."""
    if n < 1 or alphabet_size < 2:
        raise ValidationError("enumerate_types needs n >= 1 and alphabet_size >= 2")
    total = type_count(n, alphabet_size)
    if total > cap:
        raise CapacityError(f"{total} type classes at n={n}, |X|={alphabet_size} exceeds cap {cap}")
    for counts in _compositions(n, alphabet_size):
        yield TypeClass(counts)


class RateCache:
    """Memo of ``n * R(Q_T, D)`` keyed by exact counts and the distortion spec.

    Inserts are guarded by a lock so worker threads can share one cache.
    """

    def __init__(self):
        self._data: dict[tuple[tuple[int, ...], DistortionSpec], float] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def get(self, t: TypeClass, spec: DistortionSpec) -> float:
        key = (t.counts, spec)
        value = self._data.get(key)
        if value is not None:
            self.hits += 1
            return value
        self.misses += 1
        value = t.n * rate(t.pmf, spec)
        with self._lock:
            self._data.setdefault(key, value)
        return value

    def clear(self):
        with self._lock:
            self._data.clear()

    def __len__(self) -> int:
        return len(self._data)


def empirical_lossy_rate(t: TypeClass, spec: DistortionSpec, cache: RateCache | None = None) -> float:
    """Total empirical lossy rate ``n * R(Q_T, D)`` in bits."""
    if cache is not None:
        return cache.get(t, spec)
    return t.n * rate(t.pmf, spec)


def is_transitional(
    t: TypeClass, gamma: float, spec: DistortionSpec, cache: RateCache | None = None
) -> bool:
    """Rate at most ``gamma`` now, and some one-letter extension pushes it above."""
    if gamma < 0:
        raise ValidationError("gamma must be >= 0")
    if empirical_lossy_rate(t, spec, cache) > gamma:
        return False
    return any(
        empirical_lossy_rate(t.extend(a), spec, cache) > gamma for a in range(t.alphabet_size)
    )


def crossing_letters(
    t: TypeClass, gamma: float, spec: DistortionSpec, cache: RateCache | None = None
) -> list[int]:
    return [
        a for a in range(t.alphabet_size) if empirical_lossy_rate(t.extend(a), spec, cache) > gamma
    ]


@dataclass(frozen=True)
class TransitionalSet:
    members: tuple[TypeClass, ...]
    n: int
    gamma: float
    size_bound: float

    @property
    def bound_ratio(self) -> float:
        """``|A_n| / n^(|X|-2)``; a value above 1 means the stated bound is exceeded."""
        return len(self.members) / self.size_bound


def transitional_set(
    n: int, gamma: float, spec: DistortionSpec, cache: RateCache | None = None
) -> TransitionalSet:
    k = spec.source_size
    members = tuple(t for t in enumerate_types(n, k) if is_transitional(t, gamma, spec, cache))
    return TransitionalSet(members=members, n=n, gamma=gamma, size_bound=float(n) ** (k - 2))


def low_rate_types(
    n: int, gamma: float, spec: DistortionSpec, cache: RateCache | None = None
) -> list[TypeClass]:
    """All types of length ``n`` with ``n * R(Q_T, D) <= gamma``."""
    return [
        t
        for t in enumerate_types(n, spec.source_size)
        if empirical_lossy_rate(t, spec, cache) <= gamma
    ]
