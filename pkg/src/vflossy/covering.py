"""D-coverings of type classes.

Two constructions share one greedy set-cover core:

* ``cover_exact``: every reproduction sequence that covers at least one
  member is a candidate; greedy picks the candidate covering the most
  still-uncovered members (lowest code on ties).
* ``cover_randomized``: the candidate pool is the distinct sequences among
  ``2^(nR + upsilon*log2 n)`` i.i.d. draws from the optimal reproduction
  marginal of the type.  Greedy then keeps a sub-cover of the pool, and any
  member the pool misses is covered by adding its own nearest reproduction.

Either way the result covers every member of the type, which is what makes
the dictionary D-semifaithful.
"""

from __future__ import annotations

import hashlib
import math
import threading
from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy import sparse

from . import seqs
from .errors import CapacityError, IntegrityError, ValidationError
from .rd_core import DistortionSpec, rate_distortion
from .typespace import TypeClass

DEFAULT_UPSILON = 4.0
MEMBER_CAP = 10**5
PAIR_CAP = 6 * 10**7
DRAW_CAP = 2**22
# members per greedy round when the full adjacency does not fit
SAMPLE_SIZE = 4000


@dataclass(frozen=True)
class Covering:
    type: TypeClass
    codewords: tuple[tuple[int, ...], ...]
    method: str
    upsilon: float = DEFAULT_UPSILON
    rate: float = 0.0
    drawn: int = 0
    draw_clamped: bool = False
    pool_size: int = 0
    pool_coverage: float = 1.0
    augmented: int = 0

    @property
    def n(self) -> int:
        return self.type.n

    def __len__(self) -> int:
        return len(self.codewords)


@dataclass(frozen=True)
class CoveringReport:
    per_symbol_rate: float
    lemma_budget: float
    slack: float


def covering_rate_report(c: Covering) -> CoveringReport:
    """Achieved rate ``log2|C| / n`` against ``R(Q_T, D) + upsilon*log2(n)/n``."""
    n = c.n
    achieved = math.log2(len(c.codewords)) / n if c.codewords else 0.0
    budget = c.rate + c.upsilon * math.log2(n) / n
    return CoveringReport(per_symbol_rate=achieved, lemma_budget=budget, slack=budget - achieved)


def type_seed(seed: int, t: TypeClass) -> int:
    """Per-type generator key, independent of build order."""
    h = hashlib.blake2b(repr((int(seed), t.counts)).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def _nearest(members: np.ndarray, grid: np.ndarray) -> np.ndarray:
    # per-position argmin reproduction letter (first on ties)
    return np.argmin(grid, axis=1).astype(np.uint8)[members]


def _adjacency(
    members: np.ndarray,
    grid: np.ndarray,
    budget: int,
    base: int,
    pool: np.ndarray | None,
    pair_cap: int,
    ball: int,
) -> tuple[np.ndarray, np.ndarray]:
    """(member index, candidate code) pairs with distortion within budget.

    With ``pool`` given only pool codes are kept.
    """
    cost = len(members) * ball
    if cost > pair_cap:
        raise CapacityError(f"covering needs ~{cost:.3g} distance pairs (cap {pair_cap})")
    return seqs.ball_pairs(members, grid, budget, base, pool)


def _greedy(m: int, rows: np.ndarray, codes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Greedy set cover; returns (chosen codes, covered-mask)."""
    covered = np.zeros(m, dtype=bool)
    if rows.size == 0:
        return np.zeros(0, dtype=np.int64), covered
    cand, col = np.unique(codes, return_inverse=True)
    adj = sparse.csr_matrix(
        (np.ones(rows.size, dtype=np.int8), (rows, col)), shape=(m, cand.size)
    )
    by_cand = adj.tocsc()
    gains = np.asarray(by_cand.sum(axis=0)).ravel().astype(np.int64)
    reachable = np.zeros(m, dtype=bool)
    reachable[rows] = True
    left = int(reachable.sum())
    chosen = []
    while left > 0:
        c = int(np.argmax(gains))
        if gains[c] <= 0:
            break
        chosen.append(c)
        hit = by_cand.indices[by_cand.indptr[c] : by_cand.indptr[c + 1]]
        fresh = hit[~covered[hit]]
        covered[fresh] = True
        left -= fresh.size
        if fresh.size:
            sub = adj[fresh]
            gains -= np.bincount(sub.indices, minlength=cand.size)
    return cand[np.array(chosen, dtype=np.int64)], covered


def _finish(t, spec, codes, method, **extra) -> Covering:
    base = spec.reproduction_size
    codes = np.unique(codes)
    words = tuple(tuple(int(v) for v in row) for row in seqs.decode(codes, base, t.n))
    return Covering(type=t, codewords=words, method=method, **extra)


def _check_alphabet(t: TypeClass, spec: DistortionSpec):
    if t.alphabet_size != spec.source_size:
        raise ValidationError("type alphabet does not match the distortion matrix")


def cover_exact(
    t: TypeClass,
    spec: DistortionSpec,
    member_cap: int = MEMBER_CAP,
    pair_cap: int = PAIR_CAP,
    upsilon: float = DEFAULT_UPSILON,
) -> Covering:
    """Greedy set cover over every useful reproduction sequence."""
    _check_alphabet(t, spec)
    if t.size() > member_cap:
        raise CapacityError(
            f"type {t.counts} has {t.size()} members (cap {member_cap}); use cover_randomized"
        )
    grid, _ = spec.grid()
    budget = spec.budget_units(t.n)
    base = spec.reproduction_size
    members = seqs.type_members(t.counts)
    ball = seqs.ball_size(t.counts, grid, budget)
    try:
        rows, codes = _adjacency(members, grid, budget, base, None, pair_cap, ball)
    except CapacityError as exc:
        raise CapacityError(f"{exc}; use cover_randomized") from exc
    chosen, covered = _greedy(len(members), rows, codes)
    if not covered.all():
        raise IntegrityError(f"type {t.counts} has members no reproduction sequence covers")
    rd = rate_distortion(t.pmf, spec)
    return _finish(
        t, spec, chosen, "exact-greedy", upsilon=upsilon, rate=rd.rate, pool_size=int(np.unique(codes).size)
    )


def lemma_draws(n: int, rate: float, upsilon: float) -> float:
    """Number of candidate draws, ``2^(n*rate + upsilon*log2 n)``."""
    return 2.0 ** (n * rate + upsilon * math.log2(n))


@njit(cache=True)
def _draw_codes(raw, n, edges, base):
    # each uint64 yields two 32-bit uniforms; a letter is the number of edges at or below it
    k = raw.size * 2 // n
    out = np.empty(k, dtype=np.int64)
    w = 0
    for i in range(k):
        code = 0
        for _ in range(n):
            r = (raw[w >> 1] >> np.uint64(32 * (w & 1))) & np.uint64(0xFFFFFFFF)
            digit = 0
            for e in edges:
                if r >= e:
                    digit += 1
            code = code * base + digit
            w += 1
        out[i] = code
    return out


def draw_pool(q: np.ndarray, n: int, draws: int, seed: int, chunk: int = 1 << 18) -> np.ndarray:
    """Distinct codes among ``draws`` i.i.d. sequences with letters from ``q``."""
    gen = np.random.Philox(seed)
    base = len(q)
    # letter boundaries on a 32-bit grid; zero-mass letters get empty intervals
    edges = np.minimum(np.round(np.cumsum(q)[:-1] * 2.0**32), 2.0**32).astype(np.uint64)
    codes = np.empty(draws, dtype=np.int64)
    for at in range(0, draws, chunk):
        k = min(chunk, draws - at)
        raw = gen.random_raw((k * n + 1) // 2)
        codes[at : at + k] = _draw_codes(raw, n, edges, base)[:k]
    return np.unique(codes)


def _sampled_greedy(members, grid, budget, base, pool, sample, seed):
    """Greedy rounds on random samples of still-uncovered members.

    Used when the full member-by-ball adjacency is too large.  Each round
    covers every pool-reachable sampled member, then one sweep over the
    whole type updates coverage.  Sampled members the pool cannot reach are
    set aside, so every round makes progress.
    """
    m = len(members)
    rng = np.random.Generator(np.random.Philox(seed))
    covered = np.zeros(m, dtype=bool)
    unreachable = np.zeros(m, dtype=bool)
    chosen = np.zeros(0, dtype=np.int64)
    table = seqs.pool_table(pool)
    while True:
        open_idx = np.flatnonzero(~covered & ~unreachable)
        if open_idx.size == 0:
            break
        pick = np.sort(rng.choice(open_idx, size=min(sample, open_idx.size), replace=False))
        rows, codes = seqs.ball_pairs(members[pick], grid, budget, base, table=table)
        reach = np.zeros(pick.size, dtype=bool)
        reach[rows] = True
        unreachable[pick[~reach]] = True
        if rows.size == 0:
            continue
        new, _ = _greedy(pick.size, rows, codes)
        new = np.setdiff1d(new, chosen)
        chosen = np.union1d(chosen, new)
        idx = np.flatnonzero(~covered)
        covered[idx] = seqs.covered_mask(members[idx], seqs.decode(new, base, members.shape[1]), grid, budget)
    return chosen, covered


def _augment(missing, grid, budget, base, pair_cap, ball) -> np.ndarray:
    """Codes covering ``missing``: greedy over their full balls, else nearest letters."""
    if missing.size == 0:
        return np.zeros(0, dtype=np.int64)
    if len(missing) * ball <= pair_cap:
        rows, codes = seqs.ball_pairs(missing, grid, budget, base)
        chosen, covered = _greedy(len(missing), rows, codes)
        if covered.all():
            return chosen
    return np.unique(seqs.encode(_nearest(missing, grid), base))


def cover_randomized(
    t: TypeClass,
    spec: DistortionSpec,
    upsilon: float = DEFAULT_UPSILON,
    seed: int = 0,
    member_cap: int = 2 * 10**6,
    pair_cap: int = PAIR_CAP,
    draw_cap: int = DRAW_CAP,
    sample: int = SAMPLE_SIZE,
) -> Covering:
    """Random-coding cover from the optimal reproduction marginal, then augmented."""
    _check_alphabet(t, spec)
    n = t.n
    if n < 2:
        raise ValidationError("cover_randomized needs n >= 2")
    if t.size() > member_cap:
        raise CapacityError(f"type {t.counts} has {t.size()} members (cap {member_cap})")
    rd = rate_distortion(t.pmf, spec)
    grid, _ = spec.grid()
    budget = spec.budget_units(n)
    base = spec.reproduction_size
    want = lemma_draws(n, rd.rate, upsilon)
    draws = int(min(math.ceil(want), draw_cap))
    key = type_seed(seed, t)
    pool = draw_pool(rd.output_dist.array, n, draws, key)
    members = seqs.type_members(t.counts)
    ball = seqs.ball_size(t.counts, grid, budget)
    if len(members) * ball <= pair_cap:
        rows, codes = seqs.ball_pairs(members, grid, budget, base, pool)
        chosen, covered = _greedy(len(members), rows, codes)
    else:
        chosen, covered = _sampled_greedy(members, grid, budget, base, pool, sample, key ^ 1)
    pool_coverage = float(covered.mean())
    extra = np.setdiff1d(_augment(members[~covered], grid, budget, base, pair_cap, ball), chosen)
    return _finish(
        t,
        spec,
        np.concatenate([chosen, extra]),
        "randomized-augmented",
        upsilon=upsilon,
        rate=rd.rate,
        drawn=draws,
        draw_clamped=bool(want > draw_cap),
        pool_size=int(pool.size),
        pool_coverage=pool_coverage,
        augmented=int(extra.size),
    )


def uncovered_members(c: Covering, spec: DistortionSpec, samples: int | None = None, seed: int = 0) -> int:
    """Count members of the type that no codeword covers.

    Exhaustive when ``samples`` is None, otherwise over uniformly sampled
    members (random permutations of the type).
    """
    t = c.type
    grid, _ = spec.grid()
    budget = spec.budget_units(t.n)
    words = np.array(c.codewords, dtype=np.uint8).reshape(len(c.codewords), t.n)
    if samples is None:
        members = seqs.type_members(t.counts)
    else:
        rng = np.random.default_rng(seed)
        base = np.repeat(np.arange(t.alphabet_size, dtype=np.uint8), t.counts)
        members = rng.permuted(np.tile(base, (samples, 1)), axis=1)
    if words.shape[0] == 0:
        return int(members.shape[0])
    return int((~seqs.covered_mask(members, words, grid, budget)).sum())


class CoveringCache:
    """Coverings keyed by type; they do not depend on the threshold."""

    def __init__(self):
        self._data: dict = {}
        self._lock = threading.Lock()

    def get(self, key, build):
        value = self._data.get(key)
        if value is None:
            value = build()
            with self._lock:
                value = self._data.setdefault(key, value)
        return value

    def __len__(self):
        return len(self._data)
