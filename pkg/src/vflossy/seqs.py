"""Vectorised helpers for fixed-length sequences over small alphabets.

Sequences are held as ``uint8`` digit matrices (one row per sequence) or as
``int64`` codes in base ``b`` with position 0 most significant, so numeric
order of codes is lexicographic order of sequences.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .errors import CapacityError


def max_code_length(base: int) -> int:
    length = 0
    while base ** (length + 1) < 2**62:
        length += 1
    return length


def encode(digits: np.ndarray, base: int) -> np.ndarray:
    digits = np.atleast_2d(np.asarray(digits))
    if digits.shape[1] > max_code_length(base):
        raise CapacityError(f"sequences of length {digits.shape[1]} do not fit a 62-bit code")
    codes = np.zeros(digits.shape[0], dtype=np.int64)
    for col in range(digits.shape[1]):
        codes = codes * base + digits[:, col].astype(np.int64)
    return codes


def decode(codes: np.ndarray, base: int, n: int) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64).copy()
    out = np.empty((codes.shape[0], n), dtype=np.uint8)
    for col in range(n - 1, -1, -1):
        out[:, col] = codes % base
        codes //= base
    return out


def type_members(counts: tuple[int, ...], limit: int | None = None) -> np.ndarray:
    """All sequences with the given letter counts, lexicographically sorted."""
    n = sum(counts)
    k = len(counts)
    rows = np.zeros((1, 0), dtype=np.uint8)
    remaining = np.array([counts], dtype=np.int64)
    for pos in range(n):
        parts_rows = []
        parts_rem = []
        parents = []
        for a in range(k):
            sel = np.nonzero(remaining[:, a] > 0)[0]
            if sel.size == 0:
                continue
            new_rows = np.empty((sel.size, pos + 1), dtype=np.uint8)
            new_rows[:, :pos] = rows[sel]
            new_rows[:, pos] = a
            rem = remaining[sel].copy()
            rem[:, a] -= 1
            parts_rows.append(new_rows)
            parts_rem.append(rem)
            parents.append(sel * k + a)
        order = np.argsort(np.concatenate(parents), kind="stable")
        rows = np.concatenate(parts_rows)[order]
        remaining = np.concatenate(parts_rem)[order]
        if limit is not None and rows.shape[0] > limit:
            raise CapacityError(f"type class {counts} has more than {limit} members")
    return rows


def pack_bits(digits: np.ndarray) -> np.ndarray:
    """Binary digit rows to ``uint64`` bitmasks (position 0 is the high bit)."""
    return encode(digits, 2).astype(np.uint64)


def distortion_units(xs: np.ndarray, ys: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Pairwise total distortion (grid units) between rows of ``xs`` and ``ys``."""
    xs = np.atleast_2d(xs)
    ys = np.atleast_2d(ys)
    n = xs.shape[1]
    if grid.shape == (2, 2) and n <= 62:
        bx = pack_bits(xs)[:, None]
        by = pack_bits(ys)[None, :]
        mask = np.uint64((1 << n) - 1)
        n11 = np.bitwise_count(bx & by).astype(np.int64)
        n10 = np.bitwise_count(bx & ~by & mask).astype(np.int64)
        n01 = np.bitwise_count(~bx & by & mask).astype(np.int64)
        n00 = n - n11 - n10 - n01
        return grid[0, 0] * n00 + grid[0, 1] * n01 + grid[1, 0] * n10 + grid[1, 1] * n11
    acc = np.zeros((xs.shape[0], ys.shape[0]), dtype=np.int64)
    for pos in range(n):
        acc += grid[xs[:, pos][:, None], ys[:, pos][None, :]]
    return acc


def ball_size(counts: tuple[int, ...], grid: np.ndarray, budget: int) -> int:
    """Number of reproduction sequences within ``budget`` units of any member of the type."""
    ways = np.zeros(budget + 1, dtype=object)
    ways[0] = 1
    for a, c in enumerate(counts):
        for _ in range(c):
            nxt = np.zeros(budget + 1, dtype=object)
            for y in range(grid.shape[1]):
                g = int(grid[a, y])
                if g <= budget:
                    nxt[g:] += ways[: budget + 1 - g]
            ways = nxt
    return int(ways.sum())


@njit(cache=True)
def _table_of(pool):
    # open addressing, linear probing, load factor <= 1/2; -1 marks an empty slot
    bits = 1
    while (1 << bits) < 2 * max(pool.size, 1):
        bits += 1
    table = np.full(1 << bits, -1, dtype=np.int64)
    mask = (1 << bits) - 1
    for c in pool:
        h = _slot(c, mask)
        while table[h] != -1 and table[h] != c:
            h = (h + 1) & mask
        table[h] = c
    return table


@njit(cache=True, inline="always")
def _slot(c, mask):
    return np.int64((np.uint64(c) * np.uint64(0x9E3779B97F4A7C15)) >> np.uint64(32)) & mask


@njit(cache=True)
def _in_table(table, c):
    mask = table.size - 1
    h = _slot(c, mask)
    while True:
        v = table[h]
        if v == c:
            return True
        if v == -1:
            return False
        h = (h + 1) & mask


def pool_table(pool: np.ndarray) -> np.ndarray:
    """Hash set over pool codes for :func:`ball_pairs`."""
    return _table_of(np.ascontiguousarray(pool, dtype=np.int64))


@njit(cache=True)
def _ball_walk(members, grid, budget, base, table, use_pool, cap):
    m, n = members.shape
    ky = grid.shape[1]
    rowmin = np.empty(grid.shape[0], dtype=np.int64)
    for a in range(grid.shape[0]):
        rowmin[a] = grid[a].min()
    tail = np.empty(n + 1, dtype=np.int64)
    choice = np.empty(n, dtype=np.int64)
    used = np.empty(n + 1, dtype=np.int64)
    code = np.empty(n + 1, dtype=np.int64)
    rows = np.empty(cap, dtype=np.int64)
    codes = np.empty(cap, dtype=np.int64)
    out = 0
    for i in range(m):
        x = members[i]
        tail[n] = 0
        for pos in range(n - 1, -1, -1):
            tail[pos] = tail[pos + 1] + rowmin[x[pos]]
        used[0] = 0
        code[0] = 0
        pos = 0
        choice[0] = -1
        while pos >= 0:
            choice[pos] += 1
            y = choice[pos]
            if y >= ky:
                pos -= 1
                continue
            u = used[pos] + grid[x[pos], y]
            if u + tail[pos + 1] > budget:
                continue
            c = code[pos] * base + y
            if pos == n - 1:
                if use_pool and not _in_table(table, c):
                    continue
                if out == rows.size:
                    grown = max(2 * rows.size, 1024)
                    r2 = np.empty(grown, dtype=np.int64)
                    c2 = np.empty(grown, dtype=np.int64)
                    r2[:out] = rows
                    c2[:out] = codes
                    rows = r2
                    codes = c2
                rows[out] = i
                codes[out] = c
                out += 1
                continue
            used[pos + 1] = u
            code[pos + 1] = c
            pos += 1
            choice[pos] = -1
    return rows[:out], codes[:out]


def ball_pairs(
    members: np.ndarray,
    grid: np.ndarray,
    budget: int,
    base: int,
    pool: np.ndarray | None = None,
    table: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """(member index, reproduction code) for every pair within ``budget`` units.

    With ``pool`` (or its prebuilt ``table``) only codes present in it are returned.
    """
    members = np.ascontiguousarray(members, dtype=np.uint8)
    grid = np.ascontiguousarray(grid, dtype=np.int64)
    if table is None and pool is not None:
        table = pool_table(pool)
    use_pool = table is not None
    if table is None:
        table = np.full(2, -1, dtype=np.int64)
    rows, codes = _ball_walk(members, grid, int(budget), int(base), table, use_pool, 1 << 16)
    return rows.copy(), codes.copy()


@njit(cache=True)
def _covered(members, words, grid, budget, out):
    m, n = members.shape
    for i in range(m):
        if out[i]:
            continue
        for w in range(words.shape[0]):
            acc = 0
            for pos in range(n):
                acc += grid[members[i, pos], words[w, pos]]
                if acc > budget:
                    break
            if acc <= budget:
                out[i] = True
                break


def covered_mask(members: np.ndarray, words: np.ndarray, grid: np.ndarray, budget: int) -> np.ndarray:
    """True for each member within ``budget`` units of some word."""
    out = np.zeros(len(members), dtype=np.bool_)
    if len(members) and len(words):
        _covered(
            np.ascontiguousarray(members, dtype=np.uint8),
            np.ascontiguousarray(words, dtype=np.uint8),
            np.ascontiguousarray(grid, dtype=np.int64),
            int(budget),
            out,
        )
    return out


@njit(cache=True)
def _first_within(xs, words, grid, budget, out_idx, out_units):
    m, n = xs.shape
    for i in range(m):
        out_idx[i] = -1
        for w in range(words.shape[0]):
            acc = 0
            for pos in range(n):
                acc += grid[xs[i, pos], words[w, pos]]
                if acc > budget:
                    break
            if acc <= budget:
                out_idx[i] = w
                out_units[i] = acc
                break


def first_within(xs: np.ndarray, words: np.ndarray, grid: np.ndarray, budget: int) -> tuple[np.ndarray, np.ndarray]:
    """Index of the first word within ``budget`` of each row (-1 if none) and its distortion units."""
    idx = np.full(len(xs), -1, dtype=np.int64)
    units = np.zeros(len(xs), dtype=np.int64)
    if len(xs) and len(words):
        _first_within(
            np.ascontiguousarray(xs, dtype=np.uint8),
            np.ascontiguousarray(words, dtype=np.uint8),
            np.ascontiguousarray(grid, dtype=np.int64),
            int(budget),
            idx,
            units,
        )
    return idx, units
