"""Independent reference computations used by the tests.

Nothing here calls the solver under test.
"""

import itertools
import math
from fractions import Fraction

import numpy as np


def h2(p: float) -> float:
    if p <= 0 or p >= 1:
        return 0.0
    return -p * math.log2(p) - (1 - p) * math.log2(1 - p)


def binary_hamming_rate(p: float, D: float) -> float:
    if D >= min(p, 1 - p):
        return 0.0
    return h2(p) - h2(D)


def entropy(p) -> float:
    return -sum(v * math.log2(v) for v in p if v > 0)


def varentropy(p) -> float:
    h = entropy(p)
    return sum(v * (-math.log2(v) - h) ** 2 for v in p if v > 0)


def brute_ball_measure(x, q, matrix, D) -> Fraction:
    """Q^n of {y : sum d(x_i, y_i) <= n D} by enumerating every y."""
    n = len(x)
    fq = [Fraction(v) for v in q]
    fm = [[Fraction(v).limit_denominator(10**6) for v in row] for row in matrix]
    limit = n * Fraction(D).limit_denominator(10**6)
    total = Fraction(0)
    for y in itertools.product(range(len(q)), repeat=n):
        if sum(fm[a][b] for a, b in zip(x, y)) <= limit:
            m = Fraction(1)
            for b in y:
                m *= fq[b]
            total += m
    return total


def min_set_cover_size(universe, sets) -> int:
    """Exact minimum cover by increasing subset size."""
    universe = frozenset(universe)
    sets = [frozenset(s) & universe for s in sets]
    for k in range(1, len(sets) + 1):
        for combo in itertools.combinations(sets, k):
            if frozenset().union(*combo) == universe:
                return k
    raise ValueError("no cover")


def hamming(a, b) -> int:
    return sum(u != v for u, v in zip(a, b))


def r0_grid_binary(P, Q, D, steps=400) -> float:
    """inf over binary test channels W(u|x) of I(X;U) + D(P_U || Q) with E d <= D, by grid search."""
    best = math.inf
    for i in range(steps + 1):
        a = i / steps  # W(1|0)
        for j in range(steps + 1):
            b = j / steps  # W(0|1)
            dist = P[0] * a + P[1] * b
            if dist > D + 1e-12:
                continue
            pu1 = P[0] * a + P[1] * (1 - b)
            pu = (1 - pu1, pu1)
            mi = 0.0
            for x, w in ((0, (1 - a, a)), (1, (b, 1 - b))):
                for u in (0, 1):
                    if w[u] > 0 and P[x] > 0:
                        mi += P[x] * w[u] * math.log2(w[u] / pu[u])
            kl = sum(pu[u] * math.log2(pu[u] / Q[u]) for u in (0, 1) if pu[u] > 0)
            best = min(best, mi + kl)
    return best


def multinomial_tail(p, n, thr) -> float:
    """Exact binary mass of {k : ||(k/n, 1-k/n) - p||_2 > thr} via math.comb."""
    total = 0.0
    for k in range(n + 1):
        q = (k / n, 1 - k / n)
        if math.dist(q, p) > thr:
            total += math.comb(n, k) * p[0] ** k * p[1] ** (n - k)
    return total


def binary_ball_measures(n, q, D) -> list:
    """Exact Q^n(B(x, D)) under Hamming distortion for every binary x of length n.

    Entry ``i`` belongs to the x whose bits, most significant first, spell ``i``
    (the order of ``itertools.product((0, 1), repeat=n)``).
    """
    ys = np.arange(2**n)
    pop = np.array([bin(v).count("1") for v in range(2**n)])
    radius = math.floor(Fraction(D).limit_denominator(10**6) * n)
    q0, q1 = Fraction(q[0]), Fraction(q[1])
    weight = [q0 ** (n - j) * q1**j for j in range(n + 1)]
    out = []
    for x in range(2**n):
        ok = pop[x ^ ys] <= radius
        per_weight = np.bincount(pop[ys[ok]], minlength=n + 1)
        out.append(sum(int(c) * w for c, w in zip(per_weight, weight)))
    return out
