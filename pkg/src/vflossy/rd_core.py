"""Rate-distortion engine.

Everything here works on a finite source alphabet and a finite reproduction
alphabet with a separable distortion measure.  Rates are in bits; the
internal solver works in nats and converts on the way out.

The solver is Blahut-Arimoto parametrised by the slope: for a fixed slope
``beta`` (nats per unit distortion) the channel/output pair is found by
alternating minimisation, and an outer bisection on ``beta`` makes the
expected distortion hit the target level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from typing import Sequence

import numpy as np
from numba import njit
from scipy.optimize import brentq

from .errors import (
    ConvergenceError,
    GradientMismatchError,
    InfeasibleError,
    QuantizationError,
    ValidationError,
)

LN2 = math.log(2.0)
LOG2E = 1.0 / LN2
PMF_TOL = 1e-12
DEFAULT_TOL = 1e-9
MAX_DENOMINATOR = 10**6

# solver mode codes returned by the kernel
_MODE_ZERO_RATE = 0
_MODE_SLOPE = 1
_MODE_MIN_DISTORTION = 2


@dataclass(frozen=True)
class Pmf:
    """Probability mass function on ``{0, ..., k-1}``."""

    probs: tuple[float, ...]

    def __post_init__(self):
        probs = tuple(float(v) for v in self.probs)
        object.__setattr__(self, "probs", probs)
        if len(probs) == 0:
            raise ValidationError("pmf: empty probability vector")
        for i, v in enumerate(probs):
            if not math.isfinite(v) or v < 0.0:
                raise ValidationError(f"pmf: entry {i} is {v!r}, must be finite and >= 0")
        total = math.fsum(probs)
        if abs(total - 1.0) > PMF_TOL:
            raise ValidationError(f"pmf: entries sum to {total!r}, expected 1")

    @classmethod
    def from_counts(cls, counts: Sequence[int]) -> "Pmf":
        n = sum(counts)
        if n <= 0:
            raise ValidationError("pmf: counts must have a positive total")
        return cls(tuple(c / n for c in counts))

    @classmethod
    def normalized(cls, weights: Sequence[float]) -> "Pmf":
        w = np.asarray(weights, dtype=float)
        return cls(tuple(w / w.sum()))

    @cached_property
    def array(self) -> np.ndarray:
        a = np.array(self.probs, dtype=float)
        a.flags.writeable = False
        return a

    def __len__(self) -> int:
        return len(self.probs)

    def entropy(self) -> float:
        return -sum(p * math.log2(p) for p in self.probs if p > 0.0)


def as_pmf(value) -> Pmf:
    return value if isinstance(value, Pmf) else Pmf(tuple(value))


@dataclass(frozen=True)
class DistortionSpec:
    """Per-letter distortion matrix ``d[x][y]`` and the fidelity level ``D``."""

    matrix: tuple[tuple[float, ...], ...]
    level: float

    def __post_init__(self):
        rows = tuple(tuple(float(v) for v in row) for row in self.matrix)
        object.__setattr__(self, "matrix", rows)
        object.__setattr__(self, "level", float(self.level))
        if not rows or not rows[0]:
            raise ValidationError("distortion: empty matrix")
        width = len(rows[0])
        for x, row in enumerate(rows):
            if len(row) != width:
                raise ValidationError(f"distortion: row {x} has {len(row)} entries, expected {width}")
            for y, v in enumerate(row):
                if not math.isfinite(v) or v < 0.0:
                    raise ValidationError(f"distortion: entry d[{x}][{y}]={v!r} must be finite and >= 0")
        if not math.isfinite(self.level) or self.level < 0.0:
            raise ValidationError(f"distortion: level D={self.level!r} must be finite and >= 0")

    @classmethod
    def hamming(cls, size: int, level: float) -> "DistortionSpec":
        return cls(tuple(tuple(0.0 if x == y else 1.0 for y in range(size)) for x in range(size)), level)

    def with_level(self, level: float) -> "DistortionSpec":
        return DistortionSpec(self.matrix, level)

    @property
    def source_size(self) -> int:
        return len(self.matrix)

    @property
    def reproduction_size(self) -> int:
        return len(self.matrix[0])

    @cached_property
    def array(self) -> np.ndarray:
        a = np.array(self.matrix, dtype=float)
        a.flags.writeable = False
        return a

    @property
    def d_max(self) -> float:
        return float(self.array.max())

    @cached_property
    def _grid(self) -> tuple[np.ndarray, Fraction]:
        fracs = []
        for x, row in enumerate(self.matrix):
            out = []
            for y, v in enumerate(row):
                f = Fraction(v).limit_denominator(MAX_DENOMINATOR)
                if abs(float(f) - v) > 1e-12 * max(1.0, abs(v)):
                    raise QuantizationError(
                        f"distortion: entry d[{x}][{y}]={v!r} has no rational form "
                        f"with denominator <= {MAX_DENOMINATOR}"
                    )
                out.append(f)
            fracs.append(out)
        den = 1
        for row in fracs:
            for f in row:
                den = math.lcm(den, f.denominator)
        unit = Fraction(1, den)
        ints = np.array([[int(f / unit) for f in row] for row in fracs], dtype=np.int64)
        return ints, unit

    def grid(self) -> tuple[np.ndarray, Fraction]:
        """Integer matrix ``g`` and unit ``u`` with ``d[x][y] == g[x][y] * u`` exactly."""
        return self._grid

    @cached_property
    def level_fraction(self) -> Fraction:
        f = Fraction(self.level).limit_denominator(MAX_DENOMINATOR)
        if abs(float(f) - self.level) > 1e-12 * max(1.0, self.level):
            raise QuantizationError(f"distortion: level D={self.level!r} has no rational form")
        return f

    def budget_units(self, n: int) -> int:
        """Largest integer total distortion (in grid units) allowed for length ``n``."""
        _, unit = self.grid()
        return math.floor(n * self.level_fraction / unit)

    def sequence_distortion_units(self, x: Sequence[int], y: Sequence[int]) -> int:
        g, _ = self.grid()
        return int(sum(int(g[a, b]) for a, b in zip(x, y)))

    def within(self, x: Sequence[int], y: Sequence[int]) -> bool:
        """Exact test ``d_n(x, y) <= D`` on the rational grid."""
        if len(x) != len(y):
            raise ValidationError("distortion: sequences differ in length")
        return self.sequence_distortion_units(x, y) <= self.budget_units(len(x))


@dataclass(frozen=True)
class RDResult:
    rate: float
    slope: float
    output_dist: Pmf
    iterations: int
    converged: bool
    distortion: float = field(default=math.nan)


@dataclass(frozen=True)
class RDSensitivity:
    gradient: tuple[float, ...]
    hessian_fnorm: float
    dispersion: float
    fd_gradient: tuple[float, ...] = ()
    boundary: bool = False


# ---------------------------------------------------------------------------
# Blahut-Arimoto kernel


# Letters whose mass decays toward zero while sitting near their activation
# threshold make plain alternating minimisation crawl; such letters are
# dropped and revived if the gap certificate later favours them.
PRUNE_EVERY = 256
PRUNE_LOG = math.log(1e-3)
PRUNE_RATIO = 1.0
REVIVE_LOG = math.log(1e-6)


@njit(cache=True)
def _ba_fixed_slope(p, cost, dist, logq, gap_tol, max_iter):
    """Alternating minimisation at one slope, in place on ``logq``.

    ``cost[x, y]`` is ``beta * d(x, y)`` (``inf`` for forbidden pairs).
    Returns (lagrangian_value_nats, expected_distortion, iterations,
    converged, gap), all evaluated at one output distribution.  ``gap``
    bounds how far the value sits above the minimum at this slope.
    """
    nx, ny = cost.shape
    logz = np.empty(nx)
    c = np.empty(ny)
    value = 0.0
    exp_d = 0.0
    it = 0
    converged = False
    while it < max_iter:
        it += 1
        value = 0.0
        for x in range(nx):
            m = -np.inf
            for y in range(ny):
                a = logq[y] - cost[x, y]
                if a > m:
                    m = a
            s = 0.0
            for y in range(ny):
                s += math.exp(logq[y] - cost[x, y] - m)
            logz[x] = m + math.log(s)
            value -= p[x] * logz[x]
        gap = -np.inf
        exp_d = 0.0
        for y in range(ny):
            acc = 0.0
            for x in range(nx):
                if cost[x, y] < np.inf:
                    w = p[x] * math.exp(-cost[x, y] - logz[x])
                    acc += w
                    exp_d += w * math.exp(logq[y]) * dist[x, y]
            c[y] = acc
            if acc > 0.0:
                lc = math.log(acc)
                if lc > gap:
                    gap = lc
        prune = it % PRUNE_EVERY == 0
        for y in range(ny):
            if logq[y] == -np.inf:
                # dropped letter: bring it back once the certificate says it pays
                if c[y] > 0.0 and math.log(c[y]) > gap_tol:
                    logq[y] = REVIVE_LOG
            elif c[y] > 0.0:
                logq[y] = max(logq[y] + math.log(c[y]), -700.0)
                if prune and logq[y] < PRUNE_LOG and c[y] < PRUNE_RATIO:
                    logq[y] = -np.inf
            else:
                logq[y] = -np.inf
        # renormalise against round-off drift
        m = -np.inf
        for y in range(ny):
            if logq[y] > m:
                m = logq[y]
        s = 0.0
        for y in range(ny):
            s += math.exp(logq[y] - m)
        ls = m + math.log(s)
        for y in range(ny):
            logq[y] -= ls
        if gap < gap_tol:
            converged = True
            break
    return value, exp_d, it, converged, gap


@njit(cache=True)
def _rd_solve(p, dist, level, tol, max_iter, max_outer):
    """Full R(P, D) solve.  Returns (rate_nats, beta, q, mode, iterations, converged, exp_d)."""
    nx, ny = dist.shape
    # zero-rate region: one output letter already meets the level
    best = np.inf
    best_y = 0
    for y in range(ny):
        s = 0.0
        for x in range(nx):
            s += p[x] * dist[x, y]
        if s < best:
            best = s
            best_y = y
    if level >= best:
        q = np.zeros(ny)
        q[best_y] = 1.0
        return 0.0, 0.0, q, 0, 0, True, best

    d_min = 0.0
    for x in range(nx):
        m = np.inf
        for y in range(ny):
            if dist[x, y] < m:
                m = dist[x, y]
        d_min += p[x] * m

    gap_tol = tol * math.log(2.0) / 10.0
    logq = np.full(ny, -math.log(ny))
    total_iter = 0

    if level <= d_min * (1.0 + 1e-12) + 1e-15:
        cost = np.empty((nx, ny))
        for x in range(nx):
            m = np.inf
            for y in range(ny):
                if dist[x, y] < m:
                    m = dist[x, y]
            for y in range(ny):
                cost[x, y] = 0.0 if dist[x, y] <= m else np.inf
        value, exp_d, it, ok, _gap = _ba_fixed_slope(p, cost, dist, logq, gap_tol, max_iter)
        return max(value, 0.0), np.inf, np.exp(logq), 2, it, ok, exp_d

    # Every slope evaluation brackets the answer, converged or not:
    #   R(level) >= value - beta * level - gap      (dual bound)
    #   R(exp_d) <= value - beta * exp_d            (primal point on or above the curve)
    # A primal point at or below the level bounds R(level) directly; by
    # convexity so does the chord between points on either side of it.
    # The solve is accepted once the bracket is narrower than the tolerance.
    r_tol = tol * math.log(2.0)
    d_tol = tol * max(1.0, level)
    lower = -np.inf
    upper = np.inf
    above_d = np.inf
    above_u = np.inf
    below_d = -np.inf
    below_u = np.inf
    cost = np.empty((nx, ny))
    lo = 0.0
    hi = 1.0
    beta = hi
    value = 0.0
    exp_d = 0.0
    growing = True
    for step in range(200 + max_outer):
        if growing:
            if step == 200:
                break
            beta = hi
            mix = 1e-3
        else:
            if hi - lo <= 1e-15 * hi or (upper - lower <= r_tol and abs(exp_d - level) < d_tol):
                break
            beta = 0.5 * (lo + hi)
            mix = 1e-6
        value, exp_d, it, gap = _at_slope(p, dist, beta, mix, logq, cost, gap_tol, max_iter)
        total_iter += it
        lower = max(lower, value - beta * level - gap)
        primal = value - beta * exp_d
        if exp_d > level:
            above_d, above_u = exp_d, primal
            lo = beta
            if growing:
                hi = 2.0 * beta
        else:
            below_d, below_u = exp_d, primal
            upper = min(upper, primal)
            hi = beta
            growing = False
        if above_d < np.inf and below_d > -np.inf:
            lam = (level - below_d) / (above_d - below_d)
            upper = min(upper, lam * above_u + (1.0 - lam) * below_u)
    ok = upper - lower <= r_tol
    rate = upper if upper < np.inf else value - beta * level
    return max(rate, 0.0), beta, np.exp(logq), 1, total_iter, ok, exp_d


@njit(cache=True)
def _at_slope(p, dist, beta, mix, logq, cost, gap_tol, max_iter):
    nx, ny = dist.shape
    for x in range(nx):
        for y in range(ny):
            cost[x, y] = beta * dist[x, y]
    # warm start, lightly mixed toward uniform; dropped letters stay dropped
    for y in range(ny):
        if logq[y] > -np.inf:
            logq[y] = math.log((1.0 - mix) * math.exp(logq[y]) + mix / ny)
    value, exp_d, it, _ok, gap = _ba_fixed_slope(p, cost, dist, logq, gap_tol, max_iter)
    return value, exp_d, it, max(gap, 0.0)


def _effective(source: Pmf, spec: DistortionSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if len(source) != spec.source_size:
        raise ValidationError(
            f"source has {len(source)} letters but the distortion matrix has {spec.source_size} rows"
        )
    p = source.array
    keep = p > 0.0
    return p[keep] / p[keep].sum(), np.ascontiguousarray(spec.array[keep]), keep


def min_distortion(source: Pmf, spec: DistortionSpec) -> float:
    p = source.array
    return float(np.dot(p, spec.array.min(axis=1)))


def max_useful_distortion(source: Pmf, spec: DistortionSpec) -> float:
    """Smallest level at which the rate is zero: ``min_y sum_x P(x) d(x, y)``."""
    return float((source.array @ spec.array).min())


def rate_distortion(
    source,
    spec: DistortionSpec,
    tol: float = DEFAULT_TOL,
    max_iter: int = 200_000,
    max_outer: int = 200,
) -> RDResult:
    """Compute ``R(P, D)`` in bits per symbol.

    Letters with zero source probability are dropped before solving.  A
    solve that misses its tolerance comes back with ``converged=False``; it
    is never silently accepted.
    """
    source = as_pmf(source)
    if tol <= 0:
        raise ValidationError("tol must be positive")
    p, dist, _ = _effective(source, spec)
    level = spec.level
    d_min = float(np.dot(p, dist.min(axis=1)))
    if level < d_min - 1e-12 * max(1.0, d_min):
        raise InfeasibleError(
            f"level D={level} is below the minimum achievable distortion {d_min}"
        )
    rate, beta, q, _mode, iters, ok, exp_d = _rd_solve(p, dist, level, tol, max_iter, max_outer)
    q = np.clip(q, 0.0, None)
    q /= q.sum()
    return RDResult(
        rate=float(rate) * LOG2E,
        slope=float(beta) * LOG2E,
        output_dist=Pmf(tuple(q)),
        iterations=int(iters),
        converged=bool(ok),
        distortion=float(exp_d),
    )


def rate(source, spec: DistortionSpec, tol: float = DEFAULT_TOL) -> float:
    """``R(P, D)``; raises :class:`ConvergenceError` instead of returning a flagged result."""
    res = rate_distortion(source, spec, tol)
    if not res.converged:
        raise ConvergenceError(f"rate-distortion solve did not converge for {as_pmf(source).probs}")
    return res.rate


# ---------------------------------------------------------------------------
# gradient, Hessian, dispersion


def kkt_gradient(source, spec: DistortionSpec, result: RDResult | None = None) -> np.ndarray:
    """Gradient of ``R(., D)`` in raw coordinates from the solved slope and output.

    Component ``x`` is the D-tilted information of letter ``x`` minus
    ``log2 e`` (bits).
    """
    source = as_pmf(source)
    if result is None:
        result = rate_distortion(source, spec)
    d = spec.array
    q = result.output_dist.array
    level = spec.level
    if result.rate == 0.0 and result.slope == 0.0:
        # flat region: R is identically zero nearby
        return np.full(len(source), -LOG2E)
    if math.isinf(result.slope):
        dmin = d.min(axis=1)
        tilted = np.array(
            [-math.log2(q[d[x] <= dmin[x]].sum()) for x in range(d.shape[0])]
        )
        return tilted - LOG2E
    lam = result.slope * LN2
    with np.errstate(divide="ignore"):
        logq = np.log(q)
    a = logq[None, :] - lam * (d - level)
    m = a.max(axis=1, keepdims=True)
    logz = (m + np.log(np.exp(a - m).sum(axis=1, keepdims=True))).ravel()
    return -logz * LOG2E - LOG2E


def _tangent_point(p: np.ndarray, offsets: np.ndarray) -> Pmf:
    k = len(p)
    shifted = p + offsets - offsets.sum() / k
    shifted = np.clip(shifted, 0.0, None)
    return Pmf(tuple(shifted / shifted.sum()))


def _center(v: np.ndarray) -> np.ndarray:
    return v - v.mean()


def rd_sensitivity(
    source,
    spec: DistortionSpec,
    step: float = 1e-5,
    hessian_step: float = 1e-3,
    tol: float = 1e-13,
    check: bool = True,
) -> RDSensitivity:
    """Gradient (two ways), Hessian Frobenius norm and dispersion at ``source``.

    Finite differences move along the simplex tangent ``e_i - 1/k``, so they
    only determine the gradient up to an additive constant; the comparison
    with the closed form is made after removing the mean.  The Hessian is
    the tangent-projected one, ``Pi H Pi``, which is the part that enters a
    second-order expansion between two PMFs.
    """
    source = as_pmf(source)
    p = source.array
    k = len(p)
    if step <= 0:
        raise ValidationError("step must be positive")
    boundary = bool(p.min() < step)
    base = rate_distortion(source, spec, tol=tol)
    if not base.converged:
        raise ConvergenceError("rate-distortion solve did not converge at the source")

    def f(offsets):
        res = rate_distortion(_tangent_point(p, offsets), spec, tol=tol)
        if not res.converged:
            raise ConvergenceError("rate-distortion solve did not converge at a perturbed point")
        return res.rate

    kkt = kkt_gradient(source, spec, base)
    fd = np.empty(k)
    for i in range(k):
        e = np.zeros(k)
        e[i] = step
        if p[i] < step:
            # one-sided at the simplex boundary
            fd[i] = (f(e) - base.rate) / step
        else:
            fd[i] = (f(e) - f(-e)) / (2 * step)
    if check:
        err = np.abs(_center(fd) - _center(kkt)).max()
        if not err <= 10 * step:
            raise GradientMismatchError(
                f"finite-difference and closed-form gradients differ by {err:.3g} (> {10 * step:.3g})"
            )

    h = min(hessian_step, 0.5 * float(p.min())) if p.min() > 0 else hessian_step
    h = max(h, step)
    hess = np.empty((k, k))
    for i in range(k):
        for j in range(i, k):
            ei = np.zeros(k)
            ej = np.zeros(k)
            ei[i] = h
            ej[j] = h
            val = (f(ei + ej) - f(ei - ej) - f(-ei + ej) + f(-ei - ej)) / (4 * h * h)
            hess[i, j] = hess[j, i] = val

    mean = float(np.dot(p, kkt))
    dispersion = float(np.dot(p, (kkt - mean) ** 2))
    return RDSensitivity(
        gradient=tuple(float(v) for v in kkt),
        hessian_fnorm=float(np.linalg.norm(hess, "fro")),
        dispersion=dispersion,
        fd_gradient=tuple(float(v) for v in fd),
        boundary=boundary,
    )


# ---------------------------------------------------------------------------
# operational rate R0(P, Q, D)


def operational_rate(source, output, spec: DistortionSpec) -> float:
    """``R0(P, Q, D) = inf_U I(X;U) + D(P_U || Q)`` in bits, via its 1-D concave dual.

    Returns ``math.inf`` when no channel supported on ``Q`` meets the level.
    """
    p = as_pmf(source).array
    q = as_pmf(output).array
    d = spec.array
    level = spec.level
    keep_x = p > 0
    keep_y = q > 0
    p = p[keep_x]
    d = d[keep_x][:, keep_y]
    logq = np.log(q[keep_y])
    dmin = d.min(axis=1)
    floor = float(np.dot(p, dmin))

    def logz(t):
        a = logq[None, :] - t * (d - dmin[:, None])
        m = a.max(axis=1, keepdims=True)
        return (m + np.log(np.exp(a - m).sum(axis=1, keepdims=True))).ravel() - t * dmin

    def slope(t):
        a = logq[None, :] - t * (d - dmin[:, None])
        w = np.exp(a - a.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        return float(np.dot(p, (w * d).sum(axis=1))) - level

    def value(t):
        return (-t * level - float(np.dot(p, logz(t)))) * LOG2E

    if level < floor - 1e-12 * max(1.0, floor):
        return math.inf
    if slope(0.0) <= 0.0:
        return max(value(0.0), 0.0)
    if level <= floor * (1.0 + 1e-12) + 1e-15:
        mass = np.array([np.exp(logq[d[x] <= dmin[x]]).sum() for x in range(len(p))])
        return max(float(-np.dot(p, np.log2(mass))), 0.0)
    hi = 1.0
    while slope(hi) > 0.0:
        hi *= 2.0
        if hi > 1e12:
            return value(hi)
    t = brentq(slope, 0.0, hi, xtol=1e-14, rtol=1e-14, maxiter=500)
    return max(value(t), 0.0)


# ---------------------------------------------------------------------------
# D-ball measure


@dataclass(frozen=True)
class DBallMeasure:
    log2_measure: float
    approximation: float
    measure: Fraction


def dball_measure_exact(x: Sequence[int], output, spec: DistortionSpec) -> Fraction:
    """``Q^n(B(x, D))`` as an exact rational, by DP over the distortion budget."""
    q = [Fraction(v) for v in as_pmf(output).probs]
    g, _ = spec.grid()
    n = len(x)
    if n == 0:
        raise ValidationError("dball: empty sequence")
    budget = spec.budget_units(n)
    if budget < 0:
        return Fraction(0)
    mass = [Fraction(0)] * (budget + 1)
    mass[0] = Fraction(1)
    for a in x:
        row = g[a]
        nxt = [Fraction(0)] * (budget + 1)
        for used, m in enumerate(mass):
            if not m:
                continue
            for y, qy in enumerate(q):
                if not qy:
                    continue
                c = used + int(row[y])
                if c <= budget:
                    nxt[c] += m * qy
        mass = nxt
    return sum(mass, Fraction(0))


def _log2_fraction(f: Fraction) -> float:
    if f <= 0:
        return -math.inf
    # exact-rational log2 without float underflow
    return (math.log2(f.numerator) if f.numerator < 2**1000 else _log2_big(f.numerator)) - (
        math.log2(f.denominator) if f.denominator < 2**1000 else _log2_big(f.denominator)
    )


def _log2_big(v: int) -> float:
    shift = v.bit_length() - 64
    return math.log2(v >> shift) + shift


def dball_log_measure(x: Sequence[int], output, spec: DistortionSpec) -> DBallMeasure:
    """Exact ``log2 Q^n(B(x, D))`` plus the asymptotic form ``-n R0(Q_x, Q, D) - log2(n)/2``."""
    x = [int(v) for v in x]
    k = spec.source_size
    if any(v < 0 or v >= k for v in x):
        raise ValidationError("dball: source symbol out of range")
    exact = dball_measure_exact(x, output, spec)
    n = len(x)
    counts = np.bincount(x, minlength=k)
    r0 = operational_rate(Pmf.from_counts(counts), output, spec)
    approx = -n * r0 - 0.5 * math.log2(n)
    return DBallMeasure(log2_measure=_log2_fraction(exact), approximation=approx, measure=exact)
