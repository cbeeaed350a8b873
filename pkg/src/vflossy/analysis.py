"""Monte-Carlo estimation of the epsilon-coding rate and the finite-M bound.

Randomness comes from one Philox stream per master seed: trial ``i`` reads
a fixed-width row of uniforms starting at counter block ``i * width / 4``,
so any trial can be regenerated alone and results do not depend on
chunking or worker count.  Every grid point with the same master seed
sees the same uniforms (common random numbers).
"""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass
from typing import Iterator, Sequence

import numpy as np
from scipy import special, stats

from .codec import Parser
from .dictionary import Dictionary
from .errors import GradientMismatchError, ValidationError
from .rd_core import DistortionSpec, Pmf, as_pmf, rate_distortion, rd_sensitivity
from .typespace import RateCache, TypeClass, enumerate_types, transitional_set

log = logging.getLogger(__name__)

CHUNK = 16384
BOOTSTRAP = 500
CSV_COLUMNS = (
    "p", "D", "M", "epsilon", "R_empirical", "bound", "R", "sigma", "C_H", "trials", "ci_lo", "ci_hi",
    "gamma", "max_len", "mean_length", "top_fraction",
)


# ---------------------------------------------------------------------------
# random streams


def _row_width(width: int) -> int:
    return 4 * ((width + 3) // 4)


def trial_uniforms(seed: int, start: int, count: int, width: int) -> np.ndarray:
    """Uniforms for trials ``start .. start+count-1``, one row each."""
    w4 = _row_width(width)
    bg = np.random.Philox(key=int(seed))
    bg.advance(start * (w4 // 4))
    u = np.random.Generator(bg).random((count, w4))
    return u[:, :width]


def letters(u: np.ndarray, source) -> np.ndarray:
    """Map uniforms to symbols by inverse CDF (letters with zero mass never appear)."""
    p = as_pmf(source).array
    edges = np.cumsum(p)[:-1]
    out = np.zeros(u.shape, dtype=np.uint8)
    for e in edges:
        out += u >= e
    return out


def sample_stream(source, n: int, seed: int) -> np.ndarray:
    if n < 1:
        raise ValidationError("n must be >= 1")
    return letters(trial_uniforms(seed, 0, 1, n)[0], source)


def sample_check(x: np.ndarray, source) -> tuple[float, bool]:
    """L1 gap between empirical and true PMF; flags gaps above 5|X|/sqrt(n)."""
    p = as_pmf(source).array
    q = np.bincount(x, minlength=len(p)) / len(x)
    gap = float(np.abs(q - p).sum())
    return gap, gap < 5 * len(p) / math.sqrt(len(x))


# ---------------------------------------------------------------------------
# trials


@dataclass(frozen=True)
class TrialRecord:
    seed: int
    index: int
    length: int
    rate_sample: float
    distortion: float


@dataclass
class TrialSet:
    seed: int
    index_width: int
    lengths: np.ndarray
    indices: np.ndarray
    units: np.ndarray
    unit: float
    top: int

    @property
    def trials(self) -> int:
        return int(self.lengths.size)

    @property
    def rates(self) -> np.ndarray:
        return self.index_width / self.lengths

    @property
    def distortions(self) -> np.ndarray:
        return self.units * self.unit / self.lengths

    def records(self) -> Iterator[TrialRecord]:
        r = self.rates
        dist = self.distortions
        for i in range(self.trials):
            yield TrialRecord(self.seed, i, int(self.lengths[i]), float(r[i]), float(dist[i]))


def run_trials(
    source, d: Dictionary, trials: int, seed: int, rule: str = "first-transitional", chunk: int = CHUNK
) -> TrialSet:
    """One-shot parses of ``trials`` independent streams."""
    if trials < 1:
        raise ValidationError("trials must be >= 1")
    source = as_pmf(source)
    if len(source) != d.alphabet_size:
        raise ValidationError("source alphabet does not match the dictionary")
    parser = Parser(d, rule)
    lengths, indices, units = [], [], []
    for start in range(0, trials, chunk):
        k = min(chunk, trials - start)
        x = letters(trial_uniforms(seed, start, k, parser.top), source)
        ell = parser.stop_lengths(x)
        idx, u = parser.lookup(x, ell)
        lengths.append(ell)
        indices.append(idx)
        units.append(u)
    _, unit = d.spec.grid()
    return TrialSet(
        seed=seed,
        index_width=d.index_width,
        lengths=np.concatenate(lengths).astype(np.int64),
        indices=np.concatenate(indices),
        units=np.concatenate(units),
        unit=float(unit),
        top=parser.top,
    )


# ---------------------------------------------------------------------------
# estimators


@dataclass(frozen=True)
class Estimate:
    value: float
    lo: float
    hi: float
    trials: int


def wilson_interval(successes: int, n: int, z: float = 1.959963984540054) -> tuple[float, float]:
    if n == 0:
        return 0.0, 1.0
    ph = successes / n
    denom = 1 + z * z / n
    centre = (ph + z * z / (2 * n)) / denom
    half = z * math.sqrt(ph * (1 - ph) / n + z * z / (4 * n * n)) / denom
    lo = 0.0 if successes == 0 else max(0.0, centre - half)
    hi = 1.0 if successes == n else min(1.0, centre + half)
    return lo, hi


def overflow_from_rates(rates: np.ndarray, R: float, strict: bool = False) -> Estimate:
    """Fraction of samples with rate >= R (or > R when ``strict``), with a Wilson 95% interval."""
    hits = int((rates > R).sum() if strict else (rates >= R).sum())
    lo, hi = wilson_interval(hits, rates.size)
    return Estimate(hits / rates.size, lo, hi, int(rates.size))


def overflow_probability(
    source, d: Dictionary, R: float, trials: int, seed: int, rule: str = "first-transitional"
) -> Estimate:
    return overflow_from_rates(run_trials(source, d, trials, seed, rule).rates, R)


def _quantile_from_counts(values: np.ndarray, counts: np.ndarray, eps: float) -> float:
    # smallest value v with P(rate > v) <= eps
    total = counts.sum()
    above = total - np.cumsum(counts)
    ok = np.flatnonzero(above <= eps * total + 1e-9 * total)
    return float(values[ok[0]])


def rate_quantile(rates: np.ndarray, eps: float) -> float:
    """Empirical ``(1 - eps)``-quantile: the smallest sample ``R`` with ``P(rate > R) <= eps``."""
    if not 0 < eps < 1:
        raise ValidationError("epsilon must lie strictly between 0 and 1")
    values, counts = np.unique(rates, return_counts=True)
    return _quantile_from_counts(values, counts, eps)


def bootstrap_quantile(
    rates: np.ndarray, eps: float, resamples: int = BOOTSTRAP, seed: int = 0, level: float = 0.95
) -> tuple[float, float]:
    """Percentile bootstrap interval; resampling is done on the counts of distinct values."""
    values, counts = np.unique(rates, return_counts=True)
    rng = np.random.Generator(np.random.Philox(key=int(seed) ^ 0x5EED))
    draws = rng.multinomial(rates.size, counts / rates.size, size=resamples)
    qs = np.array([_quantile_from_counts(values, c, eps) for c in draws])
    a = (1 - level) / 2
    return float(np.quantile(qs, a)), float(np.quantile(qs, 1 - a))


def epsilon_coding_rate(
    source, d: Dictionary, eps: float, trials: int, seed: int, rule: str = "first-transitional"
) -> Estimate:
    if trials < 100 / eps:
        log.warning("trials=%d is below 100/eps=%.0f; the quantile is poorly resolved", trials, 100 / eps)
    rates = run_trials(source, d, trials, seed, rule).rates
    lo, hi = bootstrap_quantile(rates, eps, seed=seed)
    return Estimate(rate_quantile(rates, eps), lo, hi, trials)


# ---------------------------------------------------------------------------
# bound


def q_inverse(eps: float) -> float:
    """Upper-tail inverse of the standard normal: ``Q(x) = eps``."""
    if not 0 < eps < 1:
        raise ValidationError("epsilon must lie strictly between 0 and 1")
    return float(-special.ndtri(eps))


@dataclass(frozen=True)
class BoundInputs:
    source: Pmf
    spec: DistortionSpec
    M: int
    eps: float
    upsilon: float
    C_H: float

    def __post_init__(self):
        object.__setattr__(self, "source", as_pmf(self.source))
        if not 0 < self.eps < 1:
            raise ValidationError("epsilon must lie strictly between 0 and 1")
        if not all(map(math.isfinite, (self.upsilon, self.C_H))):
            raise ValidationError("upsilon and C_H must be finite")
        if self.M < 3:
            raise ValidationError("M must exceed 2 so that log2 log2 M > 0")


@dataclass(frozen=True)
class Bound:
    value: float
    rate: float
    sigma: float
    second: float
    third: float
    slack: float
    c_third: float


def theorem_bound(b: BoundInputs, slack_c: float = 0.0) -> Bound:
    """``R + sigma sqrt(R / log M) Qinv(eps) + C_third R loglog M / log M + c / log M``."""
    rd = rate_distortion(b.source, b.spec)
    R = rd.rate
    sigma = math.sqrt(dispersion(b.source, b.spec)) if R > 0 else 0.0
    lm = math.log2(b.M)
    k = len(b.source)
    c_third = b.upsilon + k - 1 + b.C_H * (1 + k)
    second = sigma * math.sqrt(R / lm) * q_inverse(b.eps)
    third = c_third * R * math.log2(lm) / lm
    slack = slack_c / lm
    return Bound(R + second + third + slack, R, sigma, second, third, slack, c_third)


def dispersion(source, spec: DistortionSpec) -> float:
    p = as_pmf(source)
    if min(p.probs) <= 0:
        return rd_sensitivity(p, spec, check=False).dispersion
    return rd_sensitivity(p, spec).dispersion


def neighborhood_radius(M: int, R: float, alphabet_size: int) -> float:
    """``sqrt(2 + 2|X|) * sqrt(ln n_R / n_R)`` with ``n_R = log2 M / R``."""
    n_r = math.log2(M) / R
    return math.sqrt(2 + 2 * alphabet_size) * math.sqrt(math.log(n_r) / n_r)


@dataclass(frozen=True)
class HessianBound:
    C_H: float
    radius: float
    evaluated: int
    skipped: int
    argmax: tuple[float, ...]


def hessian_bound(
    source, spec: DistortionSpec, M: int, points: int = 13, floor: float = 0.01, h: float = 1e-3
) -> HessianBound:
    """Largest Hessian Frobenius norm over a grid on the L2 neighborhood of ``source``.

    Grid points within ``2h`` of the zero-rate boundary are skipped, since a
    second difference across that kink is not a Hessian.
    """
    p = as_pmf(source).array
    k = len(p)
    R = rate_distortion(p, spec).rate
    radius = neighborhood_radius(M, R, k) if R > 0 else 0.0
    axes = [np.linspace(p[i] - radius, p[i] + radius, points) for i in range(k - 1)]
    best, arg = 0.0, tuple(p)
    done = skipped = 0
    for free in itertools.product(*axes):
        q = np.append(free, 1 - sum(free))
        if q.min() < floor or np.linalg.norm(q - p) > radius + 1e-12:
            continue
        if _near_kink(q, spec, 2 * h):
            skipped += 1
            continue
        try:
            s = rd_sensitivity(Pmf(tuple(q / q.sum())), spec, hessian_step=h)
        except GradientMismatchError:
            skipped += 1
            continue
        done += 1
        if s.hessian_fnorm > best:
            best, arg = s.hessian_fnorm, tuple(float(v) for v in q)
    return HessianBound(best, radius, done, skipped, arg)


def _near_kink(q: np.ndarray, spec: DistortionSpec, r: float) -> bool:
    k = len(q)
    zero = rate_distortion(q / q.sum(), spec).rate <= 1e-12
    for i in range(k):
        for sign in (1.0, -1.0):
            v = q.copy()
            v[i] += sign * r
            v -= sign * r / k
            if v.min() <= 0:
                continue
            if (rate_distortion(v / v.sum(), spec).rate <= 1e-12) != zero:
                return True
    return False


# ---------------------------------------------------------------------------
# diagnostics


@dataclass(frozen=True)
class ScalingReport:
    beta: float
    ci: tuple[float, float]
    n_grid: tuple[int, ...]
    deltas: tuple[float, ...]
    stated_beta: float = 2.0

    @property
    def violates_stated(self) -> bool:
        return not self.ci[0] <= self.stated_beta <= self.ci[1]


def extension_delta(t: TypeClass, spec: DistortionSpec, cache: RateCache | None = None) -> float:
    """``max_a [R(Q_{T+a}, D) - R(Q_T, D)]^+`` (per-symbol rates)."""
    cache = cache or RateCache()
    base = cache.get(t, spec) / t.n
    return max(0.0, max(cache.get(t.extend(a), spec) / (t.n + 1) - base for a in range(t.alphabet_size)))


def extension_rate_delta_scan(
    source, spec: DistortionSpec, n_grid: Sequence[int], seed: int, samples: int = 200
) -> ScalingReport:
    """Fit ``beta`` in ``mean Delta_n ~ n^-beta`` from random sequences of each length."""
    p = as_pmf(source).array
    rng = np.random.Generator(np.random.Philox(key=int(seed)))
    cache = RateCache()
    deltas = []
    for n in n_grid:
        counts = rng.multinomial(n, p, size=samples)
        deltas.append(float(np.mean([extension_delta(TypeClass(tuple(c)), spec, cache) for c in counts])))
    x = np.log2(np.asarray(n_grid, dtype=float))
    y = np.log2(np.maximum(deltas, 1e-300))
    fit = stats.linregress(x, y)
    tq = stats.t.ppf(0.975, max(1, len(x) - 2))
    beta = -fit.slope
    return ScalingReport(
        beta=float(beta),
        ci=(float(beta - tq * fit.stderr), float(beta + tq * fit.stderr)),
        n_grid=tuple(int(n) for n in n_grid),
        deltas=tuple(deltas),
    )


@dataclass(frozen=True)
class DeviationMass:
    mass: float
    bound: float
    exact: bool
    threshold: float

    @property
    def holds(self) -> bool:
        return self.mass <= self.bound


def type_deviation_mass(
    source, n: int, a: float, samples: int = 200_000, seed: int = 0, check_a: bool = True
) -> DeviationMass:
    """``P^n`` mass of types with ``||Q - P||_2 > a sqrt(ln n / n)``, against ``e^(|X|-1) / n^2``."""
    p = as_pmf(source).array
    k = len(p)
    if check_a and a * a < 2 + 2 * k - 1e-12:
        raise ValidationError(f"a^2 must be >= {2 + 2 * k}")
    thr = a * math.sqrt(math.log(n) / n) if n > 1 else 0.0
    bound = math.e ** (k - 1) / n**2
    if n <= 200 and k <= 3:
        mass = 0.0
        for t in enumerate_types(n, k):
            c = np.array(t.counts)
            if np.linalg.norm(c / n - p) > thr:
                mass += float(stats.multinomial.pmf(c, n, p))
        return DeviationMass(min(1.0, mass), bound, True, thr)
    rng = np.random.Generator(np.random.Philox(key=int(seed)))
    c = rng.multinomial(n, p, size=samples)
    mass = float((np.linalg.norm(c / n - p, axis=1) > thr).mean())
    return DeviationMass(mass, bound, False, thr)


@dataclass(frozen=True)
class TransitionalCountReport:
    alphabet_size: int
    D: float
    gamma: float
    counts: tuple[int, ...]
    max_ratio: float

    @property
    def violates_stated(self) -> bool:
        return self.max_ratio > 1.0


def transitional_count_report(spec: DistortionSpec, gamma: float, n_max: int) -> TransitionalCountReport:
    """``|A_n|`` against ``n^(|X|-2)`` for ``n = 1..n_max``."""
    cache = RateCache()
    counts = []
    ratio = 0.0
    for n in range(1, n_max + 1):
        s = transitional_set(n, gamma, spec, cache)
        counts.append(len(s.members))
        ratio = max(ratio, s.bound_ratio)
    return TransitionalCountReport(spec.source_size, spec.level, gamma, tuple(counts), ratio)


# ---------------------------------------------------------------------------
# grid


@dataclass(frozen=True)
class GridConfig:
    sources: tuple[tuple[float, ...], ...] = ((0.2, 0.8), (0.3, 0.7), (0.4, 0.6))
    levels: tuple[float, ...] = (0.05, 0.1)
    log2_M: tuple[int, ...] = (10, 12, 14, 16)
    epsilons: tuple[float, ...] = (0.05, 0.1, 0.25)
    trials: int = 100_000
    seed: int = 0
    upsilon: float = 4.0
    rule: str = "first-transitional"
    hessian_points: int = 13
    slack_c: float = 0.0


@dataclass
class GridRow:
    p: str
    D: float
    M: int
    epsilon: float
    R_empirical: float
    bound: float
    R: float
    sigma: float
    C_H: float
    trials: int
    ci_lo: float
    ci_hi: float
    gamma: float
    max_len: int
    mean_length: float
    top_fraction: float


def format_pmf(p: Sequence[float]) -> str:
    return ";".join(repr(float(v)) for v in p)


def grid_point(source, d: Dictionary, M: int, epsilons, cfg: GridConfig, C_H: float) -> list[GridRow]:
    source = as_pmf(source)
    ts = run_trials(source, d, cfg.trials, cfg.seed, cfg.rule)
    rates = ts.rates
    rows = []
    for eps in epsilons:
        b = theorem_bound(BoundInputs(source, d.spec, M, eps, cfg.upsilon, C_H), cfg.slack_c)
        lo, hi = bootstrap_quantile(rates, eps, seed=cfg.seed)
        rows.append(
            GridRow(
                p=format_pmf(source.probs),
                D=d.spec.level,
                M=M,
                epsilon=eps,
                R_empirical=rate_quantile(rates, eps),
                bound=b.value,
                R=b.rate,
                sigma=b.sigma,
                C_H=C_H,
                trials=ts.trials,
                ci_lo=lo,
                ci_hi=hi,
                gamma=d.gamma,
                max_len=d.max_len,
                mean_length=float(ts.lengths.mean()),
                top_fraction=float((ts.lengths == ts.top).mean()),
            )
        )
    return rows


def rows_to_csv(rows: Sequence[GridRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([_fmt(getattr(r, c)) for c in CSV_COLUMNS])
    return buf.getvalue()


def rows_from_csv(text: str) -> list[GridRow]:
    out = []
    for rec in csv.DictReader(io.StringIO(text)):
        out.append(
            GridRow(
                p=rec["p"], D=float(rec["D"]), M=int(rec["M"]), epsilon=float(rec["epsilon"]),
                R_empirical=float(rec["R_empirical"]), bound=float(rec["bound"]), R=float(rec["R"]),
                sigma=float(rec["sigma"]), C_H=float(rec["C_H"]), trials=int(rec["trials"]),
                ci_lo=float(rec["ci_lo"]), ci_hi=float(rec["ci_hi"]), gamma=float(rec["gamma"]),
                max_len=int(rec["max_len"]), mean_length=float(rec["mean_length"]),
                top_fraction=float(rec["top_fraction"]),
            )
        )
    return out


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def manifest(cfg: GridConfig, extra: dict | None = None) -> dict:
    body = {"config": asdict(cfg), "log_base": 2}
    if extra:
        body.update(extra)
    body["config_digest"] = hashlib.sha256(json.dumps(body["config"], sort_keys=True).encode()).hexdigest()
    return body


# ---------------------------------------------------------------------------
# sandwich


@dataclass(frozen=True)
class SandwichReport:
    c: float
    per_M: dict
    stable: bool
    holds: bool
    intercepts: dict
    intercept_ok: bool

    def summary(self) -> str:
        lines = [f"fitted c = {self.c:.4g} ({'stable' if self.stable else 'unstable'} across M)"]
        for k, v in sorted(self.per_M.items()):
            lines.append(f"  M=2^{k}: c_M = {v:.4g}")
        for key, (got, want) in sorted(self.intercepts.items()):
            rel = abs(got - want) / abs(want) if want else math.inf
            lines.append(f"  intercept {key}: {got:.4g} vs sigma*Qinv = {want:.4g} (rel err {rel:.2%})")
        return "\n".join(lines)


def sandwich(rows: Sequence[GridRow], tolerance: float = 0.5, eps_trend: float = 0.1, trend_tol: float = 0.2) -> SandwichReport:
    """Fit the slack ``c / log2 M`` and the second-order regression.

    ``c`` is the smallest constant with ``R_emp <= bound + c / log2 M`` on
    every row; it is stable when each per-M value lies within
    ``tolerance * |c|`` of it.
    """
    resid = {}
    for r in rows:
        k = int(round(math.log2(r.M)))
        resid.setdefault(k, []).append((r.R_empirical - r.bound) * math.log2(r.M))
    per_M = {k: max(v) for k, v in resid.items()}
    c = max(per_M.values())
    stable = all(abs(v - c) <= tolerance * abs(c) for v in per_M.values())
    holds = all(r.R_empirical <= r.bound + c / math.log2(r.M) + 1e-12 for r in rows)

    intercepts = {}
    groups = {}
    for r in rows:
        if abs(r.epsilon - eps_trend) < 1e-12 and r.R > 0:
            groups.setdefault((r.p, r.D), []).append(r)
    for key, grp in groups.items():
        lm = np.array([math.log2(r.M) for r in grp])
        if len(np.unique(lm)) < 3:
            continue
        R = grp[0].R
        y = np.array([(r.R_empirical - R) * math.sqrt(math.log2(r.M) / R) for r in grp])
        X = np.column_stack([np.ones_like(lm), 1 / np.sqrt(lm), np.log2(lm) / np.sqrt(lm)])
        coef, *_ = np.linalg.lstsq(X, y, rcond=None)
        intercepts[f"p={key[0]},D={key[1]}"] = (float(coef[0]), grp[0].sigma * q_inverse(eps_trend))
    intercept_ok = bool(intercepts) and all(
        want != 0 and abs(got - want) <= trend_tol * abs(want) for got, want in intercepts.values()
    )
    return SandwichReport(c, per_M, stable, holds, intercepts, intercept_ok)


def run_grid(cfg: GridConfig, store, jobs: int = 1) -> tuple[list[GridRow], dict]:
    """Every (source, D, M) point of the grid; rows sorted by (p, D, M, epsilon).

    ``store`` maps (spec, M) to a dictionary (see ``DictionaryStore``).
    """
    from concurrent.futures import ProcessPoolExecutor

    tasks = []
    hessians = {}
    for D in cfg.levels:
        k = len(cfg.sources[0])
        spec = DistortionSpec.hamming(k, D)
        for lm in cfg.log2_M:
            M = 2**lm
            d = store.get(spec, M)
            for src in cfg.sources:
                key = (format_pmf(src), D, M)
                if key not in hessians:
                    hessians[key] = hessian_bound(src, spec, M, points=cfg.hessian_points)
                tasks.append((src, d, M, hessians[key].C_H))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(grid_point, s, d, M, cfg.epsilons, cfg, ch) for s, d, M, ch in tasks]
            parts = [f.result() for f in futures]
    else:
        parts = [grid_point(s, d, M, cfg.epsilons, cfg, ch) for s, d, M, ch in tasks]
    rows = sorted((r for part in parts for r in part), key=lambda r: (r.p, r.D, r.M, r.epsilon))
    diag = {
        f"{p}|D={D}|M={M}": {"C_H": h.C_H, "radius": h.radius, "evaluated": h.evaluated, "skipped": h.skipped}
        for (p, D, M), h in sorted(hessians.items())
    }
    return rows, diag
