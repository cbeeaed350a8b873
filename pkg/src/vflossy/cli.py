"""Command-line front end: ``vflossy rd|build|verify|encode|decode|analyze|report``.

Exit codes: 0 success, 1 configuration error, 2 numerical failure,
3 integrity or audit failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import analysis, codec
from .covering import Covering, uncovered_members
from .dictionary import BuildConfig, DictionaryBuilder, DictionaryStore, load, save
from .errors import (
    BudgetError,
    CapacityError,
    ConvergenceError,
    InfeasibleError,
    IntegrityError,
    ValidationError,
)
from .rd_core import DistortionSpec, Pmf, rate_distortion, rd_sensitivity
from .typespace import TypeClass, is_transitional

log = logging.getLogger("vflossy")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_INTEGRITY = 0, 1, 2, 3


class ConfigError(ValidationError):
    pass


@dataclass
class RunConfig:
    source: tuple[float, ...] = (0.5, 0.5)
    distortion: str = "hamming"
    D: float = 0.1
    M: int = 4096
    epsilons: tuple[float, ...] = (0.05, 0.1, 0.25)
    upsilon: float = 4.0
    seed: int = 0
    trials: int = 100_000
    output: str = "vflossy-out"
    sources: tuple[tuple[float, ...], ...] = ((0.2, 0.8), (0.3, 0.7), (0.4, 0.6))
    levels: tuple[float, ...] = (0.05, 0.1)
    log2_M: tuple[int, ...] = (10, 12, 14, 16)
    rule: str = "first-transitional"
    len_factor: float = 4.0
    crossover: int = 8
    cache_dir: str | None = None
    hessian_points: int = 13

    def build_config(self) -> BuildConfig:
        return BuildConfig(
            upsilon=self.upsilon, seed=self.seed, crossover=self.crossover, len_factor=self.len_factor
        )


_TUPLE_FIELDS = {"source": 1, "epsilons": 1, "sources": 2, "levels": 1, "log2_M": 1}


def _coerce(name: str, value):
    depth = _TUPLE_FIELDS.get(name)
    if depth == 1:
        if isinstance(value, str):
            value = [v for v in value.split(",") if v.strip()]
        try:
            return tuple(int(v) if name == "log2_M" else float(v) for v in value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{name}: expected a list of numbers ({exc})") from exc
    if depth == 2:
        try:
            return tuple(tuple(float(v) for v in row) for row in value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{name}: expected a list of PMFs ({exc})") from exc
    return value


def load_config(path: str | None, overrides: dict) -> RunConfig:
    data = {}
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config: top level must be an object")
    known = {f.name: f for f in fields(RunConfig)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"config: unknown field(s) {', '.join(unknown)}")
    data.update({k: v for k, v in overrides.items() if v is not None})
    cfg = RunConfig()
    for k, v in data.items():
        v = _coerce(k, v)
        default = getattr(cfg, k)
        if isinstance(default, (int, float)) and not isinstance(default, bool) and not isinstance(v, (int, float)):
            try:
                v = type(default)(v)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{k}: expected a number, got {v!r}") from exc
        setattr(cfg, k, v)
    env = os.environ.get("VFLOSSY_SEED")
    if env is not None:
        try:
            cfg.seed = int(env)
        except ValueError as exc:
            raise ConfigError(f"VFLOSSY_SEED: not an integer: {env!r}") from exc
    return cfg


def source_pmf(cfg: RunConfig) -> Pmf:
    try:
        return Pmf(tuple(cfg.source))
    except ValidationError as exc:
        raise ConfigError(f"source: {exc}") from exc


def distortion_spec(cfg: RunConfig, size: int) -> DistortionSpec:
    try:
        if cfg.distortion == "hamming":
            return DistortionSpec.hamming(size, cfg.D)
        path = Path(cfg.distortion)
        if not path.exists():
            raise ConfigError(f"distortion: no builtin or file named {cfg.distortion!r}")
        matrix = json.loads(path.read_text())
        return DistortionSpec(tuple(tuple(float(v) for v in row) for row in matrix), float(cfg.D))
    except ValidationError as exc:
        raise ConfigError(f"distortion: {exc}") from exc


# ---------------------------------------------------------------------------
# commands


def cmd_rd(cfg: RunConfig, args) -> int:
    p = source_pmf(cfg)
    spec = distortion_spec(cfg, len(p))
    res = rate_distortion(p, spec)
    print(f"rate        {res.rate:.10f} bits/symbol")
    print(f"entropy     {p.entropy():.10f} bits/symbol")
    print(f"slope       {res.slope:.10g} bits/unit distortion")
    print(f"output      {', '.join(f'{v:.6g}' for v in res.output_dist.probs)}")
    print(f"iterations  {res.iterations}")
    print(f"converged   {res.converged}")
    if not res.converged:
        raise ConvergenceError("rate-distortion solver did not converge")
    if min(p.probs) > 1e-5:
        s = rd_sensitivity(p, spec)
        print(f"gradient    {', '.join(f'{v:.8g}' for v in s.gradient)}")
        print(f"dispersion  {s.dispersion:.10g} bits^2")
        print(f"hessian_F   {s.hessian_fnorm:.8g}")
    return EXIT_OK


def cmd_build(cfg: RunConfig, args) -> int:
    spec = distortion_spec(cfg, len(cfg.source))
    if cfg.M < 2:
        raise ConfigError(f"M: must be >= 2, got {cfg.M}")
    builder = DictionaryBuilder(spec, cfg.build_config())
    if args.gamma is not None:
        gamma = args.gamma
    else:
        choice = builder.choose_gamma(cfg.M)
        gamma = choice.gamma
        print(f"closed-form gamma {choice.closed_form:.4f} (diagnostic)")
    result = builder.build(gamma, cfg.M)
    d = result.dictionary
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save(d, out)
    print(f"gamma       {d.gamma:.6f}")
    print(f"M_actual    {d.size} / {d.budget}")
    print(f"max n       {d.max_blocklength} (scan cap {d.max_len})")
    if result.degenerate:
        print("warning     no transitional types below the scan cap")
    for lv in result.levels:
        if lv.types:
            flag = "" if lv.bound_holds else "  BOUND VIOLATED"
            print(f"  n={lv.n:3d} types={lv.types:3d} codewords={lv.codewords:6d}{' (top)' if lv.terminal else ''}{flag}")
    return EXIT_OK


def cmd_verify(cfg: RunConfig, args) -> int:
    d = load(args.dict)
    spec = d.spec
    failures = 0
    for idx, e in enumerate(d.entries):
        if idx and (d.entries[idx - 1].n, d.entries[idx - 1].counts, d.entries[idx - 1].codeword) >= (e.n, e.counts, e.codeword):
            print(f"order violation at index {idx}")
            failures += 1
            break
    for counts, (start, words) in d.lookup.blocks.items():
        t = TypeClass(counts)
        if t.n < d.max_len and not is_transitional(t, d.gamma, spec):
            print(f"type {counts} is not transitional at gamma={d.gamma}")
            failures += 1
        cov = Covering(type=t, codewords=tuple(map(tuple, words.tolist())), method="loaded")
        samples = None if t.size() <= args.exhaustive_cap else args.samples
        miss = uncovered_members(cov, spec, samples=samples, seed=cfg.seed)
        if miss:
            print(f"type {counts}: {miss} member(s) not covered")
            failures += 1
    rng_stream = analysis.sample_stream(Pmf.normalized([1.0] * d.alphabet_size), args.stream, cfg.seed)
    enc = codec.encode_stream(rng_stream, d)
    bad = codec.audit(rng_stream, enc, d)
    if bad:
        print(f"{len(bad)} segment(s) exceed D on the audit stream")
        failures += 1
    print(f"checked {len(d.lookup.blocks)} types, {d.size} codewords, {len(enc.indices)} audit segments")
    if failures:
        raise IntegrityError(f"{failures} verification failure(s)")
    print("ok")
    return EXIT_OK


def _read_symbols(path) -> np.ndarray:
    return np.frombuffer(Path(path).read_bytes(), dtype=np.uint8)


def cmd_encode(cfg: RunConfig, args) -> int:
    d = load(args.dict)
    x = _read_symbols(args.input)
    if x.size and int(x.max()) >= d.alphabet_size:
        raise ConfigError(f"input: symbol {int(x.max())} outside the alphabet of size {d.alphabet_size}")
    e = codec.encode_stream(x, d, rule=cfg.rule)
    codec.write_encoded(e, args.output)
    print(f"{x.size} symbols -> {len(e.indices)} segments x {e.index_width} bits, tail {len(e.tail)}")
    return EXIT_OK


def cmd_decode(cfg: RunConfig, args) -> int:
    d = load(args.dict)
    e = codec.read_encoded(args.input)
    y = codec.decode_sequence(e, d)
    if y.size != e.symbol_count:
        raise IntegrityError(f"decoded {y.size} symbols, header says {e.symbol_count}")
    Path(args.output).write_bytes(y.astype(np.uint8).tobytes())
    print(f"{len(e.indices)} segments -> {y.size} symbols")
    return EXIT_OK


def _grid_config(cfg: RunConfig) -> analysis.GridConfig:
    return analysis.GridConfig(
        sources=tuple(cfg.sources),
        levels=tuple(cfg.levels),
        log2_M=tuple(cfg.log2_M),
        epsilons=tuple(cfg.epsilons),
        trials=cfg.trials,
        seed=cfg.seed,
        upsilon=cfg.upsilon,
        rule=cfg.rule,
        hessian_points=cfg.hessian_points,
    )


def cmd_analyze(cfg: RunConfig, args) -> int:
    grid = _grid_config(cfg)
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    store = DictionaryStore(cfg.cache_dir or out / "dictionaries", cfg.build_config())
    jobs = args.jobs or os.cpu_count() or 1
    rows, diag = analysis.run_grid(grid, store, jobs=jobs)
    (out / "results.csv").write_text(analysis.rows_to_csv(rows))
    report = analysis.sandwich(rows)
    man = analysis.manifest(grid, {"rule": cfg.rule, "len_factor": cfg.len_factor,
                                   "crossover": cfg.crossover, "hessian": diag})
    (out / "manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
    print(f"{len(rows)} rows -> {out / 'results.csv'}")
    print(report.summary())
    if args.check_bound and not (report.holds and report.stable):
        print("bound sandwich violated")
        return EXIT_INTEGRITY
    return EXIT_OK


def cmd_report(cfg: RunConfig, args) -> int:
    flagged = 0
    if args.csv:
        rows = analysis.rows_from_csv(Path(args.csv).read_text())
        print(analysis.sandwich(rows).summary())
    for k, D in ((2, 0.0), (2, 0.1), (3, 0.0), (3, 0.1)):
        spec = DistortionSpec.hamming(k, D)
        r = analysis.transitional_count_report(spec, args.gamma, math.ceil(cfg.len_factor * args.gamma))
        mark = "  FLAG: exceeds n^(|X|-2)" if r.violates_stated else ""
        flagged += r.violates_stated
        print(f"|A_n| |X|={k} D={D}: max ratio {r.max_ratio:.3g}{mark}")
    s = analysis.extension_rate_delta_scan(
        Pmf(tuple(cfg.source)), DistortionSpec.hamming(len(cfg.source), cfg.D), [2**j for j in range(4, 11)], cfg.seed
    )
    mark = "  FLAG: stated exponent 2 outside CI" if s.violates_stated else ""
    print(f"extension delta exponent beta = {s.beta:.3f} CI [{s.ci[0]:.3f}, {s.ci[1]:.3f}]{mark}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vflossy", description="Universal variable-to-fixed lossy coding toolkit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run config; flags override it")
        p.add_argument("--source", help="comma-separated PMF, e.g. 0.3,0.7")
        p.add_argument("--distortion", help="'hamming' or a JSON matrix file")
        p.add_argument("--D", type=float)
        p.add_argument("--M", type=int)
        p.add_argument("--upsilon", type=float)
        p.add_argument("--seed", type=int)
        p.add_argument("--rule", choices=codec.RULES)
        return p

    common(sub.add_parser("rd", help="rate-distortion function and sensitivity"))
    b = common(sub.add_parser("build", help="choose gamma and write a dictionary"))
    b.add_argument("--out", required=True)
    b.add_argument("--gamma", type=float, help="skip the search and build at this threshold")
    v = common(sub.add_parser("verify", help="audit a dictionary file"))
    v.add_argument("--dict", required=True)
    v.add_argument("--samples", type=int, default=100_000)
    v.add_argument("--exhaustive-cap", type=int, default=200_000)
    v.add_argument("--stream", type=int, default=20_000)
    for name in ("encode", "decode"):
        p = common(sub.add_parser(name, help=f"{name} a symbol file"))
        p.add_argument("--dict", required=True)
        p.add_argument("--input", required=True)
        p.add_argument("--output", required=True)
    a = common(sub.add_parser("analyze", help="Monte-Carlo grid, CSV and manifest"))
    a.add_argument("--trials", type=int)
    a.add_argument("--output")
    a.add_argument("--jobs", type=int)
    a.add_argument("--check-bound", action="store_true")
    r = common(sub.add_parser("report", help="sandwich summary and diagnostics"))
    r.add_argument("--csv")
    r.add_argument("--gamma", type=float, default=5.0)
    return ap


COMMANDS = {
    "rd": cmd_rd,
    "build": cmd_build,
    "verify": cmd_verify,
    "encode": cmd_encode,
    "decode": cmd_decode,
    "analyze": cmd_analyze,
    "report": cmd_report,
}


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    overrides = {k: getattr(args, k, None) for k in ("source", "distortion", "D", "M", "upsilon", "seed", "rule", "trials", "output")}
    try:
        cfg = load_config(args.config, overrides)
        return COMMANDS[args.command](cfg, args)
    except (ConvergenceError, InfeasibleError, CapacityError, BudgetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except IntegrityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except (ValidationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
