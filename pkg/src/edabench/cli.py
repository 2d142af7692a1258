"""Command-line driver: ``run``, ``gen`` and ``mmd`` subcommands over JSON configs."""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .core import METHODS, DomainStream, RunConfig
from .datagen import ShiftProfile, generate, load_profile, load_records, stream_from_records, stream_to_records, write_records
from .divergence import MmdMatrix, mmd_matrix, mmd_to_source
from .exceptions import ConfigError, EdaError, InvalidProfile, MissingLabels
from .metrics import EvalReport, gain_shift_bootstrap, paired_bootstrap, relative_gain
from .selftrain import MethodTrace, run_method

log = logging.getLogger("edabench")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}
RUN_FIELDS = set(RunConfig.__dataclass_fields__)


@dataclass
class MetricsConfig:
    bootstrap: bool = True
    n_resamples: int = 1000
    level: float = 0.95
    correlation: bool = True


@dataclass
class DivergenceConfig:
    enabled: bool = False
    conditioning: list = field(default_factory=lambda: ["marginal"])
    estimator: str = "biased"
    max_samples: Optional[int] = 2000


@dataclass
class ExperimentConfig:
    stream: dict
    methods: list
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    divergence: DivergenceConfig = field(default_factory=DivergenceConfig)
    output_dir: str = "results"
    global_seed: int = 0


def _section(d, cls, where):
    if d is None:
        return cls()
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be an object")
    unknown = set(d) - set(cls.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {sorted(unknown)}")
    return cls(**d)


def parse_run_config(d: dict, default_seed: int, i: int) -> RunConfig:
    where = f"methods[{i}]"
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be an object")
    if "method" not in d:
        raise ConfigError(f"{where}.method is required")
    if d["method"] not in METHODS:
        raise ConfigError(f"{where}.method: unknown method {d['method']!r} (expected one of {', '.join(METHODS)})")
    unknown = set(d) - RUN_FIELDS
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {sorted(unknown)}")
    d = dict(d)
    d.setdefault("seed", default_seed)
    try:
        return RunConfig(**d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from None


def parse_config(d: dict, seed_override: Optional[int] = None, output_override: Optional[str] = None) -> ExperimentConfig:
    """Validate a config dict; every error names the offending field."""
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(d) - set(ExperimentConfig.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown top-level field(s) {sorted(unknown)}")
    if "stream" not in d or not isinstance(d["stream"], dict):
        raise ConfigError("stream: required object with 'generator' or 'ingest'")
    stream = d["stream"]
    if ("generator" in stream) == ("ingest" in stream):
        raise ConfigError("stream: give exactly one of 'generator' or 'ingest'")
    seed = d.get("global_seed", 0) if seed_override is None else seed_override
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("global_seed must be a non-negative integer")
    methods = d.get("methods")
    if not isinstance(methods, list) or not methods:
        raise ConfigError("methods: need at least one method")
    runs = [parse_run_config(m, seed, i) for i, m in enumerate(methods)]
    if seed_override is not None:
        runs = [RunConfig(**{**r.__dict__, "seed": seed_override}) for r in runs]
    labels = [r.label for r in runs]
    if len(set(labels)) != len(labels):
        raise ConfigError("methods: labels must be unique (set 'name' to disambiguate)")
    try:
        metrics = _section(d.get("metrics"), MetricsConfig, "metrics")
        div = _section(d.get("divergence"), DivergenceConfig, "divergence")
    except TypeError as e:
        raise ConfigError(str(e)) from None
    if div.estimator not in ("biased", "unbiased"):
        raise ConfigError(f"divergence.estimator: unknown estimator {div.estimator!r}")
    if not 0 < metrics.level < 1:
        raise ConfigError("metrics.level must lie in (0, 1)")
    out = output_override or d.get("output_dir", "results")
    return ExperimentConfig(stream, runs, metrics, div, str(out), seed)


def load_config(path, seed_override=None, output_override=None) -> ExperimentConfig:
    try:
        d = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e.msg} (line {e.lineno})") from None
    cfg = parse_config(d, seed_override, output_override)
    # relative ingest paths resolve against the config file
    ing = cfg.stream.get("ingest")
    if ing and "path" in ing and not Path(ing["path"]).is_absolute():
        ing["path"] = str(Path(path).parent / ing["path"])
    return cfg


def build_stream(cfg: ExperimentConfig) -> DomainStream:
    s = cfg.stream
    if "generator" in s:
        g = s["generator"]
        profile = load_profile(g) if isinstance(g, str) else ShiftProfile.from_dict(g)
        return generate(profile, s.get("seed", cfg.global_seed))
    ing = s["ingest"]
    for key in ("path", "source_window"):
        if key not in ing:
            raise ConfigError(f"stream.ingest.{key} is required")
    records = load_records(ing["path"])
    return stream_from_records(records, tuple(ing["source_window"]), ing.get("window_len", 1),
                               ing.get("min_domain_size", 30), ing.get("class_names"), cfg.global_seed)


# ---------------------------------------------------------------- outputs


def _conditionings(div: DivergenceConfig, num_classes: int) -> list:
    out = []
    for c in div.conditioning:
        if c == "conditional":
            out.extend(range(num_classes))
        elif c == "marginal":
            out.append(None)
        elif isinstance(c, int) and not isinstance(c, bool) and 0 <= c < num_classes:
            out.append(c)
        elif isinstance(c, str) and c.startswith("class:") and c[6:].isdigit() and int(c[6:]) < num_classes:
            out.append(int(c[6:]))
        else:
            raise ConfigError(f"divergence.conditioning: unknown entry {c!r}")
    return list(dict.fromkeys(out))


def compute_matrices(stream: DomainStream, cfg: ExperimentConfig, jobs: int) -> dict:
    mats = {}
    for c in _conditionings(cfg.divergence, stream.num_classes):
        m = mmd_matrix(stream, c, cfg.divergence.estimator, cfg.global_seed, cfg.divergence.max_samples, n_jobs=jobs)
        mats[m.conditioning_label] = m
    return mats


def write_matrices(mats: dict, out: Path) -> None:
    for label, m in mats.items():
        m.write(out / f"mmd_{label}.csv", out / f"mmd_{label}.json")


def build_reports(traces: dict, stream: DomainStream, cfg: ExperimentConfig, marginal: Optional[MmdMatrix]):
    """EvalReports keyed by method label, plus scatter points per method."""
    ts = list(range(1, stream.T + 1))
    golds = [stream[t].test.y for t in ts]
    by_method = {}
    for label, tr in traces.items():
        by_method.setdefault(tr.method, label)
    src, sup = by_method.get("SrcOnly"), by_method.get("Supervised")
    reports, scatters = {}, {}
    for label, tr in traces.items():
        rep = EvalReport.from_scores(tr.per_domain_f)
        if src and sup:
            try:
                rep.delta_avg_norm = relative_gain(rep.f_avg, reports_f(traces[src]), reports_f(traces[sup]))
            except ZeroDivisionError:
                rep.delta_avg_norm = None
        if src and label != src and cfg.metrics.bootstrap:
            b = paired_bootstrap(tr.predictions(ts), traces[src].predictions(ts), golds, stream.num_classes,
                                 cfg.metrics.n_resamples, cfg.metrics.level, cfg.global_seed)
            rep.bootstrap = {"baseline": src, "diff_mean": b.diff_mean, "ci_low": b.ci_low,
                             "ci_high": b.ci_high, "n_resamples": b.n_resamples, "level": b.level}
        if src and label != src and cfg.metrics.correlation and marginal is not None:
            g = gain_shift_bootstrap(tr.predictions(ts), traces[src].predictions(ts), golds, mmd_to_source(marginal),
                                     stream.num_classes, cfg.metrics.n_resamples, cfg.metrics.level, cfg.global_seed)
            rep.correlation = {"baseline": src, "pearson_r": g.pearson_r, "ci_low": g.ci_low,
                               "ci_high": g.ci_high, "n_resamples": g.n_resamples}
            scatters[label] = g.points
        reports[label] = rep
    return reports, scatters


def reports_f(trace: MethodTrace) -> float:
    return float(np.mean(trace.per_domain_f))


def per_domain_csv(traces: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "t", "f_macro"])
    for label, tr in traces.items():
        for s in tr.steps:
            if s.t >= 1:
                w.writerow([label, s.t, repr(float(s.f_macro))])
    return buf.getvalue()


def scatter_csv(points) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "mmd", "delta_f"])
    for t, m, d in points:
        w.writerow([t, repr(float(m)), repr(float(d))])
    return buf.getvalue()


def summary_table(reports: dict) -> str:
    """Methods sorted by F_avg (descending), with the normalized relative gain."""
    rows = sorted(reports.items(), key=lambda kv: (-kv[1].f_avg, kv[0]))
    width = max(len("Method"), *(len(k) for k in reports))
    lines = [f"{'Method':<{width}}  {'F_avg':>7}  {'Δ_avg,norm':>10}"]
    for label, rep in rows:
        d = "-" if rep.delta_avg_norm is None else f"{rep.delta_avg_norm:.3f}"
        lines.append(f"{label:<{width}}  {rep.f_avg:>7.4f}  {d:>10}")
    return "\n".join(lines)


def _write(path: Path, text: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _safe(label: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in label)


# ---------------------------------------------------------------- commands


def cmd_run(config_path, jobs: Optional[int] = None, seed: Optional[int] = None, output_dir=None) -> int:
    try:
        cfg = load_config(config_path, seed, output_dir)
        stream = build_stream(cfg)
        mats = compute_matrices(stream, cfg, 1) if cfg.divergence.enabled else {}
    except (EdaError, ValueError, OSError, TypeError) as e:
        log.error("config error: %s", e)
        return EXIT_CONFIG
    try:
        marginal = mats.get("marginal")
        if marginal is None and cfg.metrics.correlation:
            marginal = mmd_matrix(stream, None, cfg.divergence.estimator, cfg.global_seed, cfg.divergence.max_samples)
        jobs = jobs or os.cpu_count() or 1
        with ThreadPoolExecutor(max(1, jobs)) as pool:
            results = list(pool.map(lambda r: run_method(stream, r), cfg.methods))
        traces = {r.label: tr for r, tr in zip(cfg.methods, results)}
        reports, scatters = build_reports(traces, stream, cfg, marginal)

        out = Path(cfg.output_dir)
        (out / "traces").mkdir(parents=True, exist_ok=True)
        _write(out / "results.json", json.dumps({k: v.to_dict() for k, v in reports.items()}, indent=2, sort_keys=True) + "\n")
        _write(out / "per_domain.csv", per_domain_csv(traces))
        for label, tr in traces.items():
            _write(out / "traces" / f"{_safe(label)}.csv", tr.to_csv())
        write_matrices(mats, out)
        for label, pts in scatters.items():
            _write(out / f"scatter_{_safe(label)}.csv", scatter_csv(pts))
    except Exception as e:  # noqa: BLE001 - any failure past validation is a runtime error
        log.error("runtime error: %s", e, exc_info=log.isEnabledFor(logging.DEBUG))
        return EXIT_RUNTIME
    print(summary_table(reports))
    return EXIT_OK


def cmd_gen(profile_path, out_path, seed: Optional[int] = None) -> int:
    try:
        profile = load_profile(profile_path)
    except FileNotFoundError:
        log.error("profile %s not found", profile_path)
        return EXIT_CONFIG
    except (InvalidProfile, ValueError, TypeError) as e:
        log.error("invalid profile: %s", e)
        return EXIT_CONFIG
    if seed is None:
        seed = json.loads(Path(profile_path).read_text()).get("seed", 0)
    try:
        stream = generate(profile, seed)
        write_records(stream_to_records(stream), out_path)
    except Exception as e:  # noqa: BLE001
        log.error("runtime error: %s", e)
        return EXIT_RUNTIME
    print(f"wrote {sum(len(d) for d in stream.domains)} records in {stream.T + 1} domains to {out_path}")
    return EXIT_OK


def cmd_mmd(config_path, jobs: Optional[int] = None, seed: Optional[int] = None, output_dir=None) -> int:
    try:
        cfg = load_config(config_path, seed, output_dir)
        stream = build_stream(cfg)
        _conditionings(cfg.divergence, stream.num_classes)
        mats = compute_matrices(stream, cfg, jobs or 1)
    except MissingLabels as e:
        log.error("cannot compute class-conditional MMD: %s", e)
        return EXIT_CONFIG
    except (EdaError, ValueError, OSError, TypeError) as e:
        log.error("config error: %s", e)
        return EXIT_CONFIG
    try:
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_matrices(mats, out)
    except Exception as e:  # noqa: BLE001
        log.error("runtime error: %s", e)
        return EXIT_RUNTIME
    for label, m in mats.items():
        print(f"mmd_{label}.csv  bandwidth={m.bandwidth:.6g}")
    return EXIT_OK


def _setup_logging() -> None:
    level = LOG_LEVELS.get(os.environ.get("EDA_BENCH_LOG", "warn").lower(), logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eda-bench", description="Evolving domain adaptation benchmark")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--jobs", type=int, default=None, help="worker threads (default: logical cores)")
    common.add_argument("--seed", type=int, default=None, help="override the config's global seed")
    common.add_argument("--output-dir", default=None, help="override the config's output directory")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", parents=[common], help="run every configured method")
    r.add_argument("config")
    g = sub.add_parser("gen", parents=[common], help="materialize a synthetic stream as NDJSON")
    g.add_argument("profile")
    g.add_argument("out")
    m = sub.add_parser("mmd", parents=[common], help="export MMD matrices only")
    m.add_argument("config")
    return p


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    if args.command == "run":
        return cmd_run(args.config, args.jobs, args.seed, args.output_dir)
    if args.command == "gen":
        return cmd_gen(args.profile, args.out, args.seed)
    return cmd_mmd(args.config, args.jobs, args.seed, args.output_dir)


if __name__ == "__main__":
    sys.exit(main())
