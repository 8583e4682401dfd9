"""Benchmark harness: method setup/inference loops, the efficiency ledger,
amortized-cost curves, and CSV/JSON report emission.

Wall-clock numbers are machine-specific, so they are segregated into
timings.json (with the manifest); report.csv / report.json contain only
seed-deterministic fields and are byte-reproducible for identical seeds and
configs.
"""

from __future__ import annotations

import csv
import io
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import masks, pipeline
from .errors import ValidationError
from .metrics import Metrics, QueryMetrics, flops_attention  # noqa: F401  (re-export)

THREADS_ENV = "DBSA_THREADS"

REPORT_COLUMNS = [
    "method",
    "dataset",
    "config_digest",
    "n_seeds",
    "n_queries",
    "accuracy_mean",
    "accuracy_std",
    "attended_pairs_mean",
    "attended_pairs_std",
    "attention_flops_mean",
    "attention_flops_std",
    "cache_bytes",
]

RUN_COLUMNS = [
    "method",
    "dataset",
    "seed",
    "config_digest",
    "n_queries",
    "accuracy",
    "attended_pairs_mean",
    "attention_flops_mean",
    "cache_bytes",
]


def worker_count() -> int:
    raw = os.environ.get(THREADS_ENV, "")
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ValidationError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    return max(1, n)


@dataclass
class RunRecord:
    method: str
    dataset: str
    seed: int
    config_digest: str
    accuracy: float
    n_queries: int
    attended_pairs_mean: float
    attention_flops_mean: float
    cache_bytes: int
    metrics: Metrics


@dataclass
class ReportRow:
    method: str
    dataset: str
    config_digest: str
    n_seeds: int
    n_queries: int
    accuracy_mean: float
    accuracy_std: float
    attended_pairs_mean: float
    attended_pairs_std: float
    attention_flops_mean: float
    attention_flops_std: float
    cache_bytes: int


@dataclass
class BenchResult:
    runs: list[RunRecord]
    report: list[ReportRow]
    timings: dict
    manifest: dict


def _std(values: list[float]) -> float:
    if len(values) < 2:
        return 0.0
    return float(np.std(values, ddof=1))


def _setup_for(weights, task, config) -> tuple[object, object, float, int]:
    """Per-method setup: returns (cache, index, setup_seconds, cache_bytes).

    Index build time is charged to the retrieval methods, cache encode time to
    the cached methods; the fixed method encodes densely and pre-assembles.
    """
    method = config.method
    if method == pipeline.ZERO_SHOT:
        return None, None, 0.0, 0
    if method == pipeline.RET_ICL:
        index, _, seconds = pipeline.build_index_only(task, config)
        return None, index, seconds, 0
    if method == pipeline.FIXED_ICL:
        dense = replace(config, pattern=masks.AttentionPattern.full())
        encoded = pipeline.encode_pool(weights, task, dense)
        return encoded.cache, encoded.index, encoded.encode_seconds, encoded.metrics.cache_bytes
    encoded = pipeline.encode_pool(weights, task, config)
    seconds = encoded.encode_seconds + encoded.index_seconds
    return encoded.cache, encoded.index, seconds, encoded.metrics.cache_bytes


def run_method(
    weights,
    task: pipeline.TaskSpec,
    tests: list[pipeline.Demonstration],
    config: pipeline.MethodConfig,
    dataset: str = "dataset",
) -> RunRecord:
    """One (method, seed) benchmark run over the test queries."""
    cache, index, setup_seconds, cache_bytes = _setup_for(weights, task, config)
    runner = pipeline.Runner(weights, cache, index, task, config)
    t0 = time.perf_counter()
    runner.prepare()
    setup_seconds += time.perf_counter() - t0

    metrics = Metrics(setup_seconds=setup_seconds, cache_bytes=cache_bytes)
    workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda t: runner.infer(t.query), tests))
    else:
        results = [runner.infer(t.query) for t in tests]
    correct = 0
    for test, (label, qm) in zip(tests, results):
        correct += int(label == test.answer)
        metrics.add_query(qm)
    metrics.validate()
    accuracy = correct / len(tests) if tests else 0.0
    return RunRecord(
        method=config.method,
        dataset=dataset,
        seed=config.seed,
        config_digest=config.digest(),
        accuracy=accuracy,
        n_queries=len(tests),
        attended_pairs_mean=float(np.mean(metrics.attended_tokens)) if tests else 0.0,
        attention_flops_mean=float(np.mean(metrics.attention_flops)) if tests else 0.0,
        cache_bytes=cache_bytes,
        metrics=metrics,
    )


def run_bench(
    weights,
    task: pipeline.TaskSpec,
    tests: list[pipeline.Demonstration],
    methods: list[str],
    base: pipeline.MethodConfig,
    seeds: list[int],
    dataset: str = "dataset",
) -> BenchResult:
    if not methods:
        raise ValidationError("no methods requested")
    if not seeds:
        raise ValidationError("no seeds requested")
    methods = [pipeline.canonical_method(m) for m in methods]
    runs: list[RunRecord] = []
    for method in methods:
        for seed in seeds:
            config = replace(base, method=method, seed=seed)
            runs.append(run_method(weights, task, tests, config, dataset))

    report: list[ReportRow] = []
    for method in methods:
        group = [r for r in runs if r.method == method]
        accs = [r.accuracy for r in group]
        pairs = [r.attended_pairs_mean for r in group]
        flops = [r.attention_flops_mean for r in group]
        report.append(
            ReportRow(
                method=method,
                dataset=dataset,
                config_digest=group[0].config_digest,
                n_seeds=len(group),
                n_queries=group[0].n_queries,
                accuracy_mean=float(np.mean(accs)),
                accuracy_std=_std(accs),
                attended_pairs_mean=float(np.mean(pairs)),
                attended_pairs_std=_std(pairs),
                attention_flops_mean=float(np.mean(flops)),
                attention_flops_std=_std(flops),
                cache_bytes=group[0].cache_bytes,
            )
        )

    timings = {
        "runs": [
            {
                "method": r.method,
                "seed": r.seed,
                "setup_seconds": r.metrics.setup_seconds,
                "per_query_seconds": r.metrics.per_query_seconds,
                "mean_query_seconds": r.metrics.mean_query_seconds(),
            }
            for r in runs
        ]
    }
    manifest = {
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "dataset": dataset,
        "methods": methods,
        "seeds": seeds,
        "n_queries": len(tests),
        "model_config": weights.config.to_dict(),
        "model_config_hash": weights.config_hash.hex(),
        "base_config_digest": base.digest(),
        "threads": worker_count(),
    }
    return BenchResult(runs, report, timings, manifest)


# ---------------------------------------------------------------------------
# Amortized-cost curves
# ---------------------------------------------------------------------------


def amortize_points(
    setup_seconds: float, mean_query_seconds: float, request_counts: list[int]
) -> list[tuple[int, float]]:
    """(n, setup/n + mean per-query) for each requested volume; monotone
    non-increasing in n and approaching the per-query latency."""
    points = []
    for n in request_counts:
        if n < 1:
            raise ValidationError(f"request count must be >= 1, got {n}")
        points.append((n, setup_seconds / n + mean_query_seconds))
    return points


# ---------------------------------------------------------------------------
# Report writers (fixed columns; JSON mirrors CSV 1:1)
# ---------------------------------------------------------------------------


def _fmt(value) -> str:
    if isinstance(value, float):
        return format(value, ".10g")
    return str(value)


def report_csv(rows: list[ReportRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for r in rows:
        writer.writerow([_fmt(getattr(r, c)) for c in REPORT_COLUMNS])
    return buf.getvalue()


def runs_csv(rows: list[RunRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RUN_COLUMNS)
    for r in rows:
        writer.writerow([_fmt(getattr(r, c)) for c in RUN_COLUMNS])
    return buf.getvalue()


def report_json(rows: list[ReportRow]) -> str:
    return json.dumps(
        [{c: getattr(r, c) for c in REPORT_COLUMNS} for r in rows],
        indent=2,
        sort_keys=True,
    )


def write_bench_artifacts(result: BenchResult, out_dir) -> dict[str, str]:
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "report_csv": os.path.join(out_dir, "report.csv"),
        "report_json": os.path.join(out_dir, "report.json"),
        "runs_csv": os.path.join(out_dir, "runs.csv"),
        "timings_json": os.path.join(out_dir, "timings.json"),
        "manifest_json": os.path.join(out_dir, "manifest.json"),
    }
    with open(paths["report_csv"], "w", encoding="utf-8") as fh:
        fh.write(report_csv(result.report))
    with open(paths["report_json"], "w", encoding="utf-8") as fh:
        fh.write(report_json(result.report))
    with open(paths["runs_csv"], "w", encoding="utf-8") as fh:
        fh.write(runs_csv(result.runs))
    with open(paths["timings_json"], "w", encoding="utf-8") as fh:
        json.dump(result.timings, fh, indent=2)
    with open(paths["manifest_json"], "w", encoding="utf-8") as fh:
        json.dump(result.manifest, fh, indent=2, sort_keys=True)
    return paths
