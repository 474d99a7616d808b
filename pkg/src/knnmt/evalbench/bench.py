"""Hyperparameter grid search, throughput benchmarking and report files."""

from __future__ import annotations

import csv
import json
import statistics
from dataclasses import asdict, dataclass, field, fields

from ..decoder import DecodeConfig, knn_beam_decode
from ..retrieval import InterpolationParams
from ..vectorstore import make_searcher
from .bleu import corpus_bleu

K_GRID = (8, 16, 32, 64)
LAMBDA_GRID = (0.5, 0.6, 0.7, 0.8)
REPORT_COLUMNS = (
    "method",
    "batch_size",
    "tokens_per_second",
    "search_fraction",
    "cache_hit_fraction",
    "datastore_size",
)


# -- grid search ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridResult:
    k: int
    lam: float
    bleu: float
    table: tuple  # ((k, lam, bleu), ...) in grid order


def grid_search(
    model, ds, valid, k_grid=K_GRID, lambda_grid=LAMBDA_GRID, temperature=10.0, beam_size=5, batch_size=8, searcher=None
):
    """Exhaustive BLEU search over (k, lambda); ties go to smaller k, then smaller lambda."""
    if not k_grid or not lambda_grid:
        raise ValueError("k and lambda grids must be non-empty")
    if not valid:
        raise ValueError("validation corpus is empty")
    searcher = searcher or make_searcher(ds)
    sources = [s for s, _ in valid]
    refs = [list(t) for _, t in valid]
    table = []
    for k in k_grid:
        for lam in lambda_grid:
            cfg = DecodeConfig(
                beam_size=beam_size,
                batch_size=batch_size,
                params=InterpolationParams(k=int(k), lam=float(lam), temperature=temperature),
            )
            hyps, _ = knn_beam_decode(model, sources, ds, cfg, searcher=searcher)
            table.append((int(k), float(lam), corpus_bleu(hyps, refs)))
    best = min(table, key=lambda row: (-row[2], row[0], row[1]))
    return GridResult(best[0], best[1], best[2], tuple(table))


# -- throughput ----------------------------------------------------------------------------


@dataclass(frozen=True)
class BenchRow:
    method: str
    batch_size: int
    tokens_per_second: float
    search_fraction: float
    cache_hit_fraction: float
    datastore_size: int
    peak_entry_count: int = 0


@dataclass
class BenchReport:
    rows: list = field(default_factory=list)

    def row(self, method, batch_size):
        for r in self.rows:
            if r.method == method and r.batch_size == batch_size:
                return r
        raise KeyError((method, batch_size))

    def speed(self, method, batch_size):
        return self.row(method, batch_size).tokens_per_second


@dataclass
class Workload:
    """A workbench plus the source sentences to translate."""

    bench: object
    sources: list


def bench_throughput(methods, batch_sizes, workload, reps=3):
    """Warm-up run, then ``reps`` timed decodes per (method, batch size); medians reported."""
    if not methods or not batch_sizes:
        raise ValueError("need at least one method and one batch size")
    if not workload.sources:
        raise ValueError("workload has no sentences")
    if reps < 3:
        raise ValueError("at least 3 timed repetitions are required")
    model = workload.bench.model
    report = BenchReport()
    for method in methods:
        for batch in batch_sizes:
            prepared = workload.bench.prepare(method, batch)
            ref_out, ref_stats = prepared.decode(model, workload.sources)
            speeds = []
            for _ in range(reps):
                out, stats = prepared.decode(model, workload.sources)
                if out != ref_out or stats.counts() != ref_stats.counts():
                    raise RuntimeError(f"non-deterministic decode for {method} at batch {batch}")
                speeds.append(stats.tokens / stats.elapsed)
            elig = ref_stats.eligible_steps
            report.rows.append(
                BenchRow(
                    method=prepared.name,
                    batch_size=int(batch),
                    tokens_per_second=statistics.median(speeds),
                    search_fraction=ref_stats.searches / elig if elig else 0.0,
                    cache_hit_fraction=ref_stats.cache_hits / elig if elig else 0.0,
                    datastore_size=len(prepared.ds) if prepared.ds is not None else 0,
                    peak_entry_count=ref_stats.peak_cache_entries,
                )
            )
    return report


# -- report files --------------------------------------------------------------------------


def report_emit(report, path, fmt="csv"):
    """CSV carries the fixed report columns; JSON carries every row field."""
    if fmt == "csv":
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(REPORT_COLUMNS)
            for r in report.rows:
                w.writerow([getattr(r, c) for c in REPORT_COLUMNS])
    elif fmt == "json":
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"rows": [asdict(r) for r in report.rows]}, fh, indent=2)
            fh.write("\n")
    else:
        raise ValueError(f"unknown report format {fmt!r}; expected 'csv' or 'json'")


def report_load(path):
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    names = {f.name for f in fields(BenchRow)}
    return BenchReport([BenchRow(**{k: v for k, v in row.items() if k in names}) for row in data["rows"]])
