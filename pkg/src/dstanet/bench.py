"""Instrumented score-map kernels for counting multiply-adds and timing.

Each kernel computes the spatial and the temporal score maps of one
``(N, T, C)`` query/key pair with plain matrix products, charging
``M * K * P`` multiply-adds for every ``(M, K) @ (K, P)`` product.  The
kernels deliberately do not share code with the attention module, so a
count that matches :func:`flop_estimate` is an independent check.
"""

from __future__ import annotations

import csv
import io
import statistics
import time
from dataclasses import dataclass

import numpy as np

from .attention import flop_estimate

BENCH_STRATEGIES = ("a", "b", "c", "flat")
CSV_HEADER = ("strategy", "N", "T", "C", "analytic", "measured", "median_seconds",
              "analytic_ratio", "time_ratio")


class MatmulCounter:
    """``a @ b`` that tallies multiply-adds."""

    def __init__(self):
        self.count = 0

    def __call__(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        m, k = a.shape
        k2, p = b.shape
        if k != k2:
            raise ValueError(f"inner dimensions differ: {a.shape} @ {b.shape}")
        self.count += m * k * p
        return a @ b


def score_maps(strategy: str, q: np.ndarray, k: np.ndarray, mm=None) -> tuple:
    """Spatial and temporal score maps of ``(N, T, C)`` embeddings.

    Returns ``(spatial, temporal)``.  Strategy ``a`` yields stacks of
    per-frame ``(T, N, N)`` and per-joint ``(N, T, T)`` maps, ``b`` and
    ``c`` a single map per axis, ``flat`` one ``(N*T, N*T)`` map and
    ``None`` for the temporal slot.
    """
    mm = mm if mm is not None else MatmulCounter()
    n, t, c = q.shape
    if strategy == "a":
        spatial = np.stack([mm(q[:, i], k[:, i].T) for i in range(t)])
        temporal = np.stack([mm(q[j], k[j].T) for j in range(n)])
    elif strategy == "b":
        spatial = np.zeros((n, n))
        for i in range(t):
            for j in range(t):
                spatial += mm(q[:, i], k[:, j].T)
        temporal = np.zeros((t, t))
        for i in range(n):
            for j in range(n):
                temporal += mm(q[i], k[j].T)
    elif strategy == "c":
        spatial = mm(q.reshape(n, t * c), k.reshape(n, t * c).T)
        qt = q.transpose(1, 0, 2).reshape(t, n * c)
        kt = k.transpose(1, 0, 2).reshape(t, n * c)
        temporal = mm(qt, kt.T)
    elif strategy == "flat":
        spatial = mm(q.reshape(n * t, c), k.reshape(n * t, c).T)
        temporal = None
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    return spatial, temporal


def count_multiply_adds(strategy: str, n: int, t: int, c: int) -> int:
    counter = MatmulCounter()
    q = np.zeros((n, t, c))
    score_maps(strategy, q, q, counter)
    return counter.count


@dataclass
class BenchResult:
    strategy: str
    n: int
    t: int
    c: int
    analytic: int
    measured: int
    median_seconds: float


def time_strategy(strategy: str, q: np.ndarray, k: np.ndarray, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        score_maps(strategy, q, k)
        times.append(time.perf_counter() - start)
    return statistics.median(times)


def run_bench(strategy: str, n: int, t: int, c: int, repeat: int = 5,
              seed: int = 0) -> BenchResult:
    if min(n, t, c, repeat) < 1:
        raise ValueError("N, T, C and repeat must be positive")
    rng = np.random.default_rng(seed)
    q = rng.standard_normal((n, t, c))
    k = rng.standard_normal((n, t, c))
    return BenchResult(strategy, n, t, c, flop_estimate(strategy, n, t, c),
                       count_multiply_adds(strategy, n, t, c),
                       time_strategy(strategy, q, k, repeat))


def bench_rows(strategy: str, n: int, t: int, c: int, repeat: int = 5,
               seed: int = 0) -> list:
    """Result rows for ``strategy`` and the flat baseline, with flat/strategy ratios."""
    names = [strategy] if strategy == "flat" else [strategy, "flat"]
    results = {s: run_bench(s, n, t, c, repeat, seed) for s in names}
    flat = results["flat"]
    rows = []
    for s in names:
        r = results[s]
        rows.append({
            "strategy": s, "N": n, "T": t, "C": c,
            "analytic": r.analytic, "measured": r.measured,
            "median_seconds": r.median_seconds,
            "analytic_ratio": flat.analytic / r.analytic,
            "time_ratio": flat.median_seconds / r.median_seconds if r.median_seconds > 0 else float("inf"),
        })
    return rows


def rows_to_csv(rows: list) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_HEADER, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()
