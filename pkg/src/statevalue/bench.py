"""Timing of the all-prefix-pairs distance grid.

Each size point times ``prefix_distance_grid`` between a query trace with
``n`` sampled states and a fixed partner trace, so doubling ``n`` doubles the
number of grid cells.
"""

from __future__ import annotations

import csv
import os
import timeit
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .hista import CompressedTrace, prefix_distance_grid


@dataclass
class BenchRow:
    n_states: int
    partner_states: int
    dim: int
    seconds: float

    @property
    def cells(self) -> int:
        return self.n_states * self.partner_states


def _trace(rng: np.random.Generator, n: int, dim: int, rid: int) -> CompressedTrace:
    return CompressedTrace(rid, rng.standard_normal((n, dim)), np.arange(1, n + 1), 0.0)


def time_grid(n_states: int, partner_states: int = 256, dim: int = 16, repeats: int = 5,
              seed: int = 0) -> float:
    """Seconds per grid computation: best of ``repeats`` autoranged ``timeit`` batches."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, n_states, partner_states, dim]))
    a = _trace(rng, n_states, dim, 0)
    b = _trace(rng, partner_states, dim, 1)
    timer = timeit.Timer(lambda: prefix_distance_grid(a, b))
    number, _ = timer.autorange()  # also serves as warm-up
    return min(timer.repeat(repeat=repeats, number=number)) / number


def run_bench(sizes: Sequence[int], partner_states: int = 256, dim: int = 16,
              repeats: int = 5, seed: int = 0) -> list[BenchRow]:
    return [BenchRow(n, partner_states, dim, time_grid(n, partner_states, dim, repeats, seed))
            for n in sizes]


def write_bench(rows: Sequence[BenchRow], out: str | os.PathLike) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "bench.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n_states", "partner_states", "dim", "cells", "seconds"])
        for r in rows:
            w.writerow([r.n_states, r.partner_states, r.dim, r.cells, f"{r.seconds:.6f}"])
    return path


def doubling_ratios(rows: Sequence[BenchRow]) -> list[float]:
    """Time ratio between consecutive rows whose state counts double."""
    return [b.seconds / a.seconds for a, b in zip(rows, rows[1:]) if b.n_states == 2 * a.n_states]
