"""Wall-clock scaling of external vs self attention in token count."""

from __future__ import annotations

import time
from typing import Sequence

import numpy as np

from . import tensor as T
from .model import multi_head_ea, self_attention
from .tensor import Tensor


def _timed(fn, runs: int) -> float:
    fn()  # warm-up
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times)) * 1e3


def bench_attention(tokens: Sequence[int], runs: int = 5, dim: int = 32, heads: int = 8,
                    memory_size: int = 64, batch: int = 2, seed: int = 0) -> list[tuple[str, int, float]]:
    """Median forward time in ms per (kind, token count)."""
    rng = np.random.default_rng(seed)
    dh = dim // heads

    def w(*shape):
        return Tensor(rng.standard_normal(shape).astype(np.float32) * 0.1)

    mem_k, mem_v, w_o = w(memory_size, dh), w(memory_size, dh), w(dim, dim)
    w_q, w_k, w_v = w(dim, dim), w(dim, dim), w(dim, dim)
    rows = []
    with T.no_grad():
        for n in tokens:
            F = w(batch, n, dim)
            rows.append(("external", n, _timed(lambda: multi_head_ea(F, mem_k, mem_v, w_o, heads), runs)))
            rows.append(("self", n, _timed(lambda: self_attention(F, w_q, w_k, w_v, w_o, heads), runs)))
    return rows


def scaling_ratio(rows, kind: str) -> float:
    """Time at the largest token count over time at the smallest."""
    mine = sorted((n, ms) for k, n, ms in rows if k == kind)
    return mine[-1][1] / mine[0][1]
