"""Wall-clock scaling of the pooling kernels.

Each kernel pools a batch of ``B`` sets per call into preallocated buffers,
so the timing covers arithmetic and not allocation.  The AdaPool kernel
includes its query/key/value projections, computed block by block so the
working set stays in cache as ``N`` grows.  The ClsToken kernel appends the
class row to every set and reads it back, which is where its cost lives.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass

import numpy as np

KERNELS = ("avg", "max", "cls", "ada")
SLOPE_RANGE = (0.8, 1.3)


def _avg(x, p, ws):
    return np.mean(x, axis=1, out=ws["out"])


def _max(x, p, ws):
    return np.max(x, axis=1, out=ws["out"])


def _cls(x, p, ws):
    ext = ws["ext"]
    ext[:, :-1] = x
    ext[:, -1] = p["cls"]
    return ext[:, -1]


def _ada(x, p, ws):
    # streams over row blocks with a running max so the projected keys and
    # values stay cache-resident; the result equals the one-shot softmax
    B, N, d = x.shape
    blk = ws["k"].shape[1]
    q = np.matmul(x[:, 0], p["W_Q"], out=ws["q"])
    q *= p["scale"]
    m, s, acc = ws["m"], ws["s"], ws["acc"]
    m.fill(-np.inf)
    s.fill(0.0)
    acc.fill(0.0)
    for lo in range(0, N, blk):
        n = min(blk, N - lo)
        xb = x[:, lo:lo + n]
        k = np.matmul(xb, p["W_K"], out=ws["k"][:, :n])
        v = np.matmul(xb, p["W_V"], out=ws["v"][:, :n])
        r = np.matmul(k, q[:, :, None], out=ws["r"][:, :n])[:, :, 0]
        m_new = np.maximum(m, r.max(axis=1))
        corr = np.exp(m - m_new)
        r -= m_new[:, None]
        np.exp(r, out=r)
        s *= corr
        s += r.sum(axis=1)
        acc *= corr[:, None, None]
        acc += np.matmul(r[:, None, :], v)
        m[:] = m_new
    acc /= s[:, None, None]
    return acc[:, 0]


_FUNCS = {"avg": _avg, "max": _max, "cls": _cls, "ada": _ada}


ADA_BLOCK = 1024


def workspace(B: int, N: int, d: int, block: int = ADA_BLOCK) -> dict:
    """Buffers reused across calls so timings exclude page-faulting fresh memory."""
    blk = min(N, block)
    return {"out": np.empty((B, d)), "ext": np.empty((B, N + 1, d)), "q": np.empty((B, d)),
            "k": np.empty((B, blk, d)), "v": np.empty((B, blk, d)), "r": np.empty((B, blk, 1)),
            "m": np.empty(B), "s": np.empty(B), "acc": np.empty((B, 1, d))}


def kernel_params(d: int, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    return {"W_Q": rng.normal(0, d ** -0.5, (d, d)), "W_K": rng.normal(0, d ** -0.5, (d, d)),
            "W_V": rng.normal(0, d ** -0.5, (d, d)), "cls": rng.normal(size=d), "scale": d ** -0.5}


def pool_kernel(method: str, x: np.ndarray, params: dict, ws: dict | None = None) -> np.ndarray:
    """Batched pooling ``(B, N, d) -> (B, d)``; the AdaPool query is row 0 of each set.

    The result may be a view into ``ws``; copy it if it must outlive the next call.
    """
    if method not in _FUNCS:
        raise ValueError(f"unknown kernel {method!r}; choose from {KERNELS}")
    ws = workspace(*x.shape) if ws is None else ws
    return _FUNCS[method](x, params, ws)


@dataclass
class BenchResult:
    method: str
    N: int
    d: int
    repetitions: int
    median_ns: int
    slope: float = float("nan")


def time_call(fn, reps: int, warmup: int) -> int:
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter_ns()
        fn()
        samples.append(time.perf_counter_ns() - t0)
    return int(np.median(samples))


def loglog_slope(sizes, times) -> float:
    return float(np.polyfit(np.log(np.asarray(sizes, float)), np.log(np.asarray(times, float)), 1)[0])


def bench_pooling(method: str, Ns, ds, reps: int = 15, warmup: int = 2, batch: int = 1,
                  seed: int = 0) -> list[BenchResult]:
    Ns, ds = list(Ns), list(ds)
    if Ns != sorted(Ns) or ds != sorted(ds):
        raise ValueError("sizes must be sorted ascending")
    if reps < 5:
        raise ValueError("need at least 5 repetitions")
    rng = np.random.default_rng(seed)
    out = []
    for d in ds:
        params = kernel_params(d, seed)
        row = []
        for N in Ns:
            x = rng.normal(size=(batch, N, d))
            ws = workspace(batch, N, d)
            ns = time_call(lambda: pool_kernel(method, x, params, ws), reps, warmup)
            row.append(BenchResult(method, N, d, reps, ns))
        if len(Ns) > 1:
            s = loglog_slope(Ns, [r.median_ns for r in row])
            for r in row:
                r.slope = s
        out += row
    return out


def results_to_csv(results) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "N", "d", "median_ns", "slope"])
    for r in results:
        w.writerow([r.method, r.N, r.d, r.median_ns, f"{r.slope:.4f}"])
    return buf.getvalue()
