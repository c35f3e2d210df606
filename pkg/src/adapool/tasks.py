"""Supervised targets built on top of a dataset of sets.

* KNN-centroid: pick a target row, find its ``k`` nearest neighbours (target
  excluded, Euclidean distance, ties to the lower row index) and regress their
  centroid.  The neighbours are the signal subset.
* Aggregation: column-wise min / max / mean of the whole set.

Labels for a whole dataset live in a :class:`LabelSet` and persist next to the
dataset file (``<dataset>.k<k>.labels`` by convention).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datagen import (DEFAULT_EXP_PARAM, DEFAULT_SCALE_MODE, CorruptionError, Dataset, FormatError, VectorSet,
                      iter_samples, sample_rng)
from .pooling import centroid_mse

TARGET_STREAM = 1
KINDS = ("knn", "min", "max", "avg")

LABEL_MAGIC = b"PBTGT\x00\x00\x01"
LABEL_VERSION = 1
_LABEL_HEADER = struct.Struct("<8sIQIIIB")


class DomainError(ValueError):
    pass


@dataclass
class LabeledSample:
    X: VectorSet
    target_index: int
    k: int
    y: np.ndarray
    signal_mask: np.ndarray


def _check_k(k: int, N: int) -> None:
    if not 1 <= k <= N - 1:
        raise DomainError(f"k must lie in [1, N-1] = [1, {N - 1}], got {k}")


def knn_indices(x: np.ndarray, target_index: int, k: int) -> np.ndarray:
    """Row indices of the ``k`` nearest neighbours of row ``target_index``."""
    _check_k(k, x.shape[0])
    dist = ((x - x[target_index]) ** 2).sum(axis=1)
    dist[target_index] = np.inf
    return np.argsort(dist, kind="stable")[:k]


def knn_targets(X: VectorSet, k: int, rng: np.random.Generator | None = None,
                target_index: int | None = None) -> LabeledSample:
    x = X.data
    _check_k(k, X.N)
    if target_index is None:
        if rng is None:
            raise ValueError("need an rng or an explicit target_index")
        target_index = int(rng.integers(X.N))
    idx = knn_indices(x, target_index, k)
    mask = np.zeros(X.N, dtype=bool)
    mask[idx] = True
    y = x[mask].mean(axis=0)
    return LabeledSample(VectorSet(x, mask, target_index), target_index, k, y, mask)


def aggregation_targets(X, kind: str) -> np.ndarray:
    x = X.data if isinstance(X, VectorSet) else np.asarray(X, dtype=np.float64)
    if kind == "min":
        return x.min(axis=-2)
    if kind == "max":
        return x.max(axis=-2)
    if kind == "avg":
        return x.mean(axis=-2)
    raise DomainError(f"aggregation kind must be min, max or avg, got {kind!r}")


def target_indices(count: int, N: int, seed: int) -> np.ndarray:
    """Uniform target row per sample, keyed by (seed, sample index)."""
    return np.array([int(sample_rng(seed, i, TARGET_STREAM).integers(N)) for i in range(count)],
                    dtype=np.int64)


@dataclass
class LabelSet:
    """Targets for every sample of a dataset.

    ``y`` is rounded to float32 so the label file round-trips exactly.
    """

    kind: str
    k: int
    target_index: np.ndarray  # (S,) int64
    y: np.ndarray  # (S, d) float64 holding float32-representable values
    mask: np.ndarray  # (S, N) bool

    @property
    def count(self) -> int:
        return self.y.shape[0]

    def subset(self, idx) -> "LabelSet":
        return LabelSet(self.kind, self.k, self.target_index[idx], self.y[idx], self.mask[idx])


def _knn_batch(x: np.ndarray, target_index: np.ndarray, k: int):
    S, N, _ = x.shape
    rows = np.arange(S)
    dist = ((x - x[rows, target_index][:, None, :]) ** 2).sum(axis=-1)
    dist[rows, target_index] = np.inf
    order = np.argsort(dist, axis=1, kind="stable")[:, :k]
    mask = np.zeros((S, N), dtype=bool)
    np.put_along_axis(mask, order, True, axis=1)
    y = np.take_along_axis(x, order[..., None], axis=1).mean(axis=1)
    return y, mask


def make_labels(ds: Dataset, kind: str = "knn", k: int = 1, seed: int | None = None,
                chunk: int = 4096) -> LabelSet:
    """Labels for every sample; target rows keyed by ``seed`` (defaults to the dataset seed)."""
    if kind not in KINDS:
        raise DomainError(f"kind must be one of {KINDS}")
    seed = ds.seed if seed is None else seed
    tidx = target_indices(ds.count, ds.N, seed)
    y = np.empty((ds.count, ds.d))
    if kind == "knn":
        _check_k(k, ds.N)
        mask = np.zeros((ds.count, ds.N), dtype=bool)
        for lo in range(0, ds.count, chunk):
            sl = slice(lo, lo + chunk)
            y[sl], mask[sl] = _knn_batch(ds.batch(sl), tidx[sl], k)
    else:
        k = ds.N
        mask = np.ones((ds.count, ds.N), dtype=bool)
        for lo in range(0, ds.count, chunk):
            sl = slice(lo, lo + chunk)
            y[sl] = aggregation_targets(ds.batch(sl), kind)
    return LabelSet(kind, k, tidx, y.astype(np.float32).astype(np.float64), mask)


def baseline_losses(ds: Dataset, labels: LabelSet, idx=None) -> tuple[float, float]:
    """Mean excess signal loss of predicting the set centroid and the target row."""
    idx = np.arange(ds.count) if idx is None else np.asarray(idx)
    x = ds.batch(idx)
    y = labels.y[idx]
    centroid = x.mean(axis=1)
    target = x[np.arange(len(idx)), labels.target_index[idx]]
    return float(((centroid - y) ** 2).mean()), float(((target - y) ** 2).mean())


def baseline_sweep(count: int, N: int, d: int, seed: int, ks, scale_mode: str = DEFAULT_SCALE_MODE,
                   exp_param: str = DEFAULT_EXP_PARAM, chunk: int = 2048) -> dict:
    """Centroid and target baselines for several k without holding the dataset.

    Samples and target rows match :func:`generate_dataset` and :func:`make_labels`
    for the same arguments.  Returns ``{k: (centroid_loss, target_loss)}``.
    """
    ks = [int(k) for k in ks]
    for k in ks:
        _check_k(k, N)
    sums = {k: np.zeros(2) for k in ks}
    gen = iter_samples(count, N, d, seed, scale_mode, exp_param)
    for lo in range(0, count, chunk):
        n = min(chunk, count - lo)
        x = np.stack([next(gen) for _ in range(n)])
        tidx = np.array([int(sample_rng(seed, lo + i, TARGET_STREAM).integers(N)) for i in range(n)])
        rows = np.arange(n)
        target = x[rows, tidx]
        dist = ((x - target[:, None, :]) ** 2).sum(axis=-1)
        dist[rows, tidx] = np.inf
        order = np.argsort(dist, axis=1, kind="stable")
        centroid = x.mean(axis=1)
        for k in ks:
            y = np.take_along_axis(x, order[:, :k, None], axis=1).mean(axis=1)
            y = y.astype(np.float32).astype(np.float64)
            sums[k] += [((centroid - y) ** 2).mean(axis=1).sum(), ((target - y) ** 2).mean(axis=1).sum()]
    return {k: (float(v[0] / count), float(v[1] / count)) for k, v in sums.items()}


def sample_baselines(sample: LabeledSample) -> tuple[float, float]:
    """Per-sample version of :func:`baseline_losses` using the pooling metric."""
    X = sample.X
    return (centroid_mse(X, X.data.mean(axis=0)), centroid_mse(X, X.data[sample.target_index]))


# -- persistence -------------------------------------------------------------

def write_labels(path, labels: LabelSet) -> None:
    S, d = labels.y.shape
    N = labels.mask.shape[1]
    nbytes = (N + 7) // 8
    rec = np.dtype([("t", "<u4"), ("k", "<u4"), ("y", "<f4", (d,)), ("m", "u1", (nbytes,))])
    out = np.zeros(S, dtype=rec)
    out["t"] = labels.target_index
    out["k"] = labels.mask.sum(axis=1)
    out["y"] = labels.y
    out["m"] = np.packbits(labels.mask, axis=1, bitorder="little")
    with open(Path(path), "wb") as fh:
        fh.write(_LABEL_HEADER.pack(LABEL_MAGIC, LABEL_VERSION, S, N, d, labels.k, KINDS.index(labels.kind)))
        fh.write(out.tobytes())


def read_labels(path) -> LabelSet:
    buf = Path(path).read_bytes()
    if len(buf) < _LABEL_HEADER.size:
        raise CorruptionError("label file shorter than its header")
    magic, version, S, N, d, k, kind = _LABEL_HEADER.unpack_from(buf)
    if magic != LABEL_MAGIC:
        raise FormatError(f"bad label magic {magic!r}")
    if version != LABEL_VERSION or kind >= len(KINDS):
        raise FormatError(f"unsupported label version/kind {version}/{kind}")
    nbytes = (N + 7) // 8
    rec = np.dtype([("t", "<u4"), ("k", "<u4"), ("y", "<f4", (d,)), ("m", "u1", (nbytes,))])
    body = buf[_LABEL_HEADER.size:]
    if len(body) != S * rec.itemsize:
        raise CorruptionError(f"label payload holds {len(body)} bytes, header implies {S * rec.itemsize}")
    arr = np.frombuffer(body, dtype=rec)
    mask = np.unpackbits(arr["m"], axis=1, count=N, bitorder="little").astype(bool)
    if (mask.sum(axis=1) != arr["k"]).any():
        raise CorruptionError("mask popcount disagrees with stored k")
    return LabelSet(KINDS[kind], int(k), arr["t"].astype(np.int64), arr["y"].astype(np.float64), mask)
