"""Synthetic set-of-vectors datasets and their on-disk format.

Each sample is an ``N x d`` set whose columns are drawn from independently
parameterised gaussian, exponential or uniform distributions, split as evenly
as ``d`` allows and shuffled per sample.  Sample ``i`` only depends on
``(seed, i)``, so any prefix of a dataset is reproducible on its own.

File layout (little endian)::

    magic        8 bytes  b"PBSET\\0\\0\\1"
    version      u32
    sample_count u64
    N            u32
    d            u32
    seed         u64
    scale_mode   u8       bit 0: 0 = multiply by sqrt(d), 1 = divide by sqrt(d)
                          bit 1: exponential parameter read as 0 = scale, 1 = rate
    payload      sample_count * N * d float32, row major

A JSON sidecar ``<path>.json`` mirrors the header.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

MAGIC = b"PBSET\x00\x00\x01"
VERSION = 1
_HEADER = struct.Struct("<8sIQIIQB")

FAMILIES = ("exponential", "gaussian", "uniform")
SCALE_MODES = ("multiply", "divide")
# Table-2 baselines are reproduced only when the vectors are divided by sqrt(d)
# and the exponential parameter is used as a scale (mean), see README.
DEFAULT_SCALE_MODE = "divide"
EXP_PARAMS = ("scale", "rate")
DEFAULT_EXP_PARAM = "scale"


class FormatError(ValueError):
    """File is not a dataset of a supported version."""


class CorruptionError(ValueError):
    """File header and payload disagree (e.g. truncated)."""


@dataclass
class VectorSet:
    """An ``N x d`` set of vectors with an optional signal mask and target row."""

    data: np.ndarray
    signal_mask: np.ndarray | None = None
    target_index: int | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise ValueError(f"VectorSet needs a non-empty N x d array, got {self.data.shape}")
        if self.signal_mask is not None:
            mask = np.asarray(self.signal_mask, dtype=bool)
            if mask.shape != (self.N,):
                raise ValueError(f"signal mask shape {mask.shape} does not match N={self.N}")
            if not mask.any():
                raise ValueError("signal mask selects no rows (k must be >= 1)")
            self.signal_mask = mask
        if self.target_index is not None and not 0 <= self.target_index < self.N:
            raise ValueError(f"target_index {self.target_index} outside [0, {self.N})")

    @property
    def N(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.data.shape[1]

    @property
    def k(self) -> int:
        if self.signal_mask is None:
            raise ValueError("VectorSet has no signal mask")
        return int(self.signal_mask.sum())

    @property
    def snr(self) -> float:
        return self.k / self.N

    @property
    def signal(self) -> np.ndarray:
        return self.data[self.signal_mask]

    @property
    def noise(self) -> np.ndarray:
        return self.data[~self.signal_mask]

    def permuted(self, perm: np.ndarray) -> "VectorSet":
        perm = np.asarray(perm)
        mask = None if self.signal_mask is None else self.signal_mask[perm]
        target = None
        if self.target_index is not None:
            target = int(np.flatnonzero(perm == self.target_index)[0])
        return VectorSet(self.data[perm], mask, target)


@dataclass(frozen=True)
class FeatureDistSpec:
    family: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        p = self.params
        if self.family == "gaussian":
            if not (-3 <= p["mu"] <= 3 and 1 <= p["sigma"] <= 3):
                raise ValueError(f"gaussian params out of range: {p}")
        elif self.family == "exponential":
            if p["sign"] not in (-1, 1) or not 0.1 <= p["lam"] <= 2:
                raise ValueError(f"exponential params out of range: {p}")
            if not 0 <= p["shift"] * p["sign"] <= 3:
                raise ValueError(f"exponential shift out of range: {p}")
        elif self.family == "uniform":
            if not p["high"] > p["low"]:
                raise ValueError(f"uniform needs high > low: {p}")
        else:
            raise ValueError(f"unknown family {self.family!r}")

    def draw(self, rng: np.random.Generator, n: int, exp_param: str = DEFAULT_EXP_PARAM) -> np.ndarray:
        p = self.params
        if self.family == "gaussian":
            return rng.normal(p["mu"], p["sigma"], n)
        if self.family == "exponential":
            lam = p["lam"]
            mean = lam if exp_param == "scale" else 1.0 / lam
            # inverse CDF keeps the draw a pure function of the uniform stream
            e = -mean * np.log1p(-rng.random(n))
            return e * p["sign"] - p["shift"]
        return rng.uniform(p["low"], p["high"], n)


def sample_feature_spec(rng: np.random.Generator, family: str | None = None) -> FeatureDistSpec:
    if family is None:
        family = FAMILIES[int(rng.integers(3))]
    if family == "gaussian":
        return FeatureDistSpec(family, {"mu": rng.uniform(-3, 3), "sigma": rng.uniform(1, 3)})
    if family == "exponential":
        sign = 1 if int(rng.integers(2)) else -1
        shift = rng.uniform(0, 3) * sign
        return FeatureDistSpec(family, {"sign": sign, "shift": shift, "lam": rng.uniform(0.1, 2)})
    if family == "uniform":
        low = rng.uniform(-3, 3)
        return FeatureDistSpec(family, {"low": low, "high": rng.uniform(0.2, 3) + low})
    raise ValueError(f"unknown family {family!r}")


def family_layout(d: int, rng: np.random.Generator) -> list[str]:
    """Shuffled column families: floor(d/3) of each, remainder without replacement."""
    base = d // 3
    cols = [f for f in FAMILIES for _ in range(base)]
    extra = rng.choice(3, size=d % 3, replace=False)
    cols += [FAMILIES[i] for i in extra]
    order = rng.permutation(d)
    return [cols[i] for i in order]


def scale_factor(d: int, scale_mode: str) -> float:
    if scale_mode == "multiply":
        return math.sqrt(d)
    if scale_mode == "divide":
        return 1.0 / math.sqrt(d)
    raise ValueError(f"scale_mode must be one of {SCALE_MODES}, got {scale_mode!r}")


def sample_rng(seed: int, index: int, stream: int = 0) -> np.random.Generator:
    """Independent generator for sample ``index`` of a dataset seeded with ``seed``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(stream, index))))


def generate_sample(N: int, d: int, rng: np.random.Generator, scale_mode: str = DEFAULT_SCALE_MODE,
                    exp_param: str = DEFAULT_EXP_PARAM) -> VectorSet:
    """One set; values are rounded to float32 so the file round trip is exact."""
    if N < 1 or d < 1:
        raise ValueError("N and d must be positive")
    layout = family_layout(d, rng)
    x = np.empty((N, d))
    for j, fam in enumerate(layout):
        x[:, j] = sample_feature_spec(rng, fam).draw(rng, N, exp_param)
    x *= scale_factor(d, scale_mode)
    return VectorSet(x.astype(np.float32).astype(np.float64))


@dataclass
class Dataset:
    """A stack of equally sized sets stored as float32 (widened on access)."""

    data: np.ndarray  # (count, N, d) float32
    seed: int = 0
    scale_mode: str = DEFAULT_SCALE_MODE
    exp_param: str = DEFAULT_EXP_PARAM

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError("Dataset payload must be (count, N, d)")
        if self.data.dtype != np.float32:
            self.data = self.data.astype(np.float32)

    @property
    def count(self) -> int:
        return self.data.shape[0]

    @property
    def N(self) -> int:
        return self.data.shape[1]

    @property
    def d(self) -> int:
        return self.data.shape[2]

    def __len__(self) -> int:
        return self.count

    def batch(self, idx) -> np.ndarray:
        return self.data[idx].astype(np.float64)

    def sample(self, i: int) -> VectorSet:
        return VectorSet(self.data[i].astype(np.float64))

    def header(self) -> dict:
        return {"magic": MAGIC.decode("latin-1"), "version": VERSION, "sample_count": self.count,
                "N": self.N, "d": self.d, "seed": self.seed, "scale_mode": self.scale_mode, "exp_param": self.exp_param}


def iter_samples(count: int, N: int, d: int, seed: int, scale_mode: str = DEFAULT_SCALE_MODE,
                 exp_param: str = DEFAULT_EXP_PARAM, start: int = 0) -> Iterator[np.ndarray]:
    for i in range(start, start + count):
        yield generate_sample(N, d, sample_rng(seed, i), scale_mode, exp_param).data


def generate_dataset(count: int, N: int, d: int, seed: int, scale_mode: str = DEFAULT_SCALE_MODE,
                     exp_param: str = DEFAULT_EXP_PARAM) -> Dataset:
    if count < 1:
        raise ValueError("count must be >= 1")
    out = np.empty((count, N, d), dtype=np.float32)
    for i, x in enumerate(iter_samples(count, N, d, seed, scale_mode, exp_param)):
        out[i] = x
    return Dataset(out, seed=seed, scale_mode=scale_mode, exp_param=exp_param)


def write_dataset(path, ds: Dataset) -> None:
    path = Path(path)
    mode = SCALE_MODES.index(ds.scale_mode) | (EXP_PARAMS.index(ds.exp_param) << 1)
    header = _HEADER.pack(MAGIC, VERSION, ds.count, ds.N, ds.d, ds.seed, mode)
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(np.ascontiguousarray(ds.data, dtype="<f4").tobytes())
        with open(str(path) + ".json", "w") as fh:
            json.dump(ds.header(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise OSError(f"failed writing dataset to {path}: {exc}") from exc


def read_header(fh) -> tuple[int, int, int, int, str, str]:
    raw = fh.read(_HEADER.size)
    if len(raw) < _HEADER.size:
        raise CorruptionError("file shorter than the dataset header")
    magic, version, count, N, d, seed, mode = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    if count < 1 or N < 1 or d < 1:
        raise FormatError("header counts must be positive")
    if mode > 3:
        raise FormatError(f"unknown scale_mode code {mode}")
    return count, N, d, seed, SCALE_MODES[mode & 1], EXP_PARAMS[mode >> 1]


def read_dataset(path) -> Dataset:
    path = Path(path)
    with open(path, "rb") as fh:
        count, N, d, seed, mode, exp_param = read_header(fh)
        expected = count * N * d * 4
        payload = fh.read(expected + 1)
    if len(payload) != expected:
        raise CorruptionError(f"payload holds {len(payload)} bytes, header implies {expected}")
    data = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(count, N, d)
    return Dataset(data, seed=seed, scale_mode=mode, exp_param=exp_param)


def file_size(count: int, N: int, d: int) -> int:
    return _HEADER.size + count * N * d * 4


def sidecar_path(path) -> str:
    return os.fspath(path) + ".json"
