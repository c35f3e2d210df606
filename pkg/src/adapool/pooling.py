"""Global vector pools as weighted sums over the rows of a set.

Every pool maps an ``N x d`` set to a single vector.  AvgPool, AdaPool and the
signal-optimal pool use one scalar weight per row; MaxPool uses one weight per
element (ties on a column share weight ``1/m``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datagen import VectorSet


class PoolConfigError(ValueError):
    pass


def _rows(X) -> np.ndarray:
    arr = X.data if isinstance(X, VectorSet) else np.asarray(X, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise ValueError(f"expected a non-empty N x d set, got shape {arr.shape}")
    return arr


def _mask(X) -> np.ndarray:
    if not isinstance(X, VectorSet) or X.signal_mask is None:
        raise ValueError("operation needs a VectorSet with a signal mask")
    return X.signal_mask


@dataclass
class PoolWeights:
    """Weights ``w`` such that ``pool(X) = sum_i w_i * x_i``.

    ``mode`` is ``"scalar"`` (shape ``(N,)``) or ``"feature"`` (shape ``(N, d)``).
    """

    mode: str
    weights: np.ndarray

    def apply(self, X) -> np.ndarray:
        x = _rows(X)
        if self.mode == "scalar":
            return self.weights @ x
        return (self.weights * x).sum(axis=0)


# -- AvgPool ----------------------------------------------------------------

def avg_weights(X) -> PoolWeights:
    n = _rows(X).shape[0]
    return PoolWeights("scalar", np.full(n, 1.0 / n))


def avg_pool(X) -> np.ndarray:
    return _rows(X).mean(axis=0)


# -- MaxPool ----------------------------------------------------------------

def max_weights(X) -> PoolWeights:
    x = _rows(X)
    hit = x == x.max(axis=0, keepdims=True)
    return PoolWeights("feature", hit / hit.sum(axis=0, keepdims=True))


def max_pool(X) -> np.ndarray:
    return _rows(X).max(axis=0)


def min_pool(X) -> np.ndarray:
    return _rows(X).min(axis=0)


# -- AdaPool ----------------------------------------------------------------

@dataclass
class AdaPoolParams:
    W_Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray
    heads: int = 1

    def __post_init__(self):
        self.W_Q = np.asarray(self.W_Q, dtype=np.float64)
        self.W_K = np.asarray(self.W_K, dtype=np.float64)
        self.W_V = np.asarray(self.W_V, dtype=np.float64)
        dim = self.W_Q.shape[0]
        for name in ("W_Q", "W_K", "W_V"):
            m = getattr(self, name)
            if m.shape != (dim, dim):
                raise PoolConfigError(f"{name} must be {dim}x{dim}, got {m.shape}")
            if not np.isfinite(m).all():
                raise PoolConfigError(f"{name} has non-finite entries")
        if self.heads < 1 or dim % self.heads:
            raise PoolConfigError(f"dimension {dim} is not divisible by {self.heads} heads")

    @property
    def dim(self) -> int:
        return self.W_Q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def scale(self) -> float:
        return 1.0 / np.sqrt(self.head_dim)

    @classmethod
    def identity(cls, dim: int, heads: int = 1) -> "AdaPoolParams":
        eye = np.eye(dim)
        return cls(eye.copy(), eye.copy(), eye.copy(), heads)


def softmax(r: np.ndarray, axis: int = -1) -> np.ndarray:
    z = r - r.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def ada_relations(X, q, params: AdaPoolParams) -> np.ndarray:
    """Scaled dot-product relations, shape ``(heads, N)``."""
    x = _rows(X)
    q = np.asarray(q, dtype=np.float64)
    if x.shape[1] != params.dim or q.shape != (params.dim,):
        raise PoolConfigError(f"set width {x.shape[1]} / query {q.shape} vs params dim {params.dim}")
    h, dh = params.heads, params.head_dim
    qh = (q @ params.W_Q).reshape(h, dh)
    kh = (x @ params.W_K).reshape(-1, h, dh)
    return np.einsum("hc,nhc->hn", qh, kh) * params.scale


def ada_weights(X, q, params: AdaPoolParams) -> np.ndarray:
    """Per-head attention weights, shape ``(heads, N)``; each row sums to one."""
    return softmax(ada_relations(X, q, params), axis=-1)


def ada_pool(X, q, params: AdaPoolParams) -> np.ndarray:
    x = _rows(X)
    w = ada_weights(x, q, params)
    h, dh = params.heads, params.head_dim
    v = (x @ params.W_V).reshape(-1, h, dh)
    return np.einsum("hn,nhc->hc", w, v).reshape(-1)


# -- signal optimal pool and signal loss -------------------------------------

def signal_optimal_weights(X: VectorSet) -> PoolWeights:
    mask = _mask(X)
    return PoolWeights("scalar", mask / mask.sum())


def signal_optimal_pool(X: VectorSet) -> np.ndarray:
    return _rows(X)[_mask(X)].mean(axis=0)


def signal_loss(X: VectorSet, x_c) -> float:
    """Element-mean distortion of the signal rows around ``x_c``.

    Equal to ``1/(k*d) * sum_s ||x_s - x_c||^2``.
    """
    s = _rows(X)[_mask(X)]
    diff = s - np.asarray(x_c, dtype=np.float64)
    return float((diff * diff).mean())


def signal_loss_grad(X: VectorSet, x_c) -> np.ndarray:
    s = _rows(X)[_mask(X)]
    k, d = s.shape
    return -2.0 / (k * d) * (s - np.asarray(x_c, dtype=np.float64)).sum(axis=0)


def centroid_mse(X: VectorSet, x_c) -> float:
    """Excess signal loss: element-mean squared distance from ``x_c`` to the signal centroid.

    ``signal_loss(X, c) == signal_loss(X, c*) + centroid_mse(X, c)`` for the
    signal centroid ``c*``, so this is zero exactly at the optimum.
    """
    diff = signal_optimal_pool(X) - np.asarray(x_c, dtype=np.float64)
    return float((diff * diff).mean())


POOLS = {
    "avg": avg_pool,
    "max": max_pool,
    "min": min_pool,
}


# -- special cases of AdaPool ------------------------------------------------

MAX_REDUCTION_GAIN = 50.0


def avg_reduction_error(X, q) -> float:
    """Distance between AdaPool with a zero query map and identity values, and AvgPool."""
    x = _rows(X)
    d = x.shape[1]
    params = AdaPoolParams(np.zeros((d, d)), np.eye(d), np.eye(d))
    return float(np.abs(ada_pool(x, q, params) - avg_pool(x)).max())


def max_reduction_error(X, q, gain: float = MAX_REDUCTION_GAIN) -> float:
    """Distance between one-head-per-feature AdaPool with a large query gain and MaxPool.

    Needs strictly positive inputs and query so each head's softmax leans on
    the column maximum.
    """
    x = _rows(X)
    d = x.shape[1]
    params = AdaPoolParams(gain * np.eye(d), np.eye(d), np.eye(d), heads=d)
    return float(np.abs(ada_pool(x, q, params) - max_pool(x)).max())


def max_reduction_bound(X, q, gain: float = MAX_REDUCTION_GAIN) -> float:
    """Upper bound on :func:`max_reduction_error` for positive ``X`` and ``q``.

    In column ``c`` the softmax puts weight at most ``exp(-b*g)`` on a row
    trailing the maximum by ``g``, with ``b = gain * q_c``, so the column error
    is at most ``sum_g g*exp(-b*g)``.
    """
    x = _rows(X)
    q = np.asarray(q, dtype=np.float64)
    gaps = x.max(axis=0) - x
    return float((gaps * np.exp(-gain * q * gaps)).sum(axis=0).max())


def separated_positive_set(rng: np.random.Generator, n: int, d: int, margin: float = 0.2) -> np.ndarray:
    """Positive ``n x d`` set whose column maxima lead the runner-up by at least ``margin``."""
    x = rng.uniform(0.5, 3.0, (n, d))
    x[x.argmax(axis=0), np.arange(d)] += margin
    return x


def reduction_sweep(trials: int, seed: int, n_max: int = 64, d: int = 8) -> dict:
    """Worst errors of both reductions over random sets.

    The max case is a limit in the query gain, so it is checked on positive
    sets with separated column maxima and queries of at least one.
    """
    rng = np.random.default_rng(seed)
    worst_avg = worst_max = 0.0
    for _ in range(trials):
        n = int(rng.integers(1, n_max + 1))
        worst_avg = max(worst_avg, avg_reduction_error(rng.normal(size=(n, d)), rng.normal(size=d)))
        xp = separated_positive_set(rng, n, d)
        worst_max = max(worst_max, max_reduction_error(xp, rng.uniform(1.0, 3.0, d)))
    return {"trials": trials, "avg_error": worst_avg, "max_error": worst_max}
