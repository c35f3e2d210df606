"""Pre-norm transformer encoder capped by a pooling head.

The model maps a batch of sets ``(B, N, d_in)`` plus a target row index per
set to a ``(B, d_out)`` prediction:

    project -> add target indicator -> [append cls token] -> L x (attn, ff)
    -> [final layer norm] -> pool head -> linear output

Parameters live in an ordered ``name -> Tensor`` mapping.  Each parameter is
initialised from its own random stream keyed by ``(seed, name)``, so models
that differ only in the pooling head share every common weight bit for bit.
"""

from __future__ import annotations

import json
import struct
import zlib
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .datagen import VectorSet
from .tensor import Tensor

POOL_METHODS = ("avg", "max", "cls", "ada")
INIT_STD = 0.02


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 3
    num_heads: int = 8
    dim_input: int = 16
    dim_hidden: int = 16
    dim_ff: int = 64
    dim_output: int | None = None
    dropout_ff: float = 0.1
    dropout_attn: float = 0.0
    bias_attn: bool = False
    bias_ff: bool = True
    pool_method: str = "ada"
    adapool_heads: int | None = None
    final_norm: bool = False
    ln_eps: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if self.num_layers < 0:
            raise ConfigError("num_layers must be >= 0")
        if self.num_heads < 1 or self.dim_hidden % self.num_heads:
            raise ConfigError(f"dim_hidden={self.dim_hidden} not divisible by num_heads={self.num_heads}")
        if self.pool_heads < 1 or self.dim_hidden % self.pool_heads:
            raise ConfigError(f"dim_hidden={self.dim_hidden} not divisible by adapool_heads={self.pool_heads}")
        for name in ("dropout_ff", "dropout_attn"):
            p = getattr(self, name)
            if not 0.0 <= p < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1), got {p}")
        if self.pool_method not in POOL_METHODS:
            raise ConfigError(f"pool_method must be one of {POOL_METHODS}, got {self.pool_method!r}")
        if min(self.dim_input, self.dim_hidden, self.dim_ff) < 1:
            raise ConfigError("dimensions must be positive")

    @property
    def out_dim(self) -> int:
        return self.dim_input if self.dim_output is None else self.dim_output

    @property
    def pool_heads(self) -> int:
        return self.num_heads if self.adapool_heads is None else self.adapool_heads

    def with_method(self, method: str) -> "EncoderConfig":
        return replace(self, pool_method=method)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


def _param_rng(seed: int, name: str) -> np.random.Generator:
    key = zlib.crc32(name.encode())
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(key,))))


def _param_shapes(cfg: EncoderConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, init) for every parameter, in canonical order."""
    D, F = cfg.dim_hidden, cfg.dim_ff
    spec = [
        ("proj.weight", (cfg.dim_input, D), "normal"),
        ("proj.bias", (D,), "zeros"),
        ("target_embed", (D,), "normal"),
    ]
    if cfg.pool_method == "cls":
        spec.append(("cls_token", (D,), "normal"))
    for i in range(cfg.num_layers):
        p = f"layers.{i}."
        spec += [(p + "ln1.gamma", (D,), "ones"), (p + "ln1.beta", (D,), "zeros")]
        for m in "qkvo":
            spec.append((p + f"attn.{m}.weight", (D, D), "normal"))
            if cfg.bias_attn:
                spec.append((p + f"attn.{m}.bias", (D,), "zeros"))
        spec += [(p + "ln2.gamma", (D,), "ones"), (p + "ln2.beta", (D,), "zeros")]
        spec.append((p + "ff1.weight", (D, F), "normal"))
        if cfg.bias_ff:
            spec.append((p + "ff1.bias", (F,), "zeros"))
        spec.append((p + "ff2.weight", (F, D), "normal"))
        if cfg.bias_ff:
            spec.append((p + "ff2.bias", (D,), "zeros"))
    if cfg.final_norm:
        spec += [("final_ln.gamma", (D,), "ones"), ("final_ln.beta", (D,), "zeros")]
    if cfg.pool_method == "ada":
        spec += [("pool.q", (D, D), "normal"), ("pool.k", (D, D), "normal"), ("pool.v", (D, D), "normal")]
    spec += [("head.weight", (D, cfg.out_dim), "normal"), ("head.bias", (cfg.out_dim,), "zeros")]
    return spec


@dataclass
class ModelState:
    cfg: EncoderConfig
    params: "OrderedDict[str, Tensor]" = field(default_factory=OrderedDict)

    @classmethod
    def init(cls, cfg: EncoderConfig) -> "ModelState":
        params = OrderedDict()
        for name, shape, kind in _param_shapes(cfg):
            if kind == "normal":
                data = _param_rng(cfg.seed, name).normal(0.0, INIT_STD, shape)
            elif kind == "ones":
                data = np.ones(shape)
            else:
                data = np.zeros(shape)
            params[name] = Tensor(data, requires_grad=True)
        return cls(cfg, params)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_snapshot(self, snap: dict[str, np.ndarray]) -> None:
        for k, v in snap.items():
            self.params[k].data = v.copy()


# -- forward pass -----------------------------------------------------------

def _linear(x: Tensor, st: ModelState, prefix: str) -> Tensor:
    y = T.matmul(x, st[prefix + ".weight"])
    bias = st.params.get(prefix + ".bias")
    return y if bias is None else T.add_row(y, bias)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    B, n, D = x.shape
    return T.transpose(T.reshape(x, (B, n, heads, D // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    B, h, n, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (B, n, h * dh))


def _self_attention(x: Tensor, st: ModelState, prefix: str, training: bool, rng) -> Tensor:
    cfg = st.cfg
    h = cfg.num_heads
    scale = 1.0 / np.sqrt(cfg.dim_hidden // h)
    q = _split_heads(_linear(x, st, prefix + "q"), h)
    k = _split_heads(_linear(x, st, prefix + "k"), h)
    v = _split_heads(_linear(x, st, prefix + "v"), h)
    w = T.softmax_rows(T.matmul(q, T.swap_last(k)), scale)
    w = T.dropout(w, cfg.dropout_attn, rng, training)
    return _linear(_merge_heads(T.matmul(w, v)), st, prefix + "o")


def _feedforward(x: Tensor, st: ModelState, prefix: str, training: bool, rng) -> Tensor:
    p = st.cfg.dropout_ff
    hidden = T.dropout(T.relu(_linear(x, st, prefix + "ff1")), p, rng, training)
    return T.dropout(_linear(hidden, st, prefix + "ff2"), p, rng, training)


def _as_batch(X, target_index):
    if isinstance(X, VectorSet):
        if target_index is None:
            target_index = X.target_index
        X = X.data[None]
        target_index = None if target_index is None else np.array([target_index])
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if target_index is not None:
        target_index = np.atleast_1d(np.asarray(target_index, dtype=np.int64))
    return X, target_index


def encode(X, state: ModelState, target_index=None, training: bool = False,
           rng: np.random.Generator | None = None) -> Tensor:
    """Output embeddings ``(B, N', dim_hidden)``; ``N' = N + 1`` in cls mode (cls row last)."""
    cfg = state.cfg
    X, target_index = _as_batch(X, target_index)
    if X.shape[-1] != cfg.dim_input:
        raise ConfigError(f"input width {X.shape[-1]} does not match dim_input={cfg.dim_input}")
    B, N, _ = X.shape
    if target_index is not None:
        if target_index.shape != (B,) or (target_index < 0).any() or (target_index >= N).any():
            raise ConfigError("target_index must hold one valid row index per set")
    h = _linear(Tensor(X), state, "proj")
    if target_index is not None:
        h = T.add_at_rows(h, target_index, state["target_embed"])
    if cfg.pool_method == "cls":
        h = T.concat_rows([h, T.expand(T.reshape(state["cls_token"], (1, cfg.dim_hidden)), (B,))])
    for i in range(cfg.num_layers):
        p = f"layers.{i}."
        a = T.layer_norm(h, state[p + "ln1.gamma"], state[p + "ln1.beta"], cfg.ln_eps)
        h = h + _self_attention(a, state, p + "attn.", training, rng)
        f = T.layer_norm(h, state[p + "ln2.gamma"], state[p + "ln2.beta"], cfg.ln_eps)
        h = h + _feedforward(f, state, p, training, rng)
    if cfg.final_norm:
        h = T.layer_norm(h, state["final_ln.gamma"], state["final_ln.beta"], cfg.ln_eps)
    return h


def _ada_head(emb: Tensor, query: Tensor, state: ModelState) -> Tensor:
    cfg = state.cfg
    B, N, D = emb.shape
    h = cfg.pool_heads
    scale = 1.0 / np.sqrt(D // h)
    q = _split_heads(T.matmul(T.reshape(query, (B, 1, D)), state["pool.q"]), h)
    k = _split_heads(T.matmul(emb, state["pool.k"]), h)
    v = _split_heads(T.matmul(emb, state["pool.v"]), h)
    w = T.softmax_rows(T.matmul(q, T.swap_last(k)), scale)  # (B, h, 1, N)
    pooled = T.reshape(_merge_heads(T.matmul(w, v)), (B, D))
    return pooled + query


def pool_head(embeddings: Tensor, state: ModelState, query_index=None) -> Tensor:
    """Reduce ``(B, N', D)`` embeddings to ``(B, D)`` with the configured method.

    ``query_index`` selects the AdaPool query row per set (the target row).
    """
    method = state.cfg.pool_method
    if method == "avg":
        return T.mean_rows(embeddings)
    if method == "max":
        return T.max_rows(embeddings)
    if method == "cls":
        last = np.full(embeddings.shape[0], embeddings.shape[1] - 1)
        return T.take_rows(embeddings, last)
    if query_index is None:
        raise ConfigError("ada pooling needs a query index per set")
    query = T.take_rows(embeddings, np.asarray(query_index, dtype=np.int64))
    return _ada_head(embeddings, query, state)


def forward(X, state: ModelState, target_index=None, training: bool = False,
            rng: np.random.Generator | None = None) -> Tensor:
    """Predictions ``(B, d_out)`` for a batch (or a single VectorSet, B = 1)."""
    X, target_index = _as_batch(X, target_index)
    emb = encode(X, state, target_index, training, rng)
    pooled = pool_head(emb, state, target_index)
    return _linear(pooled, state, "head")


def predict(X, state: ModelState, target_index=None, batch_size: int = 1024) -> np.ndarray:
    """Eval-mode predictions as a plain array, computed in chunks."""
    X, target_index = _as_batch(X, target_index)
    out = np.empty((X.shape[0], state.cfg.out_dim))
    for lo in range(0, X.shape[0], batch_size):
        sl = slice(lo, lo + batch_size)
        ti = None if target_index is None else target_index[sl]
        out[sl] = forward(X[sl], state, ti, training=False).data
    return out


# -- checkpoints --------------------------------------------------------------

CKPT_MAGIC = b"PBCKPT\x00\x01"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, state: ModelState, extra: dict | None = None) -> None:
    meta = json.dumps({"config": state.cfg.to_dict(), "extra": extra or {}}, sort_keys=True).encode()
    with open(Path(path), "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(meta)))
        fh.write(meta)
        fh.write(struct.pack("<I", len(state.params)))
        for name, p in state.params.items():
            raw = name.encode()
            fh.write(struct.pack("<HB", len(raw), p.ndim))
            fh.write(raw)
            fh.write(struct.pack(f"<{p.ndim}I", *p.shape))
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelState, dict]:
    buf = Path(path).read_bytes()
    if buf[:8] != CKPT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    off = 8
    try:
        version, meta_len = struct.unpack_from("<II", buf, off)
        if version != CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        off += 8
        meta = json.loads(buf[off:off + meta_len])
        off += meta_len
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        params = OrderedDict()
        for _ in range(count):
            name_len, ndim = struct.unpack_from("<HB", buf, off)
            off += 3
            name = buf[off:off + name_len].decode()
            off += name_len
            shape = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            if off + 8 * n > len(buf):
                raise CheckpointError(f"truncated payload for {name}")
            data = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
            off += 8 * n
            params[name] = Tensor(data, requires_grad=True)
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from exc
    if off != len(buf):
        raise CheckpointError("trailing bytes after last parameter block")
    cfg = EncoderConfig.from_dict(meta["config"])
    expected = [name for name, _, _ in _param_shapes(cfg)]
    if list(params) != expected:
        raise CheckpointError("parameter names do not match the stored config")
    return ModelState(cfg, params), meta["extra"]
