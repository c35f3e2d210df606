"""Finite-difference gradient checks shared by the unit and acceptance tests."""

import numpy as np

from adapool import tensor as T
from adapool.encoder import EncoderConfig, ModelState, forward
from oracles import central_diff, rel_err


def check(build, arrays, seed=0, h=1e-6):
    """Worst relative error between backprop and central differences.

    ``build`` maps tensors to an output tensor of any shape; it is contracted
    with a fixed random array to give a scalar.
    """
    arrays = [np.array(a, dtype=float) for a in arrays]
    probe = build(*[T.Tensor(a) for a in arrays])
    R = np.random.default_rng(seed).normal(size=probe.shape)

    def loss_of(arrs, grad=False):
        ts = [T.Tensor(a, requires_grad=grad) for a in arrs]
        out = T.sum_all(T.mul(build(*ts), T.Tensor(R)))
        return out, ts

    loss, ts = loss_of(arrays, grad=True)
    loss.backward()
    worst = 0.0
    for i, t in enumerate(ts):
        def f(x, i=i):
            arrs = list(arrays)
            arrs[i] = x
            return loss_of(arrs)[0].item()
        num = central_diff(f, arrays[i], h)
        got = t.grad if t.grad is not None else np.zeros_like(arrays[i])
        worst = max(worst, rel_err(got, num))
    return worst


def _rng(seed=0):
    return np.random.default_rng(seed)


def _away_from_zero(shape, seed):
    x = _rng(seed).normal(size=shape)
    return np.where(np.abs(x) < 0.1, 0.5, x)


def _unique_rows(shape, seed):
    # distinct column maxima so max_rows is differentiable at the probe point
    x = _rng(seed).normal(size=shape)
    return x + np.arange(shape[-2])[:, None] * 0.37


def _dropout(a):
    return T.dropout(a, 0.3, np.random.default_rng(7), training=True)


IDX = np.array([2, 0, 3])

CASES = {
    "add": (lambda a, b: T.add(a, b), [(3, 4), (3, 4)]),
    "sub": (lambda a, b: T.sub(a, b), [(3, 4), (3, 4)]),
    "mul": (lambda a, b: T.mul(a, b), [(3, 4), (3, 4)]),
    "scale": (lambda a: T.scale(a, -1.7), [(2, 5)]),
    "add_scalar": (lambda a: T.add_scalar(a, 0.3), [(2, 5)]),
    "relu": (lambda a: T.relu(a), ["relu"]),
    "add_row": (lambda a, v: T.add_row(a, v), [(2, 3, 4), (4,)]),
    "expand": (lambda v: T.expand(v, (3, 2)), [(4,)]),
    "matmul_shared": (lambda a, b: T.matmul(a, b), [(2, 3, 4), (4, 5)]),
    "matmul_batched": (lambda a, b: T.matmul(a, b), [(2, 3, 3, 4), (2, 3, 4, 2)]),
    "reshape": (lambda a: T.reshape(a, (6, 2)), [(3, 4)]),
    "transpose": (lambda a: T.transpose(a, (1, 0, 2)), [(2, 3, 4)]),
    "swap_last": (lambda a: T.swap_last(a), [(2, 3, 4)]),
    "softmax_rows": (lambda a: T.softmax_rows(a, 0.7), [(3, 5)]),
    "layer_norm": (lambda a, g, b: T.layer_norm(a, g, b), [(3, 6), (6,), (6,)]),
    "dropout": (_dropout, [(4, 5)]),
    "mean_rows": (lambda a: T.mean_rows(a), [(2, 4, 3)]),
    "max_rows": (lambda a: T.max_rows(a), ["unique"]),
    "take_rows": (lambda a: T.take_rows(a, IDX), [(3, 4, 2)]),
    "add_at_rows": (lambda a, v: T.add_at_rows(a, IDX, v), [(3, 4, 2), (2,)]),
    "concat_rows": (lambda a, b: T.concat_rows([a, b]), [(2, 3, 4), (2, 1, 4)]),
    "sum_all": (lambda a: T.sum_all(a), [(3, 4)]),
    "mean_all": (lambda a: T.mean_all(a), [(3, 4)]),
    "mse": (lambda a: T.mse(a, np.linspace(-1, 1, 12).reshape(3, 4)), [(3, 4)]),
}


def case_arrays(name, seed=0):
    out = []
    for i, spec in enumerate(CASES[name][1]):
        if spec == "relu":
            out.append(_away_from_zero((3, 4), seed + i))
        elif spec == "unique":
            out.append(_unique_rows((2, 4, 3), seed + i))
        else:
            out.append(_rng(seed + i).normal(size=spec))
    return out


def op_errors(seed=0):
    return {name: check(CASES[name][0], case_arrays(name, seed), seed) for name in CASES}


def encoder_error(method, seed=0, layers=2, N=6, dim=8):
    """Relative gradient error over all parameters of a tiny encoder (dropout off).

    Differences are measured against the largest gradient entry in the whole
    model, since some entries are exactly zero by symmetry.
    """
    cfg = EncoderConfig(num_layers=layers, num_heads=2, dim_input=4, dim_hidden=dim, dim_ff=12,
                        pool_method=method, dropout_ff=0.0, seed=seed, bias_attn=True)
    state = ModelState.init(cfg)
    rng = np.random.default_rng(seed)
    # larger weights than the init so every path carries signal
    for p in state.parameters():
        p.data = p.data + rng.normal(0, 0.3, p.shape)
    X = rng.normal(size=(2, N, 4))
    tgt = np.array([1, 4])
    y = rng.normal(size=(2, 4))

    def loss_value():
        return T.mse(forward(X, state, tgt), y)

    state.zero_grad()
    loss_value().backward()
    diff = scale = 0.0
    for p in state.parameters():
        base = p.data.copy()

        def f(x, p=p):
            p.data = x
            return loss_value().item()

        num = central_diff(f, base)
        p.data = base
        diff = max(diff, float(np.abs(p.grad - num).max()))
        scale = max(scale, float(np.abs(num).max()))
    return diff / scale
