"""Reverse-mode automatic differentiation over float64 numpy buffers.

A single module-global tape records every op applied to tensors that
require gradients. ``backward`` replays the tape in reverse creation
order, which is a valid topological order by construction. Parameters
(leaf tensors) survive tape clearing; intermediate activations do not.

All math is float64. ``glog`` guards against -inf so that log-space
lattice code stays finite; structurally unreachable lattice cells use
the ``NEG_INF`` sentinel instead.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

from .errors import ContractError, DomainError, OracleError, ShapeError

NEG_INF = -1.0e30
GUARDED_LOG_FLOOR = -690.0  # ~ log of the smallest normal double
_LOG_TINY = 1e-300


def glog(x):
    """log(x) clipped below at GUARDED_LOG_FLOOR for x < 1e-300 (incl. 0)."""
    x = np.asarray(x, dtype=np.float64)
    out = np.full(x.shape, GUARDED_LOG_FLOOR)
    mask = x >= _LOG_TINY
    out[mask] = np.log(x[mask])
    return out


class _Node:
    __slots__ = ("kind", "out", "backward_fn")

    def __init__(self, kind, out, backward_fn):
        self.kind = kind
        self.out = out
        self.backward_fn = backward_fn


class Tape:
    """Append-only op record; reverse traversal is topological."""

    def __init__(self):
        self.nodes = []

    def push(self, kind, out, backward_fn):
        out.node_id = len(self.nodes)
        out._tape = self
        self.nodes.append(_Node(kind, out, backward_fn))

    def clear(self):
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)


_ACTIVE_TAPE = Tape()
_GRAD_ENABLED = True


def active_tape() -> Tape:
    return _ACTIVE_TAPE


def reset_tape():
    _ACTIVE_TAPE.clear()


@contextmanager
def fresh_tape():
    """Temporarily swap in an empty tape (restores the previous one)."""
    global _ACTIVE_TAPE
    saved = _ACTIVE_TAPE
    _ACTIVE_TAPE = Tape()
    try:
        yield _ACTIVE_TAPE
    finally:
        _ACTIVE_TAPE = saved


@contextmanager
def no_grad():
    global _GRAD_ENABLED
    saved = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = saved


class Tensor:
    """Dense float64 value with optional gradient buffer and tape link."""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "_tape")

    def __init__(self, data, requires_grad=False):
        arr = np.array(data, dtype=np.float64)
        # ascontiguousarray would promote 0-d scalars to 1-d
        self.data = np.ascontiguousarray(arr) if arr.ndim else arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node_id = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() on non-scalar tensor")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def zeros(shape, requires_grad=False):
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def zeros_like(t: Tensor):
    return Tensor(np.zeros_like(t.data))


def _tracked(*tensors):
    return _GRAD_ENABLED and any(
        isinstance(t, Tensor) and (t.requires_grad or t._tape is _ACTIVE_TAPE)
        for t in tensors
    )


def _check_nonempty(kind, *tensors):
    for t in tensors:
        if isinstance(t, Tensor) and t.data.size == 0:
            raise DomainError(f"{kind}: empty tensor operand")


def _record(kind, out, backward_fn, *inputs):
    if _tracked(*inputs):
        out.requires_grad = True
        _ACTIVE_TAPE.push(kind, out, backward_fn)
    return out


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_nonempty("matmul", a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: {a.data.shape} @ {b.data.shape}")
    out = Tensor(a.data @ b.data)

    def bwd(g):
        return [(a, g @ b.data.T), (b, a.data.T @ g)]

    return _record("matmul", out, bwd, a, b)


def transpose(a: Tensor) -> Tensor:
    _check_nonempty("transpose", a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D, got {a.data.shape}")
    out = Tensor(a.data.T.copy())

    def bwd(g):
        return [(a, g.T)]

    return _record("transpose", out, bwd, a)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_nonempty("add", a, b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add: {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data + b.data)

    def bwd(g):
        return [(a, g), (b, g)]

    return _record("add", out, bwd, a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_nonempty("mul", a, b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul: {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data * b.data)

    def bwd(g):
        return [(a, g * b.data), (b, g * a.data)]

    return _record("mul", out, bwd, a, b)


def scale(a: Tensor, s: float) -> Tensor:
    _check_nonempty("scale", a)
    s = float(s)
    out = Tensor(a.data * s)

    def bwd(g):
        return [(a, g * s)]

    return _record("scale", out, bwd, a)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def add_rowvec(x: Tensor, b: Tensor) -> Tensor:
    """x[..., d] + b[d]; the one sanctioned broadcast besides scale."""
    _check_nonempty("add_rowvec", x, b)
    if b.data.ndim != 1 or x.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(f"add_rowvec: {x.data.shape} + {b.data.shape}")
    out = Tensor(x.data + b.data)

    def bwd(g):
        axes = tuple(range(g.ndim - 1))
        return [(x, g), (b, g.sum(axis=axes) if axes else g.copy())]

    return _record("add_rowvec", out, bwd, x, b)


def mul_rowvec(x: Tensor, w: Tensor) -> Tensor:
    """x[..., d] * w[d] elementwise along the trailing dim."""
    _check_nonempty("mul_rowvec", x, w)
    if w.data.ndim != 1 or x.data.shape[-1] != w.data.shape[0]:
        raise ShapeError(f"mul_rowvec: {x.data.shape} * {w.data.shape}")
    out = Tensor(x.data * w.data)

    def bwd(g):
        axes = tuple(range(g.ndim - 1))
        gw = g * x.data
        return [(x, g * w.data), (w, gw.sum(axis=axes) if axes else gw.copy())]

    return _record("mul_rowvec", out, bwd, x, w)


def scale_rows(x: Tensor, s: Tensor) -> Tensor:
    """Row t of x[T, d] scaled by scalar s[t]."""
    _check_nonempty("scale_rows", x, s)
    if x.data.ndim != 2 or s.data.ndim != 1 or x.data.shape[0] != s.data.shape[0]:
        raise ShapeError(f"scale_rows: {x.data.shape} by {s.data.shape}")
    out = Tensor(x.data * s.data[:, None])

    def bwd(g):
        return [(x, g * s.data[:, None]), (s, (g * x.data).sum(axis=1))]

    return _record("scale_rows", out, bwd, x, s)


def concat_last_dim(*xs: Tensor) -> Tensor:
    _check_nonempty("concat_last_dim", *xs)
    lead = xs[0].data.shape[:-1]
    for x in xs:
        if x.data.shape[:-1] != lead:
            raise ShapeError(
                f"concat_last_dim: leading shapes differ "
                f"({[x.data.shape for x in xs]})"
            )
    out = Tensor(np.concatenate([x.data for x in xs], axis=-1))
    widths = [x.data.shape[-1] for x in xs]
    offsets = np.cumsum([0] + widths)

    def bwd(g):
        return [
            (x, g[..., offsets[i]:offsets[i + 1]].copy())
            for i, x in enumerate(xs)
        ]

    return _record("concat_last_dim", out, bwd, *xs)


def concat_rows(*xs: Tensor) -> Tensor:
    _check_nonempty("concat_rows", *xs)
    tail = xs[0].data.shape[1:]
    for x in xs:
        if x.data.shape[1:] != tail:
            raise ShapeError(
                f"concat_rows: trailing shapes differ "
                f"({[x.data.shape for x in xs]})"
            )
    out = Tensor(np.concatenate([x.data for x in xs], axis=0))
    heights = [x.data.shape[0] for x in xs]
    offsets = np.cumsum([0] + heights)

    def bwd(g):
        return [
            (x, g[offsets[i]:offsets[i + 1]].copy()) for i, x in enumerate(xs)
        ]

    return _record("concat_rows", out, bwd, *xs)


def repeat_rows(x: Tensor, k: int) -> Tensor:
    """Each row repeated k times in place: [T, d] -> [k*T, d]."""
    _check_nonempty("repeat_rows", x)
    if x.data.ndim != 2 or k < 1:
        raise ShapeError(f"repeat_rows: shape {x.data.shape}, k={k}")
    out = Tensor(np.repeat(x.data, k, axis=0))
    T, d = x.data.shape

    def bwd(g):
        return [(x, g.reshape(T, k, d).sum(axis=1))]

    return _record("repeat_rows", out, bwd, x)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    _check_nonempty("embedding_lookup", table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError(f"embedding_lookup: table shape {table.data.shape}")
    if ids.size == 0:
        raise DomainError("embedding_lookup: empty id list")
    if ids.min() < 0 or ids.max() >= table.data.shape[0]:
        raise ShapeError(
            f"embedding_lookup: id out of range [0, {table.data.shape[0]})"
        )
    out = Tensor(table.data[ids])

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return [(table, gt)]

    return _record("embedding_lookup", out, bwd, table)


def gather_rows(x: Tensor, idx) -> Tensor:
    _check_nonempty("gather_rows", x)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size == 0:
        raise DomainError("gather_rows: empty index list")
    if idx.min() < 0 or idx.max() >= x.data.shape[0]:
        raise ShapeError(f"gather_rows: index out of range [0, {x.data.shape[0]})")
    out = Tensor(x.data[idx])

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return [(x, gx)]

    return _record("gather_rows", out, bwd, x)


def take_per_row(x: Tensor, idx) -> Tensor:
    """out[t] = x[t, idx[t]] for x[T, V]."""
    _check_nonempty("take_per_row", x)
    idx = np.asarray(idx, dtype=np.int64)
    if x.data.ndim != 2 or idx.shape != (x.data.shape[0],):
        raise ShapeError(f"take_per_row: {x.data.shape} with idx {idx.shape}")
    rows = np.arange(x.data.shape[0])
    out = Tensor(x.data[rows, idx])

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[rows, idx] = g
        return [(x, gx)]

    return _record("take_per_row", out, bwd, x)


def softmax_last_dim(x: Tensor) -> Tensor:
    _check_nonempty("softmax_last_dim", x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return [(x, y * (g - dot))]

    return _record("softmax_last_dim", out, bwd, x)


def log_softmax_last_dim(x: Tensor) -> Tensor:
    _check_nonempty("log_softmax_last_dim", x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = Tensor(z - lse)
    sm = np.exp(z - lse)

    def bwd(g):
        return [(x, g - sm * g.sum(axis=-1, keepdims=True))]

    return _record("log_softmax_last_dim", out, bwd, x)


def logsumexp_last_dim(x: Tensor) -> Tensor:
    _check_nonempty("logsumexp_last_dim", x)
    m = x.data.max(axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=-1, keepdims=True)
    out = Tensor((m + np.log(s)).squeeze(-1))
    sm = e / s

    def bwd(g):
        return [(x, sm * np.expand_dims(g, -1))]

    return _record("logsumexp_last_dim", out, bwd, x)


def layer_norm_last_dim(x: Tensor, eps: float = 1e-5) -> Tensor:
    _check_nonempty("layer_norm_last_dim", x)
    if eps <= 0:
        raise ContractError("layer_norm_last_dim: eps must be > 0")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(xhat)

    def bwd(g):
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * xhat).mean(axis=-1, keepdims=True)
        return [(x, inv * (g - gm - xhat * gxm))]

    return _record("layer_norm_last_dim", out, bwd, x)


def sigmoid(x: Tensor) -> Tensor:
    _check_nonempty("sigmoid", x)
    d = x.data
    y = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                 np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    out = Tensor(y)

    def bwd(g):
        return [(x, g * y * (1.0 - y))]

    return _record("sigmoid", out, bwd, x)


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), computed stably; -softplus(-m) is log sigmoid(m)."""
    _check_nonempty("softplus", x)
    d = x.data
    out = Tensor(np.maximum(d, 0.0) + np.log1p(np.exp(-np.abs(d))))
    sig = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                   np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))

    def bwd(g):
        return [(x, g * sig)]

    return _record("softplus", out, bwd, x)


def relu(x: Tensor) -> Tensor:
    _check_nonempty("relu", x)
    out = Tensor(np.maximum(x.data, 0.0))
    mask = (x.data > 0).astype(np.float64)

    def bwd(g):
        return [(x, g * mask)]

    return _record("relu", out, bwd, x)


def tsum(x: Tensor) -> Tensor:
    _check_nonempty("sum", x)
    out = Tensor(x.data.sum())

    def bwd(g):
        return [(x, np.full_like(x.data, float(g)))]

    return _record("sum", out, bwd, x)


def tmean(x: Tensor) -> Tensor:
    _check_nonempty("mean", x)
    n = x.data.size
    out = Tensor(x.data.mean())

    def bwd(g):
        return [(x, np.full_like(x.data, float(g) / n))]

    return _record("mean", out, bwd, x)


_PRIMITIVES = {
    "matmul": matmul,
    "transpose": transpose,
    "add": add,
    "mul": mul,
    "scale": scale,
    "add_rowvec": add_rowvec,
    "mul_rowvec": mul_rowvec,
    "scale_rows": scale_rows,
    "concat_last_dim": concat_last_dim,
    "concat_rows": concat_rows,
    "repeat_rows": repeat_rows,
    "embedding_lookup": embedding_lookup,
    "gather_rows": gather_rows,
    "take_per_row": take_per_row,
    "softmax_last_dim": softmax_last_dim,
    "log_softmax_last_dim": log_softmax_last_dim,
    "logsumexp_last_dim": logsumexp_last_dim,
    "layer_norm_last_dim": layer_norm_last_dim,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "relu": relu,
    "sum": tsum,
    "mean": tmean,
}


def primitive_forward(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch by op name; the functional entry point used by tests."""
    if kind not in _PRIMITIVES:
        raise ContractError(f"unknown primitive kind {kind!r}")
    return _PRIMITIVES[kind](*inputs, **kwargs)


def record_custom(kind, out: Tensor, backward_fn, *inputs) -> Tensor:
    """Register a hand-differentiated op (e.g. the CTC lattice) on the tape.

    ``backward_fn(g)`` must return [(input_tensor, grad_array), ...].
    """
    return _record(kind, out, backward_fn, *inputs)


# ---------------------------------------------------------------------------
# backward


def backward(loss: Tensor):
    """Populate .grad on every reachable requires_grad tensor.

    Gradients add across calls; callers zero grads between steps.
    """
    if loss.data.size != 1:
        raise ContractError("backward: loss must be scalar")
    tape = _ACTIVE_TAPE
    if loss._tape is not tape or loss.node_id is None:
        raise ContractError("backward: loss is not on the active tape")

    # Working buffers local to this traversal so that stale grads from
    # an earlier backward call are not re-propagated.
    work: dict[int, np.ndarray] = {}
    keep: dict[int, Tensor] = {}

    def seed(t: Tensor, g: np.ndarray):
        key = id(t)
        if key in work:
            work[key] = work[key] + g
        else:
            work[key] = np.array(g, dtype=np.float64, copy=True)
            keep[key] = t

    seed(loss, np.ones_like(loss.data))
    for node in reversed(tape.nodes[: loss.node_id + 1]):
        g = work.get(id(node.out))
        if g is None:
            continue
        for inp, gi in node.backward_fn(g):
            if isinstance(inp, Tensor) and (inp.requires_grad or inp._tape is tape):
                seed(inp, gi)

    for key, t in keep.items():
        if not t.requires_grad:
            continue
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        t.grad += work[key]


# ---------------------------------------------------------------------------
# verification oracle


def finite_difference_check(f, x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between backward() and central differences.

    ``f`` maps the tensor to a scalar Tensor and must be deterministic.
    Relative error is |analytic - numeric| / max(1, |numeric|).
    """
    if not (1e-6 <= h <= 1e-3):
        raise ContractError(f"finite_difference_check: h={h} outside [1e-6, 1e-3]")

    def eval_value(t):
        with fresh_tape(), no_grad():
            return float(f(t).item())

    probe = Tensor(x.data.copy())
    if eval_value(probe) != eval_value(probe):
        raise OracleError("finite_difference_check: f is not deterministic")
    v1 = eval_value(probe)
    v2 = eval_value(probe)
    if v1 != v2:
        raise OracleError("finite_difference_check: f is not deterministic")

    xg = Tensor(x.data.copy(), requires_grad=True)
    with fresh_tape():
        y = f(xg)
        backward(y)
    analytic = xg.grad if xg.grad is not None else np.zeros_like(xg.data)

    flat = probe.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = eval_value(probe)
        flat[i] = orig - h
        fm = eval_value(probe)
        flat[i] = orig
        numeric[i] = (fp - fm) / (2.0 * h)
    numeric = numeric.reshape(x.data.shape)

    denom = np.maximum(1.0, np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_parameter_gradients(loss_fn, params: dict, h: float = 1e-5) -> float:
    """Central-difference check of d(loss)/d(param) for every named
    parameter; returns the max relative error across all elements."""
    if not (1e-6 <= h <= 1e-3):
        raise ContractError(f"check_parameter_gradients: h={h} outside [1e-6, 1e-3]")
    for p in params.values():
        p.grad = None
    with fresh_tape():
        backward(loss_fn())
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }
    for p in params.values():
        p.grad = None

    def value():
        with fresh_tape(), no_grad():
            return float(loss_fn().item())

    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        aflat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = value()
            flat[i] = orig - h
            fm = value()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            err = abs(aflat[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter dict."""

    def __init__(self, params: dict, lr: float, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        if lr <= 0:
            raise ContractError("AdamW: lr must be > 0")
        self.params = dict(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = float(weight_decay)
        self.t = 0
        self.state = {
            name: (np.zeros_like(p.data), np.zeros_like(p.data))
            for name, p in self.params.items()
        }

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else float(lr)
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                raise ContractError(f"AdamW.step: parameter {name!r} has no grad")
            m, v = self.state[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * (p.grad * p.grad)
            mhat = m / bc1
            vhat = v / bc2
            if self.weight_decay:
                p.data -= lr * self.weight_decay * p.data
            p.data -= lr * mhat / (np.sqrt(vhat) + self.eps)


def warmup_lr(base_lr: float, step: int, total_steps: int, warmup_ratio: float = 0.3) -> float:
    """Linear warmup from 0 to base_lr, then constant."""
    warmup_steps = max(1, int(round(total_steps * warmup_ratio)))
    if step >= warmup_steps:
        return base_lr
    return base_lr * step / warmup_steps


def logsumexp_pair(a: float, b: float) -> float:
    """Scalar log-space add that respects the NEG_INF sentinel."""
    if a <= NEG_INF:
        return b
    if b <= NEG_INF:
        return a
    m = a if a > b else b
    return m + math.log(math.exp(a - m) + math.exp(b - m))
