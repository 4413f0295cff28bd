"""A small reverse-mode autodiff engine over float64 numpy arrays.

Every forward primitive records its parents and a closure mapping the
upstream gradient to one gradient per parent. The tape is rebuilt on every
forward pass; nothing is cached between steps.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericError, ShapeError

LN_EPS = 1e-5
ATTN_EPS = 1e-8


class Tensor:
    """Graph node: a value, the op that made it, and its accumulated grad."""

    __slots__ = ("data", "grad", "op", "parents", "_backward", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, op="leaf", parents=(), backward_fn=None, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.op = op
        self.parents = parents
        self._backward = backward_fn
        self.requires_grad = requires_grad
        self.name = name

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_leaf(self):
        return not self.parents

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def param(data, name=None):
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Skip graph recording (evaluation)."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _make(data, parents, backward_fn, op):
    parents = tuple(parents)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, True, op, parents, backward_fn)
    return Tensor(data, False, op)


def unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_axis(axis, ndim):
    if not isinstance(axis, (int, np.integer)) or not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis!r} invalid for array of rank {ndim}")
    return int(axis) % ndim


# --- elementwise ---------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        ga = g / b.data
        return unbroadcast(ga, a.shape), unbroadcast(-ga * out, b.shape)

    return _make(out, (a, b), bw, "div")


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p):
    p = float(p)
    out = a.data ** p
    return _make(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),), "pow")


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a):
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a):
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a):
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def silu(a):
    """x * sigmoid(x); smooth, so finite-difference checks stay tight."""
    s = _sigmoid(a.data)
    out = a.data * s
    return _make(out, (a,), lambda g: (g * (s + a.data * s * (1.0 - s)),), "silu")


# --- reductions and shape ------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _make(out, (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape):
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None):
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(a, i, j):
    return _make(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),), "swapaxes")


def index(a, idx):
    out = a.data[idx]

    key = idx if isinstance(idx, tuple) else (idx,)
    advanced = any(isinstance(k, (list, np.ndarray)) for k in key)

    def bw(g):
        full = np.zeros_like(a.data)
        if advanced:
            np.add.at(full, idx, g)
        else:
            full[idx] += g
        return (full,)

    return _make(out, (a,), bw, "index")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def broadcast_to(a, shape):
    return _make(np.broadcast_to(a.data, shape), (a,), lambda g: (unbroadcast(g, a.shape),), "broadcast")


# --- linear algebra ------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def linear(x, w, b=None):
    """x @ w + b with w of shape (d_in, d_out); x may carry any leading dims."""
    x = as_tensor(x)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input width {x.shape[-1]} != weight rows {w.shape[0]}")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data
    d_in, d_out = w.shape

    def bw(g):
        g2 = g.reshape(-1, d_out)
        gx = (g @ w.data.T) if x.requires_grad else None
        gw = x.data.reshape(-1, d_in).T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, bw, "linear")


# --- fused primitives ----------------------------------------------------

def softmax(a, axis=-1):
    a = as_tensor(a)
    axis = _check_axis(axis, a.ndim)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    axis = _check_axis(axis, a.ndim)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def bw(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), bw, "log_softmax")


def layer_norm(x, gamma, beta, eps=LN_EPS):
    """Normalize over the last axis, then scale by gamma and shift by beta."""
    x = as_tensor(x)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma/beta must have shape ({d},), got {gamma.shape}/{beta.shape}")
    if not eps > 0:
        raise ContractError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        g2 = g.reshape(-1, d)
        return gx, (g2 * xhat.reshape(-1, d)).sum(axis=0), g2.sum(axis=0)

    return _make(out, (x, gamma, beta), bw, "layer_norm")


def gru_cell(state, inputs, params):
    """One GRU update, applied row-wise.

    ``params`` holds ``w_x`` (d_in, 3d), ``w_h`` (d, 3d), ``b_x``, ``b_h`` (3d,),
    gate blocks ordered (update, reset, candidate). The update gate z mixes as
    ``z * candidate + (1 - z) * state``.
    """
    state, inputs = as_tensor(state), as_tensor(inputs)
    d = state.shape[-1]
    if params["w_h"].shape != (d, 3 * d) or params["w_x"].shape != (inputs.shape[-1], 3 * d):
        raise ShapeError("gru_cell: parameter shapes do not match state/input widths")
    if state.shape[:-1] != inputs.shape[:-1]:
        raise ShapeError(f"gru_cell: state {state.shape} and input {inputs.shape} disagree")
    gx = linear(inputs, params["w_x"], params["b_x"])
    gh = linear(state, params["w_h"], params["b_h"])
    z = sigmoid(gx[..., :d] + gh[..., :d])
    r = sigmoid(gx[..., d:2 * d] + gh[..., d:2 * d])
    n = tanh(gx[..., 2 * d:] + r * gh[..., 2 * d:])
    return z * n + (1.0 - z) * state


# --- backward ------------------------------------------------------------

def _topo(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss, params=None):
    """Backpropagate from a scalar ``loss``.

    Leaf gradients accumulate into ``.grad``. When ``params`` (a name ->
    Tensor mapping) is given, returns name -> gradient, with exact zeros for
    leaves the loss does not depend on.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(_topo(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node.parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else prev + pg
    if params is None:
        return None
    return {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}


def zero_grads(params):
    for p in params.values():
        p.grad = None


# --- optimizer -----------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 4e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    """Bias-corrected Adam update, in place on ``params[name].data``."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: grad for {name} has shape {g.shape}, param {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


# --- verification --------------------------------------------------------

def grad_check(f, point, h=1e-5):
    """Max relative error of analytic vs central-difference gradients.

    ``point`` is either an array (``f`` takes one Tensor) or a mapping of
    name -> Tensor/array (``f`` takes the mapping). Error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if not h > 0:
        raise ContractError("grad_check step h must be positive")
    single = not isinstance(point, dict)
    if single:
        leaves = {"x": param(np.array(point, dtype=np.float64))}
        call = lambda: f(leaves["x"])
    else:
        leaves = {k: (v if isinstance(v, Tensor) else param(v)) for k, v in point.items()}
        for v in leaves.values():
            v.requires_grad = True
        call = lambda: f(leaves)

    def value():
        out = call()
        val = float(np.asarray(out.data).reshape(()))
        if not np.isfinite(val):
            raise NumericError("grad_check: function evaluated to a non-finite value")
        return out, val

    zero_grads(leaves)
    out, _ = value()
    analytic = backward(out, leaves)
    worst = 0.0
    for name, leaf in leaves.items():
        flat = leaf.data.reshape(-1)
        ga = analytic[name].reshape(-1)
        if not np.all(np.isfinite(ga)):
            raise NumericError(f"grad_check: non-finite analytic gradient for {name}")
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = value()[1]
            flat[i] = orig - h
            fm = value()[1]
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            worst = max(worst, abs(ga[i] - num) / max(1.0, abs(ga[i])))
    zero_grads(leaves)
    return worst
