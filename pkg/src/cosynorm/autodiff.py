"""Reverse-mode tensor engine.

A small tape: every operation builds a child ``Tensor`` holding numpy data
plus a backward closure. Calling ``backward()`` on a scalar walks the graph
in reverse topological order and accumulates gradients into ``.grad``.

Storage dtype follows the inputs (float32 for training, float64 for
gradient-check tests). All operations are deterministic: no hidden RNG.
"""

from __future__ import annotations

import contextlib
from collections import OrderedDict

import numpy as np


class ConfigurationError(ValueError):
    """Raised for structurally invalid model or operation configuration."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """N-dimensional array with an optional gradient and tape linkage."""

    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, parents=(), backward=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.grad = None
        if _GRAD_ENABLED:
            self._parents = parents
            self._backward = backward
        else:
            self._parents = ()
            self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    def _accum(self, g):
        if self.grad is None:
            self.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
        else:
            self.grad = self.grad + g

    def backward(self):
        """Backpropagate from a scalar output through the recorded tape."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """Trainable tensor with a unique name inside its model."""

    __slots__ = ("name",)

    def __init__(self, name: str, data: np.ndarray):
        super().__init__(np.asarray(data))
        self.name = name


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype if dtype is not None else np.float64)
    return Tensor(arr)


def constant(x, dtype) -> Tensor:
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcasted gradient back to the original ``shape``."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _make(data, parents, backward) -> Tensor:
    if _GRAD_ENABLED:
        return Tensor(data, parents=parents, backward=backward)
    return Tensor(data)


# -- elementwise arithmetic --------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out_data = a.data + b.data

    def backward(g):
        a._accum(_unbroadcast(g, a.shape))
        b._accum(_unbroadcast(g, b.shape))

    return _make(out_data, (a, b), backward)


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out_data = a.data - b.data

    def backward(g):
        a._accum(_unbroadcast(g, a.shape))
        b._accum(_unbroadcast(-g, b.shape))

    return _make(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out_data = a.data * b.data

    def backward(g):
        a._accum(_unbroadcast(g * b.data, a.shape))
        b._accum(_unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), backward)


def div(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out_data = a.data / b.data

    def backward(g):
        a._accum(_unbroadcast(g / b.data, a.shape))
        b._accum(_unbroadcast(-g * out_data / b.data, b.shape))

    return _make(out_data, (a, b), backward)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        a._accum(-g)

    return _make(-a.data, (a,), backward)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        a._accum(g * out_data)

    return _make(out_data, (a,), backward)


def log(a) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        a._accum(g / a.data)

    return _make(np.log(a.data), (a,), backward)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.tanh(a.data)

    def backward(g):
        a._accum(g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), backward)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(a) -> Tensor:
    a = _as_tensor(a)
    sig = _sigmoid(a.data)
    out_data = a.data * sig

    def backward(g):
        a._accum(g * (sig * (1.0 + a.data * (1.0 - sig))))

    return _make(out_data, (a,), backward)


def square(a) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        a._accum(g * (2.0 * a.data))

    return _make(a.data * a.data, (a,), backward)


# -- shape manipulation -------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    in_shape = a.shape

    def backward(g):
        a._accum(g.reshape(in_shape))

    return _make(a.data.reshape(shape), (a,), backward)


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        a._accum(np.swapaxes(g, ax1, ax2))

    return _make(np.swapaxes(a.data, ax1, ax2), (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            t._accum(g[tuple(idx)])

    return _make(out_data, tuple(tensors), backward)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    a = _as_tensor(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def backward(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        a._accum(full)

    return _make(a.data[idx], (a,), backward)


def expand(a, shape) -> Tensor:
    a = _as_tensor(a)
    in_shape = a.shape

    def backward(g):
        a._accum(_unbroadcast(g, in_shape))

    return _make(np.broadcast_to(a.data, shape).copy(), (a,), backward)


# -- reductions ----------------------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            a._accum(np.broadcast_to(g, a.shape).copy())
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(g, a.shape).copy())

    return _make(out_data, (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        n = a.size
    elif isinstance(axis, int):
        n = a.shape[axis]
    else:
        n = int(np.prod([a.shape[ax] for ax in axis]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- linear algebra -------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product; supports 1-D vectors and stacked (batched) operands."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    out_data = a.data @ b.data
    a_vec = a.ndim == 1
    b_vec = b.ndim == 1

    def backward(g):
        ad_ = a.data[None, :] if a_vec else a.data
        bd = b.data[:, None] if b_vec else b.data
        if a_vec and b_vec:
            gm = np.asarray(g).reshape(1, 1)
        elif a_vec:
            gm = np.expand_dims(g, -2)
        elif b_vec:
            gm = np.expand_dims(g, -1)
        else:
            gm = g
        ga = gm @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad_, -1, -2) @ gm
        if a_vec:
            ga = ga.reshape(a.shape) if ga.ndim <= 2 else ga.sum(axis=tuple(range(ga.ndim - 2))).reshape(a.shape)
            a._accum(ga)
        else:
            a._accum(_unbroadcast(ga, a.shape))
        if b_vec:
            gb = gb.reshape(b.shape) if gb.ndim <= 2 else gb.sum(axis=tuple(range(gb.ndim - 2))).reshape(b.shape)
            b._accum(gb)
        else:
            b._accum(_unbroadcast(gb, b.shape))

    return _make(out_data, (a, b), backward)


# -- fused neural-net primitives -------------------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        a._accum(out_data * (g - inner))

    return _make(out_data, (a,), backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse
    probs = np.exp(out_data)

    def backward(g):
        a._accum(g - probs * g.sum(axis=axis, keepdims=True))

    return _make(out_data, (a,), backward)


def layer_norm(a, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    a = _as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out_data = xc * inv

    def backward(g):
        g_mean = g.mean(axis=-1, keepdims=True)
        gy_mean = (g * out_data).mean(axis=-1, keepdims=True)
        a._accum(inv * (g - g_mean - out_data * gy_mean))

    return _make(out_data, (a,), backward)


def rope_rotate(a, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate interleaved channel pairs of ``a`` by precomputed angle tables.

    ``a`` has shape (..., L, d) with even d; ``cos``/``sin`` have shape
    (L, d/2) and broadcast over leading axes.
    """
    a = _as_tensor(a)
    if a.shape[-1] % 2 != 0:
        raise ConfigurationError("rotary encoding requires an even head dimension")
    xe = a.data[..., 0::2]
    xo = a.data[..., 1::2]
    out_data = np.empty_like(a.data)
    out_data[..., 0::2] = xe * cos - xo * sin
    out_data[..., 1::2] = xe * sin + xo * cos

    def backward(g):
        ge = g[..., 0::2]
        go = g[..., 1::2]
        ga = np.empty_like(g)
        ga[..., 0::2] = ge * cos + go * sin
        ga[..., 1::2] = -ge * sin + go * cos
        a._accum(ga)

    return _make(out_data, (a,), backward)


def conv1d(a, w, b, stride: int = 1) -> Tensor:
    """1-D convolution over a (T, C_in) sequence with kernel (k*C_in, C_out).

    Total padding k-1 keeps the length contract out_len == ceil(T / stride).
    """
    a = _as_tensor(a)
    w = _as_tensor(w)
    b = _as_tensor(b)
    t_in, c_in = a.shape
    kc, c_out = w.shape
    k = kc // c_in
    pad_left = (k - 1) // 2
    pad_right = k - 1 - pad_left
    padded = np.zeros((t_in + k - 1, c_in), dtype=a.dtype)
    padded[pad_left:pad_left + t_in] = a.data
    t_out = (t_in - 1) // stride + 1
    starts = np.arange(t_out) * stride
    idx = starts[:, None] + np.arange(k)[None, :]
    cols = padded[idx].reshape(t_out, kc)
    out_data = cols @ w.data + b.data

    def backward(g):
        b._accum(g.sum(axis=0))
        w._accum(cols.T @ g)
        gcols = (g @ w.data.T).reshape(t_out, k, c_in)
        gpad = np.zeros_like(padded)
        np.add.at(gpad, idx, gcols)
        a._accum(gpad[pad_left:pad_left + t_in])

    return _make(out_data, (a, w, b), backward)


# -- modules and optimization -----------------------------------------------------


class Module:
    """Base class with hierarchical parameter registration for checkpointing."""

    def __init__(self):
        self._params: OrderedDict[str, Parameter] = OrderedDict()
        self._children: OrderedDict[str, Module] = OrderedDict()

    def register(self, name: str, data: np.ndarray) -> Parameter:
        if name in self._params:
            raise ConfigurationError(f"duplicate parameter name: {name}")
        p = Parameter(name, data)
        self._params[name] = p
        return p

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def parameters(self, prefix: str = "") -> "OrderedDict[str, Parameter]":
        out: OrderedDict[str, Parameter] = OrderedDict()
        for name, p in self._params.items():
            out[prefix + name] = p
        for cname, child in self._children.items():
            out.update(child.parameters(prefix=f"{prefix}{cname}."))
        return out

    def zero_grad(self):
        for p in self.parameters().values():
            p.grad = None

    def load_state(self, state: dict):
        """Replace parameter values from a {name: ndarray} mapping."""
        params = self.parameters()
        missing = set(params) - set(state)
        if missing:
            raise ConfigurationError(f"missing parameters in state: {sorted(missing)[:4]}")
        for name, p in params.items():
            arr = state[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise ConfigurationError(
                    f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
            p.data = arr.astype(p.dtype)

    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data) for n, p in self.parameters().items())


class SGD:
    """Plain stochastic gradient descent with momentum, constant schedule."""

    def __init__(self, params: "OrderedDict[str, Parameter]", lr: float, momentum: float = 0.9):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self):
        for name, p in self.params.items():
            if p.grad is None:
                continue
            v = self.velocity[name]
            v *= self.momentum
            v += p.grad
            p.data = p.data - self.lr * v

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def finite_diff_check(f, params, eps: float = 1e-4) -> float:
    """Compare analytic gradients of scalar ``f()`` against central differences.

    Returns the max over parameter entries of
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    ``f`` must be deterministic; evaluate in float64 for a tight bound.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    for p in params:
        p.grad = None
    out = f()
    if not np.isfinite(out.data).all():
        raise ValueError("finite_diff_check: function value is not finite")
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                fp = float(f().data)
            flat[i] = orig - eps
            with no_grad():
                fm = float(f().data)
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            a = float(ga.reshape(-1)[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
    return worst
