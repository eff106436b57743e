"""Reverse-mode tape over a closed set of numpy ops, plus Adam.

The op set is exactly what the model needs (affine maps, a few pointwise
nonlinearities, normalization, concatenation, reductions, gathers and the
rotary rotation), which keeps gradient checking exhaustive. Tensors carry
64-bit values in test mode and 32-bit in training mode; the dtype is fixed
when leaves are created and propagates through ops. Every forward and
backward result is checked for NaN/Inf unless finite checking is disabled.
"""

from __future__ import annotations

import numpy as np

from .errors import NonFiniteValues, NonScalarOutput, ShapeMismatch

CHECK_FINITE = True
GRAD_ENABLED = True


def set_finite_checks(enabled: bool) -> None:
    global CHECK_FINITE
    CHECK_FINITE = bool(enabled)


class no_grad:
    """Context manager that skips tape construction (inference mode)."""

    def __enter__(self):
        global GRAD_ENABLED
        self._prev = GRAD_ENABLED
        GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global GRAD_ENABLED
        GRAD_ENABLED = self._prev
        return False


def _checked(arr: np.ndarray, ctx: str) -> np.ndarray:
    if CHECK_FINITE and not np.all(np.isfinite(arr)):
        raise NonFiniteValues(f"non-finite values in {ctx}")
    return arr


class Tensor:
    """Array node on the tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=dtype) if dtype is not None else np.asarray(data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float64)
        _checked(self.data, "tensor creation")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    def backward(self):
        if self.data.size != 1:
            raise NonScalarOutput("backward() needs a scalar output")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if p.requires_grad:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)
                _checked(node.grad, "backward accumulation")

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # operator sugar -------------------------------------------------------
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def item(self) -> float:
        return float(self.data.reshape(()))


def parameter(data, dtype=np.float64) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=True)


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _make(data, parents, backward) -> Tensor:
    needs = GRAD_ENABLED and any(p.requires_grad for p in parents)
    t = Tensor(_checked(data, "op output"), requires_grad=needs)
    if needs:
        t._parents = tuple(p for p in parents if p.requires_grad)
        t._backward = backward
    return t


# ---------------------------------------------------------------------------
# arithmetic

def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), backward)


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    return _make(out_data, (a, b), backward)


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), backward)


def div(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out_data, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatch(f"matmul {a.data.shape} @ {b.data.shape}")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(out_data, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(g.T)

    return _make(a.data.T.copy(), (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape

    def backward(g):
        a._accumulate(g.reshape(old))

    return _make(a.data.reshape(shape), (a,), backward)


def dense(inputs: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map: inputs @ weight + bias."""
    if inputs.data.shape[-1] != weight.data.shape[0] or weight.data.shape[1] != bias.data.shape[-1]:
        raise ShapeMismatch(
            f"dense: input {inputs.data.shape}, weight {weight.data.shape}, bias {bias.data.shape}")
    return add(matmul(inputs, weight), bias)


# ---------------------------------------------------------------------------
# reductions and pointwise maps

def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.data.shape).copy() if np.ndim(g) else np.full_like(a.data, g))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(gg, a.data.shape).copy())

    return _make(out_data, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    count = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def tabs(a: Tensor) -> Tensor:
    sign = np.sign(a.data)

    def backward(g):
        a._accumulate(g * sign)

    return _make(np.abs(a.data), (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def backward(g):
        a._accumulate(g * 0.5 / out_data)

    return _make(out_data, (a,), backward)


def log(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(g / a.data)

    return _make(np.log(a.data), (a,), backward)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        a._accumulate(g * out_data)

    return _make(out_data, (a,), backward)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes through strictly inside the range."""
    inside = (a.data > lo) & (a.data < hi)

    def backward(g):
        a._accumulate(g * inside)

    return _make(np.clip(a.data, lo, hi), (a,), backward)


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0

    def backward(g):
        a._accumulate(g * pos)

    return _make(np.where(pos, a.data, 0.0), (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        a._accumulate(g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward)


def elu_plus_one(a: Tensor) -> Tensor:
    """x + 1 for x >= 0, exp(x) below: strictly positive, C1 at the joint."""
    neg = a.data < 0
    out_data = np.where(neg, np.exp(np.minimum(a.data, 0.0)), a.data + 1.0)

    def backward(g):
        a._accumulate(g * np.where(neg, out_data, 1.0))

    return _make(out_data, (a,), backward)


def l2_normalize_lastdim(a: Tensor, eps: float = 1e-12) -> Tensor:
    norm = np.linalg.norm(a.data, axis=-1, keepdims=True)
    denom = norm + eps
    out_data = a.data / denom

    def backward(g):
        dot = (g * a.data).sum(axis=-1, keepdims=True)
        safe = np.maximum(norm, eps)
        a._accumulate(g / denom - a.data * dot / (safe * denom * denom))

    return _make(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# structure ops

def concat(tensors: list[Tensor], axis: int = -1) -> Tensor:
    datas = [t.data for t in tensors]
    out_data = np.concatenate(datas, axis=axis)
    splits = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def backward(g):
        parts = np.split(g, splits, axis=axis)
        for t, piece in zip(tensors, parts):
            if t.requires_grad:
                t._accumulate(piece)

    return _make(out_data, tuple(tensors), backward)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    def backward(g):
        full = np.zeros_like(a.data)
        full[..., start:stop] = g
        a._accumulate(full)

    return _make(a.data[..., start:stop].copy(), (a,), backward)


def gather_rows(a: Tensor, indices: np.ndarray) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a._accumulate(full)

    return _make(a.data[idx], (a,), backward)


def segment_max(a: Tensor, segments: list[np.ndarray]) -> Tensor:
    """Row-wise max over index segments: output row s = max over a[segments[s]]."""
    rows = []
    arg_rows = []
    for seg in segments:
        vals = a.data[seg]
        am = vals.argmax(axis=0)
        rows.append(vals[am, np.arange(vals.shape[1])])
        arg_rows.append(np.asarray(seg)[am])
    out_data = np.stack(rows)
    cols = np.arange(a.data.shape[1])

    def backward(g):
        full = np.zeros_like(a.data)
        for s, am in enumerate(arg_rows):
            np.add.at(full, (am, cols), g[s])
        a._accumulate(full)

    return _make(out_data, (a,), backward)


def rope_rows(a: Tensor, angles: np.ndarray) -> Tensor:
    """Rotate consecutive coordinate pairs of each row by per-pair angles.

    angles has shape (rows, dim/2); pair k of a row is (col 2k, col 2k+1).
    The map is orthogonal, so the backward pass rotates by the negated
    angles.
    """
    cos = np.cos(angles)
    sin = np.sin(angles)
    ev = a.data[..., 0::2]
    od = a.data[..., 1::2]
    out_data = np.empty_like(a.data)
    out_data[..., 0::2] = ev * cos - od * sin
    out_data[..., 1::2] = ev * sin + od * cos

    def backward(g):
        ge = g[..., 0::2]
        go = g[..., 1::2]
        full = np.empty_like(a.data)
        full[..., 0::2] = ge * cos + go * sin
        full[..., 1::2] = -ge * sin + go * cos
        a._accumulate(full)

    return _make(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# optimizer

class AdamState:
    """Bias-corrected Adam moments for a named parameter set."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState) -> AdamState:
    """One in-place Adam update over named parameters."""
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=p.data.dtype)
        if g.shape != p.data.shape:
            raise ShapeMismatch(f"grad for {name}: {g.shape} vs {p.data.shape}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        mhat = m / (1.0 - b1 ** t)
        vhat = v / (1.0 - b2 ** t)
        p.data -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return state


# ---------------------------------------------------------------------------
# gradient checking

def grad_check(fn, params: dict[str, Tensor], eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    fn() must rebuild the scalar loss from the current parameter values.
    Run in 64-bit mode; 32-bit differences are dominated by rounding.
    """
    out = fn()
    if out.data.size != 1:
        raise NonScalarOutput("grad_check needs a scalar program")
    for p in params.values():
        p.grad = None
    out.backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}

    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            up = float(fn().data)
            flat[i] = keep - eps
            down = float(fn().data)
            flat[i] = keep
            numeric = (up - down) / (2.0 * eps)
            a = analytic[name].reshape(-1)[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
    return worst
