"""Dense 2-D float64 tensors with tape-based reverse-mode differentiation.

Everything is row-major and 64-bit. A Tape records primitive applications
while it is the active context; Tape.backward walks the record in exact
reverse order and accumulates gradients additively. Outside any active
tape the primitives run as plain numpy forwards, which is how evaluation
code avoids autodiff overhead.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError):
    pass


class NonFiniteError(AutodiffError):
    """Raised when a primitive produces NaN/Inf values."""

    def __init__(self, op_name, message=""):
        self.op_name = op_name
        super().__init__(message or f"non-finite values produced by '{op_name}'")


class Tensor:
    """A (rows, cols) float64 matrix, optionally tracking a gradient."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got ndim={arr.ndim}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() on shape {self.shape}")
        return float(self.data[0, 0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def constant(data):
    return Tensor(data, requires_grad=False)


# ---------------------------------------------------------------------------
# Tape

_TAPE_STACK: list["Tape"] = []


class Tape:
    """Records primitive applications; backward replays them in reverse."""

    def __init__(self):
        self._records = []  # (inputs, output, backward_fn)

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def backward(self, loss: Tensor):
        """Accumulate dLoss/dT into t.grad for every requires_grad tensor
        reachable from loss. Gradients for this call are computed into a
        fresh map, so calling twice on the same tape doubles every grad."""
        if loss.shape != (1, 1):
            raise ShapeError(f"backward needs a scalar loss, got {loss.shape}")
        grads = {id(loss): np.ones((1, 1))}
        seen = {id(loss): loss}
        for inputs, output, backward_fn in reversed(self._records):
            g_out = grads.get(id(output))
            if g_out is None:
                continue
            for tensor, g_in in zip(inputs, backward_fn(g_out)):
                if g_in is None:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + g_in
                else:
                    grads[key] = g_in
                seen[key] = tensor
        for key, tensor in seen.items():
            if not tensor.requires_grad:
                continue
            if tensor.grad is None:
                tensor.grad = grads[key].copy()
            else:
                tensor.grad = tensor.grad + grads[key]


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _make(op_name, value, inputs, backward_fn):
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(op_name)
    out = Tensor(value)
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = active_tape()
    if tape is not None and out.requires_grad:
        tape._records.append((inputs, out, backward_fn))
    return out


def _unbroadcast(grad, shape):
    """Sum grad down to `shape` along axes that were broadcast."""
    if grad.shape == shape:
        return grad
    if shape[0] == 1 and grad.shape[0] != 1:
        grad = grad.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        grad = grad.sum(axis=1, keepdims=True)
    return grad


def _check_broadcast(a, b, op_name):
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{op_name}: incompatible shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------------------
# Arithmetic primitives (with row/column/scalar broadcasting)

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    av, bv = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)

    return _make("mul", av * bv, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "div")
    av, bv = a.data, b.data

    def backward(g):
        return (_unbroadcast(g / bv, a.shape),
                _unbroadcast(-g * av / (bv * bv), b.shape))

    return _make("div", av / bv, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        return (g * c,)

    return _make("scale", a.data * c, (a,), backward)


def add_const(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        return (g,)

    return _make("add_const", a.data + c, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} x {b.shape}")
    av, bv = a.data, b.data

    def backward(g):
        return g @ bv.T, av.T @ g

    return _make("matmul", av @ bv, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    def backward(g):
        return (g.T,)

    return _make("transpose", a.data.T.copy(), (a,), backward)


# ---------------------------------------------------------------------------
# Element-wise primitives

def tanh_elem(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - y * y),)

    return _make("tanh", y, (a,), backward)


def relu_elem(a: Tensor) -> Tensor:
    mask = a.data > 0.0

    def backward(g):
        return (g * mask,)

    return _make("relu", np.where(mask, a.data, 0.0), (a,), backward)


def exp_elem(a: Tensor) -> Tensor:
    y = np.exp(a.data)

    def backward(g):
        return (g * y,)

    return _make("exp", y, (a,), backward)


def log_elem(a: Tensor) -> Tensor:
    av = a.data

    def backward(g):
        return (g / av,)

    return _make("log", np.log(av), (a,), backward)


def sigmoid_elem(a: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        return (g * y * (1.0 - y),)

    return _make("sigmoid", y, (a,), backward)


def sqrt_elem(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)

    def backward(g):
        # subgradient 0 at exactly 0 so clamped-away zero norms stay finite
        return (np.where(y > 0.0, g / (2.0 * np.where(y > 0.0, y, 1.0)), 0.0),)

    return _make("sqrt", y, (a,), backward)


def clamp_elem(a: Tensor, lo=None, hi=None) -> Tensor:
    if lo is not None and hi is not None and lo > hi:
        raise AutodiffError(f"clamp: lo={lo} > hi={hi}")
    av = a.data
    y = np.clip(av, lo, hi)
    mask = np.ones_like(av, dtype=bool)
    if lo is not None:
        mask &= av > lo
    if hi is not None:
        mask &= av < hi

    def backward(g):
        return (g * mask,)

    return _make("clamp", y, (a,), backward)


# ---------------------------------------------------------------------------
# Reductions, softmax, structure

def sum_elems(a: Tensor, axis=None) -> Tensor:
    shape = a.shape
    if axis is None:
        y = a.data.sum().reshape(1, 1)
    elif axis == 0:
        y = a.data.sum(axis=0, keepdims=True)
    elif axis == 1:
        y = a.data.sum(axis=1, keepdims=True)
    else:
        raise AutodiffError(f"sum: bad axis {axis}")

    def backward(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _make("sum", y, (a,), backward)


def mean_elems(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum_elems(a, axis=axis), 1.0 / n)


def row_softmax(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return (y * (g - dot),)

    return _make("row_softmax", y, (a,), backward)


def row_log_softmax(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    y = shifted - lse
    p = np.exp(y)

    def backward(g):
        return (g - p * g.sum(axis=1, keepdims=True),)

    return _make("row_log_softmax", y, (a,), backward)


def concat_rows(tensors) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat_rows: empty input")
    cols = tensors[0].shape[1]
    offsets = []
    pos = 0
    for t in tensors:
        if t.shape[1] != cols:
            raise ShapeError("concat_rows: column mismatch")
        offsets.append((pos, pos + t.shape[0]))
        pos += t.shape[0]

    def backward(g):
        return tuple(g[lo:hi] for lo, hi in offsets)

    return _make("concat_rows", np.concatenate([t.data for t in tensors], axis=0),
                 tuple(tensors), backward)


def concat_cols(tensors) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat_cols: empty input")
    rows = tensors[0].shape[0]
    offsets = []
    pos = 0
    for t in tensors:
        if t.shape[0] != rows:
            raise ShapeError("concat_cols: row mismatch")
        offsets.append((pos, pos + t.shape[1]))
        pos += t.shape[1]

    def backward(g):
        return tuple(g[:, lo:hi] for lo, hi in offsets)

    return _make("concat_cols", np.concatenate([t.data for t in tensors], axis=1),
                 tuple(tensors), backward)


def slice_rows(a: Tensor, start, stop) -> Tensor:
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return _make("slice_rows", a.data[start:stop].copy(), (a,), backward)


def slice_cols(a: Tensor, start, stop) -> Tensor:
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _make("slice_cols", a.data[:, start:stop].copy(), (a,), backward)


def row(a: Tensor, i) -> Tensor:
    return slice_rows(a, i, i + 1)


# ---------------------------------------------------------------------------
# Composite normalizations

def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps=1e-5) -> Tensor:
    """Per-row normalization with population variance: rows of shape 1xD
    and batched mxD inputs both work; gain/bias are 1xD."""
    if eps <= 0:
        raise AutodiffError("layer_norm: eps must be > 0")
    d = a.shape[1]
    m = scale(sum_elems(a, axis=1), 1.0 / d)
    centered = sub(a, m)
    var = scale(sum_elems(mul(centered, centered), axis=1), 1.0 / d)
    denom = sqrt_elem(add_const(var, eps))
    return add(mul(div(centered, denom), gain), bias)


def l2_normalize(a: Tensor, eps=1e-12) -> Tensor:
    """Per-row a / max(||a||, eps); zero rows pass through unchanged."""
    if eps <= 0:
        raise AutodiffError("l2_normalize: eps must be > 0")
    norm = sqrt_elem(sum_elems(mul(a, a), axis=1))
    return div(a, clamp_elem(norm, lo=eps))


# ---------------------------------------------------------------------------
# Gradient checking

@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    max_abs_analytic: float


@dataclass
class GradCheckReport:
    entries: list = field(default_factory=list)
    tol: float = 1e-4

    @property
    def max_rel_err(self):
        return max((e.max_rel_err for e in self.entries), default=0.0)

    @property
    def passed(self):
        return self.max_rel_err <= self.tol


def grad_check(f, params, step=1e-5, tol=1e-4, names=None) -> GradCheckReport:
    """Compare reverse-mode gradients of the scalar f() against central
    finite differences over every entry of every parameter tensor.

    f is re-evaluated with perturbed parameter values, so it must be a
    deterministic function of `params`. Relative error uses the
    max(1e-8, |analytic| + |numeric|) denominator.
    """
    if step <= 0 or tol <= 0:
        raise AutodiffError("grad_check: step and tol must be > 0")
    params = list(params)
    if names is None:
        names = [f"param{i}" for i in range(len(params))]
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        out = f()
        if out.shape != (1, 1):
            raise ShapeError("grad_check: f must return a scalar")
        tape.backward(out)
    report = GradCheckReport(tol=tol)
    for p, name in zip(params, names):
        analytic = p.grad if p.grad is not None else np.zeros(p.shape)
        worst = 0.0
        it = np.nditer(p.data, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = p.data[idx]
            p.data[idx] = orig + step
            f_plus = f().item()
            p.data[idx] = orig - step
            f_minus = f().item()
            p.data[idx] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NonFiniteError("grad_check", "non-finite f during differencing")
            numeric = (f_plus - f_minus) / (2.0 * step)
            denom = max(1e-8, abs(analytic[idx]) + abs(numeric))
            worst = max(worst, abs(analytic[idx] - numeric) / denom)
        report.entries.append(GradCheckEntry(name, worst, float(np.abs(analytic).max(initial=0.0))))
    return report
