"""Reverse-mode automatic differentiation over dense float64 tensors.

A Tape owns an append-only list of primitive records. Records are appended
in execution order, so parents always precede children and one reverse sweep
visits each record exactly once (linear in tape length). A tape is
single-owner: never share a live tape across threads. Tensors with
requires_grad=False are treated as immutable and are safe for concurrent
reads.

Primitive kinds: matmul, add, mul, sin, relu, sigmoid, log_softmax, concat,
slice, sum, sqnorm, plus scale_grad (identity forward, gradient scaled by a
fixed factor on the reverse sweep; the hook used by gradient reversal).
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "NumericalError",
    "finite_difference_gradient",
    "finite_difference_jacobian",
]


class NumericalError(ArithmeticError):
    """A computation produced NaN/Inf where a finite value is required."""


class Tensor:
    """Dense float64 array plus a gradient-participation flag."""

    __slots__ = ("values", "requires_grad")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.values.shape

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"


def _stable_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _log_softmax(x, axis):
    shifted = x - np.max(x, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def _unbroadcast(grad, shape):
    """Reduce a gradient back to the shape of a broadcast operand."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _is_basic_index(key):
    if isinstance(key, tuple):
        return all(_is_basic_index(k) for k in key)
    return isinstance(key, (int, np.integer, slice, type(Ellipsis), type(None)))


class Tape:
    """Recorder of primitive operations enabling reverse sweeps.

    record=False gives a non-recording tape: the same forward math with no
    memory of it (used for inference). check_finite=True validates every
    primitive output (debug mode, off by default).
    """

    def __init__(self, record: bool = True, check_finite: bool = False):
        self.records = []
        self.recording = bool(record)
        self.check_finite = bool(check_finite)
        self.last_backward_visits = 0

    # -- emission ---------------------------------------------------------

    def _emit(self, kind, inputs, out_values, ctx=None):
        if self.check_finite and not np.all(np.isfinite(out_values)):
            raise NumericalError(f"non-finite result from primitive '{kind}'")
        out = Tensor(out_values, requires_grad=any(t.requires_grad for t in inputs))
        if self.recording:
            self.records.append((kind, inputs, out, ctx))
        return out

    @staticmethod
    def constant(values) -> Tensor:
        return Tensor(values, requires_grad=False)

    # -- primitives -------------------------------------------------------

    def matmul(self, a: Tensor, b: Tensor, transpose_a=False, transpose_b=False) -> Tensor:
        va = a.values.T if transpose_a else a.values
        vb = b.values.T if transpose_b else b.values
        if va.ndim != 2 or vb.ndim != 2:
            raise ValueError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
        if va.shape[1] != vb.shape[0]:
            raise ValueError(f"matmul inner dimensions differ: {va.shape} @ {vb.shape}")
        return self._emit("matmul", (a, b), va @ vb, (transpose_a, transpose_b))

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        try:
            out = a.values + b.values
        except ValueError as exc:
            raise ValueError(f"add shapes incompatible: {a.shape} + {b.shape}") from exc
        return self._emit("add", (a, b), out)

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        try:
            out = a.values * b.values
        except ValueError as exc:
            raise ValueError(f"mul shapes incompatible: {a.shape} * {b.shape}") from exc
        return self._emit("mul", (a, b), out)

    def sin(self, a: Tensor) -> Tensor:
        return self._emit("sin", (a,), np.sin(a.values))

    def relu(self, a: Tensor) -> Tensor:
        return self._emit("relu", (a,), np.maximum(a.values, 0.0))

    def sigmoid(self, a: Tensor) -> Tensor:
        return self._emit("sigmoid", (a,), _stable_sigmoid(a.values))

    def log_softmax(self, a: Tensor, axis: int = -1) -> Tensor:
        return self._emit("log_softmax", (a,), _log_softmax(a.values, axis), axis)

    def concat(self, parts, axis: int = 0) -> Tensor:
        parts = tuple(parts)
        if not parts:
            raise ValueError("concat needs at least one operand")
        out = np.concatenate([p.values for p in parts], axis=axis)
        sizes = tuple(p.values.shape[axis] for p in parts)
        return self._emit("concat", parts, out, (axis, sizes))

    def slice(self, a: Tensor, key) -> Tensor:
        return self._emit("slice", (a,), a.values[key], key)

    def sum(self, a: Tensor) -> Tensor:
        return self._emit("sum", (a,), np.sum(a.values))

    def sqnorm(self, a: Tensor) -> Tensor:
        v = a.values
        return self._emit("sqnorm", (a,), np.sum(v * v))

    def scale_grad(self, a: Tensor, factor: float) -> Tensor:
        return self._emit("scale_grad", (a,), a.values, float(factor))

    _DISPATCH = {
        "matmul": "matmul", "add": "add", "mul": "mul", "sin": "sin",
        "relu": "relu", "sigmoid": "sigmoid", "log_softmax": "log_softmax",
        "concat": "concat", "slice": "slice", "sum": "sum",
        "sqnorm": "sqnorm", "scale_grad": "scale_grad",
    }

    def apply(self, kind: str, *inputs, **ctx) -> Tensor:
        """Record a primitive by name (convenience for generic tests)."""
        try:
            method = getattr(self, self._DISPATCH[kind])
        except KeyError:
            raise ValueError(f"unknown primitive kind '{kind}'") from None
        if kind == "concat":
            return method(inputs, **ctx)
        return method(*inputs, **ctx)

    # -- reverse sweep ----------------------------------------------------

    def backward(self, output: Tensor, params, seed=None) -> dict:
        """Gradients of a scalar output with respect to each param tensor.

        Disconnected params get exact zeros. With an explicit seed array the
        scalar restriction is lifted (used for Jacobian row sweeps).
        """
        if seed is None:
            if output.values.size != 1:
                raise ValueError(f"backward needs a scalar output, got shape {output.shape}")
            seed = np.ones_like(output.values)
        adjoint = {output: np.broadcast_to(np.asarray(seed, dtype=np.float64), output.shape)}
        visits = 0
        for kind, inputs, out, ctx in reversed(self.records):
            visits += 1
            g = adjoint.pop(out, None)
            if g is None:
                continue
            self._backprop_record(kind, inputs, out, ctx, g, adjoint)
        self.last_backward_visits = visits
        return {p: adjoint.get(p, np.zeros_like(p.values)) for p in params}

    @staticmethod
    def _acc(adjoint, tensor, grad):
        if not tensor.requires_grad:
            return
        prev = adjoint.get(tensor)
        adjoint[tensor] = grad if prev is None else prev + grad

    def _backprop_record(self, kind, inputs, out, ctx, g, adjoint):
        acc = self._acc
        if kind == "matmul":
            a, b = inputs
            ta, tb = ctx
            va = a.values.T if ta else a.values
            vb = b.values.T if tb else b.values
            ga = g @ vb.T
            gb = va.T @ g
            acc(adjoint, a, ga.T if ta else ga)
            acc(adjoint, b, gb.T if tb else gb)
        elif kind == "add":
            a, b = inputs
            acc(adjoint, a, _unbroadcast(g, a.shape))
            acc(adjoint, b, _unbroadcast(g, b.shape))
        elif kind == "mul":
            a, b = inputs
            acc(adjoint, a, _unbroadcast(g * b.values, a.shape))
            acc(adjoint, b, _unbroadcast(g * a.values, b.shape))
        elif kind == "sin":
            (a,) = inputs
            acc(adjoint, a, g * np.cos(a.values))
        elif kind == "relu":
            (a,) = inputs
            acc(adjoint, a, g * (a.values > 0.0))
        elif kind == "sigmoid":
            (a,) = inputs
            acc(adjoint, a, g * out.values * (1.0 - out.values))
        elif kind == "log_softmax":
            (a,) = inputs
            soft = np.exp(out.values)
            acc(adjoint, a, g - soft * np.sum(g, axis=ctx, keepdims=True))
        elif kind == "concat":
            axis, sizes = ctx
            offset = 0
            for part, size in zip(inputs, sizes):
                idx = [np.s_[:]] * g.ndim
                idx[axis] = np.s_[offset:offset + size]
                acc(adjoint, part, g[tuple(idx)])
                offset += size
        elif kind == "slice":
            (a,) = inputs
            if a.requires_grad:
                ga = np.zeros_like(a.values)
                if _is_basic_index(ctx):
                    ga[ctx] += g
                else:
                    np.add.at(ga, ctx, g)
                acc(adjoint, a, ga)
        elif kind == "sum":
            (a,) = inputs
            acc(adjoint, a, np.broadcast_to(g, a.shape))
        elif kind == "sqnorm":
            (a,) = inputs
            acc(adjoint, a, 2.0 * g * a.values)
        elif kind == "scale_grad":
            (a,) = inputs
            acc(adjoint, a, g * ctx)
        else:  # pragma: no cover
            raise ValueError(f"no backward rule for '{kind}'")

    # -- tangent (forward-mode) sweep --------------------------------------

    def tangent(self, output: Tensor, seeds: dict) -> np.ndarray:
        """Directional derivative of output along the seeded input direction."""
        tan = dict(seeds)
        for kind, inputs, out, ctx in self.records:
            t_out = self._tangent_record(kind, inputs, out, ctx, tan)
            if t_out is not None:
                tan[out] = t_out
        got = tan.get(output)
        return np.zeros_like(output.values) if got is None else got

    @staticmethod
    def _tangent_record(kind, inputs, out, ctx, tan):
        ts = [tan.get(t) for t in inputs]
        if all(t is None for t in ts):
            return None
        if kind == "matmul":
            a, b = inputs
            ta, tb = ctx
            va = a.values.T if ta else a.values
            vb = b.values.T if tb else b.values
            acc = np.zeros_like(out.values)
            if ts[0] is not None:
                da = ts[0].T if ta else ts[0]
                acc = acc + da @ vb
            if ts[1] is not None:
                db = ts[1].T if tb else ts[1]
                acc = acc + va @ db
            return acc
        if kind == "add":
            acc = np.zeros_like(out.values)
            for t in ts:
                if t is not None:
                    acc = acc + t
            return acc
        if kind == "mul":
            a, b = inputs
            acc = np.zeros_like(out.values)
            if ts[0] is not None:
                acc = acc + ts[0] * b.values
            if ts[1] is not None:
                acc = acc + a.values * ts[1]
            return acc
        if kind == "sin":
            return ts[0] * np.cos(inputs[0].values)
        if kind == "relu":
            return ts[0] * (inputs[0].values > 0.0)
        if kind == "sigmoid":
            return ts[0] * out.values * (1.0 - out.values)
        if kind == "log_softmax":
            soft = np.exp(out.values)
            return ts[0] - soft * np.sum(ts[0], axis=ctx, keepdims=True)
        if kind == "concat":
            axis, _ = ctx
            parts = [t if t is not None else np.zeros_like(p.values)
                     for t, p in zip(ts, inputs)]
            return np.concatenate(parts, axis=axis)
        if kind == "slice":
            return ts[0][ctx]
        if kind == "sum":
            return np.sum(ts[0])
        if kind == "sqnorm":
            return 2.0 * np.sum(inputs[0].values * ts[0])
        if kind == "scale_grad":
            return ts[0]
        raise ValueError(f"no tangent rule for '{kind}'")  # pragma: no cover


def finite_difference_gradient(f, x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient oracle: (f(x+h e_i) - f(x-h e_i)) / 2h."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    xf = x.reshape(-1)
    for i in range(xf.size):
        orig = xf[i]
        xf[i] = orig + h
        up = float(f(x))
        xf[i] = orig - h
        down = float(f(x))
        xf[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericalError(f"non-finite function value near coordinate {i}")
        flat[i] = (up - down) / (2.0 * h)
    return grad


def finite_difference_jacobian(f, x, h: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian of a vector-valued function, one column per input."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.asarray(x, dtype=np.float64)
    xf = x.reshape(-1)
    cols = []
    for i in range(xf.size):
        orig = xf[i]
        xf[i] = orig + h
        up = np.asarray(f(x), dtype=np.float64)
        xf[i] = orig - h
        down = np.asarray(f(x), dtype=np.float64)
        xf[i] = orig
        if not (np.all(np.isfinite(up)) and np.all(np.isfinite(down))):
            raise NumericalError(f"non-finite function value near coordinate {i}")
        cols.append((up - down) / (2.0 * h))
    return np.stack(cols, axis=-1)
