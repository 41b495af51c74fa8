"""Minimal reverse-mode differentiation over dense numpy arrays.

Only the operations the generator needs are provided. Ops accept an optional
leading batch axis. Nothing is recorded unless a :class:`Tape` is active::

    with Tape() as tape:
        loss = mse(linear(x, w, b), y)
    tape.backward(loss)     # fills w.grad, b.grad

Outside a tape every op is a plain forward computation.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import DataError, NumericError

_local = threading.local()


def _tapes() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def _checked() -> bool:
    return getattr(_local, "checked", False)


class checked_mode:
    """Within this context every op output is checked for NaN/Inf."""

    def __enter__(self):
        self._prev = _checked()
        _local.checked = True
        return self

    def __exit__(self, *exc):
        _local.checked = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "is_leaf", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.is_leaf = True
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def numel(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class _Node:
    out: Tensor
    inputs: tuple
    backward: Callable[[np.ndarray], tuple]


class Tape:
    """Records ops in execution order; :meth:`backward` replays them in reverse.

    A tape belongs to the thread that entered it and is cleared by backward.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tapes().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tapes()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def record(self, out: Tensor, inputs: tuple, backward) -> None:
        out.is_leaf = False
        self.nodes.append(_Node(out, inputs, backward))

    def backward(self, loss: Tensor) -> None:
        if loss.numel != 1:
            raise DataError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not any(n.out is loss for n in self.nodes):
            raise DataError("loss was not produced on this tape")
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            gout = grads.pop(id(node.out), None)
            if gout is None:
                continue
            for inp, g in zip(node.inputs, node.backward(gout)):
                if g is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                if inp.is_leaf:
                    inp.grad = g.copy() if inp.grad is None else inp.grad + g
                else:
                    key = id(inp)
                    grads[key] = g if key not in grads else grads[key] + g
        self.nodes.clear()


def _emit(data: np.ndarray, inputs: tuple, backward) -> Tensor:
    if _checked() and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by {backward.__qualname__.split('.')[0]}")
    needs = any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    stack = _tapes()
    if needs and stack:
        stack[-1].record(out, inputs, backward)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DataError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise and reductions ----------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_shape(a, b, "add")

    def add_backward(g):
        return g, g

    return _emit(a.data + b.data, (a, b), add_backward)


def scale_sum(a: Tensor, b: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    """w1 * a + w2 * b with scalar weights."""
    _check_shape(a, b, "scale_sum")
    if w1.numel != 1 or w2.numel != 1:
        raise DataError("scale_sum weights must be scalars")
    s1, s2 = w1.data.reshape(()), w2.data.reshape(())

    def scale_sum_backward(g):
        return (
            g * s1,
            g * s2,
            np.sum(g * a.data).reshape(w1.shape),
            np.sum(g * b.data).reshape(w2.shape),
        )

    return _emit(s1 * a.data + s2 * b.data, (a, b, w1, w2), scale_sum_backward)


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    pos = x.data > 0

    def leaky_relu_backward(g):
        return (np.where(pos, g, slope * g),)

    return _emit(np.where(pos, x.data, slope * x.data), (x,), leaky_relu_backward)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    src = x.shape

    def reshape_backward(g):
        return (g.reshape(src),)

    return _emit(x.data.reshape(shape), (x,), reshape_backward)


def total(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""

    def total_backward(g):
        return (np.broadcast_to(g, x.shape).astype(x.data.dtype),)

    return _emit(np.asarray(x.data.sum()), (x,), total_backward)


def mse(pred: Tensor, target) -> Tensor:
    target = _as_tensor(target)
    _check_shape(pred, target, "mse")
    diff = pred.data - target.data
    n = diff.size

    def mse_backward(g):
        gp = (2.0 / n) * g * diff
        return gp, -gp

    return _emit(np.asarray(np.mean(diff * diff)), (pred, target), mse_backward)


# -- affine layers ---------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """x @ w.T + b for x of shape (F,) or (B, F); w is (F_out, F)."""
    if w.ndim != 2 or x.shape[-1] != w.shape[1] or x.ndim not in (1, 2):
        raise DataError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise DataError(f"linear: bias {b.shape} incompatible with weight {w.shape}")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data

    def linear_backward(g):
        gx = g @ w.data
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.shape[-1])
        gw = g2.T @ x2
        gb = g2.sum(axis=0) if b is not None else None
        return gx, gw, gb

    return _emit(out, (x, w, b), linear_backward)


def conv_output_length(length: int, kernel: int, stride: int = 1, padding: int = 0) -> int:
    return (length + 2 * padding - kernel) // stride + 1


def conv1d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x (Cin, L) or (B, Cin, L) with w (Cout, Cin, K), zero padding."""
    batched = x.ndim == 3
    xd = x.data if batched else x.data[None]
    if w.ndim != 3 or xd.ndim != 3 or xd.shape[1] != w.shape[1]:
        raise DataError(f"conv1d: input {x.shape} incompatible with weight {w.shape}")
    cout, cin, ksize = w.shape
    nb, _, length = xd.shape
    lout = conv_output_length(length, ksize, stride, padding)
    if lout < 1 or stride < 1:
        raise DataError(f"conv1d: no output for length {length}, kernel {ksize}, stride {stride}, padding {padding}")
    if b is not None and b.shape != (cout,):
        raise DataError(f"conv1d: bias {b.shape} incompatible with {cout} output channels")
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding))) if padding else xd
    span = stride * (lout - 1) + 1
    cols = np.empty((nb, cin, ksize, lout), dtype=xd.dtype)
    for j in range(ksize):
        cols[:, :, j, :] = xp[:, :, j : j + span : stride]
    cols = cols.reshape(nb, cin * ksize, lout)
    w2 = w.data.reshape(cout, cin * ksize)
    out = np.matmul(w2, cols)
    if b is not None:
        out = out + b.data[:, None]

    def conv1d_backward(g):
        g3 = g if batched else g[None]
        gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        gb = g3.sum(axis=(0, 2)) if b is not None else None
        gcols = np.matmul(w2.T, g3).reshape(nb, cin, ksize, lout)
        gxp = np.zeros_like(xp)
        for j in range(ksize):
            gxp[:, :, j : j + span : stride] += gcols[:, :, j, :]
        gx = gxp[:, :, padding : padding + length] if padding else gxp
        return (gx if batched else gx[0]), gw, gb

    return _emit(out if batched else out[0], (x, w, b), conv1d_backward)


# -- normalisation ---------------------------------------------------------------

@dataclass
class BatchNormState:
    """Running statistics for one batch-norm layer."""

    num_features: int
    momentum: float = 0.1
    eps: float = 1e-5
    running_mean: Optional[np.ndarray] = None
    running_var: Optional[np.ndarray] = None

    @property
    def initialized(self) -> bool:
        return self.running_mean is not None

    def copy(self) -> "BatchNormState":
        return BatchNormState(
            self.num_features,
            self.momentum,
            self.eps,
            None if self.running_mean is None else self.running_mean.copy(),
            None if self.running_var is None else self.running_var.copy(),
        )


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Per-channel normalisation of x (C, L) or (B, C, L).

    Training mode uses statistics over the batch and length axes and updates
    the running estimates; eval mode uses the running estimates.
    """
    batched = x.ndim == 3
    xd = x.data if batched else x.data[None]
    c = xd.shape[1]
    if xd.ndim != 3 or gamma.shape != (c,) or beta.shape != (c,) or state.num_features != c:
        raise DataError(f"batchnorm: input {x.shape} incompatible with {state.num_features} features")
    gd = gamma.data[None, :, None]
    if training:
        m = xd.shape[0] * xd.shape[2]
        if m < 2:
            raise DataError("batchnorm in training mode needs at least 2 values per channel")
        mean = xd.mean(axis=(0, 2))
        var = xd.var(axis=(0, 2))
        unbiased = var * m / (m - 1)
        if state.initialized:
            mom = state.momentum
            state.running_mean = (1 - mom) * state.running_mean + mom * mean
            state.running_var = (1 - mom) * state.running_var + mom * unbiased
        else:
            state.running_mean = mean.copy()
            state.running_var = unbiased.copy()
    else:
        if not state.initialized:
            raise DataError("batchnorm evaluated before any training step (running stats uninitialised)")
        mean = state.running_mean.astype(xd.dtype)
        var = state.running_var.astype(xd.dtype)
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (xd - mean[None, :, None]) * inv_std[None, :, None]
    out = gd * xhat + beta.data[None, :, None]

    def batchnorm_backward(g):
        g3 = g if batched else g[None]
        ggamma = np.sum(g3 * xhat, axis=(0, 2))
        gbeta = np.sum(g3, axis=(0, 2))
        gxhat = g3 * gd
        if training:
            m = xd.shape[0] * xd.shape[2]
            s1 = gxhat.sum(axis=(0, 2), keepdims=True)
            s2 = np.sum(gxhat * xhat, axis=(0, 2), keepdims=True)
            gx = inv_std[None, :, None] * (gxhat - s1 / m - xhat * s2 / m)
        else:
            gx = gxhat * inv_std[None, :, None]
        return (gx if batched else gx[0]), ggamma, gbeta

    return _emit(out if batched else out[0], (x, gamma, beta), batchnorm_backward)


def layernorm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """(x - mean) / sqrt(var + eps) over the last axis; no affine parameters."""
    f = x.shape[-1]
    if f < 2:
        raise DataError("layernorm needs at least 2 features")
    mean = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std

    def layernorm_backward(g):
        s1 = g.mean(axis=-1, keepdims=True)
        s2 = np.mean(g * xhat, axis=-1, keepdims=True)
        return (inv_std * (g - s1 - xhat * s2),)

    return _emit(xhat, (x,), layernorm_backward)


# -- finite-difference verification -------------------------------------------

def relative_error(analytic, numeric, floor: float = 1e-8) -> np.ndarray:
    """|analytic - numeric| / max(|numeric|, floor), elementwise."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    return np.abs(analytic - numeric) / np.maximum(np.abs(numeric), floor)


def _central_differences(loss_fn, t: Tensor, idx, step: float) -> np.ndarray:
    flat = t.data.reshape(-1)  # a view: perturbations write through
    fd = np.empty(len(idx), dtype=np.longdouble)
    h = flat.dtype.type(step)
    for j, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + h
        up = loss_fn().data
        flat[i] = old - h
        down = loss_fn().data
        flat[i] = old
        fd[j] = (up - down) / (2 * h)
    return fd.astype(np.float64)


def gradcheck(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    step: float = 1e-5,
    max_entries: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    fd_dtype=None,
    refine_below: float = 1e-6,
) -> dict[str, float]:
    """Worst relative error between tape gradients and central differences, per tensor.

    ``loss_fn`` must rebuild the scalar loss from the current parameter data.
    With ``max_entries`` only that many randomly chosen entries of each
    tensor are perturbed. If ``fd_dtype`` is given (e.g. ``np.longdouble``),
    differences smaller than ``refine_below`` are recomputed at that
    precision: near-zero true gradients otherwise measure rounding noise.
    """
    for t in params.values():
        t.grad = None
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    grads = {n: (np.zeros_like(t.data) if t.grad is None else t.grad) for n, t in params.items()}
    picker = rng or np.random.default_rng(0)
    chosen, fds = {}, {}
    for name, t in params.items():
        idx = np.arange(t.data.size)
        if max_entries is not None and t.data.size > max_entries:
            idx = np.sort(picker.choice(t.data.size, max_entries, replace=False))
        chosen[name] = idx
        fds[name] = _central_differences(loss_fn, t, idx, step)
    if fd_dtype is not None:
        originals = {n: t.data for n, t in params.items()}
        try:
            for t in params.values():
                t.data = t.data.astype(fd_dtype)
            for name, t in params.items():
                small = np.abs(fds[name]) < refine_below
                if small.any():
                    fds[name][small] = _central_differences(loss_fn, t, chosen[name][small], step)
        finally:
            for n, t in params.items():
                t.data = originals[n]
    return {
        name: float(relative_error(grads[name].reshape(-1)[chosen[name]], fds[name]).max())
        for name in params
    }
