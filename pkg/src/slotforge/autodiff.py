"""Dense float64 tensors with a recorded-operation reverse-mode gradient tape.

Every operation builds a new immutable ``Tensor`` holding its value plus the
tape edges (parent tensor, vector-Jacobian product) needed to backpropagate.
A tape lives only for one forward pass: there is no global graph state, so
independent passes (e.g. one per image) can run on separate threads as long
as gradient accumulation into shared parameters happens in a fixed order.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericError

Vjp = Callable[[np.ndarray], np.ndarray]

# Debug-mode switch: when enabled, every op output is checked for NaN/Inf and
# the offending op is named. Off by default; the trainer flips it on to
# diagnose a non-finite loss.
_CHECK_FINITE = False


def set_finite_checks(enabled: bool) -> bool:
    """Toggle per-op NaN/Inf assertions; returns the previous setting."""
    global _CHECK_FINITE
    previous = _CHECK_FINITE
    _CHECK_FINITE = enabled
    return previous


class Tensor:
    """A contiguous row-major float64 array plus its backpropagation edges.

    ``grad`` stays ``None`` until ``backward`` reaches this tensor; repeated
    ``backward`` calls without ``zero_grad`` accumulate.
    """

    __slots__ = ("data", "grad", "op", "_parents")

    def __init__(self, data, op: str = "leaf",
                 parents: tuple[tuple["Tensor", Vjp], ...] = ()):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)  # keeps 0-d arrays 0-d
        self.data = arr
        self.grad: np.ndarray | None = None
        self.op = op
        self._parents = parents
        if _CHECK_FINITE and not np.all(np.isfinite(self.data)):
            raise NumericError(f"non-finite values produced by op '{op}'")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.data.shape}, op={self.op!r})"


class Parameter:
    """A named trainable tensor; names must be unique within a registry."""

    __slots__ = ("tensor", "name", "trainable")

    def __init__(self, value, name: str, trainable: bool = True):
        self.tensor = value if isinstance(value, Tensor) else Tensor(value)
        self.name = name
        self.trainable = trainable

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @data.setter
    def data(self, value: np.ndarray) -> None:
        self.tensor.data = np.ascontiguousarray(np.asarray(value, dtype=np.float64))

    @property
    def grad(self) -> np.ndarray | None:
        return self.tensor.grad

    def grad_or_zeros(self) -> np.ndarray:
        g = self.tensor.grad
        return g if g is not None else np.zeros_like(self.tensor.data)

    def zero_grad(self) -> None:
        self.tensor.grad = None

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Parameter({self.name!r}, shape={self.tensor.shape})"


def check_unique_names(params: Iterable[Parameter]) -> None:
    seen: set[str] = set()
    for p in params:
        if p.name in seen:
            raise ContractError(f"duplicate parameter name {p.name!r}")
        seen.add(p.name)


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def _as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcasted gradient back to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary(op: str, a, b, value: np.ndarray,
            da: Callable[[np.ndarray], np.ndarray],
            db: Callable[[np.ndarray], np.ndarray]) -> Tensor:
    parents = []
    if isinstance(a, Tensor):
        parents.append((a, lambda g: _unbroadcast(da(g), a.data.shape)))
    if isinstance(b, Tensor):
        parents.append((b, lambda g: _unbroadcast(db(g), b.data.shape)))
    return Tensor(value, op, tuple(parents))


def add(a, b) -> Tensor:
    return _binary("add", a, b, _as_array(a) + _as_array(b),
                   lambda g: g, lambda g: g)


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, _as_array(a) - _as_array(b),
                   lambda g: g, lambda g: -g)


def mul(a, b) -> Tensor:
    av, bv = _as_array(a), _as_array(b)
    return _binary("mul", a, b, av * bv,
                   lambda g: g * bv, lambda g: g * av)


def div(a, b) -> Tensor:
    av, bv = _as_array(a), _as_array(b)
    return _binary("div", a, b, av / bv,
                   lambda g: g / bv, lambda g: -g * av / (bv * bv))


def neg(a: Tensor) -> Tensor:
    return Tensor(-a.data, "neg", ((a, lambda g: -g),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product; inner dimensions must agree."""
    av, bv = _as_array(a), _as_array(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ContractError(
            f"matmul shape mismatch: {av.shape} x {bv.shape}")
    return _binary("matmul", a, b, av @ bv,
                   lambda g: g @ bv.T, lambda g: av.T @ g)


def transpose(a: Tensor) -> Tensor:
    return Tensor(a.data.T, "transpose", ((a, lambda g: g.T),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.data.shape
    return Tensor(a.data.reshape(shape), "reshape",
                  ((a, lambda g: g.reshape(old)),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor(out, "exp", ((a, lambda g: g * out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor(out, "tanh", ((a, lambda g: g * (1.0 - out * out)),))


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))
    return Tensor(out, "sigmoid", ((a, lambda g: g * out * (1.0 - out)),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor(np.where(mask, a.data, 0.0), "relu",
                  ((a, lambda g: g * mask),))


def softmax(a: Tensor, axis: int) -> Tensor:
    """Max-subtracted softmax along ``axis``; rows sum to one."""
    if axis >= a.data.ndim or axis < -a.data.ndim:
        raise ContractError(f"softmax axis {axis} out of range for rank {a.data.ndim}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g: np.ndarray) -> np.ndarray:
        inner = (g * out).sum(axis=axis, keepdims=True)
        return out * (g - inner)

    return Tensor(out, "softmax", ((a, vjp),))


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row over the last dimension, then apply gain and bias."""
    x = a.data
    d = x.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ContractError(
            f"layer_norm gain/bias must have shape ({d},), got "
            f"{gain.data.shape} and {bias.data.shape}")
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    norm = centered * inv_std
    out = norm * gain.data + bias.data

    def vjp_x(g: np.ndarray) -> np.ndarray:
        gn = g * gain.data
        # d/dx of (x - mean) * inv_std, with mean and var functions of x
        term1 = gn * inv_std
        term2 = inv_std / d * gn.sum(axis=-1, keepdims=True)
        term3 = norm * inv_std / d * (gn * norm).sum(axis=-1, keepdims=True)
        return term1 - term2 - term3

    return Tensor(out, "layer_norm", (
        (a, vjp_x),
        (gain, lambda g: (g * norm).reshape(-1, d).sum(axis=0)),
        (bias, lambda g: g.reshape(-1, d).sum(axis=0)),
    ))


def sum_all(a: Tensor) -> Tensor:
    shape = a.data.shape
    return Tensor(a.data.sum(), "sum",
                  ((a, lambda g: np.broadcast_to(g, shape).copy()),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    shape = a.data.shape
    return Tensor(a.data.mean(), "mean",
                  ((a, lambda g: np.broadcast_to(g / n, shape).copy()),))


def sum_axis(a: Tensor, axis: int, keepdims: bool = True) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.data.shape

    def vjp(g: np.ndarray) -> np.ndarray:
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return Tensor(out, "sum_axis", ((a, vjp),))


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    """Columns [start, stop) of a 2-D tensor."""
    shape = a.data.shape

    def vjp(g: np.ndarray) -> np.ndarray:
        full = np.zeros(shape)
        full[:, start:stop] = g
        return full

    return Tensor(a.data[:, start:stop].copy(), "slice_cols", ((a, vjp),))


def repeat_rows(a: Tensor, n: int) -> Tensor:
    """Repeat each row n consecutive times: K x D -> (K*n) x D."""
    k, d = a.data.shape
    out = np.repeat(a.data, n, axis=0)
    return Tensor(out, "repeat_rows",
                  ((a, lambda g: g.reshape(k, n, d).sum(axis=1)),))


def tile_rows(a: Tensor, k: int) -> Tensor:
    """Stack k copies vertically: N x D -> (k*N) x D."""
    n, d = a.data.shape
    out = np.tile(a.data, (k, 1))
    return Tensor(out, "tile_rows",
                  ((a, lambda g: g.reshape(k, n, d).sum(axis=0)),))


def sum_blocks(a: Tensor, k: int) -> Tensor:
    """Sum k stacked blocks: (k*N) x D -> N x D. Inverse pair to tile_rows."""
    kn, d = a.data.shape
    n = kn // k
    out = a.data.reshape(k, n, d).sum(axis=0)
    return Tensor(out, "sum_blocks",
                  ((a, lambda g: np.tile(g, (k, 1))),))


def permute_rows(a: Tensor, perm: Sequence[int]) -> Tensor:
    idx = np.asarray(perm, dtype=np.intp)
    inv = np.empty_like(idx)
    inv[idx] = np.arange(idx.size)
    return Tensor(a.data[idx], "permute_rows", ((a, lambda g: g[inv]),))


# ---------------------------------------------------------------------------
# GRU cell
# ---------------------------------------------------------------------------

class GruParams:
    """Weights for one GRU cell, gate order (reset, update, candidate)."""

    __slots__ = ("w_ih", "w_hh", "b_ih", "b_hh")

    def __init__(self, w_ih: Tensor, w_hh: Tensor, b_ih: Tensor, b_hh: Tensor):
        self.w_ih = w_ih
        self.w_hh = w_hh
        self.b_ih = b_ih
        self.b_hh = b_hh

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator) -> "GruParams":
        bound = 1.0 / np.sqrt(dim)
        u = lambda shape: rng.uniform(-bound, bound, size=shape)
        return cls(Tensor(u((dim, 3 * dim))), Tensor(u((dim, 3 * dim))),
                   Tensor(np.zeros(3 * dim)), Tensor(np.zeros(3 * dim)))

    def tensors(self) -> list[tuple[str, Tensor]]:
        return [("w_ih", self.w_ih), ("w_hh", self.w_hh),
                ("b_ih", self.b_ih), ("b_hh", self.b_hh)]


def gru_cell(state: Tensor, inp: Tensor, params: GruParams) -> Tensor:
    """Standard GRU applied independently to each row of state/input.

    reset r and update z gates via sigmoid, candidate n via tanh with the
    reset gate applied to the recurrent term; output z*state + (1-z)*n so a
    saturated update gate passes the old state through unchanged.
    """
    if state.shape != inp.shape:
        raise ContractError(
            f"gru_cell state/input shapes differ: {state.shape} vs {inp.shape}")
    d = state.shape[1]
    gx = add(matmul(inp, params.w_ih), params.b_ih)
    gh = add(matmul(state, params.w_hh), params.b_hh)
    r = sigmoid(add(slice_cols(gx, 0, d), slice_cols(gh, 0, d)))
    z = sigmoid(add(slice_cols(gx, d, 2 * d), slice_cols(gh, d, 2 * d)))
    n = tanh(add(slice_cols(gx, 2 * d, 3 * d),
                 mul(r, slice_cols(gh, 2 * d, 3 * d))))
    return add(mul(z, state), mul(sub(1.0, z), n))


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    """Deterministic post-order over the tape reachable from root."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent, _ in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def gradient_map(loss: Tensor) -> dict[int, np.ndarray]:
    """Pure gradient computation: id(tensor) -> d(loss)/d(tensor).

    Does not touch any ``.grad`` attribute, so concurrent tapes sharing
    parameters can each call this and reduce the results in a fixed order.
    """
    if loss.data.size != 1:
        raise ContractError(
            f"backward requires a scalar loss, got shape {loss.data.shape}")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None:
            continue
        for parent, vjp in node._parents:
            contrib = vjp(g)
            prev = grads.get(id(parent))
            grads[id(parent)] = contrib if prev is None else prev + contrib
    return grads


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor reachable from the scalar loss.

    Accumulates on top of existing gradients; call ``zero_grad`` between
    steps for fresh values.
    """
    grads = gradient_map(loss)
    for node in _topo_order(loss):
        g = grads.get(id(node))
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
