"""Reverse-mode automatic differentiation over numpy arrays.

A `Tensor` records the operation that produced it; `backward()` runs the
tape in reverse topological order.  Only the primitives the tokenizer and
generator need are provided, each with a broadcasting-aware gradient.
Summation order inside a primitive is numpy's native order, which is fixed
for a given shape, so forward passes are deterministic.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Inconsistent shapes; the message names the offending op."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjps", "op")

    def __init__(self, data, requires_grad: bool = False, parents=(), vjps=(),
                 op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents if self.requires_grad else ()
        self._vjps = vjps if self.requires_grad else ()
        self.op = op

    # -- basic plumbing ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without grad requires a scalar output")
            grad = np.ones_like(self.data)
        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.asarray(grad, dtype=np.float64)
        for node in reversed(topo):
            if node.grad is None:
                continue
            for parent, vjp in zip(node._parents, node._vjps):
                if not parent.requires_grad:
                    continue
                g = vjp(node.grad)
                if parent.grad is None:
                    parent.grad = g.copy() if g.base is not None or g is node.grad else g
                else:
                    parent.grad = parent.grad + g

    # -- arithmetic --------------------------------------------------------

    @staticmethod
    def _lift(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    def __add__(self, other):
        other = self._lift(other)
        out = np.add(self.data, other.data)
        return Tensor(out, parents=(self, other), op="add", vjps=(
            lambda g: _unbroadcast(g, self.shape),
            lambda g: _unbroadcast(g, other.shape)))

    __radd__ = __add__

    def __neg__(self):
        return Tensor(-self.data, parents=(self,), op="neg",
                      vjps=(lambda g: -g,))

    def __sub__(self, other):
        return self + (-self._lift(other))

    def __rsub__(self, other):
        return self._lift(other) + (-self)

    def __mul__(self, other):
        other = self._lift(other)
        out = np.multiply(self.data, other.data)
        return Tensor(out, parents=(self, other), op="mul", vjps=(
            lambda g: _unbroadcast(g * other.data, self.shape),
            lambda g: _unbroadcast(g * self.data, other.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._lift(other)
        out = np.divide(self.data, other.data)
        return Tensor(out, parents=(self, other), op="div", vjps=(
            lambda g: _unbroadcast(g / other.data, self.shape),
            lambda g: _unbroadcast(-g * self.data / (other.data ** 2), other.shape)))

    def __pow__(self, p):
        if not np.isscalar(p):
            raise ShapeError("pow: only scalar exponents are supported")
        out = self.data ** p
        return Tensor(out, parents=(self,), op="pow",
                      vjps=(lambda g: g * p * self.data ** (p - 1),))

    def matmul(self, other):
        other = self._lift(other)
        try:
            out = np.matmul(self.data, other.data)
        except ValueError as exc:
            raise ShapeError(f"matmul: {self.shape} @ {other.shape}: {exc}") from exc

        def grad_a(g):
            ga = np.matmul(g, np.swapaxes(other.data, -1, -2))
            return _unbroadcast(ga, self.shape)

        def grad_b(g):
            gb = np.matmul(np.swapaxes(self.data, -1, -2), g)
            return _unbroadcast(gb, other.shape)

        return Tensor(out, parents=(self, other), op="matmul", vjps=(grad_a, grad_b))

    __matmul__ = matmul

    # -- elementwise nonlinearities ---------------------------------------

    def exp(self):
        out = np.exp(self.data)
        return Tensor(out, parents=(self,), op="exp", vjps=(lambda g: g * out,))

    def log(self):
        return Tensor(np.log(self.data), parents=(self,), op="log",
                      vjps=(lambda g: g / self.data,))

    def sqrt(self):
        out = np.sqrt(self.data)
        return Tensor(out, parents=(self,), op="sqrt",
                      vjps=(lambda g: g * 0.5 / out,))

    def sigmoid(self):
        out = 1.0 / (1.0 + np.exp(-self.data))
        return Tensor(out, parents=(self,), op="sigmoid",
                      vjps=(lambda g: g * out * (1.0 - out),))

    def tanh(self):
        out = np.tanh(self.data)
        return Tensor(out, parents=(self,), op="tanh",
                      vjps=(lambda g: g * (1.0 - out * out),))

    def relu(self):
        out = np.maximum(self.data, 0.0)
        return Tensor(out, parents=(self,), op="relu",
                      vjps=(lambda g: g * (self.data > 0),))

    def silu(self):
        s = 1.0 / (1.0 + np.exp(-self.data))
        out = self.data * s
        return Tensor(out, parents=(self,), op="silu",
                      vjps=(lambda g: g * (s + self.data * s * (1.0 - s)),))

    # -- reductions and shape ops -----------------------------------------

    def sum(self, axis=None, keepdims=False):
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def vjp(g):
            if axis is None:
                return np.broadcast_to(g, self.shape).astype(np.float64)
            gg = g
            if not keepdims:
                gg = np.expand_dims(g, axis)
            return np.broadcast_to(gg, self.shape).astype(np.float64)

        return Tensor(out, parents=(self,), op="sum", vjps=(vjp,))

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            n = self.size
        else:
            n = self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = self.data.reshape(shape)
        return Tensor(out, parents=(self,), op="reshape",
                      vjps=(lambda g: g.reshape(self.shape),))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        out = self.data.transpose(axes)
        return Tensor(out, parents=(self,), op="transpose",
                      vjps=(lambda g: g.transpose(inv),))

    def __getitem__(self, idx):
        out = self.data[idx]

        def vjp(g):
            full = np.zeros(self.shape)
            np.add.at(full, idx, g)
            return full

        return Tensor(out, parents=(self,), op="getitem", vjps=(vjp,))


# -- free functions --------------------------------------------------------

def concat(tensors, axis=0):
    tensors = [Tensor._lift(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def make_vjp(i):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
        sl = tuple(sl)
        return lambda g: g[sl]

    return Tensor(out, parents=tuple(tensors), op="concat",
                  vjps=tuple(make_vjp(i) for i in range(len(tensors))))


def embedding(table: Tensor, indices: np.ndarray) -> Tensor:
    """Row lookup; gradient scatters back into the table."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding: index out of range [0, {table.shape[0]})")
    out = table.data[indices]

    def vjp(g):
        full = np.zeros(table.shape)
        np.add.at(full, indices, g)
        return full

    return Tensor(out, parents=(table,), op="embedding", vjps=(vjp,))


def softmax(x: Tensor, axis=-1) -> Tensor:
    shifted = x - Tensor(x.data.max(axis=axis, keepdims=True))
    e = shifted.exp()
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x: Tensor, axis=-1) -> Tensor:
    shifted = x - Tensor(x.data.max(axis=axis, keepdims=True))
    return shifted - shifted.exp().sum(axis=axis, keepdims=True).log()


def take_along_last(x: Tensor, indices: np.ndarray) -> Tensor:
    """Pick one entry along the last axis per leading position."""
    indices = np.asarray(indices, dtype=np.int64)
    idx = np.expand_dims(indices, -1)
    out = np.take_along_axis(x.data, idx, axis=-1)[..., 0]

    def vjp(g):
        full = np.zeros(x.shape)
        np.put_along_axis(full, idx, np.expand_dims(g, -1), axis=-1)
        return full

    return Tensor(out, parents=(x,), op="take_along_last", vjps=(vjp,))


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1,
           pad: tuple[int, int] = (0, 0)) -> Tensor:
    """Temporal convolution.  x: (B, T, Cin); weight: (K, Cin, Cout)."""
    B, T, cin = x.shape
    K, wcin, cout = weight.shape
    if cin != wcin:
        raise ShapeError(f"conv1d: input channels {cin} != weight channels {wcin}")
    Tp = T + pad[0] + pad[1]
    To = (Tp - K) // stride + 1
    if To < 1:
        raise ShapeError(f"conv1d: input too short (T={T}, K={K}, stride={stride})")
    xp = np.pad(x.data, ((0, 0), pad, (0, 0)))
    out = np.zeros((B, To, cout))
    for k in range(K):
        seg = xp[:, k : k + stride * To : stride]  # (B, To, Cin)
        out += seg @ weight.data[k]
    if bias is not None:
        out = out + bias.data

    def grad_x(g):
        gxp = np.zeros((B, Tp, cin))
        for k in range(K):
            gxp[:, k : k + stride * To : stride] += g @ weight.data[k].T
        return gxp[:, pad[0] : pad[0] + T]

    def grad_w(g):
        gw = np.zeros((K, cin, cout))
        for k in range(K):
            seg = xp[:, k : k + stride * To : stride]
            gw[k] = np.einsum("btc,bto->co", seg, g)
        return gw

    parents = [x, weight]
    vjps = [grad_x, grad_w]
    if bias is not None:
        parents.append(bias)
        vjps.append(lambda g: g.sum(axis=(0, 1)))
    return Tensor(out, parents=tuple(parents), op="conv1d", vjps=tuple(vjps))


def ste(x: Tensor, forward_values: np.ndarray, op: str = "ste") -> Tensor:
    """Straight-through: arbitrary forward values, identity backward."""
    forward_values = np.asarray(forward_values, dtype=np.float64)
    if forward_values.shape != x.shape:
        raise ShapeError(f"{op}: forward values shape {forward_values.shape} "
                         f"!= input shape {x.shape}")
    return Tensor(forward_values, parents=(x,), op=op, vjps=(lambda g: g,))


# -- parameters and modules ------------------------------------------------

class Parameter(Tensor):
    __slots__ = ("trainable",)

    def __init__(self, data, trainable: bool = True):
        super().__init__(data, requires_grad=True)
        self.trainable = trainable


class Module:
    """Minimal container: parameters found by attribute walk, stable names."""

    def named_parameters(self, prefix: str = "") -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        for key in sorted(vars(self)):
            val = vars(self)[key]
            name = f"{prefix}{key}" if prefix else key
            if isinstance(val, Parameter):
                out[name] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(prefix=f"{name}."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(prefix=f"{name}.{i}."))
                    elif isinstance(item, Parameter):
                        out[f"{name}.{i}"] = item
        return out

    def zero_grad(self):
        for p in self.named_parameters().values():
            p.zero_grad()

    def parameter_count(self) -> int:
        return sum(p.size for p in self.named_parameters().values())


# -- gradient verification -------------------------------------------------

def finite_difference_check(loss_fn, params, step: float = 1e-4) -> float:
    """Max relative error between reverse-mode and central-difference grads.

    ``loss_fn`` returns a scalar Tensor computed from ``params`` (a dict or
    list of Parameters).  Intended for graphs with <= ~1e3 parameters.
    """
    if isinstance(params, dict):
        params = list(params.values())
    for p in params:
        p.zero_grad()
    loss = loss_fn()
    loss.backward()
    worst = 0.0
    for p in params:
        ad = np.zeros(p.shape) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        ad_flat = np.asarray(ad).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = loss_fn().item()
            flat[i] = orig - step
            lo = loss_fn().item()
            flat[i] = orig
            fd = (hi - lo) / (2 * step)
            denom = max(abs(fd), abs(ad_flat[i]), 1.0)
            worst = max(worst, abs(fd - ad_flat[i]) / denom)
    return worst
