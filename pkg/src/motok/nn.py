"""Network building blocks on top of the autodiff engine.

Transformer blocks follow the pre-norm layout: RMSNorm before attention and
before the gated feed-forward.  Positions are learned absolute embeddings.
"""

from __future__ import annotations

import numpy as np

from .autodiff import (
    Module,
    Parameter,
    ShapeError,
    Tensor,
    conv1d,
    embedding,
    softmax,
    ste,
)
from .rfsq import RfsqSpec, rfsq_reconstruct


def _init(rng: np.random.Generator, shape, scale=None):
    if scale is None:
        fan_in = shape[0] if len(shape) == 1 else int(np.prod(shape[:-1]))
        scale = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.normal(0.0, scale, size=shape)


class Linear(Module):
    def __init__(self, rng, in_dim: int, out_dim: int, bias: bool = True):
        self.weight = Parameter(_init(rng, (in_dim, out_dim)))
        self.bias = Parameter(np.zeros(out_dim)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = x @ self.weight
        if self.bias is not None:
            out = out + self.bias
        return out


class Conv1d(Module):
    """Stride-preserving temporal conv: output length = ceil-free T/stride,
    via symmetric zero padding of K - stride total."""

    def __init__(self, rng, in_dim: int, out_dim: int, kernel: int, stride: int = 1):
        if kernel < stride:
            raise ShapeError("conv1d: kernel must be >= stride")
        self.weight = Parameter(_init(rng, (kernel, in_dim, out_dim)))
        self.bias = Parameter(np.zeros(out_dim))
        self.stride = stride
        self.kernel = kernel

    def __call__(self, x: Tensor) -> Tensor:
        total = self.kernel - self.stride
        pad = (total // 2, total - total // 2)
        return conv1d(x, self.weight, self.bias, stride=self.stride, pad=pad)


class RMSNorm(Module):
    def __init__(self, width: int, eps: float = 1e-6):
        self.scale = Parameter(np.ones(width))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        ms = (x * x).mean(axis=-1, keepdims=True)
        return x * ((ms + self.eps) ** -0.5) * self.scale


class EmbeddingTable(Module):
    def __init__(self, rng, vocab: int, width: int):
        self.table = Parameter(_init(rng, (vocab, width), scale=0.02))

    def __call__(self, indices: np.ndarray) -> Tensor:
        return embedding(self.table, indices)


class FeedForward(Module):
    """Gated (SwiGLU-style) feed-forward."""

    def __init__(self, rng, width: int, hidden: int):
        self.gate = Linear(rng, width, hidden, bias=False)
        self.up = Linear(rng, width, hidden, bias=False)
        self.down = Linear(rng, hidden, width, bias=False)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(self.gate(x).silu() * self.up(x))


class MultiHeadAttention(Module):
    def __init__(self, rng, width: int, heads: int):
        if width % heads != 0:
            raise ShapeError(f"heads ({heads}) must divide width ({width})")
        self.heads = heads
        self.head_dim = width // heads
        self.wq = Linear(rng, width, width, bias=False)
        self.wk = Linear(rng, width, width, bias=False)
        self.wv = Linear(rng, width, width, bias=False)
        self.wo = Linear(rng, width, width, bias=False)

    def __call__(self, x: Tensor, causal: bool = False,
                 causal_from: int = 0) -> Tensor:
        """x: (B, T, C).  With ``causal``, positions >= causal_from attend
        only to earlier positions (a conditioning prefix stays fully
        visible to everyone)."""
        B, T, C = x.shape
        h, d = self.heads, self.head_dim

        def split(t):
            return t.reshape(B, T, h, d).transpose(0, 2, 1, 3)  # (B, h, T, d)

        q, k, v = split(self.wq(x)), split(self.wk(x)), split(self.wv(x))
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(d))
        if causal:
            mask = np.zeros((T, T))
            i = np.arange(T)
            future = (i[None, :] > i[:, None]) & (i[None, :] >= causal_from)
            mask[future] = -1e30
            scores = scores + Tensor(mask)
        att = softmax(scores, axis=-1)
        out = (att @ v).transpose(0, 2, 1, 3).reshape(B, T, C)
        return self.wo(out)


class TransformerBlock(Module):
    def __init__(self, rng, width: int, heads: int, ff_hidden: int):
        self.att_norm = RMSNorm(width)
        self.att = MultiHeadAttention(rng, width, heads)
        self.ff_norm = RMSNorm(width)
        self.ff = FeedForward(rng, width, ff_hidden)

    def __call__(self, x: Tensor, causal: bool = False,
                 causal_from: int = 0) -> Tensor:
        x = x + self.att(self.att_norm(x), causal=causal, causal_from=causal_from)
        return x + self.ff(self.ff_norm(x))


def ste_quantize(z: Tensor, spec: RfsqSpec) -> Tensor:
    """Forward: residual-FSQ round trip of ``z``; backward: identity on the
    whole quantize-dequantize composite."""
    if z.shape[-1] != spec.base.dim:
        raise ShapeError(
            f"ste_quantize: latent width {z.shape[-1]} != spec dim {spec.base.dim}")
    flat = z.data.reshape(-1, spec.base.dim)
    recon = rfsq_reconstruct(flat, spec).reshape(z.shape)
    return ste(z, recon, op="ste_quantize")
