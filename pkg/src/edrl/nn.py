"""Parameter containers: linear layers, MLPs, multi-head attention, encoders."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .tensor import DimensionError, RngState, Tensor, gelu, matmul, relu, softmax, sqrt

_ACTIVATIONS = {"relu": relu, "gelu": gelu}


class Module:
    """Base class; parameters are discovered by walking attributes in insertion order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def kaiming_uniform(fan_in: int, fan_out: int, rng: RngState) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, (fan_in, fan_out))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: RngState):
        self.d_in, self.d_out = d_in, d_out
        self.weight = Tensor(kaiming_uniform(d_in, d_out, rng), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise DimensionError(f"linear expects width {self.d_in}, got shape {x.shape}")
        return matmul(x, self.weight) + self.bias


class Mlp(Module):
    """Affine layers with an activation between consecutive layers (none after the last)."""

    def __init__(self, widths: list[int], rng: RngState, activation: str = "relu"):
        if len(widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        self.widths = list(widths)
        self.activation = activation
        self.layers = [Linear(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.widths[0]:
            raise DimensionError(f"MLP expects width {self.widths[0]}, got shape {x.shape}")
        act = _ACTIVATIONS[self.activation]
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = act(x)
        return x


def mlp_forward(m: Mlp, x: Tensor) -> Tensor:
    return m(x)


class LayerNorm(Module):
    """Normalize over the last axis, then apply a learned gain and bias."""

    def __init__(self, width: int, eps: float = 1e-5):
        self.eps = eps
        self.gain = Tensor(np.ones(width), requires_grad=True)
        self.bias = Tensor(np.zeros(width), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        centered = x - x.mean(axis=-1, keepdims=True)
        var = (centered * centered).mean(axis=-1, keepdims=True)
        return centered / sqrt(var + self.eps) * self.gain + self.bias


class Attention(Module):
    """Multi-head scaled dot-product attention with input and output projections.

    The inner width is rounded up to a multiple of ``heads`` so odd model
    widths (e.g. a 13-channel common subspace) still split evenly.
    """

    def __init__(self, d_query: int, d_kv: int, d_out: int, rng: RngState, heads: int = 2):
        self.heads = heads
        self.d_inner = heads * math.ceil(max(d_query, d_kv, d_out) / heads)
        self.q = Linear(d_query, self.d_inner, rng)
        self.k = Linear(d_kv, self.d_inner, rng)
        self.v = Linear(d_kv, self.d_inner, rng)
        self.o = Linear(self.d_inner, d_out, rng)
        self.last_weights: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        b, t, _ = x.shape
        return x.reshape(b, t, self.heads, self.d_inner // self.heads).transpose(0, 2, 1, 3)

    def __call__(self, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
            raise DimensionError(f"attention expects [B,T,D] operands, got {q.shape}, {k.shape}, {v.shape}")
        if k.shape[:2] != v.shape[:2] or q.shape[0] != k.shape[0]:
            raise DimensionError(f"attention shape mismatch: q {q.shape}, k {k.shape}, v {v.shape}")
        b, tq, _ = q.shape
        qh, kh, vh = self._split(self.q(q)), self._split(self.k(k)), self._split(self.v(v))
        scores = matmul(qh, kh.swap_last()).scale(1.0 / math.sqrt(self.d_inner // self.heads))
        weights = softmax(scores, axis=-1)
        self.last_weights = weights.data
        ctx = matmul(weights, vh).transpose(0, 2, 1, 3).reshape(b, tq, self.d_inner)
        return self.o(ctx)


def attention(block: Attention, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    return block(q, k, v)


class ModalityEncoder(Module):
    """Token embedding, pre-norm residual self-attention blocks, a residual token MLP, final norm."""

    def __init__(self, modality: int, raw_width: int, tokens: int, width: int, rng: RngState,
                 heads: int = 2, blocks: int = 2):
        self.modality = modality
        self.raw_width = raw_width
        self.tokens = tokens
        self.width = width
        self.embed = Linear(raw_width, width, rng)
        self.blocks = [Attention(width, width, width, rng, heads) for _ in range(blocks)]
        self.norms = [LayerNorm(width) for _ in range(blocks + 1)]
        self.mlp = Mlp([width, width, width], rng)
        self.out_norm = LayerNorm(width)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[-1] != self.raw_width:
            raise DimensionError(
                f"modality M{self.modality + 1} encoder expects raw width {self.raw_width}, got shape {x.shape}"
            )
        h = self.embed(x)
        for blk, norm in zip(self.blocks, self.norms):
            n = norm(h)
            h = h + blk(n, n, n)
        h = h + self.mlp(self.norms[-1](h))
        return self.out_norm(h)


def encode(enc: ModalityEncoder, x: Tensor) -> Tensor:
    return enc(x)
