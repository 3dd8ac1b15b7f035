"""Common/unique channel split, guided realignment, batch cross-correlation losses, fusion."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .eprl import GuidingTokens, M1
from .nn import Attention, Linear, Mlp, Module
from .tensor import DimensionError, RngState, Tensor, clamp_min, concat, matmul, sqrt

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SplitSpec:
    width: int
    common: int

    def __post_init__(self):
        if not 1 <= self.common <= self.width - 1:
            raise ValueError(f"need 1 <= D_c <= D-1, got D={self.width}, D_c={self.common}")

    @property
    def unique(self) -> int:
        return self.width - self.common

    @property
    def ratio(self) -> float:
        return self.common / self.width

    @classmethod
    def from_ratio(cls, width: int, ratio: float) -> "SplitSpec":
        common = int(np.floor(ratio * width + 0.5))
        return cls(width, min(max(common, 1), width - 1))


@dataclass
class RealignedFeatures:
    common: Tensor  # [B, D_c]
    unique: Tensor  # [B, D_u]

    def joined(self) -> Tensor:
        """Common channels first, matching the split order."""
        return concat([self.common, self.unique], axis=-1)


@dataclass
class CorrelationMatrix:
    c: Tensor
    common: int

    @property
    def c_com(self) -> Tensor:
        return self.c[: self.common, : self.common]

    @property
    def c_uni(self) -> Tensor:
        return self.c[self.common :, self.common :]


def split_channels(tokens: Tensor, spec: SplitSpec) -> tuple[Tensor, Tensor]:
    if tokens.shape[-1] != spec.width:
        raise DimensionError(f"split spec width {spec.width} does not match tokens {tokens.shape}")
    return tokens[..., : spec.common], tokens[..., spec.common :]


class Realigner(Module):
    """Guided attention for one modality.

    Common path: a single query (the projected common guiding token) attends
    over the common tokens.  Unique path: the projected unique guiding token
    is added to every unique token, then self-attention and a mean over tokens.
    Without guiding tokens the common query is a learned vector and the
    unique tokens are left unbiased.
    """

    def __init__(self, spec: SplitSpec, rng: RngState, heads: int = 2):
        self.spec = spec
        self.cross = Attention(spec.common, spec.common, spec.common, rng, heads)
        self.self_attn = Attention(spec.unique, spec.unique, spec.unique, rng, heads)
        self.query = Tensor(rng.normal((spec.common,), scale=0.1), requires_grad=True)

    def __call__(self, common_tokens: Tensor, unique_tokens: Tensor,
                 q_common: Tensor | None = None, bias_unique: Tensor | None = None) -> RealignedFeatures:
        b = common_tokens.shape[0]
        if q_common is None:
            q_common = self.query.reshape(1, self.spec.common).broadcast_to((b, self.spec.common))
        if q_common.shape != (b, self.spec.common):
            raise DimensionError(f"common query shape {q_common.shape} != {(b, self.spec.common)}")
        com = self.cross(q_common.reshape(b, 1, self.spec.common), common_tokens, common_tokens)
        u = unique_tokens
        if bias_unique is not None:
            u = u + bias_unique.reshape(b, 1, self.spec.unique)
        uni = self.self_attn(u, u, u).mean(axis=1)
        return RealignedFeatures(com.reshape(b, self.spec.common), uni)


class GuidingProjection(Module):
    """Maps width-D guiding tokens onto the common and unique widths."""

    def __init__(self, spec: SplitSpec, rng: RngState):
        self.to_common = Linear(spec.width, spec.common, rng)
        self.to_unique = Linear(spec.width, spec.unique, rng)


def realign(realigner: Realigner, common_tokens: Tensor, unique_tokens: Tensor,
            guiding: GuidingTokens | None, modality: int,
            projection: GuidingProjection | None = None) -> RealignedFeatures:
    if guiding is None:
        return realigner(common_tokens, unique_tokens)
    if projection is None:
        raise ValueError("guiding tokens need a projection onto the split widths")
    q = projection.to_common(guiding.g_com)
    bias = projection.to_unique(guiding.unique(modality))
    return realigner(common_tokens, unique_tokens, q, bias)


def correlation_matrix(f1: Tensor, f2: Tensor, eps: float = 1e-8, center: bool = False) -> Tensor:
    """c_ij = sum_b f1[b,i] f2[b,j] / (|f1[:,i]| |f2[:,j]|), uncentered unless ``center``."""
    if f1.shape != f2.shape or f1.ndim != 2:
        raise DimensionError(f"correlation needs equal [B, D] operands, got {f1.shape}, {f2.shape}")
    if center:
        f1 = f1 - f1.mean(axis=0, keepdims=True)
        f2 = f2 - f2.mean(axis=0, keepdims=True)
    n1 = sqrt(clamp_min((f1 * f1).sum(axis=0, keepdims=True), eps * eps))
    n2 = sqrt(clamp_min((f2 * f2).sum(axis=0, keepdims=True), eps * eps))
    return matmul((f1 / n1).swap_last(), f2 / n2)


def _offdiag_sq(c: Tensor) -> Tensor:
    mask = 1.0 - np.eye(c.shape[0])
    return (c * c * mask).sum()


def _diag(c: Tensor) -> Tensor:
    idx = np.arange(c.shape[0])
    return c[idx, idx]


def common_loss(c_com: Tensor, lam: float) -> Tensor:
    """sum_i (1 - c_ii)^2 + lam * sum_{i != j} c_ij^2."""
    if c_com.ndim != 2 or c_com.shape[0] != c_com.shape[1]:
        raise DimensionError(f"common block must be square, got {c_com.shape}")
    d = _diag(c_com)
    return ((1.0 - d) * (1.0 - d)).sum() + _offdiag_sq(c_com).scale(lam)


def unique_loss(c_uni: Tensor, lam: float) -> Tensor:
    """sum_i c_ii^2 + lam * sum_{i != j} c_ij^2."""
    if c_uni.ndim != 2 or c_uni.shape[0] != c_uni.shape[1]:
        raise DimensionError(f"unique block must be square, got {c_uni.shape}")
    d = _diag(c_uni)
    return (d * d).sum() + _offdiag_sq(c_uni).scale(lam)


def disentangle_loss(r1: RealignedFeatures, r2: RealignedFeatures, spec: SplitSpec,
                     lam_c: float, lam_u: float, center: bool = False) -> tuple[Tensor, CorrelationMatrix] | None:
    """L_com + L_uni on the realigned, re-joined features; None for single-sample batches."""
    if r1.common.shape[0] < 2:
        log.warning("batch of 1: correlation losses skipped")
        return None
    cm = CorrelationMatrix(correlation_matrix(r1.joined(), r2.joined(), center=center), spec.common)
    return common_loss(cm.c_com, lam_c) + unique_loss(cm.c_uni, lam_u), cm


def fuse(r1: RealignedFeatures, r2: RealignedFeatures) -> Tensor:
    """[uni_M1, uni_M2, com_M1 + com_M2]."""
    if r1.common.shape != r2.common.shape or r1.unique.shape != r2.unique.shape:
        raise DimensionError(
            f"fusion width mismatch: {r1.common.shape}/{r1.unique.shape} vs {r2.common.shape}/{r2.unique.shape}"
        )
    return concat([r1.unique, r2.unique, r1.common + r2.common], axis=-1)


def classify(fused: Tensor, head: Mlp) -> Tensor:
    return head(fused)


__all__ = [
    "SplitSpec",
    "RealignedFeatures",
    "CorrelationMatrix",
    "Realigner",
    "GuidingProjection",
    "split_channels",
    "realign",
    "correlation_matrix",
    "common_loss",
    "unique_loss",
    "disentangle_loss",
    "fuse",
    "classify",
    "M1",
]
