"""Essence-point bank, matching loss, class inference and guiding-token sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Mlp, Module
from .tensor import (
    NumericDomainError,
    RngState,
    Tensor,
    as_tensor,
    cosine_similarity,
    exp,
    stack,
)

M1, M2 = 0, 1
MODALITY_NAMES = ("M1", "M2")


class UnusableInputError(ValueError):
    """No modality is available for a sample."""


@dataclass
class GaussianParams:
    mean: Tensor
    variance: Tensor


@dataclass
class GuidingTokens:
    """Per-sample guiding tokens, each ``[B, D]``."""

    g_uni_m1: Tensor
    g_uni_m2: Tensor
    g_com: Tensor
    classes: np.ndarray

    def unique(self, modality: int) -> Tensor:
        return self.g_uni_m1 if modality == M1 else self.g_uni_m2


class EssencePointBank(Module):
    """Learnable points ``[modalities, classes, D]`` plus one Gaussian head per (m, c)."""

    def __init__(self, n_classes: int, width: int, rng: RngState, n_modalities: int = 2):
        pts = rng.normal((n_modalities, n_classes, width))
        pts /= np.linalg.norm(pts, axis=-1, keepdims=True)
        self.n_modalities = n_modalities
        self.n_classes = n_classes
        self.width = width
        self.points = Tensor(pts, requires_grad=True)
        self.heads = [Mlp([width, width, 2 * width], rng) for _ in range(n_modalities * n_classes)]

    def head(self, modality: int, cls: int) -> Mlp:
        return self.heads[modality * self.n_classes + cls]

    def gaussian_table(self) -> tuple[Tensor, Tensor]:
        """Means and log-variances for every (m, c), each ``[M, C, D]``."""
        outs = []
        for m in range(self.n_modalities):
            for c in range(self.n_classes):
                outs.append(self.head(m, c)(self.points[m, c].reshape(1, self.width)).reshape(2 * self.width))
        table = stack(outs).reshape(self.n_modalities, self.n_classes, 2 * self.width)
        return table[..., : self.width], table[..., self.width :]


def pooled_feature(tokens: Tensor) -> Tensor:
    """Mean over the token axis: ``[B, T, D] -> [B, D]``."""
    return tokens.mean(axis=1)


def similarity_table(features: Tensor, bank: EssencePointBank) -> Tensor:
    """Cosine similarity of every feature with every essence-point: ``[B, M, C]``."""
    b, d = features.shape
    return cosine_similarity(features.reshape(b, 1, 1, d), bank.points.reshape(1, *bank.points.shape))


def matching_loss(features: dict[int, Tensor], labels, bank: EssencePointBank) -> Tensor:
    """Pull each feature toward its (modality, class) point, push from the mean of all others.

    ``features`` maps modality id to ``[B, D]``; modalities absent from the
    dict contribute nothing.  The negative set is every other point in the
    bank, across both modalities (2K - 1 of them).
    """
    labels = np.asarray(labels, dtype=np.int64)
    k = bank.n_classes
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k}): {labels}")
    n_other = bank.n_modalities * k - 1
    rows = np.arange(labels.size)
    total = None
    for m, feats in features.items():
        sims = similarity_table(feats, bank)
        pos = sims[rows, m, labels]
        neg = (sims.sum(axis=(1, 2)) - pos).scale(1.0 / n_other)
        term = -(pos - neg).mean()
        total = term if total is None else total + term
    return total if total is not None else Tensor(0.0)


def infer_class(feature, modality: int, bank: EssencePointBank) -> int:
    """Index of the most similar essence-point in the modality's bank (lowest index on ties)."""
    f = as_tensor(feature).data.reshape(1, -1)
    sims = cosine_similarity(Tensor(f).reshape(1, 1, -1), Tensor(bank.points.data[modality][None])).data
    return int(np.argmax(sims[0]))


def infer_classes(features: dict[int, np.ndarray], bank: EssencePointBank) -> np.ndarray:
    """Per-sample class from the available modalities.

    With both present, the modality whose best similarity is higher wins
    (M1 on exact ties).
    """
    if not features:
        raise UnusableInputError("no modality available to infer a class from")
    best_sim = None
    best_cls = None
    for m in sorted(features):
        f = np.asarray(features[m])
        sims = cosine_similarity(Tensor(f[:, None, :]), Tensor(bank.points.data[m][None])).data
        cls = sims.argmax(axis=1)
        top = sims.max(axis=1)
        if best_sim is None:
            best_sim, best_cls = top, cls
        else:
            take = top > best_sim
            best_cls = np.where(take, cls, best_cls)
            best_sim = np.where(take, top, best_sim)
    return best_cls.astype(np.int64)


def gaussian_head(bank: EssencePointBank, modality: int, cls: int) -> GaussianParams:
    out = bank.head(modality, cls)(bank.points[modality, cls].reshape(1, bank.width)).reshape(2 * bank.width)
    return GaussianParams(out[: bank.width], exp(out[bank.width :]))


def poe_join(a: GaussianParams, b: GaussianParams) -> GaussianParams:
    """Product of two diagonal Gaussian experts: precisions add, means precision-weight."""
    if a.mean.shape != b.mean.shape:
        raise ValueError(f"expert dimension mismatch: {a.mean.shape} vs {b.mean.shape}")
    for name, g in (("first", a), ("second", b)):
        if (g.variance.data <= 0).any():
            raise NumericDomainError(f"{name} expert has non-positive variance")
    prec_a = 1.0 / a.variance
    prec_b = 1.0 / b.variance
    prec = prec_a + prec_b
    return GaussianParams((prec_a * a.mean + prec_b * b.mean) / prec, 1.0 / prec)


def sample_guiding(params: GaussianParams, rng: RngState | None) -> Tensor:
    """Reparameterized draw ``mean + sqrt(var) * eps``; ``rng=None`` returns the mean."""
    if rng is None:
        return params.mean
    eps = rng.normal(params.mean.shape)
    return params.mean + params.variance.sqrt() * eps


def guiding_for_batch(bank: EssencePointBank, classes, rng: RngState | None) -> GuidingTokens:
    """Guiding tokens for every sample, routed by class.

    G_uni^m comes from the (m, c) Gaussian; G_com from the product of the two
    modalities' Gaussians for class c.  Passing ``rng=None`` uses means.
    """
    classes = np.asarray(classes, dtype=np.int64)
    mu, logvar = bank.gaussian_table()
    var = exp(logvar)
    per_mod = []
    for m in (M1, M2):
        per_mod.append(GaussianParams(mu[m][classes], var[m][classes]))
    joint = poe_join(per_mod[M1], per_mod[M2])
    return GuidingTokens(
        g_uni_m1=sample_guiding(per_mod[M1], rng),
        g_uni_m2=sample_guiding(per_mod[M2], rng),
        g_com=sample_guiding(joint, rng),
        classes=classes,
    )
