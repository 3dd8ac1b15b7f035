"""Feature-level (MMD) and logits-level (Jensen-Shannon) self-distillation losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import DimensionError, Tensor, clamp_min, exp, log, softmax

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class KernelSpec:
    """Sum of Gaussian RBF kernels exp(-|x-y|^2 / (2 s)) over squared bandwidths ``s``."""

    bandwidths: tuple[float, ...]
    family: str = "gaussian-rbf"

    def __post_init__(self):
        if not self.bandwidths or any(b <= 0 for b in self.bandwidths):
            raise ValueError(f"bandwidths must be a nonempty list of positive reals: {self.bandwidths}")
        if self.family != "gaussian-rbf":
            raise ValueError(f"unsupported kernel family {self.family!r}")


@dataclass
class PipelinePair:
    complete_fused: Tensor
    complete_logits: Tensor
    degraded_fused: Tensor
    degraded_logits: Tensor

    def __post_init__(self):
        if self.complete_fused.shape != self.degraded_fused.shape:
            raise DimensionError(f"fused shapes differ: {self.complete_fused.shape} vs {self.degraded_fused.shape}")
        if self.complete_logits.shape != self.degraded_logits.shape:
            raise DimensionError(f"logit shapes differ: {self.complete_logits.shape} vs {self.degraded_logits.shape}")


def _sq_dists(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return ((x[:, None, :] - y[None, :, :]) ** 2).sum(-1)


def median_heuristic(x, y, floor: float = 1e-12) -> KernelSpec:
    """Bandwidths {m/2, m, 2m} with m the median pairwise squared distance of the pooled batch.

    Computed on raw values, so no gradient flows through the bandwidth.
    """
    xd = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=float)
    yd = y.data if isinstance(y, Tensor) else np.asarray(y, dtype=float)
    z = np.concatenate([xd, yd], axis=0)
    d = _sq_dists(z, z)
    iu = np.triu_indices(len(z), k=1)
    m = float(np.median(d[iu])) if iu[0].size else 1.0
    m = max(m, floor)
    return KernelSpec((0.5 * m, m, 2.0 * m))


def _kernel_mean(a: Tensor, b: Tensor, kernel: KernelSpec) -> Tensor:
    diff = a.reshape(a.shape[0], 1, a.shape[1]) - b.reshape(1, b.shape[0], b.shape[1])
    d2 = (diff * diff).sum(axis=-1)
    total = None
    for s in kernel.bandwidths:
        k = exp(d2.scale(-1.0 / (2.0 * s))).mean()
        total = k if total is None else total + k
    return total


def mmd_loss(x: Tensor, y: Tensor, kernel: KernelSpec | None = None) -> Tensor:
    """Biased (V-statistic) squared MMD, summed over the kernel's bandwidths."""
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise DimensionError(f"MMD needs [B, F] operands of equal width, got {x.shape}, {y.shape}")
    if kernel is None:
        kernel = median_heuristic(x, y)
    return _kernel_mean(x, x, kernel) + _kernel_mean(y, y, kernel) - _kernel_mean(x, y, kernel).scale(2.0)


def js_divergence(p1: Tensor, p2: Tensor) -> Tensor:
    """Row-averaged Jensen-Shannon divergence (natural log) between probability rows."""
    if p1.shape != p2.shape:
        raise DimensionError(f"JS operands differ in shape: {p1.shape} vs {p2.shape}")
    for name, p in (("p1", p1), ("p2", p2)):
        dev = np.abs(p.data.sum(axis=-1) - 1.0)
        if (dev > 1e-6).any() or (p.data < 0).any():
            raise ValueError(f"{name} rows are not probability vectors (max |sum-1| = {dev.max():.3g})")
    q = (p1 + p2).scale(0.5)
    log_q = log(clamp_min(q, PROB_FLOOR))
    kl1 = (p1 * (log(clamp_min(p1, PROB_FLOOR)) - log_q)).sum(axis=-1)
    kl2 = (p2 * (log(clamp_min(p2, PROB_FLOOR)) - log_q)).sum(axis=-1)
    return (kl1 + kl2).scale(0.5).mean()


def distillation_losses(pair: PipelinePair, kernel: KernelSpec | None = None) -> tuple[Tensor, Tensor]:
    """(MMD on fused features, JS on predictive distributions); the complete side is a detached teacher."""
    teacher_fused = pair.complete_fused.detach()
    teacher_logits = pair.complete_logits.detach()
    l_feat = mmd_loss(pair.degraded_fused, teacher_fused, kernel)
    l_logit = js_divergence(softmax(pair.degraded_logits, axis=-1), softmax(teacher_logits, axis=-1))
    return l_feat, l_logit
