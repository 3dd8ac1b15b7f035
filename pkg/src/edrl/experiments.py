"""Multi-seed runs, sweeps and post-training probes shared by the CLI and the test-suite."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import dilr
from .config import EdrlConfig
from .data import M1, M2, SampleBatch, SyntheticSpec, generate
from .model import EdrlModel, forward_pipeline
from .tensor import Tensor, no_grad
from .train import TrainResult, evaluate, train

log = logging.getLogger(__name__)

SWEEP_PARAMS = ("p", "noise_var")


def run_seed(cfg: EdrlConfig, spec: SyntheticSpec, seed: int) -> tuple[TrainResult, SampleBatch]:
    """Train on the dataset drawn with ``seed``; the model shares the same seed."""
    train_set, test_set = generate(_with_seed(spec, seed))
    return train(cfg.replace(seed=seed), train_set, test_set, eval_every_epoch=False), test_set


def _with_seed(spec: SyntheticSpec, seed: int) -> SyntheticSpec:
    d = spec.to_dict()
    d["seed"] = seed
    return SyntheticSpec.from_dict(d)


def realigned_features(model: EdrlModel, batch: SampleBatch) -> tuple[np.ndarray, np.ndarray]:
    """Re-joined [common | unique] realigned features per modality (needs DiLR)."""
    if not model.cfg.dilr_on:
        raise ValueError("realigned features exist only when DiLR is on")
    with no_grad():
        out = forward_pipeline(model, batch, None, use_labels=False, deterministic_guiding=True)
    r1, r2 = out.realigned
    return r1.joined().data, r2.joined().data


def correlation_on(model: EdrlModel, batch: SampleBatch) -> np.ndarray:
    f1, f2 = realigned_features(model, batch)
    with no_grad():
        c = dilr.correlation_matrix(Tensor(f1), Tensor(f2), center=model.cfg.center_correlation)
    return c.data


def disentanglement_gap(c: np.ndarray, common: int) -> float:
    """mean(diag C_com) - mean(|diag C_uni|)."""
    d = np.diag(c)
    return float(d[:common].mean() - np.abs(d[common:]).mean())


def embeddings(model: EdrlModel, batch: SampleBatch) -> np.ndarray:
    with no_grad():
        out = forward_pipeline(model, batch, None, use_labels=False, deterministic_guiding=True)
    return out.fused.data


@dataclass
class SweepRow:
    value: float
    seed: int
    acc: float
    auc: float | None
    f1: float

    def as_list(self) -> list:
        return [self.value, self.seed, self.acc, self.auc, self.f1]


def sweep(cfg: EdrlConfig, spec: SyntheticSpec, param: str, values: list[float], seeds: list[int],
          regime: str | None = None) -> list[SweepRow]:
    """One row per (value, seed).

    ``p`` retrains per value and scores the complete regime by default.
    ``noise_var`` trains once per seed and scores ``noise:<v>:M1`` at each value.
    """
    if param not in SWEEP_PARAMS:
        raise ValueError(f"unknown sweep parameter {param!r}; choose from {SWEEP_PARAMS}")
    if not values:
        raise ValueError("sweep needs at least one value")
    rows = []
    for seed in seeds:
        if param == "p":
            train_set, test_set = generate(_with_seed(spec, seed))
            for v in values:
                run_cfg = cfg.replace(seed=seed, common_ratio=float(v))
                res = train(run_cfg, train_set, None)
                rep = evaluate(res.model, test_set, regime or "complete", res.epoch)
                rows.append(SweepRow(float(v), seed, rep.accuracy, rep.auc, rep.f1))
                log.info("p=%g seed=%d acc=%.4f", v, seed, rep.accuracy)
        else:
            res, test_set = run_seed(cfg, spec, seed)
            mod = regime or "M1"
            for v in values:
                rep = evaluate(res.model, test_set, f"noise:{float(v)!r}:{mod}", res.epoch)
                rows.append(SweepRow(float(v), seed, rep.accuracy, rep.auc, rep.f1))
    return rows


def interior_maximum(accs: list[float]) -> bool:
    """Best interior value strictly above both endpoints."""
    if len(accs) < 3:
        return False
    return max(accs[1:-1]) > max(accs[0], accs[-1])


__all__ = [
    "run_seed",
    "realigned_features",
    "correlation_on",
    "disentanglement_gap",
    "embeddings",
    "SweepRow",
    "sweep",
    "interior_maximum",
    "M1",
    "M2",
]
