"""Two-pipeline training loop, evaluation under regimes, optimizers and checkpoints."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import container
from .config import EdrlConfig, Regime
from .data import SampleBatch, corrupt_missing, corrupt_noise
from .metrics import MetricsReport, compute_metrics
from .model import EdrlModel, forward_pipeline, total_loss
from .tensor import NonFiniteError, NumericDomainError, RngState, Tensor, no_grad, softmax

log = logging.getLogger(__name__)

CHECKPOINT_KIND = "checkpoint"


class DivergenceError(ArithmeticError):
    def __init__(self, step: int, detail: str):
        super().__init__(f"training diverged at step {step}: {detail}")
        self.step = step


class Adam:
    def __init__(self, params: list[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = params
        self.lr, self.eps, self.weight_decay = lr, eps, weight_decay
        self.b1, self.b2 = betas
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)


class Sgd:
    def __init__(self, params: list[Tensor], lr: float = 1e-2, weight_decay: float = 0.0):
        self.params, self.lr, self.weight_decay = params, lr, weight_decay

    def step(self) -> None:
        for p in self.params:
            if p.grad is not None:
                g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
                p.data = p.data - self.lr * g


def make_optimizer(cfg: EdrlConfig, params: list[Tensor]):
    if cfg.optimizer == "adam":
        return Adam(params, cfg.lr, cfg.betas, weight_decay=cfg.weight_decay)
    return Sgd(params, cfg.lr, cfg.weight_decay)


def apply_regime(batch: SampleBatch, regime: Regime, rng: RngState) -> SampleBatch:
    if regime.kind == "complete":
        return batch
    if regime.kind == "missing":
        return corrupt_missing(batch, regime.modality)
    return corrupt_noise(batch, regime.modality, regime.variance, rng)


def training_regimes(cfg: EdrlConfig) -> list[Regime]:
    """Degraded-pipeline regimes: the configured one when fixed, else the four-way mix."""
    if cfg.fixed_regime:
        return [Regime.parse(cfg.regime)]
    v = cfg.train_noise_var
    return [Regime("noise", 0, v), Regime("noise", 1, v), Regime("missing", 0), Regime("missing", 1)]


def eval_threads(cfg: EdrlConfig) -> int:
    if cfg.deterministic:
        return 1
    raw = os.environ.get("EDRL_THREADS")
    if raw is None:
        return 1
    n = int(raw)
    if n < 1:
        raise ValueError("EDRL_THREADS must be a positive integer")
    return n


def evaluate(model: EdrlModel, test: SampleBatch, regime: Regime | str, epoch: int = -1) -> MetricsReport:
    """Metrics on ``test`` after applying ``regime``; noise draws are seeded from the config seed."""
    if isinstance(regime, str):
        regime = Regime.parse(regime)
    if len(test) == 0:
        raise ValueError("cannot evaluate an empty test set")
    cfg = model.cfg
    batch = apply_regime(test, regime, RngState(cfg.seed).child(99))
    n_threads = eval_threads(cfg)
    chunks = np.array_split(np.arange(len(batch)), n_threads) if n_threads > 1 else [np.arange(len(batch))]
    chunks = [c for c in chunks if len(c)]

    def run(idx):
        sub = batch.subset(idx)
        g_rng = None if cfg.deterministic_guiding else RngState(cfg.seed).child(98, int(idx[0]))
        out = forward_pipeline(model, sub, g_rng, use_labels=False)
        return softmax(out.logits, axis=-1).data

    with no_grad():
        if len(chunks) == 1:
            probs = run(chunks[0])
        else:
            with ThreadPoolExecutor(max_workers=n_threads) as ex:
                probs = np.concatenate(list(ex.map(run, chunks)), axis=0)
    return compute_metrics(probs, batch.labels, str(regime), epoch)


@dataclass
class TrainResult:
    model: EdrlModel
    history: list[MetricsReport] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    rng: RngState | None = None
    epoch: int = 0

    def final(self, regime: str) -> MetricsReport:
        regime = str(Regime.parse(regime))
        return [r for r in self.history if r.regime == regime][-1]


def build_model(cfg: EdrlConfig) -> EdrlModel:
    return EdrlModel(cfg, RngState(cfg.seed).child(10))


def train_step(model: EdrlModel, opt, batch: SampleBatch, regime: Regime, rng: RngState) -> float:
    cfg = model.cfg
    model.zero_grad()
    teacher = forward_pipeline(model, batch, rng, use_labels=True)
    loss, _ = total_loss(teacher, batch.labels, None, cfg, model)
    if regime.kind != "complete":
        degraded = apply_regime(batch, regime, rng)
        student = forward_pipeline(model, degraded, rng, use_labels=True)
        loss_d, _ = total_loss(student, batch.labels, teacher, cfg, model)
        loss = loss + loss_d
    loss.backward()
    for p in model.parameters():
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise NonFiniteError("non-finite gradient")
    opt.step()
    return loss.item()


def train(cfg: EdrlConfig, train_set: SampleBatch, test_set: SampleBatch | None = None,
          eval_every_epoch: bool = True) -> TrainResult:
    """Fit a model; after every epoch evaluate each of ``cfg.eval_regimes`` (plus ``cfg.regime``)."""
    cfg.validate()
    model = build_model(cfg)
    opt = make_optimizer(cfg, model.parameters())
    rng = RngState(cfg.seed).child(20)
    regimes = training_regimes(cfg)
    eval_set = list(dict.fromkeys([str(Regime.parse(r)) for r in cfg.eval_regimes] + [str(Regime.parse(cfg.regime))]))
    result = TrainResult(model, rng=rng)
    n = len(train_set)
    n_batches = max(1, n // cfg.batch_size)
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for idx in np.array_split(order, n_batches):
            batch = train_set.subset(np.sort(idx))
            regime = regimes[int(rng.integers(0, len(regimes)))]
            try:
                loss = train_step(model, opt, batch, regime, rng)
            except (NonFiniteError, NumericDomainError) as exc:
                raise DivergenceError(step, str(exc)) from exc
            result.losses.append(loss)
            step += 1
        result.epoch = epoch + 1
        if test_set is not None and (eval_every_epoch or epoch == cfg.epochs - 1):
            for r in eval_set:
                result.history.append(evaluate(model, test_set, r, epoch + 1))
        log.info("epoch %d loss %.4f", epoch + 1, np.mean(result.losses[-n_batches:]))
    return result


def save_checkpoint(path, model: EdrlModel, rng: RngState | None = None, epoch: int = 0) -> None:
    named = dict(model.named_parameters())
    meta = {
        "config": model.cfg.to_dict(),
        "rng": rng.get_state() if rng is not None else None,
        "epoch": epoch,
        "parameters": list(named),
    }
    container.write(path, CHECKPOINT_KIND, meta, {k: v.data for k, v in named.items()})


def load_checkpoint(path) -> tuple[EdrlModel, dict]:
    meta, blobs = container.read(path, CHECKPOINT_KIND)
    cfg = EdrlConfig.from_dict(meta["config"])
    model = build_model(cfg)
    named = dict(model.named_parameters())
    if set(named) != set(blobs):
        raise container.DataFormatError("checkpoint parameters do not match the configured architecture")
    for name, p in named.items():
        if blobs[name].shape != p.data.shape:
            raise container.DataFormatError(f"parameter {name}: shape {blobs[name].shape} != {p.data.shape}")
        p.data = blobs[name].copy()
    return model, meta
