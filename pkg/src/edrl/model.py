"""The full network and one forward pipeline over a SampleBatch."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import dilr, distill, eprl
from .config import EdrlConfig
from .data import M1, M2, SampleBatch
from .eprl import EssencePointBank, GuidingTokens, UnusableInputError
from .nn import Attention, Mlp, ModalityEncoder, Module
from .tensor import RngState, Tensor, concat, cosine_similarity, log_softmax, softmax


class EdrlModel(Module):
    """Encoders, essence-point bank, realignment and classifier, gated by the ablation switches."""

    def __init__(self, cfg: EdrlConfig, rng: RngState):
        cfg.validate()
        self.cfg = cfg
        d = cfg.width
        raw = (cfg.raw_width_m1, cfg.raw_width_m2)
        self.encoders = [
            ModalityEncoder(m, raw[m], cfg.tokens, d, rng, cfg.heads, cfg.encoder_blocks) for m in (M1, M2)
        ]
        self.split = dilr.SplitSpec.from_ratio(d, cfg.common_ratio)
        if cfg.eprl_on:
            self.bank = EssencePointBank(cfg.n_classes, d, rng)
        if cfg.dilr_on:
            self.realigners = [dilr.Realigner(self.split, rng, cfg.heads) for _ in (M1, M2)]
            if cfg.eprl_on:
                self.guide_proj = dilr.GuidingProjection(self.split, rng)
            fused = 2 * self.split.unique + self.split.common
        else:
            if cfg.eprl_on:
                self.selectors = [Attention(d, d, d, rng, cfg.heads) for _ in (M1, M2)]
            fused = 2 * d
        self.fused_width = fused
        self.head = Mlp([fused, cfg.classifier_hidden, cfg.n_classes], rng)


@dataclass
class PipelineOutput:
    fused: Tensor
    logits: Tensor
    pooled: dict[int, Tensor]
    present: tuple[bool, bool]
    guiding: GuidingTokens | None = None
    realigned: tuple | None = None
    classes: np.ndarray | None = None
    extras: dict = field(default_factory=dict)


def _infer_with_mask(bank: EssencePointBank, pooled: dict[int, Tensor], available: np.ndarray) -> np.ndarray:
    """Best-matching class per sample over the modalities available to that sample."""
    best_sim = np.full(available.shape[0], -np.inf)
    best_cls = np.zeros(available.shape[0], dtype=np.int64)
    for m in sorted(pooled):
        sims = cosine_similarity(Tensor(pooled[m].data[:, None, :]), Tensor(bank.points.data[m][None])).data
        top = np.where(available[:, m], sims.max(axis=1), -np.inf)
        take = top > best_sim
        best_cls = np.where(take, sims.argmax(axis=1), best_cls)
        best_sim = np.where(take, top, best_sim)
    return best_cls


def forward_pipeline(model: EdrlModel, batch: SampleBatch, rng: RngState | None,
                     use_labels: bool, deterministic_guiding: bool | None = None) -> PipelineOutput:
    """encode -> pool -> guiding tokens -> split -> realign -> fuse -> classify.

    ``use_labels`` routes guiding tokens by ground truth; it is honoured in
    training only when ``cfg.guiding_source == "label"``, otherwise classes
    come from essence-point matching exactly as at inference.

    Missing modalities: with EPRL on, the absent token sequence is T copies
    of that modality's guiding token; otherwise the zero-filled payload is
    encoded as is.
    """
    cfg = model.cfg
    avail = batch.available
    if not avail.any(axis=1).all():
        raise UnusableInputError("a sample has no available modality")
    b = len(batch)
    if deterministic_guiding is None:
        deterministic_guiding = cfg.deterministic_guiding
    any_present = [bool(avail[:, m].any()) for m in (M1, M2)]
    all_present = (bool(avail[:, M1].all()), bool(avail[:, M2].all()))

    encoded: dict[int, Tensor] = {}
    for m in (M1, M2):
        if any_present[m] or not cfg.eprl_on:
            encoded[m] = model.encoders[m](Tensor(batch.tokens(m)))
    pooled = {m: encoded[m].mean(axis=1) for m in encoded if any_present[m]}

    guiding = None
    classes = None
    if cfg.eprl_on:
        if use_labels and cfg.guiding_source == "label":
            classes = batch.labels
        else:
            classes = _infer_with_mask(model.bank, pooled, avail)
        sample_rng = None if (deterministic_guiding and not use_labels) else rng
        guiding = eprl.guiding_for_batch(model.bank, classes, sample_rng)

    tokens: dict[int, Tensor] = {}
    for m in (M1, M2):
        if all_present[m] or not cfg.eprl_on:
            tokens[m] = encoded[m]
            continue
        sub = guiding.unique(m).reshape(b, 1, cfg.width).broadcast_to((b, cfg.tokens, cfg.width))
        if not any_present[m]:
            tokens[m] = sub
        else:
            mask = avail[:, m].astype(float).reshape(b, 1, 1)
            tokens[m] = encoded[m] * mask + sub * (1.0 - mask)

    realigned = None
    if cfg.dilr_on:
        parts = []
        for m in (M1, M2):
            com, uni = dilr.split_channels(tokens[m], model.split)
            proj = model.guide_proj if cfg.eprl_on else None
            parts.append(dilr.realign(model.realigners[m], com, uni, guiding, m, proj))
        realigned = tuple(parts)
        fused = dilr.fuse(*parts)
    elif cfg.eprl_on:
        feats = []
        for m in (M1, M2):
            q = guiding.unique(m).reshape(b, 1, cfg.width)
            feats.append(model.selectors[m](q, tokens[m], tokens[m]).reshape(b, cfg.width))
        fused = concat(feats, axis=-1)
    else:
        fused = concat([tokens[M1].mean(axis=1), tokens[M2].mean(axis=1)], axis=-1)

    logits = dilr.classify(fused, model.head)
    return PipelineOutput(fused, logits, pooled, all_present, guiding, realigned, classes)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    return -log_softmax(logits, axis=-1)[np.arange(len(labels)), labels].mean()


def total_loss(out: PipelineOutput, labels, teacher: PipelineOutput | None, cfg: EdrlConfig,
               model: EdrlModel | None = None) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of CE, matching, disentanglement and (with a teacher) distillation terms."""
    parts: dict[str, Tensor] = {"ce": cross_entropy(out.logits, labels)}
    if cfg.eprl_on and model is not None and cfg.w_match > 0:
        feats = {m: f for m, f in out.pooled.items() if out.present[m]}
        if feats:
            parts["match"] = eprl.matching_loss(feats, labels, model.bank)
    if cfg.dilr_on and out.realigned is not None and all(out.present) and cfg.w_dis > 0:
        res = dilr.disentangle_loss(*out.realigned, model.split if model else None,
                                    cfg.lambda_c, cfg.lambda_u, cfg.center_correlation)
        if res is not None:
            parts["dis"] = res[0]
    if teacher is not None and cfg.distill_on:
        pair = distill.PipelinePair(teacher.fused, teacher.logits, out.fused, out.logits)
        l_feat, l_logit = distill.distillation_losses(pair)
        parts["feat"] = l_feat
        parts["logit"] = l_logit
    weights = {"ce": cfg.w_ce, "match": cfg.w_match, "dis": cfg.w_dis, "feat": cfg.w_feat, "logit": cfg.w_logit}
    loss = None
    for name, term in parts.items():
        t = term.scale(weights[name])
        loss = t if loss is None else loss + t
    return loss, {k: v.item() for k, v in parts.items()}


def predict_proba(model: EdrlModel, batch: SampleBatch) -> np.ndarray:
    out = forward_pipeline(model, batch, None, use_labels=False, deterministic_guiding=True)
    return softmax(out.logits, axis=-1).data
