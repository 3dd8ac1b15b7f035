"""Run configuration and regime descriptors."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import MODALITIES

VARIANTS = {
    "I": (False, False),
    "II": (True, False),
    "III": (False, True),
    "IV": (True, True),
}


@dataclass(frozen=True)
class Regime:
    """``complete``, ``noise:<variance>:<M1|M2>`` or ``missing:<M1|M2>``."""

    kind: str = "complete"
    modality: int | None = None
    variance: float = 0.0

    @classmethod
    def parse(cls, text: str) -> "Regime":
        parts = text.strip().split(":")
        try:
            if parts == ["complete"]:
                return cls()
            if parts[0] == "missing" and len(parts) == 2:
                return cls("missing", MODALITIES[parts[1]])
            if parts[0] == "noise" and len(parts) == 3:
                var = float(parts[1])
                if var < 0:
                    raise ValueError
                return cls("noise", MODALITIES[parts[2]], var)
        except (KeyError, ValueError):
            pass
        raise ValueError(f"bad regime {text!r}; expected complete | noise:<var>:<M1|M2> | missing:<M1|M2>")

    def __str__(self) -> str:
        if self.kind == "complete":
            return "complete"
        name = f"M{self.modality + 1}"
        if self.kind == "missing":
            return f"missing:{name}"
        return f"noise:{self.variance:g}:{name}"


@dataclass
class EdrlConfig:
    # encoder / data geometry
    width: int = 32
    tokens: int = 8
    raw_width_m1: int = 16
    raw_width_m2: int = 16
    n_classes: int = 2
    heads: int = 2
    encoder_blocks: int = 2
    classifier_hidden: int = 32
    # channel split
    common_ratio: float = 0.4
    # loss weights
    w_ce: float = 1.0
    w_match: float = 0.5
    w_dis: float = 0.5
    w_feat: float = 0.25
    w_logit: float = 0.25
    lambda_c: float = 0.005
    lambda_u: float = 0.005
    # optimizer
    optimizer: str = "adam"
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    epochs: int = 30
    batch_size: int = 16
    seed: int = 0
    # regime and switches
    regime: str = "complete"
    fixed_regime: bool = False
    train_noise_var: float = 0.5
    eval_regimes: list[str] = field(default_factory=lambda: ["complete", "noise:0.5:M1", "missing:M2"])
    eprl_on: bool = True
    dilr_on: bool = True
    distill_on: bool = True
    deterministic_guiding: bool = True
    # Class routing for guiding tokens during training: "inferred" (essence-point
    # argmax, as at inference) or "label" (ground truth).
    guiding_source: str = "inferred"
    center_correlation: bool = False
    deterministic: bool = True

    def validate(self) -> None:
        for name in ("w_ce", "w_match", "w_dis", "w_feat", "w_logit", "lambda_c", "lambda_u", "lr", "weight_decay"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.dilr_on and self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 when DiLR is on")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.width % self.heads:
            raise ValueError("width must be divisible by the head count")
        if self.guiding_source not in ("inferred", "label"):
            raise ValueError(f"guiding_source must be 'inferred' or 'label', got {self.guiding_source!r}")
        Regime.parse(self.regime)
        for r in self.eval_regimes:
            Regime.parse(r)

    @property
    def variant(self) -> str:
        for name, flags in VARIANTS.items():
            if flags == (self.eprl_on, self.dilr_on):
                return name
        raise AssertionError("unreachable")

    def with_variant(self, name: str) -> "EdrlConfig":
        eprl, dilr = VARIANTS[name]
        return dataclasses.replace(self, eprl_on=eprl, dilr_on=dilr)

    def replace(self, **kw) -> "EdrlConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EdrlConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        if "eval_regimes" in d:
            d["eval_regimes"] = list(d["eval_regimes"])
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def load(cls, path) -> "EdrlConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))
