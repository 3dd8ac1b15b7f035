"""Synthetic two-modality data with planted common/unique factors, corruptions, file I/O."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import container
from .tensor import RngState

M1, M2 = 0, 1
MODALITIES = {"M1": M1, "M2": M2}


@dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int = 2
    samples_per_class: int = 200
    tokens: int = 8
    width_m1: int = 16
    width_m2: int = 16
    common_dim: int = 4
    unique_dim: int = 4
    snr: float = 10.0
    seed: int = 0
    # Distance between class means (mean pairwise, per factor block).
    common_separation: float = 5.0
    unique_separation: float = 1.2
    test_fraction: float = 0.2
    nonlinear: bool = False

    def validate(self) -> None:
        ints = ("n_classes", "samples_per_class", "tokens", "width_m1", "width_m2", "common_dim", "unique_dim")
        for name in ints:
            if getattr(self, name) <= 0:
                raise ValueError(f"degenerate spec: {name} must be positive, got {getattr(self, name)}")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if self.snr <= 0:
            raise ValueError("snr must be positive")
        if self.common_dim + self.unique_dim > self.tokens * min(self.width_m1, self.width_m2):
            raise ValueError("factor dimensions exceed the token payload")
        if self.common_dim > min(self.width_m1, self.width_m2) or self.unique_dim > min(self.width_m1, self.width_m2):
            raise ValueError("factor dimensions must not exceed raw widths")
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie in (0, 1)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synthetic spec fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SampleBatch:
    m1: np.ndarray  # [B, T, W1]
    m2: np.ndarray  # [B, T, W2]
    labels: np.ndarray  # [B] int
    available: np.ndarray  # [B, 2] bool
    noise_var: np.ndarray = field(default_factory=lambda: np.zeros(2))
    factors: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.available = np.asarray(self.available, dtype=bool)
        self.noise_var = np.asarray(self.noise_var, dtype=np.float64)
        if not self.available.any(axis=1).all():
            raise ValueError("every sample needs at least one available modality")

    def __len__(self) -> int:
        return len(self.labels)

    def tokens(self, modality: int) -> np.ndarray:
        return self.m1 if modality == M1 else self.m2

    def present(self, modality: int) -> bool:
        """True when the modality is available on every sample of the batch."""
        return bool(self.available[:, modality].all())

    def subset(self, idx) -> "SampleBatch":
        return SampleBatch(
            self.m1[idx], self.m2[idx], self.labels[idx], self.available[idx],
            self.noise_var.copy(), {k: v[idx] for k, v in self.factors.items()},
        )

    def copy(self) -> "SampleBatch":
        return SampleBatch(
            self.m1.copy(), self.m2.copy(), self.labels.copy(), self.available.copy(),
            self.noise_var.copy(), {k: v.copy() for k, v in self.factors.items()},
        )


def _class_means(n_classes: int, dim: int, separation: float, rng: RngState) -> np.ndarray:
    raw = rng.normal((n_classes, dim))
    raw -= raw.mean(axis=0, keepdims=True)
    diffs = raw[:, None, :] - raw[None, :, :]
    iu = np.triu_indices(n_classes, k=1)
    mean_dist = np.linalg.norm(diffs, axis=-1)[iu].mean()
    if separation == 0 or mean_dist == 0:
        return np.zeros((n_classes, dim))
    return raw * (separation / mean_dist)


def _mixing_map(n_factors: int, out: int, rng: RngState) -> np.ndarray:
    while True:
        a = rng.normal((n_factors, out), scale=1.0 / np.sqrt(n_factors))
        if np.linalg.matrix_rank(a) == n_factors:
            return a


def generate(spec: SyntheticSpec) -> tuple[SampleBatch, SampleBatch]:
    """Draw the dataset and split it 80/20 (by default) with a seeded shuffle.

    Per sample of class c: z_com ~ N(mu_c, I), z_uni^m ~ N(mu_c^m, I); each
    modality's tokens are a fixed full-rank linear map of [z_com, z_uni^m]
    plus N(0, 1/snr^2) observation noise.  Sample i draws from its own
    substream (seed, 1, i), so results do not depend on generation order.
    """
    spec.validate()
    root = RngState(spec.seed)
    structure = root.child(0)
    k, dc, du, t = spec.n_classes, spec.common_dim, spec.unique_dim, spec.tokens
    mu_com = _class_means(k, dc, spec.common_separation, structure)
    mu_uni = [_class_means(k, du, spec.unique_separation, structure) for _ in range(2)]
    widths = (spec.width_m1, spec.width_m2)
    maps = [_mixing_map(dc + du, t * w, structure) for w in widths]

    n = k * spec.samples_per_class
    labels = np.repeat(np.arange(k), spec.samples_per_class)
    z_com = np.empty((n, dc))
    z_uni = [np.empty((n, du)), np.empty((n, du))]
    obs = [np.empty((n, t, w)) for w in widths]
    noise_std = 1.0 / spec.snr
    for i in range(n):
        r = root.child(1, i)
        c = labels[i]
        z_com[i] = mu_com[c] + r.normal((dc,))
        for m in (M1, M2):
            z_uni[m][i] = mu_uni[m][c] + r.normal((du,))
        for m in (M1, M2):
            clean = (np.concatenate([z_com[i], z_uni[m][i]]) @ maps[m]).reshape(t, widths[m])
            if spec.nonlinear:
                clean = np.tanh(clean)
            obs[m][i] = clean + noise_std * r.normal((t, widths[m]))

    order = root.child(2).permutation(n)
    n_test = int(round(spec.test_fraction * n))
    test_idx, train_idx = np.sort(order[:n_test]), np.sort(order[n_test:])
    full = SampleBatch(
        obs[M1], obs[M2], labels, np.ones((n, 2), dtype=bool),
        factors={"common": z_com, "unique_m1": z_uni[M1], "unique_m2": z_uni[M2]},
    )
    return full.subset(train_idx), full.subset(test_idx)


def corrupt_missing(batch: SampleBatch, modality: int) -> SampleBatch:
    """Copy of ``batch`` with ``modality`` flagged missing and its payload zeroed."""
    if modality not in (M1, M2):
        raise ValueError(f"unknown modality {modality}")
    other = 1 - modality
    if not batch.available[:, other].all():
        raise ValueError(f"cannot remove M{modality + 1}: it is the last available modality for some samples")
    out = batch.copy()
    out.available[:, modality] = False
    if modality == M1:
        out.m1 = np.zeros_like(out.m1)
    else:
        out.m2 = np.zeros_like(out.m2)
    return out


def corrupt_noise(batch: SampleBatch, modality: int, variance: float, rng: RngState) -> SampleBatch:
    """Copy of ``batch`` with i.i.d. N(0, variance) added to one modality's tokens."""
    if variance < 0:
        raise ValueError(f"noise variance must be non-negative, got {variance}")
    if modality not in (M1, M2):
        raise ValueError(f"unknown modality {modality}")
    out = batch.copy()
    if variance == 0:
        return out
    x = out.tokens(modality)
    noisy = x + rng.normal(x.shape, scale=float(np.sqrt(variance)))
    if modality == M1:
        out.m1 = noisy
    else:
        out.m2 = noisy
    out.noise_var[modality] = variance
    return out


def _batch_blobs(prefix: str, b: SampleBatch) -> dict[str, np.ndarray]:
    blobs = {
        f"{prefix}/m1": b.m1,
        f"{prefix}/m2": b.m2,
        f"{prefix}/labels": b.labels.astype(np.float64),
        f"{prefix}/available": b.available.astype(np.float64),
        f"{prefix}/noise_var": b.noise_var,
    }
    for k in sorted(b.factors):
        blobs[f"{prefix}/factors/{k}"] = b.factors[k]
    return blobs


def save(path, batches: dict[str, SampleBatch], spec: SyntheticSpec | None = None) -> None:
    blobs: dict[str, np.ndarray] = {}
    for name in sorted(batches):
        blobs.update(_batch_blobs(name, batches[name]))
    meta = {
        "splits": {name: len(batches[name]) for name in sorted(batches)},
        "spec": spec.to_dict() if spec is not None else None,
        "seed": spec.seed if spec is not None else None,
    }
    container.write(path, "dataset", meta, blobs)


def load(path) -> tuple[dict[str, SampleBatch], SyntheticSpec | None]:
    meta, blobs = container.read(path, "dataset")
    out = {}
    for name in meta["splits"]:
        factors = {
            key.rsplit("/", 1)[1]: arr for key, arr in blobs.items() if key.startswith(f"{name}/factors/")
        }
        out[name] = SampleBatch(
            blobs[f"{name}/m1"],
            blobs[f"{name}/m2"],
            blobs[f"{name}/labels"].astype(np.int64),
            blobs[f"{name}/available"] != 0,
            blobs[f"{name}/noise_var"],
            factors,
        )
    spec = SyntheticSpec.from_dict(meta["spec"]) if meta.get("spec") else None
    return out, spec
