"""Training configuration and (anchor, positive, negatives) tuple sampling."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from persrep import errors
from persrep.dataset import ImageRecord, SyntheticPool

from .losses import LOSS_KINDS


@dataclass(frozen=True)
class TrainConfig:
    loss_kind: str = "infonce"
    temperature: float = 0.07
    n_pairs: int = 4500
    n_neg_per_anchor: int = 16
    epochs: int = 2
    batch_size: int = 16
    learning_rate: float = 3e-4
    seed: int = 0
    margin: float = 0.2
    include_positive_in_denominator: bool = True
    augment: bool = True
    lora_r: int = 16
    lora_alpha: float = 0.5
    lora_dropout: float = 0.3
    lora_targets: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise errors.ConfigError(f"loss_kind must be one of {LOSS_KINDS}")
        if self.temperature <= 0:
            raise errors.NonPositiveTemperature("temperature must be > 0")
        if self.n_pairs < 1 or self.epochs < 1 or self.batch_size < 1:
            raise errors.ConfigError("n_pairs, epochs and batch_size must be >= 1")
        if self.lora_targets is not None:
            object.__setattr__(self, "lora_targets", tuple(self.lora_targets))

    def to_json(self) -> dict:
        d = asdict(self)
        if d["lora_targets"] is not None:
            d["lora_targets"] = list(d["lora_targets"])
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass(frozen=True)
class TrainingPair:
    anchor: ImageRecord
    positive: ImageRecord
    negatives: tuple[ImageRecord, ...]

    def __post_init__(self):
        if self.anchor.split != "train":
            raise errors.TrainingError(f"anchor {self.anchor.id} is not a train image")
        if self.anchor.instance_id != self.positive.instance_id:
            raise errors.TrainingError("anchor and positive belong to different instances")
        if any(n.instance_id == self.anchor.instance_id for n in self.negatives):
            raise errors.TrainingError("a negative shares the anchor's instance id")


@dataclass(frozen=True)
class PairIndices:
    """Index form of sampled pairs: anchors into D_R, positives/negatives into the pool."""
    anchor: np.ndarray     # (n,)
    positive: np.ndarray   # (n,)
    negatives: np.ndarray  # (n, k)


def sample_pair_indices(n_real: int, n_pos: int, n_negs: int, config: TrainConfig, rng_seed: int) -> PairIndices:
    if n_pos == 0:
        raise errors.EmptyPool("synthetic pool has no positives")
    k = config.n_neg_per_anchor
    if n_negs < k:
        raise errors.InsufficientNegatives(f"{n_negs} negatives available, {k} needed per anchor")
    rng = np.random.default_rng(rng_seed)
    n = config.n_pairs
    anchor = np.arange(n) % n_real
    positive = rng.integers(0, n_pos, size=n)
    # per-pair draw without replacement: top-k of iid uniforms
    negatives = np.argsort(rng.random((n, n_negs)), axis=1)[:, :k] if k else np.zeros((n, 0), int)
    return PairIndices(anchor, positive, negatives)


def sample_pairs(d_r: Sequence[ImageRecord], pool: SyntheticPool, config: TrainConfig,
                 rng_seed: int) -> list[TrainingPair]:
    """``config.n_pairs`` tuples; anchors cycle over ``d_r``, positives drawn with replacement."""
    idx = sample_pair_indices(len(d_r), len(pool.positives), len(pool.negatives), config, rng_seed)
    return [TrainingPair(d_r[a], pool.positives[p], tuple(pool.negatives[j] for j in negs))
            for a, p, negs in zip(idx.anchor, idx.positive, idx.negatives)]
