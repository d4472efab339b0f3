from .augment import AugmentParams, apply_augment, augment
from .losses import LOSS_KINDS, alt_loss, info_nce
from .sampling import TrainConfig, TrainingPair, sample_pairs
from .trainer import TrainResult, n_optimizer_steps, train_personalized

__all__ = [
    "AugmentParams", "LOSS_KINDS", "TrainConfig", "TrainResult", "TrainingPair", "alt_loss",
    "apply_augment", "augment", "info_nce", "n_optimizer_steps", "sample_pairs", "train_personalized",
]
