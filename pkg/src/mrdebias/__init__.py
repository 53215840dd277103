"""Multiple-robust debiased learning for missing-not-at-random ratings."""

from .data import RatingDataset, load_ratings, generate_semi_synthetic, sample_observation_mask
from .ensemble import ModelEnsemble
from .estimators import mr_loss, solve_eta
from .learning import TrainConfig, train, train_baseline

__version__ = "0.1.0"

__all__ = [
    "RatingDataset",
    "ModelEnsemble",
    "TrainConfig",
    "generate_semi_synthetic",
    "load_ratings",
    "mr_loss",
    "sample_observation_mask",
    "solve_eta",
    "train",
    "train_baseline",
]
