"""Large-margin few-shot learning: prototypical and graph networks with margin losses."""

from .config import ExperimentConfig, TrainConfig, load_experiment
from .data import Dataset, Episode, EpisodeSpec, gen_gaussian_tasks, sample_episode
from .losses import LossConfig, large_margin_loss, total_loss, triplet_loss
from .train import FewShotModel, TrainingDivergence, evaluate, train_episodic

__version__ = "0.1.0"

__all__ = [
    "Dataset", "Episode", "EpisodeSpec", "ExperimentConfig", "FewShotModel", "LossConfig",
    "TrainConfig", "TrainingDivergence", "evaluate", "gen_gaussian_tasks", "large_margin_loss",
    "load_experiment", "sample_episode", "total_loss", "train_episodic", "triplet_loss",
]
