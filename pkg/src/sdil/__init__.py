"""Sequential recommender combining static and dynamic user interest with reactive temporal excitation."""
from .data import Dataset, load_dataset, make_splits, prepare
from .metrics import RankingReport, compute_metrics, rank_candidates
from .model import SDIL, VARIANTS, ModelConfig
from .train import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = ["Dataset", "load_dataset", "make_splits", "prepare", "RankingReport", "compute_metrics",
           "rank_candidates", "SDIL", "VARIANTS", "ModelConfig", "TrainConfig", "evaluate", "train"]
