"""Anchor-guided feature generation for generalized zero-shot classification."""
from .clustering import ClusterConfig, PrototypeBank, fit_seen_prototypes, fit_unseen_prototypes, sinkhorn_assign
from .config import PipelineConfig
from .data import FeatureDataset, load_features, make_synthetic_benchmark, save_features
from .evaluation import EvalReport, SplitSpec, evaluate_gzsl, harmonic_mean
from .pipeline import run_pipeline
from .synthesis import GanConfig, train_gan

__version__ = "0.1.0"

__all__ = [
    "ClusterConfig", "EvalReport", "FeatureDataset", "GanConfig", "PipelineConfig", "PrototypeBank", "SplitSpec",
    "evaluate_gzsl", "fit_seen_prototypes", "fit_unseen_prototypes", "harmonic_mean", "load_features",
    "make_synthetic_benchmark", "run_pipeline", "save_features", "sinkhorn_assign", "train_gan",
]
