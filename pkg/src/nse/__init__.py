"""Implicit-feedback CF training with point-, line- and area-wise negative sampling."""

from .dataset import (
    BipartiteGraph,
    InteractionDataset,
    PopularityTable,
    build_graph,
    load_interactions,
    popularity_distribution,
)
from .encoder import EmbeddingModel, LayerStack, propagate, propagate_adjoint, pool_layers
from .evaluation import MetricsReport, evaluate_all, evaluate_stack
from .samplers import SamplerConfig, SyntheticNegative, sample_negatives
from .training import TrainConfig, Trainer, train

__version__ = "0.1.0"

__all__ = [
    "BipartiteGraph", "InteractionDataset", "PopularityTable", "build_graph", "load_interactions",
    "popularity_distribution", "EmbeddingModel", "LayerStack", "propagate", "propagate_adjoint",
    "pool_layers", "MetricsReport", "evaluate_all", "evaluate_stack", "SamplerConfig",
    "SyntheticNegative", "sample_negatives", "TrainConfig", "Trainer", "train",
]
