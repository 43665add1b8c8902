"""Heterogeneous graph embedding with metapath-based subgraphs."""
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config, parse_config
from .datasets import Dataset, load_dataset, planted_block, planted_partition
from .estimator import HMSGClassifier, HMSGLinkPredictor
from .hetgraph import HeteroGraph, Metapath, Schema, build_graph, parse_metapath
from .model import FeatureStore, HmsgModel, ModelConfig, forward
from .subgraph import MetapathSubgraph, SubgraphSet, generate_all, generate_subgraph
from .train import LabelStore, PairSet, TrainConfig, embed, train_semi_supervised, train_unsupervised

__version__ = "0.1.0"

__all__ = [
    "Dataset", "FeatureStore", "HMSGClassifier", "HMSGLinkPredictor", "HeteroGraph", "HmsgModel",
    "LabelStore", "Metapath", "MetapathSubgraph", "ModelConfig", "PairSet", "RunConfig", "Schema",
    "SubgraphSet", "TrainConfig", "build_graph", "embed", "forward", "generate_all", "generate_subgraph",
    "load_checkpoint", "load_config", "load_dataset", "parse_config", "parse_metapath", "planted_block",
    "planted_partition", "save_checkpoint", "train_semi_supervised", "train_unsupervised",
]
