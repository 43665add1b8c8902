"""scikit-learn style wrappers.

Both estimators are transductive: ``X`` is the heterograph itself, given as a
:class:`~hmsg.datasets.Dataset` or a ``(HeteroGraph, FeatureStore)`` pair.
Node labels follow the scikit-learn semi-supervised convention, one entry per
target node with ``-1`` marking unlabeled nodes.
"""
from __future__ import annotations

import numpy as np
from scipy.special import softmax
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.model_selection import train_test_split
from sklearn.utils.validation import check_is_fitted, column_or_1d

from . import autodiff as ad
from .datasets import make_pair_splits
from .evalkit import pair_scores
from .exceptions import EmptyMask, LengthMismatch, SchemaMismatch, ShapeMismatch
from .hetgraph import HeteroGraph, parse_metapath
from .model import FeatureStore, ModelConfig, forward, logits
from .subgraph import generate_all
from .train import UNLABELED, LabelStore, PairSet, TrainConfig, embed, train_semi_supervised, train_unsupervised


def check_graph_data(X) -> tuple[HeteroGraph, FeatureStore]:
    """Accept a Dataset-like object or a (graph, features) pair."""
    if hasattr(X, "graph") and hasattr(X, "features"):
        graph, feats = X.graph, X.features
    elif isinstance(X, tuple) and len(X) == 2:
        graph, feats = X
    else:
        raise TypeError("X must be a Dataset or a (HeteroGraph, FeatureStore) pair")
    if not isinstance(graph, HeteroGraph) or not isinstance(feats, FeatureStore):
        raise TypeError("X must hold a HeteroGraph and a FeatureStore")
    for t, n in feats.node_counts.items():
        if t in graph.node_counts and graph.node_counts[t] != n:
            raise ShapeMismatch(f"features cover {n} {t} nodes, graph has {graph.node_counts[t]}")
    return graph, feats


class _HMSGBase(BaseEstimator):
    def _configs(self) -> tuple[ModelConfig, TrainConfig]:
        mcfg = ModelConfig(hidden_dim=self.hidden_dim, n_heads=self.n_heads,
                           subgraph_attn_dim=self.subgraph_attn_dim, aggregator=self.aggregator,
                           dropout=self.dropout, seed=self.random_state)
        tcfg = TrainConfig(lr=self.lr, weight_decay=self.weight_decay, max_epochs=self.max_epochs,
                           patience=self.patience, seed=self.random_state)
        return mcfg, tcfg

    def _subgraphs_for(self, X):
        graph, feats = check_graph_data(X)
        if graph.schema != self.schema_:
            raise SchemaMismatch("X has a different schema from the fitted graph")
        return generate_all(graph, [parse_metapath(m, graph.schema) for m in self.metapaths]), feats


class HMSGClassifier(ClassifierMixin, TransformerMixin, _HMSGBase):
    """Semi-supervised node classifier; ``transform`` returns target-node embeddings."""

    def __init__(self, metapaths=("PAP", "PSP", "PA", "PS"), target_type=None, hidden_dim=64, n_heads=8,
                 subgraph_attn_dim=128, aggregator="attention", dropout=0.6, lr=0.005, weight_decay=0.001,
                 max_epochs=1000, patience=30, validation_fraction=0.1, random_state=0):
        self.metapaths = metapaths
        self.target_type = target_type
        self.hidden_dim = hidden_dim
        self.n_heads = n_heads
        self.subgraph_attn_dim = subgraph_attn_dim
        self.aggregator = aggregator
        self.dropout = dropout
        self.lr = lr
        self.weight_decay = weight_decay
        self.max_epochs = max_epochs
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def fit(self, X, y):
        graph, feats = check_graph_data(X)
        mps = [parse_metapath(m, graph.schema) for m in self.metapaths]
        target = self.target_type or mps[0].target_type
        y = column_or_1d(y)
        if len(y) != graph.num_nodes(target):
            raise LengthMismatch(f"y has {len(y)} entries, graph has {graph.num_nodes(target)} {target} nodes")
        known = np.nonzero(y != UNLABELED)[0]
        if len(known) < 2:
            raise EmptyMask("need at least two labeled nodes")
        self.classes_, codes = np.unique(y[known], return_inverse=True)
        encoded = np.full(len(y), UNLABELED, dtype=np.int64)
        encoded[known] = codes
        # stratification needs at least one validation node per class
        n_val = max(int(round(self.validation_fraction * len(known))), len(self.classes_))
        if n_val >= len(known) - len(self.classes_) + 1:
            raise EmptyMask(f"{len(known)} labeled nodes are too few to split {len(self.classes_)} classes")
        train, val = train_test_split(known, test_size=n_val, stratify=codes, random_state=self.random_state)
        labels = LabelStore(target, encoded, np.sort(train), np.sort(val), [], len(self.classes_))
        mcfg, tcfg = self._configs()
        result = train_semi_supervised(graph, feats, labels, mps, mcfg, tcfg)
        self.model_ = result.model
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.schema_ = graph.schema
        self.target_type_ = target
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        subgraphs, feats = self._subgraphs_for(X)
        return embed(self.model_, subgraphs, feats)[self.target_type_]

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        subgraphs, feats = self._subgraphs_for(X)
        with ad.no_grad():
            res = forward(subgraphs, feats, self.model_, training=False)
            out = logits(res, self.model_).data
        return softmax(out, axis=1)

    def predict(self, X) -> np.ndarray:
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def score(self, X, y, sample_weight=None):
        """Accuracy over labeled nodes only."""
        y = column_or_1d(y)
        known = y != UNLABELED
        pred = self.predict(X)
        w = None if sample_weight is None else np.asarray(sample_weight)[known]
        return float(np.average(pred[known] == y[known], weights=w))


class HMSGLinkPredictor(_HMSGBase):
    """Unsupervised embeddings trained to reconstruct the edges of ``relation``.

    ``predict_proba(pairs)`` scores (source, destination) index pairs.
    """

    def __init__(self, metapaths=("UIU", "IUI", "UI", "IU"), relation="UI", hidden_dim=64, n_heads=8,
                 subgraph_attn_dim=128, aggregator="attention", dropout=0.6, lr=0.005, weight_decay=0.001,
                 max_epochs=1000, patience=30, validation_fraction=0.1, random_state=0):
        self.metapaths = metapaths
        self.relation = relation
        self.hidden_dim = hidden_dim
        self.n_heads = n_heads
        self.subgraph_attn_dim = subgraph_attn_dim
        self.aggregator = aggregator
        self.dropout = dropout
        self.lr = lr
        self.weight_decay = weight_decay
        self.max_epochs = max_epochs
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def fit(self, X, y=None):
        """Uses ``X.pairs`` when present, else holds out ``validation_fraction`` of the edges."""
        graph, feats = check_graph_data(X)
        pairs: PairSet | None = getattr(X, "pairs", None)
        if pairs is None or pairs.relation != self.relation:
            vf = self.validation_fraction
            pairs = make_pair_splits(graph, self.relation, (1.0 - vf, vf, 0.0), self.random_state)
        mcfg, tcfg = self._configs()
        result = train_unsupervised(graph, feats, pairs, self.metapaths, mcfg, tcfg)
        self.model_ = result.model
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.schema_ = graph.schema
        self.embeddings_ = embed(result.model, result.subgraphs, feats)
        return self

    def predict_proba(self, pairs) -> np.ndarray:
        check_is_fitted(self, "embeddings_")
        src, dst = self.schema_.endpoints(self.relation)
        return pair_scores(self.embeddings_[src], self.embeddings_[dst], pairs)
