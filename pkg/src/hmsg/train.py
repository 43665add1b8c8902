"""Losses, negative sampling, Adam and the two full-batch training loops."""
from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tape, Tensor
from .exceptions import (
    ConfigError,
    EmptyMask,
    EmptyPairs,
    InsufficientNonEdges,
    LabelOutOfRange,
    NonFiniteGradient,
    SamplingCapExceeded,
    ShapeMismatch,
)
from .hetgraph import HeteroGraph, Metapath, parse_metapath
from .model import FeatureStore, HmsgModel, ModelConfig, forward, logits
from .subgraph import SubgraphSet, generate_all

log = logging.getLogger(__name__)

UNLABELED = -1


@dataclass
class LabelStore:
    node_type: str
    labels: np.ndarray  # class id per node, UNLABELED where unknown
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    n_classes: int = 0

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.train, self.val, self.test = (np.asarray(m, dtype=np.int64) for m in (self.train, self.val, self.test))
        if not self.n_classes:
            known = self.labels[self.labels != UNLABELED]
            self.n_classes = int(known.max()) + 1 if known.size else 0
        sets = [set(self.train.tolist()), set(self.val.tolist()), set(self.test.tolist())]
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise ConfigError("train/val/test masks overlap")
        for m in (self.train, self.val, self.test):
            if m.size and (m.min() < 0 or m.max() >= len(self.labels)):
                raise LabelOutOfRange("split index outside the labeled node range")
            if m.size and np.any((self.labels[m] < 0) | (self.labels[m] >= self.n_classes)):
                raise LabelOutOfRange("split contains unlabeled nodes or out-of-range classes")


@dataclass
class PairSet:
    """Link-prediction pairs over one relation, already split.

    Validation and test negatives are fixed; training negatives are drawn
    afresh each epoch.
    """

    relation: str
    train_pos: np.ndarray
    val_pos: np.ndarray
    test_pos: np.ndarray
    val_neg: np.ndarray
    test_neg: np.ndarray

    def __post_init__(self):
        for name in ("train_pos", "val_pos", "test_pos", "val_neg", "test_neg"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.int64).reshape(-1, 2))

    def held_out(self) -> np.ndarray:
        return np.concatenate([self.val_pos, self.test_pos])


@dataclass
class TrainConfig:
    lr: float = 0.005
    weight_decay: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_epochs: int = 1000
    patience: int = 30
    seed: int = 0
    loss_reduction: str = "mean"
    record_time: bool = False


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    best_metric: float | None = None
    best_epoch: int = 0
    patience_counter: int = 0
    rng: np.random.Generator | None = None

    @classmethod
    def for_params(cls, params: Sequence[Parameter], seed: int = 0) -> "TrainState":
        return cls(
            m={p.name: np.zeros_like(p.data) for p in params},
            v={p.name: np.zeros_like(p.data) for p in params},
            rng=np.random.default_rng([seed, 1]),
        )


# --------------------------------------------------------------------- losses

def cross_entropy_loss(logit: Tensor, labels: LabelStore | np.ndarray, mask, reduction: str = "mean") -> Tensor:
    mask = np.asarray(mask, dtype=np.int64)
    if mask.size == 0:
        raise EmptyMask("cross-entropy mask is empty")
    y = labels.labels if isinstance(labels, LabelStore) else np.asarray(labels, dtype=np.int64)
    if mask.max() >= logit.shape[0] or mask.min() < 0:
        raise ShapeMismatch("mask index beyond logits rows")
    target = y[mask]
    if np.any((target < 0) | (target >= logit.shape[1])):
        raise LabelOutOfRange("label outside [0, n_classes)")
    picked = ad.log_softmax(logit, axis=1)[(mask, target)]
    total = ad.sum_(picked)
    if reduction == "sum":
        return ad.mul(total, -1.0)
    return ad.div(total, -float(mask.size))


def negative_sampling_loss(z_src: Tensor, z_dst: Tensor, positives, negatives, reduction: str = "mean") -> Tensor:
    """``-sum log s(z_v.z_u) - sum log s(-z_v.z_u')``, divided by the positive count under ``mean``."""
    pos = np.asarray(positives, dtype=np.int64).reshape(-1, 2)
    neg = np.asarray(negatives, dtype=np.int64).reshape(-1, 2)
    if len(pos) == 0:
        raise EmptyPairs("no positive pairs")
    for arr in (pos, neg):
        if len(arr) and (arr[:, 0].max() >= z_src.shape[0] or arr[:, 1].max() >= z_dst.shape[0] or arr.min() < 0):
            raise ShapeMismatch("pair index out of range")
    pos_score = ad.sum_(ad.mul(ad.row_gather(z_src, pos[:, 0]), ad.row_gather(z_dst, pos[:, 1])), axis=1)
    total = ad.sum_(ad.log_sigmoid(pos_score))
    if len(neg):
        neg_score = ad.sum_(ad.mul(ad.row_gather(z_src, neg[:, 0]), ad.row_gather(z_dst, neg[:, 1])), axis=1)
        total = ad.add(total, ad.sum_(ad.log_sigmoid(ad.mul(neg_score, -1.0))))
    if reduction == "sum":
        return ad.mul(total, -1.0)
    return ad.div(total, -float(len(pos)))


def sample_negatives(graph: HeteroGraph, relation: str, k: int, rng: np.random.Generator,
                     cap: int | None = None) -> np.ndarray:
    """``k`` i.i.d. uniform non-edges of ``relation`` by rejection sampling."""
    adj = graph.adjacency(relation)
    n_src, n_dst = adj.shape
    n_non = n_src * n_dst - adj.nnz
    if n_non < max(k, 1):
        raise InsufficientNonEdges(f"relation {relation} has {n_non} non-edges, need {k}")
    if k <= 0:
        return np.empty((0, 2), dtype=np.int64)
    if cap is None:
        cap = int(np.ceil(20 * k * (n_src * n_dst) / n_non)) + 1000
    codes = set((np.repeat(np.arange(n_src), np.diff(adj.indptr)) * n_dst + adj.indices).tolist())
    out = np.empty((k, 2), dtype=np.int64)
    filled, drawn = 0, 0
    while filled < k:
        if drawn >= cap:
            raise SamplingCapExceeded(f"drew {drawn} candidates, found {filled}/{k} non-edges")
        batch = min(max(2 * (k - filled), 64), cap - drawn)
        u = rng.integers(0, n_src, size=batch)
        v = rng.integers(0, n_dst, size=batch)
        drawn += batch
        ok = np.fromiter(((a * n_dst + b) not in codes for a, b in zip(u.tolist(), v.tolist())), bool, batch)
        take = min(int(ok.sum()), k - filled)
        out[filled : filled + take, 0] = u[ok][:take]
        out[filled : filled + take, 1] = v[ok][:take]
        filled += take
    return out


# ------------------------------------------------------------------ optimizer

def adam_step(params: Sequence[Parameter], grads: dict[str, np.ndarray], state: TrainState, lr: float = 0.005,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """One Adam update in place; weight decay is an L2 term added to the gradient."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p in params:
        g = grads[p.name]
        if g.shape != p.data.shape:
            raise ShapeMismatch(f"gradient for {p.name} has shape {g.shape}, expected {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"gradient for {p.name} is not finite")
        if weight_decay:
            g = g + weight_decay * p.data
        m = state.m.setdefault(p.name, np.zeros_like(p.data))
        v = state.v.setdefault(p.name, np.zeros_like(p.data))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ------------------------------------------------------------------- history

@dataclass
class HistoryRow:
    epoch: int
    train_loss: float
    val_metric: float
    elapsed_ms: int = 0


def history_csv(rows: Sequence[HistoryRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_loss", "val_metric", "elapsed_ms"])
    for r in rows:
        w.writerow([r.epoch, repr(float(r.train_loss)), repr(float(r.val_metric)), int(r.elapsed_ms)])
    return buf.getvalue()


def read_history(path: str | Path) -> list[HistoryRow]:
    with open(path, newline="") as fh:
        return [
            HistoryRow(int(r["epoch"]), float(r["train_loss"]), float(r["val_metric"]), int(r["elapsed_ms"]))
            for r in csv.DictReader(fh)
        ]


@dataclass
class TrainResult:
    model: HmsgModel
    subgraphs: SubgraphSet
    history: list[HistoryRow]
    best_epoch: int
    best_metric: float
    graph: HeteroGraph

    def history_csv(self) -> str:
        return history_csv(self.history)


# ------------------------------------------------------------------- loops

def _resolve(metapaths, graph: HeteroGraph) -> list[Metapath]:
    return [m if isinstance(m, Metapath) else parse_metapath(m, graph.schema) for m in metapaths]


def _early_stop(state: TrainState, metric: float, higher_is_better: bool, patience: int, model: HmsgModel,
                best_state: dict) -> bool:
    """Update best-so-far bookkeeping; True when training should stop."""
    better = state.best_metric is None or (metric > state.best_metric if higher_is_better else metric < state.best_metric)
    if better:
        state.best_metric = metric
        state.best_epoch = state.epoch
        state.patience_counter = 0
        best_state.clear()
        best_state.update(model.state_dict())
        return False
    if state.patience_counter >= patience:
        return True
    state.patience_counter += 1
    return False


def _run_loop(model, tcfg: TrainConfig, epoch_fn, val_fn, higher_is_better: bool) -> tuple[list[HistoryRow], TrainState]:
    params = model.trainable()
    state = TrainState.for_params(params, tcfg.seed)
    history: list[HistoryRow] = []
    best_state: dict = {}
    t0 = time.perf_counter()
    for epoch in range(1, tcfg.max_epochs + 1):
        state.epoch = epoch
        with Tape() as tape:
            loss = epoch_fn(state.rng)
        grads = ad.backward(tape, loss, params)
        tape.clear()
        adam_step(params, grads, state, tcfg.lr, tcfg.beta1, tcfg.beta2, tcfg.eps, tcfg.weight_decay)
        metric = val_fn()
        elapsed = int((time.perf_counter() - t0) * 1000) if tcfg.record_time else 0
        history.append(HistoryRow(epoch, float(loss.data), float(metric), elapsed))
        if _early_stop(state, metric, higher_is_better, tcfg.patience, model, best_state):
            log.info("early stop at epoch %d (best %d)", epoch, state.best_epoch)
            break
    if best_state:
        model.load_state_dict(best_state)
    return history, state


def train_semi_supervised(graph: HeteroGraph, features: FeatureStore, labels: LabelStore, metapaths,
                          model_config: ModelConfig | None = None,
                          train_config: TrainConfig | None = None) -> TrainResult:
    """Cross-entropy on the train mask; early stopping on validation loss."""
    mcfg = model_config or ModelConfig()
    tcfg = train_config or TrainConfig()
    mps = _resolve(metapaths, graph)
    subgraphs = generate_all(graph, mps)
    target = labels.node_type
    if target not in subgraphs.by_type:
        raise ConfigError(f"no metapath starts at labeled type {target}")
    if len(labels.val) == 0:
        raise EmptyMask("validation mask is empty")
    model = HmsgModel.build(mcfg, features, subgraphs, labels.n_classes, target)

    def epoch_fn(rng):
        res = forward(subgraphs, features, model, training=True, rng=rng)
        return cross_entropy_loss(logits(res, model), labels, labels.train, tcfg.loss_reduction)

    def val_fn():
        with ad.no_grad():
            res = forward(subgraphs, features, model, training=False)
            return float(cross_entropy_loss(logits(res, model), labels, labels.val, tcfg.loss_reduction).data)

    history, state = _run_loop(model, tcfg, epoch_fn, val_fn, higher_is_better=False)
    return TrainResult(model, subgraphs, history, state.best_epoch, state.best_metric, graph)


def train_unsupervised(graph: HeteroGraph, features: FeatureStore, pairs: PairSet, metapaths,
                       model_config: ModelConfig | None = None,
                       train_config: TrainConfig | None = None) -> TrainResult:
    """Negative-sampling reconstruction loss; early stopping on validation AUC.

    Validation and test positives are removed from the message-passing graph
    and from the pool negatives are drawn from.
    """
    from .evalkit import auc_ap, pair_scores

    mcfg = model_config or ModelConfig()
    tcfg = train_config or TrainConfig()
    if len(pairs.train_pos) == 0:
        raise EmptyPairs("no training positives")
    train_graph = graph.without_edges(pairs.relation, pairs.held_out())
    src_t, dst_t = graph.schema.endpoints(pairs.relation)
    mps = _resolve(metapaths, graph)
    subgraphs = generate_all(train_graph, mps)
    for t in (src_t, dst_t):
        if t not in subgraphs.by_type:
            raise ConfigError(f"link prediction needs a metapath starting at {t}")
    model = HmsgModel.build(mcfg, features, subgraphs)
    n_pos = len(pairs.train_pos)

    def epoch_fn(rng):
        neg = sample_negatives(train_graph, pairs.relation, n_pos, rng)
        res = forward(subgraphs, features, model, training=True, rng=rng)
        return negative_sampling_loss(res.embeddings[src_t], res.embeddings[dst_t], pairs.train_pos, neg,
                                      tcfg.loss_reduction)

    val_pairs = np.concatenate([pairs.val_pos, pairs.val_neg])
    val_labels = np.r_[np.ones(len(pairs.val_pos)), np.zeros(len(pairs.val_neg))]

    def val_fn():
        with ad.no_grad():
            res = forward(subgraphs, features, model, training=False)
        scores = pair_scores(res.embeddings[src_t].data, res.embeddings[dst_t].data, val_pairs)
        return auc_ap(scores, val_labels).auc

    history, state = _run_loop(model, tcfg, epoch_fn, val_fn, higher_is_better=True)
    return TrainResult(model, subgraphs, history, state.best_epoch, state.best_metric, train_graph)


def embed(model: HmsgModel, subgraphs: SubgraphSet, features: FeatureStore) -> dict[str, np.ndarray]:
    """Evaluation-mode embeddings for every target type."""
    with ad.no_grad():
        res = forward(subgraphs, features, model, training=False)
    return {t: z.data.copy() for t, z in res.embeddings.items()}
