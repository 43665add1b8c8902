"""Glue between a RunConfig, a dataset on disk and the training/evaluation library."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import evalkit
from .checkpoint import load_checkpoint
from .config import RunConfig
from .datasets import Dataset, load_dataset, make_label_splits, make_pair_splits, pairs_from_json
from .exceptions import ConfigError, EmptyMask, ParseError
from .hetgraph import HeteroGraph, Metapath, parse_metapath
from .model import HmsgModel
from .subgraph import SubgraphSet, generate_all
from .train import LabelStore, TrainResult, embed, train_semi_supervised, train_unsupervised


def eval_rng(seed: int) -> np.random.Generator:
    # a stream independent of the training rng for the same seed
    return np.random.default_rng([seed, 2])


def select_metapaths(cfg: RunConfig, graph: HeteroGraph) -> list[Metapath]:
    mps = [parse_metapath(m, graph.schema) for m in cfg.metapaths]
    if cfg.ablation == "ho-only":
        mps = [m for m in mps if m.kind == "ho"]
        if not mps:
            raise ConfigError("ablation ho-only leaves no metapaths")
    return mps


def load_run_dataset(cfg: RunConfig, splits_file: Path | None = None) -> Dataset:
    """Load the configured dataset and settle its splits.

    Priority: an explicit ``splits_file`` (the one saved next to a checkpoint),
    then the dataset's own splits.json when ``use_dataset_splits`` is set,
    then fresh splits drawn from ``split_ratios`` and ``seed``.
    """
    cfg.validate()
    ds = load_dataset(cfg.dataset_path, cfg.target_type or None)
    if cfg.task == "node-class":
        if ds.labels is None:
            raise ConfigError("task node-class needs labels.tsv in the dataset")
        if cfg.target_type and ds.labels.node_type != cfg.target_type:
            raise ConfigError(f"labels are for {ds.labels.node_type}, config targets {cfg.target_type}")
        lab = ds.labels
        if splits_file is not None:
            obj = _read_json(splits_file)
            ds.labels = LabelStore(lab.node_type, lab.labels, obj["train"], obj["val"], obj["test"], lab.n_classes)
        elif not (cfg.use_dataset_splits and len(lab.train) and len(lab.val)):
            ds.labels = make_label_splits(lab, cfg.split_ratios, cfg.seed)
    else:
        cfg_rel = cfg.link_relation
        ds.graph.schema.endpoints(cfg_rel)
        if splits_file is not None:
            ds.pairs = pairs_from_json(_read_json(splits_file), ds.graph)
        elif not (cfg.use_dataset_splits and ds.pairs is not None and ds.pairs.relation == cfg_rel):
            ds.pairs = make_pair_splits(ds.graph, cfg_rel, cfg.split_ratios, cfg.seed)
        if ds.pairs.relation != cfg_rel:
            raise ConfigError(f"splits are for relation {ds.pairs.relation}, config wants {cfg_rel}")
    return ds


def _read_json(path: Path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(str(exc), path, exc.lineno) from None


def train_run(cfg: RunConfig, ds: Dataset) -> TrainResult:
    mps = select_metapaths(cfg, ds.graph)
    if cfg.task == "node-class":
        return train_semi_supervised(ds.graph, ds.features, ds.labels, mps, cfg.model_config(), cfg.train_config())
    return train_unsupervised(ds.graph, ds.features, ds.pairs, mps, cfg.model_config(), cfg.train_config())


def message_graph(cfg: RunConfig, ds: Dataset) -> HeteroGraph:
    """The graph messages pass over: held-out link positives are removed."""
    if cfg.task == "link-pred":
        return ds.graph.without_edges(ds.pairs.relation, ds.pairs.held_out())
    return ds.graph


@dataclass
class Restored:
    model: HmsgModel
    subgraphs: SubgraphSet
    dataset: Dataset

    def embeddings(self) -> dict[str, np.ndarray]:
        return embed(self.model, self.subgraphs, self.dataset.features)


def restore(cfg: RunConfig, checkpoint: Path) -> Restored:
    """Rebuild the trained model for ``cfg``; splits.json beside the checkpoint wins if present."""
    checkpoint = Path(checkpoint)
    side = checkpoint.parent / "splits.json"
    ds = load_run_dataset(cfg, side if side.is_file() else None)
    subgraphs = generate_all(message_graph(cfg, ds), select_metapaths(cfg, ds.graph))
    if cfg.task == "node-class":
        fresh = HmsgModel.build(cfg.model_config(), ds.features, subgraphs, ds.labels.n_classes, ds.labels.node_type)
    else:
        fresh = HmsgModel.build(cfg.model_config(), ds.features, subgraphs)
    return Restored(load_checkpoint(checkpoint, fresh), subgraphs, ds)


def _test_nodes(ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
    lab = ds.labels
    if lab is None:
        raise ConfigError("evaluation needs labels")
    idx = lab.test if len(lab.test) else np.nonzero(lab.labels >= 0)[0]
    if len(idx) == 0:
        raise EmptyMask("no labeled test nodes to evaluate on")
    return idx, lab.labels[idx]


def evaluate_classify(cfg: RunConfig, restored: Restored) -> dict[str, list[float]]:
    idx, y = _test_nodes(restored.dataset)
    z = restored.embeddings()[restored.dataset.labels.node_type][idx]
    res = evalkit.linear_probe(z, y, cfg.probe_ratio, cfg.eval_repeats, eval_rng(cfg.seed))
    return {"macro_f1": res.macro_runs, "micro_f1": res.micro_runs}


def evaluate_cluster(cfg: RunConfig, restored: Restored) -> dict[str, list[float]]:
    idx, y = _test_nodes(restored.dataset)
    z = restored.embeddings()[restored.dataset.labels.node_type][idx]
    k = cfg.n_clusters or restored.dataset.labels.n_classes
    rng = eval_rng(cfg.seed)
    scores: dict[str, list[float]] = {"nmi": [], "ari": []}
    for _ in range(cfg.eval_repeats):
        assign = evalkit.kmeans_cluster(z, k, cfg.cluster_restarts, rng)
        scores["nmi"].append(evalkit.nmi(y, assign))
        scores["ari"].append(evalkit.ari(y, assign))
    return scores


def evaluate_links(cfg: RunConfig, restored: Restored) -> dict[str, list[float]]:
    pairs = restored.dataset.pairs
    src, dst = restored.dataset.graph.schema.endpoints(pairs.relation)
    emb = restored.embeddings()
    test = np.concatenate([pairs.test_pos, pairs.test_neg])
    y = np.r_[np.ones(len(pairs.test_pos)), np.zeros(len(pairs.test_neg))]
    res = evalkit.auc_ap(evalkit.pair_scores(emb[src], emb[dst], test), y)
    return {"auc": [res.auc], "ap": [res.ap]}
