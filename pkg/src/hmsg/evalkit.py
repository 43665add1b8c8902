"""Downstream evaluation of embeddings: linear probe, K-Means, link scoring."""
from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit
from scipy.stats import rankdata
from sklearn.cluster import KMeans
from sklearn.exceptions import ConvergenceWarning
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import f1_score
from sklearn.model_selection import train_test_split

from .exceptions import EmptyInput, LengthMismatch, OneClassOnly, ShapeMismatch, SingleClassSplit, TooFewRows

PROBE_L2 = 1e-4
PROBE_MAX_ITER = 500


@dataclass
class ProbeResult:
    macro_f1: float
    micro_f1: float
    macro_runs: list[float] = field(default_factory=list)
    micro_runs: list[float] = field(default_factory=list)

    @property
    def macro_std(self) -> float:
        return float(np.std(self.macro_runs))

    @property
    def micro_std(self) -> float:
        return float(np.std(self.micro_runs))


@dataclass
class ClusterResult:
    nmi: float
    ari: float
    assignments: np.ndarray


@dataclass
class LinkResult:
    auc: float
    ap: float


def _rng(rng) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def linear_probe(embeddings: np.ndarray, labels, train_ratio: float = 0.8, repeats: int = 10,
                 rng=None) -> ProbeResult:
    """Multinomial logistic regression on frozen embeddings, stratified splits.

    The L2 strength ``PROBE_L2`` is per-sample, i.e. the objective is
    ``mean log-loss + PROBE_L2/2 * ||W||^2``.
    """
    X = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels)
    if X.ndim != 2 or len(X) == 0:
        raise EmptyInput("embeddings must be a non-empty 2-d array")
    if len(X) != len(y):
        raise LengthMismatch(f"{len(X)} embeddings vs {len(y)} labels")
    if len(np.unique(y)) < 2:
        raise SingleClassSplit("probe needs at least two classes")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    rng = _rng(rng)
    macro, micro = [], []
    for _ in range(repeats):
        seed = int(rng.integers(2**31 - 1))
        X_tr, X_te, y_tr, y_te = train_test_split(X, y, train_size=train_ratio, stratify=y, random_state=seed)
        if len(np.unique(y_tr)) < 2:
            raise SingleClassSplit("training part of the split holds a single class")
        clf = LogisticRegression(C=1.0 / (PROBE_L2 * len(y_tr)), max_iter=PROBE_MAX_ITER)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            clf.fit(X_tr, y_tr)
        pred = clf.predict(X_te)
        macro.append(float(f1_score(y_te, pred, average="macro")))
        micro.append(float(f1_score(y_te, pred, average="micro")))
    return ProbeResult(float(np.mean(macro)), float(np.mean(micro)), macro, micro)


def kmeans_cluster(embeddings: np.ndarray, k: int, restarts: int = 10, rng=None) -> np.ndarray:
    """k-means++ seeding, Lloyd iterations (tol 1e-6, at most 300), best of ``restarts``."""
    X = np.asarray(embeddings, dtype=np.float64)
    if k < 2:
        raise ValueError("k must be >= 2")
    if X.ndim != 2 or len(X) < k:
        raise TooFewRows(f"need at least {k} rows, got {len(X)}")
    seed = int(_rng(rng).integers(2**31 - 1))
    km = KMeans(n_clusters=k, init="k-means++", n_init=restarts, max_iter=300, tol=1e-6,
                algorithm="lloyd", random_state=seed)
    with warnings.catch_warnings():
        # k == rows or duplicate points trigger harmless warnings
        warnings.simplefilter("ignore")
        return km.fit_predict(X)


def _contingency(a, b) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape or a.ndim != 1:
        raise LengthMismatch(f"partitions have lengths {a.shape} and {b.shape}")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max(initial=-1) + 1, bi.max(initial=-1) + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    return table


def _entropy(counts: np.ndarray, n: int) -> float:
    p = counts[counts > 0] / n
    return float(-(p * np.log(p)).sum())


def nmi(a, b) -> float:
    """Mutual information over the arithmetic mean of the two entropies."""
    table = _contingency(a, b)
    n = int(table.sum())
    if n == 0:
        raise EmptyInput("empty partitions")
    ha = _entropy(table.sum(axis=1), n)
    hb = _entropy(table.sum(axis=0), n)
    if ha == 0.0 or hb == 0.0:
        # a single-cluster side: agreement only if both are single-cluster
        return 1.0 if ha == hb else 0.0
    nz = table > 0
    pij = table[nz] / n
    pa = table.sum(axis=1, keepdims=True) / n
    pb = table.sum(axis=0, keepdims=True) / n
    outer = (pa * pb)[nz]
    mi = float((pij * np.log(pij / outer)).sum())
    return float(min(max(mi / ((ha + hb) / 2.0), 0.0), 1.0))


def ari(a, b) -> float:
    """Adjusted Rand index from the contingency table."""
    table = _contingency(a, b)
    n = int(table.sum())
    if n == 0:
        raise EmptyInput("empty partitions")

    def comb2(x):
        x = np.asarray(x, dtype=np.float64)
        return float((x * (x - 1) / 2.0).sum())

    index = comb2(table)
    sa = comb2(table.sum(axis=1))
    sb = comb2(table.sum(axis=0))
    total = n * (n - 1) / 2.0
    expected = sa * sb / total if total else 0.0
    max_index = (sa + sb) / 2.0
    if max_index == expected:
        return 1.0
    return float((index - expected) / (max_index - expected))


def link_score(z_u, z_i) -> float | np.ndarray:
    """``sigmoid(z_u . z_i)``; accepts single vectors or row-aligned matrices."""
    z_u = np.asarray(z_u, dtype=np.float64)
    z_i = np.asarray(z_i, dtype=np.float64)
    if z_u.shape != z_i.shape:
        raise ShapeMismatch(f"{z_u.shape} vs {z_i.shape}")
    out = expit(np.sum(z_u * z_i, axis=-1))
    return float(out) if out.ndim == 0 else out


def pair_scores(z_src: np.ndarray, z_dst: np.ndarray, pairs) -> np.ndarray:
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    return link_score(z_src[pairs[:, 0]], z_dst[pairs[:, 1]])


def auc_ap(scores, labels) -> LinkResult:
    """ROC AUC with mid-ranks for ties; AP as step-interpolated PR area."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    if s.shape != y.shape:
        raise LengthMismatch(f"{len(s)} scores vs {len(y)} labels")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise OneClassOnly("AUC/AP need both positive and negative labels")
    ranks = rankdata(s, method="average")
    auc = (ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)

    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    # one threshold per distinct score: last index of each tie block
    last = np.r_[np.nonzero(np.diff(s_sorted))[0], len(s) - 1]
    tp = np.cumsum(y_sorted)[last]
    fp = (last + 1) - tp
    precision = tp / (tp + fp)
    recall = tp / n_pos
    ap = float(np.sum(np.diff(np.r_[0.0, recall]) * precision))
    return LinkResult(float(auc), ap)


def metric_report(task: str, metrics: dict[str, list[float]], repeats: int, seed: int, config_text: str) -> dict:
    """JSON-ready report: per-metric mean/std plus provenance of the run."""
    return {
        "task": task,
        "metrics": {k: {"mean": float(np.mean(v)), "std": float(np.std(v))} for k, v in metrics.items()},
        "repeats": int(repeats),
        "seed": int(seed),
        "config_digest": hashlib.sha256(config_text.encode()).hexdigest()[:16],
    }


def dump_report(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"
