"""The HMSG network.

Forward pass: type-specific projection of node attributes, one aggregation
per metapath subgraph (attention for homogeneous subgraphs, a configurable
aggregator for heterogeneous ones), then attention-weighted fusion of the
per-subgraph embeddings of each target type.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .exceptions import ConfigError, EmptyGraph, EmptyInput, ShapeMismatch
from .subgraph import MetapathSubgraph, SubgraphSet

AGGREGATORS = ("mean", "pool", "attention")
ACTIVATIONS = {"elu": ad.elu, "relu": ad.relu, "identity": ad.identity}


@dataclass
class ModelConfig:
    hidden_dim: int = 64
    n_heads: int = 8
    subgraph_attn_dim: int = 128
    aggregator: str = "attention"
    dropout: float = 0.6
    leaky_slope: float = 0.2
    activation: str = "elu"
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        if self.n_heads < 1 or self.hidden_dim < 1:
            raise ConfigError("hidden_dim and n_heads must be positive")
        if self.hidden_dim % self.n_heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} not divisible by n_heads {self.n_heads}")
        if self.subgraph_attn_dim < 1:
            raise ConfigError("subgraph_attn_dim must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.aggregator not in AGGREGATORS:
            raise ConfigError(f"aggregator must be one of {AGGREGATORS}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {sorted(ACTIVATIONS)}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError("dtype must be float64 or float32")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.n_heads

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**dict(d))


@dataclass
class FeatureStore:
    """Raw attributes per node type; ``None`` marks a featureless type."""

    features: dict[str, np.ndarray | None]
    node_counts: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        for t, x in self.features.items():
            if x is None:
                continue
            x = np.asarray(x, dtype=np.float64)
            if x.ndim != 2:
                raise ShapeMismatch(f"features of {t} must be 2-d")
            n = self.node_counts.setdefault(t, x.shape[0])
            if n != x.shape[0]:
                raise ShapeMismatch(f"features of {t} have {x.shape[0]} rows, type has {n} nodes")
            self.features[t] = x

    def dims(self) -> dict[str, int | None]:
        return {t: (None if x is None else x.shape[1]) for t, x in self.features.items()}


@dataclass
class ModelLayout:
    """Structure needed to rebuild parameters: node counts, feature widths, subgraphs."""

    node_counts: dict[str, int]
    feature_dims: dict[str, int | None]
    # per target type: list of (label, kind, neighbor type), configuration order
    subgraphs: dict[str, list[tuple[str, str, str]]]
    n_classes: int = 0
    classify_type: str | None = None

    def to_dict(self) -> dict:
        return {
            "node_counts": self.node_counts,
            "feature_dims": self.feature_dims,
            "subgraphs": {t: [list(s) for s in v] for t, v in self.subgraphs.items()},
            "n_classes": self.n_classes,
            "classify_type": self.classify_type,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelLayout":
        return cls(
            node_counts=dict(d["node_counts"]),
            feature_dims=dict(d["feature_dims"]),
            subgraphs={t: [tuple(s) for s in v] for t, v in d["subgraphs"].items()},
            n_classes=int(d.get("n_classes", 0)),
            classify_type=d.get("classify_type"),
        )

    @classmethod
    def from_data(cls, features: FeatureStore, subgraphs: SubgraphSet, n_classes: int = 0,
                  classify_type: str | None = None) -> "ModelLayout":
        used = set()
        layout_sub = {}
        for t in subgraphs:
            layout_sub[t] = []
            for g in subgraphs[t]:
                layout_sub[t].append((g.label or g.metapath.text, g.kind, g.neighbor_type))
                used.update((g.target_type, g.neighbor_type))
        dims = features.dims()
        counts = {}
        for t in sorted(used):
            if t not in dims:
                raise ShapeMismatch(f"no features (or featureless marker) for node type {t}")
            counts[t] = features.node_counts[t]
        return cls(counts, {t: dims[t] for t in sorted(used)}, layout_sub, n_classes, classify_type)


def _glorot(rng: np.random.Generator, shape: tuple, dtype) -> np.ndarray:
    if len(shape) == 1:
        fan_in, fan_out = 1, shape[0]
    else:
        fan_out, fan_in = shape[0], int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class HmsgModel:
    """All learnable parameters plus configuration and layout.

    Parameter names:
      ``W.<type>``        projection (d', d_A)
      ``emb.<type>``      free embedding table (n_A, d') for featureless types
      ``<type>.<j>.attn`` attention vectors (K, 2*head_dim | head_dim)
      ``<type>.<j>.W_pool`` / ``.b_pool``  pooling aggregator
      ``fuse.<type>.q`` / ``.M`` / ``.b``  subgraph attention
      ``cls.W`` / ``cls.b``  classifier head
    """

    def __init__(self, config: ModelConfig, layout: ModelLayout):
        self.config = config
        self.layout = layout
        self.params: dict[str, Parameter] = {}
        rng = np.random.default_rng(config.seed)
        dt = config.np_dtype
        d, K, hd = config.hidden_dim, config.n_heads, config.head_dim

        def add(name, shape, init="glorot"):
            data = _glorot(rng, shape, dt) if init == "glorot" else np.zeros(shape, dtype=dt)
            self.params[name] = Parameter(name, data, dtype=dt)

        for t, dim in layout.feature_dims.items():
            if dim is None:
                add(f"emb.{t}", (layout.node_counts[t], d))
            else:
                add(f"W.{t}", (d, dim))
        for t, subs in layout.subgraphs.items():
            for j, (_, kind, _) in enumerate(subs):
                if kind == "ho" or config.aggregator == "attention":
                    add(f"{t}.{j}.attn", (K, 2 * hd if kind == "ho" else hd))
                elif config.aggregator == "pool":
                    add(f"{t}.{j}.W_pool", (d, d))
                    add(f"{t}.{j}.b_pool", (d,), init="zeros")
            add(f"fuse.{t}.q", (config.subgraph_attn_dim,))
            add(f"fuse.{t}.M", (config.subgraph_attn_dim, d))
            add(f"fuse.{t}.b", (config.subgraph_attn_dim,), init="zeros")
        if layout.n_classes:
            if layout.n_classes < 2:
                raise ConfigError("n_classes must be >= 2")
            add("cls.W", (layout.n_classes, d))
            add("cls.b", (layout.n_classes,), init="zeros")

    @classmethod
    def build(cls, config: ModelConfig, features: FeatureStore, subgraphs: SubgraphSet,
              n_classes: int = 0, classify_type: str | None = None) -> "HmsgModel":
        return cls(config, ModelLayout.from_data(features, subgraphs, n_classes, classify_type))

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def trainable(self) -> list[Parameter]:
        return [p for p in self.params.values() if p.requires_grad]

    def __getitem__(self, name: str) -> Parameter:
        return self.params[name]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise ShapeMismatch("parameter names differ from the model layout")
        for k, v in state.items():
            p = self.params[k]
            if p.data.shape != np.shape(v):
                raise ShapeMismatch(f"{k}: expected {p.data.shape}, got {np.shape(v)}")
            p.data[...] = v


# ----------------------------------------------------------------- operations

def transform_attributes(features: FeatureStore, model: HmsgModel, training: bool = False,
                         rng: np.random.Generator | None = None) -> dict[str, Tensor]:
    """Project every used node type into the shared d'-dim space (no bias)."""
    cfg = model.config
    out = {}
    for t, dim in model.layout.feature_dims.items():
        if dim is None:
            h = model.params[f"emb.{t}"]
        else:
            x = features.features.get(t)
            W = model.params[f"W.{t}"]
            if x is None or x.shape[1] != W.shape[1]:
                got = None if x is None else x.shape
                raise ShapeMismatch(f"features of {t} have shape {got}, W.{t} expects width {W.shape[1]}")
            h = ad.matmul(Tensor(x.astype(cfg.np_dtype, copy=False)), ad.transpose(W))
        out[t] = ad.dropout(h, cfg.dropout, training, rng)
    return out


def aggregate_mean(subgraph: MetapathSubgraph, h_nbr: Tensor) -> Tensor:
    _check_nbr(subgraph, h_nbr)
    ids = subgraph.edge_targets()
    summed = ad.segment_sum(ad.row_gather(h_nbr, subgraph.indices), ids, subgraph.n_targets)
    deg = np.maximum(subgraph.degrees(), 1).astype(h_nbr.dtype)[:, None]
    return ad.div(summed, Tensor(deg))


def aggregate_pool(subgraph: MetapathSubgraph, h_nbr: Tensor, W_pool: Tensor, b_pool: Tensor) -> Tensor:
    _check_nbr(subgraph, h_nbr)
    if W_pool.shape != (h_nbr.shape[1], h_nbr.shape[1]):
        raise ShapeMismatch(f"W_pool must be {(h_nbr.shape[1],) * 2}, got {W_pool.shape}")
    transformed = ad.relu(ad.add(ad.matmul(h_nbr, ad.transpose(W_pool)), b_pool))
    msgs = ad.row_gather(transformed, subgraph.indices)
    return ad.segment_max(msgs, subgraph.edge_targets(), subgraph.n_targets)


@dataclass
class AttentionOutput:
    z: Tensor
    alpha: Tensor
    scores: Tensor


def aggregate_attention(subgraph: MetapathSubgraph, h_target: Tensor | None, h_nbr: Tensor, attn: Tensor,
                        n_heads: int, activation: str = "elu", slope: float = 0.2, dropout: float = 0.0,
                        training: bool = False, rng: np.random.Generator | None = None) -> AttentionOutput:
    """Multi-head neighbor attention over one subgraph.

    Head k sees the k-th ``head_dim`` slice of the projected features.
    Homogeneous subgraphs score ``a_k . [h_v || h_u]``; heterogeneous ones
    score ``a_k . h_u`` only. Nodes without neighbors get a zero row.
    """
    _check_nbr(subgraph, h_nbr)
    if subgraph.n_targets == 0:
        raise EmptyGraph(f"subgraph {subgraph.label} has no target nodes")
    d = h_nbr.shape[1]
    if d % n_heads:
        raise ShapeMismatch(f"width {d} not divisible by {n_heads} heads")
    hd = d // n_heads
    ho = subgraph.kind == "ho"
    if attn.shape != (n_heads, 2 * hd if ho else hd):
        raise ShapeMismatch(f"attention vector shape {attn.shape} invalid for {subgraph.kind} subgraph")

    ids = subgraph.edge_targets()
    n = subgraph.n_targets
    nbr = ad.reshape(h_nbr, (h_nbr.shape[0], n_heads, hd))
    if ho:
        if h_target is None or h_target.shape != (n, d):
            raise ShapeMismatch("homogeneous attention needs target features of shape (n_targets, d')")
        tgt = ad.reshape(h_target, (n, n_heads, hd))
        s_tgt = ad.sum_(ad.mul(tgt, attn[:, :hd]), axis=-1)
        s_nbr = ad.sum_(ad.mul(nbr, attn[:, hd:]), axis=-1)
        raw = ad.add(ad.row_gather(s_tgt, ids), ad.row_gather(s_nbr, subgraph.indices))
    else:
        s_nbr = ad.sum_(ad.mul(nbr, attn), axis=-1)
        raw = ad.row_gather(s_nbr, subgraph.indices)
    scores = ad.leaky_relu(raw, slope)
    alpha = ad.segment_softmax(scores, ids, n)
    alpha_used = ad.dropout(alpha, dropout, training, rng)
    agg = ad.weighted_segment_sum(alpha_used, nbr, subgraph.indices, ids, n)
    z = ACTIVATIONS[activation](ad.reshape(agg, (n, d)))
    return AttentionOutput(z, alpha, scores)


def aggregate_subgraphs(zs: list[Tensor], q: Tensor, M: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """Fuse per-subgraph embeddings with softmax weights ``beta``.

    ``w_i = mean_v q . tanh(M z_v^i + b)``, ``beta = softmax(w)``,
    ``z = sum_i beta_i z^i``.
    """
    if not zs:
        raise EmptyInput("no subgraph embeddings to fuse")
    shape = zs[0].shape
    if any(z.shape != shape for z in zs):
        raise ShapeMismatch("subgraph embeddings must share one shape")
    if M.shape != (q.shape[0], shape[1]) or b.shape != q.shape:
        raise ShapeMismatch("fusion parameters do not match embedding width")
    n = float(shape[0])
    ws = []
    for z in zs:
        hidden = ad.tanh(ad.add(ad.matmul(z, ad.transpose(M)), b))
        per_node = ad.sum_(ad.mul(hidden, q), axis=1)
        ws.append(ad.reshape(ad.div(ad.sum_(per_node), n), (1,)))
    w = ad.concat(ws, axis=0)
    beta = ad.segment_softmax(w, np.zeros(len(zs), dtype=np.int64), 1)
    fused = ad.mul(zs[0], beta[0])
    for i in range(1, len(zs)):
        fused = ad.add(fused, ad.mul(zs[i], beta[i]))
    return fused, beta


def classify_head(z: Tensor, W_cls: Tensor, b_cls: Tensor) -> Tensor:
    if W_cls.shape[0] < 2:
        raise ShapeMismatch("classifier needs n_classes >= 2")
    if W_cls.shape[1] != z.shape[1] or b_cls.shape != (W_cls.shape[0],):
        raise ShapeMismatch(f"classifier {W_cls.shape} does not fit embeddings {z.shape}")
    return ad.add(ad.matmul(z, ad.transpose(W_cls)), b_cls)


@dataclass
class ForwardResult:
    embeddings: dict[str, Tensor]
    betas: dict[str, np.ndarray]
    projected: dict[str, Tensor]
    per_subgraph: dict[tuple[str, int], Tensor]
    attention: dict[tuple[str, int], np.ndarray]
    scores: dict[tuple[str, int], np.ndarray]
    beta_tensors: dict[str, Tensor] = field(default_factory=dict)


def forward(subgraphs: SubgraphSet, features: FeatureStore, model: HmsgModel, training: bool = False,
            rng: np.random.Generator | None = None) -> ForwardResult:
    cfg = model.config
    h = transform_attributes(features, model, training, rng)
    res = ForwardResult({}, {}, h, {}, {}, {})
    for t, subs in model.layout.subgraphs.items():
        if t not in subgraphs.by_type or len(subgraphs[t]) != len(subs):
            raise ShapeMismatch(f"subgraph set does not match model layout for type {t}")
        zs = []
        for j, g in enumerate(subgraphs[t]):
            if g.kind != subs[j][1] or g.neighbor_type != subs[j][2]:
                raise ShapeMismatch(f"subgraph {j} of {t} is {g.kind}/{g.neighbor_type}, layout expects {subs[j][1:]}")
            h_nbr = h[g.neighbor_type]
            if g.kind == "ho" or cfg.aggregator == "attention":
                out = aggregate_attention(
                    g, h[t] if g.kind == "ho" else None, h_nbr, model.params[f"{t}.{j}.attn"],
                    cfg.n_heads, cfg.activation, cfg.leaky_slope, cfg.dropout, training, rng,
                )
                z = out.z
                res.attention[(t, j)] = out.alpha.data
                res.scores[(t, j)] = out.scores.data
            elif cfg.aggregator == "mean":
                z = aggregate_mean(g, h_nbr)
            else:
                z = aggregate_pool(g, h_nbr, model.params[f"{t}.{j}.W_pool"], model.params[f"{t}.{j}.b_pool"])
            res.per_subgraph[(t, j)] = z
            zs.append(z)
        fused, beta = aggregate_subgraphs(
            zs, model.params[f"fuse.{t}.q"], model.params[f"fuse.{t}.M"], model.params[f"fuse.{t}.b"]
        )
        res.embeddings[t] = fused
        res.betas[t] = beta.data.copy()
        res.beta_tensors[t] = beta
    return res


def logits(result: ForwardResult, model: HmsgModel) -> Tensor:
    t = model.layout.classify_type
    if not model.layout.n_classes or t is None:
        raise ConfigError("model has no classifier head")
    return classify_head(result.embeddings[t], model.params["cls.W"], model.params["cls.b"])


def _check_nbr(subgraph: MetapathSubgraph, h_nbr: Tensor) -> None:
    if h_nbr.ndim != 2 or h_nbr.shape[0] != subgraph.n_neighbor_nodes:
        raise ShapeMismatch(
            f"neighbor features {h_nbr.shape} do not match {subgraph.n_neighbor_nodes} {subgraph.neighbor_type} nodes"
        )
