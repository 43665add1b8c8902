"""On-disk dataset format, split construction and synthetic generators.

Directory layout::

    schema.txt          nodetype <name> / relation <name> <src> <dst>
    nodes.tsv           <type>\\t<local_idx>
    edges.tsv           <relation>\\t<src_idx>\\t<dst_idx>
    features.<T>.f64    "<rows> <cols>\\n" then little-endian float64, row-major
    labels.tsv          optional "# type=<T>" line, then <idx>\\t<class>
    splits.json         node splits {"train","val","test"} or pair splits
                        {"relation","train","val","test","val_neg","test_neg"}
"""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import DanglingIndex, MissingFile, ParseError, ShapeMismatch, HMSGError
from .hetgraph import HeteroGraph, Schema, build_graph
from .model import FeatureStore
from .train import UNLABELED, LabelStore, PairSet


@dataclass
class Dataset:
    graph: HeteroGraph
    features: FeatureStore
    labels: LabelStore | None = None
    pairs: PairSet | None = None
    path: Path | None = None

    @property
    def featureless_types(self) -> list[str]:
        return [t for t, x in self.features.features.items() if x is None]


# ------------------------------------------------------------ feature files

def write_matrix(path: str | Path, x: np.ndarray) -> None:
    x = np.ascontiguousarray(x, dtype="<f8")
    if x.ndim != 2:
        raise ShapeMismatch("matrix file needs a 2-d array")
    with open(path, "wb") as fh:
        fh.write(f"{x.shape[0]} {x.shape[1]}\n".encode())
        fh.write(x.tobytes())


def read_matrix(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise ParseError("missing header line", path, 1)
    try:
        rows, cols = (int(v) for v in raw[:nl].decode().replace(",", " ").split())
    except ValueError:
        raise ParseError("header must be '<rows> <cols>'", path, 1) from None
    body = raw[nl + 1 :]
    if len(body) != rows * cols * 8:
        raise ShapeMismatch(f"{path}: expected {rows * cols * 8} payload bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f8").reshape(rows, cols).astype(np.float64)


# ------------------------------------------------------------------- reading

def _lines(path: Path):
    for no, line in enumerate(path.read_text().splitlines(), start=1):
        s = line.strip()
        if s and not s.startswith("#"):
            yield no, s


def read_schema(path: Path) -> Schema:
    types, rels = [], {}
    for no, line in _lines(path):
        parts = line.split()
        if parts[0] == "nodetype" and len(parts) == 2:
            types.append(parts[1])
        elif parts[0] == "relation" and len(parts) == 4:
            if parts[1] in rels:
                raise ParseError(f"duplicate relation {parts[1]!r}", path, no)
            rels[parts[1]] = (parts[2], parts[3])
        else:
            raise ParseError(f"unrecognised schema line {line!r}", path, no)
    try:
        return Schema(tuple(types), rels)
    except HMSGError as exc:
        raise ParseError(str(exc), path) from exc


def _int(tok: str, path: Path, no: int) -> int:
    try:
        v = int(tok)
    except ValueError:
        raise ParseError(f"expected an integer, got {tok!r}", path, no) from None
    if v < 0:
        raise ParseError(f"negative index {v}", path, no)
    return v


def load_dataset(directory: str | Path, label_type: str | None = None) -> Dataset:
    d = Path(directory)
    for name in ("schema.txt", "nodes.tsv", "edges.tsv"):
        if not (d / name).is_file():
            raise MissingFile(f"{d / name} not found")
    schema = read_schema(d / "schema.txt")

    seen: dict[str, set] = defaultdict(set)
    for no, line in _lines(d / "nodes.tsv"):
        parts = line.split("\t")
        if len(parts) != 2:
            raise ParseError("expected <type>\\t<idx>", d / "nodes.tsv", no)
        if parts[0] not in schema.node_types:
            raise ParseError(f"unknown node type {parts[0]!r}", d / "nodes.tsv", no)
        seen[parts[0]].add(_int(parts[1], d / "nodes.tsv", no))
    counts = {}
    for t in schema.node_types:
        idx = seen.get(t, set())
        if idx and (min(idx) != 0 or max(idx) != len(idx) - 1):
            raise ParseError(f"indices of type {t} are not contiguous from 0", d / "nodes.tsv")
        counts[t] = len(idx)

    edges = []
    for no, line in _lines(d / "edges.tsv"):
        parts = line.split("\t")
        if len(parts) != 3:
            raise ParseError("expected <relation>\\t<src>\\t<dst>", d / "edges.tsv", no)
        rel = parts[0]
        if rel not in schema.relations:
            raise ParseError(f"unknown relation {rel!r}", d / "edges.tsv", no)
        u, v = _int(parts[1], d / "edges.tsv", no), _int(parts[2], d / "edges.tsv", no)
        src, dst = schema.relations[rel]
        if u >= counts[src] or v >= counts[dst]:
            raise DanglingIndex(f"{d / 'edges.tsv'}:{no}: edge ({u}, {v}) outside declared {src}/{dst} nodes")
        edges.append((rel, u, v))
    graph = build_graph(schema, counts, edges)

    feats: dict[str, np.ndarray | None] = {}
    for t in schema.node_types:
        f = d / f"features.{t}.f64"
        if f.is_file():
            x = read_matrix(f)
            if x.shape[0] != counts[t]:
                raise ShapeMismatch(f"{f}: {x.shape[0]} rows for {counts[t]} {t} nodes")
            feats[t] = x
        else:
            feats[t] = None
    features = FeatureStore(feats, dict(counts))

    splits = None
    if (d / "splits.json").is_file():
        try:
            splits = json.loads((d / "splits.json").read_text())
        except json.JSONDecodeError as exc:
            raise ParseError(str(exc), d / "splits.json", exc.lineno) from None

    labels = None
    if (d / "labels.tsv").is_file():
        labels = _read_labels(d / "labels.tsv", schema, counts, label_type, splits)

    pairs = None
    if splits is not None and "relation" in splits:
        pairs = pairs_from_json(splits, graph)
    return Dataset(graph, features, labels, pairs, d)


def _read_labels(path: Path, schema: Schema, counts, label_type, splits) -> LabelStore:
    lines = path.read_text().splitlines()
    for line in lines:
        s = line.strip()
        if s.startswith("#") and "type=" in s:
            label_type = label_type or s.split("type=", 1)[1].strip()
    if label_type is None:
        raise ParseError("label node type unknown: add '# type=<T>' or set target_type", path)
    if label_type not in schema.node_types:
        raise ParseError(f"label type {label_type!r} not in schema", path)
    y = np.full(counts[label_type], UNLABELED, dtype=np.int64)
    for no, line in _lines(path):
        parts = line.split("\t")
        if len(parts) != 2:
            raise ParseError("expected <idx>\\t<class>", path, no)
        i, c = _int(parts[0], path, no), _int(parts[1], path, no)
        if i >= counts[label_type]:
            raise DanglingIndex(f"{path}:{no}: node {i} beyond {counts[label_type]} {label_type} nodes")
        y[i] = c
    masks = {"train": [], "val": [], "test": []}
    if splits is not None and "relation" not in splits:
        for k in masks:
            masks[k] = splits.get(k, [])
            if any(not 0 <= i < len(y) for i in masks[k]):
                raise DanglingIndex(f"splits.json: {k} index outside {label_type} nodes")
    return LabelStore(label_type, y, masks["train"], masks["val"], masks["test"])


def pairs_from_json(splits: dict, graph: HeteroGraph) -> PairSet:
    rel = splits["relation"]
    src, dst = graph.schema.endpoints(rel)
    arrays = {}
    for k in ("train", "val", "test", "val_neg", "test_neg"):
        a = np.asarray(splits.get(k, []), dtype=np.int64).reshape(-1, 2)
        if len(a) and (a[:, 0].max() >= graph.num_nodes(src) or a[:, 1].max() >= graph.num_nodes(dst)):
            raise DanglingIndex(f"splits.json: {k} pair outside {src}/{dst} nodes")
        arrays[k] = a
    return PairSet(rel, arrays["train"], arrays["val"], arrays["test"], arrays["val_neg"], arrays["test_neg"])


# ------------------------------------------------------------------- writing

def write_dataset(ds: Dataset, directory: str | Path) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    schema = ds.graph.schema
    lines = [f"nodetype {t}" for t in schema.node_types]
    lines += [f"relation {r} {s} {t}" for r, (s, t) in schema.relations.items()]
    (d / "schema.txt").write_text("\n".join(lines) + "\n")
    (d / "nodes.tsv").write_text(
        "".join(f"{t}\t{i}\n" for t in schema.node_types for i in range(ds.graph.node_counts[t]))
    )
    (d / "edges.tsv").write_text("".join(f"{r}\t{u}\t{v}\n" for r, u, v in ds.graph.iter_edges()))
    for t, x in ds.features.features.items():
        if x is not None:
            write_matrix(d / f"features.{t}.f64", x)
    if ds.labels is not None:
        lab = ds.labels
        body = "".join(f"{i}\t{c}\n" for i, c in enumerate(lab.labels.tolist()) if c != UNLABELED)
        (d / "labels.tsv").write_text(f"# type={lab.node_type}\n" + body)
        if len(lab.train) + len(lab.val) + len(lab.test):
            write_splits(d / "splits.json", node_splits=lab)
    if ds.pairs is not None:
        write_splits(d / "splits.json", pairs=ds.pairs)
    return d


def write_splits(path: str | Path, node_splits: LabelStore | None = None, pairs: PairSet | None = None) -> None:
    if pairs is not None:
        obj = {
            "relation": pairs.relation,
            "train": pairs.train_pos.tolist(),
            "val": pairs.val_pos.tolist(),
            "test": pairs.test_pos.tolist(),
            "val_neg": pairs.val_neg.tolist(),
            "test_neg": pairs.test_neg.tolist(),
        }
    else:
        obj = {k: getattr(node_splits, k).tolist() for k in ("train", "val", "test")}
    Path(path).write_text(json.dumps(obj, sort_keys=True) + "\n")


# -------------------------------------------------------------------- splits

def _ratio_sizes(n: int, ratios) -> tuple[int, int, int]:
    r = np.asarray(ratios, dtype=np.float64)
    r = r / r.sum()
    n_train = int(round(n * r[0]))
    n_val = int(round(n * r[1]))
    return n_train, n_val, n - n_train - n_val


def make_label_splits(labels: LabelStore, ratios=(1, 1, 8), seed: int = 0) -> LabelStore:
    """Random train/val/test split of the labeled nodes."""
    rng = np.random.default_rng(seed)
    known = np.nonzero(labels.labels != UNLABELED)[0]
    perm = rng.permutation(known)
    a, b, _ = _ratio_sizes(len(perm), ratios)
    return LabelStore(labels.node_type, labels.labels, np.sort(perm[:a]), np.sort(perm[a : a + b]),
                      np.sort(perm[a + b :]), labels.n_classes)


def make_pair_splits(graph: HeteroGraph, relation: str, ratios=(5, 1, 4), seed: int = 0) -> PairSet:
    """Split the edges of ``relation``; val/test get as many fresh non-edges as positives."""
    rng = np.random.default_rng(seed)
    edges = graph.edges(relation)
    perm = rng.permutation(len(edges))
    a, b, _ = _ratio_sizes(len(edges), ratios)
    train, val, test = edges[perm[:a]], edges[perm[a : a + b]], edges[perm[a + b :]]
    n_src, n_dst = graph.adjacency(relation).shape
    taken = set((edges[:, 0] * n_dst + edges[:, 1]).tolist())
    need = len(val) + len(test)
    if n_src * n_dst - len(taken) < need:
        raise HMSGError("not enough non-edges for validation/test negatives")
    negs: list[int] = []
    chosen: set[int] = set()
    while len(negs) < need:
        for c in rng.integers(0, n_src * n_dst, size=2 * (need - len(negs)) + 16).tolist():
            if c not in taken and c not in chosen:
                chosen.add(c)
                negs.append(c)
                if len(negs) == need:
                    break
    neg = np.array([[c // n_dst, c % n_dst] for c in negs], dtype=np.int64).reshape(-1, 2)
    return PairSet(relation, train, val, test, neg[: len(val)], neg[len(val) :])


# ----------------------------------------------------------------- synthetic

def planted_partition(n_target: int = 300, n_aux: int = 200, n_classes: int = 3, p_in: float = 0.2,
                      p_out: float = 0.02, feat_dim: int = 16, class_sep: float = 1.0, noise: float = 1.0,
                      split=(1, 1, 8), seed: int = 0) -> Dataset:
    """Labeled heterograph with types P (target), A and S (auxiliary).

    Every node has a class; P-A and P-S edges appear with probability
    ``p_in`` within a class and ``p_out`` across. Features are a class mean
    (``class_sep`` on coordinate c) plus Gaussian noise of scale ``noise``.
    """
    if feat_dim < n_classes:
        raise ValueError("feat_dim must be >= n_classes")
    rng = np.random.default_rng(seed)
    schema = Schema(("P", "A", "S"), {"PA": ("P", "A"), "PS": ("P", "S")})
    counts = {"P": n_target, "A": n_aux, "S": n_aux}
    cls = {t: rng.permutation(np.arange(n) % n_classes) for t, n in counts.items()}
    edges = []
    for rel, aux in (("PA", "A"), ("PS", "S")):
        same = cls["P"][:, None] == cls[aux][None, :]
        prob = np.where(same, p_in, p_out)
        hit = rng.random(prob.shape) < prob
        edges += [(rel, int(u), int(v)) for u, v in zip(*np.nonzero(hit))]
    graph = build_graph(schema, counts, edges)
    means = np.zeros((n_classes, feat_dim))
    means[np.arange(n_classes), np.arange(n_classes)] = class_sep
    feats = {t: means[cls[t]] + noise * rng.normal(size=(n, feat_dim)) for t, n in counts.items()}
    labels = LabelStore("P", cls["P"], [], [], [], n_classes)
    labels = make_label_splits(labels, split, seed)
    return Dataset(graph, FeatureStore(feats, dict(counts)), labels)


def planted_block(n_users: int = 400, n_items: int = 400, n_blocks: int = 4, p_in: float = 0.1,
                  p_out: float = 0.005, split=(5, 1, 4), seed: int = 0) -> Dataset:
    """Featureless user-item bipartite graph with planted blocks (relation ``UI``)."""
    rng = np.random.default_rng(seed)
    schema = Schema(("U", "I"), {"UI": ("U", "I")})
    bu = rng.permutation(np.arange(n_users) % n_blocks)
    bi = rng.permutation(np.arange(n_items) % n_blocks)
    prob = np.where(bu[:, None] == bi[None, :], p_in, p_out)
    hit = rng.random(prob.shape) < prob
    graph = build_graph(schema, {"U": n_users, "I": n_items}, [("UI", int(u), int(v)) for u, v in zip(*np.nonzero(hit))])
    pairs = make_pair_splits(graph, "UI", split, seed)
    return Dataset(graph, FeatureStore({"U": None, "I": None}, {"U": n_users, "I": n_items}), pairs=pairs)
