"""Metapath-based subgraph generation.

A metapath ``A1 -R1-> A2 ... -Rl-> A(l+1)`` induces a graph over
(A1, A(l+1)) node pairs joined by at least one path instance. Composition is
done on the boolean semiring, so parallel instances collapse into one edge.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .exceptions import SchemaMismatch, TypeMismatch, IndexOutOfRange
from .hetgraph import HeteroGraph, Metapath


@dataclass(frozen=True)
class MetapathSubgraph:
    metapath: Metapath
    indptr: np.ndarray
    indices: np.ndarray
    n_neighbor_nodes: int
    label: str = ""

    @property
    def kind(self) -> str:
        return self.metapath.kind

    @property
    def target_type(self) -> str:
        return self.metapath.target_type

    @property
    def neighbor_type(self) -> str:
        return self.metapath.neighbor_type

    @property
    def n_targets(self) -> int:
        return len(self.indptr) - 1

    @property
    def n_edges(self) -> int:
        return int(self.indptr[-1])

    def row(self, v: int) -> np.ndarray:
        return self.indices[self.indptr[v] : self.indptr[v + 1]]

    def edge_targets(self) -> np.ndarray:
        """Target (row) index of every stored edge; sorted, usable as segment ids."""
        return np.repeat(np.arange(self.n_targets), np.diff(self.indptr))

    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def to_sparse(self) -> sp.csr_matrix:
        data = np.ones(self.n_edges, dtype=np.int8)
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(self.n_targets, self.n_neighbor_nodes))

    def pairs(self) -> np.ndarray:
        return np.column_stack([self.edge_targets(), self.indices])


@dataclass
class SubgraphSet:
    """Subgraphs grouped by target node type, in configuration order."""

    by_type: dict[str, list[MetapathSubgraph]] = field(default_factory=dict)

    def __getitem__(self, node_type: str) -> list[MetapathSubgraph]:
        return self.by_type[node_type]

    def __iter__(self):
        return iter(self.by_type)

    def __len__(self):
        return sum(len(v) for v in self.by_type.values())

    @property
    def target_types(self) -> list[str]:
        return list(self.by_type)

    def all(self) -> list[MetapathSubgraph]:
        return [g for gs in self.by_type.values() for g in gs]


def _check_metapath(graph: HeteroGraph, metapath: Metapath) -> None:
    schema = graph.schema
    for i, rel in enumerate(metapath.relation_seq):
        try:
            src, dst = schema.endpoints(rel)
        except Exception as exc:
            raise SchemaMismatch(str(exc)) from exc
        if (src, dst) != (metapath.node_type_seq[i], metapath.node_type_seq[i + 1]):
            raise SchemaMismatch(f"relation {rel!r} does not connect step {i} of {metapath}")


def _binarize(m: sp.csr_matrix) -> sp.csr_matrix:
    m = m.tocsr()
    m.eliminate_zeros()
    m.data = np.ones_like(m.data, dtype=np.int8)
    return m


def compose(relations: Sequence[sp.spmatrix]) -> sp.csr_matrix:
    """Boolean product R1 . R2 ... Rl (left to right)."""
    out = _binarize(sp.csr_matrix(relations[0]))
    for r in relations[1:]:
        # int32 product avoids int8 overflow before re-binarizing
        out = _binarize(out.astype(np.int32) @ sp.csr_matrix(r).astype(np.int32))
    return out


def generate_subgraph(graph: HeteroGraph, metapath: Metapath) -> MetapathSubgraph:
    _check_metapath(graph, metapath)
    m = compose([graph.adjacency(r) for r in metapath.relation_seq])
    m.sort_indices()
    return MetapathSubgraph(
        metapath=metapath,
        indptr=m.indptr.astype(np.int64),
        indices=m.indices.astype(np.int64),
        n_neighbor_nodes=graph.num_nodes(metapath.neighbor_type),
        label=metapath.text,
    )


def generate_all(graph: HeteroGraph, metapaths: Iterable[Metapath]) -> SubgraphSet:
    out = SubgraphSet()
    for mp in metapaths:
        out.by_type.setdefault(mp.target_type, []).append(generate_subgraph(graph, mp))
    return out


def metapath_neighbors(graph: HeteroGraph, metapath: Metapath, v: tuple[str, int] | int) -> np.ndarray:
    """Row ``v`` of the metapath subgraph by frontier expansion (no full product)."""
    _check_metapath(graph, metapath)
    if isinstance(v, tuple):
        node_type, idx = v
        if node_type != metapath.target_type:
            raise TypeMismatch(f"metapath {metapath} starts at {metapath.target_type}, node is {node_type}")
    else:
        idx = v
    if not 0 <= idx < graph.num_nodes(metapath.target_type):
        raise IndexOutOfRange(f"{metapath.target_type} index {idx} out of range")
    frontier = np.array([idx], dtype=np.int64)
    for rel in metapath.relation_seq:
        m = graph.adjacency(rel)
        parts = [m.indices[m.indptr[u] : m.indptr[u + 1]] for u in frontier]
        frontier = np.unique(np.concatenate(parts)) if parts else np.empty(0, dtype=np.int64)
    return frontier.astype(np.int64)


def export_subgraph(subgraph: MetapathSubgraph, path: str | Path) -> None:
    """Write ``# metapath=.. kind=.. target=..`` header plus sorted ``src\\tdst`` rows."""
    lines = [f"# metapath={subgraph.label or subgraph.metapath.text} kind={subgraph.kind} target={subgraph.target_type}"]
    lines += [f"{u}\t{v}" for u, v in subgraph.pairs()]
    Path(path).write_text("\n".join(lines) + "\n")
