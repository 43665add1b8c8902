"""Typed heterogeneous graph: schema, relation-indexed CSR adjacency, metapaths.

Nodes are addressed as ``(type, local_index)`` with contiguous per-type
index ranges. Every relation is stored together with its reverse, which is
addressed by appending :data:`REVERSE_SUFFIX` to the relation name.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .exceptions import (
    AmbiguousRelation,
    EndpointTypeMismatch,
    IndexOutOfRange,
    NoRelationBetweenTypes,
    SchemaError,
    TypeMismatch,
    UnknownNodeType,
    UnknownRelation,
)

REVERSE_SUFFIX = "-reverse"


@dataclass(frozen=True)
class Schema:
    """Node types and relations ``name -> (source type, target type)``."""

    node_types: tuple[str, ...]
    relations: Mapping[str, tuple[str, str]]

    def __post_init__(self):
        object.__setattr__(self, "node_types", tuple(self.node_types))
        object.__setattr__(self, "relations", dict(self.relations))
        if len(set(self.node_types)) != len(self.node_types):
            raise SchemaError("duplicate node type name")
        for name, (src, dst) in self.relations.items():
            if name.endswith(REVERSE_SUFFIX):
                raise SchemaError(f"relation name {name!r} uses reserved suffix {REVERSE_SUFFIX!r}")
            for t in (src, dst):
                if t not in self.node_types:
                    raise SchemaError(f"relation {name!r} references unknown node type {t!r}")
        if len(self.node_types) + len(self.relations) <= 2:
            raise SchemaError("a heterogeneous graph needs |node types| + |relations| > 2")

    def endpoints(self, relation: str) -> tuple[str, str]:
        """(source, target) types of a relation or of its reverse."""
        if relation in self.relations:
            return self.relations[relation]
        if relation.endswith(REVERSE_SUFFIX):
            base = relation[: -len(REVERSE_SUFFIX)]
            if base in self.relations:
                src, dst = self.relations[base]
                return dst, src
        raise UnknownRelation(f"unknown relation {relation!r}")

    def check_type(self, node_type: str) -> None:
        if node_type not in self.node_types:
            raise UnknownNodeType(f"unknown node type {node_type!r}")

    def relations_between(self, src: str, dst: str) -> list[str]:
        """All forward and reverse relation names leading from ``src`` to ``dst``."""
        found = []
        for name, (a, b) in self.relations.items():
            if (a, b) == (src, dst):
                found.append(name)
            if (b, a) == (src, dst):
                found.append(name + REVERSE_SUFFIX)
        return found


def reverse_relation(name: str) -> str:
    if name.endswith(REVERSE_SUFFIX):
        return name[: -len(REVERSE_SUFFIX)]
    return name + REVERSE_SUFFIX


@dataclass(frozen=True)
class Metapath:
    node_type_seq: tuple[str, ...]
    relation_seq: tuple[str, ...]

    @property
    def kind(self) -> str:
        return "ho" if self.node_type_seq[0] == self.node_type_seq[-1] else "he"

    @property
    def length(self) -> int:
        return len(self.relation_seq)

    @property
    def target_type(self) -> str:
        return self.node_type_seq[0]

    @property
    def neighbor_type(self) -> str:
        return self.node_type_seq[-1]

    @property
    def is_symmetric(self) -> bool:
        rev = tuple(reverse_relation(r) for r in reversed(self.relation_seq))
        return self.node_type_seq == self.node_type_seq[::-1] and rev == self.relation_seq

    @property
    def text(self) -> str:
        return "-".join(self.node_type_seq)

    def __str__(self):
        return self.text


def parse_metapath(text: str, schema: Schema, relations: Sequence[str] | None = None) -> Metapath:
    """Parse ``"P-A-P"`` (or ``"PAP"`` when type names are single letters) into a :class:`Metapath`.

    Relations between consecutive types are resolved from the schema. When a
    pair is connected by more than one relation, name them explicitly, either
    through ``relations`` or with an ``@`` suffix: ``"P-P@cites"``.
    """
    text = text.strip()
    if "@" in text:
        if relations is not None:
            raise ValueError("relations given both inline and as argument")
        text, rel_text = text.split("@", 1)
        relations = [r.strip() for r in rel_text.split(",")]
    if "-" not in text and text not in schema.node_types and all(c in schema.node_types for c in text):
        # compact form "PAP" for single-letter type names
        types = tuple(text)
    else:
        types = tuple(t.strip() for t in text.split("-"))
    if len(types) < 2 or any(not t for t in types):
        raise UnknownNodeType(f"malformed metapath {text!r}")
    for t in types:
        schema.check_type(t)

    if relations is not None:
        relations = tuple(relations)
        if len(relations) != len(types) - 1:
            raise NoRelationBetweenTypes(
                f"metapath {text!r} needs {len(types) - 1} relations, got {len(relations)}"
            )
        for i, rel in enumerate(relations):
            if schema.endpoints(rel) != (types[i], types[i + 1]):
                raise EndpointTypeMismatch(
                    f"relation {rel!r} does not connect {types[i]} -> {types[i + 1]}"
                )
        return Metapath(types, relations)

    resolved = []
    for a, b in zip(types[:-1], types[1:]):
        options = schema.relations_between(a, b)
        if not options:
            raise NoRelationBetweenTypes(f"no relation connects {a} -> {b}")
        if len(options) > 1:
            raise AmbiguousRelation(f"{a} -> {b} is ambiguous between {options}; name relations explicitly")
        resolved.append(options[0])
    return Metapath(types, tuple(resolved))


def _csr(n_rows, n_cols, rows, cols):
    data = np.ones(len(rows), dtype=np.int8)
    m = sp.csr_matrix((data, (rows, cols)), shape=(n_rows, n_cols))
    m.sum_duplicates()
    m.data[:] = 1
    m.sort_indices()
    return m


@dataclass(frozen=True)
class HeteroGraph:
    """Immutable typed graph; adjacency held as boolean CSR per relation."""

    schema: Schema
    node_counts: Mapping[str, int]
    _adj: Mapping[str, sp.csr_matrix] = field(repr=False)

    def num_nodes(self, node_type: str) -> int:
        self.schema.check_type(node_type)
        return self.node_counts[node_type]

    @property
    def total_nodes(self) -> int:
        return sum(self.node_counts.values())

    def adjacency(self, relation: str) -> sp.csr_matrix:
        """CSR matrix for ``relation`` (reverse relations included)."""
        self.schema.endpoints(relation)
        return self._adj[relation]

    def neighbors(self, node: tuple[str, int], relation: str) -> np.ndarray:
        node_type, idx = node
        src, _ = self.schema.endpoints(relation)
        if node_type != src:
            raise TypeMismatch(f"relation {relation!r} starts at {src}, node is {node_type}")
        if not 0 <= idx < self.node_counts[node_type]:
            raise IndexOutOfRange(f"{node_type} index {idx} out of range")
        m = self._adj[relation]
        return m.indices[m.indptr[idx] : m.indptr[idx + 1]].copy()

    def edges(self, relation: str) -> np.ndarray:
        """All ``(src, dst)`` pairs of a relation as an ``(E, 2)`` array, row-major sorted."""
        m = self.adjacency(relation)
        rows = np.repeat(np.arange(m.shape[0]), np.diff(m.indptr))
        return np.column_stack([rows, m.indices]).astype(np.int64)

    def iter_edges(self) -> Iterator[tuple[str, int, int]]:
        for rel in self.schema.relations:
            for u, v in self.edges(rel):
                yield rel, int(u), int(v)

    def num_edges(self, relation: str) -> int:
        return int(self.adjacency(relation).nnz)

    def without_edges(self, relation: str, pairs: np.ndarray) -> "HeteroGraph":
        """Copy of the graph with the given ``(src, dst)`` pairs of one relation removed."""
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        keep = self.edges(relation)
        if len(pairs):
            n_dst = self.adjacency(relation).shape[1]
            drop = set((pairs[:, 0] * n_dst + pairs[:, 1]).tolist())
            code = keep[:, 0] * n_dst + keep[:, 1]
            keep = keep[~np.isin(code, list(drop))]
        edges = [(r, u, v) for r, u, v in self.iter_edges() if r != relation]
        edges += [(relation, int(u), int(v)) for u, v in keep]
        return build_graph(self.schema, self.node_counts, edges)


def build_graph(
    schema: Schema,
    node_counts: Mapping[str, int],
    edges: Iterable[tuple[str, int, int]],
) -> HeteroGraph:
    counts = {}
    for t in schema.node_types:
        n = int(node_counts.get(t, 0))
        if n < 0:
            raise IndexOutOfRange(f"negative node count for {t}")
        counts[t] = n
    for t in node_counts:
        schema.check_type(t)

    buckets: dict[str, tuple[list[int], list[int]]] = {r: ([], []) for r in schema.relations}
    for rel, u, v in edges:
        if rel not in schema.relations:
            if rel.endswith(REVERSE_SUFFIX) and rel[: -len(REVERSE_SUFFIX)] in schema.relations:
                rel, u, v = rel[: -len(REVERSE_SUFFIX)], v, u
            else:
                raise UnknownRelation(f"unknown relation {rel!r}")
        src, dst = schema.relations[rel]
        # endpoints may be given typed, as (type, index)
        if isinstance(u, tuple):
            if u[0] != src:
                raise EndpointTypeMismatch(f"{rel}: source must be {src}, got {u[0]}")
            u = u[1]
        if isinstance(v, tuple):
            if v[0] != dst:
                raise EndpointTypeMismatch(f"{rel}: target must be {dst}, got {v[0]}")
            v = v[1]
        if not (0 <= u < counts[src]):
            raise IndexOutOfRange(f"{rel}: source {src} index {u} out of range [0, {counts[src]})")
        if not (0 <= v < counts[dst]):
            raise IndexOutOfRange(f"{rel}: target {dst} index {v} out of range [0, {counts[dst]})")
        buckets[rel][0].append(u)
        buckets[rel][1].append(v)

    adj = {}
    for rel, (src, dst) in schema.relations.items():
        rows = np.asarray(buckets[rel][0], dtype=np.int64)
        cols = np.asarray(buckets[rel][1], dtype=np.int64)
        adj[rel] = _csr(counts[src], counts[dst], rows, cols)
        adj[rel + REVERSE_SUFFIX] = _csr(counts[dst], counts[src], cols, rows)
    return HeteroGraph(schema, counts, adj)


def neighbors(graph: HeteroGraph, node: tuple[str, int], relation: str) -> np.ndarray:
    return graph.neighbors(node, relation)
