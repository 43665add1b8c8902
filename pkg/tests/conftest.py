from pathlib import Path

import numpy as np
import pytest

from hmsg.datasets import load_dataset
from hmsg.hetgraph import Schema, build_graph

ROOT = Path(__file__).resolve().parent.parent
TOY = ROOT / "fixtures" / "toy-acm"


@pytest.fixture
def toy_dir() -> Path:
    return TOY


@pytest.fixture
def toy():
    return load_dataset(TOY)


def scholar_graph():
    """Authors a1..a3, papers p1..p3, venues v1, v2 (0-based here).

    p1 is written by a1 and a2, p2 by a1, a2 and a3, p3 by a3.
    """
    schema = Schema(("A", "P", "V"), {"AP": ("A", "P"), "PV": ("P", "V")})
    edges = [("AP", 0, 0), ("AP", 1, 0), ("AP", 0, 1), ("AP", 1, 1), ("AP", 2, 1), ("AP", 2, 2),
             ("PV", 0, 0), ("PV", 1, 0), ("PV", 2, 1)]
    return build_graph(schema, {"A": 3, "P": 3, "V": 2}, edges)


@pytest.fixture
def scholar():
    return scholar_graph()


def random_typed_graph(rng: np.random.Generator, max_nodes: int = 200, p: float | None = None):
    """Random schema with 2-4 types and 2-5 relations (self-type relations allowed)."""
    n_types = int(rng.integers(2, 5))
    types = tuple("ABCD"[:n_types])
    counts = {t: int(rng.integers(1, max_nodes // n_types + 1)) for t in types}
    rels = {}
    for i in range(int(rng.integers(2, 6))):
        rels[f"r{i}"] = (types[rng.integers(n_types)], types[rng.integers(n_types)])
    schema = Schema(types, rels)
    prob = p if p is not None else float(rng.uniform(0.01, 0.15))
    edges = []
    for name, (s, d) in rels.items():
        hit = rng.random((counts[s], counts[d])) < prob
        edges += [(name, int(u), int(v)) for u, v in zip(*np.nonzero(hit))]
        # a few duplicates to exercise collapsing
        edges += edges[-2:]
    return schema, counts, edges


def random_relation_walk(rng: np.random.Generator, schema: Schema, length: int):
    """A random schema-valid (types, relations) walk using forward and reverse relations."""
    steps = []
    for name, (s, d) in schema.relations.items():
        steps.append((s, name, d))
        steps.append((d, name + "-reverse", s))
    start = schema.node_types[rng.integers(len(schema.node_types))]
    for _ in range(20):
        types, rels = [start], []
        for _ in range(length):
            options = [st for st in steps if st[0] == types[-1]]
            if not options:
                break
            _, rel, nxt = options[rng.integers(len(options))]
            rels.append(rel)
            types.append(nxt)
        if len(rels) == length:
            return tuple(types), tuple(rels)
        start = schema.node_types[rng.integers(len(schema.node_types))]
    return None


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, title: str, ok: bool, detail: str) -> bool:
    ACCEPTANCE_LINES[number] = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
