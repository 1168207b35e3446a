"""Behavioral navigation graphs: places as nodes, behaviors as labeled edges."""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np


class GraphError(ValueError):
    pass


class GraphParseError(GraphError):
    def __init__(self, location: str, message: str):
        super().__init__(f"{location}: {message}")
        self.location = location


class UnknownStart(GraphError):
    def __init__(self, node):
        super().__init__(f"unknown start node {node!r}")
        self.node = node


class NoSuchEdge(GraphError):
    def __init__(self, step: int, node, behavior):
        super().__init__(f"step {step}: no edge labeled {behavior!r} leaves {node!r}")
        self.step = step
        self.node = node
        self.behavior = behavior


class Unreachable(GraphError):
    pass


class Triplet(NamedTuple):
    n1: str
    b: str
    n2: str


@dataclass(frozen=True)
class BehaviorGraph:
    """Immutable graph.  Node and behavior order define one-hot indices; edges
    are kept sorted by (n1 index, b index, n2 index)."""

    nodes: tuple[str, ...]
    behaviors: tuple[str, ...]
    edges: tuple[Triplet, ...]
    node_index: dict = field(init=False, repr=False, compare=False)
    behavior_index: dict = field(init=False, repr=False, compare=False)
    _out: dict = field(init=False, repr=False, compare=False)

    def __init__(self, nodes: Iterable[str], behaviors: Iterable[str], edges: Iterable[Sequence[str]]):
        nodes = tuple(nodes)
        behaviors = tuple(behaviors)
        node_index = {n: i for i, n in enumerate(nodes)}
        behavior_index = {b: i for i, b in enumerate(behaviors)}
        if len(node_index) != len(nodes):
            raise GraphError("duplicate node ids")
        if len(behavior_index) != len(behaviors):
            raise GraphError("duplicate behavior ids")
        out: dict[tuple[str, str], str] = {}
        trips = []
        for k, e in enumerate(edges):
            n1, b, n2 = e
            for role, v, table in (("n1", n1, node_index), ("b", b, behavior_index), ("n2", n2, node_index)):
                if v not in table:
                    kind = "behavior" if role == "b" else "node"
                    raise GraphError(f"edge {k} ({role}): undefined {kind} {v!r}")
            if (n1, b) in out:
                raise GraphError(
                    f"edge {k}: node {n1!r} already has an out-edge labeled {b!r}; "
                    "(node, behavior) out-edges must be unique so plans execute deterministically"
                )
            out[(n1, b)] = n2
            trips.append(Triplet(n1, b, n2))
        trips.sort(key=lambda t: (node_index[t.n1], behavior_index[t.b], node_index[t.n2]))
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "behaviors", behaviors)
        object.__setattr__(self, "edges", tuple(trips))
        object.__setattr__(self, "node_index", node_index)
        object.__setattr__(self, "behavior_index", behavior_index)
        object.__setattr__(self, "_out", out)

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def num_behaviors(self) -> int:
        return len(self.behaviors)

    def step(self, node: str, behavior: str) -> str | None:
        return self._out.get((node, behavior))

    def out_edges(self, node: str) -> list[Triplet]:
        """Outgoing edges of ``node`` in behavior-vocabulary order."""
        return [
            Triplet(node, b, self._out[(node, b)]) for b in self.behaviors if (node, b) in self._out
        ]


def validate_plan(graph: BehaviorGraph, start: str, plan: Sequence[str]) -> str:
    """Execute ``plan`` from ``start`` and return the node reached."""
    if start not in graph.node_index:
        raise UnknownStart(start)
    node = start
    for i, b in enumerate(plan):
        nxt = graph.step(node, b)
        if nxt is None:
            raise NoSuchEdge(i, node, b)
        node = nxt
    return node


def _bfs_tree(graph: BehaviorGraph, start: str) -> dict[str, Triplet | None]:
    # expansion in behavior order makes the first discovery the lexicographically
    # smallest shortest behavior sequence
    parent: dict[str, Triplet | None] = {start: None}
    queue = deque([start])
    while queue:
        u = queue.popleft()
        for e in graph.out_edges(u):
            if e.n2 not in parent:
                parent[e.n2] = e
                queue.append(e.n2)
    return parent


def bfs_distances(graph: BehaviorGraph, start: str) -> dict[str, int]:
    dist = {start: 0}
    queue = deque([start])
    while queue:
        u = queue.popleft()
        for e in graph.out_edges(u):
            if e.n2 not in dist:
                dist[e.n2] = dist[u] + 1
                queue.append(e.n2)
    return dist


def shortest_path(graph: BehaviorGraph, start: str, goal: str) -> list[Triplet]:
    for n in (start, goal):
        if n not in graph.node_index:
            raise UnknownStart(n)
    parent = _bfs_tree(graph, start)
    if goal not in parent:
        raise Unreachable(f"{goal!r} is not reachable from {start!r}")
    path = []
    node = goal
    while parent[node] is not None:
        e = parent[node]
        path.append(e)
        node = e.n1
    return path[::-1]


def shortest_plan(graph: BehaviorGraph, start: str, goal: str) -> list[str]:
    """Minimum-length behavior sequence from ``start`` to ``goal``.

    Ties resolve to the sequence that is smallest in behavior-vocabulary order.
    """
    return [e.b for e in shortest_path(graph, start, goal)]


def encode_triplets(graph: BehaviorGraph, num_nodes: int | None = None) -> np.ndarray:
    """One row per edge: one-hot(n1) ++ one-hot(b) ++ one-hot(n2).

    ``num_nodes`` widens the node blocks (zero padded) so graphs of different
    sizes share one input width; by default it is the graph's own node count.
    """
    if not graph.edges:
        raise GraphError("cannot encode a graph without edges")
    n = graph.num_nodes if num_nodes is None else num_nodes
    if n < graph.num_nodes:
        raise GraphError(f"num_nodes={n} is smaller than the graph's {graph.num_nodes} nodes")
    nb = graph.num_behaviors
    out = np.zeros((len(graph.edges), 2 * n + nb))
    for row, e in enumerate(graph.edges):
        out[row, graph.node_index[e.n1]] = 1.0
        out[row, n + graph.behavior_index[e.b]] = 1.0
        out[row, n + nb + graph.node_index[e.n2]] = 1.0
    return out


def decode_triplets(graph: BehaviorGraph, vectors: np.ndarray, num_nodes: int | None = None) -> list[Triplet]:
    n = graph.num_nodes if num_nodes is None else num_nodes
    nb = graph.num_behaviors
    out = []
    for v in np.asarray(vectors):
        i = int(np.argmax(v[:n]))
        j = int(np.argmax(v[n : n + nb]))
        k = int(np.argmax(v[n + nb :]))
        out.append(Triplet(graph.nodes[i], graph.behaviors[j], graph.nodes[k]))
    return out


def is_strongly_connected(graph: BehaviorGraph) -> bool:
    if not graph.nodes:
        return False
    root = graph.nodes[0]
    if len(bfs_distances(graph, root)) != graph.num_nodes:
        return False
    reverse: dict[str, list[str]] = {n: [] for n in graph.nodes}
    for e in graph.edges:
        reverse[e.n2].append(e.n1)
    seen = {root}
    stack = [root]
    while stack:
        u = stack.pop()
        for v in reverse[u]:
            if v not in seen:
                seen.add(v)
                stack.append(v)
    return len(seen) == graph.num_nodes


# ------------------------------------------------------------------ documents


def serialize_graph(graph: BehaviorGraph) -> str:
    """Canonical JSON document, one edge per line, edges in sorted order."""
    lines = [
        "{",
        f'  "nodes": {json.dumps(list(graph.nodes))},',
        f'  "behaviors": {json.dumps(list(graph.behaviors))},',
        '  "edges": [',
    ]
    for k, e in enumerate(graph.edges):
        sep = "," if k + 1 < len(graph.edges) else ""
        lines.append(f"    {json.dumps(list(e))}{sep}")
    lines += ["  ]", "}", ""]
    return "\n".join(lines)


def parse_graph(text: str) -> BehaviorGraph:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as err:
        raise GraphParseError(f"line {err.lineno} column {err.colno}", err.msg) from None
    if not isinstance(doc, dict):
        raise GraphParseError("document", "expected an object with nodes, behaviors, edges")
    for key in ("nodes", "behaviors", "edges"):
        if key not in doc:
            raise GraphParseError(key, "missing field")
        if not isinstance(doc[key], list):
            raise GraphParseError(key, "expected a list")
    for key in ("nodes", "behaviors"):
        seen = set()
        for i, v in enumerate(doc[key]):
            if not isinstance(v, str):
                raise GraphParseError(f"{key}[{i}]", f"expected a string, got {v!r}")
            if v in seen:
                raise GraphParseError(f"{key}[{i}]", f"duplicate id {v!r}")
            seen.add(v)
    nodes = set(doc["nodes"])
    behaviors = set(doc["behaviors"])
    owners: set[tuple[str, str]] = set()
    for i, e in enumerate(doc["edges"]):
        if not (isinstance(e, list) and len(e) == 3 and all(isinstance(v, str) for v in e)):
            raise GraphParseError(f"edges[{i}]", f"expected [n1, b, n2] strings, got {e!r}")
        n1, b, n2 = e
        if n1 not in nodes:
            raise GraphParseError(f"edges[{i}][0]", f"undefined node {n1!r}")
        if b not in behaviors:
            raise GraphParseError(f"edges[{i}][1]", f"undefined behavior {b!r}")
        if n2 not in nodes:
            raise GraphParseError(f"edges[{i}][2]", f"undefined node {n2!r}")
        if (n1, b) in owners:
            raise GraphParseError(
                f"edges[{i}]",
                f"duplicate out-edge ({n1!r}, {b!r}) violates the determinism invariant",
            )
        owners.add((n1, b))
    return BehaviorGraph(doc["nodes"], doc["behaviors"], doc["edges"])
