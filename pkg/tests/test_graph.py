from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from navtrans.corpus import CorpusConfig, generate_environment
from navtrans.graph import (
    BehaviorGraph,
    GraphError,
    GraphParseError,
    NoSuchEdge,
    Triplet,
    UnknownStart,
    Unreachable,
    decode_triplets,
    encode_triplets,
    parse_graph,
    serialize_graph,
    shortest_plan,
    validate_plan,
)

CYCLE = BehaviorGraph(["A", "B", "C"], ["x", "y"], [("A", "x", "B"), ("B", "y", "C"), ("C", "x", "A")])


def random_graph(seed, rooms=(6, 12), behaviors=("a", "b", "c", "d")):
    cfg = CorpusConfig(rooms_min=rooms[0], rooms_max=rooms[1], behavior_vocab=list(behaviors))
    return generate_environment(cfg, seed)


def bfs_distance(graph, start, goal):
    # independent of the library's search: plain adjacency lists
    adj = {n: [] for n in graph.nodes}
    for e in graph.edges:
        adj[e.n1].append(e.n2)
    seen = {start: 0}
    q = deque([start])
    while q:
        u = q.popleft()
        for v in adj[u]:
            if v not in seen:
                seen[v] = seen[u] + 1
                q.append(v)
    return seen.get(goal)


def test_single_edge_plan():
    g = BehaviorGraph(["A", "B"], ["go"], [("A", "go", "B")])
    assert validate_plan(g, "A", ["go"]) == "B"
    assert shortest_plan(g, "A", "B") == ["go"]


def test_empty_plan_is_identity():
    assert validate_plan(CYCLE, "B", []) == "B"
    assert shortest_plan(CYCLE, "C", "C") == []


def test_cycle_walk_returns_home():
    # hand simulation: A -x-> B -y-> C -x-> A
    assert validate_plan(CYCLE, "A", ["x", "y", "x"]) == "A"


def test_validate_errors():
    with pytest.raises(UnknownStart):
        validate_plan(CYCLE, "Z", ["x"])
    with pytest.raises(NoSuchEdge) as info:
        validate_plan(CYCLE, "A", ["x", "x"])
    assert info.value.step == 1


def test_unreachable():
    g = BehaviorGraph(["A", "B"], ["go"], [("A", "go", "B")])
    with pytest.raises(Unreachable):
        shortest_plan(g, "B", "A")


def test_shortest_plan_tie_break_prefers_vocab_order():
    # two length-2 routes A->D; behavior order p < q picks the p route
    g = BehaviorGraph(
        ["A", "B", "C", "D"],
        ["p", "q"],
        [("A", "q", "B"), ("A", "p", "C"), ("B", "p", "D"), ("C", "q", "D")],
    )
    assert shortest_plan(g, "A", "D") == ["p", "q"]


def test_shortest_plan_length_matches_bfs_oracle():
    g = random_graph(7, rooms=(10, 10))
    assert g.num_nodes == 10
    for s in g.nodes:
        for t in g.nodes:
            plan = shortest_plan(g, s, t)
            assert len(plan) == bfs_distance(g, s, t)
            assert validate_plan(g, s, plan) == t


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_shortest_plan_reaches_goal(seed):
    g = random_graph(seed)
    rng = np.random.default_rng(seed)
    for _ in range(5):
        s, t = rng.choice(g.nodes, size=2)
        assert validate_plan(g, s, shortest_plan(g, s, t)) == t


def test_encode_single_edge():
    g = BehaviorGraph(["n0", "n1"], ["b0"], [("n0", "b0", "n1")])
    np.testing.assert_array_equal(encode_triplets(g), [[1, 0, 1, 0, 1]])


def test_encoding_order_is_lexicographic():
    g = BehaviorGraph(["A", "B"], ["x", "y"], [("B", "x", "A"), ("A", "y", "B"), ("A", "x", "A")])
    assert list(g.edges) == [Triplet("A", "x", "A"), Triplet("A", "y", "B"), Triplet("B", "x", "A")]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_encoding_shape_and_round_trip(seed):
    g = random_graph(seed)
    enc = encode_triplets(g)
    assert enc.shape == (len(g.edges), 2 * g.num_nodes + g.num_behaviors)
    assert (enc.sum(axis=1) == 3).all()
    assert (np.count_nonzero(enc, axis=1) == 3).all()
    assert decode_triplets(g, enc) == list(g.edges)
    wide = encode_triplets(g, num_nodes=70)
    assert decode_triplets(g, wide, num_nodes=70) == list(g.edges)


def test_duplicate_out_edge_rejected():
    with pytest.raises(GraphError, match="determin"):
        BehaviorGraph(["A", "B", "C"], ["x"], [("A", "x", "B"), ("A", "x", "C")])


def test_self_loops_allowed_by_format():
    g = BehaviorGraph(["A"], ["stay"], [("A", "stay", "A")])
    assert validate_plan(g, "A", ["stay", "stay"]) == "A"


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_document_round_trip(seed):
    g = random_graph(seed)
    text = serialize_graph(g)
    assert parse_graph(text) == g
    assert serialize_graph(parse_graph(text)) == text


def test_serialize_canonicalizes_edge_order():
    doc = '{"nodes": ["A", "B"], "behaviors": ["x", "y"], "edges": [["B", "x", "A"], ["A", "y", "B"]]}'
    text = serialize_graph(parse_graph(doc))
    assert text.index('["A", "y", "B"]') < text.index('["B", "x", "A"]')


def test_parse_reports_undefined_node():
    doc = '{"nodes": ["A"], "behaviors": ["x"], "edges": [["A", "x", "kitchen_9"]]}'
    with pytest.raises(GraphParseError, match="kitchen_9") as info:
        parse_graph(doc)
    assert info.value.location == "edges[0][2]"


def test_parse_reports_duplicate_out_edge():
    doc = '{"nodes": ["A", "B"], "behaviors": ["x"], "edges": [["A", "x", "B"], ["A", "x", "A"]]}'
    with pytest.raises(GraphParseError, match="determinism") as info:
        parse_graph(doc)
    assert info.value.location == "edges[1]"


def test_parse_reports_json_line():
    with pytest.raises(GraphParseError, match="line 2"):
        parse_graph('{"nodes": [],\n "behaviors": [}')


def test_parse_missing_field():
    with pytest.raises(GraphParseError, match="edges"):
        parse_graph('{"nodes": [], "behaviors": []}')
