import json
from collections import defaultdict

import numpy as np
import pytest

from navtrans import grammar
from navtrans.corpus import (
    RESERVED,
    UNK,
    CorpusConfig,
    CorpusError,
    Sample,
    build_corpus,
    build_vocab,
    generate_environment,
    generate_instruction,
    load_corpus,
    load_pretrained_embeddings,
    save_corpus,
    split_sizes,
)
from navtrans.graph import BehaviorGraph, Triplet, validate_plan


def strongly_connected(graph):
    # transitive closure by repeated squaring of the adjacency matrix
    n = graph.num_nodes
    reach = np.eye(n, dtype=bool)
    for e in graph.edges:
        reach[graph.node_index[e.n1], graph.node_index[e.n2]] = True
    for _ in range(int(np.ceil(np.log2(max(n, 2)))) + 1):
        reach = reach | ((reach.astype(int) @ reach.astype(int)) > 0)
    return bool(reach.all())


@pytest.fixture(scope="module")
def small_corpus():
    return build_corpus(CorpusConfig(num_maps=6, samples_per_map=30, rooms_max=20, split_ratios=(0.6, 0.2, 0.2), seed=3))


def test_two_rooms_one_behavior_is_the_two_cycle():
    cfg = CorpusConfig(rooms_min=2, rooms_max=2, behavior_vocab=["go"])
    for seed in range(5):
        g = generate_environment(cfg, seed)
        assert g.num_nodes == 2
        a, b = g.nodes
        assert set(g.edges) == {Triplet(a, "go", b), Triplet(b, "go", a)}


def test_single_behavior_rings_stay_deterministic():
    g = generate_environment(CorpusConfig(rooms_min=7, rooms_max=7, behavior_vocab=["go"]), 1)
    assert strongly_connected(g)


def test_default_room_counts_in_range():
    cfg = CorpusConfig()
    counts = [generate_environment(cfg, s).num_nodes for s in range(100)]
    assert min(counts) >= 6 and max(counts) <= 65


def test_environments_are_sound():
    cfg = CorpusConfig(rooms_max=30)
    for seed in range(40):
        g = generate_environment(cfg, seed)
        assert strongly_connected(g)
        assert all(e.n1 != e.n2 for e in g.edges)
        owners = [(e.n1, e.b) for e in g.edges]
        assert len(owners) == len(set(owners))


def test_bad_config_rejected():
    with pytest.raises(CorpusError):
        generate_environment(CorpusConfig(rooms_min=1, rooms_max=3), 0)
    with pytest.raises(CorpusError):
        CorpusConfig(split_ratios=(0.5, 0.2, 0.2)).validate()


def test_instruction_template_zero():
    path = [Triplet("office1", "exit_office", "corridor2")]
    assert grammar.render_instruction(path, [0]) == ["exit", "the", "office"]


def test_landmark_names_destination():
    path = [Triplet("office_1", "follow_corridor", "meeting_room_4")]
    words = grammar.render_instruction(path, [0], landmarks=[1])
    assert words == "follow the corridor until you reach the meeting room".split()


def test_instruction_is_deterministic():
    g = generate_environment(CorpusConfig(rooms_max=10), 0)
    path = [g.out_edges(g.nodes[0])[0]]
    assert generate_instruction(g, path, 42) == generate_instruction(g, path, 42)


def test_instruction_rejects_broken_path():
    g = BehaviorGraph(["A", "B"], ["go"], [("A", "go", "B"), ("B", "go", "A")])
    with pytest.raises(ValueError):
        generate_instruction(g, [Triplet("A", "go", "A")], 0)


def test_grammar_coverage_over_1000_samples():
    g = generate_environment(CorpusConfig(rooms_max=20), 5)
    rng = np.random.default_rng(0)
    surfaces = defaultdict(set)
    for i in range(1000):
        e = g.edges[int(rng.integers(len(g.edges)))]
        words = generate_instruction(g, [e], i, landmark_prob=0.0)
        surfaces[e.b].add(tuple(words))
    used = {e.b for e in g.edges}
    for b in used:
        assert len(surfaces[b]) >= 2, b


def test_unknown_behaviors_get_fallback_templates():
    opts = grammar.templates_for("open_door")
    assert len(set(opts)) >= 2 and opts[0] == "open door"


def test_split_arithmetic_twenty_maps():
    sizes = split_sizes(CorpusConfig(num_maps=20, split_ratios=(0.8, 0.1, 0.1)))
    assert sizes["new_maps"] == 2


def test_too_few_maps_is_infeasible():
    with pytest.raises(CorpusError):
        build_corpus(CorpusConfig(num_maps=2, split_ratios=(0.8, 0.1, 0.1)))


def test_paper_sized_split():
    # 10,040 instructions, 8,066 for training
    cfg = CorpusConfig(
        num_maps=100,
        total_samples=10040,
        split_ratios=(8066 / 10040, 987 / 10040, 987 / 10040),
        rooms_max=20,
    )
    corpus = build_corpus(cfg)
    n = {k: len(v) for k, v in corpus.splits.items()}
    assert sum(n.values()) == 10040
    assert abs(n["train"] - 8066) / 8066 < 0.01


def test_split_invariants(small_corpus):
    c = small_corpus
    train_maps = c.map_ids("train")
    assert not train_maps & c.map_ids("test_new")
    assert c.map_ids("test_repeated") <= train_maps
    train_keys = {s.key for s in c.splits["train"]}
    assert not any(s.key in train_keys for s in c.splits["test_repeated"])
    for split in c.splits.values():
        for s in split:
            assert validate_plan(c.graphs[s.graph_id], s.start, s.target_plan) == s.goal
            assert s.instruction and 1 <= len(s.target_plan) <= 8


def test_save_load_round_trip(small_corpus, tmp_path):
    save_corpus(small_corpus, tmp_path)
    loaded = load_corpus(tmp_path)
    assert loaded.splits == small_corpus.splits
    assert loaded.graphs == small_corpus.graphs
    assert loaded.config == small_corpus.config


def test_build_is_byte_reproducible(tmp_path):
    cfg = CorpusConfig(num_maps=5, samples_per_map=10, rooms_max=15, split_ratios=(0.6, 0.2, 0.2), seed=9)
    for d in ("a", "b"):
        save_corpus(build_corpus(cfg), tmp_path / d)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def _rewrite_record(path, lineno, edit):
    lines = (path / "corpus.jsonl").read_text().splitlines()
    rec = json.loads(lines[lineno - 1])
    edit(rec)
    lines[lineno - 1] = json.dumps(rec)
    (path / "corpus.jsonl").write_text("\n".join(lines) + "\n")


def test_load_reports_missing_field(small_corpus, tmp_path):
    save_corpus(small_corpus, tmp_path)
    _rewrite_record(tmp_path, 3, lambda r: r.pop("target_plan"))
    with pytest.raises(CorpusError, match="record 3: missing field 'target_plan'"):
        load_corpus(tmp_path)


def test_load_validates_plans(small_corpus, tmp_path):
    save_corpus(small_corpus, tmp_path)
    s = small_corpus.splits["train"][4]
    other = next(n for n in small_corpus.graphs[s.graph_id].nodes if n != s.goal)
    _rewrite_record(tmp_path, 5, lambda r: r.update(goal=other))
    with pytest.raises(CorpusError, match="record 5"):
        load_corpus(tmp_path)


def _sample(words):
    return Sample(tuple(words), "g", "A", "B", ("go",))


def test_vocab_size_and_unk():
    vocab = build_vocab([_sample("turn left now".split()), _sample("now turn left".split())])
    assert len(vocab) == 3 + 4
    assert vocab.tokens[:4] == list(RESERVED)
    assert vocab["staircase"] == UNK


def test_vocab_order_frequency_then_alpha():
    samples = [_sample("b a c a".split()), _sample("c d b".split())]
    vocab = build_vocab(samples)
    # counts: a2 b2 c2 d1 -> ties alphabetical
    assert vocab.tokens[4:] == ["a", "b", "c", "d"]
    assert build_vocab(samples).tokens == vocab.tokens


def test_pretrained_rows_copied(tmp_path):
    f = tmp_path / "vec.txt"
    f.write_text("the 0.1 0.2\nhall 0.5 -0.3\n")
    vocab = build_vocab([_sample(["the", "office"])])
    table = load_pretrained_embeddings(f, vocab, seed=1)
    assert table.shape == (len(vocab), 2)
    np.testing.assert_array_equal(table[vocab["the"]], [0.1, 0.2])


def test_pretrained_missing_rows_are_seeded(tmp_path):
    f = tmp_path / "vec.txt"
    f.write_text("zebra 1.0 2.0 3.0\nyak -1.0 0.0 1.0\n")
    vocab = build_vocab([_sample(["the", "office"])])
    a = load_pretrained_embeddings(f, vocab, seed=5)
    b = load_pretrained_embeddings(f, vocab, seed=5)
    np.testing.assert_array_equal(a, b)


def test_pretrained_dimension_mismatch(tmp_path):
    f = tmp_path / "vec.txt"
    f.write_text("a 1 2 3\nb 1 2\n")
    with pytest.raises(CorpusError, match="line 2"):
        load_pretrained_embeddings(f, build_vocab([_sample(["a"])]), seed=0)


def test_pretrained_statistics(tmp_path):
    rng = np.random.default_rng(0)
    words = [f"w{i}" for i in range(400)]
    vecs = rng.normal(0.3, [0.5, 1.0, 2.0, 0.1], size=(400, 4))
    f = tmp_path / "vec.txt"
    f.write_text("".join(f"{w} " + " ".join(f"{x:.6f}" for x in v) + "\n" for w, v in zip(words, vecs)))
    vocab = build_vocab([_sample(words[:100] + [f"oov{i}" for i in range(300)])])
    table = load_pretrained_embeddings(f, vocab, seed=0)
    file_sd = np.loadtxt(f, usecols=range(1, 5)).std(axis=0)
    assert np.all(np.abs(table.std(axis=0) / file_sd - 1) < 0.2)
