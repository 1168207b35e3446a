"""Synthetic environments, instruction corpora, vocabularies and embeddings."""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import grammar
from .graph import (
    BehaviorGraph,
    GraphError,
    Triplet,
    bfs_distances,
    is_strongly_connected,
    parse_graph,
    serialize_graph,
    shortest_path,
    validate_plan,
)

SPLITS = ("train", "test_repeated", "test_new")

PAD, UNK, SOS, EOS = 0, 1, 2, 3
RESERVED = ("<pad>", "<unk>", "<s>", "</s>")


class CorpusError(ValueError):
    pass


@dataclass
class CorpusConfig:
    num_maps: int = 100
    rooms_min: int = 6
    rooms_max: int = 65
    behavior_vocab: list[str] = field(default_factory=lambda: list(grammar.DEFAULT_BEHAVIORS))
    samples_per_map: int = 100
    # overrides samples_per_map when set; spread as evenly as possible over maps
    total_samples: int | None = None
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0
    path_len_min: int = 1
    path_len_max: int = 8
    max_degree: int = 4
    extra_edge_ratio: float = 0.15
    landmark_prob: float = 0.3

    def __post_init__(self):
        self.behavior_vocab = list(self.behavior_vocab)
        self.split_ratios = tuple(float(r) for r in self.split_ratios)

    def validate(self) -> None:
        if self.rooms_min < 2 or self.rooms_max < self.rooms_min:
            raise CorpusError(f"need 2 <= rooms_min <= rooms_max, got {self.rooms_min}, {self.rooms_max}")
        if not self.behavior_vocab or len(set(self.behavior_vocab)) != len(self.behavior_vocab):
            raise CorpusError("behavior_vocab must be a nonempty list of distinct ids")
        if len(self.split_ratios) != 3 or any(r < 0 for r in self.split_ratios):
            raise CorpusError("split_ratios must be three nonnegative fractions")
        if abs(sum(self.split_ratios) - 1.0) > 1e-9:
            raise CorpusError(f"split_ratios must sum to 1, got {sum(self.split_ratios)}")
        if self.num_maps < 1:
            raise CorpusError("num_maps must be >= 1")
        if not 1 <= self.path_len_min <= self.path_len_max:
            raise CorpusError("need 1 <= path_len_min <= path_len_max")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split_ratios"] = list(self.split_ratios)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise CorpusError(f"unknown corpus config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class Sample:
    instruction: tuple[str, ...]
    graph_id: str
    start: str
    goal: str
    target_plan: tuple[str, ...]

    @property
    def key(self) -> tuple:
        return (self.graph_id, self.start, self.goal, self.instruction)


@dataclass
class Corpus:
    graphs: dict[str, BehaviorGraph]
    splits: dict[str, list[Sample]]
    config: CorpusConfig | None = None

    def __getitem__(self, split: str) -> list[Sample]:
        return self.splits[split]

    def map_ids(self, split: str) -> set[str]:
        return {s.graph_id for s in self.splits[split]}


# ---------------------------------------------------------------- environments


def generate_environment(config: CorpusConfig, seed, max_tries: int = 50) -> BehaviorGraph:
    """Random strongly connected behavior graph with a uniform room count.

    Rooms are linked by a degree-capped random spanning tree traversable in
    both directions, then a few extra two-way shortcuts.  With a single
    behavior a tree cannot stay deterministic, so a directed ring is used.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    behaviors = list(config.behavior_vocab)
    nb = len(behaviors)
    for _ in range(max_tries):
        n = int(rng.integers(config.rooms_min, config.rooms_max + 1))
        kinds = rng.choice(len(grammar.ROOM_KINDS), size=n)
        nodes = [f"{grammar.ROOM_KINDS[k]}_{i}" for i, k in enumerate(kinds)]
        try:
            pairs = _link_rooms(rng, n, nb, config)
            edges = _label_edges(rng, pairs, nodes, behaviors)
            graph = BehaviorGraph(nodes, behaviors, edges)
        except _Retry:
            continue
        if is_strongly_connected(graph):
            return graph
    raise CorpusError(f"environment generation failed after {max_tries} tries; config too tight?")


class _Retry(Exception):
    pass


def _link_rooms(rng, n: int, nb: int, config: CorpusConfig) -> list[tuple[int, int]]:
    if nb == 1:
        order = rng.permutation(n)
        return [(int(order[i]), int(order[(i + 1) % n])) for i in range(n)]
    cap = max(2, min(nb, config.max_degree))
    degree = np.zeros(n, dtype=int)
    links: set[tuple[int, int]] = set()
    order = rng.permutation(n)
    for k in range(1, n):
        child = int(order[k])
        open_ = [int(order[j]) for j in range(k) if degree[order[j]] < cap]
        if not open_:
            raise _Retry
        parent = open_[int(rng.integers(len(open_)))]
        links.add((min(child, parent), max(child, parent)))
        degree[child] += 1
        degree[parent] += 1
    for _ in range(int(round(config.extra_edge_ratio * n))):
        u, v = (int(x) for x in rng.choice(n, size=2, replace=False))
        pair = (min(u, v), max(u, v))
        if pair in links or degree[u] >= nb or degree[v] >= nb:
            continue
        links.add(pair)
        degree[u] += 1
        degree[v] += 1
    pairs = []
    for u, v in sorted(links):
        pairs += [(u, v), (v, u)]
    return pairs


def _label_edges(rng, pairs, nodes, behaviors) -> list[Triplet]:
    used: dict[int, set[int]] = {}
    edges = []
    for u, v in pairs:
        taken = used.setdefault(u, set())
        free = [b for b in range(len(behaviors)) if b not in taken]
        if not free:
            raise _Retry
        b = free[int(rng.integers(len(free)))]
        taken.add(b)
        edges.append(Triplet(nodes[u], behaviors[b], nodes[v]))
    return edges


def generate_instruction(graph: BehaviorGraph, path: Sequence[Triplet], seed, landmark_prob: float = 0.3) -> list[str]:
    for i, e in enumerate(path):
        if graph.step(e.n1, e.b) != e.n2:
            raise GraphError(f"path step {i} {tuple(e)} is not an edge of the graph")
        if i and path[i - 1].n2 != e.n1:
            raise GraphError(f"path step {i} does not continue from {path[i - 1].n2!r}")
    return grammar.generate_instruction(path, seed, landmark_prob)


# ---------------------------------------------------------------- corpora


def _spread(total: int, parts: int) -> list[int]:
    base, rem = divmod(total, parts)
    return [base + (1 if i < rem else 0) for i in range(parts)]


def split_sizes(config: CorpusConfig) -> dict:
    """Map counts and per-split sample counts implied by the config."""
    config.validate()
    m = config.num_maps
    r_train, r_rep, r_new = config.split_ratios
    n_new_maps = int(math.floor(m * r_new + 0.5))
    if r_new > 0 and n_new_maps == 0:
        raise CorpusError(f"{m} maps are too few to reserve any for test_new at ratio {r_new}")
    if n_new_maps >= m:
        raise CorpusError(f"test_new would take all {m} maps; nothing left to train on")
    total = config.total_samples if config.total_samples is not None else m * config.samples_per_map
    per_map = _spread(total, m)
    return {"new_maps": n_new_maps, "per_map": per_map, "r_rep_of_seen": r_rep / (r_train + r_rep)}


def _sample_once(graph: BehaviorGraph, graph_id: str, rng, config: CorpusConfig) -> Sample:
    start = graph.nodes[int(rng.integers(graph.num_nodes))]
    dist = bfs_distances(graph, start)
    reach = max(dist.values())
    hi = min(config.path_len_max, reach)
    lo = min(config.path_len_min, hi)
    length = int(rng.integers(lo, hi + 1))
    ring = [n for n in graph.nodes if dist.get(n) == length]
    goal = ring[int(rng.integers(len(ring)))]
    path = shortest_path(graph, start, goal)
    words = generate_instruction(graph, path, int(rng.integers(2**63 - 1)), config.landmark_prob)
    return Sample(tuple(words), graph_id, start, goal, tuple(e.b for e in path))


def build_corpus(config: CorpusConfig, max_rejects: int = 1000) -> Corpus:
    """Generate maps and the train / test_repeated / test_new splits.

    test_new maps never appear in train.  test_repeated samples live on train
    maps but never repeat a (map, start, goal, instruction) combination seen
    in train.
    """
    sizes = split_sizes(config)
    m = config.num_maps
    root = np.random.SeedSequence(config.seed)
    map_seq, split_seq, sample_seq = root.spawn(3)
    graph_seeds = map_seq.spawn(m)
    graphs = {}
    ids = [f"map_{i:03d}" for i in range(m)]
    for gid, s in zip(ids, graph_seeds):
        graphs[gid] = generate_environment(config, s)

    perm = np.random.default_rng(split_seq).permutation(m)
    new_ids = sorted(ids[i] for i in perm[: sizes["new_maps"]])
    seen_ids = [g for g in ids if g not in set(new_ids)]

    per_map = dict(zip(ids, sizes["per_map"]))
    seen_total = sum(per_map[g] for g in seen_ids)
    n_rep = int(math.floor(seen_total * sizes["r_rep_of_seen"] + 0.5))
    rep_per_map = dict(zip(seen_ids, _spread(n_rep, len(seen_ids))))

    splits: dict[str, list[Sample]] = {k: [] for k in SPLITS}
    sample_seeds = dict(zip(ids, sample_seq.spawn(m)))
    for gid in ids:
        rng = np.random.default_rng(sample_seeds[gid])
        g = graphs[gid]
        if gid in new_ids:
            splits["test_new"] += [_sample_once(g, gid, rng, config) for _ in range(per_map[gid])]
            continue
        n_rep_here = min(rep_per_map[gid], per_map[gid])
        train = [_sample_once(g, gid, rng, config) for _ in range(per_map[gid] - n_rep_here)]
        train_keys = {s.key for s in train}
        rep = []
        rejects = 0
        while len(rep) < n_rep_here:
            s = _sample_once(g, gid, rng, config)
            if s.key in train_keys:
                rejects += 1
                if rejects > max_rejects:
                    raise CorpusError(f"{gid}: cannot find unseen test_repeated samples")
                continue
            rep.append(s)
        splits["train"] += train
        splits["test_repeated"] += rep
    if not splits["train"]:
        raise CorpusError("config leaves the train split empty")
    return Corpus(graphs, splits, config)


# ---------------------------------------------------------------- files


def sample_record(s: Sample, split: str) -> dict:
    return {
        "instruction": list(s.instruction),
        "graph_id": s.graph_id,
        "start": s.start,
        "goal": s.goal,
        "target_plan": list(s.target_plan),
        "split": split,
    }


def save_corpus(corpus: Corpus, path) -> None:
    """Write ``graphs/<id>.json`` and ``corpus.jsonl`` under ``path``."""
    root = Path(path)
    (root / "graphs").mkdir(parents=True, exist_ok=True)
    for gid in sorted(corpus.graphs):
        (root / "graphs" / f"{gid}.json").write_text(serialize_graph(corpus.graphs[gid]))
    with open(root / "corpus.jsonl", "w") as fh:
        for split in SPLITS:
            for s in corpus.splits.get(split, []):
                fh.write(json.dumps(sample_record(s, split), sort_keys=True) + "\n")
    if corpus.config is not None:
        (root / "corpus_config.json").write_text(json.dumps(corpus.config.to_dict(), indent=2, sort_keys=True) + "\n")


def _record_to_sample(rec, lineno: int) -> tuple[Sample, str]:
    if not isinstance(rec, dict):
        raise CorpusError(f"record {lineno}: expected an object")
    for key, kind in (
        ("instruction", list),
        ("graph_id", str),
        ("start", str),
        ("goal", str),
        ("target_plan", list),
        ("split", str),
    ):
        if key not in rec:
            raise CorpusError(f"record {lineno}: missing field {key!r}")
        if not isinstance(rec[key], kind):
            raise CorpusError(f"record {lineno}: field {key!r} should be a {kind.__name__}")
    if rec["split"] not in SPLITS:
        raise CorpusError(f"record {lineno}: unknown split {rec['split']!r}")
    if not rec["instruction"]:
        raise CorpusError(f"record {lineno}: empty instruction")
    if not rec["target_plan"]:
        raise CorpusError(f"record {lineno}: empty target_plan")
    s = Sample(
        tuple(rec["instruction"]), rec["graph_id"], rec["start"], rec["goal"], tuple(rec["target_plan"])
    )
    return s, rec["split"]


def load_corpus(path) -> Corpus:
    root = Path(path)
    if not (root / "corpus.jsonl").is_file():
        raise CorpusError(f"no corpus.jsonl under {root}")
    graphs = {}
    for gfile in sorted((root / "graphs").glob("*.json")):
        try:
            graphs[gfile.stem] = parse_graph(gfile.read_text())
        except GraphError as err:
            raise CorpusError(f"{gfile.name}: {err}") from None
    splits: dict[str, list[Sample]] = {k: [] for k in SPLITS}
    with open(root / "corpus.jsonl") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as err:
                raise CorpusError(f"record {lineno}: {err.msg}") from None
            s, split = _record_to_sample(rec, lineno)
            if s.graph_id not in graphs:
                raise CorpusError(f"record {lineno}: unknown graph_id {s.graph_id!r}")
            try:
                end = validate_plan(graphs[s.graph_id], s.start, s.target_plan)
            except GraphError as err:
                raise CorpusError(f"record {lineno}: {err}") from None
            if end != s.goal:
                raise CorpusError(f"record {lineno}: target_plan ends at {end!r}, not goal {s.goal!r}")
            splits[split].append(s)
    config = None
    if (root / "corpus_config.json").is_file():
        config = CorpusConfig.from_dict(json.loads((root / "corpus_config.json").read_text()))
    return Corpus(graphs, splits, config)


# ---------------------------------------------------------------- vocabulary


@dataclass
class Vocabulary:
    tokens: list[str]
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[:4]) != RESERVED:
            raise ValueError(f"first four tokens must be {RESERVED}")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    def __getitem__(self, token: str) -> int:
        return self.index.get(token, UNK)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.index.get(t, UNK) for t in tokens]


def build_vocab(samples: Sequence[Sample]) -> Vocabulary:
    """Train-split vocabulary, most frequent first, ties broken alphabetically."""
    if not samples:
        raise CorpusError("cannot build a vocabulary from an empty split")
    counts = Counter(t for s in samples for t in s.instruction)
    for r in RESERVED:
        counts.pop(r, None)
    ordered = sorted(counts, key=lambda t: (-counts[t], t))
    return Vocabulary(list(RESERVED) + ordered)


def load_pretrained_embeddings(path, vocab: Vocabulary, seed: int = 0) -> np.ndarray:
    """Read a GloVe-style text file into a ``len(vocab) x D`` matrix.

    Words missing from the file (and reserved tokens) get seeded random rows
    drawn with the file's per-dimension mean and standard deviation.
    """
    vectors: dict[str, np.ndarray] = {}
    all_rows = []
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split(" ")
            parts = [p for p in parts if p]
            if not parts:
                continue
            if lineno == 1 and len(parts) == 2 and all(p.isdigit() for p in parts):
                continue  # word2vec-style "count dim" header
            word, values = parts[0], parts[1:]
            if dim is None:
                dim = len(values)
                if dim == 0:
                    raise CorpusError(f"line {lineno}: no vector values")
            elif len(values) != dim:
                raise CorpusError(f"line {lineno}: expected {dim} values, found {len(values)}")
            try:
                row = np.array([float(v) for v in values])
            except ValueError:
                raise CorpusError(f"line {lineno}: non-numeric vector value") from None
            all_rows.append(row)
            if word in vocab.index and word not in vectors:
                vectors[word] = row
    if dim is None:
        raise CorpusError(f"{path}: no vectors found")
    table = np.stack(all_rows)
    mu = table.mean(axis=0)
    sd = table.std(axis=0)
    rng = np.random.default_rng(seed)
    out = mu + sd * rng.standard_normal((len(vocab), dim))
    for word, row in vectors.items():
        out[vocab.index[word]] = row
    return out
