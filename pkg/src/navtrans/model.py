"""The full translator: encoders, attention fusion, plan decoder."""
from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import PAD, Sample, Vocabulary
from .decoder import DecodeResult, DecoderParams, greedy_decode_batch, teacher_forced_logits
from .encoders import BiGruParams, EncoderOutput, bigru_encode, encode_instruction
from .fusion import FusedContext, FusionParams, fuse
from .graph import BehaviorGraph, encode_triplets


@dataclass
class Batch:
    samples: list[Sample]
    tokens: np.ndarray  # (B, T) word ids, PAD padded
    token_mask: np.ndarray  # (B, T)
    graph_x: np.ndarray  # (G, E, 2N + nb) one-hot triplets of the distinct graphs
    graph_mask: np.ndarray  # (G, E)
    graph_index: np.ndarray  # (B,) row of graph_x for each sample
    start: np.ndarray  # (B,) start node index within its graph
    plan: np.ndarray  # (B, L) behavior ids, padded with end-of-plan
    target: np.ndarray  # (B, L + 1) plan followed by end-of-plan
    target_mask: np.ndarray  # (B, L + 1)

    def __len__(self) -> int:
        return len(self.samples)


class NavTranslator:
    """Parameter container plus the batched forward passes.

    Every parameter group draws its initial values from its own stream
    derived from ``(seed, group name)``, so changing the head count only
    changes the fusion parameters.
    """

    def __init__(
        self,
        vocab: Vocabulary,
        behaviors: Sequence[str],
        max_nodes: int,
        hidden_size: int = 64,
        embedding_dim: int = 32,
        heads: int = 4,
        context_dim: int = 64,
        seed: int = 0,
        embeddings: np.ndarray | None = None,
    ):
        self.vocab = vocab
        self.behaviors = list(behaviors)
        self.behavior_index = {b: i for i, b in enumerate(self.behaviors)}
        self.max_nodes = max_nodes
        self.hidden_size = hidden_size
        self.embedding_dim = embedding_dim
        self.heads = heads
        self.context_dim = context_dim
        d_model = 2 * hidden_size
        if d_model % heads:
            raise ValueError(f"heads={heads} must divide d_model={d_model}")
        nb = len(self.behaviors)

        def stream(group: str) -> np.random.Generator:
            return np.random.default_rng([seed, zlib.crc32(group.encode())])

        if embeddings is not None:
            if embeddings.shape[0] != len(vocab):
                raise ValueError(f"embedding rows {embeddings.shape[0]} != vocab size {len(vocab)}")
            self.embedding_dim = embedding_dim = embeddings.shape[1]
            self.word_emb = Tensor(np.array(embeddings, dtype=float), requires_grad=True)
        else:
            self.word_emb = ad.seeded_uniform(stream("word_emb"), (len(vocab), embedding_dim), 1.0 / np.sqrt(hidden_size))
        self.instr = BiGruParams.init(stream("instr"), embedding_dim, hidden_size)
        self.graph = BiGruParams.init(stream("graph"), 2 * max_nodes + nb, hidden_size)
        self.fusion = FusionParams.init(stream("fusion"), d_model, heads, context_dim)
        self.decoder = DecoderParams.init(stream("decoder"), nb, max_nodes, embedding_dim, context_dim, hidden_size)
        self._graph_cache: dict[BehaviorGraph, np.ndarray] = {}

    # ------------------------------------------------------------ parameters

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"word_emb": self.word_emb}
        for prefix, group in (("instr", self.instr), ("graph", self.graph), ("fusion", self.fusion), ("decoder", self.decoder)):
            out.update({f"{prefix}.{k}": v for k, v in group.tensors().items()})
        return dict(sorted(out.items()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ValueError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, t in params.items():
            arr = np.asarray(state[k], dtype=float)
            if arr.shape != t.shape:
                raise ValueError(f"{k}: expected shape {t.shape}, got {arr.shape}")
            t.data = arr.copy()

    def zero_grad(self) -> None:
        for t in self.named_parameters().values():
            t.grad = None

    def hyper(self) -> dict:
        return {
            "hidden_size": self.hidden_size,
            "embedding_dim": self.embedding_dim,
            "heads": self.heads,
            "context_dim": self.context_dim,
            "max_nodes": self.max_nodes,
        }

    # ------------------------------------------------------------ batching

    def _triplets(self, graph: BehaviorGraph) -> np.ndarray:
        enc = self._graph_cache.get(graph)
        if enc is None:
            if tuple(graph.behaviors) != tuple(self.behaviors):
                raise ValueError("graph behavior vocabulary differs from the model's")
            enc = encode_triplets(graph, self.max_nodes)
            self._graph_cache[graph] = enc
        return enc

    def make_batch(self, samples: Sequence[Sample], graphs: Mapping[str, BehaviorGraph], with_targets: bool = True) -> Batch:
        samples = list(samples)
        n = len(samples)
        longest = max(len(s.instruction) for s in samples)
        tokens = np.full((n, longest), PAD, dtype=np.intp)
        tmask = np.zeros((n, longest))
        for i, s in enumerate(samples):
            ids = self.vocab.encode(s.instruction)
            tokens[i, : len(ids)] = ids
            tmask[i, : len(ids)] = 1.0

        order: dict[str, int] = {}
        for s in samples:
            order.setdefault(s.graph_id, len(order))
        encs = []
        for gid in order:
            if gid not in graphs:
                raise KeyError(f"graph {gid!r} missing from graph store")
            encs.append(self._triplets(graphs[gid]))
        edges = max(e.shape[0] for e in encs)
        gx = np.zeros((len(encs), edges, encs[0].shape[1]))
        gmask = np.zeros((len(encs), edges))
        for i, e in enumerate(encs):
            gx[i, : e.shape[0]] = e
            gmask[i, : e.shape[0]] = 1.0
        gidx = np.array([order[s.graph_id] for s in samples], dtype=np.intp)
        start = np.array([graphs[s.graph_id].node_index[s.start] for s in samples], dtype=np.intp)
        if start.max() >= self.max_nodes:
            raise ValueError(f"graph has more than max_nodes={self.max_nodes} nodes")

        eos = len(self.behaviors)
        plen = max(len(s.target_plan) for s in samples) if with_targets else 0
        plan = np.full((n, plen), eos, dtype=np.intp)
        target = np.full((n, plen + 1), eos, dtype=np.intp)
        target_mask = np.zeros((n, plen + 1))
        if with_targets:
            for i, s in enumerate(samples):
                ids = [self.behavior_index[b] for b in s.target_plan]
                plan[i, : len(ids)] = ids
                target[i, : len(ids)] = ids
                target_mask[i, : len(ids) + 1] = 1.0
        return Batch(samples, tokens, tmask, gx, gmask, gidx, start, plan, target, target_mask)

    # ------------------------------------------------------------ forward

    def encode(self, batch: Batch) -> FusedContext:
        instr = encode_instruction(batch.tokens, self.word_emb, self.instr, batch.token_mask)
        genc = bigru_encode(Tensor(batch.graph_x), self.graph.fwd, self.graph.bwd, batch.graph_mask)
        states = ad.take(genc.states, batch.graph_index)
        per_sample = EncoderOutput(states, ad.take(genc.final, batch.graph_index), batch.graph_mask[batch.graph_index])
        return fuse(instr, per_sample, self.fusion)

    def logits(self, batch: Batch) -> Tensor:
        ctx = self.encode(batch)
        return teacher_forced_logits(batch.start, batch.plan, ctx, self.decoder)

    def predict(self, batch: Batch, max_len: int = 16) -> DecodeResult:
        ctx = self.encode(batch)
        return greedy_decode_batch(batch.start, ctx, self.decoder, max_len)

    def plan_names(self, ids: Sequence[int]) -> list[str]:
        return [self.behaviors[i] for i in ids]
