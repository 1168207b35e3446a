"""Cross-entropy training, evaluation and checkpoints."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import tensorio
from .autodiff import Tape, Tensor
from .corpus import Corpus, Sample, Vocabulary, build_vocab, load_pretrained_embeddings
from .graph import BehaviorGraph, GraphError, validate_plan
from .metrics import MetricsReport, SampleRecord, aggregate
from .model import Batch, NavTranslator

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 256
    heads: int = 4
    learning_rate: float = 1e-3
    seed: int = 0
    hidden_size: int = 64
    embedding_dim: int = 32
    context_dim: int = 64
    max_decode_len: int = 16
    clip_norm: float = 5.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    # 0 writes only the final checkpoint
    checkpoint_interval: int = 0
    # validation M@0 is computed every eval_every epochs (0 = never)
    eval_every: int = 0
    val_split: str = "test_repeated"
    corpus_path: str | None = None
    pretrained_embeddings: str | None = None

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.heads < 1 or (2 * self.hidden_size) % self.heads:
            raise ValueError(f"heads={self.heads} must divide d_model={2 * self.hidden_size}")
        if self.context_dim >= 2 * self.hidden_size:
            raise ValueError("context_dim must be smaller than d_model = 2 * hidden_size")
        if self.max_decode_len < 1:
            raise ValueError("max_decode_len must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------- loss


def cross_entropy_loss(logits: Tensor, target, mask=None) -> Tensor:
    """Mean negative log-likelihood of the gold ids.

    ``logits`` is ``(L + 1, K)`` for one plan or ``(B, L + 1, K)`` for a
    padded batch; each sample's loss is the mean over its unmasked positions
    and the batch loss is the mean over samples.
    """
    target = np.asarray(target, dtype=np.intp)
    k = logits.shape[-1]
    if target.shape != logits.shape[:-1]:
        raise ValueError(f"target shape {target.shape} does not match logits {logits.shape}")
    if target.size and (target.min() < 0 or target.max() >= k):
        raise ValueError(f"gold index out of range 0..{k - 1}")
    mask = np.ones(target.shape) if mask is None else np.asarray(mask, dtype=float)
    onehot = np.zeros(logits.shape)
    np.put_along_axis(onehot, target[..., None], 1.0, axis=-1)
    picked = ad.sum_(ad.log_softmax(logits, axis=-1) * Tensor(onehot), axis=-1)
    per_sample = mask.sum(axis=-1, keepdims=True)
    samples = mask[..., 0].size
    weights = mask / np.maximum(per_sample, 1.0) / samples
    return ad.scale(ad.sum_(picked * Tensor(weights)), -1.0)


def batch_loss(model: NavTranslator, batch: Batch) -> Tensor:
    return cross_entropy_loss(model.logits(batch), batch.target, batch.target_mask)


# ---------------------------------------------------------------- optimizer


def clip_grad_norm(grads: Sequence[np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``.
    Returns the norm before clipping."""
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if norm > max_norm > 0:
        s = max_norm / norm
        for g in grads:
            g *= s
    return norm


class Adam:
    def __init__(self, names: Sequence[str], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: Mapping[str, Tensor]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if self.lr:
                p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, model: NavTranslator, config: TrainConfig, epoch: int, rng_state: dict | None = None) -> None:
    meta = {
        "config": config.to_dict(),
        "epoch": epoch,
        "rng_state": rng_state,
        "vocab": list(model.vocab.tokens),
        "behaviors": list(model.behaviors),
        "model": model.hyper(),
    }
    tensorio.save(path, model.state_dict(), meta)


def load_checkpoint(path) -> tuple[NavTranslator, dict]:
    tensors, meta = tensorio.load(path)
    hyper = meta["model"]
    model = NavTranslator(
        Vocabulary(meta["vocab"]),
        meta["behaviors"],
        hyper["max_nodes"],
        hidden_size=hyper["hidden_size"],
        embedding_dim=hyper["embedding_dim"],
        heads=hyper["heads"],
        context_dim=hyper["context_dim"],
    )
    model.load_state_dict(tensors)
    return model, meta


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    model: NavTranslator
    log: list[dict]
    checkpoint: Path | None = None
    # parameters that never received a nonzero gradient during epoch 1
    dead_params: list[str] = field(default_factory=list)
    rng_state: dict | None = None


def build_model(config: TrainConfig, corpus: Corpus) -> NavTranslator:
    train = corpus.splits["train"]
    vocab = build_vocab(train)
    behaviors = next(iter(corpus.graphs.values())).behaviors
    max_nodes = max(g.num_nodes for g in corpus.graphs.values())
    if corpus.config is not None:
        max_nodes = max(max_nodes, corpus.config.rooms_max)
    embeddings = None
    if config.pretrained_embeddings:
        embeddings = load_pretrained_embeddings(config.pretrained_embeddings, vocab, seed=config.seed)
    return NavTranslator(
        vocab,
        behaviors,
        max_nodes,
        hidden_size=config.hidden_size,
        embedding_dim=config.embedding_dim,
        heads=config.heads,
        context_dim=config.context_dim,
        seed=config.seed,
        embeddings=embeddings,
    )


def train(
    config: TrainConfig,
    corpus: Corpus,
    out_dir=None,
    model: NavTranslator | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Teacher-forced training for ``config.epochs`` epochs.

    Writes ``epochs.jsonl`` and ``checkpoint.nvts`` (plus periodic
    ``checkpoint_eXXXX.nvts``) when ``out_dir`` is given.
    """
    config.validate()
    train_set = corpus.splits["train"]
    if not train_set:
        raise ValueError("empty train split")
    model = model or build_model(config, corpus)
    params = model.named_parameters()
    opt = Adam(list(params), config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps)
    rng = np.random.default_rng([config.seed, 1])
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "epochs.jsonl").write_text("")
    records: list[dict] = []
    touched: set[str] = set()
    val = corpus.splits.get(config.val_split) or []

    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(train_set))
        total = 0.0
        for b, lo in enumerate(range(0, len(order), config.batch_size)):
            chunk = [train_set[i] for i in order[lo : lo + config.batch_size]]
            batch = model.make_batch(chunk, corpus.graphs)
            model.zero_grad()
            with Tape() as tape:
                loss = batch_loss(model, batch)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericalError(epoch, b, value)
            tape.backward(loss)
            grads = [p.grad for p in params.values() if p.grad is not None]
            clip_grad_norm(grads, config.clip_norm)
            if epoch == 1:
                touched.update(n for n, p in params.items() if p.grad is not None and np.any(p.grad))
            opt.step(params)
            total += value * len(chunk)
        rec = {"epoch": epoch, "train_loss": total / len(train_set), "val_M@0": None}
        if config.eval_every and val and (epoch % config.eval_every == 0 or epoch == config.epochs):
            rep, _ = evaluate(model, corpus.graphs, val, config.max_decode_len)
            rec["val_M@0"] = rep.m_at[0]
        rec["wall_time"] = time.perf_counter() - t0
        records.append(rec)
        log.info("epoch %d loss %.5f val_M@0 %s", epoch, rec["train_loss"], rec["val_M@0"])
        if out is not None:
            with open(out / "epochs.jsonl", "a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
            if config.checkpoint_interval and epoch % config.checkpoint_interval == 0 and epoch != config.epochs:
                save_checkpoint(out / f"checkpoint_e{epoch:04d}.nvts", model, config, epoch, rng.bit_generator.state)
        if on_epoch is not None:
            on_epoch(rec)

    ckpt = None
    if out is not None:
        ckpt = out / "checkpoint.nvts"
        save_checkpoint(ckpt, model, config, config.epochs, rng.bit_generator.state)
    dead = sorted(set(params) - touched)
    return TrainResult(model, records, ckpt, dead, rng.bit_generator.state)


# ---------------------------------------------------------------- evaluation


def evaluate(
    model: NavTranslator,
    graphs: Mapping[str, BehaviorGraph],
    samples: Sequence[Sample],
    max_len: int = 16,
    batch_size: int = 256,
) -> tuple[MetricsReport, list[SampleRecord]]:
    """Greedy-decode every sample and score it against its gold plan."""
    samples = list(samples)
    if not samples:
        raise ValueError("cannot evaluate an empty split")
    for s in samples:
        if s.graph_id not in graphs:
            raise KeyError(f"graph {s.graph_id!r} missing from graph store")
    records: list[SampleRecord] = []
    for lo in range(0, len(samples), batch_size):
        chunk = samples[lo : lo + batch_size]
        batch = model.make_batch(chunk, graphs, with_targets=False)
        res = model.predict(batch, max_len)
        for s, ids, cut in zip(chunk, res.plans, res.truncated):
            pred = model.plan_names(ids)
            rec = SampleRecord(pred, list(s.target_plan), truncated=cut)
            try:
                rec.reached = validate_plan(graphs[s.graph_id], s.start, pred)
                rec.valid = True
            except GraphError as err:
                rec.valid = False
                rec.failed_step = getattr(err, "step", None)
            records.append(rec)
    return aggregate(records), records
