"""GRU plan decoder with additive soft attention over the fused context.

Decoder token ids: behaviors ``0 .. nb-1``, end-of-plan ``nb``, start-of-plan
``nb + 1``.  Logits cover behaviors plus end-of-plan (``nb + 1`` classes).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import GruParams, _gru_from_projected
from .fusion import FusedContext


@dataclass
class DecoderParams:
    behavior_emb: Tensor  # (nb + 2, D_b)
    gru: GruParams  # input D_b + d_ctx, hidden H
    att_query: Tensor  # (H, A)
    att_key: Tensor  # (d_ctx, A)
    att_bias: Tensor  # (A,)
    att_v: Tensor  # (A, 1)
    w_out: Tensor  # (H, nb + 1)
    b_out: Tensor  # (nb + 1,)
    start_emb: Tensor  # (max_nodes, H)

    @property
    def num_behaviors(self) -> int:
        return self.w_out.shape[1] - 1

    @property
    def eos(self) -> int:
        return self.num_behaviors

    @property
    def sos(self) -> int:
        return self.num_behaviors + 1

    @property
    def hidden_size(self) -> int:
        return self.gru.hidden_size

    def tensors(self) -> dict[str, Tensor]:
        out = {
            "behavior_emb": self.behavior_emb,
            "att_query": self.att_query,
            "att_key": self.att_key,
            "att_bias": self.att_bias,
            "att_v": self.att_v,
            "w_out": self.w_out,
            "b_out": self.b_out,
            "start_emb": self.start_emb,
        }
        out.update({f"gru.{k}": v for k, v in self.gru.tensors().items()})
        return out

    @classmethod
    def init(cls, rng, num_behaviors: int, max_nodes: int, emb_dim: int, d_ctx: int, hidden: int, att_dim: int | None = None):
        att_dim = att_dim or hidden
        b = 1.0 / math.sqrt(hidden)
        u = ad.seeded_uniform
        return cls(
            behavior_emb=u(rng, (num_behaviors + 2, emb_dim), b),
            gru=GruParams.init(rng, emb_dim + d_ctx, hidden),
            att_query=u(rng, (hidden, att_dim), b),
            att_key=u(rng, (d_ctx, att_dim), b),
            att_bias=u(rng, (att_dim,), b),
            att_v=u(rng, (att_dim, 1), b),
            w_out=u(rng, (hidden, num_behaviors + 1), b),
            b_out=u(rng, (num_behaviors + 1,), b),
            start_emb=u(rng, (max_nodes, hidden), b),
        )


@dataclass
class DecodeState:
    hidden: Tensor  # (..., H)
    last: np.ndarray  # (...) int token ids
    step: int = 0
    weights: Tensor | None = None  # attention used to produce this state


def init_state(start, params: DecoderParams) -> DecodeState:
    """Hidden state = the start node's embedding row; last token = start-of-plan."""
    idx = np.asarray(start, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= params.start_emb.shape[0]):
        raise ValueError(f"start node index {start} outside 0..{params.start_emb.shape[0] - 1}")
    return DecodeState(ad.take(params.start_emb, idx), np.full(idx.shape, params.sos, dtype=np.intp), 0)


def _context_keys(ctx: FusedContext, params: DecoderParams) -> Tensor:
    if ctx.keys is None:
        ctx.keys = ctx.C @ params.att_key + params.att_bias
    return ctx.keys


def attend(hidden: Tensor, ctx: FusedContext, params: DecoderParams) -> tuple[Tensor, Tensor]:
    """Additive attention: score_j = v . tanh(W_h h + W_c C_j + b)."""
    lead = hidden.shape[:-1]
    m = ctx.C.shape[-2]
    keys = _context_keys(ctx, params)
    q = (hidden @ params.att_query).reshape(lead + (1, params.att_query.shape[1]))
    scores = (ad.tanh(keys + q) @ params.att_v).reshape(lead + (m,))
    if ctx.mask is not None:
        scores = scores + Tensor(np.where(np.asarray(ctx.mask) > 0, 0.0, -1e30))
    alpha = ad.softmax(scores, axis=-1)
    summary = (alpha.reshape(lead + (1, m)) @ ctx.C).reshape(lead + (ctx.C.shape[-1],))
    return summary, alpha


def decode_step(state: DecodeState, ctx: FusedContext, params: DecoderParams) -> tuple[Tensor, DecodeState]:
    summary, alpha = attend(state.hidden, ctx, params)
    emb = ad.take(params.behavior_emb, state.last)
    x = ad.concat([emb, summary], axis=-1)
    h = _gru_from_projected(x @ params.gru.w_in + params.gru.bias, state.hidden, params.gru)
    logits = h @ params.w_out + params.b_out
    return logits, DecodeState(h, state.last, state.step + 1, alpha)


def teacher_forced_logits(start, plan_ids, ctx: FusedContext, params: DecoderParams) -> Tensor:
    """Logits for every gold position plus the closing end-of-plan position.

    ``plan_ids`` is ``(L,)`` or padded ``(B, L)``; step t consumes gold token
    t - 1 (start-of-plan at t = 0).  Returns ``(..., L + 1, nb + 1)``.
    """
    plan_ids = np.asarray(plan_ids, dtype=np.intp)
    state = init_state(start, params)
    steps = []
    for t in range(plan_ids.shape[-1] + 1):
        logits, state = decode_step(state, ctx, params)
        steps.append(logits)
        if t < plan_ids.shape[-1]:
            state.last = plan_ids[..., t]
    return ad.stack(steps, axis=plan_ids.ndim - 1)


@dataclass
class DecodeResult:
    plans: list[list[int]]
    truncated: list[bool]


def greedy_decode_batch(start, ctx: FusedContext, params: DecoderParams, max_len: int = 16) -> DecodeResult:
    """Argmax decoding (ties go to the lowest id) for a ``(B,)`` batch."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    start = np.asarray(start, dtype=np.intp)
    state = init_state(start, params)
    n = start.shape[0]
    plans: list[list[int]] = [[] for _ in range(n)]
    done = np.zeros(n, dtype=bool)
    for _ in range(max_len):
        logits, state = decode_step(state, ctx, params)
        choice = np.argmax(logits.data, axis=-1)
        for i in np.flatnonzero(~done):
            if choice[i] == params.eos:
                done[i] = True
            else:
                plans[i].append(int(choice[i]))
        if done.all():
            break
        state.last = choice
    return DecodeResult(plans, [not d for d in done])


def greedy_decode(start: int, ctx: FusedContext, params: DecoderParams, max_len: int = 16) -> tuple[list[int], bool]:
    """Single-sample greedy decode; ``ctx.C`` is ``(m, d_ctx)``.

    Returns the emitted behavior ids and whether ``max_len`` cut it short.
    """
    batched = FusedContext(ctx.C.reshape((1,) + ctx.C.shape), None if ctx.mask is None else np.asarray(ctx.mask)[None])
    res = greedy_decode_batch([start], batched, params, max_len)
    return res.plans[0], res.truncated[0]
