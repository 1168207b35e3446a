"""GRU cells and the bi-directional encoders for instructions and graphs.

Sequences are laid out as ``(..., T, D)``: any leading axes are batch axes.
An optional ``mask`` of shape ``(..., T)`` marks real positions with 1 and
padding with 0; padded steps leave the hidden state untouched, so a padded
sequence encodes exactly like its unpadded prefix.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import BehaviorGraph, encode_triplets


@dataclass
class GruParams:
    """Gate weights stacked as [update | reset | candidate].

    ``w_in``: (D, 3H) input weights, ``u_gates``: (H, 2H) recurrent weights of
    the update and reset gates, ``u_cand``: (H, H) recurrent weights of the
    candidate, ``bias``: (3H,).
    """

    w_in: Tensor
    u_gates: Tensor
    u_cand: Tensor
    bias: Tensor

    @property
    def input_size(self) -> int:
        return self.w_in.shape[0]

    @property
    def hidden_size(self) -> int:
        return self.u_cand.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return {"w_in": self.w_in, "u_gates": self.u_gates, "u_cand": self.u_cand, "bias": self.bias}

    @classmethod
    def init(cls, rng: np.random.Generator, input_size: int, hidden_size: int) -> "GruParams":
        b = 1.0 / np.sqrt(hidden_size)
        h = hidden_size
        return cls(
            ad.seeded_uniform(rng, (input_size, 3 * h), b),
            ad.seeded_uniform(rng, (h, 2 * h), b),
            ad.seeded_uniform(rng, (h, h), b),
            ad.seeded_uniform(rng, (3 * h,), b),
        )

    def check(self) -> None:
        d, h = self.input_size, self.hidden_size
        expect = {"w_in": (d, 3 * h), "u_gates": (h, 2 * h), "u_cand": (h, h), "bias": (3 * h,)}
        for name, t in self.tensors().items():
            if t.shape != expect[name]:
                raise ad.ShapeError(f"gru {name}: expected {expect[name]}, got {t.shape}")


@dataclass
class BiGruParams:
    fwd: GruParams
    bwd: GruParams

    def tensors(self) -> dict[str, Tensor]:
        out = {f"fwd.{k}": v for k, v in self.fwd.tensors().items()}
        out.update({f"bwd.{k}": v for k, v in self.bwd.tensors().items()})
        return out

    @classmethod
    def init(cls, rng, input_size: int, hidden_size: int) -> "BiGruParams":
        return cls(GruParams.init(rng, input_size, hidden_size), GruParams.init(rng, input_size, hidden_size))


@dataclass
class EncoderOutput:
    states: Tensor  # (..., T, 2H), forward half first
    final: Tensor  # (..., 2H)
    mask: np.ndarray | None = None


def _gru_from_projected(gx: Tensor, h: Tensor, p: GruParams) -> Tensor:
    # gx already holds x @ w_in + bias
    hs = p.hidden_size
    gates = ad.sigmoid(gx[..., : 2 * hs] + h @ p.u_gates)
    z = gates[..., :hs]
    r = gates[..., hs:]
    cand = ad.tanh(gx[..., 2 * hs :] + (r * h) @ p.u_cand)
    # (1 - z) * h + z * cand
    return h + z * (cand - h)


def gru_cell(x: Tensor, h: Tensor, params: GruParams) -> Tensor:
    """One GRU step: update gate z, reset gate r, candidate from r * h."""
    if x.shape[-1] != params.input_size or h.shape[-1] != params.hidden_size:
        raise ad.ShapeError(
            f"gru_cell: x {x.shape} / h {h.shape} do not match params "
            f"(D={params.input_size}, H={params.hidden_size})"
        )
    return _gru_from_projected(x @ params.w_in + params.bias, h, params)


def _run(gx: Tensor, p: GruParams, mask, reverse: bool) -> list[Tensor]:
    lead = gx.shape[:-2]
    steps = gx.shape[-2]
    h = Tensor(np.zeros(lead + (p.hidden_size,)))
    out: list[Tensor | None] = [None] * steps
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    for t in order:
        h_new = _gru_from_projected(gx[..., t, :], h, p)
        if mask is not None and not mask[..., t].all():
            keep = Tensor(mask[..., t, None])
            h = h + keep * (h_new - h)
        else:
            h = h_new
        out[t] = h
    return out


def bigru_encode(seq: Tensor, fwd: GruParams, bwd: GruParams, mask: np.ndarray | None = None) -> EncoderOutput:
    """Run ``fwd`` left to right and ``bwd`` right to left from zero states.

    ``final`` is [last forward state, backward state after position 0].
    """
    if seq.ndim < 2 or seq.shape[-2] == 0:
        raise ad.ShapeError(f"bigru_encode: need a nonempty (..., T, D) sequence, got {seq.shape}")
    if mask is not None:
        mask = np.asarray(mask, dtype=float)
        if mask.shape != seq.shape[:-1]:
            raise ad.ShapeError(f"bigru_encode: mask {mask.shape} does not match sequence {seq.shape}")
    for p in (fwd, bwd):
        if seq.shape[-1] != p.input_size:
            raise ad.ShapeError(f"bigru_encode: input dim {seq.shape[-1]} != params D={p.input_size}")
    f_states = _run(seq @ fwd.w_in + fwd.bias, fwd, mask, reverse=False)
    b_states = _run(seq @ bwd.w_in + bwd.bias, bwd, mask, reverse=True)
    axis = seq.ndim - 2
    states = ad.concat([ad.stack(f_states, axis=axis), ad.stack(b_states, axis=axis)], axis=-1)
    final = ad.concat([f_states[-1], b_states[0]], axis=-1)
    return EncoderOutput(states, final, mask)


def encode_instruction(tokens, embedding: Tensor, params: BiGruParams, mask: np.ndarray | None = None) -> EncoderOutput:
    """Embed token ids (``(T,)`` or padded ``(B, T)``) and run the bi-GRU."""
    ids = np.asarray(tokens, dtype=np.intp)
    return bigru_encode(ad.take(embedding, ids), params.fwd, params.bwd, mask)


def graph_inputs(graphs: list[BehaviorGraph], num_nodes: int) -> tuple[np.ndarray, np.ndarray]:
    """Padded one-hot triplet batch ``(G, E_max, 2N + B)`` and its mask."""
    encs = [encode_triplets(g, num_nodes) for g in graphs]
    longest = max(e.shape[0] for e in encs)
    width = encs[0].shape[1]
    x = np.zeros((len(encs), longest, width))
    m = np.zeros((len(encs), longest))
    for i, e in enumerate(encs):
        x[i, : e.shape[0]] = e
        m[i, : e.shape[0]] = 1.0
    return x, m


def encode_graph(graph: BehaviorGraph, params: BiGruParams, num_nodes: int | None = None) -> EncoderOutput:
    return bigru_encode(Tensor(encode_triplets(graph, num_nodes)), params.fwd, params.bwd)
