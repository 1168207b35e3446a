"""Multi-head attention fusion of instruction states with graph states."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import EncoderOutput

NEG_INF = -1e30


def _swap_last(t: Tensor) -> Tensor:
    axes = list(range(t.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return ad.transpose(t, axes)


def key_bias(mask: np.ndarray | None) -> Tensor | None:
    """Additive logit bias that removes padded keys: ``(..., n)`` -> ``(..., 1, n)``."""
    if mask is None:
        return None
    m = np.asarray(mask, dtype=float)
    return Tensor(np.where(m > 0, 0.0, NEG_INF)[..., None, :])


def scaled_dot_attention(Q: Tensor, K: Tensor, V: Tensor, key_mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """softmax(Q K^T / sqrt(d_k)) V.  Returns (output, attention weights)."""
    if Q.shape[-1] != K.shape[-1] or K.shape[-2] != V.shape[-2]:
        raise ad.ShapeError(
            f"scaled_dot_attention: Q {Q.shape}, K {K.shape}, V {V.shape} do not conform"
        )
    scores = ad.scale(Q @ _swap_last(K), 1.0 / math.sqrt(Q.shape[-1]))
    bias = key_bias(key_mask)
    if bias is not None:
        scores = scores + bias
    weights = ad.softmax(scores, axis=-1)
    return weights @ V, weights


@dataclass
class MultiHeadParams:
    """Per-head (W_q, W_k, W_v), each ``d_model x d_k``, plus ``W_o``
    (``d_model x d_model``).  No biases."""

    heads: list[tuple[Tensor, Tensor, Tensor]]
    w_out: Tensor

    @property
    def num_heads(self) -> int:
        return len(self.heads)

    @property
    def d_model(self) -> int:
        return self.w_out.shape[1]

    @property
    def d_k(self) -> int:
        return self.heads[0][0].shape[1]

    def tensors(self) -> dict[str, Tensor]:
        out = {}
        for i, (q, k, v) in enumerate(self.heads):
            out[f"head{i}.w_q"] = q
            out[f"head{i}.w_k"] = k
            out[f"head{i}.w_v"] = v
        out["w_out"] = self.w_out
        return out

    def num_weights(self) -> int:
        return sum(t.size for t in self.tensors().values())

    @classmethod
    def init(cls, rng, d_model: int, num_heads: int) -> "MultiHeadParams":
        if num_heads < 1 or d_model % num_heads:
            raise ValueError(f"d_model={d_model} is not divisible by heads={num_heads}")
        d_k = d_model // num_heads
        b = 1.0 / math.sqrt(d_model)
        heads = [
            tuple(ad.seeded_uniform(rng, (d_model, d_k), b) for _ in range(3)) for _ in range(num_heads)
        ]
        return cls(heads, ad.seeded_uniform(rng, (d_model, d_model), b))

    @classmethod
    def identity(cls, d_model: int, num_heads: int = 1) -> "MultiHeadParams":
        """Projections that slice the model dimension into heads unchanged."""
        d_k = d_model // num_heads
        eye = np.eye(d_model)
        heads = []
        for i in range(num_heads):
            block = eye[:, i * d_k : (i + 1) * d_k]
            heads.append(tuple(Tensor(block.copy(), requires_grad=True) for _ in range(3)))
        return cls(heads, Tensor(eye.copy(), requires_grad=True))


def multi_head_attention(
    queries: Tensor, keys_values: Tensor, params: MultiHeadParams, key_mask: np.ndarray | None = None
) -> tuple[Tensor, list[Tensor]]:
    """Attend ``queries`` (..., m, d_model) over ``keys_values`` (..., n, d_model)
    in every head, concatenate the heads, project with ``W_o``."""
    d = params.d_model
    if params.num_heads * params.d_k != d:
        raise ValueError(f"d_model={d} is not divisible by heads={params.num_heads}")
    if queries.shape[-1] != d or keys_values.shape[-1] != d:
        raise ad.ShapeError(
            f"multi_head_attention: queries {queries.shape} / keys {keys_values.shape} "
            f"do not have d_model={d}"
        )
    outs, weights = [], []
    for w_q, w_k, w_v in params.heads:
        o, w = scaled_dot_attention(queries @ w_q, keys_values @ w_k, keys_values @ w_v, key_mask)
        outs.append(o)
        weights.append(w)
    joined = outs[0] if len(outs) == 1 else ad.concat(outs, axis=-1)
    return joined @ params.w_out, weights


@dataclass
class FusionParams:
    mha: MultiHeadParams
    w_fc: Tensor  # (2 * d_model, d_ctx)
    b_fc: Tensor  # (d_ctx,)

    @property
    def d_ctx(self) -> int:
        return self.w_fc.shape[1]

    def tensors(self) -> dict[str, Tensor]:
        out = {f"mha.{k}": v for k, v in self.mha.tensors().items()}
        out["w_fc"] = self.w_fc
        out["b_fc"] = self.b_fc
        return out

    @classmethod
    def init(cls, rng, d_model: int, num_heads: int, d_ctx: int) -> "FusionParams":
        mha = MultiHeadParams.init(rng, d_model, num_heads)
        b = 1.0 / math.sqrt(2 * d_model)
        return cls(mha, ad.seeded_uniform(rng, (2 * d_model, d_ctx), b), ad.seeded_uniform(rng, (d_ctx,), b))


@dataclass
class FusedContext:
    C: Tensor  # (..., m, d_ctx)
    mask: np.ndarray | None = None  # (..., m) over instruction positions
    head_weights: list[Tensor] = field(default_factory=list)
    # decoder-side key projection of C, filled lazily by the decoder
    keys: Tensor | None = None

    def __len__(self) -> int:
        return self.C.shape[-2]


def fuse(
    instr: EncoderOutput, graph: EncoderOutput, params: FusionParams, graph_mask: np.ndarray | None = None
) -> FusedContext:
    """Instruction states query the graph states; the attended vectors are
    concatenated with the instruction state at each position and squeezed to
    ``d_ctx`` by an affine + tanh layer."""
    d = params.mha.d_model
    if instr.states.shape[-1] != d or graph.states.shape[-1] != d:
        raise ad.ShapeError(
            f"fuse: instruction dim {instr.states.shape[-1]} / graph dim "
            f"{graph.states.shape[-1]} != d_model {d}"
        )
    if graph_mask is None:
        graph_mask = graph.mask
    attended, weights = multi_head_attention(instr.states, graph.states, params.mha, graph_mask)
    joined = ad.concat([attended, instr.states], axis=-1)
    C = ad.tanh(joined @ params.w_fc + params.b_fc)
    return FusedContext(C, instr.mask, weights)
