"""Multi-head cross-attention and the Q-Former block it composes into.

A Q-Former here is a stack of pre-norm residual blocks over a set of
learnable queries:

    x <- x + SelfAttn(LN(x))
    x <- x + CrossAttn(LN(x), LN(kv))
    x <- x + FFN(LN(x))          FFN = linear -> gelu -> linear

Self-attention is kept even for a single query so every pooler and
compressor shares one code path.  Sinusoidal positional encoding is added to
the key/value inputs once, before the block stack, along the pooled axis;
queries carry no positional information.  All operations accept extra
leading batch axes so one call can run many pooling locations at once.

Initialization draws every weight matrix and learnable query from
Normal(0, 0.02^2) via the shared splitmix64 stream; layer-norm gains start
at 1 and biases at 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import tensor as ops
from .prng import Prng
from .tensor import DenseTensor, ShapeError

INIT_STD = 0.02

PE_SINUSOIDAL = "sinusoidal"
PE_DISABLED = "disabled"
PE_MODES = (PE_SINUSOIDAL, PE_DISABLED)

# Test hook: when set, every attention call asserts its softmax rows sum to 1.
ASSERT_ATTENTION_ROWSUMS = False


@dataclass
class PositionalEncoding:
    """How key/value inputs are position-tagged along the pooled axis."""

    mode: str = PE_SINUSOIDAL

    def __post_init__(self):
        if self.mode not in PE_MODES:
            raise ValueError(f"unknown positional encoding mode {self.mode!r}; use one of {PE_MODES}")


@dataclass
class AttentionParams:
    """Projection matrices of one multi-head attention, all ``[dim, dim]``."""

    wq: DenseTensor
    wk: DenseTensor
    wv: DenseTensor
    wo: DenseTensor
    heads: int


@dataclass
class LayerNormParams:
    gain: DenseTensor
    bias: DenseTensor


@dataclass
class QFormerBlockParams:
    ln_self: LayerNormParams
    self_attn: AttentionParams
    ln_cross_q: LayerNormParams
    ln_cross_kv: LayerNormParams
    cross_attn: AttentionParams
    ln_ffn: LayerNormParams
    ffn_w1: DenseTensor
    ffn_b1: DenseTensor
    ffn_w2: DenseTensor
    ffn_b2: DenseTensor


@dataclass
class QFormerParams:
    queries: DenseTensor  # [num_queries, dim]
    blocks: list[QFormerBlockParams] = field(default_factory=list)


@lru_cache(maxsize=None)
def _sinusoidal_table(length: int, dim: int) -> np.ndarray:
    if dim % 2:
        raise ShapeError(f"sinusoidal encoding needs an even dim, got {dim}")
    positions = np.arange(length, dtype=np.float64)[:, None]
    exponents = np.arange(0, dim, 2, dtype=np.float64)[None, :] / dim
    angles = positions / np.power(10000.0, exponents)
    table = np.empty((length, dim), dtype=np.float64)
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    table.setflags(write=False)
    return table


def sinusoidal_table(length: int, dim: int) -> np.ndarray:
    """The ``[length, dim]`` sin/cos position table (read-only, cached)."""
    return _sinusoidal_table(int(length), int(dim))


def apply_positional_encoding(kv: DenseTensor, pe: PositionalEncoding) -> DenseTensor:
    """Add the position table to ``kv`` along its second-to-last axis."""
    if pe.mode == PE_DISABLED:
        return kv
    if len(kv.shape) < 2:
        raise ShapeError(f"positional encoding needs [..., length, dim], got {kv.shape}")
    table = sinusoidal_table(kv.shape[-2], kv.shape[-1])
    return ops.add(kv, DenseTensor(table.astype(kv.dtype, copy=False)))


def multihead_cross_attention(q: DenseTensor, kv: DenseTensor,
                              params: AttentionParams) -> DenseTensor:
    """Scaled dot-product attention of queries over keys/values.

    ``q`` is ``[..., n_q, dim]`` and ``kv`` is ``[..., n_kv, dim]`` with
    identical leading axes.  Scores are scaled by ``1/sqrt(dim/heads)`` and
    softmaxed with max subtraction.
    """
    if len(q.shape) < 2 or len(kv.shape) < 2:
        raise ShapeError(f"attention needs [..., length, dim] operands: {q.shape} vs {kv.shape}")
    if q.shape[:-2] != kv.shape[:-2] or q.shape[-1] != kv.shape[-1]:
        raise ShapeError(f"attention operand shapes incompatible: {q.shape} vs {kv.shape}")
    dim = q.shape[-1]
    heads = params.heads
    if dim % heads:
        raise ShapeError(f"dim {dim} not divisible by heads {heads}")
    if params.wq.shape != (dim, dim):
        raise ShapeError(f"attention weights must be ({dim}, {dim}), got {params.wq.shape}")
    head_dim = dim // heads
    lead = q.shape[:-2]
    nl = len(lead)
    n_q, n_kv = q.shape[-2], kv.shape[-2]

    def split_heads(x: DenseTensor, length: int) -> DenseTensor:
        x = ops.reshape(x, lead + (length, heads, head_dim))
        return ops.permute(x, tuple(range(nl)) + (nl + 1, nl, nl + 2))

    qh = split_heads(ops.linear(q, params.wq), n_q)        # [..., heads, n_q, hd]
    kh = split_heads(ops.linear(kv, params.wk), n_kv)
    vh = split_heads(ops.linear(kv, params.wv), n_kv)

    kt = ops.permute(kh, tuple(range(nl)) + (nl, nl + 2, nl + 1))
    scores = ops.scale(ops.matmul(qh, kt), 1.0 / math.sqrt(head_dim))
    attn = ops.softmax_lastdim(scores)
    if ASSERT_ATTENTION_ROWSUMS:
        tol = 1e-12 if attn.dtype == np.float64 else 1e-5
        drift = np.abs(attn.nd.sum(axis=-1) - 1.0).max()
        assert drift <= tol, f"attention rows sum to 1 +/- {drift}, tolerance {tol}"

    ctx = ops.matmul(attn, vh)                              # [..., heads, n_q, hd]
    ctx = ops.permute(ctx, tuple(range(nl)) + (nl + 1, nl, nl + 2))
    ctx = ops.reshape(ctx, lead + (n_q, dim))
    return ops.linear(ctx, params.wo)


def qformer_block(x: DenseTensor, kv: DenseTensor,
                  block: QFormerBlockParams) -> DenseTensor:
    """One pre-norm residual block: self-attention, cross-attention, FFN."""
    normed = ops.layer_norm(x, block.ln_self.gain, block.ln_self.bias)
    x = ops.add(x, multihead_cross_attention(normed, normed, block.self_attn))

    q_normed = ops.layer_norm(x, block.ln_cross_q.gain, block.ln_cross_q.bias)
    kv_normed = ops.layer_norm(kv, block.ln_cross_kv.gain, block.ln_cross_kv.bias)
    x = ops.add(x, multihead_cross_attention(q_normed, kv_normed, block.cross_attn))

    f_normed = ops.layer_norm(x, block.ln_ffn.gain, block.ln_ffn.bias)
    hidden = ops.gelu(ops.linear(f_normed, block.ffn_w1, block.ffn_b1))
    return ops.add(x, ops.linear(hidden, block.ffn_w2, block.ffn_b2))


def qformer_forward(kv: DenseTensor, params: QFormerParams,
                    pe: PositionalEncoding) -> DenseTensor:
    """Run the block stack; output is ``[..., num_queries, dim]``.

    ``kv`` is ``[..., n_kv, dim]``; its leading axes are broadcast onto the
    queries, so gradients of the queries accumulate across all of them.
    """
    if len(kv.shape) < 2:
        raise ShapeError(f"qformer input must be [..., n_kv, dim], got {kv.shape}")
    if kv.shape[-1] != params.queries.shape[-1]:
        raise ShapeError(
            f"qformer kv dim {kv.shape} does not match queries {params.queries.shape}"
        )
    kv = apply_positional_encoding(kv, pe)
    lead = kv.shape[:-2]
    x = params.queries
    if lead:
        x = ops.broadcast_to(x, lead + x.shape)
    for block in params.blocks:
        x = qformer_block(x, kv, block)
    return x


# --------------------------------------------------------------------------
# initialization

def normal_init(shape: tuple, prng: Prng) -> DenseTensor:
    """A tensor of Normal(0, INIT_STD^2) draws from the shared stream."""
    count = 1
    for extent in shape:
        count *= extent
    return DenseTensor((prng.normals(count) * INIT_STD).reshape(shape))


def init_layer_norm(dim: int) -> LayerNormParams:
    return LayerNormParams(gain=ops.ones((dim,)), bias=ops.zeros((dim,)))


def init_attention_params(dim: int, heads: int, prng: Prng) -> AttentionParams:
    """Draw order: wq, wk, wv, wo."""
    if dim % heads:
        raise ShapeError(f"dim {dim} not divisible by heads {heads}")
    return AttentionParams(
        wq=normal_init((dim, dim), prng),
        wk=normal_init((dim, dim), prng),
        wv=normal_init((dim, dim), prng),
        wo=normal_init((dim, dim), prng),
        heads=heads,
    )


def init_qformer_block(dim: int, heads: int, ffn_mult: int, prng: Prng) -> QFormerBlockParams:
    """Draw order: self-attention, cross-attention, FFN weights and biases."""
    hidden = ffn_mult * dim
    self_attn = init_attention_params(dim, heads, prng)
    cross_attn = init_attention_params(dim, heads, prng)
    return QFormerBlockParams(
        ln_self=init_layer_norm(dim),
        self_attn=self_attn,
        ln_cross_q=init_layer_norm(dim),
        ln_cross_kv=init_layer_norm(dim),
        cross_attn=cross_attn,
        ln_ffn=init_layer_norm(dim),
        ffn_w1=normal_init((dim, hidden), prng),
        ffn_b1=normal_init((hidden,), prng),
        ffn_w2=normal_init((hidden, dim), prng),
        ffn_b2=normal_init((dim,), prng),
    )


def init_qformer_params(dim: int, num_queries: int, heads: int, blocks: int,
                        ffn_mult: int, prng: Prng) -> QFormerParams:
    """Draw order: queries first, then each block in stack order."""
    if num_queries < 1:
        raise ShapeError(f"qformer needs at least one query, got {num_queries}")
    queries = normal_init((num_queries, dim), prng)
    return QFormerParams(
        queries=queries,
        blocks=[init_qformer_block(dim, heads, ffn_mult, prng) for _ in range(blocks)],
    )
