"""Fixed-length video token projectors.

The espresso projector turns a frame-by-patch feature grid ``[T, P, D_v]``
into exactly ``n * (p + t)`` LLM tokens, independent of how many frames came
in.  Frames are split into ``n`` contiguous segments; per segment a temporal
pooler collapses the frame axis at each spatial location (giving ``P``
spatial features) and a spatial pooler collapses the patch axis in each
frame (giving ``T_s`` temporal features); a spatial compressor then reduces
the ``P`` features to ``p`` tokens and a temporal compressor reduces the
``T_s`` features to ``t`` tokens.  Per segment the spatial tokens come
first, segments are concatenated in chronological order, and one shared
two-layer MLP maps D_v to the LLM width.

Poolers and compressors are single-query / multi-query Q-Formers over the
pooled axis (see the attention module); each of the four has its own
parameters.  Baselines: ``mlp`` embeds every patch of every frame (token
count grows with T), ``pr`` runs one Q-Former with a fixed query budget over
all T*P features, ``meanpool`` averages over frames per patch and over
patches per frame.

All forward functions treat the incoming video as a constant: gradients
flow to parameters only.  Functions accept extra leading batch axes on the
feature tensor; the documented shapes are the single-video case.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as ops
from .attention import (
    PositionalEncoding,
    QFormerParams,
    init_qformer_params,
    normal_init,
    qformer_forward,
)
from .prng import Prng
from .tensor import DenseTensor, ShapeError

KIND_ESPRESSO = "espresso"
KIND_MLP = "mlp"
KIND_PR = "pr"
KIND_MEANPOOL = "meanpool"
KINDS = (KIND_ESPRESSO, KIND_MLP, KIND_PR, KIND_MEANPOOL)

SPATIAL = "spatial"
TEMPORAL = "temporal"


@dataclass
class FeatureVideo:
    """A frozen-encoder feature grid: ``features`` is ``[T, P, D_v]``."""

    features: DenseTensor

    def __post_init__(self):
        if len(self.features.shape) != 3:
            raise ShapeError(f"feature video must be [T, P, D_v], got {self.features.shape}")

    @property
    def frames(self) -> int:
        return self.features.shape[0]

    @property
    def patches(self) -> int:
        return self.features.shape[1]

    @property
    def feat_dim(self) -> int:
        return self.features.shape[2]


@dataclass
class EspressoConfig:
    """Hyperparameters of the espresso projector.

    ``spatial_queries``/``temporal_queries`` are the per-segment token
    budgets, ``segments`` the number of temporal segments.  ``llm_dim`` is
    the output token width.
    """

    feat_dim: int
    llm_dim: int
    spatial_queries: int = 4
    temporal_queries: int = 4
    segments: int = 1
    heads: int = 4
    blocks: int = 2
    ffn_mult: int = 4
    pe_mode: str = "sinusoidal"
    seed: int = 0

    def __post_init__(self):
        for name in ("feat_dim", "llm_dim", "spatial_queries", "temporal_queries",
                     "segments", "heads", "blocks", "ffn_mult"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ValueError(f"config field {name} must be a positive integer, got {value!r}")
        for name in ("feat_dim", "llm_dim"):
            value = getattr(self, name)
            if value % 2 or value % self.heads:
                raise ValueError(
                    f"config field {name} = {value} must be even and divisible by heads = {self.heads}"
                )
        PositionalEncoding(self.pe_mode)  # validates the mode

    @property
    def pe(self) -> PositionalEncoding:
        return PositionalEncoding(self.pe_mode)

    @property
    def tokens_per_segment(self) -> int:
        return self.spatial_queries + self.temporal_queries

    @property
    def out_tokens(self) -> int:
        return self.segments * self.tokens_per_segment


@dataclass
class MlpParams:
    """Two-layer MLP ``d_in -> d_out -> d_out`` with a gelu between."""

    w1: DenseTensor
    b1: DenseTensor
    w2: DenseTensor
    b2: DenseTensor


@dataclass
class EspressoParams:
    temporal_pooler: QFormerParams
    spatial_pooler: QFormerParams
    spatial_compressor: QFormerParams
    temporal_compressor: QFormerParams
    out_mlp: MlpParams


@dataclass
class PrParams:
    qformer: QFormerParams
    out_mlp: MlpParams


@dataclass
class MlpBaselineParams:
    mlp: MlpParams


@dataclass
class MeanPoolParams:
    mlp: MlpParams


@dataclass
class ProjectorOutput:
    """Projected tokens plus, per token, which segment and pooling path
    produced it.  Baselines without segments report segment 0; tokens that
    preserve spatial positions are tagged "spatial", frame-indexed ones
    "temporal" (the per-patch-per-frame mlp baseline and the globally pooled
    pr baseline are tagged "spatial" throughout)."""

    tokens: DenseTensor
    provenance: tuple[tuple[int, str], ...] = field(default=())


def split_segments(frames: int, segments: int) -> list[tuple[int, int]]:
    """Contiguous segment boundaries ``[floor(s*T/n), floor((s+1)*T/n))``."""
    if segments < 1:
        raise ValueError(f"segment count must be >= 1, got {segments}")
    if frames < segments:
        raise ValueError(f"cannot split {frames} frames into {segments} segments")
    return [
        (s * frames // segments, (s + 1) * frames // segments)
        for s in range(segments)
    ]


# --------------------------------------------------------------------------
# espresso stages (each accepts extra leading batch axes)

def temporal_pool(seg: DenseTensor, params: QFormerParams,
                  pe: PositionalEncoding) -> DenseTensor:
    """Collapse the frame axis at every spatial location.

    ``[T_s, P, D_v] -> [P, D_v]``; positions along the frame axis are the
    within-segment frame indices.
    """
    if len(seg.shape) < 3:
        raise ShapeError(f"temporal_pool input must be [..., T_s, P, D_v], got {seg.shape}")
    nl = len(seg.shape) - 3
    axes = tuple(range(nl)) + (nl + 1, nl, nl + 2)
    per_location = ops.permute(seg, axes)            # [..., P, T_s, D_v]
    pooled = qformer_forward(per_location, params, pe)   # [..., P, 1, D_v]
    return ops.reshape(pooled, pooled.shape[:-2] + (pooled.shape[-1],))


def spatial_pool(seg: DenseTensor, params: QFormerParams,
                 pe: PositionalEncoding) -> DenseTensor:
    """Collapse the patch axis in every frame: ``[T_s, P, D_v] -> [T_s, D_v]``."""
    if len(seg.shape) < 3:
        raise ShapeError(f"spatial_pool input must be [..., T_s, P, D_v], got {seg.shape}")
    pooled = qformer_forward(seg, params, pe)        # [..., T_s, 1, D_v]
    return ops.reshape(pooled, pooled.shape[:-2] + (pooled.shape[-1],))


def spatial_compress(pooled: DenseTensor, params: QFormerParams,
                     pe: PositionalEncoding) -> DenseTensor:
    """Reduce per-location features to the spatial token budget:
    ``[P, D_v] -> [p, D_v]``."""
    if len(pooled.shape) < 2:
        raise ShapeError(f"spatial_compress input must be [..., P, D_v], got {pooled.shape}")
    return qformer_forward(pooled, params, pe)


def temporal_compress(pooled: DenseTensor, params: QFormerParams,
                      pe: PositionalEncoding) -> DenseTensor:
    """Reduce per-frame features to the temporal token budget:
    ``[T_s, D_v] -> [t, D_v]``; positions are within-segment frame indices."""
    if len(pooled.shape) < 2:
        raise ShapeError(f"temporal_compress input must be [..., T_s, D_v], got {pooled.shape}")
    return qformer_forward(pooled, params, pe)


def mlp_apply(x: DenseTensor, mlp: MlpParams) -> DenseTensor:
    return ops.linear(ops.gelu(ops.linear(x, mlp.w1, mlp.b1)), mlp.w2, mlp.b2)


def espresso_tokens(features: DenseTensor, params: EspressoParams,
                    cfg: EspressoConfig) -> DenseTensor:
    """Token tensor for ``[..., T, P, D_v]`` features: ``[..., n*(p+t), llm_dim]``."""
    if len(features.shape) < 3:
        raise ShapeError(f"espresso input must be [..., T, P, D_v], got {features.shape}")
    if features.shape[-1] != cfg.feat_dim:
        raise ShapeError(
            f"feature dim {features.shape} does not match config feat_dim {cfg.feat_dim}"
        )
    frames = features.shape[-3]
    pe = cfg.pe
    nd = features.nd
    parts = []
    for lo, hi in split_segments(frames, cfg.segments):
        seg = DenseTensor(nd[..., lo:hi, :, :])
        spatial_tokens = spatial_compress(
            temporal_pool(seg, params.temporal_pooler, pe), params.spatial_compressor, pe
        )
        temporal_tokens = temporal_compress(
            spatial_pool(seg, params.spatial_pooler, pe), params.temporal_compressor, pe
        )
        parts.append(ops.concat([spatial_tokens, temporal_tokens], axis=-2))
    return mlp_apply(ops.concat(parts, axis=-2) if len(parts) > 1 else parts[0],
                     params.out_mlp)


def espresso_provenance(cfg: EspressoConfig) -> tuple[tuple[int, str], ...]:
    entries: list[tuple[int, str]] = []
    for s in range(cfg.segments):
        entries.extend((s, SPATIAL) for _ in range(cfg.spatial_queries))
        entries.extend((s, TEMPORAL) for _ in range(cfg.temporal_queries))
    return tuple(entries)


def espresso_forward(video: FeatureVideo, params: EspressoParams,
                     cfg: EspressoConfig) -> ProjectorOutput:
    """Project one video to exactly ``segments * (p + t)`` tokens."""
    tokens = espresso_tokens(video.features, params, cfg)
    return ProjectorOutput(tokens=tokens, provenance=espresso_provenance(cfg))


def mlp_tokens(features: DenseTensor, params: MlpBaselineParams) -> DenseTensor:
    lead = features.shape[:-3]
    frames, patches, dim = features.shape[-3:]
    flat = ops.reshape(DenseTensor(features.nd), lead + (frames * patches, dim))
    return mlp_apply(flat, params.mlp)


def mlp_forward(video: FeatureVideo, params: MlpBaselineParams) -> ProjectorOutput:
    """Per-patch-per-frame embedding: token count is T * P."""
    tokens = mlp_tokens(video.features, params)
    count = video.frames * video.patches
    return ProjectorOutput(tokens=tokens, provenance=((0, SPATIAL),) * count)


def pr_tokens(features: DenseTensor, params: PrParams,
              pe: PositionalEncoding) -> DenseTensor:
    lead = features.shape[:-3]
    frames, patches, dim = features.shape[-3:]
    flat = ops.reshape(DenseTensor(features.nd), lead + (frames * patches, dim))
    return mlp_apply(qformer_forward(flat, params.qformer, pe), params.out_mlp)


def pr_forward(video: FeatureVideo, params: PrParams,
               pe: PositionalEncoding) -> ProjectorOutput:
    """One Q-Former over all T*P features: token count is the query budget."""
    tokens = pr_tokens(video.features, params, pe)
    count = params.qformer.queries.shape[0]
    return ProjectorOutput(tokens=tokens, provenance=((0, SPATIAL),) * count)


def meanpool_tokens(features: DenseTensor, params: MeanPoolParams) -> DenseTensor:
    ndim = len(features.shape)
    feats = DenseTensor(features.nd)
    per_patch = ops.mean_axis(feats, ndim - 3)   # mean over frames -> [..., P, D_v]
    per_frame = ops.mean_axis(feats, ndim - 2)   # mean over patches -> [..., T, D_v]
    return mlp_apply(ops.concat([per_patch, per_frame], axis=-2), params.mlp)


def meanpool_forward(video: FeatureVideo, params: MeanPoolParams) -> ProjectorOutput:
    """Mean over frames per patch, then mean over patches per frame;
    spatial tokens first.  Token count is P + T."""
    tokens = meanpool_tokens(video.features, params)
    provenance = tuple(
        [(0, SPATIAL)] * video.patches + [(0, TEMPORAL)] * video.frames
    )
    return ProjectorOutput(tokens=tokens, provenance=provenance)


# --------------------------------------------------------------------------
# initialization

def init_mlp_params(d_in: int, d_out: int, prng: Prng) -> MlpParams:
    return MlpParams(
        w1=normal_init((d_in, d_out), prng),
        b1=normal_init((d_out,), prng),
        w2=normal_init((d_out, d_out), prng),
        b2=normal_init((d_out,), prng),
    )


def init_espresso_params(cfg: EspressoConfig, prng: Prng) -> EspressoParams:
    """Draw order: temporal pooler, spatial pooler, spatial compressor,
    temporal compressor, output MLP."""
    d = cfg.feat_dim

    def qf(num_queries: int) -> QFormerParams:
        return init_qformer_params(d, num_queries, cfg.heads, cfg.blocks, cfg.ffn_mult, prng)

    return EspressoParams(
        temporal_pooler=qf(1),
        spatial_pooler=qf(1),
        spatial_compressor=qf(cfg.spatial_queries),
        temporal_compressor=qf(cfg.temporal_queries),
        out_mlp=init_mlp_params(d, cfg.llm_dim, prng),
    )


def param_init(cfg: EspressoConfig, seed: int) -> EspressoParams:
    """Deterministic espresso initialization from one stream seed."""
    return init_espresso_params(cfg, Prng(seed))


def init_pr_params(cfg: EspressoConfig, num_queries: int, prng: Prng) -> PrParams:
    return PrParams(
        qformer=init_qformer_params(cfg.feat_dim, num_queries, cfg.heads,
                                    cfg.blocks, cfg.ffn_mult, prng),
        out_mlp=init_mlp_params(cfg.feat_dim, cfg.llm_dim, prng),
    )


def init_mlp_baseline_params(cfg: EspressoConfig, prng: Prng) -> MlpBaselineParams:
    return MlpBaselineParams(mlp=init_mlp_params(cfg.feat_dim, cfg.llm_dim, prng))


def init_meanpool_params(cfg: EspressoConfig, prng: Prng) -> MeanPoolParams:
    return MeanPoolParams(mlp=init_mlp_params(cfg.feat_dim, cfg.llm_dim, prng))


# --------------------------------------------------------------------------
# feature video file format
#
# magic "ESPR", version byte 0x01, then T, P, D_v as little-endian uint32,
# then T*P*D_v little-endian float32 values in row-major (frame, patch,
# channel) order.

VIDEO_MAGIC = b"ESPR"
VIDEO_VERSION = 1
_HEADER = struct.Struct("<4sBIII")


def save_feature_video(video: FeatureVideo, path: str) -> None:
    frames, patches, dim = video.features.shape
    payload = np.ascontiguousarray(video.features.nd, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(VIDEO_MAGIC, VIDEO_VERSION, frames, patches, dim))
        fh.write(payload)


def load_feature_video(path: str) -> FeatureVideo:
    size = os.path.getsize(path)
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
        if len(header) < _HEADER.size:
            raise ValueError(f"feature video file too short: {path}")
        magic, version, frames, patches, dim = _HEADER.unpack(header)
        if magic != VIDEO_MAGIC:
            raise ValueError(f"not a feature video file (bad magic {magic!r}): {path}")
        if version != VIDEO_VERSION:
            raise ValueError(f"unsupported feature video version {version}: {path}")
        expected = _HEADER.size + 4 * frames * patches * dim
        if size != expected:
            raise ValueError(f"feature video payload size mismatch in {path}")
        raw = fh.read()
    values = np.frombuffer(raw, dtype="<f4").reshape(frames, patches, dim)
    return FeatureVideo(DenseTensor(values.astype(np.float64)))
