"""Token, parameter, and FLOP accounting plus wall-clock measurement.

``flop_estimate`` is a closed-form count of the multiply-accumulates of
every matmul a projector's forward pass executes (attention projections,
score and context products, FFN and output-MLP matmuls; biases, softmax,
and normalization are not matmuls and count zero).  Its ground truth is the
instrumented counter in the tensor module: the two are computed by
independent routes and must agree exactly.

``measure_runtime`` times a callable on the monotonic clock: a fixed number
of untimed warmup runs, then timed runs reported individually and as
mean/min/max.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

from .projectors import (
    KIND_ESPRESSO,
    KIND_MLP,
    KIND_PR,
    KINDS,
    EspressoConfig,
    split_segments,
)

DEFAULT_FRAME_GRID = (8, 16, 32, 64, 128)
DEFAULT_PR_QUERIES = 8


@dataclass
class ProjectorDescriptor:
    """A projector kind plus everything needed to size or build it.

    ``config`` carries the dimensions and Q-Former hyperparameters shared by
    all kinds; ``pr_queries`` is the pr baseline's fixed query budget.
    """

    kind: str
    config: EspressoConfig
    pr_queries: int = DEFAULT_PR_QUERIES

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown projector kind {self.kind!r}; use one of {KINDS}")
        if self.pr_queries < 1:
            raise ValueError(f"pr_queries must be >= 1, got {self.pr_queries}")


def _check_grid(descriptor: ProjectorDescriptor, frames: int, patches: int) -> None:
    if frames < 1 or patches < 1:
        raise ValueError(f"frame/patch counts must be >= 1, got T={frames}, P={patches}")
    if descriptor.kind == KIND_ESPRESSO and frames < descriptor.config.segments:
        raise ValueError(
            f"frame count {frames} < segments {descriptor.config.segments}"
        )


def token_count(descriptor: ProjectorDescriptor, frames: int, patches: int) -> int:
    """Output tokens the kind hands to the LLM for a ``[T, P]`` grid."""
    _check_grid(descriptor, frames, patches)
    cfg = descriptor.config
    if descriptor.kind == KIND_ESPRESSO:
        return cfg.out_tokens
    if descriptor.kind == KIND_MLP:
        return frames * patches
    if descriptor.kind == KIND_PR:
        return descriptor.pr_queries
    return patches + frames  # meanpool


def _qformer_param_count(num_queries: int, dim: int, blocks: int, ffn_mult: int) -> int:
    hidden = ffn_mult * dim
    per_block = (
        8 * dim * dim            # two attentions, four [dim, dim] matrices each
        + 8 * dim                # four layer-norm gain/bias pairs
        + dim * hidden + hidden  # FFN in
        + hidden * dim + dim     # FFN out
    )
    return num_queries * dim + blocks * per_block


def _mlp_param_count(d_in: int, d_out: int) -> int:
    return d_in * d_out + d_out + d_out * d_out + d_out


def param_count(descriptor: ProjectorDescriptor) -> int:
    """Exact total size of the kind's parameter tensors."""
    cfg = descriptor.config
    mlp = _mlp_param_count(cfg.feat_dim, cfg.llm_dim)
    if descriptor.kind == KIND_ESPRESSO:
        qf = lambda L: _qformer_param_count(L, cfg.feat_dim, cfg.blocks, cfg.ffn_mult)
        return qf(1) + qf(1) + qf(cfg.spatial_queries) + qf(cfg.temporal_queries) + mlp
    if descriptor.kind == KIND_PR:
        return _qformer_param_count(descriptor.pr_queries, cfg.feat_dim,
                                    cfg.blocks, cfg.ffn_mult) + mlp
    return mlp  # mlp and meanpool baselines


def _qformer_flops(num_queries: int, kv_len: int, groups: int, dim: int,
                   heads: int, blocks: int, ffn_mult: int) -> int:
    """MACs of one Q-Former call: ``groups`` independent pooling locations,
    ``num_queries`` queries over ``kv_len`` keys."""
    # Head count cancels in score/context products: heads * (D/heads) = D.
    del heads
    L, S, G, D = num_queries, kv_len, groups, dim
    hidden = ffn_mult * D
    self_attn = 4 * G * L * D * D + 2 * G * L * L * D
    cross_attn = 2 * G * L * D * D + 2 * G * S * D * D + 2 * G * L * S * D
    ffn = 2 * G * L * D * hidden
    return blocks * (self_attn + cross_attn + ffn)


def _mlp_flops(rows: int, d_in: int, d_out: int) -> int:
    return rows * (d_in * d_out + d_out * d_out)


def flop_estimate(descriptor: ProjectorDescriptor, frames: int, patches: int) -> int:
    """Closed-form forward MACs; must equal the instrumented counter exactly."""
    _check_grid(descriptor, frames, patches)
    cfg = descriptor.config
    d, heads, blocks, mult = cfg.feat_dim, cfg.heads, cfg.blocks, cfg.ffn_mult
    if descriptor.kind == KIND_ESPRESSO:
        total = 0
        for lo, hi in split_segments(frames, cfg.segments):
            seg_frames = hi - lo
            total += _qformer_flops(1, seg_frames, patches, d, heads, blocks, mult)
            total += _qformer_flops(1, patches, seg_frames, d, heads, blocks, mult)
            total += _qformer_flops(cfg.spatial_queries, patches, 1, d, heads, blocks, mult)
            total += _qformer_flops(cfg.temporal_queries, seg_frames, 1, d, heads, blocks, mult)
        return total + _mlp_flops(cfg.out_tokens, d, cfg.llm_dim)
    if descriptor.kind == KIND_MLP:
        return _mlp_flops(frames * patches, d, cfg.llm_dim)
    if descriptor.kind == KIND_PR:
        qf = _qformer_flops(descriptor.pr_queries, frames * patches, 1, d, heads, blocks, mult)
        return qf + _mlp_flops(descriptor.pr_queries, d, cfg.llm_dim)
    return _mlp_flops(patches + frames, d, cfg.llm_dim)  # meanpool


@dataclass
class RuntimeReport:
    """Wall-clock samples of one measured callable (seconds)."""

    warmups: int
    runs: int
    samples: list[float] = field(default_factory=list)
    mean: float = 0.0
    min: float = 0.0
    max: float = 0.0


def measure_runtime(fn, warmups: int = 2, runs: int = 10) -> RuntimeReport:
    """Call ``fn`` ``warmups`` times untimed, then ``runs`` times timed."""
    if runs < 1:
        raise ValueError(f"measure_runtime needs runs >= 1, got {runs}")
    if warmups < 0:
        raise ValueError(f"measure_runtime needs warmups >= 0, got {warmups}")
    for _ in range(warmups):
        fn()
    samples = []
    for _ in range(runs):
        start = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - start)
    return RuntimeReport(
        warmups=warmups,
        runs=runs,
        samples=samples,
        mean=sum(samples) / len(samples),
        min=min(samples),
        max=max(samples),
    )


@dataclass
class ScalingRow:
    kind: str
    frames: int
    patches: int
    tokens: int
    flops: int
    params: int
    runtime_mean_s: float | None = None


def scaling_report(descriptors: list[ProjectorDescriptor], frame_grid=DEFAULT_FRAME_GRID,
                   patches: int = 16, measure: bool = False) -> list[ScalingRow]:
    """One row per (kind, frame count): tokens, FLOPs, params, optional runtime."""
    frame_grid = tuple(frame_grid)
    if not frame_grid:
        raise ValueError("scaling_report needs at least one frame count")
    rows = []
    for descriptor in descriptors:
        for frames in frame_grid:
            _check_grid(descriptor, frames, patches)
        params = param_count(descriptor)
        for frames in frame_grid:
            runtime = None
            if measure:
                runtime = measure_runtime(
                    _forward_closure(descriptor, frames, patches)
                ).mean
            rows.append(ScalingRow(
                kind=descriptor.kind,
                frames=frames,
                patches=patches,
                tokens=token_count(descriptor, frames, patches),
                flops=flop_estimate(descriptor, frames, patches),
                params=params,
                runtime_mean_s=runtime,
            ))
    return rows


def build_projector(descriptor: ProjectorDescriptor, seed: int | None = None,
                    prng=None):
    """Initialized parameters for any kind.

    Draws from ``prng`` when given (callers sharing one stream across several
    initializations), else from a fresh stream seeded with ``seed``
    (defaulting to the config's seed).
    """
    from .prng import Prng
    from . import projectors as proj

    cfg = descriptor.config
    if prng is None:
        prng = Prng(cfg.seed if seed is None else seed)
    if descriptor.kind == KIND_ESPRESSO:
        return proj.init_espresso_params(cfg, prng)
    if descriptor.kind == KIND_MLP:
        return proj.init_mlp_baseline_params(cfg, prng)
    if descriptor.kind == KIND_PR:
        return proj.init_pr_params(cfg, descriptor.pr_queries, prng)
    return proj.init_meanpool_params(cfg, prng)


def projector_tokens(descriptor: ProjectorDescriptor, params, features):
    """Batched token tensor for ``[..., T, P, D_v]`` features, any kind."""
    from . import projectors as proj

    cfg = descriptor.config
    if descriptor.kind == KIND_ESPRESSO:
        return proj.espresso_tokens(features, params, cfg)
    if descriptor.kind == KIND_MLP:
        return proj.mlp_tokens(features, params)
    if descriptor.kind == KIND_PR:
        return proj.pr_tokens(features, params, cfg.pe)
    return proj.meanpool_tokens(features, params)


def _forward_closure(descriptor: ProjectorDescriptor, frames: int, patches: int):
    from .prng import Prng
    from .tensor import DenseTensor

    cfg = descriptor.config
    params = build_projector(descriptor)
    feats = DenseTensor(
        Prng(cfg.seed + 1).normals(frames * patches * cfg.feat_dim)
        .reshape(frames, patches, cfg.feat_dim)
    )
    return lambda: projector_tokens(descriptor, params, feats)
