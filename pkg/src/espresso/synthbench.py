"""Synthetic needle-in-a-haystack benchmark and correlation tooling.

A scene is a feature video whose every feature vector is isotropic Gaussian
noise plus a class-specific motif: ``amplitude`` times the basis vector of
the scene's motif class.  A needle composite concatenates four scenes with
pairwise-distinct motif classes in a shuffled order; the question "which
motif does scene k show?" is answerable only if the projector's fixed-length
output still carries per-segment information.  A linear probe on the
uncompressed features solves the task nearly perfectly, so accuracy
differences isolate the projector bottleneck.

Everything is deterministic from seeds: example ``i`` of a dataset depends
only on ``base_seed + i``, so train/eval splits are disjoint by seed range
and any example can be regenerated in isolation.

``pearson`` and ``compression_sweep`` quantify how accuracy co-varies with
compression: the spatial and temporal axes use ``-log(value)`` as the
compression rate, the segments axis uses the raw segment count.  The
``*_SWEEP_*`` constants are reference accuracy measurements used to validate
the correlation tooling against known coefficients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .prng import Prng
from .projectors import FeatureVideo
from .tensor import DenseTensor

SCENES_PER_COMPOSITE = 4

AXIS_SPATIAL = "spatial"
AXIS_TEMPORAL = "temporal"
AXIS_SEGMENTS = "segments"
SWEEP_AXES = (AXIS_SPATIAL, AXIS_TEMPORAL, AXIS_SEGMENTS)

# Reference sweeps: (swept value, accuracy in percent).  Segment count at 128
# frames under the default and needle protocols; spatial query budget at one
# segment; temporal query budget at 128 frames.
SEGMENT_SWEEP_DEFAULT = ((1, 40.17), (2, 41.66), (4, 42.18), (8, 50.41))
SEGMENT_SWEEP_NEEDLE = ((1, 32.98), (2, 36.21), (4, 38.02), (8, 45.08))
SPATIAL_SWEEP_ONE_SEGMENT = (
    (576, 34.55), (288, 44.13), (144, 41.66), (64, 37.39),
    (32, 45.16), (16, 43.85), (8, 38.50), (4, 43.91),
)
TEMPORAL_SWEEP_128_FRAMES = (
    (128, 34.25), (64, 39.22), (32, 35.58), (16, 33.39), (8, 45.28), (4, 37.05),
)


@dataclass
class SceneSpec:
    """Recipe for one synthetic scene."""

    seed: int
    frames: int = 8
    patches: int = 16
    feat_dim: int = 16
    motif_class: int = 0
    num_classes: int = 4
    amplitude: float = 2.0
    noise_sigma: float = 1.0

    def __post_init__(self):
        if min(self.frames, self.patches, self.feat_dim) < 1:
            raise ValueError(f"scene dimensions must be >= 1: {self}")
        if self.num_classes > self.feat_dim:
            raise ValueError(
                f"num_classes {self.num_classes} exceeds feat_dim {self.feat_dim}"
            )
        if not 0 <= self.motif_class < self.num_classes:
            raise ValueError(
                f"motif_class {self.motif_class} outside [0, {self.num_classes})"
            )
        if self.amplitude < 0:
            raise ValueError(f"amplitude must be >= 0, got {self.amplitude}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")


def gen_scene(spec: SceneSpec) -> tuple[FeatureVideo, int]:
    """One scene and its motif label, identical given an identical spec.

    Draws ``frames * patches * feat_dim`` normals in row-major order, scales
    by ``noise_sigma``, then adds ``amplitude`` on the motif channel.
    """
    prng = Prng(spec.seed)
    count = spec.frames * spec.patches * spec.feat_dim
    feats = (prng.normals(count).reshape(spec.frames, spec.patches, spec.feat_dim)
             * spec.noise_sigma)
    feats[:, :, spec.motif_class] += spec.amplitude
    return FeatureVideo(DenseTensor(feats)), spec.motif_class


@dataclass
class NeedleComposite:
    """Four scenes back-to-back in shuffled order.

    ``scene_order[k]`` is the source slot shown at composite position ``k``;
    ``boundaries[k]`` is that position's half-open frame range;
    ``motif_labels[k]`` is the motif class at position ``k``; ``target_scene``
    is the queried composite position.
    """

    features: DenseTensor  # [4 * frames_per_scene, patches, feat_dim]
    scene_order: tuple[int, ...]
    boundaries: tuple[tuple[int, int], ...]
    target_scene: int
    motif_labels: tuple[int, ...]

    @property
    def frames_per_scene(self) -> int:
        return self.features.shape[0] // SCENES_PER_COMPOSITE

    @property
    def label(self) -> int:
        return self.motif_labels[self.target_scene]


def build_needle_composite(scenes, seed: int) -> NeedleComposite:
    """Concatenate four labeled scenes in a shuffled order.

    ``scenes`` is four ``(FeatureVideo, motif label)`` pairs with equal shapes
    and pairwise-distinct labels.  The Fisher-Yates order shuffle and the
    uniform target-position draw both consume one stream seeded with
    ``seed``, in that order.
    """
    scenes = list(scenes)
    if len(scenes) != SCENES_PER_COMPOSITE:
        raise ValueError(f"a composite needs exactly {SCENES_PER_COMPOSITE} scenes, got {len(scenes)}")
    videos = [video for video, _ in scenes]
    labels = tuple(int(label) for _, label in scenes)
    if len(set(labels)) != SCENES_PER_COMPOSITE:
        raise ValueError(f"scene motif labels must be pairwise distinct, got {labels}")
    shape = videos[0].features.shape
    for video in videos[1:]:
        if video.features.shape != shape:
            raise ValueError(f"scene shapes differ: {shape} vs {video.features.shape}")

    prng = Prng(seed)
    order = list(range(SCENES_PER_COMPOSITE))
    prng.shuffle(order)
    target = prng.below(SCENES_PER_COMPOSITE)
    features = np.concatenate([videos[s].features.nd for s in order], axis=0)
    frames = shape[0]
    return NeedleComposite(
        features=DenseTensor(features),
        scene_order=tuple(order),
        boundaries=tuple((k * frames, (k + 1) * frames) for k in range(SCENES_PER_COMPOSITE)),
        target_scene=target,
        motif_labels=tuple(labels[s] for s in order),
    )


@dataclass
class NeedleExample:
    composite: NeedleComposite
    target_onehot: DenseTensor  # [4]
    label: int


@dataclass
class NeedleDataset:
    examples: list[NeedleExample]
    split: str
    base_seed: int
    scene_frames: int
    patches: int
    feat_dim: int
    num_classes: int
    amplitude: float
    noise_sigma: float

    def __len__(self) -> int:
        return len(self.examples)

    @property
    def composite_frames(self) -> int:
        return SCENES_PER_COMPOSITE * self.scene_frames


def make_needle_dataset(count: int, base_seed: int, *, split: str = "train",
                        scene_frames: int = 8, patches: int = 16, feat_dim: int = 16,
                        num_classes: int = 4, amplitude: float = 2.0,
                        noise_sigma: float = 1.0) -> NeedleDataset:
    """``count`` composites; example ``i`` derives wholly from ``base_seed + i``.

    Per example the stream is consumed in a fixed order: shuffle of the class
    pool (the first four entries become the scene classes, pairwise
    distinct), one scene seed per slot, then the composite seed.
    """
    if count < 0:
        raise ValueError(f"count must be >= 0, got {count}")
    if num_classes < SCENES_PER_COMPOSITE:
        raise ValueError(
            f"num_classes must be >= {SCENES_PER_COMPOSITE} for distinct scene motifs, got {num_classes}"
        )
    examples = []
    for i in range(count):
        prng = Prng(base_seed + i)
        pool = list(range(num_classes))
        prng.shuffle(pool)
        classes = pool[:SCENES_PER_COMPOSITE]
        scene_seeds = [prng.next_u64() for _ in range(SCENES_PER_COMPOSITE)]
        composite_seed = prng.next_u64()
        scenes = [
            gen_scene(SceneSpec(
                seed=scene_seeds[k], frames=scene_frames, patches=patches,
                feat_dim=feat_dim, motif_class=classes[k], num_classes=num_classes,
                amplitude=amplitude, noise_sigma=noise_sigma,
            ))
            for k in range(SCENES_PER_COMPOSITE)
        ]
        composite = build_needle_composite(scenes, composite_seed)
        onehot = np.zeros(SCENES_PER_COMPOSITE)
        onehot[composite.target_scene] = 1.0
        examples.append(NeedleExample(
            composite=composite,
            target_onehot=DenseTensor(onehot),
            label=composite.label,
        ))
    return NeedleDataset(
        examples=examples, split=split, base_seed=base_seed,
        scene_frames=scene_frames, patches=patches, feat_dim=feat_dim,
        num_classes=num_classes, amplitude=amplitude, noise_sigma=noise_sigma,
    )


# --------------------------------------------------------------------------
# correlation tooling

def pearson(xs, ys) -> float:
    """Sample Pearson correlation; rejects degenerate inputs."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.ndim != 1 or ys.ndim != 1:
        raise ValueError("pearson expects flat sequences")
    if xs.size != ys.size:
        raise ValueError(f"pearson length mismatch: {xs.size} vs {ys.size}")
    if xs.size < 2:
        raise ValueError(f"pearson needs at least 2 points, got {xs.size}")
    dx = xs - xs.mean()
    dy = ys - ys.mean()
    denom = math.sqrt(float((dx * dx).sum()) * float((dy * dy).sum()))
    if denom == 0.0:
        raise ValueError("pearson undefined for zero-variance input")
    r = float((dx * dy).sum()) / denom
    # Rounding can push |r| a few ulp past 1; the coefficient is bounded.
    return max(-1.0, min(1.0, r))


@dataclass
class SweepRow:
    value: float
    rate: float
    metric: float


@dataclass
class SweepResult:
    axis: str
    rows: list[SweepRow] = field(default_factory=list)
    r: float = 0.0


def compression_rate(axis: str, value: float) -> float:
    """Compression rate of a swept value: ``-log(value)`` for the spatial and
    temporal axes, the raw count for the segments axis."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; use one of {SWEEP_AXES}")
    if axis == AXIS_SEGMENTS:
        return float(value)
    if value <= 0:
        raise ValueError(f"{axis} sweep values must be positive, got {value}")
    return -math.log(value)


def compression_sweep(axis: str, values, evaluator) -> SweepResult:
    """Evaluate ``evaluator(value)`` over the sweep and correlate the metric
    with the compression rate."""
    values = list(values)
    if len(values) < 2:
        raise ValueError(f"a sweep needs at least 2 values, got {len(values)}")
    rows = []
    for value in values:
        rate = compression_rate(axis, value)
        try:
            metric = float(evaluator(value))
        except Exception as exc:
            raise RuntimeError(f"sweep evaluator failed at {axis}={value}") from exc
        rows.append(SweepRow(value=float(value), rate=rate, metric=metric))
    r = pearson([row.rate for row in rows], [row.metric for row in rows])
    return SweepResult(axis=axis, rows=rows, r=r)
