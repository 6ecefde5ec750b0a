"""Synthetic retrieval benchmark: generation, composition, correlation."""

import math

import numpy as np
import pytest

from espresso.prng import Prng
from espresso.synthbench import (
    AXIS_SEGMENTS,
    AXIS_SPATIAL,
    AXIS_TEMPORAL,
    SCENES_PER_COMPOSITE,
    SEGMENT_SWEEP_DEFAULT,
    SEGMENT_SWEEP_NEEDLE,
    SPATIAL_SWEEP_ONE_SEGMENT,
    TEMPORAL_SWEEP_128_FRAMES,
    SceneSpec,
    build_needle_composite,
    compression_rate,
    compression_sweep,
    gen_scene,
    make_needle_dataset,
    pearson,
)

# Canned-table correlations, frozen from an independent computation.
R_SEGMENTS_DEFAULT = 0.9660893634499178
R_SEGMENTS_NEEDLE = 0.9899559958380577
R_SPATIAL = 0.3857600554351961
R_TEMPORAL = 0.3681069975811523


def four_scenes(seed=0, frames=2, motifs=(0, 1, 2, 3)):
    return [
        gen_scene(SceneSpec(seed=seed + k, frames=frames, patches=3, feat_dim=4,
                            motif_class=motifs[k]))
        for k in range(4)
    ]


class TestSceneSpec:
    def test_defaults_valid(self):
        spec = SceneSpec(seed=0)
        assert (spec.frames, spec.patches, spec.feat_dim) == (8, 16, 16)

    @pytest.mark.parametrize("kwargs", [
        dict(frames=0), dict(patches=0), dict(feat_dim=0),
        dict(num_classes=20), dict(motif_class=4), dict(motif_class=-1),
        dict(amplitude=-0.1), dict(noise_sigma=-1.0),
    ])
    def test_invalid_rejected(self, kwargs):
        with pytest.raises(ValueError):
            SceneSpec(seed=0, **kwargs)


class TestGenScene:
    def test_noiseless_scene_is_pure_motif(self):
        spec = SceneSpec(seed=1, frames=3, patches=2, feat_dim=4,
                         motif_class=2, amplitude=1.5, noise_sigma=0.0)
        video, label = gen_scene(spec)
        assert label == 2
        assert np.array_equal(video.features.nd[:, :, 2], np.full((3, 2), 1.5))
        other = np.delete(video.features.nd, 2, axis=2)
        assert np.array_equal(other, np.zeros_like(other))

    def test_zero_amplitude_is_pure_noise(self):
        spec = SceneSpec(seed=2, frames=3, patches=2, feat_dim=4,
                         motif_class=1, amplitude=0.0, noise_sigma=1.0)
        video, _ = gen_scene(spec)
        expect = Prng(2).normals(24).reshape(3, 2, 4)
        assert np.array_equal(video.features.nd, expect)

    def test_draw_order_oracle(self):
        spec = SceneSpec(seed=3, frames=2, patches=3, feat_dim=4,
                         motif_class=0, amplitude=2.0, noise_sigma=0.5)
        video, _ = gen_scene(spec)
        expect = Prng(3).normals(24).reshape(2, 3, 4) * 0.5
        expect[:, :, 0] += 2.0
        assert np.array_equal(video.features.nd, expect)

    def test_deterministic(self):
        spec = SceneSpec(seed=4)
        a, _ = gen_scene(spec)
        b, _ = gen_scene(spec)
        assert np.array_equal(a.features.nd, b.features.nd)

    def test_motif_channel_mean_near_amplitude(self):
        spec = SceneSpec(seed=5, frames=16, patches=16, motif_class=3)
        video, _ = gen_scene(spec)
        bound = 5.0 / math.sqrt(16 * 16)
        assert abs(video.features.nd[:, :, 3].mean() - 2.0) < bound
        assert abs(video.features.nd[:, :, 0].mean()) < bound


class TestBuildComposite:
    def test_boundaries_partition_frames(self):
        composite = build_needle_composite(four_scenes(frames=8), seed=10)
        assert composite.boundaries == ((0, 8), (8, 16), (16, 24), (24, 32))
        assert composite.features.shape == (32, 3, 4)
        assert composite.frames_per_scene == 8

    def test_slices_are_source_scenes_bit_exact(self):
        scenes = four_scenes(seed=20, frames=2)
        composite = build_needle_composite(scenes, seed=11)
        assert sorted(composite.scene_order) == [0, 1, 2, 3]
        for k, (lo, hi) in enumerate(composite.boundaries):
            src = scenes[composite.scene_order[k]][0].features.nd
            assert np.array_equal(composite.features.nd[lo:hi], src)

    def test_labels_follow_order(self):
        scenes = four_scenes(seed=30, motifs=(2, 0, 3, 1))
        composite = build_needle_composite(scenes, seed=12)
        source_labels = (2, 0, 3, 1)
        assert composite.motif_labels == tuple(
            source_labels[s] for s in composite.scene_order)
        assert composite.label == composite.motif_labels[composite.target_scene]
        assert 0 <= composite.target_scene < 4

    def test_stream_consumption_order(self):
        composite = build_needle_composite(four_scenes(seed=40), seed=13)
        prng = Prng(13)
        order = [0, 1, 2, 3]
        prng.shuffle(order)
        assert composite.scene_order == tuple(order)
        assert composite.target_scene == prng.below(4)

    def test_wrong_count_rejected(self):
        with pytest.raises(ValueError, match="4"):
            build_needle_composite(four_scenes()[:3], seed=0)

    def test_duplicate_labels_rejected(self):
        with pytest.raises(ValueError, match="distinct"):
            build_needle_composite(four_scenes(motifs=(0, 1, 2, 2)), seed=0)

    def test_mixed_shapes_rejected(self):
        scenes = four_scenes(frames=2)[:3] + four_scenes(frames=3, motifs=(3, 0, 1, 2))[:1]
        with pytest.raises(ValueError, match="shapes"):
            build_needle_composite(scenes, seed=0)


class TestMakeDataset:
    def test_count_and_shapes(self):
        ds = make_needle_dataset(3, base_seed=100, scene_frames=2, patches=3,
                                 feat_dim=8)
        assert len(ds) == 3
        assert ds.composite_frames == 8
        for ex in ds.examples:
            assert ex.composite.features.shape == (8, 3, 8)
            assert ex.target_onehot.shape == (4,)
            assert ex.target_onehot.nd[ex.composite.target_scene] == 1.0
            assert ex.target_onehot.nd.sum() == 1.0
            assert ex.label == ex.composite.motif_labels[ex.composite.target_scene]

    def test_empty_dataset(self):
        assert len(make_needle_dataset(0, base_seed=0)) == 0

    def test_examples_keyed_by_absolute_seed(self):
        shifted = make_needle_dataset(1, base_seed=205, scene_frames=2,
                                      patches=3, feat_dim=8)
        window = make_needle_dataset(6, base_seed=200, scene_frames=2,
                                     patches=3, feat_dim=8)
        a, b = shifted.examples[0], window.examples[5]
        assert np.array_equal(a.composite.features.nd, b.composite.features.nd)
        assert a.composite.scene_order == b.composite.scene_order
        assert a.composite.target_scene == b.composite.target_scene

    def test_scene_classes_distinct_within_example(self):
        ds = make_needle_dataset(8, base_seed=300, scene_frames=2, patches=3,
                                 feat_dim=8, num_classes=6)
        for ex in ds.examples:
            labels = ex.composite.motif_labels
            assert len(set(labels)) == 4
            assert all(0 <= c < 6 for c in labels)

    def test_labels_roughly_uniform(self):
        ds = make_needle_dataset(400, base_seed=400, scene_frames=1, patches=1,
                                 feat_dim=4)
        counts = np.bincount([ex.label for ex in ds.examples], minlength=4)
        assert counts.min() > 0
        # each class is hit ~100 times; allow 5 sigma of binomial spread
        assert np.abs(counts - 100).max() < 5 * math.sqrt(400 * 0.25 * 0.75)

    def test_validation(self):
        with pytest.raises(ValueError):
            make_needle_dataset(-1, base_seed=0)
        with pytest.raises(ValueError):
            make_needle_dataset(1, base_seed=0, num_classes=3)


class TestPearson:
    def test_perfect_correlation(self):
        assert pearson([1, 2, 3], [1, 2, 3]) == 1.0
        assert pearson([1, 2, 3], [-1, -2, -3]) == -1.0

    def test_affine_invariance(self):
        xs = Prng(50).normals(20)
        ys = Prng(51).normals(20)
        base = pearson(xs, ys)
        assert abs(pearson(xs * 3.0 + 11.0, ys) - base) <= 1e-12
        assert abs(pearson(xs, ys * -2.0 + 5.0) + base) <= 1e-12

    def test_symmetric(self):
        xs = Prng(52).normals(10)
        ys = Prng(53).normals(10)
        assert pearson(xs, ys) == pearson(ys, xs)

    def test_bounded(self):
        xs = np.array([1.0, 1.0 + 1e-15, 3.0])
        assert -1.0 <= pearson(xs, xs) <= 1.0

    def test_hand_value(self):
        # r = cov / (sx * sy) for a worked 4-point example
        xs, ys = [1.0, 2.0, 3.0, 4.0], [2.0, 1.0, 4.0, 3.0]
        assert pearson(xs, ys) == pytest.approx(0.6, abs=1e-15)

    def test_validation(self):
        with pytest.raises(ValueError):
            pearson([1, 2], [1, 2, 3])
        with pytest.raises(ValueError):
            pearson([1], [2])
        with pytest.raises(ValueError):
            pearson([1, 1, 1], [1, 2, 3])
        with pytest.raises(ValueError):
            pearson(np.zeros((2, 2)), np.zeros((2, 2)))


class TestCompressionRate:
    def test_log_axes(self):
        assert compression_rate(AXIS_SPATIAL, 64) == -math.log(64)
        assert compression_rate(AXIS_TEMPORAL, 8) == -math.log(8)

    def test_segments_axis_raw(self):
        assert compression_rate(AXIS_SEGMENTS, 8) == 8.0

    def test_validation(self):
        with pytest.raises(ValueError):
            compression_rate("depth", 4)
        with pytest.raises(ValueError):
            compression_rate(AXIS_SPATIAL, 0)


class TestCompressionSweep:
    @pytest.mark.parametrize("axis,table,expect_r", [
        (AXIS_SEGMENTS, SEGMENT_SWEEP_DEFAULT, R_SEGMENTS_DEFAULT),
        (AXIS_SEGMENTS, SEGMENT_SWEEP_NEEDLE, R_SEGMENTS_NEEDLE),
        (AXIS_SPATIAL, SPATIAL_SWEEP_ONE_SEGMENT, R_SPATIAL),
        (AXIS_TEMPORAL, TEMPORAL_SWEEP_128_FRAMES, R_TEMPORAL),
    ])
    def test_canned_tables_hit_frozen_r(self, axis, table, expect_r):
        lookup = dict(table)
        result = compression_sweep(axis, [v for v, _ in table],
                                   lambda v: lookup[v])
        assert result.axis == axis
        assert result.r == pytest.approx(expect_r, abs=1e-12)
        assert [row.metric for row in result.rows] == [m for _, m in table]

    def test_rows_carry_rates(self):
        result = compression_sweep(AXIS_SEGMENTS, [1, 2], lambda v: float(v))
        assert [(row.value, row.rate) for row in result.rows] == [(1.0, 1.0), (2.0, 2.0)]

    def test_evaluator_failure_names_config(self):
        def broken(value):
            if value == 4:
                raise KeyError("missing row")
            return 1.0 * value
        with pytest.raises(RuntimeError, match="segments=4") as err:
            compression_sweep(AXIS_SEGMENTS, [1, 2, 4], broken)
        assert isinstance(err.value.__cause__, KeyError)

    def test_too_few_values_rejected(self):
        with pytest.raises(ValueError):
            compression_sweep(AXIS_SEGMENTS, [1], lambda v: 1.0)

    def test_scenes_per_composite_constant(self):
        assert SCENES_PER_COMPOSITE == 4
