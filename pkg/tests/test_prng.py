"""Deterministic generator against an independent reference implementation."""

import math

import numpy as np
import pytest

from espresso.prng import Prng

MASK = (1 << 64) - 1


def reference_splitmix64(seed, count):
    """Straight transcription of the mixing constants, kept independent of
    the implementation under test."""
    out = []
    state = seed & MASK
    for _ in range(count):
        state = (state + 0x9E3779B97F4A7C15) & MASK
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
        out.append((z ^ (z >> 31)) & MASK)
    return out


class TestRawStream:
    def test_seed_zero_first_output(self):
        assert Prng(0).next_u64() == 0xE220A8397B1DCDAF

    @pytest.mark.parametrize("seed", [0, 1, 42, 2**63, MASK])
    def test_matches_reference(self, seed):
        prng = Prng(seed)
        assert [prng.next_u64() for _ in range(100)] == reference_splitmix64(seed, 100)

    def test_same_seed_same_stream(self):
        a, b = Prng(7), Prng(7)
        assert [a.next_u64() for _ in range(50)] == [b.next_u64() for _ in range(50)]

    def test_block_fill_bit_identical_to_scalar(self):
        scalar = Prng(99)
        block = Prng(99).next_block(257)
        assert block.dtype == np.uint64
        assert [int(v) for v in block] == [scalar.next_u64() for _ in range(257)]

    def test_block_resumes_where_scalar_would(self):
        a, b = Prng(5), Prng(5)
        a.next_block(10)
        for _ in range(10):
            b.next_u64()
        assert a.next_u64() == b.next_u64()

    def test_block_rejects_negative(self):
        with pytest.raises(ValueError):
            Prng(0).next_block(-1)

    def test_block_zero_empty(self):
        assert Prng(0).next_block(0).size == 0


class TestDerivedDraws:
    def test_uniform_in_half_open_unit(self):
        prng = Prng(3)
        draws = [prng.uniform() for _ in range(1000)]
        assert all(0.0 < u <= 1.0 for u in draws)

    def test_uniform_formula(self):
        raw = reference_splitmix64(11, 1)[0]
        assert Prng(11).uniform() == ((raw >> 11) + 1) * 2.0**-53

    def test_uniforms_match_scalar(self):
        scalar = Prng(13)
        vector = Prng(13).uniforms(100)
        assert [scalar.uniform() for _ in range(100)] == list(vector)

    def test_normal_is_box_muller_cosine(self):
        scalar = Prng(17)
        u1, u2 = scalar.uniform(), scalar.uniform()
        expect = math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)
        assert Prng(17).normal() == pytest.approx(expect, abs=0.0)

    def test_normals_match_scalar(self):
        scalar = Prng(19)
        vector = Prng(19).normals(101)
        assert [scalar.normal() for _ in range(101)] == list(vector)

    def test_normals_moments(self):
        draws = Prng(23).normals(200_000)
        assert abs(draws.mean()) < 0.01
        assert abs(draws.std() - 1.0) < 0.01

    def test_below_range_and_count(self):
        prng = Prng(29)
        draws = [prng.below(7) for _ in range(500)]
        assert set(draws) <= set(range(7))
        assert len(set(draws)) == 7

    def test_below_is_modulo_of_raw(self):
        raw = reference_splitmix64(31, 1)[0]
        assert Prng(31).below(10) == raw % 10

    def test_below_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            Prng(0).below(0)


class TestShuffle:
    def test_matches_reference_fisher_yates(self):
        items = list(range(8))
        Prng(41).shuffle(items)
        raws = reference_splitmix64(41, 7)
        expect = list(range(8))
        for draw, i in zip(raws, range(7, 0, -1)):
            j = draw % (i + 1)
            expect[i], expect[j] = expect[j], expect[i]
        assert items == expect

    def test_is_permutation(self):
        items = list(range(100))
        Prng(43).shuffle(items)
        assert sorted(items) == list(range(100))

    def test_empty_and_singleton_no_draws(self):
        prng = Prng(47)
        prng.shuffle([])
        only = [5]
        prng.shuffle(only)
        assert only == [5]
        assert prng.next_u64() == Prng(47).next_u64()
