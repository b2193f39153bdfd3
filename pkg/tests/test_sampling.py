import numpy as np
import pytest

from wsp.errors import ConfigError, ContractError, FallbackRequired
from wsp.sampling import (
    AugmentConfig,
    BatchSpec,
    augment,
    epoch_batches,
    make_views,
    sample_batch,
    sample_batch_fallback,
)

NULL_AUG = AugmentConfig(rotation_degrees=0.0, crop_scale=(1.0, 1.0), flip_prob=0.0)


def class_counts(batch):
    counts: dict[int, int] = {}
    for sample in batch:
        counts[sample.y] = counts.get(sample.y, 0) + 1
    return counts


class TestBatchSpec:
    def test_validation(self):
        with pytest.raises(ConfigError):
            BatchSpec(batch_size=3)
        with pytest.raises(ConfigError):
            BatchSpec(batch_size=0)
        with pytest.raises(ConfigError):
            BatchSpec(mode="greedy")


class TestStrictSampler:
    def test_exact_balance_with_two_patients_per_class(self, balanced_volumes):
        batch = sample_batch(balanced_volumes, BatchSpec(batch_size=8, seed=1))
        assert len(batch) == 8
        assert len({s.patient_id for s in batch}) == 8
        assert set(class_counts(batch).values()) == {2}

    def test_balance_within_one_when_not_divisible(self, balanced_volumes):
        for draw in range(100):
            batch = sample_batch(balanced_volumes, BatchSpec(batch_size=6, seed=draw))
            counts = class_counts(batch)
            assert len({s.patient_id for s in batch}) == 6
            assert max(counts.values()) - min(counts.values()) <= 1
            assert set(counts.values()) <= {1, 2}

    def test_too_few_patients_signals_fallback(self, balanced_volumes):
        five = balanced_volumes[:5]
        with pytest.raises(FallbackRequired):
            sample_batch(five, BatchSpec(batch_size=8, seed=0))

    def test_deterministic_given_seed_and_epoch(self, balanced_volumes):
        spec = BatchSpec(batch_size=8, seed=3, epoch=2)
        a = sample_batch(balanced_volumes, spec)
        b = sample_batch(balanced_volumes, spec)
        assert [s.slice_id for s in a] == [s.slice_id for s in b]

    def test_slice_comes_from_retained_window(self, balanced_volumes):
        batch = sample_batch(balanced_volumes, BatchSpec(batch_size=8, seed=4))
        valid_ids = {
            f"{v.volume_id}/{s.p}" for v in balanced_volumes for s in v.slices
        }
        assert all(s.slice_id in valid_ids for s in batch)


class TestFallbackSampler:
    def test_three_patients_fill_a_batch_of_eight(self, balanced_volumes):
        three = balanced_volumes[:3]
        for draw in range(50):
            batch = sample_batch_fallback(three, BatchSpec(batch_size=8, seed=draw))
            assert len(batch) == 8
            counts = class_counts(batch)
            assert max(counts.values()) - min(counts.values()) <= 1

    def test_single_patient_repeats(self, balanced_volumes):
        solo = balanced_volumes[:1]
        batch = sample_batch_fallback(solo, BatchSpec(batch_size=4, seed=0))
        assert {s.patient_id for s in batch} == {solo[0].patient_id}

    def test_deterministic(self, balanced_volumes):
        spec = BatchSpec(batch_size=6, seed=9, epoch=1)
        a = sample_batch_fallback(balanced_volumes[:5], spec)
        b = sample_batch_fallback(balanced_volumes[:5], spec)
        assert [s.slice_id for s in a] == [s.slice_id for s in b]


class TestEpochPartition:
    def test_coverage_without_repetition(self, balanced_volumes):
        for epoch in range(20):
            batches = epoch_batches(balanced_volumes, BatchSpec(batch_size=8, seed=1, epoch=epoch))
            seen = [s.patient_id for batch in batches for s in batch]
            assert len(seen) == len(balanced_volumes)
            assert len(set(seen)) == len(seen)

    def test_batches_balanced_and_distinct(self, balanced_volumes):
        batches = epoch_batches(balanced_volumes, BatchSpec(batch_size=8, seed=2))
        assert all(len(b) == 8 for b in batches)
        for batch in batches:
            assert len({s.patient_id for s in batch}) == len(batch)
            assert set(class_counts(batch).values()) == {2}

    def test_partitions_differ_across_epochs(self, balanced_volumes):
        first = epoch_batches(balanced_volumes, BatchSpec(batch_size=8, seed=1, epoch=0))
        second = epoch_batches(balanced_volumes, BatchSpec(batch_size=8, seed=1, epoch=1))
        assert [s.patient_id for b in first for s in b] != [
            s.patient_id for b in second for s in b
        ]

    def test_last_batch_may_be_short(self, balanced_volumes):
        subset = balanced_volumes[:10]
        batches = epoch_batches(subset, BatchSpec(batch_size=8, seed=0))
        assert [len(b) for b in batches] == [8, 2]


class TestAugment:
    def test_null_augmentation_is_identity(self, rng):
        img = rng.random((16, 16))
        out = augment(img, NULL_AUG, draw_seed=0)
        np.testing.assert_allclose(out, img, atol=1e-6)

    def test_flip_is_involution(self, rng):
        img = rng.random((12, 12))
        flip_only = AugmentConfig(rotation_degrees=0.0, crop_scale=(1.0, 1.0), flip_prob=1.0)
        once = augment(img, flip_only, draw_seed=5)
        twice = augment(once, flip_only, draw_seed=5)
        assert np.array_equal(twice, img)

    def test_different_draws_differ(self, rng):
        img = rng.random((16, 16))
        cfg = AugmentConfig(seed=0)
        a = augment(img, cfg, draw_seed=0)
        b = augment(img, cfg, draw_seed=1)
        assert not np.array_equal(a, b)

    def test_bit_for_bit_determinism(self, rng):
        img = rng.random((16, 16))
        cfg = AugmentConfig(seed=7)
        a = augment(img, cfg, draw_seed=(3, 4))
        b = augment(img, cfg, draw_seed=(3, 4))
        assert np.array_equal(a, b)

    def test_shape_preserved(self, rng):
        img = rng.random((16, 16))
        out = augment(img, AugmentConfig(seed=1), draw_seed=2)
        assert out.shape == img.shape

    def test_square_required(self, rng):
        with pytest.raises(ContractError):
            augment(rng.random((8, 10)), AugmentConfig(), draw_seed=0)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            AugmentConfig(crop_scale=(0.0, 1.0))
        with pytest.raises(ConfigError):
            AugmentConfig(crop_scale=(0.9, 0.8))
        with pytest.raises(ConfigError):
            AugmentConfig(rotation_degrees=-5)
        with pytest.raises(ConfigError):
            AugmentConfig(flip_prob=1.5)


class TestMakeViews:
    def test_shared_meta_is_the_sample(self, balanced_volumes):
        sample = sample_batch(balanced_volumes, BatchSpec(batch_size=8, seed=0))[0]
        view_a, view_b, meta = make_views(sample, AugmentConfig(seed=0), seed=1)
        assert meta is sample

    def test_views_differ_under_augmentation(self, balanced_volumes, rng):
        sample = sample_batch(balanced_volumes, BatchSpec(batch_size=8, seed=0))[0]
        view_a, view_b, _ = make_views(sample, AugmentConfig(seed=0), seed=1)
        assert not np.array_equal(view_a, view_b)

    def test_inference_mode_returns_original(self, balanced_volumes):
        sample = sample_batch(balanced_volumes, BatchSpec(batch_size=8, seed=0))[0]
        disabled = AugmentConfig(enabled=False)
        view_a, view_b, _ = make_views(sample, disabled, seed=1)
        np.testing.assert_array_equal(view_a, np.asarray(sample.pixels, dtype=np.float64))
        np.testing.assert_array_equal(view_a, view_b)
