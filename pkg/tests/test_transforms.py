import numpy as np
import pytest
from hypothesis import given, strategies as st

from buildingseg.errors import InputDomainError, ShapeError
from buildingseg.transforms import (
    AugmentationPolicy,
    NormalizedTile,
    RasterSample,
    augment,
    binarize_mask,
    denormalize,
    downsample_pair,
    identity_policy,
    normalize,
    one_hot,
    tile_from_sample,
)


def make_sample(size=64, seed=0, split="train"):
    rng = np.random.default_rng(seed)
    image = rng.integers(0, 256, (size, size, 3), dtype=np.uint8)
    mask = (rng.random((size, size)) > 0.6).astype(np.uint8)
    return RasterSample(image=image, mask=mask, source_id="s", split=split)


class TestNormalize:
    def test_lower_bound(self):
        assert normalize(np.array([[[0, 0, 0]]], dtype=np.uint8))[0, 0, 0] == -1.0

    def test_upper_bound(self):
        assert normalize(np.array([[[255, 255, 255]]], dtype=np.uint8))[0, 0, 0] == 1.0

    def test_midpoint_value(self):
        # 127/127.5 - 1, frozen from independent arithmetic
        value = normalize(np.full((1, 1, 3), 127, dtype=np.uint8))[0, 0, 0]
        assert value == pytest.approx(-0.00392156862745098, abs=1e-15)

    def test_range_invariant(self):
        rng = np.random.default_rng(3)
        out = normalize(rng.integers(0, 256, (16, 16, 3)))
        assert out.min() >= -1.0 and out.max() <= 1.0

    def test_rejects_out_of_range_naming_coordinate(self):
        bad = np.zeros((2, 3, 3), dtype=np.int16)
        bad[1, 2, 0] = 300
        with pytest.raises(InputDomainError, match=r"300.*\(1, 2, 0\)"):
            normalize(bad)

    @given(a=st.integers(0, 255), b=st.integers(0, 255))
    def test_affine_property(self, a, b):
        na = normalize(np.array([[[a] * 3]]))[0, 0, 0]
        nb = normalize(np.array([[[b] * 3]]))[0, 0, 0]
        assert (na - nb) * 127.5 == pytest.approx(a - b, abs=1e-10)


class TestDenormalize:
    def test_bounds(self):
        assert denormalize(np.array(-1.0)) == 0
        assert denormalize(np.array(1.0)) == 255

    def test_half_rounds_up(self):
        # (0.0 + 1) * 127.5 = 127.5, round-half-up -> 128
        assert denormalize(np.array(0.0)) == 128

    def test_clamps(self):
        assert denormalize(np.array(1.7)) == 255
        assert denormalize(np.array(-3.0)) == 0

    def test_round_trip_all_intensities(self):
        values = np.arange(256, dtype=np.uint8).reshape(16, 16, 1).repeat(3, axis=2)
        assert np.array_equal(denormalize(normalize(values)), values)


class TestBinarizeMask:
    def test_threshold_rule(self):
        raw = np.array([[0, 127], [128, 255]], dtype=np.uint8)
        assert np.array_equal(binarize_mask(raw), [[0, 0], [1, 1]])


class TestOneHot:
    def test_all_background(self):
        out = one_hot(np.zeros((2, 2), dtype=np.uint8))
        assert np.array_equal(out[..., 0], np.ones((2, 2)))
        assert np.array_equal(out[..., 1], np.zeros((2, 2)))

    def test_all_foreground(self):
        out = one_hot(np.ones((2, 2), dtype=np.uint8))
        assert np.array_equal(out[..., 1], np.ones((2, 2)))

    def test_mixed(self):
        out = one_hot(np.array([[0, 1], [1, 0]], dtype=np.uint8))
        assert out[..., 0].sum() == 2 and out[..., 1].sum() == 2
        assert np.array_equal(out.sum(axis=-1), np.ones((2, 2)))

    def test_channel1_counts_foreground(self):
        rng = np.random.default_rng(5)
        mask = (rng.random((9, 9)) > 0.5).astype(np.uint8)
        assert one_hot(mask)[..., 1].sum() == mask.sum()

    def test_rejects_nonbinary(self):
        with pytest.raises(InputDomainError):
            one_hot(np.array([[0, 2]], dtype=np.uint8))


class TestDownsamplePair:
    def test_same_size_is_identity(self):
        sample = make_sample(size=64)
        out = downsample_pair(sample, 64)
        assert np.array_equal(out.image, sample.image)
        assert np.array_equal(out.mask, sample.mask)

    def test_downscale_shapes(self):
        out = downsample_pair(make_sample(size=128), 64)
        assert out.image.shape == (64, 64, 3)
        assert out.mask.shape == (64, 64)

    def test_full_scene_to_tile(self):
        rng = np.random.default_rng(1)
        sample = RasterSample(
            image=rng.integers(0, 256, (1500, 1500, 3), dtype=np.uint8),
            mask=(rng.random((1500, 1500)) > 0.8).astype(np.uint8),
            source_id="scene", split="train",
        )
        out = downsample_pair(sample, 256)
        assert out.image.shape == (256, 256, 3)
        assert set(np.unique(out.mask)) <= {0, 1}

    def test_constant_mask_stays_constant(self):
        sample = make_sample(size=128)
        constant = RasterSample(image=sample.image,
                                mask=np.ones((128, 128), dtype=np.uint8),
                                source_id="c", split="train")
        out = downsample_pair(constant, 64)
        assert np.array_equal(out.mask, np.ones((64, 64), dtype=np.uint8))

    def test_source_smaller_than_tile(self):
        with pytest.raises(ShapeError):
            downsample_pair(make_sample(size=32), 64)


def make_tile(size=16, seed=0):
    rng = np.random.default_rng(seed)
    data = normalize(rng.integers(0, 256, (size, size, 3)))
    target = one_hot((rng.random((size, size)) > 0.5).astype(np.uint8))
    return NormalizedTile(data=data, target=target)


class TestAugment:
    def test_zero_probability_is_identity(self):
        tile = make_tile()
        out = augment(tile, identity_policy(), np.random.default_rng(0))
        assert np.array_equal(out.data, tile.data)
        assert np.array_equal(out.target, tile.target)

    def test_hflip_is_involution(self):
        tile = make_tile()
        force = AugmentationPolicy(1.0, 0.0, 0.0)
        once = augment(tile, force, np.random.default_rng(0))
        twice = augment(once, force, np.random.default_rng(0))
        assert np.array_equal(twice.data, tile.data)
        assert np.array_equal(twice.target, tile.target)

    def test_same_seed_reproduces(self):
        tile = make_tile(seed=2)
        policy = AugmentationPolicy(0.5, 0.5, 0.25, seed=9)
        a = augment(tile, policy, policy.rng())
        b = augment(tile, policy, policy.rng())
        assert np.array_equal(a.data, b.data)
        assert np.array_equal(a.target, b.target)

    @given(seed=st.integers(0, 10_000))
    def test_preserves_class_histogram(self, seed):
        tile = make_tile(seed=1)
        policy = AugmentationPolicy(0.5, 0.5, 0.5, seed=seed)
        out = augment(tile, policy, policy.rng())
        assert out.target[..., 1].sum() == tile.target[..., 1].sum()
        assert out.data.shape == tile.data.shape

    def test_policy_validates_probabilities(self):
        with pytest.raises(InputDomainError):
            AugmentationPolicy(horizontal_flip_prob=1.5)


class TestTileFromSample:
    def test_contracts(self):
        tile = tile_from_sample(make_sample(size=128), 64)
        assert tile.data.shape == (64, 64, 3)
        assert tile.data.min() >= -1.0 and tile.data.max() <= 1.0
        assert np.array_equal(tile.target.sum(axis=-1), np.ones((64, 64)))
