import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oshp.augment import AugmentDraw, apply, augment
from oshp.config import AugmentConfig
from oshp.errors import ContractError


def pair(seed=0, size=(16, 20)):
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, size + (3,), dtype=np.uint8), rng.integers(0, 5, size, dtype=np.uint8)


def test_identity_draw_leaves_arrays_alone():
    img, mask = pair()
    out_i, out_m = apply(img, mask, AugmentDraw(1.0, 0, 0, False), mask.shape)
    assert np.array_equal(out_i, img) and np.array_equal(out_m, mask)


def test_flip_is_an_involution():
    img, mask = pair()
    d = AugmentDraw(1.0, 0, 0, True)
    once = apply(img, mask, d, mask.shape)
    assert np.array_equal(once[1], mask[:, ::-1])
    twice = apply(*once, d, mask.shape)
    assert np.array_equal(twice[0], img) and np.array_equal(twice[1], mask)


def test_disabled_augmentation_only_resizes():
    img, mask = pair(size=(32, 32))
    out_i, out_m = augment(img, mask, AugmentConfig(enabled=False), np.random.default_rng(0), (16, 16))
    assert out_i.shape == (16, 16, 3) and out_m.shape == (16, 16)
    assert set(np.unique(out_m)) <= set(np.unique(mask))
    again = augment(img, mask, AugmentConfig(enabled=False), np.random.default_rng(1), (16, 16))
    assert np.array_equal(again[1], out_m)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_label_set_never_grows(seed):
    img, mask = pair(seed % 1000)
    mask[mask == 3] = 0
    rng = np.random.default_rng(seed)
    out_i, out_m = augment(img, mask, AugmentConfig(), rng, (16, 16))
    assert out_i.shape == (16, 16, 3) and out_m.shape == (16, 16)
    assert set(np.unique(out_m)) <= set(np.unique(mask))


def test_stacked_masks_follow_the_same_geometry():
    img, mask = pair()
    human = (mask != 0).astype(np.uint8)
    stacked = np.stack([mask, human], -1)
    rng_a, rng_b = np.random.default_rng(7), np.random.default_rng(7)
    _, out = augment(img, stacked, AugmentConfig(), rng_a, (16, 16))
    _, alone = augment(img, mask, AugmentConfig(), rng_b, (16, 16))
    assert np.array_equal(out[..., 0], alone)
    assert np.array_equal(out[..., 1], (out[..., 0] != 0).astype(np.uint8))


def test_size_mismatch_is_rejected():
    img, _ = pair()
    with pytest.raises(ContractError):
        apply(img, np.zeros((3, 3), np.uint8), AugmentDraw(1.0, 0, 0, False), (3, 3))
