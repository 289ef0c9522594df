import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdmim import autodiff as ad
from sdmim.autodiff import Tensor, backward
from sdmim.errors import ConfigError, ShapeError
from sdmim.patching import (
    build_patch_batch,
    gather_tokens,
    masked_count,
    normalize_targets,
    patchify,
    random_mask,
    stack_batches,
    unpatchify,
)


def test_patchify_direct_indexing():
    img = np.arange(16.0).reshape(4, 4)
    tokens = patchify(img, 2)
    np.testing.assert_array_equal(tokens[0], [0, 1, 4, 5])
    np.testing.assert_array_equal(tokens[1], [2, 3, 6, 7])
    np.testing.assert_array_equal(tokens[2], [8, 9, 12, 13])


def test_patchify_single_token():
    img = np.arange(9.0).reshape(3, 3) / 10.0
    tokens = patchify(img, 3)
    assert tokens.shape == (1, 9)
    np.testing.assert_array_equal(tokens[0], img.reshape(-1))


def test_patchify_rejects_nondivisible():
    with pytest.raises(ShapeError):
        patchify(np.zeros((5, 4)), 2)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_unpatchify_roundtrip(seed):
    rng = np.random.default_rng(seed)
    img = rng.uniform(0, 1, size=(32, 32)).astype(np.float32)
    tokens = patchify(img, 8)
    np.testing.assert_array_equal(unpatchify(tokens, (4, 4), 8), img)


def test_unpatchify_all_zero_tokens_black_image():
    out = unpatchify(np.zeros((4, 4)), (2, 2), 2)
    np.testing.assert_array_equal(out, np.zeros((4, 4)))


def test_unpatchify_clamps_to_unit_interval():
    out = unpatchify(np.full((1, 4), 3.0), (1, 1), 2)
    assert out.max() <= 1.0


def test_masked_count_paper_ratio():
    assert masked_count(100, 0.2) == 20


def test_masked_count_clamps():
    assert masked_count(2, 0.2) == 1
    assert masked_count(4, 0.99) == 3


def test_random_mask_rejects_bad_ratio():
    rng = np.random.default_rng(0)
    for m in (0.0, 1.0, -0.1, 1.5):
        with pytest.raises(ConfigError):
            random_mask(10, m, rng)


def test_random_mask_deterministic_per_seed():
    a = random_mask(50, 0.3, np.random.default_rng(9))
    b = random_mask(50, 0.3, np.random.default_rng(9))
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 200), st.floats(0.05, 0.95), st.integers(0, 2**31))
def test_random_mask_partition_invariants(n, m, seed):
    visible, masked = random_mask(n, m, np.random.default_rng(seed))
    assert masked.size == masked_count(n, m)
    assert 1 <= masked.size <= n - 1
    assert np.intersect1d(visible, masked).size == 0
    np.testing.assert_array_equal(np.union1d(visible, masked), np.arange(n))
    assert (np.diff(visible) > 0).all() and (np.diff(masked) > 0).all()


def test_random_mask_monte_carlo_uniformity():
    n, m, draws = 10, 0.3, 10_000
    counts = np.zeros(n)
    rng = np.random.default_rng(123)
    for _ in range(draws):
        _, masked = random_mask(n, m, rng)
        counts[masked] += 1
    freq = counts / draws
    assert (np.abs(freq - m) <= 0.02).all(), freq


def test_normalize_targets_two_values():
    np.testing.assert_allclose(normalize_targets(np.array([[2.0, 4.0]]), 1e-6), [[-1.0, 1.0]])


def test_normalize_targets_constant_token():
    np.testing.assert_array_equal(normalize_targets(np.array([[7.0, 7.0, 7.0]]), 1e-6), [[0.0, 0.0, 0.0]])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_normalize_targets_moments(seed):
    rng = np.random.default_rng(seed)
    rows = rng.uniform(0, 1, size=(5, 16))
    rows[:, 0] += 1.0  # guarantee non-constant
    out = normalize_targets(rows, 1e-6)
    np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-6)
    np.testing.assert_allclose(out.std(axis=1), 1.0, atol=1e-4)


def test_normalize_targets_idempotent():
    rng = np.random.default_rng(4)
    rows = rng.uniform(0, 1, size=(3, 8))
    once = normalize_targets(rows, 1e-6)
    twice = normalize_targets(once, 1e-6)
    np.testing.assert_allclose(twice, once, atol=1e-5)


def test_gather_tokens_identity_and_singleton():
    x = Tensor(np.arange(12.0).reshape(4, 3).astype(np.float32), requires_grad=True)
    np.testing.assert_array_equal(gather_tokens(x, np.arange(4)).data, x.data)
    single = gather_tokens(x, np.array([2]))
    assert single.shape == (1, 3)


def test_build_patch_batch_targets_align_with_masked_order():
    rng = np.random.default_rng(7)
    img = rng.uniform(0, 1, size=(8, 8)).astype(np.float32)
    pb = build_patch_batch(img, 4, 0.5, np.random.default_rng(1))
    assert pb.targets.shape == (pb.masked_idx.size, 16)
    expect = normalize_targets(pb.tokens.data[pb.masked_idx], 1e-6)
    np.testing.assert_allclose(pb.targets.data, expect, atol=1e-6)


def test_stack_batches_offsets_indices():
    rng = np.random.default_rng(7)
    imgs = [rng.uniform(0, 1, size=(8, 8)).astype(np.float32) for _ in range(3)]
    pbs = [build_patch_batch(im, 4, 0.25, np.random.default_rng(i)) for i, im in enumerate(imgs)]
    stacked = stack_batches(pbs)
    assert stacked.tokens.shape == (12, 16)
    assert stacked.n_images == 3 and stacked.n_patches == 4
    all_idx = np.sort(np.concatenate([stacked.visible_idx, stacked.masked_idx]))
    np.testing.assert_array_equal(all_idx, np.arange(12))
    # image 1's masked index lands in rows [4, 8)
    np.testing.assert_array_equal(stacked.masked_idx[1], pbs[1].masked_idx[0] + 4)
