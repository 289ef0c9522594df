"""Image-to-token conversion, random visible/masked splits, and targets.

A PatchBatch holds one image's tokens plus the index partition and the
per-patch-normalized regression targets for the hidden patches. For a
training step, several PatchBatches are stacked into one flat token
matrix so every downstream op works on plain 2-d tensors with global row
indices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, gather_rows
from .errors import ConfigError, ContractError, ShapeError

# differentiable row-selection lives on the tape; re-exported here because
# this module owns all index bookkeeping
gather_tokens = gather_rows


@dataclass
class PatchBatch:
    """Per-image token matrix with its visible/masked partition.

    targets row i is the normalized original content of patch
    masked_idx[i]; both index lists are sorted and disjoint and together
    cover all patches.
    """

    tokens: Tensor            # [N, D] constants, D = patch_size**2
    visible_idx: np.ndarray   # sorted int64
    masked_idx: np.ndarray    # sorted int64
    targets: Tensor           # [len(masked_idx), D]
    grid: tuple[int, int]


@dataclass
class StackedBatch:
    """Several PatchBatches flattened into one token matrix.

    Row i*n_patches+j is patch j of image i; index arrays address rows of
    that flat matrix.
    """

    tokens: Tensor            # [B*N, D]
    visible_idx: np.ndarray
    masked_idx: np.ndarray
    targets: Tensor           # [total masked, D]
    grid: tuple[int, int]
    n_images: int
    n_patches: int

    def astype(self, dtype) -> "StackedBatch":
        return StackedBatch(
            tokens=self.tokens.astype(dtype),
            visible_idx=self.visible_idx,
            masked_idx=self.masked_idx,
            targets=self.targets.astype(dtype),
            grid=self.grid,
            n_images=self.n_images,
            n_patches=self.n_patches,
        )


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Split an HxW image into flattened PxP patches, grid row-major.

    Token k is patch (k // cols, k % cols), itself flattened row-major.
    """
    if image.ndim != 2:
        raise ShapeError(f"patchify: expected a 2-d grayscale image, got shape {tuple(image.shape)}")
    h, w = image.shape
    p = int(patch_size)
    if p <= 0 or h % p or w % p:
        raise ShapeError(f"patchify: image {h}x{w} not divisible by patch size {p}")
    rows, cols = h // p, w // p
    out = image.reshape(rows, p, cols, p).transpose(0, 2, 1, 3).reshape(rows * cols, p * p)
    return np.ascontiguousarray(out)


def unpatchify(tokens: np.ndarray, grid: tuple[int, int], patch_size: int) -> np.ndarray:
    """Inverse of patchify; output clamped to [0, 1] for image emission."""
    rows, cols = grid
    p = int(patch_size)
    tokens = np.asarray(tokens)
    if tokens.ndim != 2 or tokens.shape[0] != rows * cols or tokens.shape[1] != p * p:
        raise ShapeError(
            f"unpatchify: tokens {tuple(tokens.shape)} do not match grid {grid} with patch size {p}"
        )
    img = tokens.reshape(rows, cols, p, p).transpose(0, 2, 1, 3).reshape(rows * p, cols * p)
    return np.clip(img, 0.0, 1.0)


def masked_count(n_patches: int, mask_ratio: float) -> int:
    """Number of hidden patches: round-half-up of N*M, clamped to [1, N-1]."""
    k = int(np.floor(n_patches * mask_ratio + 0.5))
    return min(max(k, 1), n_patches - 1)


def random_mask(n_patches: int, mask_ratio: float, rng: np.random.Generator):
    """Uniformly random split of patch indices into (visible, masked).

    Deterministic for a fixed generator state.
    """
    if not 0.0 < mask_ratio < 1.0:
        raise ConfigError(f"mask_ratio must lie strictly between 0 and 1, got {mask_ratio}")
    if n_patches < 2:
        raise ContractError(f"random_mask needs at least 2 patches, got {n_patches}")
    k = masked_count(n_patches, mask_ratio)
    masked = np.sort(rng.permutation(n_patches)[:k]).astype(np.int64)
    keep = np.ones(n_patches, dtype=bool)
    keep[masked] = False
    visible = np.flatnonzero(keep).astype(np.int64)
    return visible, masked


def normalize_targets(tokens: np.ndarray, eps: float) -> np.ndarray:
    """Per-token zero mean / unit population std, std floored at eps."""
    if eps <= 0:
        raise ContractError(f"normalize_targets: eps must be positive, got {eps}")
    tokens = np.asarray(tokens)
    mu = tokens.mean(axis=-1, keepdims=True)
    sd = tokens.std(axis=-1, keepdims=True)
    return (tokens - mu) / np.maximum(sd, eps)


def build_patch_batch(
    pixels: np.ndarray,
    patch_size: int,
    mask_ratio: float,
    rng: np.random.Generator,
    eps: float = 1e-6,
    dtype=np.float32,
) -> PatchBatch:
    tokens = patchify(pixels, patch_size).astype(dtype)
    n = tokens.shape[0]
    visible, masked = random_mask(n, mask_ratio, rng)
    targets = normalize_targets(tokens[masked], eps).astype(dtype)
    rows = pixels.shape[0] // patch_size
    cols = pixels.shape[1] // patch_size
    return PatchBatch(
        tokens=Tensor(tokens, dtype=dtype),
        visible_idx=visible,
        masked_idx=masked,
        targets=Tensor(targets, dtype=dtype),
        grid=(rows, cols),
    )


def stack_batches(batches: list[PatchBatch]) -> StackedBatch:
    if not batches:
        raise ContractError("stack_batches: empty batch list")
    n = batches[0].tokens.shape[0]
    grid = batches[0].grid
    for b in batches:
        if b.tokens.shape[0] != n or b.grid != grid:
            raise ShapeError("stack_batches: images disagree on patch layout")
    tok = np.concatenate([b.tokens.data for b in batches], axis=0)
    vis = np.concatenate([b.visible_idx + i * n for i, b in enumerate(batches)])
    msk = np.concatenate([b.masked_idx + i * n for i, b in enumerate(batches)])
    tgt = np.concatenate([b.targets.data for b in batches], axis=0)
    dtype = batches[0].tokens.dtype
    return StackedBatch(
        tokens=Tensor(tok, dtype=dtype),
        visible_idx=vis.astype(np.int64),
        masked_idx=msk.astype(np.int64),
        targets=Tensor(tgt, dtype=dtype),
        grid=grid,
        n_images=len(batches),
        n_patches=n,
    )


def all_visible_batch(pixel_list: list[np.ndarray], patch_size: int, dtype=np.float32) -> StackedBatch:
    """Stacked batch with nothing masked, for feature extraction and probes."""
    if not pixel_list:
        raise ContractError("all_visible_batch: empty image list")
    toks = [patchify(px, patch_size).astype(dtype) for px in pixel_list]
    n = toks[0].shape[0]
    rows = pixel_list[0].shape[0] // patch_size
    cols = pixel_list[0].shape[1] // patch_size
    tok = np.concatenate(toks, axis=0)
    b = len(pixel_list)
    return StackedBatch(
        tokens=Tensor(tok, dtype=dtype),
        visible_idx=np.arange(b * n, dtype=np.int64),
        masked_idx=np.empty(0, dtype=np.int64),
        targets=Tensor(np.zeros((0, toks[0].shape[1]), dtype=dtype), dtype=dtype),
        grid=(rows, cols),
        n_images=b,
        n_patches=n,
    )


def whole_image_targets(stacked: StackedBatch, eps: float) -> Tensor:
    """Per-token-normalized targets over every patch, visible included."""
    dtype = stacked.tokens.dtype
    return Tensor(normalize_targets(stacked.tokens.data, eps).astype(dtype), dtype=dtype)


__all__ = [
    "PatchBatch",
    "StackedBatch",
    "patchify",
    "unpatchify",
    "masked_count",
    "random_mask",
    "normalize_targets",
    "gather_tokens",
    "build_patch_batch",
    "stack_batches",
    "all_visible_batch",
    "whole_image_targets",
]
