"""Windowed-attention encoder/decoder, pixel head, and distillation head.

The encoder is a single-resolution stack of pre-norm transformer blocks
with multi-head self-attention restricted to non-overlapping windows of
the patch grid (odd blocks optionally attend over cyclically shifted
windows). No patch merging: encoder and decoder token streams stay
aligned one-to-one, which the visible-token distillation relies on.

Masked patches are replaced by a learned mask token right after the
linear patch embedding, and absolute positional embeddings are added to
every row, so position stays known to both encoder and decoder.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import RunConfig
from .errors import ConfigError
from .patching import StackedBatch


@dataclass
class BlockParams:
    ln1_g: Tensor
    ln1_b: Tensor
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    w_mlp1: Tensor
    b_mlp1: Tensor
    w_mlp2: Tensor
    b_mlp2: Tensor


@dataclass
class DistillHeadParams:
    """3-layer MLP into a unit-normalized bottleneck, then a bias-free
    expansion whose columns are kept at unit L2 norm."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    w3: Tensor
    b3: Tensor
    w_out: Tensor


@dataclass
class ModelParams:
    patch_w: Tensor
    patch_b: Tensor
    pos_embed: Tensor
    mask_token: Tensor
    encoder_blocks: list
    decoder_blocks: list
    pred_w: Tensor
    pred_b: Tensor
    distill_head: DistillHeadParams


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) redrawn until within 2 std, the usual transformer init."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out.astype(np.float32)


def _param(rng, shape, std=0.02) -> Tensor:
    return Tensor(trunc_normal(rng, shape, std), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)


def _ones(shape) -> Tensor:
    return Tensor(np.ones(shape, dtype=np.float32), requires_grad=True)


def _init_block(rng, d: int) -> BlockParams:
    return BlockParams(
        ln1_g=_ones(d), ln1_b=_zeros(d),
        wq=_param(rng, (d, d)), bq=_zeros(d),
        wk=_param(rng, (d, d)), bk=_zeros(d),
        wv=_param(rng, (d, d)), bv=_zeros(d),
        wo=_param(rng, (d, d)), bo=_zeros(d),
        ln2_g=_ones(d), ln2_b=_zeros(d),
        w_mlp1=_param(rng, (d, 4 * d)), b_mlp1=_zeros(4 * d),
        w_mlp2=_param(rng, (4 * d, d)), b_mlp2=_zeros(d),
    )


def init_params(cfg: RunConfig, rng: np.random.Generator) -> ModelParams:
    d_in = cfg.token_dim()
    d = cfg.d_model
    n = cfg.n_patches()
    head = DistillHeadParams(
        w1=_param(rng, (d, cfg.head_hidden)), b1=_zeros(cfg.head_hidden),
        w2=_param(rng, (cfg.head_hidden, cfg.head_hidden)), b2=_zeros(cfg.head_hidden),
        w3=_param(rng, (cfg.head_hidden, cfg.bottleneck)), b3=_zeros(cfg.bottleneck),
        w_out=_param(rng, (cfg.bottleneck, cfg.distill_k)),
    )
    params = ModelParams(
        patch_w=_param(rng, (d_in, d)),
        patch_b=_zeros(d),
        pos_embed=_param(rng, (n, d)),
        mask_token=_param(rng, (d,)),
        encoder_blocks=[_init_block(rng, d) for _ in range(cfg.encoder_depth)],
        decoder_blocks=[_init_block(rng, d) for _ in range(cfg.decoder_depth)],
        pred_w=_param(rng, (d, d_in)),
        pred_b=_zeros(d_in),
        distill_head=head,
    )
    renormalize_distill_head(params.distill_head)
    return params


_BLOCK_FIELDS = [
    ("ln1.g", "ln1_g"), ("ln1.b", "ln1_b"),
    ("q.w", "wq"), ("q.b", "bq"),
    ("k.w", "wk"), ("k.b", "bk"),
    ("v.w", "wv"), ("v.b", "bv"),
    ("o.w", "wo"), ("o.b", "bo"),
    ("ln2.g", "ln2_g"), ("ln2.b", "ln2_b"),
    ("mlp1.w", "w_mlp1"), ("mlp1.b", "b_mlp1"),
    ("mlp2.w", "w_mlp2"), ("mlp2.b", "b_mlp2"),
]


def named_params(params: ModelParams) -> list[tuple[str, Tensor]]:
    """All learnable tensors in a fixed, checkpoint-stable order."""
    out = [
        ("patch.w", params.patch_w),
        ("patch.b", params.patch_b),
        ("pos_embed", params.pos_embed),
        ("mask_token", params.mask_token),
    ]
    for prefix, blocks in (("enc", params.encoder_blocks), ("dec", params.decoder_blocks)):
        for i, blk in enumerate(blocks):
            for label, attr in _BLOCK_FIELDS:
                out.append((f"{prefix}{i}.{label}", getattr(blk, attr)))
    out.append(("pred.w", params.pred_w))
    out.append(("pred.b", params.pred_b))
    h = params.distill_head
    out += [
        ("head.fc1.w", h.w1), ("head.fc1.b", h.b1),
        ("head.fc2.w", h.w2), ("head.fc2.b", h.b2),
        ("head.fc3.w", h.w3), ("head.fc3.b", h.b3),
        ("head.out.w", h.w_out),
    ]
    return out


def param_shapes(cfg: RunConfig) -> list[tuple[str, tuple[int, ...]]]:
    d_in, d, n = cfg.token_dim(), cfg.d_model, cfg.n_patches()
    shapes = [
        ("patch.w", (d_in, d)), ("patch.b", (d,)),
        ("pos_embed", (n, d)), ("mask_token", (d,)),
    ]
    block = [
        ("ln1.g", (d,)), ("ln1.b", (d,)),
        ("q.w", (d, d)), ("q.b", (d,)),
        ("k.w", (d, d)), ("k.b", (d,)),
        ("v.w", (d, d)), ("v.b", (d,)),
        ("o.w", (d, d)), ("o.b", (d,)),
        ("ln2.g", (d,)), ("ln2.b", (d,)),
        ("mlp1.w", (d, 4 * d)), ("mlp1.b", (4 * d,)),
        ("mlp2.w", (4 * d, d)), ("mlp2.b", (d,)),
    ]
    for prefix, depth in (("enc", cfg.encoder_depth), ("dec", cfg.decoder_depth)):
        for i in range(depth):
            shapes += [(f"{prefix}{i}.{label}", s) for label, s in block]
    shapes += [
        ("pred.w", (d, d_in)), ("pred.b", (d_in,)),
        ("head.fc1.w", (d, cfg.head_hidden)), ("head.fc1.b", (cfg.head_hidden,)),
        ("head.fc2.w", (cfg.head_hidden, cfg.head_hidden)), ("head.fc2.b", (cfg.head_hidden,)),
        ("head.fc3.w", (cfg.head_hidden, cfg.bottleneck)), ("head.fc3.b", (cfg.bottleneck,)),
        ("head.out.w", (cfg.bottleneck, cfg.distill_k)),
    ]
    return shapes


def param_count(cfg: RunConfig) -> int:
    return sum(int(np.prod(s)) for _, s in param_shapes(cfg))


def decays(name: str) -> bool:
    """Weight decay applies to weight matrices only; norm gains/biases,
    all biases, the mask token, and positional embeddings are excluded."""
    return name.endswith(".w")


def params_from_arrays(cfg: RunConfig, arrays: dict[str, np.ndarray]) -> ModelParams:
    def take(name):
        return Tensor(arrays[name].copy(), requires_grad=True)

    def block(prefix):
        kw = {attr: take(f"{prefix}.{label}") for label, attr in _BLOCK_FIELDS}
        return BlockParams(**kw)

    return ModelParams(
        patch_w=take("patch.w"),
        patch_b=take("patch.b"),
        pos_embed=take("pos_embed"),
        mask_token=take("mask_token"),
        encoder_blocks=[block(f"enc{i}") for i in range(cfg.encoder_depth)],
        decoder_blocks=[block(f"dec{i}") for i in range(cfg.decoder_depth)],
        pred_w=take("pred.w"),
        pred_b=take("pred.b"),
        distill_head=DistillHeadParams(
            w1=take("head.fc1.w"), b1=take("head.fc1.b"),
            w2=take("head.fc2.w"), b2=take("head.fc2.b"),
            w3=take("head.fc3.w"), b3=take("head.fc3.b"),
            w_out=take("head.out.w"),
        ),
    )


def clone_params(params: ModelParams, dtype=np.float32) -> ModelParams:
    arrays = {name: t.data.astype(dtype) for name, t in named_params(params)}
    cloned = {name: Tensor(a, requires_grad=True, dtype=dtype) for name, a in arrays.items()}

    def block(prefix):
        return BlockParams(**{attr: cloned[f"{prefix}.{label}"] for label, attr in _BLOCK_FIELDS})

    n_enc = len(params.encoder_blocks)
    n_dec = len(params.decoder_blocks)
    return ModelParams(
        patch_w=cloned["patch.w"],
        patch_b=cloned["patch.b"],
        pos_embed=cloned["pos_embed"],
        mask_token=cloned["mask_token"],
        encoder_blocks=[block(f"enc{i}") for i in range(n_enc)],
        decoder_blocks=[block(f"dec{i}") for i in range(n_dec)],
        pred_w=cloned["pred.w"],
        pred_b=cloned["pred.b"],
        distill_head=DistillHeadParams(
            w1=cloned["head.fc1.w"], b1=cloned["head.fc1.b"],
            w2=cloned["head.fc2.w"], b2=cloned["head.fc2.b"],
            w3=cloned["head.fc3.w"], b3=cloned["head.fc3.b"],
            w_out=cloned["head.out.w"],
        ),
    )


# ---------------------------------------------------------------------------
# window bookkeeping


@lru_cache(maxsize=64)
def window_permutation(rows: int, cols: int, window: int, shift: int):
    """Token order that lists windows one after another, plus its inverse.

    With shift s > 0 the grid is cyclically rolled by (-s, -s) before
    partitioning, the shifted-window arrangement for odd blocks.
    """
    if rows % window or cols % window:
        raise ConfigError(f"window {window} does not tile the {rows}x{cols} patch grid")
    grid = np.arange(rows * cols).reshape(rows, cols)
    if shift:
        grid = np.roll(grid, (-shift, -shift), axis=(0, 1))
    nr, nc = rows // window, cols // window
    perm = (
        grid.reshape(nr, window, nc, window)
        .transpose(0, 2, 1, 3)
        .reshape(-1)
        .astype(np.int64)
    )
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size, dtype=np.int64)
    perm.setflags(write=False)
    inv.setflags(write=False)
    return perm, inv


def _batch_index(per_image: np.ndarray, n: int, b: int) -> np.ndarray:
    return (np.arange(b, dtype=np.int64)[:, None] * n + per_image[None, :]).reshape(-1)


# ---------------------------------------------------------------------------
# forward passes


def embed(batch: StackedBatch, params: ModelParams, cfg: RunConfig) -> Tensor:
    """Project tokens to model width, swap in the mask token at masked
    rows, add positional embeddings to every row."""
    x = ad.add_bias(ad.matmul(batch.tokens, params.patch_w), params.patch_b)
    total = batch.n_images * batch.n_patches
    if batch.masked_idx.size:
        keep = np.ones((total, 1), dtype=x.dtype)
        keep[batch.masked_idx] = 0.0
        keep_mat = Tensor(np.repeat(keep, cfg.d_model, axis=1), dtype=x.dtype)
        drop_mat = Tensor(1.0 - keep_mat.data, dtype=x.dtype)
        mask_rows = ad.tile_rows(params.mask_token, total)
        x = ad.add(ad.mul(x, keep_mat), ad.mul(mask_rows, drop_mat))
    pos = ad.tile_rows(params.pos_embed, batch.n_images)
    return ad.add(x, pos)


def _window_attention(h: Tensor, blk: BlockParams, cfg: RunConfig, n_images: int, shifted: bool) -> Tensor:
    rows, cols = cfg.grid()
    n = rows * cols
    w = cfg.window
    nw = (rows // w) * (cols // w)
    wsz = w * w
    heads = cfg.heads
    hd = cfg.d_model // heads
    if nw == 1:
        shifted = False  # a single window is already global attention
    perm, inv = window_permutation(rows, cols, w, w // 2 if shifted else 0)

    xw = ad.gather_rows(h, _batch_index(perm, n, n_images))
    q = ad.add_bias(ad.matmul(xw, blk.wq), blk.bq)
    k = ad.add_bias(ad.matmul(xw, blk.wk), blk.bk)
    v = ad.add_bias(ad.matmul(xw, blk.wv), blk.bv)

    def split_heads(t):
        t = ad.reshape(t, (n_images * nw, wsz, heads, hd))
        return ad.transpose(t, (0, 2, 1, 3))

    qh, kh, vh = split_heads(q), split_heads(k), split_heads(v)
    scores = ad.smul(ad.matmul(qh, ad.transpose(kh, (0, 1, 3, 2))), hd ** -0.5)
    attn = ad.softmax(scores)
    ctx = ad.matmul(attn, vh)
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (n_images * n, cfg.d_model))
    ctx = ad.gather_rows(ctx, _batch_index(inv, n, n_images))
    return ad.add_bias(ad.matmul(ctx, blk.wo), blk.bo)


def _block_forward(x: Tensor, blk: BlockParams, cfg: RunConfig, n_images: int, shifted: bool) -> Tensor:
    h = ad.layer_norm(x, blk.ln1_g, blk.ln1_b, cfg.norm_eps)
    x = ad.add(x, _window_attention(h, blk, cfg, n_images, shifted))
    h = ad.layer_norm(x, blk.ln2_g, blk.ln2_b, cfg.norm_eps)
    h = ad.gelu(ad.add_bias(ad.matmul(h, blk.w_mlp1), blk.b_mlp1))
    h = ad.add_bias(ad.matmul(h, blk.w_mlp2), blk.b_mlp2)
    return ad.add(x, h)


def _stack_forward(x: Tensor, blocks, cfg: RunConfig, n_images: int) -> Tensor:
    for i, blk in enumerate(blocks):
        shifted = cfg.shifted_windows and (i % 2 == 1)
        x = _block_forward(x, blk, cfg, n_images, shifted)
    return x


def encoder_forward(x: Tensor, params: ModelParams, cfg: RunConfig, n_images: int) -> Tensor:
    return _stack_forward(x, params.encoder_blocks, cfg, n_images)


def decoder_forward(z: Tensor, params: ModelParams, cfg: RunConfig, n_images: int) -> Tensor:
    return _stack_forward(z, params.decoder_blocks, cfg, n_images)


def predict_pixels(y: Tensor, params: ModelParams) -> Tensor:
    """Linear map from model width back to flattened-patch pixels."""
    return ad.add_bias(ad.matmul(y, params.pred_w), params.pred_b)


def distill_logits(v: Tensor, head: DistillHeadParams, eps: float = 1e-6) -> Tensor:
    """Shared projection head: 3-layer MLP, unit-norm bottleneck, then a
    bias-free expansion with unit-norm columns. Both the encoder (student)
    and decoder (teacher) visible-token streams run through the same
    parameters."""
    h = ad.gelu(ad.add_bias(ad.matmul(v, head.w1), head.b1))
    h = ad.gelu(ad.add_bias(ad.matmul(h, head.w2), head.b2))
    b = ad.add_bias(ad.matmul(h, head.w3), head.b3)
    b = ad.l2_normalize(b, eps)
    return ad.matmul(b, head.w_out)


def renormalize_distill_head(head: DistillHeadParams):
    """Rescale every column of the final projection to unit L2 norm.

    Called after each optimizer step so the logit scale stays bounded by
    the unit-norm bottleneck."""
    w = head.w_out.data
    norms = np.sqrt((w * w).sum(axis=0, keepdims=True))
    w /= np.maximum(norms, 1e-12)


__all__ = [
    "BlockParams",
    "DistillHeadParams",
    "ModelParams",
    "trunc_normal",
    "init_params",
    "named_params",
    "param_shapes",
    "param_count",
    "decays",
    "params_from_arrays",
    "clone_params",
    "window_permutation",
    "embed",
    "encoder_forward",
    "decoder_forward",
    "predict_pixels",
    "distill_logits",
    "renormalize_distill_head",
]
