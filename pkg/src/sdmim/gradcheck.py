"""Finite-difference oracle for every tape primitive and the full loss.

Analytic gradients come from the float32 tape; the numeric side rebuilds
the identical graph in float64 and takes central differences at h=1e-4.
Relative error is |a - n| / max(1, |a|, |n|), reported as the worst
element across all checked inputs.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward, no_grad
from .config import RunConfig
from .model import clone_params, init_params, named_params
from .patching import build_patch_batch
from .train import compute_losses

H = 1e-4
TOL_PRIMITIVE = 1e-4
TOL_END_TO_END = 1e-3


def numeric_grad(build, leaf: Tensor, h: float = H) -> np.ndarray:
    """Central differences of the scalar build() wrt one f64 leaf, in place."""
    flat = leaf.data.reshape(-1)
    out = np.zeros(flat.size, dtype=np.float64)
    with no_grad():
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            fp = build().item()
            flat[i] = keep - h
            fm = build().item()
            flat[i] = keep
            out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(leaf.data.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
    return float(np.max(np.abs(a - n) / denom))


def check_fn(make_loss, leaves_data: list[np.ndarray], h: float = H) -> float:
    """Worst relative error between the f32 tape and the f64 oracle.

    make_loss takes a list of Tensors (any dtype) and rebuilds the scalar
    loss from scratch; leaves_data fixes the evaluation point.
    """
    leaves32 = [Tensor(d.astype(np.float32), requires_grad=True) for d in leaves_data]
    loss = make_loss(leaves32)
    ad.zero_grads(leaves32)
    backward(loss)
    leaves64 = [Tensor(d.astype(np.float64), dtype=np.float64) for d in leaves_data]
    worst = 0.0
    for t32, t64 in zip(leaves32, leaves64):
        num = numeric_grad(lambda: make_loss(leaves64), t64, h)
        worst = max(worst, relative_error(t32.grad, num))
    return worst


def _weighted_sum(t: Tensor, rng: np.random.Generator) -> Tensor:
    # fixed random cotangent so the incoming gradient is not all-ones
    r = Tensor(rng.uniform(-1.0, 1.0, size=t.shape).astype(np.asarray(t.data).dtype), dtype=t.dtype)
    return ad.reduce_sum(ad.mul(t, r))


def _rand(rng, *shape):
    return rng.uniform(-2.0, 2.0, size=shape)


def primitive_checks(seed: int = 7) -> dict[str, float]:
    """Worst relative error per tape primitive on random inputs in [-2, 2]."""
    rng = np.random.default_rng(seed)
    results = {}

    def wrng():
        return np.random.default_rng(seed + 1)

    results["add"] = check_fn(lambda ls: _weighted_sum(ad.add(ls[0], ls[1]), wrng()),
                              [_rand(rng, 4, 5), _rand(rng, 4, 5)])
    results["sub"] = check_fn(lambda ls: _weighted_sum(ad.sub(ls[0], ls[1]), wrng()),
                              [_rand(rng, 4, 5), _rand(rng, 4, 5)])
    results["mul"] = check_fn(lambda ls: _weighted_sum(ad.mul(ls[0], ls[1]), wrng()),
                              [_rand(rng, 4, 5), _rand(rng, 4, 5)])
    results["smul"] = check_fn(lambda ls: _weighted_sum(ad.smul(ls[0], -1.7), wrng()),
                               [_rand(rng, 4, 5)])
    results["add_bias"] = check_fn(lambda ls: _weighted_sum(ad.add_bias(ls[0], ls[1]), wrng()),
                                   [_rand(rng, 4, 5), _rand(rng, 5)])
    results["matmul"] = check_fn(lambda ls: _weighted_sum(ad.matmul(ls[0], ls[1]), wrng()),
                                 [_rand(rng, 3, 3), _rand(rng, 3, 3)])
    results["matmul_batched"] = check_fn(lambda ls: _weighted_sum(ad.matmul(ls[0], ls[1]), wrng()),
                                         [_rand(rng, 2, 3, 4), _rand(rng, 2, 4, 3)])
    results["transpose"] = check_fn(lambda ls: _weighted_sum(ad.transpose(ls[0], (1, 2, 0)), wrng()),
                                    [_rand(rng, 2, 3, 4)])
    results["reshape"] = check_fn(lambda ls: _weighted_sum(ad.reshape(ls[0], (6, 4)), wrng()),
                                  [_rand(rng, 2, 3, 4)])
    idx = np.array([0, 2, 2, 5], dtype=np.int64)
    results["gather_rows"] = check_fn(lambda ls: _weighted_sum(ad.gather_rows(ls[0], idx), wrng()),
                                      [_rand(rng, 6, 3)])
    results["tile_rows"] = check_fn(lambda ls: _weighted_sum(ad.tile_rows(ls[0], 3), wrng()),
                                    [_rand(rng, 2, 4)])
    results["softmax"] = check_fn(lambda ls: _weighted_sum(ad.softmax(ls[0]), wrng()),
                                  [_rand(rng, 4, 6)])
    results["layer_norm"] = check_fn(
        lambda ls: _weighted_sum(ad.layer_norm(ls[0], ls[1], ls[2], 1e-5), wrng()),
        [_rand(rng, 4, 6), _rand(rng, 6), _rand(rng, 6)],
    )
    results["gelu"] = check_fn(lambda ls: _weighted_sum(ad.gelu(ls[0]), wrng()),
                               [_rand(rng, 4, 6)])
    results["l2_normalize"] = check_fn(lambda ls: _weighted_sum(ad.l2_normalize(ls[0], 1e-6), wrng()),
                                       [_rand(rng, 4, 6)])
    # positive inputs: the clamp at 1e-12 is inactive and log is smooth
    results["log_clamped"] = check_fn(lambda ls: _weighted_sum(ad.log_clamped(ls[0]), wrng()),
                                      [rng.uniform(0.05, 2.0, size=(4, 6))])
    # keep |x| away from the kink at 0
    ax = rng.uniform(0.1, 2.0, size=(4, 6)) * np.where(rng.random((4, 6)) < 0.5, -1.0, 1.0)
    results["absolute"] = check_fn(lambda ls: _weighted_sum(ad.absolute(ls[0]), wrng()), [ax])
    results["reduce_sum"] = check_fn(lambda ls: ad.reduce_sum(ad.mul(ls[0], ls[0])), [_rand(rng, 4, 5)])
    results["reduce_mean"] = check_fn(lambda ls: ad.reduce_mean(ad.mul(ls[0], ls[0])), [_rand(rng, 4, 5)])
    return results


def toy_config() -> RunConfig:
    """2x2 patch grid, 8-wide model, 16-way distillation output."""
    return RunConfig(
        image_h=8,
        image_w=8,
        patch_size=4,
        d_model=8,
        encoder_depth=2,
        decoder_depth=1,
        heads=2,
        window=2,
        mask_ratio=0.25,
        alpha=0.2,
        distill_k=16,
        bottleneck=8,
        head_hidden=8,
        n_images=2,
    )


def end_to_end_check(seed: int = 11, loss_mode: str = "masked") -> float:
    """Worst relative error over every model parameter of the combined loss.

    The teacher stop-gradient is disabled here: finite differences see the
    loss as a plain function of the weights, so the analytic side must too.
    """
    cfg = dataclasses.replace(toy_config(), loss_mode=loss_mode, stop_gradient=False)
    rng = np.random.default_rng(seed)
    params = init_params(cfg, rng)
    # generic O(1) point: the training init puts the normalization
    # bottleneck at norm ~1e-4 where curvature swamps h=1e-4 differences
    for name, p in named_params(params):
        if name.endswith(".g"):
            p.data[...] = rng.uniform(0.8, 1.2, size=p.shape).astype(np.float32)
        else:
            p.data[...] = rng.uniform(-0.5, 0.5, size=p.shape).astype(np.float32)
    pixels = rng.uniform(0.0, 1.0, size=(cfg.image_h, cfg.image_w)).astype(np.float32)
    pb = build_patch_batch(pixels, cfg.patch_size, cfg.mask_ratio, np.random.default_rng(seed + 1), cfg.target_eps)
    from .patching import stack_batches

    stacked = stack_batches([pb])
    total, _, _ = compute_losses(stacked, params, cfg)
    named = named_params(params)
    ad.zero_grads(p for _, p in named)
    backward(total)
    analytic = {name: p.grad.copy() for name, p in named}

    params64 = clone_params(params, dtype=np.float64)
    stacked64 = stacked.astype(np.float64)

    def build():
        t, _, _ = compute_losses(stacked64, params64, cfg)
        return t

    worst = 0.0
    for name, p64 in named_params(params64):
        num = numeric_grad(build, p64)
        worst = max(worst, relative_error(analytic[name], num))
    return worst


def run_all(seed: int = 7) -> list[tuple[str, float, float]]:
    """(name, worst relative error, tolerance) for every check."""
    rows = [(name, err, TOL_PRIMITIVE) for name, err in primitive_checks(seed).items()]
    rows.append(("end_to_end_masked", end_to_end_check(seed + 4, "masked"), TOL_END_TO_END))
    rows.append(("end_to_end_whole", end_to_end_check(seed + 5, "whole"), TOL_END_TO_END))
    return rows


__all__ = [
    "H",
    "TOL_PRIMITIVE",
    "TOL_END_TO_END",
    "numeric_grad",
    "relative_error",
    "check_fn",
    "primitive_checks",
    "toy_config",
    "end_to_end_check",
    "run_all",
]
