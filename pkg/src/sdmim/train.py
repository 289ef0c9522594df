"""Pretraining loop: forward, losses, backward, optimizer, checkpoints.

Determinism contract: every random decision for sample i in epoch e is
drawn from a generator seeded with (seed, e, i), so reruns and resumed
runs replay the identical stream regardless of sharding or worker count.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward, first_nonfinite
from .config import RunConfig, config_to_text, parse_config_text, validate_config
from .data import LabeledImage, augment
from .errors import CheckpointError, ConfigError, NumericalError
from .losses import LossReport, distill_loss, l1_masked, l1_whole_image, total_loss
from .model import (
    ModelParams,
    decoder_forward,
    distill_logits,
    embed,
    encoder_forward,
    init_params,
    named_params,
    param_shapes,
    params_from_arrays,
    predict_pixels,
    renormalize_distill_head,
)
from .optim import OptimizerState, Schedule, adamw_step, clip_gradients, lr_at
from .patching import StackedBatch, build_patch_batch, stack_batches, whole_image_targets

METRIC_COLUMNS = ("epoch", "step", "lr", "l1", "distill", "total", "mode", "alpha", "wall_ms")


def compute_losses(stacked: StackedBatch, params: ModelParams, cfg: RunConfig):
    """Full forward pass to (total, l1, distill) loss tensors.

    distill is None when distillation is disabled; total then equals l1.
    """
    x = embed(stacked, params, cfg)
    z_all = encoder_forward(x, params, cfg, stacked.n_images)
    y_all = decoder_forward(z_all, params, cfg, stacked.n_images)
    if cfg.loss_mode == "masked":
        y_m = ad.gather_rows(y_all, stacked.masked_idx)
        pred = predict_pixels(y_m, params)
        l1 = l1_masked(pred, stacked.targets)
    else:
        pred = predict_pixels(y_all, params)
        l1 = l1_whole_image(pred, whole_image_targets(stacked, cfg.target_eps))
    if cfg.distill:
        z_vis = ad.gather_rows(z_all, stacked.visible_idx)
        y_vis = ad.gather_rows(y_all, stacked.visible_idx)
        q = distill_logits(z_vis, params.distill_head, cfg.l2_eps)
        p = distill_logits(y_vis, params.distill_head, cfg.l2_eps)
        dl = distill_loss(q, p, cfg.stop_gradient)
        return total_loss(l1, dl, cfg.alpha), l1, dl
    return l1, l1, None


def train_step(batches, params: ModelParams, state: OptimizerState, cfg: RunConfig, lr: float) -> LossReport:
    """One optimizer update on a list of PatchBatches."""
    stacked = stack_batches(batches)
    total, l1, dl = compute_losses(stacked, params, cfg)
    if not np.isfinite(total.data).all():
        for name, p in named_params(params):
            if not np.isfinite(p.data).all():
                raise NumericalError(f"non-finite loss at parameter '{name}'")
        culprit = first_nonfinite(total)
        where = f"op '{culprit.op}' (node {culprit._id}, shape {tuple(culprit.shape)})" if culprit else "loss"
        raise NumericalError(f"non-finite loss at {where}")
    named = named_params(params)
    if not cfg.distill:
        # the projection head is outside the recorded graph in this mode
        named = [(name, p) for name, p in named if not name.startswith("head.")]
    ad.zero_grads(p for _, p in named)
    backward(total)
    if cfg.grad_clip > 0:
        clip_gradients(named, cfg.grad_clip)
    adamw_step(named, state, lr)
    renormalize_distill_head(params.distill_head)
    return LossReport(
        l1=l1.item(),
        distill=dl.item() if dl is not None else 0.0,
        total=total.item(),
        alpha=cfg.alpha if cfg.distill else 1.0,
        n_masked=int(stacked.masked_idx.size),
        n_visible=int(stacked.visible_idx.size),
        mode=cfg.loss_mode,
    )


def prepare_sample(img: LabeledImage, cfg: RunConfig, epoch: int, index: int):
    """Augment + patchify + mask one image for one epoch, reproducibly."""
    rng = np.random.default_rng((cfg.seed, epoch, index))
    if cfg.augment:
        img = augment(img, rng, cfg.noise_sigma, cfg.flip_prob)
    mask_rng = np.random.default_rng((cfg.seed, 0, index)) if cfg.fixed_mask else rng
    return build_patch_batch(img.pixels, cfg.patch_size, cfg.mask_ratio, mask_rng, cfg.target_eps)


@dataclass
class FitResult:
    params: ModelParams
    opt_state: OptimizerState
    history: list = field(default_factory=list)


def fit(
    images: list[LabeledImage],
    cfg: RunConfig,
    out_dir=None,
    params: ModelParams | None = None,
    opt_state: OptimizerState | None = None,
    start_epoch: int = 0,
) -> FitResult:
    """Train for cfg.total_epochs with fresh masks per image per epoch.

    Checkpoints go to out_dir every cfg.checkpoint_every epochs (if set)
    and at the end. Pass params/opt_state/start_epoch from a loaded
    checkpoint to resume.
    """
    validate_config(cfg)
    if not images:
        raise ConfigError("config field 'n_images'/'data_dir': training set is empty")
    if params is None:
        params = init_params(cfg, np.random.default_rng(cfg.seed))
    if opt_state is None:
        opt_state = OptimizerState.from_config(cfg)
    schedule = Schedule.from_config(cfg)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    history = []
    n = len(images)
    batch = cfg.batch_size if cfg.batch_size > 0 else n
    for epoch in range(start_epoch, cfg.total_epochs):
        pbs = [prepare_sample(img, cfg, epoch, i) for i, img in enumerate(images)]
        if batch < n:
            order = np.random.default_rng((cfg.seed, epoch)).permutation(n)
            pbs = [pbs[i] for i in order]
        shards = [pbs[i : i + batch] for i in range(0, n, batch)]
        steps = len(shards)
        for si, shard in enumerate(shards):
            lr = lr_at(schedule, epoch + si / steps)
            t0 = time.perf_counter()
            rep = train_step(shard, params, opt_state, cfg, lr)
            wall_ms = (time.perf_counter() - t0) * 1e3
            history.append(
                {
                    "epoch": epoch,
                    "step": opt_state.t,
                    "lr": lr,
                    "l1": rep.l1,
                    "distill": rep.distill,
                    "total": rep.total,
                    "mode": rep.mode,
                    "alpha": rep.alpha,
                    "wall_ms": wall_ms,
                }
            )
        done = epoch + 1
        if out is not None and cfg.checkpoint_every > 0 and done % cfg.checkpoint_every == 0 and done < cfg.total_epochs:
            save_checkpoint(out / f"checkpoint_epoch{done:04d}.ckpt", params, opt_state, cfg, done)
    if out is not None:
        save_checkpoint(out / "checkpoint_final.ckpt", params, opt_state, cfg, cfg.total_epochs)
    return FitResult(params=params, opt_state=opt_state, history=history)


def epoch_mean(history: list, column: str, epoch: int) -> float:
    vals = [row[column] for row in history if row["epoch"] == epoch]
    return float(np.mean(vals)) if vals else float("nan")


def write_metrics(history: list, path):
    lines = [",".join(METRIC_COLUMNS)]
    for row in history:
        lines.append(
            ",".join(
                [
                    str(row["epoch"]),
                    str(row["step"]),
                    repr(float(row["lr"])),
                    repr(float(row["l1"])),
                    repr(float(row["distill"])),
                    repr(float(row["total"])),
                    str(row["mode"]),
                    repr(float(row["alpha"])),
                    f"{row['wall_ms']:.3f}",
                ]
            )
        )
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# checkpoints: text manifest + raw little-endian f32 arrays

_MAGIC = "sdmim-checkpoint v1"


def save_checkpoint(path, params: ModelParams, opt_state: OptimizerState, cfg: RunConfig, epoch: int):
    """Self-describing binary checkpoint; save->load->save is byte-exact."""
    named = named_params(params)
    entries = [(name, p.data) for name, p in named]
    for name, p in named:
        entries.append((f"opt.m.{name}", opt_state.m.get(name, np.zeros_like(p.data))))
    for name, p in named:
        entries.append((f"opt.v.{name}", opt_state.v.get(name, np.zeros_like(p.data))))
    header = [_MAGIC, f"epoch {int(epoch)}", f"step {int(opt_state.t)}", "[config]"]
    header += config_to_text(cfg).strip().splitlines()
    header.append("[tensors]")
    offset = 0
    blobs = []
    for name, arr in entries:
        arr = np.ascontiguousarray(arr, dtype="<f4")
        blobs.append(arr.tobytes())
        dims = " ".join(str(int(s)) for s in arr.shape)
        header.append(f"{name} {arr.ndim} {dims} {offset} {arr.nbytes}".rstrip())
        offset += arr.nbytes
    header.append("[data]")
    try:
        with open(path, "wb") as fh:
            fh.write(("\n".join(header) + "\n").encode("ascii"))
            for b in blobs:
                fh.write(b)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path, overrides: RunConfig | None = None):
    """Returns (params, opt_state, cfg, epoch).

    If `overrides` is given it replaces the embedded config; stored tensor
    shapes are then validated against it and a mismatch is an error naming
    the tensor.
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    marker = b"[data]\n"
    cut = raw.find(marker)
    if cut < 0:
        raise CheckpointError(f"checkpoint {path} has no data section")
    header = raw[:cut].decode("ascii", errors="replace").splitlines()
    blob = raw[cut + len(marker):]
    if not header or header[0] != _MAGIC:
        raise CheckpointError(f"checkpoint {path} has wrong magic/version: {header[0] if header else '<empty>'!r}")
    it = iter(header[1:])
    epoch = step = None
    cfg_lines = []
    tensor_lines = []
    section = ""
    for line in it:
        if line == "[config]":
            section = "config"
            continue
        if line == "[tensors]":
            section = "tensors"
            continue
        if section == "config":
            cfg_lines.append(line)
        elif section == "tensors":
            tensor_lines.append(line)
        elif line.startswith("epoch "):
            epoch = int(line.split()[1])
        elif line.startswith("step "):
            step = int(line.split()[1])
    if epoch is None or step is None:
        raise CheckpointError(f"checkpoint {path} header is missing epoch/step")
    cfg = parse_config_text("\n".join(cfg_lines))
    if overrides is not None:
        cfg = overrides
    arrays = {}
    for line in tensor_lines:
        parts = line.split()
        name, ndim = parts[0], int(parts[1])
        dims = tuple(int(d) for d in parts[2 : 2 + ndim])
        offset, nbytes = int(parts[2 + ndim]), int(parts[3 + ndim])
        if offset + nbytes > len(blob):
            raise CheckpointError(f"checkpoint {path} is truncated at tensor '{name}'")
        arrays[name] = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=offset).reshape(dims).copy()
    expected = param_shapes(cfg)
    for name, shape in expected:
        if name not in arrays:
            raise CheckpointError(f"checkpoint {path} is missing tensor '{name}'")
        if arrays[name].shape != shape:
            raise CheckpointError(
                f"checkpoint tensor '{name}' has shape {arrays[name].shape}, config implies {shape}"
            )
    params = params_from_arrays(cfg, arrays)
    opt = OptimizerState.from_config(cfg)
    opt.t = step
    for name, _ in expected:
        for slot in ("m", "v"):
            key = f"opt.{slot}.{name}"
            if key not in arrays:
                raise CheckpointError(f"checkpoint {path} is missing tensor '{key}'")
            if arrays[key].shape != arrays[name].shape:
                raise CheckpointError(f"checkpoint optimizer state for '{name}' has wrong shape")
            getattr(opt, slot)[name] = arrays[key].copy()
    return params, opt, cfg, epoch


__all__ = [
    "METRIC_COLUMNS",
    "compute_losses",
    "train_step",
    "prepare_sample",
    "FitResult",
    "fit",
    "epoch_mean",
    "write_metrics",
    "save_checkpoint",
    "load_checkpoint",
]
