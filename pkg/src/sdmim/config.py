"""Flat run configuration: one dataclass, one key=value file format.

Every knob has a named key; files are plain `key=value` lines with `#`
comments, and the CLI lets any key be overridden with `--set key=value`.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError


@dataclass
class RunConfig:
    # geometry
    image_h: int = 128
    image_w: int = 128
    patch_size: int = 16
    # encoder / decoder
    d_model: int = 64
    encoder_depth: int = 4
    decoder_depth: int = 1
    heads: int = 4
    window: int = 4
    shifted_windows: bool = True
    # masking and losses
    mask_ratio: float = 0.2
    alpha: float = 0.2
    loss_mode: str = "masked"      # masked | whole
    distill: bool = True
    stop_gradient: bool = True
    # distillation head
    distill_k: int = 4096
    bottleneck: int = 256
    head_hidden: int = 128
    # optimizer and schedule
    base_lr: float = 8e-4
    min_lr: float = 0.0
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    warmup_epochs: int = 10
    total_epochs: int = 100
    batch_size: int = 0            # 0 = whole training set in one batch
    grad_clip: float = 0.0         # 0 = off
    checkpoint_every: int = 0      # 0 = final checkpoint only
    # data
    seed: int = 0
    n_images: int = 64
    data_dir: str = ""             # empty = synthetic corpus
    out_dir: str = "runs/default"
    augment: bool = True
    noise_sigma: float = 0.02
    flip_prob: float = 0.5
    fixed_mask: bool = False
    # numerics
    norm_eps: float = 1e-5
    l2_eps: float = 1e-6
    target_eps: float = 1e-6
    # probing
    split_seed: int = 0
    finetune_lr: float = 1e-4
    finetune_iters: int = 100

    # -- derived ----------------------------------------------------------

    def grid(self) -> tuple[int, int]:
        return (self.image_h // self.patch_size, self.image_w // self.patch_size)

    def n_patches(self) -> int:
        r, c = self.grid()
        return r * c

    def token_dim(self) -> int:
        return self.patch_size * self.patch_size


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(key: str, raw: str):
    f = _FIELDS[key]
    raw = raw.strip()
    if f.type in ("bool", bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"config field '{key}': expected a boolean, got {raw!r}")
    try:
        if f.type in ("int", int):
            return int(raw)
        if f.type in ("float", float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"config field '{key}': cannot parse {raw!r} as {f.type}") from None
    return raw


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = dataclasses.replace(base) if base is not None else RunConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"config line {lineno}: expected key=value, got {line.strip()!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"config line {lineno}: unknown field '{key}'")
        setattr(cfg, key, _coerce(key, raw))
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text())


def apply_overrides(cfg: RunConfig, pairs: list[str]) -> RunConfig:
    cfg = dataclasses.replace(cfg)
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"--set: unknown field '{key}'")
        setattr(cfg, key, _coerce(key, raw))
    return cfg


def config_to_text(cfg: RunConfig) -> str:
    lines = []
    for f in dataclasses.fields(RunConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name}={v}")
    return "\n".join(lines) + "\n"


def validate_config(cfg: RunConfig) -> RunConfig:
    """Reject invalid values/combinations, naming the offending field."""

    def bad(field, why):
        raise ConfigError(f"config field '{field}': {why}")

    if cfg.image_h <= 0 or cfg.image_w <= 0:
        bad("image_h/image_w", f"must be positive, got {cfg.image_h}x{cfg.image_w}")
    if cfg.patch_size <= 0:
        bad("patch_size", f"must be positive, got {cfg.patch_size}")
    if cfg.image_h % cfg.patch_size or cfg.image_w % cfg.patch_size:
        bad("patch_size", f"{cfg.patch_size} does not divide image {cfg.image_h}x{cfg.image_w}")
    rows, cols = cfg.grid()
    if rows * cols < 2:
        bad("patch_size", "need at least 2 patches to form a visible/masked split")
    if cfg.d_model <= 0:
        bad("d_model", f"must be positive, got {cfg.d_model}")
    if cfg.heads <= 0 or cfg.d_model % cfg.heads:
        bad("heads", f"{cfg.heads} must divide d_model={cfg.d_model}")
    if cfg.window <= 0 or rows % cfg.window or cols % cfg.window:
        bad("window", f"{cfg.window} does not tile the {rows}x{cols} patch grid")
    if cfg.encoder_depth < 0 or cfg.decoder_depth < 0:
        bad("encoder_depth/decoder_depth", "depths must be non-negative")
    if not 0.0 < cfg.mask_ratio < 1.0:
        bad("mask_ratio", f"must lie strictly between 0 and 1, got {cfg.mask_ratio}")
    if not 0.0 <= cfg.alpha <= 1.0:
        bad("alpha", f"must lie in [0, 1], got {cfg.alpha}")
    if cfg.loss_mode not in ("masked", "whole"):
        bad("loss_mode", f"must be 'masked' or 'whole', got {cfg.loss_mode!r}")
    if cfg.distill_k < 2:
        bad("distill_k", f"needs at least 2 output dimensions, got {cfg.distill_k}")
    if cfg.bottleneck <= 0 or cfg.head_hidden <= 0:
        bad("bottleneck/head_hidden", "must be positive")
    if cfg.base_lr < 0 or cfg.min_lr < 0:
        bad("base_lr/min_lr", "learning rates must be non-negative")
    if not 0.0 <= cfg.beta1 < 1.0 or not 0.0 <= cfg.beta2 < 1.0:
        bad("beta1/beta2", f"must lie in [0, 1), got {cfg.beta1}/{cfg.beta2}")
    if cfg.adam_eps <= 0:
        bad("adam_eps", "must be positive")
    if cfg.total_epochs <= 0:
        bad("total_epochs", f"must be positive, got {cfg.total_epochs}")
    if cfg.warmup_epochs < 0 or cfg.warmup_epochs >= cfg.total_epochs:
        bad("warmup_epochs", f"{cfg.warmup_epochs} must lie in [0, total_epochs={cfg.total_epochs})")
    if cfg.batch_size < 0:
        bad("batch_size", "must be non-negative (0 = full batch)")
    if cfg.grad_clip < 0:
        bad("grad_clip", "must be non-negative (0 = off)")
    if cfg.n_images <= 0 and not cfg.data_dir:
        bad("n_images", "synthetic corpus needs a positive image count")
    if cfg.noise_sigma < 0:
        bad("noise_sigma", "must be non-negative")
    if not 0.0 <= cfg.flip_prob <= 1.0:
        bad("flip_prob", f"must lie in [0, 1], got {cfg.flip_prob}")
    for name in ("norm_eps", "l2_eps", "target_eps"):
        if getattr(cfg, name) <= 0:
            bad(name, "must be positive")
    if cfg.weight_decay < 0:
        bad("weight_decay", "must be non-negative")
    if cfg.finetune_lr < 0 or cfg.finetune_iters < 0:
        bad("finetune_lr/finetune_iters", "must be non-negative")
    return cfg


__all__ = [
    "RunConfig",
    "parse_config_text",
    "load_config",
    "apply_overrides",
    "config_to_text",
    "validate_config",
]
