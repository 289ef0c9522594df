"""Command-line entry point.

Exit codes: 0 success, 1 failed checks (gradcheck), 2 configuration or
usage problems, 3 numerical failure during training.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import no_grad
from .config import RunConfig, apply_overrides, config_to_text, load_config, validate_config
from .data import (
    generate_synthetic,
    load_folder,
    read_pgm,
    read_png,
    resize_bilinear,
    write_label_csv,
    write_pgm,
)
from .errors import CheckpointError, ConfigError, ContractError, NumericalError, ShapeError
from .gradcheck import run_all
from .model import decoder_forward, embed, encoder_forward, init_params, predict_pixels
from .patching import build_patch_batch, stack_batches, unpatchify
from .probe import PROBE_CSV_COLUMNS, fine_tune_probe, probe_params, result_csv_row
from .train import fit, load_checkpoint, write_metrics


def _load_training_images(cfg: RunConfig):
    if cfg.data_dir:
        return load_folder(cfg.data_dir, cfg.image_h, cfg.image_w)
    return generate_synthetic(cfg.seed, cfg.image_h, cfg.image_w, cfg.n_images, cfg.patch_size)


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config)
    cfg = apply_overrides(cfg, args.set or [])
    validate_config(cfg)
    out = Path(args.out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    images = _load_training_images(cfg)
    params = opt = None
    start_epoch = 0
    if args.resume:
        params, opt, cfg_ck, start_epoch = load_checkpoint(args.resume)
        cfg = cfg_ck if not args.set else apply_overrides(cfg_ck, args.set)
        validate_config(cfg)
        images = _load_training_images(cfg)
    result = fit(images, cfg, out_dir=out, params=params, opt_state=opt, start_epoch=start_epoch)
    write_metrics(result.history, out / "metrics.csv")
    (out / "config_echo.cfg").write_text(config_to_text(cfg))
    print(f"pretrain: {len(result.history)} steps, outputs in {out}")
    return 0


def _reconstruct_one(pixels, idx, params, cfg):
    rng = np.random.default_rng((cfg.seed, idx))
    pb = build_patch_batch(pixels, cfg.patch_size, cfg.mask_ratio, rng, cfg.target_eps)
    stacked = stack_batches([pb])
    with no_grad():
        x = embed(stacked, params, cfg)
        z = encoder_forward(x, params, cfg, 1)
        y = decoder_forward(z, params, cfg, 1)
        pred = predict_pixels(ad.gather_rows(y, stacked.masked_idx), params).data
    tokens = pb.tokens.data
    masked = pb.masked_idx
    # undo the target normalization with the original per-patch statistics
    orig_m = tokens[masked]
    mu = orig_m.mean(axis=1, keepdims=True)
    sd = np.maximum(orig_m.std(axis=1, keepdims=True), cfg.target_eps)
    recon_tokens = tokens.copy()
    recon_tokens[masked] = np.clip(pred * sd + mu, 0.0, 1.0)
    masked_tokens = tokens.copy()
    masked_tokens[masked] = 0.0
    original = unpatchify(tokens, pb.grid, cfg.patch_size)
    masked_img = unpatchify(masked_tokens, pb.grid, cfg.patch_size)
    recon = unpatchify(recon_tokens, pb.grid, cfg.patch_size)
    return original, masked_img, recon


def cmd_reconstruct(args) -> int:
    params, _, cfg, _ = load_checkpoint(args.checkpoint)
    if args.set:
        cfg = apply_overrides(cfg, args.set)
        validate_config(cfg)
        # re-validate tensor shapes against the overridden config
        params, _, cfg, _ = load_checkpoint(args.checkpoint, overrides=cfg)
    src = Path(args.images)
    if src.is_dir():
        files = sorted(p for p in src.iterdir() if p.suffix.lower() in (".pgm", ".png"))
    elif src.is_file():
        files = [src]
    else:
        raise ConfigError(f"image path not found: {src}")
    if not files:
        raise ConfigError(f"no PGM/PNG images in {src}")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for idx, f in enumerate(files):
        raw = read_pgm(f) if f.suffix.lower() == ".pgm" else read_png(f)
        pixels = resize_bilinear(raw, cfg.image_h, cfg.image_w)
        original, masked_img, recon = _reconstruct_one(pixels, idx, params, cfg)
        stem = f.stem
        write_pgm(out / f"{stem}_original.pgm", original)
        write_pgm(out / f"{stem}_masked.pgm", masked_img)
        write_pgm(out / f"{stem}_recon.pgm", recon)
        gap = np.full((original.shape[0], 4), 0.5, dtype=np.float32)
        write_pgm(out / f"{stem}_triptych.pgm", np.concatenate([original, gap, masked_img, gap, recon], axis=1))
    print(f"reconstruct: wrote {len(files)} triptychs to {out}")
    return 0


def cmd_gradcheck(args) -> int:
    rows = run_all()
    failed = []
    for name, err, tol in rows:
        ok = err <= tol
        print(f"{name:22s} worst rel err {err:.3e}  tol {tol:.0e}  {'ok' if ok else 'FAIL'}")
        if not ok:
            failed.append(name)
    if failed:
        print(f"gradcheck: FAILED ops: {', '.join(failed)}")
        return 1
    print("gradcheck: all ops within tolerance")
    return 0


def cmd_probe(args) -> int:
    _, _, cfg, _ = load_checkpoint(args.checkpoints[0])
    data_seed = args.data_seed if args.data_seed is not None else cfg.seed
    images = generate_synthetic(data_seed, cfg.image_h, cfg.image_w, cfg.n_images, cfg.patch_size)
    results = []
    if args.random_baseline:
        rand_params = init_params(cfg, np.random.default_rng(cfg.seed))
        results.append(probe_params(images, rand_params, cfg, "random-init"))
    for path in args.checkpoints:
        params, _, ck_cfg, _ = load_checkpoint(path)
        name = Path(path).stem
        results.append(probe_params(images, params, ck_cfg, name))
        if args.fine_tune:
            results.append(fine_tune_probe(images, params, ck_cfg, f"{name}+finetune"))
    header = f"{'variant':32s} {'overall':>8s} " + " ".join(f"{'c' + str(c):>7s}" for c in range(4))
    print(header)
    for r in results:
        cells = " ".join(
            f"{r.per_class[c]:7.3f}" if r.per_class.get(c) is not None else f"{'-':>7s}" for c in range(4)
        )
        print(f"{r.variant:32s} {r.overall_acc:8.3f} {cells}")
    out_csv = Path(args.out)
    is_new = not out_csv.exists()
    with open(out_csv, "a") as fh:
        if is_new:
            fh.write(",".join(PROBE_CSV_COLUMNS) + "\n")
        for r in results:
            fh.write(result_csv_row(r) + "\n")
    print(f"probe: appended {len(results)} rows to {out_csv}")
    return 0


def cmd_generate_data(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    images = generate_synthetic(args.seed, args.height, args.width, args.count, args.patch_size)
    for i, img in enumerate(images):
        write_pgm(out / f"image_{i:04d}.pgm", img.pixels)
        write_label_csv(out / f"image_{i:04d}_labels.csv", img.labels)
    print(f"generate-data: wrote {len(images)} images to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sdmim", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="run masked-patch pretraining from a config file")
    p.add_argument("config", help="path to a key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")
    p.add_argument("--out-dir", default=None, help="override the config's out_dir")
    p.add_argument("--resume", default=None, help="continue from a checkpoint")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("reconstruct", help="dump original/masked/reconstruction triptychs")
    p.add_argument("checkpoint")
    p.add_argument("images", help="an image file or a directory of PGM/PNG files")
    p.add_argument("out_dir")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(fn=cmd_reconstruct)

    p = sub.add_parser("gradcheck", help="finite-difference check of every primitive and the full loss")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("probe", help="linear-probe one or more checkpoints on the frozen synthetic corpus")
    p.add_argument("checkpoints", nargs="+")
    p.add_argument("--data-seed", type=int, default=None, help="seed of the probe corpus (default: config seed)")
    p.add_argument("--out", default="probe_results.csv")
    p.add_argument("--random-baseline", action="store_true", help="also probe a randomly initialized encoder")
    p.add_argument("--fine-tune", action="store_true", help="additionally fine-tune an unfrozen copy")
    p.set_defaults(fn=cmd_probe)

    p = sub.add_parser("generate-data", help="write a synthetic corpus as PGM files with label CSVs")
    p.add_argument("out_dir")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--height", type=int, default=128)
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--patch-size", type=int, default=16)
    p.set_defaults(fn=cmd_generate_data)

    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, CheckpointError, ShapeError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
