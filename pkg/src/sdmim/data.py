"""Synthetic panoramic-style corpus, grayscale image IO, and augmentation.

The generator draws two horizontal arcs of bright elliptical blobs
("teeth") on a dark noisy background, overlays a random subset with
brighter rectangles ("restorations"), and occasionally lays a thin
bright horizontal strip across an arc ("appliance"). Per-patch labels
record the dominant pixel class: 0 background, 1 tooth, 2 restoration,
3 appliance.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, ShapeError

log = logging.getLogger(__name__)

CLASS_NAMES = ("background", "tooth", "restoration", "appliance")
N_CLASSES = 4


@dataclass
class LabeledImage:
    pixels: np.ndarray            # (H, W) float32 in [0, 1]
    labels: np.ndarray | None     # (H/P, W/P) int64 class grid, None when unknown
    seed: int


def _arc_y(t: np.ndarray | float, base: float, curve: float) -> np.ndarray | float:
    # parabolic dental-arch profile across the image width, t in [0, 1]
    return base + curve * (2.0 * t - 1.0) ** 2


def _fill_ellipse(pix, cls, cx, cy, rx, ry, value, label):
    """Filled ellipse with radial shading (bright core, dimmer rim), so a
    patch inside a blob still carries predictable low-frequency content."""
    h, w = pix.shape
    x0, x1 = max(int(cx - rx) - 1, 0), min(int(cx + rx) + 2, w)
    y0, y1 = max(int(cy - ry) - 1, 0), min(int(cy + ry) + 2, h)
    if x0 >= x1 or y0 >= y1:
        return
    ys, xs = np.mgrid[y0:y1, x0:x1]
    r2 = ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2
    inside = r2 <= 1.0
    shade = value * (1.0 - 0.35 * r2)
    pix[y0:y1, x0:x1][inside] = shade[inside]
    cls[y0:y1, x0:x1][inside] = label


def _fill_rect(pix, cls, cx, cy, half_w, half_h, value, label):
    h, w = pix.shape
    x0, x1 = max(int(cx - half_w), 0), min(int(cx + half_w) + 1, w)
    y0, y1 = max(int(cy - half_h), 0), min(int(cy + half_h) + 1, h)
    if x0 >= x1 or y0 >= y1:
        return
    ys = np.arange(y0, y1, dtype=np.float64)[:, None]
    span = max(2.0 * half_h, 1.0)
    pix[y0:y1, x0:x1] = value * (1.0 - 0.25 * (ys - (cy - half_h)) / span)
    cls[y0:y1, x0:x1] = label


def _background_field(rng, h, w):
    """Smooth dark field: the per-patch std of the background must come
    from low-frequency content, not speckle, or normalized targets would
    be unlearnable white noise. Frequencies and phases jitter only mildly
    across images so the corpus shares structure a small model can pick
    up within a short schedule."""
    yy, xx = np.mgrid[0:h, 0:w] / np.array([h, w]).reshape(2, 1, 1)
    field = np.zeros((h, w))
    # even in x about the image center so horizontal flips preserve the
    # shared background structure, matching the mirror-symmetric arcs
    for fband, amp in (((1.0, 1.2), 0.05), ((3.0, 3.4), 0.06)):
        fx, fy = rng.uniform(*fband, size=2)
        py = rng.uniform(0.0, 0.04)
        field += amp * np.cos(2 * np.pi * fx * (xx - 0.5)) * np.sin(2 * np.pi * (fy * yy + py))
    gy = rng.uniform(-0.3, 0.3)
    field += 0.04 * gy * yy
    return 0.16 + field


def _label_grid(cls: np.ndarray, patch_size: int) -> np.ndarray:
    """Dominant pixel class per patch; ties go to the rarer (higher) class."""
    h, w = cls.shape
    p = patch_size
    patches = cls.reshape(h // p, p, w // p, p).transpose(0, 2, 1, 3).reshape(h // p, w // p, p * p)
    counts = np.stack([(patches == c).sum(axis=-1) for c in range(N_CLASSES)], axis=-1)
    rev = counts[..., ::-1]
    return (N_CLASSES - 1 - rev.argmax(axis=-1)).astype(np.int64)


def generate_image(seed: int, index: int, h: int, w: int, patch_size: int) -> LabeledImage:
    rng = np.random.default_rng((seed, index))
    pix = _background_field(rng, h, w) + 0.004 * rng.standard_normal((h, w))
    cls = np.zeros((h, w), dtype=np.int64)

    arcs = [(0.32, 0.08, 8), (0.68, -0.08, 7)]
    arc_teeth = []
    for base, curve, n_teeth in arcs:
        teeth = []
        for j in range(n_teeth):
            t = (j + 0.5) / n_teeth + rng.normal(0.0, 0.006)
            cx = t * w
            cy = _arc_y(t, base, curve) * h + rng.normal(0.0, 0.008 * h)
            rx = w / n_teeth * 0.46 * rng.uniform(0.92, 1.08)
            ry = rx * rng.uniform(1.5, 1.7)
            bright = rng.uniform(0.58, 0.72)
            _fill_ellipse(pix, cls, cx, cy, rx, ry, bright, 1)
            teeth.append((cx, cy, rx, ry))
            if rng.random() < 0.30:
                half_w = rx * rng.uniform(0.75, 1.0)
                half_h = ry * 0.5 * rng.uniform(0.8, 1.2)
                off = rng.uniform(-0.3, 0.3) * ry
                _fill_rect(pix, cls, cx, cy + off, half_w, half_h, rng.uniform(0.85, 1.0), 2)
        arc_teeth.append((base, curve, teeth))

    if rng.random() < 0.35:
        base, curve, _ = arc_teeth[int(rng.integers(0, 2))]
        band_y = _arc_y(0.5, base, curve) * h + rng.normal(0.0, 0.02 * h)
        half = int(rng.integers(4, 6))
        x0, x1 = int(0.12 * w), int(0.88 * w)
        y0, y1 = max(int(band_y) - half, 0), min(int(band_y) + half + 1, h)
        bright = rng.uniform(0.82, 0.95)
        ramp = 1.0 - 0.15 * (np.arange(x0, x1) - x0) / max(x1 - x0, 1)
        pix[y0:y1, x0:x1] = bright * ramp[None, :]
        cls[y0:y1, x0:x1] = 3

    pix += 0.003 * rng.standard_normal((h, w))
    pix = np.clip(pix, 0.0, 1.0).astype(np.float32)
    return LabeledImage(pixels=pix, labels=_label_grid(cls, patch_size), seed=seed)


def generate_synthetic(seed: int, h: int, w: int, n_images: int, patch_size: int = 16) -> list[LabeledImage]:
    """Deterministic corpus: (seed, h, w, n_images) fixes every byte."""
    if h % patch_size or w % patch_size:
        raise ShapeError(f"generate_synthetic: image {h}x{w} not divisible by patch size {patch_size}")
    return [generate_image(seed, i, h, w, patch_size) for i in range(n_images)]


def augment(img: LabeledImage, rng: np.random.Generator, sigma: float = 0.02, flip_prob: float = 0.5) -> LabeledImage:
    """Horizontal flip with probability flip_prob (labels mirrored with the
    pixels), then additive Gaussian noise clamped back to [0, 1]."""
    pix = img.pixels
    labels = img.labels
    if flip_prob > 0 and rng.random() < flip_prob:
        pix = pix[:, ::-1]
        labels = labels[:, ::-1] if labels is not None else None
    if sigma > 0:
        pix = pix + rng.normal(0.0, sigma, size=pix.shape)
        pix = np.clip(pix, 0.0, 1.0)
    return LabeledImage(pixels=np.ascontiguousarray(pix, dtype=np.float32),
                        labels=None if labels is None else np.ascontiguousarray(labels),
                        seed=img.seed)


# ---------------------------------------------------------------------------
# grayscale image files


def write_pgm(path, pixels: np.ndarray):
    """8-bit binary PGM (P5), values scaled from [0, 1]."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 2:
        raise ShapeError(f"write_pgm: expected a 2-d image, got shape {tuple(pixels.shape)}")
    h, w = pixels.shape
    body = np.rint(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(body.tobytes())


def read_pgm(path) -> np.ndarray:
    """Binary PGM (P5, maxval <= 255) to float32 in [0, 1] (divide by maxval)."""
    raw = Path(path).read_bytes()

    pos = 0

    def token():
        nonlocal pos
        while pos < len(raw):
            if raw[pos : pos + 1].isspace():
                pos += 1
            elif raw[pos : pos + 1] == b"#":
                while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                    pos += 1
            else:
                break
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        return raw[start:pos]

    magic = token()
    if magic != b"P5":
        raise ShapeError(f"read_pgm: {path} is not a binary PGM (magic {magic!r})")
    w, h, maxval = int(token()), int(token()), int(token())
    if maxval <= 0 or maxval > 255:
        raise ShapeError(f"read_pgm: unsupported maxval {maxval} in {path}")
    pos += 1  # single whitespace byte before the raster
    body = raw[pos : pos + w * h]
    if len(body) != w * h:
        raise ShapeError(f"read_pgm: truncated raster in {path}")
    img = np.frombuffer(body, dtype=np.uint8).reshape(h, w)
    return (img.astype(np.float32) / maxval).astype(np.float32)


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float32)
    return arr / 255.0


def resize_bilinear(pixels: np.ndarray, h: int, w: int) -> np.ndarray:
    if pixels.shape == (h, w):
        return np.asarray(pixels, dtype=np.float32)
    im = Image.fromarray(np.asarray(pixels, dtype=np.float32), mode="F")
    out = np.asarray(im.resize((w, h), Image.BILINEAR), dtype=np.float32)
    return np.clip(out, 0.0, 1.0)


def load_folder(path, h: int, w: int) -> list[LabeledImage]:
    """Load every PGM/PNG under path, resized to h x w, scaled to [0, 1].

    Undecodable files are skipped with a warning; an empty result is an
    error.
    """
    root = Path(path)
    if not root.is_dir():
        raise ConfigError(f"data_dir is not a directory: {root}")
    images = []
    files = sorted(p for p in root.iterdir() if p.suffix.lower() in (".pgm", ".png"))
    for p in files:
        try:
            raw = read_pgm(p) if p.suffix.lower() == ".pgm" else read_png(p)
        except Exception as exc:  # noqa: BLE001 - skip-with-warning contract
            log.warning("skipping undecodable image %s: %s", p, exc)
            continue
        images.append(LabeledImage(pixels=resize_bilinear(raw, h, w), labels=None, seed=0))
    if not images:
        raise ConfigError(f"no decodable PGM/PNG images in {root}")
    return images


def write_label_csv(path, grid: np.ndarray):
    lines = [",".join(str(int(v)) for v in row) for row in grid]
    Path(path).write_text("\n".join(lines) + "\n")


def read_label_csv(path) -> np.ndarray:
    rows = [
        [int(v) for v in line.split(",")]
        for line in Path(path).read_text().strip().splitlines()
    ]
    return np.asarray(rows, dtype=np.int64)


__all__ = [
    "CLASS_NAMES",
    "N_CLASSES",
    "LabeledImage",
    "generate_image",
    "generate_synthetic",
    "augment",
    "write_pgm",
    "read_pgm",
    "read_png",
    "resize_bilinear",
    "load_folder",
    "write_label_csv",
    "read_label_csv",
]
