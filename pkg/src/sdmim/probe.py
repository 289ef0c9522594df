"""Frozen-encoder linear probing of per-patch labels.

The probe is the desk-scale downstream proxy: extract encoder features
with nothing masked, train a multinomial logistic regression on an 80/20
patch split with a fixed budget, and compare variants by patch accuracy.
An optional fine-tuning mode unfreezes a copy of the encoder at a lower
learning rate.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward, no_grad
from .config import RunConfig
from .data import N_CLASSES, LabeledImage
from .errors import ContractError
from .model import ModelParams, clone_params, embed, encoder_forward, named_params
from .optim import OptimizerState, adamw_step
from .patching import all_visible_batch

PROBE_ITERS = 500
PROBE_LR = 0.1
TRAIN_FRACTION = 0.8

PROBE_CSV_COLUMNS = ("variant", "seed", "overall_acc", "acc_class0", "acc_class1", "acc_class2", "acc_class3")


@dataclass
class ProbeResult:
    variant: str
    seed: int
    overall_acc: float
    per_class: dict          # class id -> accuracy, or None when absent from the test split
    n_train: int
    n_test: int


def params_checksum(params: ModelParams) -> str:
    h = hashlib.sha256()
    for name, p in named_params(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    return h.hexdigest()


def extract_features(images: list[LabeledImage], params: ModelParams, cfg: RunConfig):
    """Encoder features for every patch of every image, nothing masked.

    Returns (features [n_images*N, d_model], labels [n_images*N] or None).
    """
    stacked = all_visible_batch([img.pixels for img in images], cfg.patch_size)
    with no_grad():
        x = embed(stacked, params, cfg)
        z = encoder_forward(x, params, cfg, stacked.n_images)
    feats = z.data.copy()
    if any(img.labels is None for img in images):
        return feats, None
    labels = np.concatenate([img.labels.reshape(-1) for img in images]).astype(np.int64)
    return feats, labels


def _split(n: int, split_seed: int):
    order = np.random.default_rng(split_seed).permutation(n)
    cut = int(TRAIN_FRACTION * n)
    return order[:cut], order[cut:]


def _accuracy_by_class(pred: np.ndarray, truth: np.ndarray):
    per_class = {}
    for c in range(N_CLASSES):
        mask = truth == c
        per_class[c] = float((pred[mask] == c).mean()) if mask.any() else None
    return per_class


def linear_probe(features: np.ndarray, labels: np.ndarray, split_seed: int, variant: str = "probe") -> ProbeResult:
    """Multinomial logistic regression by full-batch gradient descent
    (fixed budget: 500 iterations at lr 0.1, no regularization)."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if features.shape[0] != labels.shape[0]:
        raise ContractError(f"linear_probe: {features.shape[0]} features vs {labels.shape[0]} labels")
    if np.unique(labels).size < 2:
        raise ContractError("linear_probe: need at least 2 classes present")
    tr, te = _split(labels.size, split_seed)
    x_tr, y_tr = features[tr], labels[tr]
    x_te, y_te = features[te], labels[te]
    n, d = x_tr.shape
    w = np.zeros((d, N_CLASSES))
    b = np.zeros(N_CLASSES)
    onehot = np.eye(N_CLASSES)[y_tr]
    for _ in range(PROBE_ITERS):
        logits = x_tr @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        prob = e / e.sum(axis=1, keepdims=True)
        delta = (prob - onehot) / n
        w -= PROBE_LR * (x_tr.T @ delta)
        b -= PROBE_LR * delta.sum(axis=0)
    pred = np.argmax(x_te @ w + b, axis=1)
    return ProbeResult(
        variant=variant,
        seed=split_seed,
        overall_acc=float((pred == y_te).mean()),
        per_class=_accuracy_by_class(pred, y_te),
        n_train=int(tr.size),
        n_test=int(te.size),
    )


def probe_params(images: list[LabeledImage], params: ModelParams, cfg: RunConfig, variant: str) -> ProbeResult:
    """Extract + probe, asserting the encoder came back untouched."""
    before = params_checksum(params)
    feats, labels = extract_features(images, params, cfg)
    if labels is None:
        raise ContractError("probe needs per-patch labels; the corpus has none")
    result = linear_probe(feats, labels, cfg.split_seed, variant)
    if params_checksum(params) != before:
        raise ContractError("probe mutated the encoder parameters")
    return result


def fine_tune_probe(
    images: list[LabeledImage],
    params: ModelParams,
    cfg: RunConfig,
    variant: str,
) -> ProbeResult:
    """Unfrozen variant: a fresh linear head plus the encoder trained
    jointly with the adaptive optimizer at cfg.finetune_lr. Works on a
    clone, so the caller's parameters stay frozen."""
    labels_all = np.concatenate([img.labels.reshape(-1) for img in images]).astype(np.int64)
    tr, te = _split(labels_all.size, cfg.split_seed)
    tuned = clone_params(params)
    stacked = all_visible_batch([img.pixels for img in images], cfg.patch_size)
    rng = np.random.default_rng(cfg.split_seed)
    head_w = Tensor((rng.normal(0, 0.02, size=(cfg.d_model, N_CLASSES))).astype(np.float32), requires_grad=True)
    head_b = Tensor(np.zeros(N_CLASSES, dtype=np.float32), requires_grad=True)
    onehot = Tensor(np.eye(N_CLASSES, dtype=np.float32)[labels_all[tr]])
    # everything reachable from the unmasked forward, plus the new head
    trainable = [
        (name, p)
        for name, p in named_params(tuned)
        if name.startswith(("patch.", "pos_embed", "enc"))
    ] + [("probe.w", head_w), ("probe.b", head_b)]
    opt = OptimizerState.from_config(cfg)
    for _ in range(cfg.finetune_iters):
        x = embed(stacked, tuned, cfg)
        z = encoder_forward(x, tuned, cfg, stacked.n_images)
        feats = ad.gather_rows(z, tr)
        logits = ad.add_bias(ad.matmul(feats, head_w), head_b)
        prob = ad.softmax(logits)
        loss = ad.smul(ad.reduce_sum(ad.mul(onehot, ad.log_clamped(prob))), -1.0 / tr.size)
        ad.zero_grads(p for _, p in trainable)
        backward(loss)
        adamw_step(trainable, opt, cfg.finetune_lr)
    with no_grad():
        x = embed(stacked, tuned, cfg)
        z = encoder_forward(x, tuned, cfg, stacked.n_images)
        logits = ad.add_bias(ad.matmul(ad.gather_rows(z, te), head_w), head_b)
    pred = np.argmax(logits.data, axis=1)
    y_te = labels_all[te]
    return ProbeResult(
        variant=variant,
        seed=cfg.split_seed,
        overall_acc=float((pred == y_te).mean()),
        per_class=_accuracy_by_class(pred, y_te),
        n_train=int(tr.size),
        n_test=int(te.size),
    )


def result_csv_row(r: ProbeResult) -> str:
    cells = [r.variant, str(r.seed), repr(r.overall_acc)]
    for c in range(N_CLASSES):
        v = r.per_class.get(c)
        cells.append("" if v is None else repr(v))
    return ",".join(cells)


__all__ = [
    "PROBE_ITERS",
    "PROBE_LR",
    "PROBE_CSV_COLUMNS",
    "ProbeResult",
    "params_checksum",
    "extract_features",
    "linear_probe",
    "probe_params",
    "fine_tune_probe",
    "result_csv_row",
]
