"""Relative-L2 loss, AdamW-style optimizer, training loop, and evaluation.

Training minimizes the squared-ratio relative L2 loss on z-normalized fields
(root-ratio available via config); the reported metric is the root-ratio
relative L2 on de-normalized fields. One optimizer step per mini-batch with
per-sample gradient accumulation in fixed sample order, global-norm clipping,
and a cosine learning-rate decay.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import data as data_mod
from .geometry import knn_indices_accelerated
from .model import OperatorModel, forward, mask_trajectory, save_checkpoint
from .tensor import (
    GradTape,
    Tensor,
    TensorError,
    backward,
    l2_lastdim,
    mul,
    reduce_sum,
    reshape,
    scale,
    sub,
)

__all__ = ["TrainConfig", "TrainReport", "TrainingError", "relative_l2_loss",
           "AdamState", "adam_step", "clip_gradients", "cosine_lr", "train",
           "evaluate"]

LOSS_VARIANTS = ("squared-ratio", "root-ratio")


class TrainingError(RuntimeError):
    """Config/dataset mismatch or a non-finite loss during training."""


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int = 8
    lr: float = 1e-3
    lr_min: float = 1e-5
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    seed: int = 0
    loss_variant: str = "squared-ratio"

    def __post_init__(self):
        if self.epochs < 1:
            raise TrainingError("epochs must be >= 1")
        if min(self.lr, self.lr_min, self.eps, self.clip_norm,
               self.batch_size) <= 0:
            raise TrainingError("rates, eps, clip norm, batch size must be positive")
        if self.weight_decay < 0:
            raise TrainingError("weight decay must be non-negative")
        if self.loss_variant not in LOSS_VARIANTS:
            raise TrainingError(f"loss variant must be one of {LOSS_VARIANTS}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainReport:
    """One row per epoch plus the best observed test metric."""

    train_loss: list[float] = field(default_factory=list)
    test_rel_l2: list[float] = field(default_factory=list)
    mask_sigma: list[list[float]] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    best_test_rel_l2: float = math.inf
    best_epoch: int = -1

    @property
    def epochs(self) -> int:
        return len(self.train_loss)

    def numeric_rows(self) -> list[tuple]:
        """Deterministic columns only (timing excluded)."""
        return [(i, self.train_loss[i], self.test_rel_l2[i], tuple(self.mask_sigma[i]))
                for i in range(self.epochs)]

    def write_csv(self, path) -> None:
        layers = len(self.mask_sigma[0]) if self.mask_sigma else 0
        cols = ["epoch", "train_loss", "test_rel_l2"]
        cols += [f"sigma_s_{i + 1}" for i in range(layers)]
        cols += ["epoch_seconds"]
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(cols) + "\n")
            for i in range(self.epochs):
                row = [str(i + 1), repr(self.train_loss[i]), repr(self.test_rel_l2[i])]
                row += [repr(s) for s in self.mask_sigma[i]]
                row += [f"{self.epoch_seconds[i]:.6f}"]
                fh.write(",".join(row) + "\n")


def relative_l2_loss(pred: Tensor, target: Tensor, variant: str = "squared-ratio") -> Tensor:
    """Relative L2 discrepancy over the whole field.

    squared-ratio: |pred - target|^2 / |target|^2; root-ratio takes the root
    of both norms. The target norm is a constant (no gradient flows into it).
    """
    if pred.shape != target.shape:
        raise TensorError(f"loss shapes disagree: {pred.shape} vs {target.shape}")
    if variant not in LOSS_VARIANTS:
        raise TensorError(f"unknown loss variant {variant!r}")
    den_sq = float(np.sum(target.data * target.data))
    if den_sq <= 0.0:
        raise TensorError("relative L2 needs a nonzero target")
    diff = sub(pred, target)
    if variant == "squared-ratio":
        return scale(reduce_sum(mul(diff, diff)), 1.0 / den_sq)
    flat = reshape(diff, (diff.size,))
    return scale(reshape(l2_lastdim(flat), ()), 1.0 / math.sqrt(den_sq))


class AdamState:
    """First/second moment buffers and the shared step counter."""

    def __init__(self, params: list[Tensor]):
        self.step = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]


def adam_step(params: list[Tensor], grads: list[np.ndarray], state: AdamState,
              cfg: TrainConfig, lr: float | None = None) -> None:
    """Decoupled-weight-decay Adam update, in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise TrainingError("parameter/gradient/state lists must align")
    if lr is None:
        lr = cfg.lr
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape:
            raise TrainingError(
                f"gradient shape {g.shape} does not match parameter {p.data.shape}")
        if cfg.weight_decay:
            p.data -= lr * cfg.weight_decay * p.data
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)


def clip_gradients(grads: list[np.ndarray], max_norm: float) -> float:
    """Scale all gradients so the global norm is at most max_norm; returns it."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if total > max_norm:
        factor = max_norm / total
        for g in grads:
            g *= factor
    return min(total, max_norm)


def cosine_lr(epoch: int, total_epochs: int, lr: float, lr_min: float) -> float:
    """Cosine decay from lr (epoch 0) to lr_min (last epoch)."""
    if total_epochs <= 1:
        return lr
    frac = epoch / (total_epochs - 1)
    return lr_min + 0.5 * (lr - lr_min) * (1.0 + math.cos(math.pi * frac))


def _check_compat(m: OperatorModel, ds: data_mod.Dataset) -> None:
    cfg = m.config
    if ds.inputs.shape[2] != cfg.in_channels \
            or ds.outputs.shape[2] != cfg.out_channels \
            or ds.geometry.coords.shape[1] != cfg.coord_channels:
        raise TrainingError(
            f"model channels (C_f={cfg.in_channels}, C_s={cfg.coord_channels}, "
            f"C_u={cfg.out_channels}) do not match dataset shapes "
            f"{ds.inputs.shape}/{ds.geometry.coords.shape}/{ds.outputs.shape}")
    if cfg.k > ds.geometry.m:
        raise TrainingError(f"patch size {cfg.k} exceeds {ds.geometry.m} points")


def evaluate(m: OperatorModel, ds: data_mod.Dataset, split: str = "test") -> dict:
    """Mean and per-sample root-ratio relative L2 on de-normalized fields.

    Also reports the metric in normalized space (the space the model is
    trained in), useful as a scale-free baseline.
    """
    _check_compat(m, ds)
    if split == "train":
        indices = ds.train_indices
    elif split == "test":
        indices = ds.test_indices
    elif split == "all":
        indices = np.arange(ds.n)
    else:
        indices = np.asarray(split, dtype=np.int64)
    if len(indices) == 0:
        raise TrainingError(f"split {split!r} selects no samples")

    stats = ds.stats
    knn = knn_indices_accelerated(ds.geometry, m.config.k)
    per_sample = []
    per_sample_norm = []
    for i in indices:
        x_norm = data_mod.normalize(ds.inputs.data[i], stats["input_mean"],
                                    stats["input_std"])
        pred_norm = forward(m, Tensor(x_norm), ds.geometry, knn).data
        raw = ds.outputs.data[i]
        pred = data_mod.denormalize(pred_norm, stats["output_mean"],
                                    stats["output_std"])
        per_sample.append(float(np.linalg.norm(pred - raw) / np.linalg.norm(raw)))
        y_norm = data_mod.normalize(raw, stats["output_mean"], stats["output_std"])
        per_sample_norm.append(
            float(np.linalg.norm(pred_norm - y_norm) / np.linalg.norm(y_norm)))
    return {
        "rel_l2": float(np.mean(per_sample)),
        "per_sample": per_sample,
        "rel_l2_normalized": float(np.mean(per_sample_norm)),
        "n": len(per_sample),
    }


def train(m: OperatorModel, ds: data_mod.Dataset, cfg: TrainConfig,
          checkpoint_path=None) -> TrainReport:
    """Run the full training protocol; returns the per-epoch report.

    Seeded shuffling, per-batch gradient accumulation over samples in fixed
    order, global-norm clipping, Adam with cosine decay. The test metric and
    the per-layer mask fractions are logged every epoch; the best checkpoint
    (lowest test metric) is written to `checkpoint_path` when given.
    """
    _check_compat(m, ds)
    train_idx = ds.train_indices
    if len(train_idx) == 0:
        raise TrainingError("dataset has an empty train split")
    stats = ds.stats
    x_norm = data_mod.normalize(ds.inputs.data, stats["input_mean"], stats["input_std"])
    y_norm = data_mod.normalize(ds.outputs.data, stats["output_mean"], stats["output_std"])

    knn = knn_indices_accelerated(ds.geometry, m.config.k)
    names_params = list(m.named_parameters())
    params = [p for _, p in names_params]
    state = AdamState(params)
    rng = np.random.default_rng(cfg.seed)
    report = TrainReport()

    for epoch in range(cfg.epochs):
        tic = time.perf_counter()
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr, cfg.lr_min)
        order = train_idx[rng.permutation(len(train_idx))]
        epoch_loss = 0.0
        n_seen = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            grads = [np.zeros_like(p.data) for p in params]
            batch_loss = 0.0
            for i in batch:
                with GradTape() as tape:
                    pred = forward(m, Tensor(x_norm[i]), ds.geometry, knn)
                    loss = relative_l2_loss(pred, Tensor(y_norm[i]), cfg.loss_variant)
                    value = loss.item()
                    if not math.isfinite(value):
                        raise TrainingError(
                            f"non-finite loss at epoch {epoch + 1}, sample {i}")
                    grad_map = backward(loss, tape)
                for g_acc, p in zip(grads, params):
                    g = grad_map.get(p)
                    if g is not None:
                        g_acc += g
                batch_loss += value
            inv = 1.0 / len(batch)
            for g in grads:
                g *= inv
            clip_gradients(grads, cfg.clip_norm)
            adam_step(params, grads, state, cfg, lr=lr)
            epoch_loss += batch_loss
            n_seen += len(batch)

        metrics = evaluate(m, ds, "test" if len(ds.test_indices) else "train")
        report.train_loss.append(epoch_loss / n_seen)
        report.test_rel_l2.append(metrics["rel_l2"])
        report.mask_sigma.append(mask_trajectory(m))
        report.epoch_seconds.append(time.perf_counter() - tic)
        if metrics["rel_l2"] < report.best_test_rel_l2:
            report.best_test_rel_l2 = metrics["rel_l2"]
            report.best_epoch = epoch + 1
            if checkpoint_path is not None:
                save_checkpoint(m, checkpoint_path)
    return report
