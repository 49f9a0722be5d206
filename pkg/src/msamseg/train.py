"""End-to-end training loop: Adam on mean per-pixel cross-entropy, batched
minibatches with per-epoch reshuffling and on-the-fly augmentation."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data as D
from . import model as M
from . import tensor as T
from .seeding import stream


class TrainingError(RuntimeError):
    """Raised when training cannot proceed (bad config, NaN divergence)."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 4
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    augment: bool = True
    seed: int = 0
    checkpoint_every: int = 0  # additionally checkpoint every N epochs; 0 = final only

    def __post_init__(self):
        if self.epochs < 1:
            raise TrainingError("epochs must be >= 1")
        if self.batch_size < 1:
            raise TrainingError("batch_size must be >= 1")


def init_adam_state(params):
    return {
        "t": 0,
        "m": {n: np.zeros_like(p.data) for n, p in params.items()},
        "v": {n: np.zeros_like(p.data) for n, p in params.items()},
    }


def adam_step(params, grads, state, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update, in place on params and state."""
    state["t"] += 1
    t = state["t"]
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g is None:
            g = np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        m = state["m"][name]
        v = state["v"][name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= (lr / c1) * m / (np.sqrt(v / c2) + eps)


def prepare_training_set(dataset, fold):
    """Train-fold slices, tumor-filtered, with train-only normalization stats."""
    triplets = [t for pid in fold.train_ids for t in dataset[pid]]
    triplets = D.filter_tumor_slices(triplets)
    if not triplets:
        raise TrainingError("training fold is empty after tumor-slice filtering")
    stats = {m: D.compute_stats(triplets, m) for m in ("pet", "ct")}
    return triplets, stats


def normalize_triplet(t, stats):
    return D.SliceTriplet(
        pet=D.normalize(t.pet, stats["pet"]),
        ct=D.normalize(t.ct, stats["ct"]),
        mask=t.mask,
        patient_id=t.patient_id,
        slice_index=t.slice_index,
    )


def stats_fingerprint(stats):
    return f"pet:{stats['pet'].mean:.9e},{stats['pet'].std:.9e};ct:{stats['ct'].mean:.9e},{stats['ct'].std:.9e}"


@dataclass
class TrainResult:
    checkpoint_path: Path
    loss_log: list  # [(epoch, mean_loss)]
    params: M.NetworkParams
    stats: dict


def train(model_config, train_config, dataset, fold, out_dir, run_label="run", extra_meta=None):
    """Train one configuration on one fold; writes loss CSV + checkpoint.

    Deterministic given (model_config, train_config, dataset, fold): all
    randomness comes from labeled sub-streams of train_config.seed.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    triplets, stats = prepare_training_set(dataset, fold)
    triplets = [normalize_triplet(t, stats) for t in triplets]

    params = M.build_model(model_config, seed=train_config.seed)
    state = init_adam_state(params)
    shuffle_rng = stream(train_config.seed, "shuffle")
    augment_rng = stream(train_config.seed, "augment")

    meta = {
        "run_label": run_label,
        "fold": fold.fold,
        "seed": train_config.seed,
        "stats": {m: [stats[m].mean, stats[m].std] for m in ("pet", "ct")},
        "stats_fingerprint": stats_fingerprint(stats),
        "test_ids": list(fold.test_ids),
    }
    meta.update(extra_meta or {})
    ckpt_path = out_dir / f"{run_label}.ckpt"
    loss_path = out_dir / f"{run_label}_loss.csv"

    loss_log = []
    order = np.arange(len(triplets))
    for epoch in range(train_config.epochs):
        shuffle_rng.shuffle(order)
        epoch_loss = 0.0
        npix_total = 0
        for start in range(0, len(order), train_config.batch_size):
            batch = [triplets[i] for i in order[start:start + train_config.batch_size]]
            if train_config.augment:
                batch = [D.augment(t, augment_rng) for t in batch]
            pet = np.concatenate([t.pet for t in batch])
            ct = np.concatenate([t.ct for t in batch])
            mask = np.concatenate([t.mask for t in batch])
            params.zero_grad()
            logits, _ = M.forward_graph(params, pet, ct)
            loss = T.softmax_cross_entropy(logits, mask)
            lv = float(loss.data)
            if not np.isfinite(lv):
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {start // train_config.batch_size}")
            loss.backward()
            adam_step(
                params,
                {n: p.grad for n, p in params.items()},
                state,
                lr=train_config.lr,
                beta1=train_config.beta1,
                beta2=train_config.beta2,
                eps=train_config.eps,
            )
            npix = mask.size
            epoch_loss += lv * npix
            npix_total += npix
        loss_log.append((epoch, epoch_loss / npix_total))
        if train_config.checkpoint_every and (epoch + 1) % train_config.checkpoint_every == 0:
            M.save_checkpoint(out_dir / f"{run_label}_epoch{epoch + 1}.ckpt", params, meta, state)

    M.save_checkpoint(ckpt_path, params, meta, state)
    with open(loss_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "mean_loss"])
        for epoch, lv in loss_log:
            writer.writerow([epoch, f"{lv:.9f}"])
    return TrainResult(ckpt_path, loss_log, params, stats)


def resume(checkpoint_path):
    """Load params + optimizer state; save -> resume -> forward is bitwise
    identical to never having saved."""
    params, meta, state = M.load_checkpoint(checkpoint_path)
    if state is None:
        state = init_adam_state(params)
    return params, meta, state
