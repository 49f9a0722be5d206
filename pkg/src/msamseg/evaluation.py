"""Pixel-wise segmentation metrics, cross-validated experiment runner, and
grayscale image export for attention maps and predicted masks."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data as D
from . import model as M
from . import train as TR
from .seeding import derive_seed
from .tensor import ShapeError


class EvaluationError(RuntimeError):
    """Raised when evaluation preconditions are violated."""


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int


def confusion(pred, gt):
    """Pixel counts with tumor as the positive class."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    p = pred.astype(bool)
    g = gt.astype(bool)
    return ConfusionCounts(
        tp=int((p & g).sum()),
        fp=int((p & ~g).sum()),
        tn=int((~p & ~g).sum()),
        fn=int((~p & g).sum()),
    )


def precision(c):
    return c.tp / (c.tp + c.fp) if c.tp + c.fp else (1.0 if c.fn == 0 else 0.0)


def sensitivity(c):
    return c.tp / (c.tp + c.fn) if c.tp + c.fn else 1.0


def specificity(c):
    return c.tn / (c.tn + c.fp) if c.tn + c.fp else 1.0


def dsc(c):
    """2*tp / (2*tp + fp + fn); both-empty masks score 1 by convention."""
    denom = 2 * c.tp + c.fp + c.fn
    return 2 * c.tp / denom if denom else 1.0


METRIC_NAMES = ("precision", "sensitivity", "specificity", "dsc")
_METRIC_FNS = {"precision": precision, "sensitivity": sensitivity,
               "specificity": specificity, "dsc": dsc}


def slice_metrics(counts):
    return {name: _METRIC_FNS[name](counts) for name in METRIC_NAMES}


def evaluate(params, test_triplets, stats, pooling="slice", batch_size=8):
    """Metrics of a trained model on test slices (no augmentation).

    pooling "slice": per-slice metrics averaged over slices (default);
    pooling "pixel": one confusion table pooled over all test pixels.
    Returns (metrics dict, per-slice detail list).
    """
    if pooling not in ("slice", "pixel"):
        raise EvaluationError(f"unknown pooling {pooling!r}")
    test_triplets = D.filter_tumor_slices(test_triplets)
    if not test_triplets:
        raise EvaluationError("no test slices with tumor pixels")
    details = []
    pooled = ConfusionCounts(0, 0, 0, 0)
    for start in range(0, len(test_triplets), batch_size):
        batch = test_triplets[start:start + batch_size]
        pet = np.concatenate([D.normalize(t.pet, stats["pet"]) for t in batch])
        ct = np.concatenate([D.normalize(t.ct, stats["ct"]) for t in batch])
        probs, _ = M.model_forward(params, pet, ct)
        pred = M.predict_mask(probs)
        for i, t in enumerate(batch):
            c = confusion(pred[i:i + 1], t.mask)
            details.append((t.patient_id, t.slice_index, c))
            pooled = ConfusionCounts(pooled.tp + c.tp, pooled.fp + c.fp,
                                     pooled.tn + c.tn, pooled.fn + c.fn)
    if pooling == "pixel":
        metrics = slice_metrics(pooled)
    else:
        per_slice = [slice_metrics(c) for _, _, c in details]
        metrics = {name: float(np.mean([m[name] for m in per_slice])) for name in METRIC_NAMES}
    return metrics, details


def evaluate_checkpoint(checkpoint_path, test_triplets, stats, pooling="slice"):
    """Evaluate a saved checkpoint, verifying the stats fingerprint recorded
    at training time matches the supplied statistics."""
    params, meta, _ = M.load_checkpoint(checkpoint_path)
    recorded = meta.get("stats_fingerprint")
    if recorded is not None and recorded != TR.stats_fingerprint(stats):
        raise EvaluationError(
            "normalization statistics do not match the checkpoint's training fold"
        )
    return evaluate(params, test_triplets, stats, pooling=pooling)


# ---------------------------------------------------------------------------
# configuration matrix

TABLE1_MATRIX = (
    ("unet_ct", "ct", "off"),
    ("unet_pet", "pet", "off"),
    ("unet_petct", "petct", "off"),
    ("unet_ct_msam_pet", "ct", "pet"),
    ("unet_pet_msam_pet", "pet", "pet"),
    ("unet_petct_msam_pet", "petct", "pet"),
    ("unet_ct_msam_petct", "ct", "petct"),
    ("unet_petct_msam_petct", "petct", "petct"),
)


def table1_configs(depth=3, base_width=16, input_size=(64, 64)):
    return [
        (label, M.ModelConfig(backbone_input=bb, msam_input=ms, depth=depth,
                              base_width=base_width, input_size=input_size))
        for label, bb, ms in TABLE1_MATRIX
    ]


@dataclass
class FoldOutcome:
    config_label: str
    fold: int
    metrics: dict
    checkpoint_path: Path


def _run_fold_job(job):
    """One (config, fold) training + evaluation; top level so worker
    processes can receive it."""
    label, config, train_config, dataset, fold, out_dir, seed, pooling = job
    run_label = f"{label}_fold{fold.fold}"
    tc = TR.TrainConfig(
        epochs=train_config.epochs,
        batch_size=train_config.batch_size,
        lr=train_config.lr,
        beta1=train_config.beta1,
        beta2=train_config.beta2,
        eps=train_config.eps,
        augment=train_config.augment,
        seed=derive_seed(seed, f"fold/{fold.fold}"),
        checkpoint_every=0,
    )
    result = TR.train(config, tc, dataset, fold, out_dir, run_label=run_label)
    test = [t for pid in fold.test_ids for t in dataset[pid]]
    metrics, _ = evaluate(result.params, test, result.stats, pooling=pooling)
    return FoldOutcome(label, fold.fold, metrics, result.checkpoint_path)


def cross_validate(configs, train_config, dataset, k=5, seed=0, out_dir="xval",
                   pooling="slice", progress=None, workers=1):
    """k-fold cross-validation over a list of (label, ModelConfig).

    One fold split (derived from `seed`) is shared by every configuration.
    Writes report.csv and summary.json under out_dir; returns the outcomes.
    workers > 1 distributes (config, fold) jobs across processes; outputs
    are identical to a sequential run.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    folds = D.make_folds(sorted(dataset), k=k, seed=seed)
    jobs = [
        (label, config, train_config, dataset, fold, out_dir, seed, pooling)
        for label, config in configs
        for fold in folds
    ]
    outcomes = []
    if workers > 1:
        import multiprocessing

        with multiprocessing.Pool(workers) as pool:
            for outcome in pool.imap(_run_fold_job, jobs):
                outcomes.append(outcome)
                if progress is not None:
                    progress(outcome)
    else:
        for job in jobs:
            outcomes.append(_run_fold_job(job))
            if progress is not None:
                progress(outcomes[-1])
    write_report(out_dir, outcomes, meta={"k": k, "seed": seed, "pooling": pooling,
                                          "epochs": train_config.epochs})
    return outcomes


def write_report(out_dir, outcomes, meta=None):
    """report.csv: one row per (config, fold); summary.json adds aggregates."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = sorted(outcomes, key=lambda o: (o.config_label, o.fold))
    with open(out_dir / "report.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["config", "fold"] + list(METRIC_NAMES))
        for o in rows:
            writer.writerow([o.config_label, o.fold] +
                            [f"{o.metrics[m]:.6f}" for m in METRIC_NAMES])
    labels = sorted({o.config_label for o in outcomes})
    aggregate = {}
    for label in labels:
        sel = [o.metrics for o in outcomes if o.config_label == label]
        aggregate[label] = {m: float(np.mean([s[m] for s in sel])) for m in METRIC_NAMES}
    summary = {"meta": meta or {}, "aggregate": aggregate}
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return aggregate


# ---------------------------------------------------------------------------
# image export

def write_pgm(path, values):
    """8-bit binary PGM (P5) from a uint8 2-d array."""
    values = np.asarray(values, np.uint8)
    h, w = values.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(values.tobytes())


def read_pgm(path):
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P5"):
        raise EvaluationError(f"{path}: not a binary PGM")
    parts = raw.split(b"\n", 3)
    w, h = (int(x) for x in parts[1].split())
    return np.frombuffer(parts[3][: h * w], np.uint8).reshape(h, w)


def export_attention(attn_map, path):
    """Min-max normalize one attention map to 0..255 (round half up) and
    write it as PGM; a constant map exports as all zeros."""
    a = np.asarray(attn_map, np.float64)
    if a.ndim == 4:
        a = a[0, 0]
    lo, hi = a.min(), a.max()
    if hi > lo:
        scaled = np.floor((a - lo) / (hi - lo) * 255.0 + 0.5)
    else:
        scaled = np.zeros_like(a)
    write_pgm(path, scaled.astype(np.uint8))


def export_mask(mask, path):
    m = np.asarray(mask)
    if m.ndim == 4:
        m = m[0, 0]
    write_pgm(path, (m > 0).astype(np.uint8) * 255)
