"""Command-line entry point.

Subcommands: gen-data, train, eval, xval, grad-check.  Experiments are
driven by a strict JSON config file; command-line flags override file
values.  Exit codes: 0 success, 1 check or metric failure, 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import data as D
from . import evaluation as E
from . import gradcheck as G
from . import model as M
from . import train as TR

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2


class CliError(Exception):
    def __init__(self, message, code=EXIT_USAGE):
        super().__init__(message)
        self.code = code


_CONFIG_SECTIONS = {
    "model": {f.name for f in fields(M.ModelConfig)},
    "training": {f.name for f in fields(TR.TrainConfig)},
    "data": {"path", "phantom"},
    "evaluation": {"pooling", "report_dir"},
}
_PHANTOM_KEYS = {f.name for f in fields(D.PhantomSpec)}


def load_config_file(path):
    """Strict JSON config: unknown sections or keys are rejected."""
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CliError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise CliError(f"config file {path}: invalid JSON ({e})")
    if not isinstance(raw, dict):
        raise CliError(f"config file {path}: top level must be an object")
    for section, content in raw.items():
        if section not in _CONFIG_SECTIONS:
            raise CliError(f"config file {path}: unknown section {section!r}")
        if not isinstance(content, dict):
            raise CliError(f"config file {path}: section {section!r} must be an object")
        unknown = set(content) - _CONFIG_SECTIONS[section]
        if unknown:
            raise CliError(f"config file {path}: unknown keys in {section!r}: {sorted(unknown)}")
    phantom = raw.get("data", {}).get("phantom")
    if phantom is not None:
        unknown = set(phantom) - _PHANTOM_KEYS
        if unknown:
            raise CliError(f"config file {path}: unknown phantom keys: {sorted(unknown)}")
    return raw


def _merged(section, file_config, overrides):
    out = dict(file_config.get(section, {}))
    for key, value in overrides.items():
        if value is not None:
            out[key] = value
    return out


def _model_config(file_config, args):
    opts = _merged("model", file_config, {
        "backbone_input": getattr(args, "backbone_input", None),
        "msam_input": getattr(args, "msam_input", None),
        "depth": getattr(args, "depth", None),
        "base_width": getattr(args, "base_width", None),
    })
    if "input_size" in opts:
        opts["input_size"] = tuple(opts["input_size"])
    try:
        return M.ModelConfig(**opts)
    except (TypeError, M.ConfigError) as e:
        raise CliError(f"invalid model configuration: {e}")


def _train_config(file_config, args):
    opts = _merged("training", file_config, {
        "epochs": getattr(args, "epochs", None),
        "batch_size": getattr(args, "batch_size", None),
        "seed": getattr(args, "seed", None),
        "augment": getattr(args, "augment", None),
    })
    try:
        return TR.TrainConfig(**opts)
    except (TypeError, TR.TrainingError) as e:
        raise CliError(f"invalid training configuration: {e}")


def _phantom_spec(file_config, args):
    opts = dict(file_config.get("data", {}).get("phantom", {}))
    for key in ("patients", "seed"):
        value = getattr(args, key, None)
        if value is not None:
            opts[key] = value
    for key in ("slices_per_patient", "size", "tumors_per_slice", "benign_hotspots_per_slice"):
        if key in opts:
            opts[key] = tuple(opts[key])
    try:
        return D.PhantomSpec(**opts)
    except (TypeError, ValueError) as e:
        raise CliError(f"invalid phantom spec: {e}")


def _load_data(args, file_config):
    path = getattr(args, "data", None) or file_config.get("data", {}).get("path")
    if not path:
        raise CliError("no dataset: pass --data DIR or set data.path in the config file")
    try:
        return D.load_dataset(path)
    except D.DatasetError as e:
        raise CliError(str(e))


def _resolve_fold(dataset, args):
    k = args.k
    if k > len(dataset):
        raise CliError(f"k={k} exceeds patient count {len(dataset)}")
    folds = D.make_folds(sorted(dataset), k=k, seed=args.split_seed)
    if not 0 <= args.fold < k:
        raise CliError(f"--fold must be in 0..{k - 1}")
    return folds[args.fold]


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args):
    file_config = load_config_file(args.config) if args.config else {}
    spec = _phantom_spec(file_config, args)
    manifest = D.generate_phantoms(spec, args.out)
    n_slices = len(json.loads(Path(manifest).read_text())["slices"])
    print(f"wrote {manifest} ({spec.patients} patients, {n_slices} slices, seed {spec.seed})")
    return EXIT_OK


def cmd_train(args):
    file_config = load_config_file(args.config) if args.config else {}
    model_config = _model_config(file_config, args)
    train_config = _train_config(file_config, args)
    dataset = _load_data(args, file_config)
    fold = _resolve_fold(dataset, args)
    extra = {"split": {"k": args.k, "seed": args.split_seed, "fold": args.fold}}
    try:
        result = TR.train(model_config, train_config, dataset, fold, args.out,
                          run_label=args.label, extra_meta=extra)
    except TR.TrainingError as e:
        raise CliError(str(e), EXIT_FAIL)
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"final mean loss: {result.loss_log[-1][1]:.6f}")
    return EXIT_OK


def cmd_eval(args):
    file_config = load_config_file(args.config) if args.config else {}
    dataset = _load_data(args, file_config)
    try:
        params, meta, _ = M.load_checkpoint(args.checkpoint)
    except M.CheckpointError as e:
        raise CliError(str(e))
    stats = {
        m: D.NormalizationStats(m, *meta["stats"][m]) for m in ("pet", "ct")
    }
    test_ids = meta.get("test_ids")
    if not test_ids:
        raise CliError(f"{args.checkpoint}: no test fold recorded")
    missing = [pid for pid in test_ids if pid not in dataset]
    if missing:
        raise CliError(f"dataset lacks test patients from checkpoint: {missing}")
    test = [t for pid in test_ids for t in dataset[pid]]
    pooling = args.pooling or file_config.get("evaluation", {}).get("pooling", "slice")
    metrics, details = E.evaluate(params, test, stats, pooling=pooling)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = {"checkpoint": str(args.checkpoint), "pooling": pooling, "metrics": metrics}
    (out_dir / "eval.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    for name in E.METRIC_NAMES:
        print(f"{name}: {metrics[name]:.4f}")
    if args.export_attention:
        if not params.config.msam_enabled:
            print("no attention to export: attention subnetwork disabled in this checkpoint")
        else:
            _export_maps(params, test, stats, Path(args.export_attention))
    return EXIT_OK


def _export_maps(params, triplets, stats, export_dir):
    export_dir.mkdir(parents=True, exist_ok=True)
    for t in triplets:
        pet = D.normalize(t.pet, stats["pet"])
        ct = D.normalize(t.ct, stats["ct"])
        probs, attn = M.model_forward(params, pet, ct)
        base = f"{t.patient_id}_{t.slice_index:03d}"
        E.export_attention(attn, export_dir / f"{base}_attention.pgm")
        E.export_mask(M.predict_mask(probs), export_dir / f"{base}_pred.pgm")
    print(f"exported {2 * len(triplets)} images to {export_dir}")


def _matrix_configs(args, file_config):
    model_opts = _merged("model", file_config, {
        "depth": getattr(args, "depth", None),
        "base_width": getattr(args, "base_width", None),
    })
    depth = model_opts.get("depth", 3)
    width = model_opts.get("base_width", 16)
    size = tuple(model_opts.get("input_size", (64, 64)))
    if args.matrix == "table1":
        return E.table1_configs(depth=depth, base_width=width, input_size=size)
    return [("single", _model_config(file_config, args))]


def cmd_xval(args):
    file_config = load_config_file(args.config) if args.config else {}
    train_config = _train_config(file_config, args)
    dataset = _load_data(args, file_config)
    configs = _matrix_configs(args, file_config)
    pooling = args.pooling or file_config.get("evaluation", {}).get("pooling", "slice")
    seeds = args.seeds if args.seeds else [train_config.seed]
    out_root = Path(args.out)
    per_seed = {}
    started = time.time()

    def progress(outcome):
        elapsed = time.time() - started
        print(f"[{elapsed:8.1f}s] {outcome.config_label} fold {outcome.fold} "
              f"dsc={outcome.metrics['dsc']:.4f}", flush=True)

    for seed in seeds:
        sub = out_root / f"seed{seed}" if len(seeds) > 1 else out_root
        outcomes = E.cross_validate(configs, train_config, dataset, k=args.k, seed=seed,
                                    out_dir=sub, pooling=pooling,
                                    progress=progress if args.verbose else None,
                                    workers=args.workers)
        per_seed[seed] = E.write_report(sub, outcomes,
                                        meta={"k": args.k, "seed": seed, "pooling": pooling,
                                              "epochs": train_config.epochs})
    labels = [label for label, _ in configs]
    aggregate = {
        label: {m: float(np.mean([per_seed[s][label][m] for s in seeds]))
                for m in E.METRIC_NAMES}
        for label in labels
    }
    (out_root / "matrix_summary.json").write_text(json.dumps(
        {"seeds": seeds, "k": args.k, "aggregate": aggregate}, indent=1, sort_keys=True) + "\n")
    width = max(len(l) for l in labels)
    print(f"{'config'.ljust(width)}  PREC   SENS   SPEC   DSC")
    for label in labels:
        a = aggregate[label]
        print(f"{label.ljust(width)}  {a['precision']:.4f} {a['sensitivity']:.4f} "
              f"{a['specificity']:.4f} {a['dsc']:.4f}")
    return EXIT_OK


def cmd_grad_check(args):
    ops = args.ops.split(",") if args.ops else None
    try:
        reports = G.check_all_ops(trials=args.trials, tolerance=args.tolerance,
                                  seed=args.seed, ops=ops)
    except KeyError as e:
        raise CliError(str(e))
    if ops is None:
        reports.append(G.check_model(tolerance=args.tolerance, seed=args.seed))
    failures = []
    for r in reports:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.op:24s} max_rel_error={r.max_rel_error:.3e} tolerance={r.tolerance:g}")
        if not r.passed:
            failures.append(r.op)
    if failures:
        print(f"gradient check failed for: {', '.join(failures)}")
        return EXIT_FAIL
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing

def _add_shared(p):
    p.add_argument("--config", help="JSON experiment config file")
    p.add_argument("--seed", type=int, default=None, help="master seed (default 0)")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="msamseg",
        description="PET-driven attention-gated tumor segmentation on synthetic phantoms",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a phantom dataset")
    _add_shared(p)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--patients", type=int, default=None, help="number of patients (default 50)")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train one configuration on one fold")
    _add_shared(p)
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--out", required=True, help="output directory for checkpoint and loss log")
    p.add_argument("--label", default="run", help="run label prefix for outputs (default run)")
    p.add_argument("--backbone-input", choices=M.BACKBONE_INPUTS, default=None,
                   help="backbone modality (default ct)")
    p.add_argument("--msam-input", choices=M.MSAM_INPUTS, default=None,
                   help="attention subnetwork modality (default pet)")
    p.add_argument("--depth", type=int, default=None, help="downsampling levels (default 3)")
    p.add_argument("--base-width", type=int, default=None, help="first-stage channels (default 16)")
    p.add_argument("--epochs", type=int, default=None, help="training epochs (default 60)")
    p.add_argument("--batch-size", type=int, default=None, help="minibatch size (default 4)")
    p.add_argument("--no-augment", dest="augment", action="store_false", default=None,
                   help="disable flip/rotation augmentation")
    p.add_argument("--k", type=int, default=5, help="fold count (default 5)")
    p.add_argument("--fold", type=int, default=0, help="fold index to train (default 0)")
    p.add_argument("--split-seed", type=int, default=0, help="fold split seed (default 0)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on its recorded test fold")
    _add_shared(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--out", required=True, help="directory for eval.json")
    p.add_argument("--pooling", choices=["slice", "pixel"], default=None,
                   help="metric pooling (default slice)")
    p.add_argument("--export-attention", metavar="DIR", default=None,
                   help="export attention maps and predicted masks as PGM")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("xval", help="cross-validate one or all input configurations")
    _add_shared(p)
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--out", required=True, help="report/checkpoint directory")
    p.add_argument("--matrix", choices=["single", "table1"], default="single",
                   help="single config or the full input-configuration matrix (default single)")
    p.add_argument("--seeds", type=int, nargs="+", default=None,
                   help="master seeds; results averaged (default: training seed)")
    p.add_argument("--k", type=int, default=5, help="fold count (default 5)")
    p.add_argument("--epochs", type=int, default=None, help="training epochs (default 60)")
    p.add_argument("--batch-size", type=int, default=None, help="minibatch size (default 4)")
    p.add_argument("--backbone-input", choices=M.BACKBONE_INPUTS, default=None)
    p.add_argument("--msam-input", choices=M.MSAM_INPUTS, default=None)
    p.add_argument("--depth", type=int, default=None)
    p.add_argument("--base-width", type=int, default=None)
    p.add_argument("--pooling", choices=["slice", "pixel"], default=None)
    p.add_argument("--workers", type=int, default=None,
                   help="parallel fold workers (default: MSAMSEG_THREADS, 0 = auto)")
    p.add_argument("--verbose", action="store_true", help="print per-fold progress")
    p.set_defaults(fn=cmd_xval)

    p = sub.add_parser("grad-check", help="finite-difference gradient verification")
    p.add_argument("--tolerance", type=float, default=G.DEFAULT_TOLERANCE,
                   help=f"max relative error (default {G.DEFAULT_TOLERANCE:g})")
    p.add_argument("--trials", type=int, default=10, help="random trials per op (default 10)")
    p.add_argument("--ops", default=None, help="comma-separated op subset (default: all + model)")
    p.add_argument("--seed", type=int, default=0, help="trial seed (default 0)")
    p.set_defaults(fn=cmd_grad_check)

    return parser


def _resolve_workers(args):
    if getattr(args, "workers", None) is None:
        env = os.environ.get("MSAMSEG_THREADS", "1")
        try:
            args.workers = int(env)
        except ValueError:
            raise CliError(f"MSAMSEG_THREADS must be an integer, got {env!r}")
    if args.workers == 0:
        args.workers = os.cpu_count() or 1
    if args.workers < 0:
        raise CliError("worker count must be >= 0")


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if hasattr(args, "workers"):
            _resolve_workers(args)
        return args.fn(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (D.DatasetError, M.CheckpointError, E.EvaluationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
