"""Command-line entry point: ``mtbirads {synth,train,eval,explain}``.

Exit codes: 0 ok, 1 other failure, 2 unwritable output path or bad usage,
3 malformed labels.csv, 4 checkpoint/config mismatch, 5 exact explanation
requested for too many players.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from collections import Counter
from dataclasses import asdict
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from . import config as C
from . import explain as X
from . import io
from . import model as M
from . import synthdata
from . import trainer as T
from .lexicon import DESCRIPTORS, FEATURE_DIM, TUMOR_CLASSES
from .losses import evaluate_predictions

log = logging.getLogger("mtbirads")

EXIT_OK, EXIT_FAIL, EXIT_PATH, EXIT_LABELS, EXIT_CHECKPOINT, EXIT_TOO_MANY = 0, 1, 2, 3, 4, 5
LOG_LEVELS = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def setup_logging() -> None:
    name = os.environ.get("MTBR_LOG", "info").strip().lower()
    level = LOG_LEVELS.get(name, logging.INFO)
    root = logging.getLogger("mtbirads")
    root.handlers.clear()
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root.addHandler(handler)
    root.setLevel(level)
    root.propagate = False
    if name not in LOG_LEVELS:
        log.warning("MTBR_LOG=%r not recognised; using info", name)


# ---------------------------------------------------------------------------
# helpers


def writable_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise CliError(EXIT_PATH, f"cannot write to {out}: {exc.strerror or exc}") from None
    return out


def write_json(path: Path, obj: Any) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def resolve_config(args, extra: Dict[str, Any]) -> tuple:
    """(RunConfig, the flat keys the user set explicitly)."""
    flat = C.load_flat(args.config)
    flat.update(C.parse_assignments(args.set or []))
    flat.update({k: v for k, v in extra.items() if v is not None})
    if args.seed is not None:
        flat["seed"] = args.seed
    return C.from_flat(flat), flat


def read_dataset(directory: str, model_cfg: M.ModelConfig, data: C.DataOptions):
    try:
        return io.load_dataset(directory, model_cfg.input_size, data.crop, data.single_channel)
    except io.DatasetError as exc:
        raise CliError(EXIT_LABELS, str(exc)) from None
    except OSError as exc:
        raise CliError(EXIT_FAIL, f"cannot read dataset {directory}: {exc}") from None


def checkpoint_config(path: str, explicit: Dict[str, Any]):
    """Load a checkpoint and reconcile it with explicitly given model/data keys."""
    try:
        params, stored, seed, extra = io.load_checkpoint(path)
    except FileNotFoundError:
        raise CliError(EXIT_FAIL, f"checkpoint {path} not found") from None
    except (io.CheckpointError, KeyError, ValueError) as exc:
        raise CliError(EXIT_CHECKPOINT, f"bad checkpoint: {exc}") from None
    stored_flat = C.flatten(stored)
    for key, value in explicit.items():
        if key.startswith(("model.", "data.")) and key in stored_flat and stored_flat[key] != value:
            raise CliError(EXIT_CHECKPOINT,
                           f"config sets {key}={value!r} but the checkpoint was trained with {stored_flat[key]!r}")
    try:
        model_cfg = M.ModelConfig(**stored["model"])
        data = C.DataOptions(**stored.get("data", {}))
        M.check_params(params, model_cfg)
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(EXIT_CHECKPOINT, f"checkpoint does not match its config: {exc}") from None
    return params, model_cfg, data, seed, extra


def sample_record(name: str, features: np.ndarray, tumor: np.ndarray) -> dict:
    per_head = M.split_feature_vector(features)
    return {
        "name": name,
        "descriptor_probs": {d: [float(p) for p in per_head[d]] for d in DESCRIPTORS},
        "tumor_probs": {c: float(p) for c, p in zip(TUMOR_CLASSES, tumor)},
    }


def mask_pgm(probs: np.ndarray) -> np.ndarray:
    return np.where(probs > 0.5, 255, 0).astype(np.uint8)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    cfg, _ = resolve_config(args, {
        "synth.n_samples": args.n, "synth.malignant_frac": args.malignant_frac, "synth.image_size": args.size,
    })
    out = writable_dir(args.out)
    cases = synthdata.generate_raw(cfg.synth)
    rows = []
    for case in cases:
        io.write_pgm(out / f"{case.name}.pgm", case.gray)
        io.write_pgm(out / f"{case.name}_mask.pgm", case.mask * 255)
        rows.append(io.labels_row(case.name, case.tumor, case.labels))
    io.write_labels(out / "labels.csv", rows)
    counts = Counter(TUMOR_CLASSES[c.tumor] for c in cases)
    summary = {"n_samples": len(cases), "tumor_class": {k: counts.get(k, 0) for k in TUMOR_CLASSES}}
    for d in DESCRIPTORS:
        summary[d] = dict(sorted(Counter(str(getattr(c.labels, d)) for c in cases).items()))
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_train(args) -> int:
    overrides = {
        "folds": args.folds, "train.max_epochs": args.max_epochs, "model.base_channels": args.base_channels,
        "model.blocks": args.blocks, "train.workers": args.workers,
    }
    if args.no_augment:
        overrides["train.augment"] = False
    if args.single_channel:
        overrides["data.single_channel"] = True
    if args.no_crop:
        overrides["data.crop"] = False
    cfg, _ = resolve_config(args, overrides)
    if cfg.folds < 1:
        raise CliError(EXIT_FAIL, "folds must be at least 1")
    out = writable_dir(args.out)
    samples = read_dataset(args.data, cfg.model, cfg.data)
    log.info("training on %d samples, %d fold(s), ablations %s", len(samples), cfg.folds, cfg.ablations())

    logs: Dict[int, List[dict]] = {}
    results, aggregate = T.run_cv(samples, cfg.folds, cfg.model, cfg.train, cfg.loss,
                                  on_epoch=lambda f, rec: logs.setdefault(f, []).append(rec))
    stored = {k: v for k, v in asdict(cfg).items() if k in ("model", "train", "loss", "data")}
    for r in results:
        fold_dir = out / f"fold{r.fold}"
        fold_dir.mkdir(exist_ok=True)
        train_idx = r.split[0]
        feats = M.predict(r.state.params, np.stack([samples[i].image for i in train_idx]), cfg.model)["features"]
        extra = {
            "fold": r.fold,
            "best_epoch": r.state.best_epoch,
            "baseline": [float(b) for b in X.baseline_from_reference(feats)],
            "split": {k: [samples[i].name for i in idx] for k, idx in zip(("train", "val", "test"), r.split)},
        }
        io.save_checkpoint(fold_dir / "checkpoint.mtbr", r.state.params, stored, cfg.seed, extra)
        with open(fold_dir / "train_log.jsonl", "w") as fh:
            for rec in logs.get(r.fold, []):
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        write_json(fold_dir / "metrics.json", r.report.to_dict())
    summary = {
        "folds": len(results),
        "metrics": aggregate,
        "ablations": cfg.ablations(),
        "config": cfg.to_flat(),
    }
    write_json(out / "aggregate.json", summary)
    print(json.dumps({k: round(v["mean"], 4) for k, v in aggregate.items()}, indent=2))
    return EXIT_OK


def cmd_eval(args) -> int:
    explicit = C.load_flat(args.config)
    explicit.update(C.parse_assignments(args.set or []))
    params, model_cfg, data, _, _ = checkpoint_config(args.checkpoint, explicit)
    out = writable_dir(args.out)
    samples = read_dataset(args.data, model_cfg, data)
    if not samples:
        raise CliError(EXIT_FAIL, "dataset is empty")
    outputs = M.predict(params, np.stack([s.image for s in samples]), model_cfg)
    masks = out / "masks"
    masks.mkdir(exist_ok=True)
    records = []
    for i, s in enumerate(samples):
        io.write_pgm(masks / f"{s.name}_pred.pgm", mask_pgm(outputs["seg"][i]))
        records.append(sample_record(s.name, outputs["features"][i], outputs["tumor"][i]))
    report = evaluate_predictions(outputs, samples)
    write_json(out / "predictions.json", {"samples": records, "counts": report.counts})
    write_json(out / "metrics.json", report.to_dict())
    print(report.to_json())
    return EXIT_OK


def cmd_explain(args) -> int:
    explicit = C.load_flat(args.config)
    explicit.update(C.parse_assignments(args.set or []))
    mode = args.mode or explicit.get("explain.mode", "group")
    n_perms = args.n_perms or explicit.get("explain.n_perms", C.ExplainOptions().n_perms)
    try:
        C.ExplainOptions(mode, n_perms)
    except ValueError as exc:
        raise CliError(EXIT_FAIL, str(exc)) from None
    params, model_cfg, data, seed, extra = checkpoint_config(args.checkpoint, explicit)
    if mode == "class":
        d = FEATURE_DIM
        if d > X.MAX_EXACT_PLAYERS:
            raise CliError(EXIT_TOO_MANY,
                           f"exact class mode needs 2^{d} coalitions (limit {X.MAX_EXACT_PLAYERS} players); "
                           "use --mode group or --mode sampled")
    out = writable_dir(args.out)
    samples = read_dataset(args.data, model_cfg, data)
    by_name = {s.name: s for s in samples}
    if args.sample not in by_name:
        raise CliError(EXIT_FAIL, f"sample {args.sample!r} not found in {args.data}")
    sample = by_name[args.sample]
    if "baseline" in extra:
        baseline = np.asarray(extra["baseline"], dtype=np.float64)
    else:
        log.warning("checkpoint carries no baseline; using the mean over %s", args.data)
        feats = M.predict(params, np.stack([s.image for s in samples]), model_cfg)["features"]
        baseline = X.baseline_from_reference(feats)
    seed = args.seed if args.seed is not None else seed
    report = X.explain(params, model_cfg, sample.image, baseline, mode=mode, n_perms=n_perms, seed=seed,
                       sample_id=sample.name)
    gap = report.efficiency_gap()
    if gap > 1e-9:
        raise CliError(EXIT_FAIL, f"attribution efficiency check failed (gap {gap:.3e})")
    seg = M.predict(params, sample.image[None], model_cfg)["seg"][0]
    stem = out / sample.name
    io.write_pgm(f"{stem}_pred_mask.pgm", mask_pgm(seg))
    Path(f"{stem}_attribution.json").write_text(report.to_json() + "\n")
    text = X.render_text_bars(report)
    Path(f"{stem}_attribution.txt").write_text(text + "\n")
    Path(f"{stem}_attribution.svg").write_text(X.render_svg(report) + "\n")
    print(text)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of flat dotted keys")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--workers", type=int, help="gradient worker threads (1 = bit-reproducible)")

    parser = argparse.ArgumentParser(prog="mtbirads", description="Multi-task BI-RADS descriptor models")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic PGM dataset")
    p.add_argument("--n", type=int, help="number of samples")
    p.add_argument("--malignant-frac", type=float)
    p.add_argument("--size", type=int, help="image side in pixels")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="cross-validated training")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--folds", type=int, help="1 = single stratified hold-out split")
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--base-channels", type=int)
    p.add_argument("--blocks", type=int)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--single-channel", action="store_true")
    p.add_argument("--no-crop", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="metrics and predicted masks for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("explain", parents=[common], help="Shapley attribution for one sample")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--sample", required=True, help="sample name from labels.csv")
    p.add_argument("--mode", choices=C.EXPLAIN_MODES)
    p.add_argument("--n-perms", type=int)
    p.set_defaults(func=cmd_explain)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except C.ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (T.FoldError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
