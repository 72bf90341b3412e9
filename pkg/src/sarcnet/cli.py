"""Command-line pipeline: generate, extract, train, evaluate, score,
explain, report.

All figures and tables are written to files; exit codes are 0 (success),
2 (usage/config error), 3 (I/O error), 4 (numeric failure).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import features as feat
from .autodiff import Tensor
from .data import SplitSpec, ensure_features, load_manifest, split, write_manifest
from .errors import CheckpointError, ConfigError, DataIOError, \
    DegenerateInputError, DimensionError, ManifestError, NumericError, \
    OptimizerError
from .explain import gradcam, overlay, write_heatmap
from .imageops import load_image, load_label_map, load_mask, resize_bilinear, \
    to_model_input
from .model import SarcNetConfig, load_checkpoint, sarcnet_forward, \
    save_checkpoint
from .report import load_eval_csv, report_from_rows, write_report_files
from .synth import SyntheticSpec, generate_synthetic
from .training import TrainConfig, evaluate, scaler_from_params, train, \
    write_train_log

log = logging.getLogger("sarcnet")


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=None,
                        help="seed for splits/shuffling/initialization")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker threads for feature extraction")
    parser.add_argument("--reproducible", action="store_true",
                        help="force single-threaded deterministic execution")
    parser.add_argument("--out", type=Path, default=None,
                        help="output directory")
    parser.add_argument("--protocol", choices=("p1", "p2"), default=None,
                        help="feature protocol (default: p2, or the "
                             "checkpoint's protocol)")
    parser.add_argument("--config", type=Path, default=None,
                        help="JSON config file (keys documented in README)")


def _load_config_file(path: Path | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise DataIOError(f"cannot read config {path}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"bad JSON in config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return cfg


def _effective_threads(args) -> int:
    if args.reproducible and args.threads != 1:
        log.info("reproducible mode: forcing --threads 1")
        return 1
    if args.threads > 1:
        log.warning("parallel mode: 32-bit reduction order may perturb "
                    "last-digit results; use --reproducible for byte-stable runs")
    return max(1, args.threads)


def _require_out(args) -> Path:
    if args.out is None:
        raise ConfigError("--out is required for this command")
    return args.out


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(args) -> int:
    out = _require_out(args)
    spec_kwargs = _load_config_file(args.spec)
    if "cell_axes_frac" in spec_kwargs:
        spec_kwargs["cell_axes_frac"] = tuple(spec_kwargs["cell_axes_frac"])
    if args.seed is not None:
        spec_kwargs["seed"] = args.seed
    try:
        spec = SyntheticSpec(**spec_kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad generation spec: {exc}") from exc
    if out.exists() and any(out.iterdir()) and not args.force:
        raise DataIOError(
            f"output directory {out} exists and is not empty "
            "(pass --force to overwrite)"
        )
    records = generate_synthetic(spec, out)
    log.info("generated %d cells into %s", len(records), out)
    print(f"generated {len(records)} cells -> {out / 'manifest.csv'}")
    return 0


def cmd_extract(args) -> int:
    out = _require_out(args)
    protocol = args.protocol or "p2"
    records = load_manifest(args.manifest)
    ensure_features(records, protocol, _effective_threads(args))
    out.mkdir(parents=True, exist_ok=True)
    columns = feat.protocol_columns(protocol)
    features_csv = out / "features.csv"
    with open(features_csv, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cell_id", "protocol", *columns])
        for r in records:
            writer.writerow([r.cell_id, protocol,
                             *(repr(float(r.features[c])) for c in columns)])
    augmented = out / "manifest_features.csv"
    write_manifest(records, augmented, feature_columns=columns)
    print(f"extracted {protocol} features for {len(records)} cells -> "
          f"{features_csv}")
    return 0


def _model_config_from(cfg_file: dict, protocol: str, seed: int,
                       scaled: bool) -> SarcNetConfig:
    kwargs = {"feature_dim": {"p1": 5, "p2": 11}[protocol], "seed": seed}
    if scaled:
        kwargs.update(input_size=64, stage_widths=(8, 16, 32, 64))
    for key in ("input_size", "stage_widths", "embed_dim", "head_widths"):
        if key in cfg_file:
            value = cfg_file[key]
            kwargs[key] = tuple(value) if isinstance(value, list) else value
    return SarcNetConfig(**kwargs)


def cmd_train(args) -> int:
    out = _require_out(args)
    cfg_file = _load_config_file(args.config)
    protocol = args.protocol or cfg_file.get("protocol", "p2")
    seed = args.seed if args.seed is not None else cfg_file.get("seed", 0)
    threads = _effective_threads(args)
    model_cfg = _model_config_from(cfg_file, protocol, seed, args.scaled)
    tcfg = TrainConfig(
        lr=args.lr if args.lr is not None else cfg_file.get("lr", 5e-4),
        batch_size=args.batch_size if args.batch_size is not None
        else cfg_file.get("batch_size", 40),
        epochs=args.epochs if args.epochs is not None
        else cfg_file.get("epochs", 100),
        protocol=protocol, model=model_cfg, seed=seed,
        checkpoint_dir=out, threads=threads,
    )
    records = load_manifest(args.manifest)
    split_spec = SplitSpec(seed=seed, stratify=args.stratify)
    train_recs, val_recs, test_recs = split(records, split_spec)
    log.info("split %d records into %d/%d/%d", len(records),
             len(train_recs), len(val_recs), len(test_recs))
    out.mkdir(parents=True, exist_ok=True)
    params, logs, scaler = train(train_recs, val_recs, tcfg)
    params.meta.update({"split_seed": seed, "stratify": args.stratify})
    save_checkpoint(params, out / "best.ckpt")
    write_train_log(logs, out / "train_log.csv")
    best = params.meta.get("best_epoch")
    spear = params.meta.get("val_spearman")
    if spear is not None:
        print(f"trained {tcfg.epochs} epochs; best epoch {best} "
              f"(val spearman {spear:.4f})")
    else:
        print(f"trained {tcfg.epochs} epochs; no defined validation spearman")
    print(f"checkpoint -> {out / 'best.ckpt'}")
    return 0


def _split_records_for_eval(args, records, params):
    choice = args.split
    if choice == "all":
        return records
    seed = args.seed if args.seed is not None \
        else params.meta.get("split_seed", 0)
    stratify = args.stratify or bool(params.meta.get("stratify", False))
    train_recs, val_recs, test_recs = split(records,
                                            SplitSpec(seed=seed,
                                                      stratify=stratify))
    return {"train": train_recs, "val": val_recs, "test": test_recs}[choice]


def _check_protocol(args, params) -> None:
    if args.protocol is not None and args.protocol != params.config.protocol:
        raise ConfigError(
            f"requested protocol {args.protocol} but checkpoint was trained "
            f"with {params.config.protocol}"
        )


def cmd_evaluate(args) -> int:
    out = _require_out(args)
    params = load_checkpoint(args.checkpoint)
    _check_protocol(args, params)
    scaler = scaler_from_params(params)
    records = load_manifest(args.manifest)
    subset = _split_records_for_eval(args, records, params)
    report = evaluate(params, subset, scaler, threads=_effective_threads(args))
    paths = write_report_files(report, out)
    spear = report.metrics.get("spearman")
    print(f"evaluated {len(subset)} cells (split={args.split}); spearman="
          f"{'nan' if spear is None else f'{spear:.4f}'} "
          f"mae={report.metrics['mae']:.4f}")
    print(f"report -> {paths['summary']}")
    return 0


def cmd_score(args) -> int:
    params = load_checkpoint(args.checkpoint)
    _check_protocol(args, params)
    scaler = scaler_from_params(params)
    protocol = params.config.protocol
    img = load_image(args.image)
    mask = load_mask(args.mask)
    classmap = None
    if protocol == "p2":
        if args.classmap is None:
            raise ConfigError("checkpoint uses protocol p2; --classmap required")
        classmap = load_label_map(args.classmap)
    vector = feat.extract_features(img, mask, protocol, classmap)
    scaled = feat.apply_scaler(vector, scaler)
    size = params.config.input_size
    x = to_model_input(resize_bilinear(img, size, size))
    fv = Tensor(scaled.values[None].astype(np.float32))
    raw = float(sarcnet_forward(Tensor(x.data[None]), fv, params,
                                mode="eval").data[0, 0])
    display = float(np.clip(raw, 1.0, 5.0))
    print(f"{raw:.4f} clamped={display:.4f}")
    return 0


def cmd_explain(args) -> int:
    out = _require_out(args)
    params = load_checkpoint(args.checkpoint)
    _check_protocol(args, params)
    scaler = scaler_from_params(params)
    records = load_manifest(args.manifest)
    if args.cells:
        wanted = set(args.cells.split(","))
        chosen = [r for r in records if r.cell_id in wanted]
        missing = wanted - {r.cell_id for r in chosen}
        if missing:
            raise ConfigError(f"cells not in manifest: {sorted(missing)}")
    else:
        subset = _split_records_for_eval(args, records, params)
        chosen = subset[:args.first]
    if not chosen:
        raise ConfigError("no cells selected to explain")
    ensure_features(chosen, scaler.protocol, _effective_threads(args))
    out.mkdir(parents=True, exist_ok=True)
    size = params.config.input_size
    columns = feat.protocol_columns(scaler.protocol)
    for r in chosen:
        img = load_image(r.image_path)
        resized = resize_bilinear(img, size, size)
        x = to_model_input(resized)
        raw_vec = feat.FeatureVector(
            scaler.protocol, np.asarray([r.features[c] for c in columns]))
        fv = Tensor(feat.apply_scaler(raw_vec, scaler).values[None]
                    .astype(np.float32))
        heatmap = gradcam(params, x, fv)
        overlay(resized, heatmap, out / f"overlay_{r.cell_id}.png")
        if args.dump_raw:
            write_heatmap(heatmap, out / f"heatmap_{r.cell_id}.hmap")
    print(f"wrote {len(chosen)} overlays -> {out}")
    return 0


def cmd_report(args) -> int:
    out = _require_out(args)
    rows = load_eval_csv(args.eval_csv)
    report = report_from_rows(rows)
    paths = write_report_files(report, out)
    days = sorted(report.histograms)
    print(f"report over {len(rows)} cells, days {days} -> {paths['summary']}")
    return 0


# ---------------------------------------------------------------------------
# parser / entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sarcnet",
        description="Quantify sarcomere structural organization in "
                    "single-cell cardiomyocyte images.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="render a synthetic dataset")
    _add_common(p)
    p.add_argument("--spec", type=Path, default=None,
                   help="JSON generation spec (see README)")
    p.add_argument("--force", action="store_true",
                   help="allow writing into a non-empty directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("extract", help="compute classical features")
    _add_common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="train the fusion model")
    _add_common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--scaled", action="store_true",
                   help="use the small 64px configuration")
    p.add_argument("--stratify", action="store_true",
                   help="stratify the split by rounded score")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a split and write the report")
    _add_common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", choices=("train", "val", "test", "all"),
                   default="test")
    p.add_argument("--stratify", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("score", help="score a single cell")
    _add_common(p)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--mask", type=Path, required=True)
    p.add_argument("--classmap", type=Path, default=None)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("explain", help="write saliency overlays")
    _add_common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--cells", type=str, default=None,
                   help="comma-separated cell ids")
    p.add_argument("--first", type=int, default=8,
                   help="explain the first N cells of --split when "
                        "--cells is absent")
    p.add_argument("--split", choices=("train", "val", "test", "all"),
                   default="test")
    p.add_argument("--stratify", action="store_true")
    p.add_argument("--dump-raw", action="store_true",
                   help="also dump raw heatmaps (.hmap)")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("report", help="figures + summary from an eval CSV")
    _add_common(p)
    p.add_argument("--eval-csv", type=Path, required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=logging.INFO, stream=sys.stderr,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ManifestError, DimensionError,
            DegenerateInputError) as exc:
        log.error("%s", exc)
        return 2
    except (DataIOError, CheckpointError, OSError) as exc:
        log.error("%s", exc)
        return 3
    except (NumericError, OptimizerError) as exc:
        log.error("%s", exc)
        return 4


if __name__ == "__main__":
    sys.exit(main())
