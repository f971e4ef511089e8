#!/usr/bin/env python3
"""hsiAdapt CLI: synthetic scenes, ingestion, experiment runs, feature export, reports.

Usage:
    python main.py gen-synth --out data/synth --seed 1
    python main.py ingest --header scene.hdr --labels scene_labels.csv --descriptor pavia
    python main.py run --config configs/fann_synth.json --seeds 1,2,3 --workers 3
    python main.py export-features --checkpoint runs/fann/seed_1/model --header data/synth/target.hdr \\
        --labels data/synth/target_labels.csv --layer FA-2 --out feats.csv
    python main.py report runs/fann
"""

import argparse
import json
import logging
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

from config import ENV_OUT_DIR, ENV_SEED, IDENTITY, apply_env, experiment_from_dict, load_experiment, validate_dataset
from core.cube import REFLECTANCE, SOURCE, TARGET
from core.cube_io import load_cube, load_labels, write_cube, write_labels, write_split
from core.descriptors import require_descriptor
from core.errors import ArgumentError, ConfigError, HsiError, ReportError, UnknownDatasetError
from core.patches import split_labels
from core.synth import synth_domain_pair
from experiment import export_features, run_experiment
from trainers.evaluation import format_oa
from utils.progress import create_progress_callback
from utils.reporting import render_report, write_features_csv, write_json

EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_REPORT = 3


def _parse_seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError("--seeds", f"expected comma-separated integers, got '{text}'")


def _read_experiment_dict(path: str) -> dict:
    config_path = Path(path)
    if not config_path.is_file():
        raise ConfigError("config", f"file not found: {config_path}")
    try:
        return json.loads(config_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError("config", f"invalid JSON: {e}") from e


def cmd_gen_synth(args):
    """Generate a synthetic source/target scene pair on disk."""
    cfg = experiment_from_dict(_read_experiment_dict(args.config) if args.config else {})
    cfg = apply_env(cfg)
    if args.identity:
        cfg.dataset.shift = IDENTITY
    validate_dataset(cfg.dataset)

    seed = args.seed if args.seed is not None else cfg.report.seeds[0]
    out_dir = Path(args.out or cfg.report.out_dir)
    pair = synth_domain_pair(cfg.dataset.synth_config(), seed)

    for side, (cube, labels) in ((SOURCE, pair.source), (TARGET, pair.target)):
        write_cube(cube, out_dir / f"{side}.hdr")
        write_labels(labels, out_dir / f"{side}_labels.csv")
    write_json(out_dir / "shift.json", pair.shift_metadata)

    meta = pair.shift_metadata
    src_cube, tgt_cube = pair.source[0], pair.target[0]
    print(f"Scene pair written to {out_dir}")
    print(f"  seed:    {seed}")
    print(f"  classes: {meta['n_classes']} ({meta['height']}x{meta['width']})")
    print(f"  source:  {src_cube.bands} bands, {src_cube.kind}")
    print(f"  target:  {tgt_cube.bands} bands, {tgt_cube.kind}")
    print(f"  shift:   gain {meta['gain']}, offset {meta['offset']}, "
          f"mixing {meta['mixing_concentration']}, snr {meta['noise_snr_db']} dB")


def cmd_ingest(args):
    """Validate a cube and its labels, then write a train/test split."""
    descriptor = require_descriptor(args.descriptor) if args.descriptor else None
    cube = load_cube(args.header, kind=descriptor.kind if descriptor else REFLECTANCE)
    labels = load_labels(args.labels)
    labels.check_matches(cube)
    if descriptor:
        descriptor.check_against(cube)

    split = split_labels(labels, args.per_class, args.seed)
    out = Path(args.out) if args.out else Path(args.labels).with_suffix(".split.json")
    write_split(split, out)

    counts = {c: int((labels.classes == c).sum()) for c in range(1, labels.n_classes + 1)}
    print(f"Cube: {cube.height}x{cube.width}, {cube.bands} bands "
          f"({cube.wavelengths_nm[0]:g}-{cube.wavelengths_nm[-1]:g} nm), {cube.kind}")
    print(f"Labeled pixels: {sum(counts.values())} in {labels.n_classes} classes")
    for c, n in counts.items():
        print(f"  {c:>3} {labels.class_names[c]:<24} {n}")
    print(f"Split ({len(split.train_indices)} train / {len(split.test_indices)} test) written to {out}")


def cmd_run(args):
    """Run an experiment config over all seeds."""
    cfg = load_experiment(args.config)
    if args.out:
        cfg.report.out_dir = args.out
    if args.seeds:
        cfg.report.seeds = _parse_seeds(args.seeds)
    if args.seed is not None:
        cfg.report.seeds = [args.seed]
    if not cfg.report.seeds:
        raise ConfigError("report.seeds", "must be nonempty")
    if args.workers < 1:
        raise ConfigError("--workers", f"must be >= 1, got {args.workers}")

    on_progress = create_progress_callback() if args.workers == 1 and not args.quiet else None
    metrics = run_experiment(cfg, workers=args.workers, on_progress=on_progress)

    print(f"\n{metrics['name']} ({metrics['mode']}) -> {cfg.out_dir}")
    oa = metrics["summary"]["overall_accuracy"]
    print(f"  OA: {oa['text'] if oa else 'n/a'}")
    baseline = metrics["summary"].get("baseline_overall_accuracy")
    if baseline:
        print(f"  source only OA: {baseline['text']}")
    for run in metrics["runs"]:
        if run["status"] == "ok":
            print(f"  seed {run['seed']}: {format_oa(run['overall_accuracy'])}")
        else:
            print(f"  seed {run['seed']}: failed ({run['error']})")

    if len(metrics["failed"]) == len(metrics["seeds"]):
        print("Error: every seed failed", file=sys.stderr)
        sys.exit(EXIT_RUNTIME)


def cmd_export_features(args):
    """Write per-pixel activations at one layer as CSV."""
    if args.domain not in (SOURCE, TARGET):
        raise ArgumentError(f"domain must be '{SOURCE}' or '{TARGET}', got '{args.domain}'")
    descriptor = require_descriptor(args.descriptor) if args.descriptor else None
    cube = load_cube(args.header, kind=descriptor.kind if descriptor else REFLECTANCE)
    if descriptor:
        descriptor.check_against(cube)
    labels = load_labels(args.labels)
    features, patches = export_features(Path(args.checkpoint), cube, labels, args.layer, args.domain)
    out = write_features_csv(args.out, features, patches.labels, args.domain)
    print(f"{features.shape[0]} x {features.shape[1]} features at '{args.layer}' written to {out}")


def cmd_report(args):
    """Render report.md and CSV tables for a run directory."""
    text = render_report(args.run_dir)
    print(text)


def main():
    parser = argparse.ArgumentParser(
        description="hsiAdapt - domain adaptation and label-efficient learning for hyperspectral images"
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    subparsers = parser.add_subparsers(dest="command", required=True)

    # === gen-synth command ===
    synth_parser = subparsers.add_parser("gen-synth", help="Generate a synthetic source/target scene pair")
    synth_parser.add_argument("--config", help="Experiment JSON (its dataset block is used)")
    synth_parser.add_argument("--out", help=f"Output directory (default: ${ENV_OUT_DIR} or report.out_dir)")
    synth_parser.add_argument("--seed", type=int, default=None,
                              help=f"Generator seed (default: ${ENV_SEED} or the first report seed)")
    synth_parser.add_argument("--identity", action="store_true",
                              help="Identity shift: same grid, no gain, offset, mixing or noise")
    synth_parser.set_defaults(func=cmd_gen_synth)

    # === ingest command ===
    ingest_parser = subparsers.add_parser("ingest", help="Validate a cube + labels and write a split")
    ingest_parser.add_argument("--header", required=True, help="ENVI-style header (.hdr)")
    ingest_parser.add_argument("--labels", required=True, help="Label CSV (row,col,class_id)")
    ingest_parser.add_argument("--descriptor", default=None,
                               help="Check against a known sensor (pavia, houston, aerial_wetland, street_wetland)")
    ingest_parser.add_argument("--per-class", type=int, default=5, help="Training pixels per class (default: 5)")
    ingest_parser.add_argument("--seed", type=int, default=0, help="Split seed (default: 0)")
    ingest_parser.add_argument("--out", help="Split JSON path (default: <labels>.split.json)")
    ingest_parser.set_defaults(func=cmd_ingest)

    # === run command ===
    run_parser = subparsers.add_parser("run", help="Run an experiment config")
    run_parser.add_argument("--config", required=True, help="Experiment JSON")
    run_parser.add_argument("--out", help="Output directory (overrides report.out_dir)")
    run_parser.add_argument("--seed", type=int, default=None, help="Run a single seed")
    run_parser.add_argument("--seeds", default=None, help="Comma-separated seeds, e.g. 1,2,3")
    run_parser.add_argument("--workers", type=int, default=1,
                            help="Parallel seed processes (default: 1)")
    run_parser.add_argument("--quiet", action="store_true", help="No progress bar")
    run_parser.set_defaults(func=cmd_run)

    # === export-features command ===
    export_parser = subparsers.add_parser("export-features", help="Export layer activations to CSV")
    export_parser.add_argument("--checkpoint", required=True, help="Model directory written by run")
    export_parser.add_argument("--header", required=True, help="Cube header of the scene to embed")
    export_parser.add_argument("--labels", required=True, help="Label CSV of the scene")
    export_parser.add_argument("--layer", required=True,
                               help="Layer id (input, conv1, recur1, fc1, ...) or FA-k / concatenated for FANN")
    export_parser.add_argument("--domain", default=TARGET, help="Domain tag and FANN branch (default: target)")
    export_parser.add_argument("--descriptor", default=None,
                               help="Known sensor of the scene; sets the cube kind and checks its bands")
    export_parser.add_argument("--out", required=True, help="Output CSV")
    export_parser.set_defaults(func=cmd_export_features)

    # === report command ===
    report_parser = subparsers.add_parser("report", help="Render a run directory (or synthetic scene dir)")
    report_parser.add_argument("run_dir", help="Run directory")
    report_parser.set_defaults(func=cmd_report)

    args = parser.parse_args()
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="[%(name)s] %(message)s",
    )

    try:
        args.func(args)
    except ReportError as e:
        print(f"Error: {e}", file=sys.stderr)
        sys.exit(EXIT_REPORT)
    except (ConfigError, UnknownDatasetError, ArgumentError) as e:
        print(f"Error: {e}", file=sys.stderr)
        sys.exit(EXIT_CONFIG)
    except HsiError as e:
        print(f"Error: {type(e).__name__}: {e}", file=sys.stderr)
        sys.exit(EXIT_RUNTIME)


if __name__ == "__main__":
    main()
