"""Run an experiment config: data, splits, the configured trainer, metrics.

Each seed writes into ``<out_dir>/seed_<n>/``; the aggregate goes to
``<out_dir>/metrics.json``.
"""

import logging
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from active.loop import initial_state, run_loop
from config import ACTIVE, FANN, FILES, PLSSDL, SEMISUP_RECON, SUPERVISED, ExperimentConfig
from core.augment import augment_patches
from core.cube import REFLECTANCE, SOURCE, TARGET, DomainPair, HyperCube, LabelMap, PatchSet
from core.cube_io import load_cube, load_labels
from core.descriptors import require_descriptor
from core.errors import ArgumentError, ConfigError, HsiError
from core.netgraph import (
    INPUT_ID,
    NetworkSpec,
    build_fann_spec,
    forward,
    parse_config,
    parse_fann_config,
    tap_features,
    with_dropout,
)
from core.patches import ALL, LABELED, extract_patches, split_labels, split_patches
from core.synth import synth_domain_pair
from trainers.base import TrainConfig, load_model, save_model, write_history_csv
from trainers.evaluation import evaluate, evaluate_predictions
from trainers.fann import (
    CONCATENATED,
    fann_features,
    layer_probe,
    load_fann,
    predict_fann,
    save_fann,
    train_fann,
    without_alignment,
)
from trainers.pseudo import train_plssdl
from trainers.semisup import train_semisup_recon
from trainers.supervised import train_supervised
from utils.progress import ProgressFn
from utils.reporting import METRICS_FILE, build_metrics, write_json

logger = logging.getLogger(__name__)


def load_domain_pair(cfg: ExperimentConfig, seed: int) -> DomainPair:
    """Generate the synthetic pair for ``seed`` or load the configured files."""
    ds = cfg.dataset
    if ds.kind != FILES:
        return synth_domain_pair(ds.synth_config(), seed)

    sides = []
    for side in (SOURCE, TARGET):
        key = getattr(ds, f"{side}_descriptor")
        descriptor = require_descriptor(key) if key else None
        cube = load_cube(getattr(ds, f"{side}_header"), kind=descriptor.kind if descriptor else REFLECTANCE)
        labels = load_labels(getattr(ds, f"{side}_labels"))
        if descriptor:
            descriptor.check_against(cube)
        sides.append((cube, labels))
    return DomainPair(source=sides[0], target=sides[1], shift_metadata={"files": True})


def build_spec(cfg: ExperimentConfig, bands: int) -> NetworkSpec:
    model = cfg.model
    spec = parse_config(model.config, window=model.window, auto_pool=model.auto_pool)
    if spec.input_bands != bands:
        raise ConfigError("model.config", f"input has {spec.input_bands} bands, data has {bands}")
    if model.dropout is not None:
        spec = with_dropout(spec, model.dropout)
    return spec


def _unlabeled_pool(cube: HyperCube, labels: LabelMap, window: int, domain: str) -> PatchSet:
    pool = extract_patches(cube, labels, window, ALL, domain)
    return pool.with_labels(np.zeros(len(pool), dtype=np.int64))


def _metrics_row(result) -> dict:
    return {
        "overall_accuracy": result.overall_accuracy,
        "average_accuracy": result.average_accuracy,
        "kappa": result.kappa,
        "per_class_accuracy": result.per_class_accuracy,
    }


def _run_single_domain(cfg: ExperimentConfig, pair: DomainPair, tcfg: TrainConfig, seed_dir: Path,
                       on_progress: Optional[ProgressFn]) -> dict:
    domain = cfg.dataset.domain
    cube, labels = pair.source if domain == SOURCE else pair.target
    window = cfg.model.window
    spec = build_spec(cfg, cube.bands)
    mode = cfg.trainer.mode

    if mode == ACTIVE:
        split = split_labels(labels, cfg.active.pool_per_class, tcfg.seed)
        data, test = split_patches(cube, labels, split, window, domain)
        state = initial_state(data, cfg.active.initial_per_class, cfg.active.budget, cfg.active.step, tcfg.seed)
        curve = run_loop(state, cfg.active.strategy, spec, data, tcfg, test, on_progress,
                         cfg.active.plateau_patience, cfg.active.plateau_tol, cfg.active.k_neighbors)
        curve.write_csv(seed_dir / "curve.csv")
        last = curve.points[-1]
        return {
            "overall_accuracy": last.overall_accuracy,
            "per_class_accuracy": last.per_class_accuracy,
            "average_accuracy": float(np.nanmean(last.per_class_accuracy)),
            "kappa": None,
            "curve": [{"round": p.round, "labels_used": p.labels_used, "overall_accuracy": p.overall_accuracy}
                      for p in curve.points],
            "artifacts": [f"{seed_dir.name}/curve.csv"],
        }

    split = split_labels(labels, cfg.split.per_class, tcfg.seed)
    train, test = split_patches(cube, labels, split, window, domain)
    pool = _unlabeled_pool(cube, labels, window, domain)
    train = augment_patches(train, replace(cfg.augment, seed=tcfg.seed), pool=pool, kind=cube.kind)

    if mode == SUPERVISED:
        model = train_supervised(spec, train, tcfg, on_progress)
    elif mode == SEMISUP_RECON:
        model = train_semisup_recon(spec, train, pool, tcfg, on_progress)
    elif mode == PLSSDL:
        model = train_plssdl(spec, pool, train, tcfg, on_progress=on_progress)
    else:
        raise ConfigError("trainer.mode", f"unknown mode '{mode}'")

    save_model(model, seed_dir / "model")
    return {**_metrics_row(evaluate(model, test)), "n_train": len(train),
            "artifacts": [f"{seed_dir.name}/model/model.pt", f"{seed_dir.name}/model/history.csv"]}


def _fann_spec(cfg: ExperimentConfig, pair: DomainPair):
    model = cfg.model
    src_bands, tgt_bands = pair.source[0].bands, pair.target[0].bands
    if model.fann_config:
        return parse_fann_config(model.fann_config, src_bands, tgt_bands, model.window, model.auto_pool)
    n_classes = pair.source[1].n_classes
    fann = build_fann_spec(model.source_config, model.target_config, n_classes,
                           model.head_units, model.window, model.auto_pool)
    for side, branch, bands in (("source", fann.source_branch, src_bands), ("target", fann.target_branch, tgt_bands)):
        if branch.input_bands != bands:
            raise ConfigError(f"model.{side}_config", f"input has {branch.input_bands} bands, data has {bands}")
    return fann


def _run_fann(cfg: ExperimentConfig, pair: DomainPair, tcfg: TrainConfig, seed_dir: Path,
              on_progress: Optional[ProgressFn]) -> dict:
    fann = _fann_spec(cfg, pair)
    window = cfg.model.window
    (src_cube, src_labels), (tgt_cube, tgt_labels) = pair.source, pair.target
    src_train, _ = split_patches(src_cube, src_labels, split_labels(src_labels, cfg.split.source_per_class, tcfg.seed),
                                 window, SOURCE)
    tgt_train, tgt_test = split_patches(tgt_cube, tgt_labels, split_labels(tgt_labels, cfg.split.per_class, tcfg.seed),
                                        window, TARGET)

    model = train_fann(fann, src_train, tgt_train, tcfg, on_progress)
    result = evaluate_predictions(tgt_test.labels, predict_fann(model, tgt_test, TARGET), fann.n_classes)

    baseline = train_fann(fann, src_train, tgt_train, without_alignment(tcfg))
    baseline_result = evaluate_predictions(tgt_test.labels, predict_fann(baseline, tgt_test, TARGET), fann.n_classes)

    probes = {pid: layer_probe(model, pid, tgt_test, tcfg.seed) for pid in fann.pair_ids + [CONCATENATED]}
    save_fann(model, seed_dir / "model")
    write_history_csv(model.betas, seed_dir / "betas.csv")
    return {
        **_metrics_row(result),
        "baseline_overall_accuracy": baseline_result.overall_accuracy,
        "probes": probes,
        "artifacts": [f"{seed_dir.name}/model/fann.json", f"{seed_dir.name}/model/history.csv"],
    }


def run_seed(cfg: ExperimentConfig, seed: int, on_progress: Optional[ProgressFn] = None) -> dict:
    """One seed end to end. Trainer errors are recorded, config errors raised."""
    seed_dir = cfg.out_dir / f"seed_{seed}"
    seed_dir.mkdir(parents=True, exist_ok=True)
    tcfg = replace(cfg.trainer.train, seed=seed, adaptation=replace(cfg.trainer.train.adaptation, seed=seed))
    logger.info("Seed %d: %s", seed, cfg.trainer.mode)
    try:
        pair = load_domain_pair(cfg, seed)
        if cfg.trainer.mode == FANN:
            row = _run_fann(cfg, pair, tcfg, seed_dir, on_progress)
        else:
            row = _run_single_domain(cfg, pair, tcfg, seed_dir, on_progress)
    except ConfigError:
        raise
    except HsiError as e:
        logger.error("Seed %d failed: %s", seed, e)
        return {"seed": seed, "status": "failed", "error": f"{type(e).__name__}: {e}"}
    return {"seed": seed, "status": "ok", **row}


def _run_seed_worker(args: tuple) -> dict:
    """Process-pool entry point (module level so it pickles)."""
    cfg, seed = args
    logging.basicConfig(level=logging.INFO, format="[%(name)s] %(message)s")
    return run_seed(cfg, seed)


def run_experiment(cfg: ExperimentConfig, workers: int = 1, on_progress: Optional[ProgressFn] = None) -> dict:
    """Run every seed, write metrics.json and return the metrics document."""
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    write_json(cfg.out_dir / "config.json", cfg.to_dict())
    seeds = list(cfg.report.seeds)

    if workers > 1 and len(seeds) > 1:
        runs = []
        with ProcessPoolExecutor(max_workers=workers) as executor:
            futures = {executor.submit(_run_seed_worker, (cfg, s)): s for s in seeds}
            for future in as_completed(futures):
                runs.append(future.result())
                logger.info("Seed %d done (%d/%d)", futures[future], len(runs), len(seeds))
    else:
        runs = [run_seed(cfg, s, on_progress) for s in seeds]

    metrics = build_metrics(cfg.name, cfg.trainer.mode, runs)
    write_json(cfg.out_dir / METRICS_FILE, metrics)
    return metrics


# === Feature export ===

def export_features(
    checkpoint: Path,
    cube: HyperCube,
    labels: LabelMap,
    layer: str,
    domain: str = TARGET,
) -> tuple[np.ndarray, PatchSet]:
    """Flattened activations at ``layer`` for every labeled pixel of a scene.

    ``checkpoint`` is a model directory written by ``run``. FANN checkpoints
    also accept an aligned pair id (FA-k) or "concatenated".
    """
    checkpoint = Path(checkpoint)
    if (checkpoint / "fann.json").is_file():
        fann_model = load_fann(checkpoint)
        spec, params = fann_model.branch(domain)
    elif (checkpoint / "model.pt").is_file():
        fann_model = None
        model = load_model(checkpoint)
        spec, params = model.spec, model.params
    else:
        raise ArgumentError(f"No checkpoint in {checkpoint}")

    patches = extract_patches(cube, labels, spec.window, LABELED, domain)
    if fann_model is not None and (layer == CONCATENATED or layer in fann_model.fann.pair_ids):
        return fann_features(fann_model, patches, domain, layer), patches
    if layer != INPUT_ID and layer not in spec.layer_ids:
        known = ", ".join((INPUT_ID,) + spec.layer_ids)
        raise ArgumentError(f"Unknown layer '{layer}'. Known: {known}")
    with torch.no_grad():
        result = forward(spec, params, patches.patches)
    return tap_features(result, layer).numpy(), patches
