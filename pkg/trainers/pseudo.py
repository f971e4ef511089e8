"""Pseudo-label pretraining and fine-tuning.

Pretraining clusters unlabeled patches and trains the network against the
cluster ids. Fine-tuning keeps the pretrained trunk, drops the cluster head,
adds a fresh classifier head and trains it on the few real labels with the
first ``freeze_depth`` parametric trunk layers held fixed.
"""

import logging
from typing import Callable, Optional, Union

import numpy as np

from core.clustering import BaseClusterer, cluster_pseudo, create_clusterer
from core.cube import PatchSet
from core.errors import ArgumentError, StructureError
from core.netgraph import NetworkSpec, init_params, trunk, with_head
from trainers.base import TrainConfig, TrainedModel, check_labels, provenance
from trainers.supervised import fit_classifier, train_supervised
from utils.progress import ProgressFn

logger = logging.getLogger(__name__)

ClustererArg = Optional[Union[str, BaseClusterer, Callable]]


def _resolve_clusterer(clusterer: ClustererArg, cfg: TrainConfig):
    if clusterer is not None:
        return clusterer
    if cfg.clusterer == "kmeans":
        return create_clusterer("kmeans", n_init=cfg.n_init)
    return create_clusterer(cfg.clusterer)


def pretrain_pseudo(
    spec: NetworkSpec,
    unlabeled: PatchSet,
    cfg: TrainConfig,
    clusterer: ClustererArg = None,
    pseudo_labels: Optional[np.ndarray] = None,
    on_progress: Optional[ProgressFn] = None,
) -> TrainedModel:
    """Cluster ``unlabeled`` into cfg.n_clusters groups and train on the cluster ids.

    ``pseudo_labels`` skips clustering and trains on the given ids directly.
    """
    cfg.validate()
    if spec.n_classes != cfg.n_clusters:
        raise StructureError(
            f"Pretraining head has {spec.n_classes} outputs but {cfg.n_clusters} clusters are configured"
        )

    if pseudo_labels is None:
        pseudo_labels = cluster_pseudo(unlabeled, cfg.n_clusters, cfg.seed, _resolve_clusterer(clusterer, cfg))
    pseudo_set = unlabeled.with_labels(np.asarray(pseudo_labels))

    model = train_supervised(spec, pseudo_set, cfg, on_progress=on_progress)
    model.provenance = provenance("plssdl-pretrain", cfg, n_unlabeled=len(unlabeled), clusterer=cfg.clusterer)
    model.extras["pseudo_labels"] = pseudo_set.labels
    return model


def untrained(spec: NetworkSpec, cfg: TrainConfig) -> TrainedModel:
    """A model at its random initialization (baseline for fine-tuning)."""
    return TrainedModel(
        spec=spec,
        params=init_params(spec, cfg.seed),
        provenance=provenance("random-init", cfg),
    )


def default_head_units(base: NetworkSpec) -> list[int]:
    """One dense layer as wide as the last parametric trunk layer."""
    widths = [layer.units for layer in base.layers if layer.is_parametric]
    return widths[-1:]


def finetune(
    pretrained: TrainedModel,
    labeled: PatchSet,
    cfg: TrainConfig,
    n_classes: Optional[int] = None,
    on_progress: Optional[ProgressFn] = None,
) -> TrainedModel:
    """Attach a new head to the pretrained trunk and train on labeled data."""
    cfg.validate()
    if len(labeled) == 0:
        raise ArgumentError("Labeled set is empty")

    base = trunk(pretrained.spec)
    trunk_ids = base.parametric_ids
    if cfg.freeze_depth > len(trunk_ids):
        raise ArgumentError(
            f"freeze_depth {cfg.freeze_depth} exceeds the {len(trunk_ids)} parametric trunk layers"
        )

    n_classes = n_classes or labeled.n_classes
    spec = with_head(base, n_classes, cfg.head_units or default_head_units(base))
    check_labels(spec, labeled.labels)

    params = init_params(spec, cfg.seed)
    params.update(pretrained.params, trunk_ids)
    frozen = trunk_ids[:cfg.freeze_depth]
    trainable = [lid for lid in spec.parametric_ids if lid not in frozen]
    logger.info("Fine-tuning: %d frozen, %d trainable layers", len(frozen), len(trainable))

    history = fit_classifier(spec, params, labeled, cfg, trainable, "finetune", on_progress)
    return TrainedModel(
        spec=spec,
        params=params,
        history=history,
        provenance=provenance("plssdl-finetune", cfg, pretrained=pretrained.provenance.get("config_hash")),
        frozen_ids=tuple(frozen),
    )


def train_plssdl(
    spec: NetworkSpec,
    unlabeled: PatchSet,
    labeled: PatchSet,
    cfg: TrainConfig,
    clusterer: ClustererArg = None,
    on_progress: Optional[ProgressFn] = None,
) -> TrainedModel:
    """Pretrain on cluster ids (head width cfg.n_clusters), then fine-tune."""
    pretrain_spec = with_head(spec, cfg.n_clusters)
    pretrained = pretrain_pseudo(pretrain_spec, unlabeled, cfg, clusterer, on_progress=on_progress)
    model = finetune(pretrained, labeled, cfg, n_classes=spec.n_classes or labeled.n_classes, on_progress=on_progress)
    model.extras["pretrain_history"] = pretrained.history
    return model
