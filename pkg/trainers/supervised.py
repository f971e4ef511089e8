"""Supervised training with categorical cross entropy."""

import logging
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from core.cube import PatchSet
from core.errors import ArgumentError
from core.netgraph import NetworkSpec, ParamStore, forward, init_params
from trainers.base import (
    TrainConfig,
    TrainedModel,
    check_labels,
    freeze,
    patch_tensors,
    provenance,
    run_epochs,
)
from utils.progress import ProgressFn

logger = logging.getLogger(__name__)


def fit_classifier(
    spec: NetworkSpec,
    params: ParamStore,
    patches: PatchSet,
    cfg: TrainConfig,
    trainable_ids: Sequence[str],
    step_name: str,
    on_progress: Optional[ProgressFn] = None,
) -> list[dict]:
    """Minimize cross entropy over ``patches``, updating only ``trainable_ids`` in place."""
    x, y = patch_tensors(patches, params.dtype)
    params.requires_grad_(False)
    params.requires_grad_(True, trainable_ids)
    generator = torch.Generator().manual_seed(cfg.seed)

    def step(idx: np.ndarray) -> dict[str, torch.Tensor]:
        result = forward(spec, params, x[idx], stochastic=True, generator=generator)
        return {"loss": F.cross_entropy(result.logits, y[idx])}

    history = run_epochs(cfg, len(patches), params.parameters(trainable_ids), step, step_name, on_progress)
    freeze(params)
    return history


def train_supervised(
    spec: NetworkSpec,
    labeled: PatchSet,
    cfg: TrainConfig,
    on_progress: Optional[ProgressFn] = None,
    init: Optional[ParamStore] = None,
) -> TrainedModel:
    """Train every layer of ``spec`` on labeled patches.

    ``init`` warm-starts from existing parameters (copied, not mutated).
    """
    cfg.validate()
    if len(labeled) == 0:
        raise ArgumentError("Labeled set is empty")
    check_labels(spec, labeled.labels)

    params = init.clone() if init is not None else init_params(spec, cfg.seed)
    history = fit_classifier(spec, params, labeled, cfg, spec.parametric_ids, "supervised", on_progress)
    return TrainedModel(
        spec=spec,
        params=params,
        history=history,
        provenance=provenance("supervised", cfg, n_train=len(labeled)),
    )
