"""Semi-supervised training with a reconstruction penalty.

The classifier's trunk doubles as an encoder; a mirrored decoder maps its
deepest activation back to the input patch. The joint loss is cross entropy
on labeled patches plus lambda_recon times the mean squared reconstruction
error over the labeled batch and an unlabeled batch of the same size.
"""

import logging
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from core.cube import PatchSet
from core.errors import ArgumentError, UnsupportedStructureError
from core.netgraph import (
    RECURRENT,
    decoder_input,
    forward,
    init_params,
    mirrored_decoder,
    trunk,
    NetworkSpec,
)
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


def train_semisup_recon(
    spec: NetworkSpec,
    labeled: PatchSet,
    unlabeled: PatchSet,
    cfg: TrainConfig,
    on_progress: Optional[ProgressFn] = None,
) -> TrainedModel:
    """Cross entropy + lambda_recon * reconstruction MSE.

    History rows carry ``loss``, ``ce`` and ``recon``. The decoder is kept in
    ``extras["decoder"]`` / ``extras["decoder_params"]``.
    """
    cfg.validate()
    if spec.count(RECURRENT):
        raise UnsupportedStructureError("reconstruction training needs a spec without recurrent layers")
    if len(labeled) == 0:
        raise ArgumentError("Labeled set is empty")
    check_labels(spec, labeled.labels)

    encoder = trunk(spec)
    decoder = mirrored_decoder(encoder)
    params = init_params(spec, cfg.seed)
    decoder_params = init_params(decoder, cfg.seed + 1, dtype=params.dtype)
    params.requires_grad_(True)
    decoder_params.requires_grad_(True)

    x, y = patch_tensors(labeled, params.dtype)
    pool = torch.cat([x, torch.tensor(unlabeled.patches, dtype=params.dtype)]) if len(unlabeled) else x
    pool_rng = np.random.default_rng(cfg.seed + 1)
    generator = torch.Generator().manual_seed(cfg.seed)
    weight = cfg.lambda_recon

    def reconstruction_error(batch: torch.Tensor) -> torch.Tensor:
        encoded = forward(encoder, params, batch)
        decoded = forward(decoder, decoder_params, decoder_input(encoded, encoder)).output
        return F.mse_loss(decoded.reshape(len(batch), -1), batch.reshape(len(batch), -1))

    def step(idx: np.ndarray) -> dict[str, torch.Tensor]:
        result = forward(spec, params, x[idx], stochastic=True, generator=generator)
        ce = F.cross_entropy(result.logits, y[idx])
        extra = pool_rng.choice(len(pool), size=min(len(idx), len(pool)), replace=False)
        batch = torch.cat([x[idx], pool[extra]])
        if weight == 0.0:
            with torch.no_grad():
                recon = reconstruction_error(batch)
            loss = ce
        else:
            recon = reconstruction_error(batch)
            loss = ce + weight * recon
        return {"loss": loss, "ce": ce.detach(), "recon": recon.detach()}

    trainable = params.parameters() + decoder_params.parameters()
    history = run_epochs(cfg, len(labeled), trainable, step, "semisup", on_progress)
    freeze(params)
    freeze(decoder_params)
    return TrainedModel(
        spec=spec,
        params=params,
        history=history,
        provenance=provenance("semisup-recon", cfg, n_labeled=len(labeled), n_unlabeled=len(unlabeled)),
        extras={"decoder": decoder, "decoder_params": decoder_params},
    )
