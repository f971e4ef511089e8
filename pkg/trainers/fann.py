"""Feature alignment network training.

Two branch trunks (source and target sensor) are tied at aligned layer pairs.
At each pair the tapped features of both branches are projected linearly to a
shared width and an alignment loss pulls same-class features together across
domains. The projected features of all pairs are concatenated and fed to one
classifier head shared by both domains.
"""

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional, Union

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.linear_model import LogisticRegression
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from core.cube import SOURCE, TARGET, PatchSet
from core.datl import PAD, datl_loss, resolve_beta, source_batch, target_batch
from core.errors import ArgumentError, DegenerateSupportError, StateError, StructureError
from core.netgraph import (
    FannSpec,
    LayerSpec,
    ParamStore,
    feature_dim,
    forward,
    init_params,
    parse_config,
    tap_features,
)
from trainers.base import TrainConfig, freeze, provenance, run_epochs, write_history_csv
from utils.progress import ProgressFn

logger = logging.getLogger(__name__)

CONCATENATED = "concatenated"
BETA_HOLDOUT_FRACTION = 0.25
FIT_SETS_FILE = "fit_sets.npz"


@dataclass
class FannModel:
    """Both branches, the per-pair projections and the fused head."""

    fann: FannSpec
    source_params: ParamStore
    target_params: ParamStore
    projections: ParamStore
    head_params: ParamStore
    history: list[dict] = field(default_factory=list)
    betas: list[dict] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)
    source_fit: Optional[PatchSet] = None
    target_fit: Optional[PatchSet] = None
    trained: bool = False

    @property
    def epochs_run(self) -> int:
        return len(self.history)

    @property
    def align_dim(self) -> int:
        first = self.fann.pair_ids[0]
        return self.projections[first]["source_weight"].shape[1]

    def head_spec(self):
        return self.fann.head_spec(self.align_dim * len(self.fann.pair_ids))

    def branch(self, domain: str):
        if domain == SOURCE:
            return self.fann.source_branch, self.source_params
        if domain == TARGET:
            return self.fann.target_branch, self.target_params
        raise ArgumentError(f"Unknown domain '{domain}'")

    def all_params(self) -> list[ParamStore]:
        return [self.source_params, self.target_params, self.projections, self.head_params]


def without_alignment(cfg: TrainConfig) -> TrainConfig:
    """Same config with every alignment weight at 0 (the source-only baseline)."""
    return replace(cfg, datl_weight=0.0, datl_weights=None)


def _init_projections(fann: FannSpec, align_dim: int, seed: int, dtype: torch.dtype) -> ParamStore:
    generator = torch.Generator().manual_seed(seed)
    tensors = {}
    for pid, (s_tap, t_tap) in zip(fann.pair_ids, fann.aligned_layer_ids):
        group = {}
        for side, spec, tap in (("source", fann.source_branch, s_tap), ("target", fann.target_branch, t_tap)):
            fan_in = feature_dim(spec, tap)
            bound = float(np.sqrt(6.0 / fan_in))
            group[f"{side}_weight"] = (torch.rand((fan_in, align_dim), generator=generator, dtype=dtype) * 2 - 1) * bound
            group[f"{side}_bias"] = torch.zeros(align_dim, dtype=dtype)
        tensors[pid] = group
    return ParamStore(tensors=tensors, seed=seed)


def init_fann(fann: FannSpec, cfg: TrainConfig, dtype: torch.dtype = torch.float32) -> FannModel:
    """Fresh parameters for every part of the network."""
    projections = _init_projections(fann, cfg.align_dim, cfg.seed + 2, dtype)
    head = fann.head_spec(cfg.align_dim * len(fann.pair_ids))
    return FannModel(
        fann=fann,
        source_params=init_params(fann.source_branch, cfg.seed, dtype),
        target_params=init_params(fann.target_branch, cfg.seed + 1, dtype),
        projections=projections,
        head_params=init_params(head, cfg.seed + 3, dtype),
    )


def _aligned(
    model: FannModel,
    x: torch.Tensor,
    domain: str,
    stochastic: bool = False,
    generator: Optional[torch.Generator] = None,
) -> list[torch.Tensor]:
    """Projected features at every aligned pair for one domain."""
    spec, params = model.branch(domain)
    result = forward(spec, params, x, stochastic=stochastic, generator=generator)
    side, prefix = (0, "source") if domain == SOURCE else (1, "target")
    features = []
    for pid, pair in zip(model.fann.pair_ids, model.fann.aligned_layer_ids):
        group = model.projections[pid]
        tap = tap_features(result, pair[side])
        features.append(tap @ group[f"{prefix}_weight"] + group[f"{prefix}_bias"])
    return features


def _head_logits(model: FannModel, features: list[torch.Tensor], stochastic=False, generator=None) -> torch.Tensor:
    fused = torch.cat(features, dim=1)
    fused = fused.reshape(len(fused), 1, 1, -1)
    return forward(model.head_spec(), model.head_params, fused, stochastic=stochastic, generator=generator).logits


def balanced_batches(labels: np.ndarray, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Mini-batches that cycle through the classes in turn."""
    per_class = [rng.permutation(np.flatnonzero(labels == c)) for c in np.unique(labels)]
    order = []
    depth = max(len(idx) for idx in per_class)
    for i in range(depth):
        order.extend(int(idx[i]) for idx in per_class if i < len(idx))
    order = np.asarray(order, dtype=np.int64)
    for start in range(0, len(order), batch_size):
        yield order[start:start + batch_size]


def beta_holdout(labels: np.ndarray, fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Stratified (train, held-out) positions. Classes with one sample stay in train."""
    train, held = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        n_held = min(max(1, int(round(fraction * len(idx)))), len(idx) - 1)
        held.append(idx[:n_held])
        train.append(idx[n_held:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(held))


def _estimate_betas(model: FannModel, xs, ys, xt, yt, cfg: TrainConfig) -> dict[str, float]:
    with torch.no_grad():
        fs = _aligned(model, xs, SOURCE)
        ft = _aligned(model, xt, TARGET)
    betas = {}
    for pid, a, b in zip(model.fann.pair_ids, fs, ft):
        try:
            betas[pid] = resolve_beta(source_batch(a, ys), target_batch(b, yt), cfg.adaptation)
        except ArgumentError as e:
            logger.warning("%s: beta estimation failed (%s), using %.2f", pid, e, cfg.adaptation.beta)
            betas[pid] = cfg.adaptation.beta
    return betas


def train_fann(
    fann: FannSpec,
    source_labeled: PatchSet,
    target_labeled: PatchSet,
    cfg: TrainConfig,
    on_progress: Optional[ProgressFn] = None,
) -> FannModel:
    """Joint training of both branches, projections and head.

    Each step draws a class-balanced source batch and uses the whole labeled
    target set. The loss is the cross entropy of both domains plus, per
    aligned pair, its weight times the alignment loss at that pair's beta.
    Betas are re-estimated every ``cfg.beta_refresh`` epochs. In PAD mode they
    are estimated on a stratified slice of both labeled sets that never enters
    the loss; without room for that slice the configured beta is used.
    """
    cfg.validate()
    if not fann.aligned_layer_ids:
        raise StructureError("FANN needs at least one aligned layer pair")
    if len(source_labeled) == 0 or len(target_labeled) == 0:
        raise ArgumentError("Both domains need labeled samples")
    if source_labeled.labels.min() < 1 or target_labeled.labels.min() < 1:
        raise ArgumentError("FANN training sets must be fully labeled")
    n_classes = fann.n_classes
    if max(source_labeled.n_classes, target_labeled.n_classes) > n_classes:
        raise StructureError(f"Labels exceed the head's {n_classes} classes")

    weights = cfg.pair_weights(len(fann.pair_ids))
    model = init_fann(fann, cfg)
    for store in model.all_params():
        store.requires_grad_(True)

    aligning = any(w > 0 for w in weights)
    source_train, target_train = source_labeled, target_labeled
    held_out = None
    if aligning and cfg.adaptation.beta_mode == PAD:
        rng = np.random.default_rng(cfg.seed)
        s_train, s_held = beta_holdout(source_labeled.labels, BETA_HOLDOUT_FRACTION, rng)
        t_train, t_held = beta_holdout(target_labeled.labels, BETA_HOLDOUT_FRACTION, rng)
        if len(s_held) >= 2 and len(t_held) >= 2:
            source_train, target_train = source_labeled.subset(s_train), target_labeled.subset(t_train)
            held_out = (source_labeled.subset(s_held), target_labeled.subset(t_held))
        else:
            logger.warning("Too few samples for a beta hold-out slice, using beta %.2f", cfg.adaptation.beta)

    xs = torch.tensor(source_train.patches, dtype=torch.float32)
    xt = torch.tensor(target_train.patches, dtype=torch.float32)
    ys_np, yt_np = source_train.labels, target_train.labels
    ys = torch.tensor(ys_np - 1, dtype=torch.long)
    yt = torch.tensor(yt_np - 1, dtype=torch.long)
    generator = torch.Generator().manual_seed(cfg.seed)

    betas: dict[str, float] = {}
    state = {"epoch": 0, "batches": 0}
    n_batches = -(-len(source_train) // cfg.batch_size)

    def refresh_betas() -> dict[str, float]:
        if cfg.adaptation.beta_mode == PAD and held_out is None:
            return {pid: cfg.adaptation.beta for pid in fann.pair_ids}
        if held_out is None:
            return _estimate_betas(model, xs, ys_np, xt, yt_np, cfg)
        s_held, t_held = held_out
        return _estimate_betas(
            model,
            torch.tensor(s_held.patches, dtype=torch.float32), s_held.labels,
            torch.tensor(t_held.patches, dtype=torch.float32), t_held.labels,
            cfg,
        )

    def step(idx: np.ndarray) -> dict[str, torch.Tensor]:
        if state["batches"] % n_batches == 0:
            state["epoch"] += 1
            if aligning and (state["epoch"] - 1) % cfg.beta_refresh == 0:
                betas.update(refresh_betas())
                model.betas.append({"epoch": state["epoch"], **betas})
                logger.info("epoch %d betas: %s", state["epoch"],
                            ", ".join(f"{k}={v:.2f}" for k, v in betas.items()))
        state["batches"] += 1

        fs = _aligned(model, xs[idx], SOURCE, stochastic=True, generator=generator)
        ft = _aligned(model, xt, TARGET, stochastic=True, generator=generator)
        ce_source = F.cross_entropy(_head_logits(model, fs, True, generator), ys[idx])
        ce_target = F.cross_entropy(_head_logits(model, ft, True, generator), yt)
        components = {"ce_source": ce_source, "ce_target": ce_target}
        total = ce_source + ce_target

        for pid, w, a, b in zip(fann.pair_ids, weights, fs, ft):
            if w == 0.0:
                components[f"datl_{pid}"] = torch.zeros(())
                continue
            try:
                term, _ = datl_loss(
                    source_batch(a, ys_np[idx]),
                    target_batch(b, yt_np),
                    betas[pid],
                    cfg.adaptation.stability_shift,
                )
            except DegenerateSupportError:
                components[f"datl_{pid}"] = torch.zeros(())
                continue
            components[f"datl_{pid}"] = term.detach()
            total = total + w * term

        return {"loss": total, **{k: v.detach() for k, v in components.items()}}

    def batches(rng: np.random.Generator) -> Iterator[np.ndarray]:
        return balanced_batches(ys_np, cfg.batch_size, rng)

    trainable = [t for store in model.all_params() for t in store.parameters()]
    model.history = run_epochs(cfg, len(source_train), trainable, step, "fann", on_progress, batches=batches)
    for store in model.all_params():
        freeze(store)

    model.source_fit = source_labeled
    model.target_fit = target_labeled
    model.trained = True
    model.provenance = provenance(
        "fann", cfg, n_source=len(source_train), n_target=len(target_train), pairs=len(fann.pair_ids),
        beta_holdout=[len(part) for part in held_out] if held_out else None,
    )
    return model


def fann_features(model: FannModel, patches: PatchSet, domain: Optional[str] = None, pair: str = CONCATENATED) -> np.ndarray:
    """Projected features of one aligned pair, or all pairs concatenated."""
    domain = domain or patches.domain_tag
    x = torch.tensor(patches.patches, dtype=model.source_params.dtype)
    with torch.no_grad():
        features = _aligned(model, x, domain)
    if pair == CONCATENATED:
        return torch.cat(features, dim=1).numpy()
    if pair not in model.fann.pair_ids:
        raise ArgumentError(f"Unknown layer pair '{pair}'. Known: {', '.join(model.fann.pair_ids)}, {CONCATENATED}")
    return features[model.fann.pair_ids.index(pair)].numpy()


def predict_fann(model: FannModel, patches: PatchSet, domain: Optional[str] = None) -> np.ndarray:
    """Class ids 1..C from the fused head."""
    domain = domain or patches.domain_tag
    x = torch.tensor(patches.patches, dtype=model.source_params.dtype)
    with torch.no_grad():
        logits = _head_logits(model, _aligned(model, x, domain))
    return logits.argmax(dim=1).numpy() + 1


def layer_probe(model: FannModel, pair: str, eval_set: PatchSet, seed: int = 0) -> float:
    """Overall accuracy of a softmax probe fit on one pair's features.

    The probe trains on the model's labeled source and target fit sets and is
    scored on ``eval_set`` (read through the branch of its domain tag).
    """
    if not model.trained:
        raise StateError("layer_probe needs a trained model")
    if model.source_fit is None or model.target_fit is None:
        raise StateError("layer_probe needs the model's labeled fit sets, none are attached")
    if len(eval_set) == 0 or not eval_set.is_labeled:
        raise ArgumentError("Probe evaluation set must be labeled and nonempty")

    x = np.vstack([
        fann_features(model, model.source_fit, SOURCE, pair),
        fann_features(model, model.target_fit, TARGET, pair),
    ])
    y = np.concatenate([model.source_fit.labels, model.target_fit.labels])
    probe = make_pipeline(StandardScaler(), LogisticRegression(max_iter=2000, random_state=seed))
    probe.fit(x, y)
    predicted = probe.predict(fann_features(model, eval_set, eval_set.domain_tag, pair))
    return float(np.mean(predicted == eval_set.labels))


# === Checkpoints ===

def save_fann(model: FannModel, directory: Union[str, Path]) -> Path:
    """One checkpoint per part plus fann.json describing the topology."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    fann = model.fann
    model.source_params.save(directory / "source.pt", fann.source_branch)
    model.target_params.save(directory / "target.pt", fann.target_branch)
    model.projections.save(directory / "projections.pt")
    model.head_params.save(directory / "head.pt", model.head_spec())
    manifest = {
        "aligned_layer_ids": [list(pair) for pair in fann.aligned_layer_ids],
        "head": [{"kind": layer.kind, "units": layer.units, "rate": layer.rate} for layer in fann.head],
        "betas": model.betas,
        "provenance": model.provenance,
        "history": model.history,
    }
    (directory / "fann.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    write_history_csv(model.history, directory / "history.csv")
    if model.source_fit is not None and model.target_fit is not None:
        _save_fit_sets(model.source_fit, model.target_fit, directory / FIT_SETS_FILE)
    return directory


def _save_fit_sets(source: PatchSet, target: PatchSet, path: Path) -> None:
    arrays = {}
    for name, patches in ((SOURCE, source), (TARGET, target)):
        arrays[f"{name}_patches"] = patches.patches
        arrays[f"{name}_labels"] = patches.labels
        arrays[f"{name}_coords"] = patches.origin_coords
        arrays[f"{name}_meta"] = np.array(
            [patches.window, *(patches.image_shape or (-1, -1))], dtype=np.int64
        )
    np.savez_compressed(path, **arrays)


def _load_fit_sets(path: Path) -> tuple[Optional[PatchSet], Optional[PatchSet]]:
    if not path.is_file():
        logger.warning("%s has no fit sets, layer_probe needs them reattached", path.parent)
        return None, None
    with np.load(path) as data:
        sets = []
        for name in (SOURCE, TARGET):
            window, h, w = data[f"{name}_meta"].tolist()
            sets.append(PatchSet(
                window=window,
                patches=data[f"{name}_patches"],
                labels=data[f"{name}_labels"],
                origin_coords=data[f"{name}_coords"],
                domain_tag=name,
                image_shape=None if h < 0 else (h, w),
            ))
    return sets[0], sets[1]


def _head_layer(entry: dict) -> LayerSpec:
    if entry["kind"] == "softmax":
        return LayerSpec.softmax(entry["units"])
    if entry["kind"] == "dropout":
        return LayerSpec.dropout(entry["rate"])
    return LayerSpec.dense(entry["units"])


def load_fann(directory: Union[str, Path]) -> FannModel:
    directory = Path(directory)
    if not (directory / "fann.json").is_file():
        raise ArgumentError(f"No FANN checkpoint in {directory}")
    manifest = json.loads((directory / "fann.json").read_text(encoding="utf-8"))

    branches = []
    stores = []
    for name in ("source", "target"):
        store, meta = ParamStore.load(directory / f"{name}.pt")
        branches.append(parse_config(meta["config"], window=meta["window"], auto_pool=meta["auto_pool"]))
        stores.append(store)
    fann = FannSpec(
        source_branch=branches[0],
        target_branch=branches[1],
        aligned_layer_ids=tuple(tuple(pair) for pair in manifest["aligned_layer_ids"]),
        head=tuple(_head_layer(entry) for entry in manifest["head"]),
    )
    projections, _ = ParamStore.load(directory / "projections.pt")
    head_params, _ = ParamStore.load(directory / "head.pt")
    source_fit, target_fit = _load_fit_sets(directory / FIT_SETS_FILE)
    return FannModel(
        fann=fann,
        source_params=stores[0],
        target_params=stores[1],
        projections=projections,
        head_params=head_params,
        history=manifest.get("history", []),
        betas=manifest.get("betas", []),
        provenance=manifest.get("provenance", {}),
        source_fit=source_fit,
        target_fit=target_fit,
        trained=True,
    )

