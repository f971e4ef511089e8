"""Trainers: supervised, reconstruction semi-supervised, pseudo-label, FANN."""

from .base import TrainConfig, TrainedModel, load_model, save_model
from .evaluation import Evaluation, evaluate, predict, summarize
from .fann import FannModel, layer_probe, predict_fann, train_fann
from .pseudo import cluster_pseudo, finetune, pretrain_pseudo, train_plssdl
from .semisup import train_semisup_recon
from .supervised import train_supervised

__all__ = [
    "Evaluation",
    "FannModel",
    "TrainConfig",
    "TrainedModel",
    "cluster_pseudo",
    "evaluate",
    "finetune",
    "layer_probe",
    "load_model",
    "predict",
    "predict_fann",
    "pretrain_pseudo",
    "save_model",
    "summarize",
    "train_fann",
    "train_plssdl",
    "train_semisup_recon",
    "train_supervised",
]
