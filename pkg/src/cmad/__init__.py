"""Prompt-guided multi-class visual anomaly detection and localization.

A reconstruction-based detector: a frozen backbone feeds a tokenized target
into a prompt-conditioned transformer decoder; reconstruction errors are
refined by a text-conditioned diffusion segmentor into full-resolution
anomaly maps. Ships with a synthetic defect corpus, MVTec-style ingestion,
and an AUC/AP evaluation harness.
"""

from .config import PipelineConfig, desk_config, load_config
from .dataio import (
    CorpusIndex,
    ImageSample,
    PseudoAnomalySpec,
    generate_synthetic_corpus,
    load_corpus,
    select_prompt_image,
    synthesize_pseudo_anomaly,
    write_corpus,
)
from .metrics import MetricsReport, average_precision, evaluate, image_score, roc_auc
from .model import AnomalyModel, build_model
from .trainer import load_checkpoint, lr_at_epoch, train

__version__ = "0.1.0"

__all__ = [
    "AnomalyModel",
    "CorpusIndex",
    "ImageSample",
    "MetricsReport",
    "PipelineConfig",
    "PseudoAnomalySpec",
    "average_precision",
    "build_model",
    "desk_config",
    "evaluate",
    "generate_synthetic_corpus",
    "image_score",
    "load_checkpoint",
    "load_config",
    "load_corpus",
    "lr_at_epoch",
    "roc_auc",
    "select_prompt_image",
    "synthesize_pseudo_anomaly",
    "train",
    "write_corpus",
]
