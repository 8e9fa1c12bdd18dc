"""Cross-spectral representation alignment: a shared tiny ViT extended to
four spectral bands via stems, bottleneck adapters, and modality embeddings,
trained against a frozen teacher with a staged distillation curriculum."""

from .config import (
    FreezeSpec,
    LossWeights,
    Modality,
    ModelVariantConfig,
    StageConfig,
    STAGE_LOSS_WEIGHTS,
    VARIANTS,
    stage_presets,
)
from .data import PairedSample, SceneSpec, generate_dataset, load_dataset, render_scene
from .evaluate import AlignmentReport, alignment_report, export_embeddings, train_probe
from .losses import (
    LossReport,
    contrastive_loss,
    distill_loss,
    neighborhood_kl,
    patch_loss,
    total_loss,
)
from .memory_queue import EmbeddingQueue
from .model import AlignmentModel, EmbeddingBundle, build_model, set_trainable
from .pipeline import run_pipeline
from .trainer import RoundRobinSampler, Trainer, load_model_checkpoint, lr_at

__all__ = [
    "AlignmentModel",
    "AlignmentReport",
    "EmbeddingBundle",
    "EmbeddingQueue",
    "FreezeSpec",
    "LossReport",
    "LossWeights",
    "Modality",
    "ModelVariantConfig",
    "PairedSample",
    "RoundRobinSampler",
    "SceneSpec",
    "StageConfig",
    "STAGE_LOSS_WEIGHTS",
    "Trainer",
    "VARIANTS",
    "alignment_report",
    "build_model",
    "contrastive_loss",
    "distill_loss",
    "export_embeddings",
    "generate_dataset",
    "load_dataset",
    "load_model_checkpoint",
    "lr_at",
    "neighborhood_kl",
    "patch_loss",
    "render_scene",
    "run_pipeline",
    "set_trainable",
    "stage_presets",
    "total_loss",
    "train_probe",
]
