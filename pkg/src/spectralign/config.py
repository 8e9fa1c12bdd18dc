"""Model variants, loss-weight presets, and stage configurations.

The four ViT presets carry the published training constants verbatim; the
"toy" variant is a desk-scale configuration small enough to train on a CPU
in minutes while exercising every code path.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import IntEnum

from .errors import ConfigurationError


class Modality(IntEnum):
    """Spectral band index; the routing key for stems, adapters, embeddings."""

    RGB = 0
    NIR = 1
    SWIR = 2
    LWIR = 3


MS_MODALITIES = (Modality.NIR, Modality.SWIR, Modality.LWIR)

NUM_MODALITIES = 4


@dataclass(frozen=True)
class ModelVariantConfig:
    name: str
    embed_dim: int
    depth: int
    num_heads: int
    patch_size: int
    image_size: int
    mlp_ratio: float = 4.0
    num_modalities: int = NUM_MODALITIES

    def __post_init__(self):
        if self.embed_dim <= 0 or self.depth <= 0 or self.num_heads <= 0:
            raise ConfigurationError(f"{self.name}: dims must be positive")
        if self.embed_dim % self.num_heads != 0:
            raise ConfigurationError(
                f"{self.name}: embed_dim {self.embed_dim} not divisible by "
                f"num_heads {self.num_heads}"
            )
        if self.embed_dim % 4 != 0:
            raise ConfigurationError(
                f"{self.name}: embed_dim {self.embed_dim} not divisible by 4 "
                "(adapter bottleneck is embed_dim/4)"
            )
        if self.image_size % self.patch_size != 0:
            raise ConfigurationError(
                f"{self.name}: image_size {self.image_size} not divisible by "
                f"patch_size {self.patch_size}"
            )

    @property
    def adapter_bottleneck(self) -> int:
        # fixed reduction factor of 4
        return self.embed_dim // 4

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size ** 2

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "embed_dim": self.embed_dim,
            "depth": self.depth,
            "num_heads": self.num_heads,
            "patch_size": self.patch_size,
            "image_size": self.image_size,
            "mlp_ratio": self.mlp_ratio,
            "num_modalities": self.num_modalities,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelVariantConfig":
        return cls(**d)


VARIANTS: dict[str, ModelVariantConfig] = {
    "toy": ModelVariantConfig("toy", 64, 4, 4, patch_size=8, image_size=64),
    "vit-s": ModelVariantConfig("vit-s", 384, 12, 6, patch_size=14, image_size=224),
    "vit-b": ModelVariantConfig("vit-b", 768, 12, 12, patch_size=14, image_size=224),
    "vit-l": ModelVariantConfig("vit-l", 1024, 24, 16, patch_size=14, image_size=224),
    "vit-g": ModelVariantConfig("vit-g", 1536, 40, 24, patch_size=14, image_size=224),
}


@dataclass(frozen=True)
class LossWeights:
    """Per-term weights plus the shared similarity hyperparameters.

    ``lambda_a is None`` means the neighborhood loss is disabled outright
    (stage I), as opposed to weighted at zero.
    """

    lambda_d: float
    lambda_c: float
    lambda_p: float
    lambda_a: float | None
    tau: float = 0.07
    patch_sample_ratio: float = 0.25
    top_k: int = 128

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigurationError(f"tau must be positive, got {self.tau}")
        if not (0 < self.patch_sample_ratio <= 1):
            raise ConfigurationError(
                f"patch_sample_ratio must be in (0, 1], got {self.patch_sample_ratio}"
            )
        if self.top_k <= 0:
            raise ConfigurationError(f"top_k must be positive, got {self.top_k}")
        for lam in (self.lambda_d, self.lambda_c, self.lambda_p):
            if lam < 0:
                raise ConfigurationError("loss weights must be non-negative")
        if self.lambda_a is not None and self.lambda_a < 0:
            raise ConfigurationError("lambda_a must be non-negative or None")

    @property
    def active_terms(self) -> frozenset[str]:
        terms = {"distill", "contrast", "patch"}
        if self.lambda_a is not None:
            terms.add("neighborhood")
        return frozenset(terms)

    def weight_of(self, term: str) -> float:
        return {
            "distill": self.lambda_d,
            "contrast": self.lambda_c,
            "patch": self.lambda_p,
            "neighborhood": self.lambda_a,
        }[term]


# Shared across all backbone variants.
STAGE_LOSS_WEIGHTS: dict[str, LossWeights] = {
    "I": LossWeights(2.0, 1.0, 0.1, None, patch_sample_ratio=0.25),
    "II": LossWeights(2.0, 1.0, 0.1, 0.5, patch_sample_ratio=0.25),
    "III": LossWeights(0.5, 1.5, 0.25, 1.0, patch_sample_ratio=0.5),
}

FULL_QUEUE_CAPACITY = 65_536
TOY_QUEUE_CAPACITY = 1_024


@dataclass(frozen=True)
class FreezeSpec:
    """Which parameter groups train during a stage.

    ``unfrozen_blocks`` counts the deepest backbone blocks (last by index);
    patch embedding and positional embeddings stay frozen in every stage.
    """

    train_stems: frozenset[Modality]
    train_adapters: bool
    train_modality_embed: bool
    train_final_norm: bool
    unfrozen_blocks: int


def _stage_freeze(stage: str, unfrozen_blocks: int) -> FreezeSpec:
    # RGB stem is frozen while the backbone is frozen (stages I and II) to
    # preserve the near-identity RGB pathway; it unfreezes with the backbone.
    stems = set(MS_MODALITIES)
    if stage == "III":
        stems.add(Modality.RGB)
    return FreezeSpec(
        train_stems=frozenset(stems),
        train_adapters=True,
        train_modality_embed=True,
        train_final_norm=True,
        unfrozen_blocks=unfrozen_blocks if stage == "III" else 0,
    )


@dataclass(frozen=True)
class StageConfig:
    stage: str  # "I" | "II" | "III"
    weights: LossWeights
    epochs: int
    base_lr: float
    batch_size: int
    freeze: FreezeSpec
    queue_capacity: int
    la_warmup_epochs: int = 0
    warmup_fraction: float = 0.0
    val_every: int = 1  # validate every Nth epoch (the last epoch always runs)

    def __post_init__(self):
        if self.val_every <= 0:
            raise ConfigurationError("val_every must be positive")
        if self.stage not in ("I", "II", "III"):
            raise ConfigurationError(f"unknown stage {self.stage!r}")
        if self.stage == "I" and self.weights.lambda_a is not None:
            raise ConfigurationError("stage I must not enable the neighborhood loss")
        if self.stage != "I" and self.weights.lambda_a is None:
            raise ConfigurationError(f"stage {self.stage} requires lambda_a")
        if self.stage != "I" and self.warmup_fraction != 0.0:
            raise ConfigurationError(f"stage {self.stage} uses no LR warmup")
        if self.epochs <= 0 or self.base_lr <= 0 or self.batch_size <= 0:
            raise ConfigurationError("epochs, base_lr, batch_size must be positive")

    def to_dict(self) -> dict:
        w = self.weights
        return {
            "stage": self.stage,
            "epochs": self.epochs,
            "base_lr": self.base_lr,
            "batch_size": self.batch_size,
            "queue_capacity": self.queue_capacity,
            "la_warmup_epochs": self.la_warmup_epochs,
            "warmup_fraction": self.warmup_fraction,
            "val_every": self.val_every,
            "weights": {
                "lambda_d": w.lambda_d,
                "lambda_c": w.lambda_c,
                "lambda_p": w.lambda_p,
                "lambda_a": w.lambda_a,
                "tau": w.tau,
                "patch_sample_ratio": w.patch_sample_ratio,
                "top_k": w.top_k,
            },
            "freeze": {
                "train_stems": sorted(int(m) for m in self.freeze.train_stems),
                "train_adapters": self.freeze.train_adapters,
                "train_modality_embed": self.freeze.train_modality_embed,
                "train_final_norm": self.freeze.train_final_norm,
                "unfrozen_blocks": self.freeze.unfrozen_blocks,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StageConfig":
        w = d["weights"]
        f = d["freeze"]
        return cls(
            stage=d["stage"],
            weights=LossWeights(
                w["lambda_d"], w["lambda_c"], w["lambda_p"], w["lambda_a"],
                tau=w["tau"], patch_sample_ratio=w["patch_sample_ratio"],
                top_k=w["top_k"],
            ),
            epochs=d["epochs"],
            base_lr=d["base_lr"],
            batch_size=d["batch_size"],
            freeze=FreezeSpec(
                train_stems=frozenset(Modality(m) for m in f["train_stems"]),
                train_adapters=f["train_adapters"],
                train_modality_embed=f["train_modality_embed"],
                train_final_norm=f["train_final_norm"],
                unfrozen_blocks=f["unfrozen_blocks"],
            ),
            queue_capacity=d["queue_capacity"],
            la_warmup_epochs=d["la_warmup_epochs"],
            warmup_fraction=d["warmup_fraction"],
            val_every=d.get("val_every", 1),
        )


# (stage I, stage II, stage III) computational parameters per variant:
# epochs, base LR, batch size, and stage-III unfrozen block count.
_VARIANT_SCHEDULE = {
    "vit-s": ((100, 1e-4, 128), (10, 1e-4, 128), (75, 5e-5, 128), 6),
    "vit-b": ((100, 1e-4, 128), (10, 1e-4, 128), (75, 4e-5, 128), 6),
    "vit-l": ((100, 8e-5, 64), (10, 8e-5, 64), (75, 3e-5, 64), 12),
    "vit-g": ((50, 5e-5, 24), (10, 5e-5, 24), (30, 2e-5, 16), 10),
    # Toy: unlike the large variants, the backbone starts from random init
    # rather than a pretrained checkpoint, so cross-modal alignment needs a
    # short gentle Stage I (protects the near-identity RGB path) and a long
    # Stage III (where retrieval is actually learned). LRs tuned empirically.
    "toy": ((6, 1e-4, 32), (12, 1e-3, 32), (150, 2.5e-3, 32), 2),
}


def stage_presets(variant: str) -> dict[str, StageConfig]:
    """The three-stage schedule for a named variant."""
    if variant not in _VARIANT_SCHEDULE:
        raise ConfigurationError(f"unknown variant {variant!r}")
    s1, s2, s3, unfrozen = _VARIANT_SCHEDULE[variant]
    cap = TOY_QUEUE_CAPACITY if variant == "toy" else FULL_QUEUE_CAPACITY
    return {
        "I": StageConfig(
            "I", STAGE_LOSS_WEIGHTS["I"], epochs=s1[0], base_lr=s1[1],
            batch_size=s1[2], freeze=_stage_freeze("I", unfrozen),
            queue_capacity=cap, warmup_fraction=0.05,
            # stage I is a short warmup; a single end-of-stage validation
            # avoids selecting a "best" epoch from chance-level noise
            val_every=s1[0],
        ),
        "II": StageConfig(
            "II", STAGE_LOSS_WEIGHTS["II"], epochs=s2[0], base_lr=s2[1],
            batch_size=s2[2], freeze=_stage_freeze("II", unfrozen),
            queue_capacity=cap, la_warmup_epochs=1,
        ),
        "III": StageConfig(
            "III", STAGE_LOSS_WEIGHTS["III"], epochs=s3[0], base_lr=s3[1],
            batch_size=s3[2], freeze=_stage_freeze("III", unfrozen),
            queue_capacity=cap,
            # the long toy Stage III validates on a cadence to keep the
            # per-epoch overhead bounded; the final epoch always validates
            val_every=5 if variant == "toy" else 1,
        ),
    }


def stage_config_with(base: StageConfig, **overrides) -> StageConfig:
    """A copy of ``base`` with selected scalar fields replaced."""
    allowed = {"epochs", "base_lr", "batch_size", "queue_capacity", "val_every"}
    bad = set(overrides) - allowed
    if bad:
        raise ConfigurationError(f"cannot override stage fields: {sorted(bad)}")
    return replace(base, **overrides)


WEIGHT_DECAY = 0.05
MIN_LR_FRACTION = 0.01  # cosine schedule decays to base_lr / 100
