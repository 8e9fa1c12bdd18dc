"""Multi-stage orchestration shared by the CLI and the test suite."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .config import VARIANTS, StageConfig, stage_config_with, stage_presets
from .data import PairedDataset
from .errors import ConfigurationError
from .evaluate import AlignmentReport, alignment_report
from .model import build_model
from .trainer import Trainer

STAGE_ORDER = ("I", "II", "III")


def write_atomic(path: Path, blob: bytes) -> None:
    """Write via a temp file and rename so readers never see a torn file."""
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)


@dataclass
class PipelineResult:
    trainer: Trainer
    stage_checkpoints: dict[str, bytes] = field(default_factory=dict)
    stage_reports: dict[str, AlignmentReport] = field(default_factory=dict)
    metrics: list[dict] = field(default_factory=list)


def _validate_stage_order(stages: tuple[str, ...], resuming: bool) -> None:
    if not stages:
        raise ConfigurationError("no stages requested")
    for s in stages:
        if s not in STAGE_ORDER:
            raise ConfigurationError(f"unknown stage {s!r}")
    idxs = [STAGE_ORDER.index(s) for s in stages]
    if idxs != sorted(idxs) or len(set(idxs)) != len(idxs):
        raise ConfigurationError(f"stages must be in order, got {stages}")
    if idxs != list(range(idxs[0], idxs[0] + len(idxs))):
        raise ConfigurationError(f"stages must be contiguous, got {stages}")
    if idxs[0] != 0 and not resuming:
        raise ConfigurationError(
            f"stage {stages[0]} requires a checkpoint from stage "
            f"{STAGE_ORDER[idxs[0] - 1]}; pass a resume checkpoint"
        )


def run_pipeline(
    variant: str,
    dataset: PairedDataset,
    seed: int,
    stages: tuple[str, ...] = STAGE_ORDER,
    stage_overrides: dict[str, dict] | None = None,
    disabled_losses: frozenset[str] = frozenset(),
    deterministic: bool = True,
    out_dir: Path | str | None = None,
    resume_blob: bytes | None = None,
    eval_split: str = "val",
) -> PipelineResult:
    """Run the requested stages in order.

    Each stage delivers its best validation checkpoint (selected on
    retrieval, ties broken by validation loss) as the stage artifact and
    report; the trainer itself continues into the next stage from its final
    state so the optimization trajectory is uninterrupted.
    """
    _validate_stage_order(tuple(stages), resume_blob is not None)
    if variant not in VARIANTS:
        raise ConfigurationError(f"unknown variant {variant!r}")

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.jsonl" if out is not None else None

    if resume_blob is not None:
        trainer = Trainer.from_checkpoint(
            resume_blob, dataset, metrics_path=metrics_path,
            # an explicit non-empty set overrides whatever the checkpoint
            # recorded; the default keeps the checkpoint's own setting
            disabled_losses=disabled_losses or None,
        )
    else:
        model = build_model(VARIANTS[variant], seed)
        trainer = Trainer(model, dataset, seed=seed,
                          deterministic=deterministic,
                          disabled_losses=disabled_losses,
                          metrics_path=metrics_path)

    presets = stage_presets(variant)
    result = PipelineResult(trainer=trainer)
    for stage in stages:
        cfg: StageConfig = presets[stage]
        if stage_overrides and stage in stage_overrides:
            cfg = stage_config_with(cfg, **stage_overrides[stage])
        trainer.run_stage(cfg)
        # the stage delivers its best validation checkpoint; training itself
        # continues from the final state so the trajectory stays smooth
        blob = trainer.best_blob if trainer.best_blob is not None else trainer.checkpoint()
        best_trainer = Trainer.from_checkpoint(blob, dataset)
        result.stage_checkpoints[stage] = blob
        result.stage_reports[stage] = alignment_report(
            best_trainer.model, dataset, eval_split, stage_tag=stage
        )
        if out is not None:
            write_atomic(out / f"stage_{stage}.ckpt", blob)
        result.trainer = trainer
    result.metrics = trainer.metrics
    return result
