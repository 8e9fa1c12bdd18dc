"""Three-stage training loop: round-robin modality sampling, per-stage loss
activation and freezing, warmup-cosine LR schedule, AdamW stepping,
neighborhood-loss warmup gating, and full checkpointing."""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Iterable

import numpy as np
import torch

from . import losses, serialization
from .config import (
    MIN_LR_FRACTION,
    MS_MODALITIES,
    WEIGHT_DECAY,
    Modality,
    ModelVariantConfig,
    StageConfig,
)
from .data import PairedDataset, PairedSample
from .errors import CheckpointError, ConfigurationError
from .memory_queue import EmbeddingQueue
from .model import (
    AlignmentModel,
    build_model,
    group_checksums,
    set_trainable,
    trainable_parameters,
)

# Fixed-weight validation objective used for cross-stage comparisons
# (stage-local weights would make totals incommensurable between stages).
# The weights mirror the final stage's objective, minus the queue-dependent
# neighborhood term, so the total tracks what the curriculum ultimately
# optimizes.
VAL_WEIGHTS = {"distill": 0.5, "contrast": 1.5, "patch": 0.25}


def lr_at(step: int, total_steps: int, base_lr: float,
          warmup_fraction: float) -> float:
    """Linear ramp to ``base_lr`` over ceil(warmup_fraction * total_steps)
    steps, then cosine decay to ``base_lr / 100`` at ``total_steps``."""
    step = max(0, min(step, total_steps))
    warm = math.ceil(warmup_fraction * total_steps)
    if step < warm:
        return base_lr * step / warm
    min_lr = base_lr * MIN_LR_FRACTION
    if total_steps <= warm:
        return base_lr
    progress = (step - warm) / (total_steps - warm)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * progress))


class RoundRobinSampler:
    """Cycles NIR -> SWIR -> LWIR per batch; modalities whose samples run out
    are skipped for the remainder of the epoch."""

    CYCLE = (Modality.NIR, Modality.SWIR, Modality.LWIR)

    def __init__(self, sizes: dict[Modality, int], batch_size: int, seed: int):
        if all(sizes.get(m, 0) == 0 for m in self.CYCLE):
            raise ConfigurationError("all modality datasets are empty")
        self.sizes = {m: sizes.get(m, 0) for m in self.CYCLE}
        self.batch_size = batch_size
        self.rng = np.random.default_rng([seed, 0x5A4D])
        self.in_epoch = False
        self.perms: dict[Modality, np.ndarray] = {}
        self.positions: dict[Modality, int] = {}
        self.cycle_pos = 0

    @property
    def steps_per_epoch(self) -> int:
        return sum(math.ceil(n / self.batch_size) for n in self.sizes.values())

    def start_epoch(self) -> None:
        self.perms = {m: self.rng.permutation(n) for m, n in self.sizes.items()}
        self.positions = {m: 0 for m in self.CYCLE}
        self.cycle_pos = 0
        self.in_epoch = True

    def next_batch(self) -> tuple[Modality, np.ndarray] | None:
        if not self.in_epoch:
            raise RuntimeError("next_batch called outside an epoch")
        for _ in range(len(self.CYCLE)):
            m = self.CYCLE[self.cycle_pos]
            self.cycle_pos = (self.cycle_pos + 1) % len(self.CYCLE)
            pos = self.positions[m]
            if pos < self.sizes[m]:
                idxs = self.perms[m][pos:pos + self.batch_size]
                self.positions[m] = pos + len(idxs)
                return m, idxs
        self.in_epoch = False
        return None

    # -- checkpoint plumbing --

    def state_meta(self) -> dict:
        return {
            "sizes": {int(m): n for m, n in self.sizes.items()},
            "batch_size": self.batch_size,
            "positions": {int(m): p for m, p in self.positions.items()},
            "cycle_pos": self.cycle_pos,
            "in_epoch": self.in_epoch,
            "rng_state": json.dumps(self.rng.bit_generator.state),
        }

    def state_tensors(self) -> dict[str, torch.Tensor]:
        return {
            f"sampler/perm_{int(m)}": torch.from_numpy(p.astype(np.int64))
            for m, p in self.perms.items()
        }

    @classmethod
    def from_state(cls, meta: dict, tensors: dict[str, torch.Tensor]) -> "RoundRobinSampler":
        sizes = {Modality(int(k)): v for k, v in meta["sizes"].items()}
        s = cls(sizes, meta["batch_size"], seed=0)
        s.rng.bit_generator.state = json.loads(meta["rng_state"])
        s.positions = {Modality(int(k)): v for k, v in meta["positions"].items()}
        s.cycle_pos = meta["cycle_pos"]
        s.in_epoch = meta["in_epoch"]
        s.perms = {}
        for m in cls.CYCLE:
            key = f"sampler/perm_{int(m)}"
            if key in tensors:
                s.perms[m] = tensors[key].numpy().copy()
        return s


def _stack(samples: list[PairedSample], idxs: Iterable[int]) -> tuple[torch.Tensor, torch.Tensor]:
    picked = [samples[i] for i in idxs]
    rgb = torch.from_numpy(np.stack([s.rgb for s in picked]))
    ms = torch.from_numpy(np.stack([s.ms for s in picked]))
    return rgb, ms


def _build_optimizer(params: list[tuple[str, torch.nn.Parameter]],
                     lr: float) -> tuple[list[str], torch.optim.AdamW]:
    """AdamW over the trainable parameters, decoupled weight decay 0.05.

    Returns the parameter-name order matching the optimizer's state_dict
    indexing, for checkpoint round-trips.
    """
    opt = torch.optim.AdamW([p for _, p in params], lr=lr,
                            weight_decay=WEIGHT_DECAY)
    return [n for n, _ in params], opt


def _retrieval_rank(sims: np.ndarray, true_idx: int) -> int:
    """Rank of the true gallery item; ties broken toward lower index."""
    t = sims[true_idx]
    better = int((sims > t).sum())
    tied_lower = int((sims[:true_idx] == t).sum())
    return better + tied_lower


class Trainer:
    """Holds mutable training state and drives one or more stages.

    The loop is logically sequential: each step observes all effects of the
    previous one, including queue pushes. Checkpoints capture model,
    optimizer moments, queue, sampler, RNG, and counters, so a restore
    mid-stage replays the identical metric stream in deterministic mode.
    """

    def __init__(self, model: AlignmentModel, dataset: PairedDataset,
                 seed: int, deterministic: bool = True,
                 disabled_losses: frozenset[str] = frozenset(),
                 metrics_path: Path | str | None = None):
        self.model = model
        self.dataset = dataset
        self.seed = seed
        self.deterministic = deterministic
        self.disabled = frozenset(disabled_losses)
        unknown = self.disabled - {"distill", "contrast", "patch", "neighborhood"}
        if unknown:
            raise ConfigurationError(f"unknown losses to disable: {sorted(unknown)}")
        self.metrics_path = Path(metrics_path) if metrics_path else None

        self.g_patch = torch.Generator().manual_seed(seed * 7919 + 11)
        # the teacher is frozen and the dataset fixed, so teacher CLS rows are
        # a pure function of (split, modality) and are computed once
        self._teacher_cls_cache: dict[tuple[str, str], torch.Tensor] = {}
        self.queue: EmbeddingQueue | None = None
        self.optimizer: torch.optim.AdamW | None = None
        self.sampler: RoundRobinSampler | None = None
        self.stage_cfg: StageConfig | None = None
        self.epoch = 0
        self.step_in_stage = 0
        self.global_step = 0
        self.best: dict | None = None
        self.best_blob: bytes | None = None
        self.metrics: list[dict] = []

    # ------------------------------------------------------------------
    # Stage driving

    def _begin_stage(self, cfg: StageConfig) -> None:
        self.stage_cfg = cfg
        self.epoch = 0
        self.step_in_stage = 0
        self.best = None
        self.best_blob = None
        self.freeze_report = set_trainable(self.model, cfg.freeze)
        params = trainable_parameters(self.model)
        # fresh optimizer per stage: the trainable set changes between stages
        self._opt_param_names, self.optimizer = _build_optimizer(
            params, cfg.base_lr
        )
        sizes = self.dataset.split_sizes("train")
        self.sampler = RoundRobinSampler(sizes, cfg.batch_size,
                                         seed=self.seed * 31 + len(cfg.stage))
        if cfg.weights.lambda_a is not None and self.queue is None:
            self.queue = EmbeddingQueue(cfg.queue_capacity,
                                        self.model.cfg.embed_dim)

    def run_stage(self, cfg: StageConfig, max_steps: int | None = None) -> list[dict]:
        """Run (or continue) one stage; returns the metric records emitted.

        ``max_steps`` bounds the optimizer steps taken in this call so tests
        can interrupt mid-stage and resume from a checkpoint.
        """
        resuming = (self.stage_cfg is not None
                    and self.stage_cfg.stage == cfg.stage
                    and (self.step_in_stage > 0 or self.epoch > 0))
        if not resuming:
            self._begin_stage(cfg)
        first = len(self.metrics)
        steps_this_call = 0
        total_steps = cfg.epochs * self.sampler.steps_per_epoch
        while self.epoch < cfg.epochs:
            if not self.sampler.in_epoch:
                self.sampler.start_epoch()
            if max_steps is not None and steps_this_call >= max_steps:
                return self.metrics[first:]
            nb = self.sampler.next_batch()
            if nb is None:
                self._end_epoch(cfg)
                continue
            self._train_step(cfg, total_steps, *nb)
            steps_this_call += 1
        return self.metrics[first:]

    def _active_terms(self, cfg: StageConfig) -> tuple[set[str], bool]:
        base = {"distill", "contrast", "patch"} - self.disabled
        la_enabled = (cfg.weights.lambda_a is not None
                      and "neighborhood" not in self.disabled)
        la_live = la_enabled and self.epoch >= cfg.la_warmup_epochs
        if la_live:
            base.add("neighborhood")
        return base, la_enabled

    def _teacher_cls(self, split: str, m: Modality) -> torch.Tensor:
        key = (split, m.name)
        if key not in self._teacher_cls_cache:
            samples = self.dataset.split(split)[m]
            rgb, _ = _stack(samples, range(len(samples)))
            with torch.no_grad():
                self._teacher_cls_cache[key] = self.model.teacher_forward(rgb).cls
        return self._teacher_cls_cache[key]

    def _train_step(self, cfg: StageConfig, total_steps: int,
                    m: Modality, idxs: np.ndarray) -> None:
        train = self.dataset.split("train")
        rgb, ms = _stack(train[m], idxs)
        w = cfg.weights

        zt_cls = self._teacher_cls("train", m)[list(idxs)]  # constants
        ms_b = self.model.student_forward(ms, m)

        active, la_enabled = self._active_terms(cfg)
        rgb_b = None
        if active & {"contrast", "patch"}:  # the only RGB-side consumers
            rgb_b = self.model.student_forward(rgb, Modality.RGB)
        terms: dict[str, torch.Tensor] = {}
        if "distill" in active:
            terms["distill"] = losses.distill_loss(ms_b.cls, zt_cls)
        if "contrast" in active:
            terms["contrast"] = losses.contrastive_loss(rgb_b.cls, ms_b.cls, w.tau)
        if "patch" in active:
            terms["patch"] = losses.patch_loss(rgb_b.patches, ms_b.patches,
                                               w.patch_sample_ratio, self.g_patch)
        if "neighborhood" in active:
            if self.queue is None or self.queue.fill == 0:
                raise RuntimeError(
                    "internal gating bug: neighborhood loss live with an "
                    "empty teacher queue"
                )
            terms["neighborhood"] = losses.neighborhood_kl(
                zt_cls, ms_b.cls, self.queue, w.top_k, w.tau
            )
        report = losses.total_loss(terms, w, active)

        lr = lr_at(self.step_in_stage, total_steps, cfg.base_lr,
                   cfg.warmup_fraction)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.zero_grad(set_to_none=True)
        report.total.backward()
        self.optimizer.step()

        if la_enabled:  # queue updates after each optimizer step
            self.queue.push(zt_cls)

        record = {
            "kind": "step",
            "stage": cfg.stage,
            "epoch": self.epoch,
            "step": self.step_in_stage,
            "global_step": self.global_step,
            "modality": m.name,
            "lr": lr,
            **report.scalars(),
        }
        self._emit(record)
        self.step_in_stage += 1
        self.global_step += 1

    def _end_epoch(self, cfg: StageConfig) -> None:
        is_last = self.epoch == cfg.epochs - 1
        if is_last or (self.epoch + 1) % cfg.val_every == 0:
            val = self.validate(cfg)
            self._emit({
                "kind": "val", "stage": cfg.stage, "epoch": self.epoch,
                "step": self.step_in_stage, "global_step": self.global_step,
                **val,
            })
            key = (val["retrieval_top1_mean"], -val["val_total"])
            if self.best is None or key > (self.best["retrieval_top1_mean"],
                                           -self.best["val_total"]):
                self.best = {"epoch": self.epoch, "stage": cfg.stage, **val}
                self.best_blob = self.checkpoint()
        self.epoch += 1

    def _emit(self, record: dict) -> None:
        self.metrics.append(record)
        if self.metrics_path is not None:
            with self.metrics_path.open("a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    # ------------------------------------------------------------------
    # Validation

    def validate(self, cfg: StageConfig | None = None) -> dict:
        """Fixed-weight validation loss plus cross-modal retrieval top-1.

        Uses no shared RNG (full patch set), so it never perturbs training
        determinism.
        """
        tau = (cfg.weights.tau if cfg is not None else 0.07)
        val = self.dataset.split("val")
        totals, top1s, report = [], [], {}
        with torch.no_grad():
            for m in MS_MODALITIES:
                samples = val[m]
                if not samples:
                    continue
                rgb, ms = _stack(samples, range(len(samples)))
                zt = self._teacher_cls("val", m)
                ms_b = self.model.student_forward(ms, m)
                rgb_b = self.model.student_forward(rgb, Modality.RGB)
                gen = torch.Generator().manual_seed(0)  # ratio 1.0: order-free
                d = losses.distill_loss(ms_b.cls, zt)
                c = losses.contrastive_loss(rgb_b.cls, ms_b.cls, tau)
                p = losses.patch_loss(rgb_b.patches, ms_b.patches, 1.0, gen)
                total = (VAL_WEIGHTS["distill"] * d + VAL_WEIGHTS["contrast"] * c
                         + VAL_WEIGHTS["patch"] * p)
                totals.append(float(total))

                sims = (torch.nn.functional.normalize(ms_b.cls, dim=-1)
                        @ torch.nn.functional.normalize(rgb_b.cls, dim=-1).t()).numpy()
                hits = sum(_retrieval_rank(sims[i], i) == 0
                           for i in range(len(samples)))
                top1 = hits / len(samples)
                top1s.append(top1)
                report[f"val_total_{m.name}"] = float(total)
                report[f"retrieval_top1_{m.name}"] = top1
        report["val_total"] = float(np.mean(totals))
        report["retrieval_top1_mean"] = float(np.mean(top1s))
        return report

    # ------------------------------------------------------------------
    # Checkpointing

    def checkpoint(self, model_only: bool = False) -> bytes:
        tensors: dict[str, torch.Tensor] = {
            f"model/{k}": v for k, v in self.model.state_dict().items()
        }
        meta: dict = {
            "kind": "model" if model_only else "train",
            "variant": self.model.cfg.to_dict(),
            "model_seed": self.model.seed,
            "seed": self.seed,
            "deterministic": self.deterministic,
            "group_checksums": group_checksums(self.model),
            "stage": self.stage_cfg.to_dict() if self.stage_cfg else None,
            "epoch": self.epoch,
            "step_in_stage": self.step_in_stage,
            "global_step": self.global_step,
            "best": self.best,
            "disabled_losses": sorted(self.disabled),
        }
        if not model_only:
            tensors["rng/patch"] = self.g_patch.get_state()
            if self.queue is not None:
                meta["queue"] = self.queue.state_meta()
                tensors.update(self.queue.state_tensors())
            if self.sampler is not None:
                meta["sampler"] = self.sampler.state_meta()
                tensors.update(self.sampler.state_tensors())
            if self.optimizer is not None:
                meta["opt_param_names"] = self._opt_param_names
                state = self.optimizer.state_dict()["state"]
                for i in range(len(self._opt_param_names)):
                    if i in state:
                        for key in ("step", "exp_avg", "exp_avg_sq"):
                            t = state[i][key]
                            if not isinstance(t, torch.Tensor):
                                t = torch.tensor(float(t))
                            tensors[f"opt/{i}/{key}"] = t
        return serialization.pack(meta, tensors)

    @classmethod
    def from_checkpoint(cls, blob: bytes, dataset: PairedDataset,
                        metrics_path: Path | str | None = None,
                        disabled_losses: frozenset[str] | None = None,
                        ) -> "Trainer":
        meta, tensors = serialization.unpack(blob)
        if meta.get("kind") != "train":
            raise CheckpointError(
                f"cannot resume training from a {meta.get('kind')!r} checkpoint; "
                "optimizer state is absent"
            )
        model = load_model_from(meta, tensors)
        if disabled_losses is None:
            disabled_losses = frozenset(meta["disabled_losses"])
        tr = cls(model, dataset, seed=meta["seed"],
                 deterministic=meta["deterministic"],
                 disabled_losses=disabled_losses,
                 metrics_path=metrics_path)
        tr.epoch = meta["epoch"]
        tr.step_in_stage = meta["step_in_stage"]
        tr.global_step = meta["global_step"]
        tr.best = meta["best"]
        tr.g_patch.set_state(tensors["rng/patch"])
        if meta.get("queue") is not None:
            tr.queue = EmbeddingQueue.from_state(meta["queue"], tensors)
        if meta.get("sampler") is not None:
            tr.sampler = RoundRobinSampler.from_state(meta["sampler"], tensors)
        if meta.get("stage") is not None:
            cfg = StageConfig.from_dict(meta["stage"])
            tr.stage_cfg = cfg
            tr.freeze_report = set_trainable(model, cfg.freeze)
            params = trainable_parameters(model)
            tr._opt_param_names, tr.optimizer = _build_optimizer(
                params, cfg.base_lr
            )
            if tr._opt_param_names != meta.get("opt_param_names"):
                raise CheckpointError("optimizer parameter layout mismatch")
            state = {}
            for i in range(len(params)):
                entry = {}
                for key in ("step", "exp_avg", "exp_avg_sq"):
                    k = f"opt/{i}/{key}"
                    if k in tensors:
                        entry[key] = tensors[k]
                if entry:
                    state[i] = entry
            sd = tr.optimizer.state_dict()
            sd["state"] = state
            tr.optimizer.load_state_dict(sd)
        return tr


def load_model_from(meta: dict, tensors: dict[str, torch.Tensor]) -> AlignmentModel:
    cfg = ModelVariantConfig.from_dict(meta["variant"])
    model = build_model(cfg, meta["model_seed"])
    state = {k[len("model/"):]: v for k, v in tensors.items()
             if k.startswith("model/")}
    model.load_state_dict(state)
    sums = group_checksums(model)
    if sums != meta["group_checksums"]:
        bad = [k for k in sums if sums[k] != meta["group_checksums"].get(k)]
        raise CheckpointError(f"parameter checksum mismatch in groups {bad}")
    return model


def load_model_checkpoint(blob: bytes) -> tuple[AlignmentModel, dict]:
    """Model-only restore for evaluation; returns (model, meta)."""
    meta, tensors = serialization.unpack(blob)
    if meta.get("kind") not in ("model", "train"):
        raise CheckpointError(f"not a model checkpoint: kind={meta.get('kind')!r}")
    return load_model_from(meta, tensors), meta
