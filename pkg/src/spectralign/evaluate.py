"""Alignment diagnostics: paired-cosine and retrieval reports, embedding
export for external projection, concatenation fusion, and a frozen-backbone
linear probe."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn
from torch.nn import functional as F

from .config import MS_MODALITIES, WEIGHT_DECAY, Modality
from .data import NUM_CLASSES, PairedDataset
from .errors import ConfigurationError, ShapeError
from .model import AlignmentModel, EmbeddingBundle, group_checksums, xavier_uniform_

MIN_RETRIEVAL_SCENES = 10


def retrieval_rank(sims: np.ndarray, true_idx: int) -> int:
    """Rank of the true gallery item under descending similarity; ties go to
    the lower gallery index."""
    t = sims[true_idx]
    return int((sims > t).sum()) + int((sims[:true_idx] == t).sum())


def retrieval_accuracy(query: Tensor, gallery: Tensor,
                       ks: tuple[int, ...] = (1, 5)) -> dict[int, float]:
    """Cosine retrieval where query row i's true match is gallery row i."""
    q = F.normalize(query, dim=-1).numpy()
    g = F.normalize(gallery, dim=-1).numpy()
    sims = q @ g.T
    n = sims.shape[0]
    ranks = np.array([retrieval_rank(sims[i], i) for i in range(n)])
    return {k: float((ranks < k).mean()) for k in ks}


@dataclass
class AlignmentReport:
    stage_tag: str
    split: str
    n_scenes: dict[str, int] = field(default_factory=dict)
    mean_cosine: dict[str, float] = field(default_factory=dict)
    top1: dict[str, float] = field(default_factory=dict)
    top5: dict[str, float] = field(default_factory=dict)

    @property
    def top1_mean(self) -> float:
        return float(np.mean(list(self.top1.values())))

    def to_json(self) -> str:
        return json.dumps({
            "stage": self.stage_tag,
            "split": self.split,
            "n_scenes": self.n_scenes,
            "mean_cosine": self.mean_cosine,
            "retrieval_top1": self.top1,
            "retrieval_top5": self.top5,
            "retrieval_top1_mean": self.top1_mean,
        }, sort_keys=True, indent=2)


def split_embeddings(model: AlignmentModel, dataset: PairedDataset,
                     split: str) -> dict[Modality, tuple[Tensor, Tensor, list[int]]]:
    """(student RGB cls, student MS cls, scene ids) per modality on a split."""
    out = {}
    with torch.no_grad():
        for m in MS_MODALITIES:
            samples = dataset.split(split)[m]
            if not samples:
                continue
            rgb = torch.from_numpy(np.stack([s.rgb for s in samples]))
            ms = torch.from_numpy(np.stack([s.ms for s in samples]))
            rgb_cls = model.student_forward(rgb, Modality.RGB).cls
            ms_cls = model.student_forward(ms, m).cls
            out[m] = (rgb_cls, ms_cls, [s.scene_id for s in samples])
    return out


def alignment_report(model: AlignmentModel, dataset: PairedDataset,
                     split: str, stage_tag: str) -> AlignmentReport:
    """Per-modality paired CLS cosine and cross-modal retrieval accuracy."""
    report = AlignmentReport(stage_tag=stage_tag, split=split)
    for m, (rgb_cls, ms_cls, ids) in split_embeddings(model, dataset, split).items():
        if len(ids) < MIN_RETRIEVAL_SCENES:
            raise ConfigurationError(
                f"split {split!r} has {len(ids)} {m.name} scenes; "
                f"retrieval needs at least {MIN_RETRIEVAL_SCENES}"
            )
        cos = (F.normalize(rgb_cls, dim=-1) * F.normalize(ms_cls, dim=-1)).sum(-1)
        acc = retrieval_accuracy(ms_cls, rgb_cls)
        report.n_scenes[m.name] = len(ids)
        report.mean_cosine[m.name] = float(cos.mean())
        report.top1[m.name] = acc[1]
        report.top5[m.name] = acc[5]
    return report


def export_embeddings(model: AlignmentModel, dataset: PairedDataset, split: str,
                      path: Path | str, count: int = 100, seed: int = 0) -> Path:
    """Write (scene_id, modality, D floats) rows, RGB and MS per sampled
    pair, as tab-separated text for external projection tools."""
    path = Path(path)
    embs = split_embeddings(model, dataset, split)
    dim = model.cfg.embed_dim
    rng = np.random.default_rng(seed)
    with path.open("w") as fh:
        fh.write("scene_id\tmodality\t" +
                 "\t".join(f"d{i}" for i in range(dim)) + "\n")
        for m, (rgb_cls, ms_cls, ids) in embs.items():
            take = min(count, len(ids))
            picks = np.sort(rng.choice(len(ids), size=take, replace=False))
            for i in picks:
                for tag, z in (("RGB", rgb_cls[i]), (m.name, ms_cls[i])):
                    vals = "\t".join(f"{v:.8e}" for v in z.tolist())
                    fh.write(f"{ids[i]}\t{tag}\t{vals}\n")
    return path


# ---------------------------------------------------------------------------
# Concatenation fusion and the downstream linear probe


class ConcatFusion(nn.Module):
    """Concatenate paired token features to 2D, project back to D, then
    LayerNorm and GELU. Norm/activation can be bypassed for testing the
    projection in isolation."""

    def __init__(self, dim: int, seed: int = 0):
        super().__init__()
        self.proj = nn.Linear(2 * dim, dim)
        self.norm = nn.LayerNorm(dim)
        self.act = nn.GELU()
        gen = torch.Generator().manual_seed(seed)
        xavier_uniform_(self.proj.weight, gen)
        with torch.no_grad():
            self.proj.bias.zero_()

    def forward(self, rgb_tokens: Tensor, ms_tokens: Tensor,
                apply_norm: bool = True, apply_act: bool = True) -> Tensor:
        if rgb_tokens.shape != ms_tokens.shape:
            raise ShapeError(
                f"token shape mismatch {tuple(rgb_tokens.shape)} vs "
                f"{tuple(ms_tokens.shape)}"
            )
        fused = self.proj(torch.cat([rgb_tokens, ms_tokens], dim=-1))
        if apply_norm:
            fused = self.norm(fused)
        if apply_act:
            fused = self.act(fused)
        return fused


def concat_fuse(rgb_bundle: EmbeddingBundle, ms_bundle: EmbeddingBundle,
                fusion: ConcatFusion, **kw) -> Tensor:
    """Fuse full token sequences (CLS first, then patches)."""

    def tokens(b: EmbeddingBundle) -> Tensor:
        cls = b.cls.unsqueeze(-2)
        return torch.cat([cls, b.patches], dim=-2)

    return fusion(tokens(rgb_bundle), tokens(ms_bundle), **kw)


def train_probe(model: AlignmentModel, dataset: PairedDataset, m: Modality,
                seed: int = 0, epochs: int = 20, lr: float = 1e-3,
                batch_size: int = 32, eval_split: str = "val") -> dict:
    """Train a linear classifier on concat-fused CLS features to predict the
    dominant shape class; backbone, adapters, and fusion stay frozen."""
    before = group_checksums(model)
    train = dataset.split("train")[m]
    evals = dataset.split(eval_split)[m]
    if not train or not evals:
        raise ConfigurationError(f"no {m.name} samples for the probe")
    if any(s.label is None for s in train):
        raise ConfigurationError("probe requires labeled samples")

    fusion = ConcatFusion(model.cfg.embed_dim, seed=seed)
    for p in fusion.parameters():
        p.requires_grad_(False)

    def features(samples) -> tuple[Tensor, Tensor]:
        with torch.no_grad():
            rgb = torch.from_numpy(np.stack([s.rgb for s in samples]))
            ms = torch.from_numpy(np.stack([s.ms for s in samples]))
            rgb_b = model.student_forward(rgb, Modality.RGB)
            ms_b = model.student_forward(ms, m)
            fused = concat_fuse(rgb_b, ms_b, fusion)
        labels = torch.tensor([s.label for s in samples], dtype=torch.long)
        return fused[:, 0], labels  # CLS row

    x_train, y_train = features(train)
    x_eval, y_eval = features(evals)

    gen = torch.Generator().manual_seed(seed)
    head = nn.Linear(model.cfg.embed_dim, NUM_CLASSES)
    xavier_uniform_(head.weight, gen)
    with torch.no_grad():
        head.bias.zero_()
    opt = torch.optim.AdamW(head.parameters(), lr=lr, weight_decay=WEIGHT_DECAY)
    order_gen = torch.Generator().manual_seed(seed + 1)
    for _ in range(epochs):
        perm = torch.randperm(len(x_train), generator=order_gen)
        for start in range(0, len(perm), batch_size):
            idx = perm[start:start + batch_size]
            opt.zero_grad(set_to_none=True)
            loss = F.cross_entropy(head(x_train[idx]), y_train[idx])
            loss.backward()
            opt.step()

    with torch.no_grad():
        acc = float((head(x_eval).argmax(-1) == y_eval).float().mean())
    if group_checksums(model) != before:
        raise RuntimeError("probe mutated frozen model parameters")
    return {
        "modality": m.name,
        "accuracy": acc,
        "chance": 1.0 / NUM_CLASSES,
        "n_train": len(train),
        "n_eval": len(evals),
    }
