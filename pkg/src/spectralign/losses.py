"""The four alignment objectives and the stage-weighted total loss.

All losses are differentiable torch functions of their student-side inputs;
teacher-side inputs and queue entries are detached internally so gradients
never flow into them. Near-zero-norm rows raise instead of being clamped:
silent clamping would mask representation collapse.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import Tensor
from torch.nn import functional as F

from .config import LossWeights
from .errors import ConfigurationError, DegenerateEmbeddingError, ShapeError
from .memory_queue import EmbeddingQueue

_NORM_FLOOR = 1e-12


def _checked_normalize(z: Tensor, what: str) -> Tensor:
    norms = z.norm(dim=-1, keepdim=True)
    if (norms < _NORM_FLOOR).any():
        raise DegenerateEmbeddingError(f"near-zero-norm row in {what}")
    return z / norms


def distill_loss(z_ms: Tensor, z_teacher: Tensor) -> Tensor:
    """1 - mean batch cosine between student MS and teacher embeddings.

    The teacher side is treated as a constant. Result lies in [0, 2].
    """
    if z_ms.shape != z_teacher.shape:
        raise ShapeError(f"shape mismatch {tuple(z_ms.shape)} vs {tuple(z_teacher.shape)}")
    zm = _checked_normalize(z_ms, "z_ms")
    zt = _checked_normalize(z_teacher.detach(), "z_teacher")
    return 1.0 - (zm * zt).sum(dim=-1).mean()


def contrastive_loss(z_rgb: Tensor, z_ms: Tensor, tau: float = 0.07) -> Tensor:
    """Symmetric InfoNCE over in-batch negatives.

    Both directions use the full similarity row as the denominator,
    diagonal included.
    """
    if tau <= 0:
        raise ConfigurationError(f"tau must be positive, got {tau}")
    if z_rgb.shape != z_ms.shape:
        raise ShapeError(f"shape mismatch {tuple(z_rgb.shape)} vs {tuple(z_ms.shape)}")
    zr = _checked_normalize(z_rgb, "z_rgb")
    zm = _checked_normalize(z_ms, "z_ms")
    logits = zr @ zm.t() / tau                      # (B, B)
    targets = torch.arange(logits.shape[0], device=logits.device)
    loss_r2m = F.cross_entropy(logits, targets)
    loss_m2r = F.cross_entropy(logits.t(), targets)
    return 0.5 * (loss_r2m + loss_m2r)


def sample_patch_indices(n: int, ratio: float, gen: torch.Generator) -> Tensor:
    """max(1, floor(ratio*n)) indices without replacement, shared across the
    batch for one call."""
    if not (0 < ratio <= 1):
        raise ConfigurationError(f"patch ratio must be in (0, 1], got {ratio}")
    s = max(1, int(ratio * n))
    return torch.randperm(n, generator=gen)[:s]


def patch_loss(p_rgb: Tensor, p_ms: Tensor, ratio: float,
               gen: torch.Generator) -> Tensor:
    """1 - mean cosine over a shared random subset of corresponding patch
    tokens; sampling comes from ``gen`` so calls are reproducible."""
    if p_rgb.shape != p_ms.shape:
        raise ShapeError(f"shape mismatch {tuple(p_rgb.shape)} vs {tuple(p_ms.shape)}")
    idx = sample_patch_indices(p_rgb.shape[-2], ratio, gen)
    pr = _checked_normalize(p_rgb[..., idx, :], "p_rgb")
    pm = _checked_normalize(p_ms[..., idx, :], "p_ms")
    return 1.0 - (pr * pm).sum(dim=-1).mean()


def neighborhood_kl(z_teacher: Tensor, z_ms: Tensor, queue: EmbeddingQueue,
                    k: int, tau: float = 0.07) -> Tensor:
    """Mean KL between teacher and student similarity distributions over the
    teacher's top-k queue neighbors.

    Neighbor selection uses teacher similarities only; gradients flow to
    ``z_ms`` alone. ``k`` is capped at the current queue fill.
    """
    if tau <= 0:
        raise ConfigurationError(f"tau must be positive, got {tau}")
    zt = _checked_normalize(z_teacher.detach(), "z_teacher")
    zm = _checked_normalize(z_ms, "z_ms")
    idx, sims_t = queue.top_k(zt, k)                # raises QueueEmptyError
    neighbors = queue.buffer[idx].to(zm.dtype)      # (B, k_eff, D), constants
    sims_m = torch.einsum("bkd,bd->bk", neighbors, zm)
    log_p_t = F.log_softmax(sims_t.to(zm.dtype) / tau, dim=-1)
    log_p_m = F.log_softmax(sims_m / tau, dim=-1)
    p_t = log_p_t.exp()
    # softmax support is strictly positive, so no p_t = 0 limit terms arise
    return (p_t * (log_p_t - log_p_m)).sum(dim=-1).mean()


@dataclass
class LossReport:
    """Weighted total plus per-term values; inactive terms are absent."""

    total: Tensor
    terms: dict[str, Tensor]
    active: frozenset[str]
    applied_weights: dict[str, float] = field(default_factory=dict)

    def scalars(self) -> dict[str, float]:
        out = {"total": float(self.total.detach())}
        out.update({name: float(v.detach()) for name, v in self.terms.items()})
        return out


def total_loss(terms: dict[str, Tensor], weights: LossWeights,
               active: frozenset[str] | set[str] | None = None) -> LossReport:
    """Weighted sum of the active terms."""
    active = frozenset(active) if active is not None else weights.active_terms
    unknown = active - {"distill", "contrast", "patch", "neighborhood"}
    if unknown:
        raise ConfigurationError(f"unknown loss terms: {sorted(unknown)}")
    missing = active - set(terms)
    if missing:
        raise ConfigurationError(f"active terms missing values: {sorted(missing)}")
    applied: dict[str, float] = {}
    total: Tensor | float = 0.0
    for name in sorted(active):
        lam = weights.weight_of(name)
        if lam is None:
            raise ConfigurationError(f"term {name!r} is active but has no weight")
        applied[name] = lam
        total = total + lam * terms[name]
    if not isinstance(total, Tensor):
        total = torch.tensor(total)
    return LossReport(
        total=total,
        terms={n: terms[n] for n in sorted(active)},
        active=frozenset(active),
        applied_weights=applied,
    )
