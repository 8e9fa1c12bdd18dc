"""Shared ViT backbone with modality stems, per-block adapters, and
modality embeddings, plus a frozen teacher copy of the backbone.

The teacher is a frozen snapshot of the backbone taken at seeded
initialization, before any modality-specific component diverges; it sees
RGB only and goes straight through patch embedding (no stem, no adapters,
no modality embedding).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Sequence

import torch
from torch import Tensor, nn

from .config import MS_MODALITIES, FreezeSpec, Modality, ModelVariantConfig
from .errors import ConfigurationError, RoutingError, ShapeError

INSTANCE_NORM_EPS = 1e-5
ADAPTER_INIT_STD = 0.01
# images arrive in [0, 1]; centering removes the DC component that the frozen
# random patch embedding would otherwise smear across every token
INPUT_OFFSET = 0.5


# ---------------------------------------------------------------------------
# Seeded initialization helpers. torch's nn.init does not thread a generator
# through, so these reimplement the two schemes we need on top of the
# generator-aware in-place samplers.

def _fan_in_out(w: Tensor) -> tuple[int, int]:
    if w.dim() == 2:
        fan_out, fan_in = w.shape
        return fan_in, fan_out
    receptive = w[0][0].numel()
    return w.shape[1] * receptive, w.shape[0] * receptive


def xavier_uniform_(w: Tensor, gen: torch.Generator) -> None:
    fan_in, fan_out = _fan_in_out(w)
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    with torch.no_grad():
        w.uniform_(-bound, bound, generator=gen)


def normal_(w: Tensor, std: float, gen: torch.Generator) -> None:
    with torch.no_grad():
        w.normal_(0.0, std, generator=gen)


def zero_(w: Tensor) -> None:
    with torch.no_grad():
        w.zero_()


# ---------------------------------------------------------------------------
# Components


@dataclass
class EmbeddingBundle:
    """Forward-pass output: CLS row(s) plus patch-token rows."""

    cls: Tensor      # (B, D)
    patches: Tensor  # (B, N, D)
    modality: Modality

    def __post_init__(self):
        if not torch.isfinite(self.cls).all() or not torch.isfinite(self.patches).all():
            raise ValueError("embedding bundle contains non-finite values")


class RgbStem(nn.Module):
    """1x1 conv, 3 -> 3 channels, initialized to exact identity."""

    def __init__(self):
        super().__init__()
        self.conv = nn.Conv2d(3, 3, kernel_size=1)

    def reset(self, gen: torch.Generator) -> None:
        with torch.no_grad():
            self.conv.weight.copy_(torch.eye(3).view(3, 3, 1, 1))
            self.conv.bias.zero_()

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != 3:
            raise ShapeError(f"RGB stem expects 3 channels, got {x.shape[1]}")
        return self.conv(x)


class SpatialStem(nn.Module):
    """Conv3x3 (1->16), GELU, Conv3x3 (16->3), then per-channel instance norm."""

    def __init__(self):
        super().__init__()
        self.conv1 = nn.Conv2d(1, 16, kernel_size=3, padding=1)
        self.conv2 = nn.Conv2d(16, 3, kernel_size=3, padding=1)
        self.act = nn.GELU()

    def reset(self, gen: torch.Generator) -> None:
        xavier_uniform_(self.conv1.weight, gen)
        zero_(self.conv1.bias)
        xavier_uniform_(self.conv2.weight, gen)
        zero_(self.conv2.bias)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != 1:
            raise ShapeError(f"spatial stem expects 1 channel, got {x.shape[1]}")
        if x.shape[-2] < 3 or x.shape[-1] < 3:
            raise ShapeError(f"input smaller than the 3x3 kernel: {tuple(x.shape)}")
        y = self.conv2(self.act(self.conv1(x)))
        mean = y.mean(dim=(-2, -1), keepdim=True)
        var = y.var(dim=(-2, -1), unbiased=False, keepdim=True)
        return (y - mean) / torch.sqrt(var + INSTANCE_NORM_EPS)


class Adapter(nn.Module):
    """Bottleneck residual MLP: up(GELU(down(h))); caller adds it to h."""

    def __init__(self, dim: int):
        super().__init__()
        self.down = nn.Linear(dim, dim // 4)
        self.up = nn.Linear(dim // 4, dim)
        self.act = nn.GELU()

    def reset(self, gen: torch.Generator) -> None:
        normal_(self.down.weight, ADAPTER_INIT_STD, gen)
        normal_(self.up.weight, ADAPTER_INIT_STD, gen)
        zero_(self.down.bias)
        zero_(self.up.bias)

    @property
    def weight_count(self) -> int:
        # weights only; biases reported separately
        return self.down.weight.numel() + self.up.weight.numel()

    def forward(self, h: Tensor) -> Tensor:
        return self.up(self.act(self.down(h)))


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def reset(self, gen: torch.Generator) -> None:
        xavier_uniform_(self.qkv.weight, gen)
        zero_(self.qkv.bias)
        xavier_uniform_(self.proj.weight, gen)
        zero_(self.proj.bias)

    def forward(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.num_heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)
        self.act = nn.GELU()

    def reset(self, gen: torch.Generator) -> None:
        for norm in (self.norm1, self.norm2):
            with torch.no_grad():
                norm.weight.fill_(1.0)
                norm.bias.zero_()
        self.attn.reset(gen)
        xavier_uniform_(self.fc1.weight, gen)
        zero_(self.fc1.bias)
        xavier_uniform_(self.fc2.weight, gen)
        zero_(self.fc2.bias)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.fc2(self.act(self.fc1(self.norm2(x))))


class Backbone(nn.Module):
    """Patch embedding, CLS token, positional embeddings, blocks, final norm."""

    def __init__(self, cfg: ModelVariantConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.patch_embed = nn.Conv2d(3, d, kernel_size=cfg.patch_size,
                                     stride=cfg.patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.num_patches + 1, d))
        self.blocks = nn.ModuleList(
            Block(d, cfg.num_heads, cfg.mlp_ratio) for _ in range(cfg.depth)
        )
        self.norm = nn.LayerNorm(d)

    def reset(self, gen: torch.Generator) -> None:
        xavier_uniform_(self.patch_embed.weight, gen)
        zero_(self.patch_embed.bias)
        normal_(self.cls_token, 0.02, gen)
        normal_(self.pos_embed, 0.02, gen)
        for blk in self.blocks:
            blk.reset(gen)
        with torch.no_grad():
            self.norm.weight.fill_(1.0)
            self.norm.bias.zero_()

    def tokens(self, x3: Tensor) -> Tensor:
        """Patch-embed a 3-channel image and prepend CLS + positions."""
        if x3.shape[-2] != self.cfg.image_size or x3.shape[-1] != self.cfg.image_size:
            raise ShapeError(
                f"expected {self.cfg.image_size}x{self.cfg.image_size} input, "
                f"got {tuple(x3.shape[-2:])}"
            )
        p = self.patch_embed(x3)                     # (B, D, g, g)
        p = p.flatten(2).transpose(1, 2)             # (B, N, D)
        cls = self.cls_token.expand(p.shape[0], -1, -1)
        return torch.cat([cls, p], dim=1) + self.pos_embed


class AlignmentModel(nn.Module):
    """Student (stems + shared backbone + adapters + modality table) and a
    frozen teacher snapshot of the same backbone."""

    def __init__(self, cfg: ModelVariantConfig, seed: int):
        super().__init__()
        self.cfg = cfg
        self.seed = seed
        d = cfg.embed_dim
        gen = torch.Generator().manual_seed(seed)

        self.backbone = Backbone(cfg)
        self.rgb_stem = RgbStem()
        self.ms_stems = nn.ModuleDict(
            {m.name: SpatialStem() for m in MS_MODALITIES}
        )
        self.adapters = nn.ModuleList(
            nn.ModuleList(Adapter(d) for _ in range(cfg.num_modalities))
            for _ in range(cfg.depth)
        )
        self.modality_embed = nn.Parameter(torch.zeros(cfg.num_modalities, d))

        # Deterministic init in a fixed traversal order.
        self.backbone.reset(gen)
        self.rgb_stem.reset(gen)
        for m in MS_MODALITIES:
            self.ms_stems[m.name].reset(gen)
        for per_block in self.adapters:
            for adapter in per_block:
                adapter.reset(gen)
        # modality table starts at zero so conditioning is a no-op at init

        # Teacher: frozen copy of the backbone as initialized.
        self.teacher = Backbone(cfg)
        self.teacher.load_state_dict(self.backbone.state_dict())
        for p in self.teacher.parameters():
            p.requires_grad_(False)

    # -- stems --------------------------------------------------------------

    def stem(self, x: Tensor, m: Modality) -> Tensor:
        if m == Modality.RGB:
            return self.rgb_stem(x)
        if x.shape[1] != 1:
            raise ShapeError(
                f"{m.name} input must be single-channel, got {x.shape[1]}"
            )
        return self.ms_stems[m.name](x)

    def spatial_stem_forward(self, x: Tensor, m: Modality) -> Tensor:
        if m == Modality.RGB:
            raise RoutingError("RGB is served by the 1x1 stem, not a spatial stem")
        return self.ms_stems[m.name](x)

    # -- adapters -----------------------------------------------------------

    def adapter_delta(self, h: Tensor, block: int, m: Modality) -> Tensor:
        if not (0 <= block < self.cfg.depth):
            raise RoutingError(f"block index {block} out of range")
        return self.adapters[block][int(m)](h)

    # -- forward passes -----------------------------------------------------

    def student_forward(self, x: Tensor, m: Modality) -> EmbeddingBundle:
        m = Modality(m)
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        tokens = self.backbone.tokens(self.stem(x - INPUT_OFFSET, m))
        tokens = tokens + self.modality_embed[int(m)]
        for block, per_block in zip(self.backbone.blocks, self.adapters):
            h = block(tokens)
            tokens = h + per_block[int(m)](h)
        tokens = self.backbone.norm(tokens)
        cls, patches = tokens[:, 0], tokens[:, 1:]
        if squeeze:
            cls, patches = cls.squeeze(0), patches.squeeze(0)
        return EmbeddingBundle(cls=cls, patches=patches, modality=m)

    def student_forward_mixed(
        self,
        images: Sequence[Tensor],
        modalities: Sequence[Modality],
        deterministic: bool = True,
    ) -> list[EmbeddingBundle]:
        """Forward a mixed-modality batch, preserving input order.

        Samples are grouped by modality and each group routed through its
        adapter set. In deterministic mode each sample runs as its own
        sub-batch so results are bit-identical to unbatched forwards
        (CPU convolutions are not batch-size invariant at the last bit).
        """
        if len(images) != len(modalities):
            raise ShapeError("images and modalities length mismatch")
        out: list[EmbeddingBundle | None] = [None] * len(images)
        groups: dict[Modality, list[int]] = {}
        for i, m in enumerate(modalities):
            groups.setdefault(Modality(m), []).append(i)
        for m, idxs in groups.items():
            if deterministic:
                for i in idxs:
                    out[i] = self.student_forward(images[i], m)
            else:
                batch = torch.stack([images[i] for i in idxs])
                bundle = self.student_forward(batch, m)
                for pos, i in enumerate(idxs):
                    out[i] = EmbeddingBundle(
                        cls=bundle.cls[pos], patches=bundle.patches[pos], modality=m
                    )
        return out  # type: ignore[return-value]

    def teacher_forward(self, x: Tensor) -> EmbeddingBundle:
        if x.dim() == 3:
            x = x.unsqueeze(0)
        if x.shape[1] != 3:
            raise ShapeError(f"teacher expects RGB input, got {x.shape[1]} channels")
        with torch.no_grad():
            tokens = self.teacher.tokens(x - INPUT_OFFSET)
            for block in self.teacher.blocks:
                tokens = block(tokens)
            tokens = self.teacher.norm(tokens)
        return EmbeddingBundle(cls=tokens[:, 0], patches=tokens[:, 1:],
                               modality=Modality.RGB)


def build_model(cfg: ModelVariantConfig, seed: int) -> AlignmentModel:
    """Deterministically seeded construction; same (cfg, seed) -> identical
    parameters."""
    return AlignmentModel(cfg, seed)


# ---------------------------------------------------------------------------
# Parameter groups, freezing, and checksums


def parameter_groups(model: AlignmentModel) -> dict[str, list[tuple[str, nn.Parameter]]]:
    """Named trainability groups over the student's parameters."""
    groups: dict[str, list[tuple[str, nn.Parameter]]] = {
        "stem_rgb": list(model.rgb_stem.named_parameters(prefix="rgb_stem")),
        "patch_embed": list(
            model.backbone.patch_embed.named_parameters(prefix="backbone.patch_embed")
        ),
        "pos_cls": [
            ("backbone.cls_token", model.backbone.cls_token),
            ("backbone.pos_embed", model.backbone.pos_embed),
        ],
        "adapters": list(model.adapters.named_parameters(prefix="adapters")),
        "modality_embed": [("modality_embed", model.modality_embed)],
        "final_norm": list(model.backbone.norm.named_parameters(prefix="backbone.norm")),
    }
    for m in MS_MODALITIES:
        groups[f"stem_{m.name.lower()}"] = list(
            model.ms_stems[m.name].named_parameters(prefix=f"ms_stems.{m.name}")
        )
    for i, blk in enumerate(model.backbone.blocks):
        groups[f"block_{i}"] = list(
            blk.named_parameters(prefix=f"backbone.blocks.{i}")
        )
    return groups


def set_trainable(model: AlignmentModel, spec: FreezeSpec) -> dict[str, int]:
    """Mark exactly the named groups trainable; returns trainable parameter
    counts per group (zero for frozen groups)."""
    depth = model.cfg.depth
    if not (0 <= spec.unfrozen_blocks <= depth):
        raise ConfigurationError(
            f"unfrozen_blocks {spec.unfrozen_blocks} outside [0, {depth}]"
        )
    trainable_groups = set()
    if spec.train_adapters:
        trainable_groups.add("adapters")
    if spec.train_modality_embed:
        trainable_groups.add("modality_embed")
    if spec.train_final_norm:
        trainable_groups.add("final_norm")
    for m in spec.train_stems:
        trainable_groups.add("stem_rgb" if m == Modality.RGB
                             else f"stem_{Modality(m).name.lower()}")
    for i in range(depth - spec.unfrozen_blocks, depth):
        trainable_groups.add(f"block_{i}")

    report: dict[str, int] = {}
    for name, params in parameter_groups(model).items():
        on = name in trainable_groups
        count = 0
        for _, p in params:
            p.requires_grad_(on)
            count += p.numel() if on else 0
        report[name] = count
    return report


def trainable_parameters(model: AlignmentModel) -> list[tuple[str, nn.Parameter]]:
    """(name, param) pairs currently marked trainable, in group order."""
    out = []
    for _, params in sorted(parameter_groups(model).items()):
        out.extend((n, p) for n, p in params if p.requires_grad)
    return out


def group_checksums(model: AlignmentModel) -> dict[str, str]:
    """sha256 over each group's raw parameter bytes, in name order."""
    sums = {}
    for gname, params in parameter_groups(model).items():
        h = hashlib.sha256()
        for pname, p in sorted(params):
            h.update(pname.encode())
            h.update(p.detach().cpu().contiguous().numpy().tobytes())
        sums[gname] = h.hexdigest()
    h = hashlib.sha256()
    for pname, p in sorted(model.teacher.named_parameters()):
        h.update(pname.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    sums["teacher"] = h.hexdigest()
    return sums


def adapter_weight_count(embed_dim: int) -> int:
    """Weights-only parameter count of one adapter (biases excluded)."""
    return 2 * embed_dim * (embed_dim // 4)


def adapter_accounting(model: AlignmentModel) -> dict[str, int]:
    """Adapter instance and parameter totals, with and without biases."""
    cfg = model.cfg
    instances = cfg.depth * cfg.num_modalities
    per_weights = adapter_weight_count(cfg.embed_dim)
    per_biases = cfg.adapter_bottleneck + cfg.embed_dim
    return {
        "instances": instances,
        "weights_per_adapter": per_weights,
        "total_weights": instances * per_weights,
        "total_with_biases": instances * (per_weights + per_biases),
    }
