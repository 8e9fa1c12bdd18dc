"""Procedural paired multispectral scenes with a controlled spectral gap.

Each scene is a handful of flat-shaded shapes over a gray background,
rendered once per modality:

* RGB: shapes composited with their base colors.
* NIR: ``(0.2 R + 0.3 G + 0.5 B) ** 0.7`` - a reflectance-like band that
  stays strongly correlated with visible luminance.
* SWIR: ``0.8 (1 - luminance) + 0.2 R`` with Rec.601 luminance - partially
  inverted but still reflectance-driven.
* LWIR: per-shape constant emissivity over a 0.1 background, blurred with a
  sigma-2 Gaussian - emissive, decorrelated from visible texture by
  construction.

Every render gets additive Gaussian noise (sigma 0.01) seeded from
``scene_id ^ modality``, then clamps to [0, 1]. All constants are fixed so
datasets are a pure function of (seed, config).

On-disk format: one raster file per render (8-byte magic, dims, raw
little-endian float32) plus a line-delimited JSON manifest with per-file
sha256 checksums; see ``write_raster`` for the exact layout.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .config import MS_MODALITIES, Modality
from .errors import ConfigurationError

IMAGE_SIZE = 64
NOISE_STD = 0.01
LWIR_BACKGROUND = 0.1
LWIR_BLUR_SIGMA = 2.0
NUM_CLASSES = 4
# shapes with emissivity at or above this get the fourth ("hot") class
HOT_EMISSIVITY = 0.75

SHAPE_KINDS = ("disk", "rectangle", "triangle")

MANIFEST_NAME = "manifest"
RASTER_MAGIC = b"SARASTER"


@dataclass(frozen=True)
class Shape:
    kind: str
    center: tuple[float, float]   # (row, col)
    size: float                   # radius / half-extent
    color: tuple[float, float, float]
    emissivity: float
    label: int

    def area(self) -> float:
        if self.kind == "disk":
            return float(np.pi * self.size ** 2)
        if self.kind == "rectangle":
            return float(4.0 * self.size ** 2)
        return float(2.0 * self.size ** 2)  # triangle with base=height=2*size


@dataclass(frozen=True)
class SceneSpec:
    scene_id: int
    background: float
    shapes: tuple[Shape, ...]
    image_size: int = IMAGE_SIZE

    def __post_init__(self):
        if not (1 <= len(self.shapes) <= 5):
            raise ConfigurationError("a scene holds 1-5 shapes")
        for s in self.shapes:
            if s.kind not in SHAPE_KINDS:
                raise ConfigurationError(f"unknown shape kind {s.kind!r}")
            if not (0 <= s.label < NUM_CLASSES):
                raise ConfigurationError(f"label {s.label} outside [0, {NUM_CLASSES})")
            r, c = s.center
            if not (s.size <= r <= self.image_size - s.size
                    and s.size <= c <= self.image_size - s.size):
                raise ConfigurationError("shape does not fit inside the image")

    def dominant_label(self) -> int:
        return max(self.shapes, key=lambda s: s.area()).label


@dataclass
class PairedSample:
    rgb: np.ndarray            # (3, H, W) float32 in [0, 1]
    ms: np.ndarray             # (1, H, W) float32 in [0, 1]
    modality: Modality
    scene_id: int
    label: int                 # dominant-shape class


# ---------------------------------------------------------------------------
# Rendering


def _shape_mask(shape: Shape, size: int) -> np.ndarray:
    rr, cc = np.mgrid[0:size, 0:size].astype(np.float64)
    r0, c0 = shape.center
    s = shape.size
    if shape.kind == "disk":
        return (rr - r0) ** 2 + (cc - c0) ** 2 <= s ** 2
    if shape.kind == "rectangle":
        return (np.abs(rr - r0) <= s) & (np.abs(cc - c0) <= s)
    # upward triangle: apex (r0 - s, c0), base corners (r0 + s, c0 -/+ s)
    inside = rr <= r0 + s
    # left edge from apex to bottom-left, right edge mirror
    inside &= (cc - c0) >= -(rr - (r0 - s)) / 2.0
    inside &= (cc - c0) <= (rr - (r0 - s)) / 2.0
    return inside


def _composite(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Clean RGB composite (3, H, W) and the emissivity map (H, W)."""
    size = spec.image_size
    rgb = np.full((3, size, size), spec.background, dtype=np.float64)
    emis = np.full((size, size), LWIR_BACKGROUND, dtype=np.float64)
    for shape in spec.shapes:  # later shapes draw over earlier ones
        mask = _shape_mask(shape, size)
        for ch in range(3):
            rgb[ch][mask] = shape.color[ch]
        emis[mask] = shape.emissivity
    return rgb, emis


def render_scene(spec: SceneSpec, m: Modality) -> np.ndarray:
    """Deterministic render of one scene in one modality.

    Returns (3, H, W) for RGB and (1, H, W) for the single-channel bands.
    """
    m = Modality(m)
    rgb, emis = _composite(spec)
    if m == Modality.RGB:
        img = rgb
    elif m == Modality.NIR:
        band = 0.2 * rgb[0] + 0.3 * rgb[1] + 0.5 * rgb[2]
        img = (band ** 0.7)[None]
    elif m == Modality.SWIR:
        lum = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
        img = ((1.0 - lum) * 0.8 + 0.2 * rgb[0])[None]
    else:  # LWIR
        img = gaussian_filter(emis, sigma=LWIR_BLUR_SIGMA)[None]
    rng = np.random.default_rng(spec.scene_id ^ int(m))
    img = img + rng.normal(0.0, NOISE_STD, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# Scene specs


def make_scene_spec(seed: int, scene_id: int, image_size: int = IMAGE_SIZE) -> SceneSpec:
    rng = np.random.default_rng([seed, scene_id])
    background = float(rng.uniform(0.1, 0.9))
    shapes = []
    for _ in range(int(rng.integers(2, 5))):
        kind_idx = int(rng.integers(0, len(SHAPE_KINDS)))
        size = float(rng.uniform(0.12, 0.28) * image_size)
        center = (
            float(rng.uniform(size, image_size - size)),
            float(rng.uniform(size, image_size - size)),
        )
        color = tuple(float(c) for c in rng.random(3))
        # keep shapes luminance-separated from the background so every band
        # sees them; low-contrast draws are mirrored to the other side
        lum = 0.299 * color[0] + 0.587 * color[1] + 0.114 * color[2]
        if abs(lum - background) < 0.25:
            color = tuple(1.0 - c for c in color)
        emissivity = float(rng.random())
        label = 3 if emissivity >= HOT_EMISSIVITY else kind_idx
        shapes.append(Shape(SHAPE_KINDS[kind_idx], center, size, color,
                            emissivity, label))
    return SceneSpec(scene_id, background, tuple(shapes), image_size)


# ---------------------------------------------------------------------------
# Raster file format


def write_raster(path: Path, arr: np.ndarray) -> str:
    """Write a float32 raster; returns the payload sha256.

    Layout: 8-byte magic, uint32 ndim, uint32 per dim, then raw
    little-endian float32 data.
    """
    arr = np.ascontiguousarray(arr, dtype="<f4")
    header = RASTER_MAGIC + struct.pack("<I", arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    raw = header + arr.tobytes()
    path.write_bytes(raw)
    return hashlib.sha256(raw).hexdigest()


def read_raster(path: Path, expect_sha256: str | None = None) -> np.ndarray:
    raw = path.read_bytes()
    if expect_sha256 is not None and hashlib.sha256(raw).hexdigest() != expect_sha256:
        raise IOError(f"checksum mismatch for {path}")
    if raw[:8] != RASTER_MAGIC:
        raise IOError(f"{path}: not a raster file")
    (ndim,) = struct.unpack("<I", raw[8:12])
    shape = struct.unpack(f"<{ndim}I", raw[12:12 + 4 * ndim])
    data = np.frombuffer(raw[12 + 4 * ndim:], dtype="<f4")
    if data.size != int(np.prod(shape)):
        raise IOError(f"{path}: truncated raster payload")
    return data.reshape(shape).copy()


# ---------------------------------------------------------------------------
# Dataset generation and loading

_MOD_SUFFIX = {
    Modality.RGB: "rgb",
    Modality.NIR: "nir",
    Modality.SWIR: "swir",
    Modality.LWIR: "lwir",
}


def generate_dataset(
    n_scenes: int,
    split_fractions: tuple[float, float, float],
    seed: int,
    out_dir: Path | str,
    modality_ratios: tuple[float, float, float] = (1.0, 1.0, 1.0),
    image_size: int = IMAGE_SIZE,
) -> Path:
    """Render ``n_scenes`` scenes to ``out_dir``; returns the manifest path.

    ``split_fractions`` are (train, val, test) proportions over disjoint
    scene ids. ``modality_ratios`` trims per-modality pair counts
    (NIR, SWIR, LWIR) to mimic unequal corpora.
    """
    if abs(sum(split_fractions) - 1.0) > 1e-9:
        raise ConfigurationError("split fractions must sum to 1")
    out = Path(out_dir)
    scenes_dir = out / "scenes"
    scenes_dir.mkdir(parents=True, exist_ok=True)

    split_rng = np.random.default_rng([seed, 0xC0FFEE])
    order = split_rng.permutation(n_scenes)
    n_train = int(round(split_fractions[0] * n_scenes))
    n_val = int(round(split_fractions[1] * n_scenes))
    split_of = {}
    for pos, sid in enumerate(order):
        split_of[int(sid)] = ("train" if pos < n_train
                              else "val" if pos < n_train + n_val else "test")

    counts = {m: int(round(r * n_scenes))
              for m, r in zip(MS_MODALITIES, modality_ratios)}

    records = []
    for sid in range(n_scenes):
        spec = make_scene_spec(seed, sid, image_size)
        mods = [Modality.RGB] + [m for m in MS_MODALITIES if sid < counts[m]]
        files = {}
        for m in mods:
            name = f"{sid:06d}_{_MOD_SUFFIX[m]}"
            digest = write_raster(scenes_dir / name, render_scene(spec, m))
            files[_MOD_SUFFIX[m]] = {"path": f"scenes/{name}", "sha256": digest}
        records.append({
            "type": "scene",
            "id": sid,
            "split": split_of[sid],
            "label": spec.dominant_label(),
            "files": files,
        })

    manifest = out / MANIFEST_NAME
    with manifest.open("w") as fh:
        fh.write(json.dumps({
            "type": "header",
            "version": 1,
            "seed": seed,
            "n_scenes": n_scenes,
            "image_size": image_size,
            "split_fractions": list(split_fractions),
            "modality_ratios": list(modality_ratios),
        }, sort_keys=True) + "\n")
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return manifest


class PairedDataset:
    """Loaded dataset: per-split, per-modality lists of PairedSample.

    Samples come back in manifest order; shuffling belongs to the sampler.
    """

    def __init__(self, manifest_path: Path | str,
                 modalities: tuple[Modality, ...] = MS_MODALITIES):
        manifest_path = Path(manifest_path)
        if not manifest_path.exists():
            raise IOError(f"manifest not found: {manifest_path}")
        root = manifest_path.parent
        self.samples: dict[str, dict[Modality, list[PairedSample]]] = {}
        with manifest_path.open() as fh:
            header = json.loads(fh.readline())
            if header.get("type") != "header":
                raise IOError(f"{manifest_path}: missing manifest header")
            self.image_size = header["image_size"]
            self.header = header
            for line in fh:
                rec = json.loads(line)
                split = rec["split"]
                per_split = self.samples.setdefault(
                    split, {m: [] for m in modalities})
                rgb_ref = rec["files"]["rgb"]
                rgb = read_raster(root / rgb_ref["path"], rgb_ref["sha256"])
                for m in modalities:
                    ref = rec["files"].get(_MOD_SUFFIX[m])
                    if ref is None:
                        continue
                    ms = read_raster(root / ref["path"], ref["sha256"])
                    per_split[m].append(PairedSample(
                        rgb=rgb, ms=ms, modality=m,
                        scene_id=rec["id"], label=rec["label"],
                    ))

    def split(self, name: str) -> dict[Modality, list[PairedSample]]:
        if name not in self.samples:
            raise KeyError(f"split {name!r} not present (have {sorted(self.samples)})")
        return self.samples[name]

    def split_sizes(self, name: str) -> dict[Modality, int]:
        return {m: len(v) for m, v in self.split(name).items()}


def load_dataset(manifest_path: Path | str,
                 modalities: tuple[Modality, ...] = MS_MODALITIES) -> PairedDataset:
    return PairedDataset(manifest_path, modalities)
