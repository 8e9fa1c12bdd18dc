"""Command-line entry points: generate | train | eval | export-embeddings |
probe | inspect-checkpoint."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import yaml

from . import serialization
from .config import MS_MODALITIES, Modality, VARIANTS
from .data import generate_dataset, load_dataset
from .errors import ConfigurationError
from .evaluate import alignment_report, export_embeddings, train_probe
from .pipeline import run_pipeline
from .trainer import load_model_checkpoint

_CONFIG_KEYS = {"variant", "seed", "data", "out", "deterministic", "stages"}
_STAGE_OVERRIDE_KEYS = {"epochs", "base_lr", "batch_size", "queue_capacity",
                        "val_every"}


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        cfg = yaml.safe_load(fh) or {}
    if not isinstance(cfg, dict):
        raise ConfigurationError(f"config {path} must be a mapping")
    unknown = set(cfg) - _CONFIG_KEYS
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    for stage, overrides in (cfg.get("stages") or {}).items():
        if stage not in ("I", "II", "III"):
            raise ConfigurationError(f"unknown stage key {stage!r} in config")
        bad = set(overrides) - _STAGE_OVERRIDE_KEYS
        if bad:
            raise ConfigurationError(
                f"unknown stage override keys for {stage}: {sorted(bad)}"
            )
    return cfg


def _floats(text: str, n: int, what: str) -> tuple[float, ...]:
    parts = tuple(float(p) for p in text.split(","))
    if len(parts) != n:
        raise ConfigurationError(f"{what} needs {n} comma-separated values")
    return parts


def cmd_generate(args) -> int:
    manifest = generate_dataset(
        n_scenes=args.scenes,
        split_fractions=_floats(args.split, 3, "--split"),
        seed=args.seed,
        out_dir=args.out,
        modality_ratios=_floats(args.modality_ratios, 3, "--modality-ratios"),
        image_size=args.image_size,
    )
    print(f"wrote {manifest}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    variant = args.variant or cfg.get("variant", "toy")
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    data = args.data or cfg.get("data")
    out = args.out or cfg.get("out")
    deterministic = (args.deterministic
                     if args.deterministic is not None
                     else cfg.get("deterministic", True))
    if data is None:
        raise ConfigurationError("no dataset manifest (--data or config 'data')")
    stages = tuple(s.strip() for s in args.stages.split(","))
    disabled = frozenset(
        s.strip() for s in args.disable_loss.split(",") if s.strip()
    ) if args.disable_loss else frozenset()
    resume_blob = Path(args.resume).read_bytes() if args.resume else None

    dataset = load_dataset(data)
    result = run_pipeline(
        variant=variant,
        dataset=dataset,
        seed=seed,
        stages=stages,
        stage_overrides=cfg.get("stages"),
        disabled_losses=disabled,
        deterministic=deterministic,
        out_dir=out,
        resume_blob=resume_blob,
    )
    for stage, report in result.stage_reports.items():
        print(f"stage {stage}: retrieval top-1 mean "
              f"{report.top1_mean:.4f}")
    return 0


def cmd_eval(args) -> int:
    model, meta = load_model_checkpoint(Path(args.checkpoint).read_bytes())
    dataset = load_dataset(args.data)
    stage = (meta.get("stage") or {}).get("stage", "init")
    report = alignment_report(model, dataset, args.split, stage_tag=stage)
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_export_embeddings(args) -> int:
    model, _ = load_model_checkpoint(Path(args.checkpoint).read_bytes())
    dataset = load_dataset(args.data)
    path = export_embeddings(model, dataset, args.split, args.out,
                             count=args.count, seed=args.seed or 0)
    print(f"wrote {path}")
    return 0


def cmd_probe(args) -> int:
    model, _ = load_model_checkpoint(Path(args.checkpoint).read_bytes())
    dataset = load_dataset(args.data)
    if args.modality == "all":
        mods = list(MS_MODALITIES)
    else:
        mods = [Modality[args.modality.upper()]]
    results = [
        train_probe(model, dataset, m, seed=args.seed or 0,
                    epochs=args.epochs, lr=args.lr)
        for m in mods
    ]
    print(json.dumps(results, indent=2))
    return 0


def cmd_inspect_checkpoint(args) -> int:
    meta, tensors = serialization.unpack(Path(args.checkpoint).read_bytes())
    summary = {
        "kind": meta.get("kind"),
        "variant": (meta.get("variant") or {}).get("name"),
        "stage": (meta.get("stage") or {}).get("stage"),
        "epoch": meta.get("epoch"),
        "global_step": meta.get("global_step"),
        "best": meta.get("best"),
        "queue_fill": (meta.get("queue") or {}).get("fill"),
        "n_tensors": len(tensors),
    }
    print(json.dumps(summary, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spectralign",
        description="Cross-spectral alignment training and diagnostics",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render a synthetic paired dataset")
    g.add_argument("--scenes", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--split", default="0.8,0.1,0.1")
    g.add_argument("--modality-ratios", default="1.0,1.0,1.0")
    g.add_argument("--image-size", type=int, default=64)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="run the staged curriculum")
    t.add_argument("--variant", choices=sorted(VARIANTS))
    t.add_argument("--stages", default="I,II,III")
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--data")
    t.add_argument("--out")
    t.add_argument("--resume")
    t.add_argument("--disable-loss", dest="disable_loss",
                   help="comma-separated loss terms to zero for the run")
    t.add_argument("--deterministic", action=argparse.BooleanOptionalAction,
                   default=None)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="alignment report on a held-out split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="val")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export-embeddings",
                       help="dump paired CLS embeddings for plotting")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--split", default="val")
    x.add_argument("--count", type=int, default=100)
    x.add_argument("--seed", type=int, default=0)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export_embeddings)

    p = sub.add_parser("probe", help="frozen-backbone linear probe")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--modality", default="all",
                   choices=["all", "nir", "swir", "lwir"])
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_probe)

    i = sub.add_parser("inspect-checkpoint", help="print checkpoint summary")
    i.add_argument("--checkpoint", required=True)
    i.set_defaults(func=cmd_inspect_checkpoint)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
