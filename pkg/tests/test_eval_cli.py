"""Alignment diagnostics, concat fusion, the linear probe, and the CLI."""

import json

import numpy as np
import pytest
import torch
import yaml

import oracles
from spectralign.cli import main
from spectralign.config import VARIANTS, Modality
from spectralign.data import PairedSample
from spectralign.errors import ConfigurationError, ShapeError
from spectralign.evaluate import (
    ConcatFusion,
    alignment_report,
    concat_fuse,
    export_embeddings,
    retrieval_accuracy,
    retrieval_rank,
    train_probe,
)
from spectralign.model import build_model, group_checksums
from spectralign.trainer import Trainer

TOY = VARIANTS["toy"]


@pytest.fixture(scope="module")
def toy_model():
    return build_model(TOY, seed=11)


# ---------------------------------------------------------------------------
# Retrieval


def test_retrieval_matches_naive_oracle(rng):
    q = torch.from_numpy(rng.standard_normal((30, 8)).astype(np.float32))
    g = torch.from_numpy(rng.standard_normal((30, 8)).astype(np.float32))
    acc = retrieval_accuracy(q, g)
    assert acc[1] == oracles.retrieval_top1_oracle(q.double().numpy(),
                                                   g.double().numpy())
    assert 0.0 <= acc[1] <= acc[5] <= 1.0


def test_retrieval_tie_rule():
    row = torch.tensor([[1.0, 0.0]])
    same = row.repeat(5, 1)  # degenerate: all embeddings identical
    acc = retrieval_accuracy(same, same)
    # every query ties across the gallery; only index 0 wins its tie
    assert acc[1] == pytest.approx(0.2)
    assert retrieval_rank(np.array([0.5, 0.5, 0.5]), 2) == 2
    assert retrieval_rank(np.array([0.5, 0.9, 0.5]), 0) == 1


def test_alignment_report_fields(small_dataset, toy_model):
    report = alignment_report(toy_model, small_dataset, "val", stage_tag="I")
    assert report.stage_tag == "I" and report.split == "val"
    for m in ("NIR", "SWIR", "LWIR"):
        assert -1.0 <= report.mean_cosine[m] <= 1.0
        assert 0.0 <= report.top1[m] <= report.top5[m] <= 1.0
        assert report.n_scenes[m] == 10
    parsed = json.loads(report.to_json())
    assert set(parsed) == {"stage", "split", "n_scenes", "mean_cosine",
                           "retrieval_top1", "retrieval_top5",
                           "retrieval_top1_mean"}


def test_alignment_report_small_split_rejected(toy_model, tmp_path):
    from spectralign.data import generate_dataset, load_dataset

    manifest = generate_dataset(12, (0.5, 0.5, 0.0), seed=1,
                                out_dir=tmp_path / "d")
    tiny = load_dataset(manifest)
    with pytest.raises(ConfigurationError, match="at least 10"):
        alignment_report(toy_model, tiny, "val", stage_tag="I")


# ---------------------------------------------------------------------------
# Embedding export


def test_export_embeddings(small_dataset, toy_model, tmp_path):
    p1 = export_embeddings(toy_model, small_dataset, "val", tmp_path / "a.tsv",
                           count=4, seed=9)
    lines = p1.read_text().splitlines()
    header = lines[0].split("\t")
    assert header[:2] == ["scene_id", "modality"]
    assert len(header) == 2 + TOY.embed_dim
    # 4 pairs x 2 rows (RGB + MS) x 3 modalities
    assert len(lines) == 1 + 4 * 2 * 3
    p2 = export_embeddings(toy_model, small_dataset, "val", tmp_path / "b.tsv",
                           count=4, seed=9)
    assert p1.read_bytes() == p2.read_bytes()
    # count above split size degrades to every available pair
    p3 = export_embeddings(toy_model, small_dataset, "val", tmp_path / "c.tsv",
                           count=100, seed=9)
    assert len(p3.read_text().splitlines()) == 1 + 10 * 2 * 3


# ---------------------------------------------------------------------------
# Concat fusion


def test_concat_fusion_selector(rng):
    d = 16
    fusion = ConcatFusion(d, seed=0)
    with torch.no_grad():
        fusion.proj.weight.copy_(torch.cat([torch.eye(d), torch.zeros(d, d)],
                                           dim=1))
        fusion.proj.bias.zero_()
    a = torch.from_numpy(rng.standard_normal((5, d)).astype(np.float32))
    b = torch.from_numpy(rng.standard_normal((5, d)).astype(np.float32))
    out = fusion(a, b, apply_norm=False, apply_act=False)
    assert torch.allclose(out, a, atol=1e-6)


def test_concat_fusion_shapes_and_asymmetry(toy_model, rng):
    x = torch.from_numpy(rng.random((1, 3, 64, 64)).astype(np.float32))
    y = torch.from_numpy(rng.random((1, 1, 64, 64)).astype(np.float32))
    with torch.no_grad():
        rgb_b = toy_model.student_forward(x, Modality.RGB)
        ms_b = toy_model.student_forward(y, Modality.NIR)
    fusion = ConcatFusion(TOY.embed_dim, seed=3)
    fused = concat_fuse(rgb_b, ms_b, fusion)
    assert fused.shape == (1, 65, 64)  # CLS + 64 patches, width D
    swapped = concat_fuse(ms_b, rgb_b, fusion)
    assert not torch.allclose(fused, swapped)
    with pytest.raises(ShapeError):
        fusion(torch.zeros(2, 8, 64), torch.zeros(2, 7, 64))


# ---------------------------------------------------------------------------
# Linear probe


def test_probe_reports_and_freeze(small_dataset, toy_model):
    before = group_checksums(toy_model)
    result = train_probe(toy_model, small_dataset, Modality.NIR, seed=0,
                         epochs=3)
    assert result["chance"] == 0.25
    assert 0.0 <= result["accuracy"] <= 1.0
    assert result["n_train"] == 20 and result["n_eval"] == 10
    assert group_checksums(toy_model) == before


def test_probe_requires_labels(small_dataset, toy_model):
    samples = small_dataset.split("train")[Modality.NIR]
    stripped = [PairedSample(s.rgb, s.ms, s.modality, s.scene_id, None)
                for s in samples]

    class NoLabels:
        def split(self, name):
            if name == "train":
                return {Modality.NIR: stripped}
            return small_dataset.split(name)

    with pytest.raises(ConfigurationError, match="label"):
        train_probe(toy_model, NoLabels(), Modality.NIR, seed=0, epochs=1)


# ---------------------------------------------------------------------------
# CLI


@pytest.fixture(scope="module")
def cli_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli-data")
    assert main(["generate", "--scenes", "30", "--seed", "5",
                 "--out", str(out), "--split", "0.67,0.33,0.0"]) == 0
    return out / "manifest"


def test_cli_generate_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["generate", "--scenes", "6", "--seed", "2",
                     "--out", str(out)]) == 0
    assert (a / "manifest").read_bytes() == (b / "manifest").read_bytes()


def test_cli_generate_bad_out(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    rc = main(["generate", "--scenes", "2", "--seed", "0",
               "--out", str(blocker / "sub")])
    assert rc == 1
    assert "error:" in capsys.readouterr().err


def test_cli_train_eval_roundtrip(cli_dataset, tmp_path, capsys):
    out = tmp_path / "run"
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(yaml.safe_dump({
        "stages": {"I": {"epochs": 1, "batch_size": 8, "queue_capacity": 64,
                         "val_every": 1},
                   "II": {"epochs": 1, "batch_size": 8, "queue_capacity": 64},
                   "III": {"epochs": 1, "batch_size": 8, "queue_capacity": 64,
                           "val_every": 1}},
    }))
    rc = main(["train", "--variant", "toy", "--seed", "1",
               "--data", str(cli_dataset), "--out", str(out),
               "--config", str(cfg)])
    assert rc == 0
    for stage in ("I", "II", "III"):
        assert (out / f"stage_{stage}.ckpt").exists()
    metrics = [json.loads(l) for l in (out / "metrics.jsonl").read_text().splitlines()]
    assert any(r["kind"] == "step" and r["stage"] == "III" for r in metrics)
    capsys.readouterr()

    rc = main(["eval", "--checkpoint", str(out / "stage_III.ckpt"),
               "--data", str(cli_dataset), "--split", "val"])
    assert rc == 0
    report = json.loads(capsys.readouterr().out)
    assert report["stage"] == "III"

    rc = main(["inspect-checkpoint", "--checkpoint",
               str(out / "stage_II.ckpt")])
    assert rc == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["variant"] == "toy" and summary["stage"] == "II"

    rc = main(["export-embeddings", "--checkpoint", str(out / "stage_I.ckpt"),
               "--data", str(cli_dataset), "--count", "3",
               "--out", str(tmp_path / "emb.tsv")])
    assert rc == 0
    assert (tmp_path / "emb.tsv").exists()


def test_cli_disable_loss(cli_dataset, tmp_path, capsys):
    out = tmp_path / "run"
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(yaml.safe_dump({
        "stages": {"I": {"epochs": 1, "batch_size": 8, "queue_capacity": 64}},
    }))
    rc = main(["train", "--variant", "toy", "--seed", "1", "--stages", "I",
               "--data", str(cli_dataset), "--out", str(out),
               "--config", str(cfg), "--disable-loss", "patch"])
    assert rc == 0
    capsys.readouterr()
    metrics = [json.loads(l) for l in (out / "metrics.jsonl").read_text().splitlines()]
    steps = [r for r in metrics if r["kind"] == "step"]
    assert steps and all("patch" not in r for r in steps)


def test_cli_unknown_config_key(cli_dataset, tmp_path, capsys):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(yaml.safe_dump({"stages": {"I": {"momentum": 0.9}}}))
    rc = main(["train", "--variant", "toy", "--data", str(cli_dataset),
               "--config", str(cfg)])
    assert rc == 1
    assert "momentum" in capsys.readouterr().err

    cfg.write_text(yaml.safe_dump({"learning_rate": 1.0}))
    rc = main(["train", "--variant", "toy", "--data", str(cli_dataset),
               "--config", str(cfg)])
    assert rc == 1
    assert "learning_rate" in capsys.readouterr().err


def test_cli_stage_three_requires_resume(cli_dataset, capsys):
    rc = main(["train", "--variant", "toy", "--stages", "III",
               "--data", str(cli_dataset)])
    assert rc == 1
    assert "checkpoint" in capsys.readouterr().err


def test_cli_probe(cli_dataset, tmp_path, capsys):
    # a model-only artifact is enough for the probe: build and save one
    from spectralign.data import load_dataset

    ds = load_dataset(cli_dataset)
    trainer = Trainer(build_model(TOY, seed=2), ds, seed=2)
    blob = trainer.checkpoint()
    ckpt = tmp_path / "init.ckpt"
    ckpt.write_bytes(blob)
    rc = main(["probe", "--checkpoint", str(ckpt), "--data", str(cli_dataset),
               "--modality", "nir", "--epochs", "2"])
    assert rc == 0
    results = json.loads(capsys.readouterr().out)
    assert results[0]["modality"] == "NIR" and results[0]["chance"] == 0.25
