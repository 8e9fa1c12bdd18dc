"""Model construction, stems, adapters, routing, freezing, and the teacher."""

import numpy as np
import pytest
import torch

from spectralign.config import VARIANTS, Modality
from spectralign.errors import ConfigurationError, RoutingError, ShapeError
from spectralign.model import (
    Adapter,
    adapter_accounting,
    adapter_weight_count,
    build_model,
    group_checksums,
    parameter_groups,
    set_trainable,
)

TOY = VARIANTS["toy"]


@pytest.fixture(scope="module")
def toy_model():
    return build_model(TOY, seed=7)


def _rand_images(rng, n, channels, size=64):
    return torch.from_numpy(
        rng.random((n, channels, size, size)).astype(np.float32))


# ---------------------------------------------------------------------------
# Construction and accounting


def test_build_determinism():
    a = build_model(TOY, seed=7)
    b = build_model(TOY, seed=7)
    assert group_checksums(a) == group_checksums(b)
    c = build_model(TOY, seed=8)
    assert group_checksums(a) != group_checksums(c)


def test_adapter_weight_counts():
    assert adapter_weight_count(768) == 294_912
    assert adapter_weight_count(64) == 2 * 64 * 16 == 2_048
    # the formula is grounded in the actual module parameters
    adapter = Adapter(64)
    assert adapter.weight_count == 2_048
    assert Adapter(768).weight_count == 294_912


def test_adapter_instances(toy_model):
    acc = adapter_accounting(toy_model)
    assert acc["instances"] == 4 * 4 == 16
    assert acc["weights_per_adapter"] == 2_048
    assert acc["total_weights"] == 16 * 2_048
    assert acc["total_with_biases"] == 16 * (2_048 + 64 + 16)
    # instance count is depth x 4 modalities for every variant
    assert VARIANTS["vit-b"].depth * VARIANTS["vit-b"].num_modalities == 48
    # verify against the live module tree
    n_live = sum(len(per_block) for per_block in toy_model.adapters)
    assert n_live == 16


# ---------------------------------------------------------------------------
# RGB stem


def test_rgb_stem_identity_at_init(toy_model, rng):
    x = _rand_images(rng, 2, 3)
    y = toy_model.rgb_stem(x)
    assert torch.equal(y, x)


def test_rgb_stem_linearity(toy_model, rng):
    x = _rand_images(rng, 1, 3)
    stem = build_model(TOY, seed=7).rgb_stem
    with torch.no_grad():
        stem.conv.weight.copy_(2.0 * torch.eye(3).view(3, 3, 1, 1))
    assert torch.allclose(stem(x), 2.0 * x)


def test_rgb_stem_matches_matrix_oracle(rng):
    stem = build_model(TOY, seed=7).rgb_stem
    w = torch.from_numpy(rng.standard_normal((3, 3)).astype(np.float32))
    b = torch.from_numpy(rng.standard_normal(3).astype(np.float32))
    with torch.no_grad():
        stem.conv.weight.copy_(w.view(3, 3, 1, 1))
        stem.conv.bias.copy_(b)
    x = _rand_images(rng, 1, 3, size=8)
    got = stem(x)
    # per-pixel 3x3 matrix multiply, one pixel at a time
    expect = torch.empty_like(got)
    for r in range(8):
        for c in range(8):
            expect[0, :, r, c] = w @ x[0, :, r, c] + b
    assert torch.allclose(got, expect, atol=1e-6)


def test_rgb_stem_channel_check(toy_model):
    with pytest.raises(ShapeError):
        toy_model.rgb_stem(torch.zeros(1, 1, 8, 8))


# ---------------------------------------------------------------------------
# Spatial stems


def test_spatial_stem_constant_input_zero_biases(toy_model):
    # zero input with zero biases gives a constant (zero) pre-norm map at
    # every pixel, including the zero-padded borders; instance norm maps a
    # constant map to zero
    x = torch.zeros(1, 1, 16, 16)
    y = toy_model.spatial_stem_forward(x, Modality.NIR)
    assert torch.allclose(y, torch.zeros_like(y), atol=1e-4)


def test_spatial_stem_output_statistics(toy_model, rng):
    # scale the input up so the normalization epsilon is negligible next to
    # the pre-norm channel variance
    x = 10.0 * _rand_images(rng, 2, 1)
    y = toy_model.spatial_stem_forward(x, Modality.SWIR)
    assert y.shape == (2, 3, 64, 64)
    mean = y.mean(dim=(-2, -1))
    var = y.var(dim=(-2, -1), unbiased=False)
    assert mean.abs().max() < 1e-5
    assert (var - 1.0).abs().max() < 1e-3


def test_spatial_stem_per_modality_parameters(toy_model, rng):
    x = _rand_images(rng, 1, 1)
    y_nir = toy_model.spatial_stem_forward(x, Modality.NIR)
    y_lwir = toy_model.spatial_stem_forward(x, Modality.LWIR)
    assert not torch.allclose(y_nir, y_lwir)


def test_spatial_stem_errors(toy_model):
    with pytest.raises(RoutingError):
        toy_model.spatial_stem_forward(torch.zeros(1, 3, 8, 8), Modality.RGB)
    with pytest.raises(ShapeError):
        toy_model.spatial_stem_forward(torch.zeros(1, 3, 8, 8), Modality.NIR)
    with pytest.raises(ShapeError):
        toy_model.spatial_stem_forward(torch.zeros(1, 1, 2, 2), Modality.NIR)


# ---------------------------------------------------------------------------
# Adapters


def test_adapter_zero_up_projection(toy_model, rng):
    model = build_model(TOY, seed=7)
    adapter = model.adapters[0][int(Modality.NIR)]
    with torch.no_grad():
        adapter.up.weight.zero_()
        adapter.up.bias.zero_()
    h = torch.from_numpy(rng.standard_normal((5, 64)).astype(np.float32))
    delta = model.adapter_delta(h, 0, Modality.NIR)
    assert torch.equal(delta, torch.zeros_like(delta))


def test_adapter_lookup_errors(toy_model):
    h = torch.zeros(2, 64)
    with pytest.raises(RoutingError):
        toy_model.adapter_delta(h, TOY.depth, Modality.NIR)
    with pytest.raises(RoutingError):
        toy_model.adapter_delta(h, -1, Modality.NIR)


@pytest.mark.parametrize("dim", [64, 768])
def test_adapter_near_identity_residual(dim, rng):
    gen = torch.Generator().manual_seed(3)
    adapter = Adapter(dim)
    adapter.reset(gen)
    h = torch.from_numpy(rng.standard_normal((32, dim)).astype(np.float32))
    with torch.no_grad():
        ratio = adapter(h).norm(dim=-1) / h.norm(dim=-1)
    assert float(ratio.mean()) < 0.05


# ---------------------------------------------------------------------------
# Forward passes


def test_student_forward_shapes(toy_model, rng):
    x = _rand_images(rng, 2, 1)
    bundle = toy_model.student_forward(x, Modality.NIR)
    assert bundle.cls.shape == (2, 64)
    assert bundle.patches.shape == (2, 64, 64)  # N = (64/8)^2 = 64
    single = toy_model.student_forward(x[0], Modality.NIR)
    assert single.cls.shape == (64,)


def test_student_init_close_to_teacher(toy_model, rng):
    x = _rand_images(rng, 8, 3)
    with torch.no_grad():
        student = toy_model.student_forward(x, Modality.RGB).cls
        teacher = toy_model.teacher_forward(x).cls
    cos = torch.nn.functional.cosine_similarity(student, teacher, dim=-1)
    assert float(cos.mean()) > 0.99


def test_mixed_batch_routing_preserves_order(toy_model, rng):
    imgs = [_rand_images(rng, 1, 3)[0], _rand_images(rng, 1, 1)[0],
            _rand_images(rng, 1, 3)[0]]
    mods = [Modality.RGB, Modality.NIR, Modality.RGB]
    with torch.no_grad():
        mixed = toy_model.student_forward_mixed(imgs, mods)
        for i, (img, m) in enumerate(zip(imgs, mods)):
            solo = toy_model.student_forward(img, m)
            assert torch.equal(mixed[i].cls, solo.cls)
            assert torch.equal(mixed[i].patches, solo.patches)


def test_routing_purity_under_permutation(toy_model, rng):
    imgs = [_rand_images(rng, 1, 1)[0] for _ in range(4)]
    mods = [Modality.NIR, Modality.SWIR, Modality.LWIR, Modality.NIR]
    perm = [2, 0, 3, 1]
    with torch.no_grad():
        base = toy_model.student_forward_mixed(imgs, mods)
        shuffled = toy_model.student_forward_mixed(
            [imgs[i] for i in perm], [mods[i] for i in perm])
    for out_pos, in_pos in enumerate(perm):
        assert torch.equal(shuffled[out_pos].cls, base[in_pos].cls)


def test_modality_embedding_conditions_output(rng):
    model = build_model(TOY, seed=7)
    # make NIR and SWIR pathways parameter-identical so the embedding row is
    # the only difference
    model.ms_stems["SWIR"].load_state_dict(model.ms_stems["NIR"].state_dict())
    for per_block in model.adapters:
        per_block[int(Modality.SWIR)].load_state_dict(
            per_block[int(Modality.NIR)].state_dict())
    x = _rand_images(rng, 1, 1)
    with torch.no_grad():
        same = model.student_forward(x, Modality.NIR).cls
        other = model.student_forward(x, Modality.SWIR).cls
        assert torch.equal(same, other)  # embedding rows both zero at init
        model.modality_embed[int(Modality.SWIR)].add_(0.1)
        changed = model.student_forward(x, Modality.SWIR).cls
    assert not torch.allclose(same, changed)


def test_channel_mismatch(toy_model):
    with pytest.raises(ShapeError):
        toy_model.student_forward(torch.zeros(1, 3, 64, 64), Modality.NIR)
    with pytest.raises(ShapeError):
        toy_model.student_forward(torch.zeros(1, 1, 64, 64), Modality.RGB)
    with pytest.raises(ShapeError):
        toy_model.teacher_forward(torch.zeros(1, 1, 64, 64))
    with pytest.raises(ShapeError):
        toy_model.student_forward(torch.zeros(1, 1, 32, 32), Modality.NIR)


def test_teacher_deterministic_and_frozen(toy_model, rng):
    x = _rand_images(rng, 2, 3)
    a = toy_model.teacher_forward(x)
    b = toy_model.teacher_forward(x)
    assert torch.equal(a.cls, b.cls) and torch.equal(a.patches, b.patches)
    assert all(not p.requires_grad for p in toy_model.teacher.parameters())


# ---------------------------------------------------------------------------
# Freezing


def test_set_trainable_stage_one_contract():
    from spectralign.config import stage_presets

    model = build_model(TOY, seed=7)
    report = set_trainable(model, stage_presets("toy")["I"].freeze)
    frozen = {g for g, n in report.items() if n == 0}
    trainable = {g for g, n in report.items() if n > 0}
    assert {"stem_rgb", "patch_embed", "pos_cls",
            "block_0", "block_1", "block_2", "block_3"} <= frozen
    assert {"stem_nir", "stem_swir", "stem_lwir", "adapters",
            "modality_embed", "final_norm"} == trainable


def test_set_trainable_deepest_blocks():
    from spectralign.config import stage_presets

    model = build_model(TOY, seed=7)
    report = set_trainable(model, stage_presets("toy")["III"].freeze)
    assert report["block_0"] == report["block_1"] == 0
    assert report["block_2"] > 0 and report["block_3"] > 0
    assert report["stem_rgb"] > 0  # RGB stem joins in the final stage
    assert report["patch_embed"] == 0 and report["pos_cls"] == 0


def test_set_trainable_rejects_excess_blocks():
    from dataclasses import replace

    from spectralign.config import stage_presets

    model = build_model(TOY, seed=7)
    bad = replace(stage_presets("toy")["III"].freeze, unfrozen_blocks=5)
    with pytest.raises(ConfigurationError):
        set_trainable(model, bad)


def test_parameter_groups_cover_student(toy_model):
    grouped = {n for _, params in parameter_groups(toy_model).items()
               for n, _ in params}
    student = {n for n, _ in toy_model.named_parameters()
               if not n.startswith("teacher.")}
    assert grouped == student
