"""Shared fixtures: a single thread for bit-reproducible numerics and a
small generated dataset reused by the fast integration tests."""

from __future__ import annotations

import numpy as np
import pytest
import torch

from spectralign.data import generate_dataset, load_dataset

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """30 scenes, splits 20/10/0 — enough for quick training smoke tests."""
    root = tmp_path_factory.mktemp("data-small")
    manifest = generate_dataset(
        n_scenes=30, split_fractions=(2 / 3, 1 / 3, 0.0), seed=5, out_dir=root
    )
    return load_dataset(manifest)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
