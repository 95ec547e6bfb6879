"""
Shared fixtures: toy model configs, tiny synthetic datasets and oracle models
"""
import os

import numpy as np
import pytest

from src.config import DataConfig, ModelConfig
from src.dataset import SyntheticDataset, build_dataset
from src.model import LegoFormer

TOY_MODEL = dict(grid_side=8, image_side=8, d_model=16, ff_dim=32, n_layers=1, n_heads=2, n_queries=2,
                 conv_units=1, conv_channels=4, stem_stride=2, patch_side=2, output_patch_side=4)

# two slab objects: one train, one test
SLAB_DATA = dict(object_count=2, archetypes=("slab",), grid_side=8, image_side=8, views_per_object=4,
                 split_fraction=0.5, seed=3)

MIXED_DATA = dict(object_count=5, grid_side=8, image_side=8, views_per_object=4, seed=11)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long acceptance runs, enabled with LEGOFORMER_SLOW=1")


def pytest_collection_modifyitems(config, items):
    if os.environ.get("LEGOFORMER_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="set LEGOFORMER_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def toy_config():
    return ModelConfig(**TOY_MODEL)


@pytest.fixture(scope="session")
def slab_dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("slabs")
    build_dataset(DataConfig(**SLAB_DATA), root)
    return root


@pytest.fixture(scope="session")
def slab_dataset(slab_dataset_dir):
    return SyntheticDataset.load(slab_dataset_dir)


@pytest.fixture(scope="session")
def mixed_dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("mixed")
    build_dataset(DataConfig(**MIXED_DATA), root)
    return root


@pytest.fixture(scope="session")
def mixed_dataset(mixed_dataset_dir):
    return SyntheticDataset.load(mixed_dataset_dir)


def box_model(grid, fill=True, **overrides):
    """Factors model with zero head weights whose biases reproduce a box grid (or nothing)"""
    config = ModelConfig(**{**TOY_MODEL, "n_queries": 1, "grid_side": grid.shape[0], **overrides})
    model = LegoFormer.initialize(config, seed=0)
    occupied = np.asarray(grid) != 0
    masks = {"z": occupied.any(axis=(1, 2)), "y": occupied.any(axis=(0, 2)), "x": occupied.any(axis=(0, 1))}
    for axis, mask in masks.items():
        model.params[f"head.{axis}.weight"][:] = 0.0
        bias = np.where(mask, 20.0, -20.0) if fill else np.full(len(mask), -20.0)
        model.params[f"head.{axis}.bias"][:] = bias.astype(np.float32)
    return model


@pytest.fixture
def oracle_model_for():
    return box_model
