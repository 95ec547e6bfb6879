"""
Desk-scale acceptance runs: overfitting, view-count and query-count trends, weight sharing.

All of these train for thousands of steps and only run with LEGOFORMER_SLOW=1.
"""
from dataclasses import replace

import numpy as np
import pytest

from src.config import DataConfig, EvalConfig, ModelConfig, TrainConfig
from src.dataset import SyntheticDataset, build_dataset
from src.metrics import evaluate_sweep, mean_iou
from src.model import LegoFormer
from src.trainer import train

pytestmark = pytest.mark.slow

DESK_MODEL = ModelConfig()
DESK_TRAIN = TrainConfig(checkpoint_interval=0)


@pytest.fixture(scope="module")
def overfit_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("overfit")
    build_dataset(DataConfig(object_count=10, split_fraction=0.8, seed=1), root)
    return SyntheticDataset.load(root)


@pytest.fixture(scope="module")
def heldout_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("heldout")
    build_dataset(DataConfig(object_count=200, split_fraction=0.8, seed=2), root)
    return SyntheticDataset.load(root)


def _train(config, dataset, out_dir, train_config=DESK_TRAIN):
    return train(LegoFormer.initialize(config, seed=0), dataset, train_config, out_dir).model


@pytest.mark.parametrize("scheme, floor", [("factors", 0.90), ("naive-nar", 0.85), ("naive-full", 0.85)])
def test_desk_model_overfits_eight_objects(tmp_path, overfit_dataset, scheme, floor):
    model = _train(replace(DESK_MODEL, scheme=scheme), overfit_dataset, tmp_path)
    assert mean_iou(model, overfit_dataset.split("train"), 4, 0.3) >= floor


def test_autoregressive_scheme_fits_with_teacher_forcing(tmp_path, overfit_dataset):
    config = replace(DESK_MODEL, scheme="naive")
    model = _train(config, overfit_dataset, tmp_path)
    scores = []
    for obj in overfit_dataset.split("train"):
        result = model.forward(obj.views[None, :4], targets=obj.grid[None].astype(np.float32))
        predicted = (result.grid.numpy()[0] >= 0.3).astype(np.uint8)
        union = np.logical_or(predicted, obj.grid).sum()
        scores.append(np.logical_and(predicted, obj.grid).sum() / union if union else 1.0)
    assert np.mean(scores) >= 0.85


def test_shared_layers_still_overfit(tmp_path, overfit_dataset):
    model = _train(replace(DESK_MODEL, share_layer_weights=True), overfit_dataset, tmp_path)
    assert mean_iou(model, overfit_dataset.split("train"), 4, 0.3) >= 0.85


def test_more_views_never_hurt(tmp_path, heldout_dataset):
    policy = replace(DESK_TRAIN, view_policy="uniform", train_views=9)
    model = _train(DESK_MODEL, heldout_dataset, tmp_path, policy)
    report = evaluate_sweep(model, heldout_dataset, EvalConfig(view_counts=(1, 2, 4, 8)), timing=False)
    means = [entry["mean_iou"] for entry in report["per_view_count"]]
    assert all(later >= earlier - 0.02 for earlier, later in zip(means, means[1:]))


def test_two_queries_come_close_to_eight(tmp_path, heldout_dataset):
    scores = {}
    for k in (2, 4, 8):
        model = _train(replace(DESK_MODEL, n_queries=k), heldout_dataset, tmp_path / f"k{k}")
        scores[k] = mean_iou(model, heldout_dataset.split("test"), 4, 0.3)
    assert scores[8] >= scores[2] - 0.01
    assert scores[8] - scores[2] <= 0.1
