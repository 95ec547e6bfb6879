"""
Tests for the learning-rate schedule, optimizers, view sampling and the training loop
"""
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

import src.trainer
from src.config import TrainConfig, ViewPolicy
from src.errors import ConfigError, NumericalAbort, ShapeMismatchError
from src.model import LegoFormer, load_checkpoint
from src.optim import OptimizerState, adagrad_step, lr_at, sgd_step
from src.tensor import Tensor
from src.trainer import checkpoint_name, draw_view_count, sample_views, train

SHORT_RUN = dict(batch_size=2, total_steps=6, base_lr=0.01, warmup_steps=2, train_views=2,
                 checkpoint_interval=3, seed=5)


# -- schedule and optimizers ---------------------------------------------------------------------

def test_linear_warmup_then_constant():
    assert lr_at(0, 0.01, 200) == 0.0
    assert lr_at(100, 0.01, 200) == pytest.approx(0.005)
    assert lr_at(200, 0.01, 200) == pytest.approx(0.01)
    assert lr_at(5000, 0.01, 200) == pytest.approx(0.01)
    assert lr_at(3, 0.01, 0) == 0.01
    with pytest.raises(ValueError):
        lr_at(-1, 0.01, 10)


def test_adagrad_two_step_recurrence():
    params = {"w": np.array([1.0, -1.0])}
    state = OptimizerState.zeros_like(params)
    adagrad_step(params, {"w": np.array([2.0, 0.5])}, state, lr=0.1, eps=0.0)
    np.testing.assert_allclose(params["w"], [0.9, -1.1])
    adagrad_step(params, {"w": np.array([2.0, 0.5])}, state, lr=0.1, eps=0.0)
    np.testing.assert_allclose(state.accumulators["w"], [8.0, 0.5])
    np.testing.assert_allclose(params["w"], [0.9 - 0.2 / np.sqrt(8.0), -1.1 - 0.05 / np.sqrt(0.5)])
    assert state.step == 2


def test_zero_gradient_is_a_fixed_point():
    params = {"w": np.array([0.3, 0.7])}
    state = OptimizerState.zeros_like(params)
    adagrad_step(params, {"w": np.zeros(2)}, state, lr=1.0, eps=0.0)
    np.testing.assert_array_equal(params["w"], [0.3, 0.7])


def test_sgd_step():
    params = {"w": np.array([1.0])}
    sgd_step(params, {"w": np.array([4.0])}, OptimizerState(), lr=0.25)
    np.testing.assert_allclose(params["w"], [0.0])


def test_optimizer_shape_mismatch():
    params = {"w": np.ones((2, 3))}
    with pytest.raises(ShapeMismatchError):
        adagrad_step(params, {"w": np.ones((3, 2))}, OptimizerState.zeros_like(params), 0.1, 1e-10)


# -- view sampling -------------------------------------------------------------------------------

def test_full_pool_sample_is_a_permutation():
    views = np.arange(4)[:, None, None] * np.ones((4, 2, 2))
    picked = sample_views(views, ViewPolicy("fixed", 4), np.random.default_rng(0))
    assert sorted(picked.indices.tolist()) == [0, 1, 2, 3]
    np.testing.assert_array_equal(picked.images[:, 0, 0], picked.indices)


def test_each_view_is_drawn_equally_often():
    rng = np.random.default_rng(1)
    views = np.zeros((4, 2, 2))
    counts = np.zeros(4)
    for _ in range(10000):
        picked = sample_views(views, ViewPolicy("fixed", 2), rng)
        assert len(set(picked.indices.tolist())) == 2
        counts[picked.indices] += 1
    np.testing.assert_allclose(counts / 10000, 0.5, atol=0.03)


def test_sampling_is_seeded():
    views = np.zeros((8, 2, 2))
    first = sample_views(views, ViewPolicy("fixed", 3), np.random.default_rng(9)).indices
    second = sample_views(views, ViewPolicy("fixed", 3), np.random.default_rng(9)).indices
    np.testing.assert_array_equal(first, second)


def test_uniform_policy_draws_below_its_maximum():
    rng = np.random.default_rng(2)
    drawn = {draw_view_count(ViewPolicy("uniform", 4), rng) for _ in range(500)}
    assert drawn == {1, 2, 3}


def test_sampling_more_views_than_the_pool():
    with pytest.raises(ConfigError):
        sample_views(np.zeros((2, 2, 2)), ViewPolicy("fixed", 3), np.random.default_rng(0))


# -- training loop -------------------------------------------------------------------------------

def test_zero_steps_saves_the_initialization(tmp_path, toy_config, mixed_dataset):
    model = LegoFormer.initialize(toy_config, seed=1)
    result = train(model, mixed_dataset, TrainConfig(total_steps=0, warmup_steps=0, train_views=2), tmp_path)
    assert result.checkpoint.name == "step-0.lgfc"
    loaded, extras = load_checkpoint(result.checkpoint)
    assert int(extras["step"]) == 0
    assert all(np.array_equal(loaded.params[n], model.params[n]) for n in model.params)
    assert list(pd.read_csv(tmp_path / "loss_log.csv").columns) == ["step", "lr", "loss", "views"]


def test_short_run_logs_finite_losses(tmp_path, toy_config, mixed_dataset):
    config = TrainConfig(**{**SHORT_RUN, "total_steps": 4, "warmup_steps": 4})
    result = train(LegoFormer.initialize(toy_config, seed=2), mixed_dataset, config, tmp_path)
    log = pd.read_csv(tmp_path / "loss_log.csv")
    assert log["step"].tolist() == [1, 2, 3, 4]
    assert np.isfinite(log["loss"]).all()
    np.testing.assert_allclose(log["lr"], [0.0025, 0.005, 0.0075, 0.01])
    assert (log["views"] == 2).all()
    assert result.checkpoint.name == checkpoint_name(4)


def test_training_is_deterministic(tmp_path, toy_config, mixed_dataset):
    config = TrainConfig(**{**SHORT_RUN, "total_steps": 3})
    first = train(LegoFormer.initialize(toy_config, seed=3), mixed_dataset, config, tmp_path / "a")
    second = train(LegoFormer.initialize(toy_config, seed=3), mixed_dataset, config, tmp_path / "b")
    pd.testing.assert_frame_equal(first.losses, second.losses)
    assert first.checkpoint.read_bytes() == second.checkpoint.read_bytes()


def test_resumed_run_continues_like_an_uninterrupted_one(tmp_path, toy_config, mixed_dataset):
    full = train(LegoFormer.initialize(toy_config, seed=4), mixed_dataset, TrainConfig(**SHORT_RUN),
                 tmp_path / "full")
    assert (tmp_path / "full" / "step-3.lgfc").exists()

    split = tmp_path / "split"
    train(LegoFormer.initialize(toy_config, seed=4), mixed_dataset,
          TrainConfig(**{**SHORT_RUN, "total_steps": 3}), split)
    resumed = train(LegoFormer.initialize(toy_config, seed=99), mixed_dataset, TrainConfig(**SHORT_RUN), split,
                    resume=split / "step-3.lgfc")
    assert resumed.losses["step"].tolist() == [1, 2, 3, 4, 5, 6]
    np.testing.assert_allclose(resumed.losses["loss"], full.losses["loss"], atol=1e-5)
    for name in full.model.params:
        np.testing.assert_allclose(resumed.model.params[name], full.model.params[name], atol=1e-5)


def test_non_finite_loss_aborts(tmp_path, toy_config, mixed_dataset, monkeypatch):
    monkeypatch.setattr(src.trainer, "mse_loss", lambda grid, target: Tensor(np.array(np.nan)))
    with pytest.raises(NumericalAbort) as info:
        train(LegoFormer.initialize(toy_config), mixed_dataset, TrainConfig(**SHORT_RUN), tmp_path)
    assert info.value.step == 1
    assert info.value.exit_code == 4


def test_training_input_errors(tmp_path, toy_config, mixed_dataset):
    single = LegoFormer.initialize(replace(toy_config, variant="single-view"))
    with pytest.raises(ConfigError):
        train(single, mixed_dataset, TrainConfig(**SHORT_RUN), tmp_path)
    model = LegoFormer.initialize(toy_config)
    with pytest.raises(ConfigError):
        train(model, mixed_dataset, TrainConfig(**{**SHORT_RUN, "train_views": 5}), tmp_path)
    wide = LegoFormer.initialize(replace(toy_config, grid_side=16))
    with pytest.raises(ConfigError):
        train(wide, mixed_dataset, TrainConfig(**SHORT_RUN), tmp_path)


def test_single_view_training_runs(tmp_path, toy_config, mixed_dataset):
    model = LegoFormer.initialize(replace(toy_config, variant="single-view"), seed=5)
    config = TrainConfig(**{**SHORT_RUN, "total_steps": 2, "train_views": 1})
    result = train(model, mixed_dataset, config, tmp_path)
    assert result.losses["views"].tolist() == [1, 1]


def test_dynamic_view_policy_is_logged(tmp_path, toy_config, mixed_dataset):
    config = TrainConfig(**{**SHORT_RUN, "view_policy": "uniform", "train_views": 4})
    result = train(LegoFormer.initialize(toy_config, seed=6), mixed_dataset, config, tmp_path)
    assert set(result.losses["views"]) <= {1, 2, 3}


def test_toy_model_overfits_one_object(tmp_path, toy_config, slab_dataset):
    """300 steps on a single training object cut the loss below 5% of its first value"""
    assert len(slab_dataset.split("train")) == 1
    config = TrainConfig(batch_size=1, total_steps=300, base_lr=0.05, warmup_steps=20, train_views=4, seed=0,
                         checkpoint_interval=0)
    result = train(LegoFormer.initialize(toy_config, seed=0), slab_dataset, config, tmp_path)
    losses = result.losses["loss"].to_numpy()
    assert len(losses) == 300
    assert losses[-1] < 0.05 * losses[0]
