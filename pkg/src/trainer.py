"""
Training loop: MSE on the composed grid, Adagrad with linear warmup, per-step view sampling.

Steps are numbered 1..total_steps. Each step draws its batch and views from a generator seeded
by (seed, step), so a run resumed from a checkpoint continues exactly like an uninterrupted one.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd

from src.config import LOSS_LOG_NAME, SAMPLING_STREAM, THRESHOLD, TrainConfig, ViewPolicy, derive_seed
from src.dataset import LoadedObject, SyntheticDataset
from src.errors import ConfigError, DataIOError, NumericalAbort
from src.metrics import mean_iou
from src.model import LegoFormer, load_checkpoint, save_checkpoint
from src.optim import OPTIMIZER_STEPS, OptimizerState, lr_at
from src.profiler import timer
from src.tensor import Tape
from src.voxels import mse_loss

logger = logging.getLogger(__name__)

LOSS_COLUMNS = ["step", "lr", "loss", "views"]
ACCUMULATOR_PREFIX = "adagrad/"


@dataclass
class ViewSet:
    indices: np.ndarray
    images: np.ndarray  # [v, H, W]

    def __len__(self) -> int:
        return len(self.indices)


def draw_view_count(policy: ViewPolicy, rng: np.random.Generator) -> int:
    """Fixed count, or uniform on [1, count) for the dynamic policy"""
    if policy.kind == "fixed":
        return policy.count
    return int(rng.integers(1, policy.count))


def sample_views(views: np.ndarray, policy: ViewPolicy, rng: np.random.Generator,
                 count: Optional[int] = None) -> ViewSet:
    """Uniform sample without replacement from one object's view pool"""
    count = draw_view_count(policy, rng) if count is None else count
    if count > len(views):
        raise ConfigError(f"cannot sample {count} views from a pool of {len(views)}")
    indices = rng.choice(len(views), size=count, replace=False)
    return ViewSet(indices, np.asarray(views)[indices])


def checkpoint_name(step: int) -> str:
    return f"step-{step}.lgfc"


@dataclass
class TrainResult:
    model: LegoFormer
    losses: pd.DataFrame
    checkpoint: Path
    state: OptimizerState


def _check_inputs(model: LegoFormer, objects: Sequence[LoadedObject], dataset: SyntheticDataset,
                  config: TrainConfig) -> None:
    if not objects:
        raise ConfigError("the dataset has no training objects")
    if model.config.grid_side != dataset.grid_side:
        raise ConfigError(f"model grid side {model.config.grid_side} differs from dataset "
                          f"grid side {dataset.grid_side}")
    policy = config.views
    if model.config.variant == "single-view" and (policy.kind != "fixed" or policy.count != 1):
        raise ConfigError("the single-view variant trains with exactly 1 view")
    smallest = min(len(o.views) for o in objects)
    if policy.kind == "fixed" and policy.count > smallest:
        raise ConfigError(f"fixed view count {policy.count} exceeds the smallest view pool ({smallest})")


def _resume(path, out_dir: Path, model_config):
    model, extras = load_checkpoint(path, expect=model_config)
    if "step" not in extras:
        raise DataIOError("checkpoint carries no training step", path)
    start = int(extras["step"])
    state = OptimizerState({name[len(ACCUMULATOR_PREFIX):]: value for name, value in extras.items()
                            if name.startswith(ACCUMULATOR_PREFIX)}, step=start)
    rows: List[dict] = []
    log_path = out_dir / LOSS_LOG_NAME
    if log_path.exists():
        try:
            previous = pd.read_csv(log_path)
        except (OSError, ValueError) as exc:
            raise DataIOError(f"cannot read loss log ({exc})", log_path) from exc
        rows = previous[previous["step"] <= start].to_dict("records")
    logger.info("resuming from step %d (%s)", start, path)
    return model, state, start, rows


def write_loss_log(path, rows: Sequence[dict]) -> Path:
    target = Path(path)
    frame = pd.DataFrame(list(rows), columns=LOSS_COLUMNS)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(target, index=False)
    except OSError as exc:
        raise DataIOError(f"cannot write loss log ({exc.strerror})", target) from exc
    return target


def _save(out_dir: Path, model: LegoFormer, state: OptimizerState, step: int) -> Path:
    extras = {"step": np.asarray(step, dtype=np.float32)}
    extras.update({ACCUMULATOR_PREFIX + name: value for name, value in state.accumulators.items()})
    return save_checkpoint(out_dir / checkpoint_name(step), model, extras)


def train(model: LegoFormer, dataset: SyntheticDataset, config: TrainConfig, out_dir,
          resume=None, eval_objects: Optional[Sequence[LoadedObject]] = None) -> TrainResult:
    """Run steps 1..total_steps of sample, forward, MSE, backward and optimizer update"""
    config.validate()
    out_dir = Path(out_dir)
    objects = dataset.split("train")
    _check_inputs(model, objects, dataset, config)

    state = OptimizerState.zeros_like(model.params)
    start, rows = 0, []
    if resume is not None:
        model, state, start, rows = _resume(resume, out_dir, model.config)
    update = OPTIMIZER_STEPS[config.optimizer]
    policy = config.views
    batch_replace = len(objects) < config.batch_size
    checkpoint = None

    for step in range(start + 1, config.total_steps + 1):
        rng = np.random.default_rng(derive_seed(config.seed, SAMPLING_STREAM, step))
        lr = lr_at(step, config.base_lr, config.warmup_steps)

        with timer("data"):
            picked = rng.choice(len(objects), size=config.batch_size, replace=batch_replace)
            count = draw_view_count(policy, rng)
            views = np.stack([sample_views(objects[i].views, policy, rng, count).images for i in picked])
            targets = np.stack([objects[i].grid for i in picked]).astype(np.float32)

        with timer("forward"):
            tape = Tape()
            params = model.bind(tape)
            result = model.forward(views, targets=targets, training=True, params=params)
            loss = mse_loss(result.grid, targets)
        value = loss.item()
        if not math.isfinite(value):
            raise NumericalAbort(step, lr, value)

        with timer("backward"):
            tape.backward(loss)
            grads = {name: tape.grad(tensor) for name, tensor in params.items()}

        with timer("optimizer"):
            update(model.params, grads, state, lr, config.adagrad_eps)
            model.apply_batch_stats(result.batch_stats)

        rows.append({"step": step, "lr": lr, "loss": value, "views": count})
        if step == 1 or step % 100 == 0:
            logger.info("step %d/%d lr=%.6g loss=%.6f views=%d", step, config.total_steps, lr, value, count)
        if config.checkpoint_interval and step % config.checkpoint_interval == 0:
            checkpoint = _save(out_dir, model, state, step)
        if config.eval_interval and step % config.eval_interval == 0:
            probe = list(eval_objects) if eval_objects else objects
            logger.info("step %d mean IoU %.4f on %d objects", step,
                        mean_iou(model, probe, min(policy.count, len(probe[0].views)), THRESHOLD), len(probe))

    final_step = max(start, config.total_steps)
    if checkpoint is None or checkpoint.name != checkpoint_name(final_step):
        checkpoint = _save(out_dir, model, state, final_step)
    write_loss_log(out_dir / LOSS_LOG_NAME, rows)
    return TrainResult(model, pd.DataFrame(rows, columns=LOSS_COLUMNS), checkpoint, state)
