"""
Convolutional backbone and tokenization for the multi-view and single-view variants.

Stack: a stride-s stem convolution, then `conv_units` 3x3 units, MaxPool 2x2 after the second
unit. Every convolution is followed by a per-channel affine normalization that uses running
statistics (updated from training batches, constant under differentiation) and a ReLU.
"""
from __future__ import annotations

from typing import Dict, Optional

import numpy as np

from src.components.params import ParamSpec, linear_specs
from src.components.positional import sincos_positional
from src.config import ModelConfig
from src.errors import ShapeMismatchError
from src.tensor import Tensor, add, conv2d, linear, max_pool2d, mul, relu, sub

STAT_MOMENTUM = 0.1
STAT_EPS = 1e-5


def _conv_names(config: ModelConfig):
    yield "backbone.stem", config.image_channels, config.stem_stride
    for i in range(config.conv_units):
        yield f"backbone.units.{i}", config.conv_channels, 1


def backbone_specs(config: ModelConfig) -> Dict[str, ParamSpec]:
    specs: Dict[str, ParamSpec] = {}
    channels = config.conv_channels
    for name, in_channels, _ in _conv_names(config):
        specs[f"{name}.conv.weight"] = ParamSpec((channels, in_channels, 3, 3), "he")
        specs[f"{name}.conv.bias"] = ParamSpec((channels,), "zeros")
        specs[f"{name}.affine.gain"] = ParamSpec((channels,), "ones")
        specs[f"{name}.affine.bias"] = ParamSpec((channels,), "zeros")
    side = config.feature_side
    if config.variant == "multi-view":
        specs.update(linear_specs("embed.proj", channels * side * side, config.d_model))
    else:
        specs.update(linear_specs("embed.proj", channels * config.patch_side ** 2, config.d_model))
    return specs


def backbone_buffers(config: ModelConfig) -> Dict[str, np.ndarray]:
    buffers = {}
    for name, _, _ in _conv_names(config):
        buffers[f"{name}.affine.running_mean"] = np.zeros(config.conv_channels, dtype=np.float32)
        buffers[f"{name}.affine.running_var"] = np.ones(config.conv_channels, dtype=np.float32)
    return buffers


def update_running_stats(buffers: Dict[str, np.ndarray], batch_stats: Dict[str, tuple]) -> None:
    """Exponential moving average of the per-channel statistics seen in a training batch"""
    for name, (batch_mean, batch_var) in batch_stats.items():
        running_mean = buffers[f"{name}.running_mean"]
        running_var = buffers[f"{name}.running_var"]
        running_mean *= 1.0 - STAT_MOMENTUM
        running_mean += STAT_MOMENTUM * batch_mean.astype(running_mean.dtype)
        running_var *= 1.0 - STAT_MOMENTUM
        running_var += STAT_MOMENTUM * batch_var.astype(running_var.dtype)


def _channel_affine(x: Tensor, params, buffers, name: str, batch_stats: Optional[dict]) -> Tensor:
    if batch_stats is not None:
        batch_stats[name] = (x.data.mean(axis=(0, 2, 3)), x.data.var(axis=(0, 2, 3)))
    shift = buffers[f"{name}.running_mean"][:, None, None]
    inv_std = 1.0 / np.sqrt(buffers[f"{name}.running_var"][:, None, None] + STAT_EPS)
    normed = mul(sub(x, shift), inv_std)
    channels = x.shape[1]
    return add(mul(normed, params[f"{name}.gain"].reshape(channels, 1, 1)),
               params[f"{name}.bias"].reshape(channels, 1, 1))


def _as_images(views: np.ndarray, config: ModelConfig) -> np.ndarray:
    """[B, v, H, W] or [B, v, C, H, W] -> [B, v, C, H, W] after checking the image size"""
    views = np.asarray(views)
    if views.ndim == 4:
        views = views[:, :, None]
    expected = (config.image_channels, config.image_side, config.image_side)
    if views.ndim != 5 or views.shape[2:] != expected:
        raise ShapeMismatchError("image batch", views.shape, ("B", "v") + expected)
    return views


def feature_maps(images: np.ndarray, params: Dict[str, Tensor], buffers: Dict[str, np.ndarray],
                 config: ModelConfig, batch_stats: Optional[dict] = None) -> Tensor:
    """images [M, C, H, W] -> features [M, c, F, F]"""
    x = Tensor(images)
    for index, (name, _, stride) in enumerate(_conv_names(config)):
        x = conv2d(x, params[f"{name}.conv.weight"], params[f"{name}.conv.bias"], stride=stride, padding=1)
        x = relu(_channel_affine(x, params, buffers, f"{name}.affine", batch_stats))
        if index == 2:  # stem is index 0, so this is the second unit
            x = max_pool2d(x)
    return x


def embed_views(views: np.ndarray, params: Dict[str, Tensor], buffers: Dict[str, np.ndarray],
                config: ModelConfig, batch_stats: Optional[dict] = None) -> Tensor:
    """Multi-view tokens: one per view, [B, v, d_model], no positional code"""
    images = _as_images(views, config)
    batch, n_views = images.shape[:2]
    features = feature_maps(images.reshape(batch * n_views, *images.shape[2:]), params, buffers,
                            config, batch_stats)
    flat = features.reshape(batch, n_views, -1)
    return linear(flat, params["embed.proj.weight"], params["embed.proj.bias"])


def embed_patches(views: np.ndarray, params: Dict[str, Tensor], buffers: Dict[str, np.ndarray],
                  config: ModelConfig, batch_stats: Optional[dict] = None) -> Tensor:
    """Single-view tokens: p x p feature patches in raster order plus 2D codes, [B, t, d_model]"""
    images = _as_images(views, config)
    batch, n_views = images.shape[:2]
    if n_views != 1:
        raise ShapeMismatchError("single-view input", images.shape[:2], (batch, 1))
    features = feature_maps(images[:, 0], params, buffers, config, batch_stats)
    channels, side, p = features.shape[1], features.shape[2], config.patch_side
    if side % p:
        raise ShapeMismatchError("patch extraction", features.shape, (p, p))
    grid = side // p
    # [B, c, g, p, g, p] -> [B, g, g, c, p, p]: token order is patch-row major, each token (c, py, px)
    patches = features.reshape(batch, channels, grid, p, grid, p).transpose(0, 2, 4, 1, 3, 5)
    patches = patches.reshape(batch, grid * grid, channels * p * p)
    tokens = linear(patches, params["embed.proj.weight"], params["embed.proj.bias"])
    codes = sincos_positional(grid * grid, config.d_model, "2d", width=grid)
    return add(tokens, codes.astype(tokens.data.dtype))
