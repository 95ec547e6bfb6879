"""
Output heads: decomposition-factor heads and the patch/volume heads of the naive schemes
"""
from __future__ import annotations

from typing import Dict

import numpy as np

from src.components.params import ParamSpec, linear_specs
from src.config import ModelConfig
from src.errors import ShapeMismatchError
from src.tensor import Tensor, linear, sigmoid
from src.voxels import FactorSet

FACTOR_AXES = ("z", "y", "x")


def head_specs(config: ModelConfig) -> Dict[str, ParamSpec]:
    side = config.grid_side
    if config.scheme == "factors":
        specs = {}
        for axis in FACTOR_AXES:
            specs.update(linear_specs(f"head.{axis}", config.d_model, side))
        return specs
    if config.scheme == "naive-full":
        return linear_specs("head.volume", config.d_model, side ** 3)
    return linear_specs("head.patch", config.d_model, config.output_patch_side ** 3)


def apply_factor_heads(decoder_output: Tensor, params: Dict[str, Tensor]) -> FactorSet:
    """[..., k, d_model] -> FactorSet with sigmoid(W_a . y + b_a) for a in z, y, x"""
    d_model = decoder_output.shape[-1]
    for axis in FACTOR_AXES:
        weight = params[f"head.{axis}.weight"]
        if weight.shape[0] != d_model:
            raise ShapeMismatchError(f"factor head {axis}", decoder_output.shape, weight.shape)
    return FactorSet(*(
        sigmoid(linear(decoder_output, params[f"head.{axis}.weight"], params[f"head.{axis}.bias"]))
        for axis in FACTOR_AXES
    ))


def apply_patch_head(decoder_output: Tensor, params: Dict[str, Tensor]) -> Tensor:
    """[B, n, d_model] -> flattened s^3 patches in (0, 1), [B, n, s^3]"""
    return sigmoid(linear(decoder_output, params["head.patch.weight"], params["head.patch.bias"]))


def apply_volume_head(decoder_output: Tensor, params: Dict[str, Tensor], side: int) -> Tensor:
    """[B, 1, d_model] -> [B, N, N, N] in z-major raster order"""
    values = sigmoid(linear(decoder_output, params["head.volume.weight"], params["head.volume.bias"]))
    return values.reshape(decoder_output.shape[0], side, side, side)


def stitch_patches(patches: Tensor, side: int, patch_side: int) -> Tensor:
    """[B, (N/s)^3, s^3] patches in raster order -> [B, N, N, N]"""
    grid = side // patch_side
    batch = patches.shape[0]
    blocks = patches.reshape(batch, grid, grid, grid, patch_side, patch_side, patch_side)
    return blocks.transpose(0, 1, 4, 2, 5, 3, 6).reshape(batch, side, side, side)


def split_patches(volumes: np.ndarray, patch_side: int) -> np.ndarray:
    """[B, N, N, N] -> [B, (N/s)^3, s^3]; inverse of stitch_patches"""
    volumes = np.asarray(volumes)
    batch, side = volumes.shape[0], volumes.shape[1]
    if side % patch_side:
        raise ShapeMismatchError("split_patches", volumes.shape, (patch_side,) * 3)
    grid = side // patch_side
    blocks = volumes.reshape(batch, grid, patch_side, grid, patch_side, grid, patch_side)
    return blocks.transpose(0, 1, 3, 5, 2, 4, 6).reshape(batch, grid ** 3, patch_side ** 3)
