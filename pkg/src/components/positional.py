"""
Fixed sine-cosine positional codes
"""
import math

import numpy as np

from src.errors import ConfigError


def _sincos_1d(positions: np.ndarray, dim: int) -> np.ndarray:
    # channel pair j of position pos: sin(pos / 10000^(2j/dim)), cos(same)
    freqs = np.power(10000.0, -np.arange(0, dim, 2, dtype=np.float64) / dim)
    angles = positions[:, None].astype(np.float64) * freqs[None, :]
    codes = np.empty((len(positions), dim), dtype=np.float64)
    codes[:, 0::2] = np.sin(angles)
    codes[:, 1::2] = np.cos(angles)
    return codes


def sincos_positional(count: int, d_model: int, layout: str = "1d", width: int = None) -> np.ndarray:
    """[count, d_model] codes; the 2d layout spends half the channels on rows, half on columns.

    For 2d the positions are laid out row-major on a grid `width` columns wide (default: the
    square root of count).
    """
    if count < 1:
        raise ConfigError(f"positional code count must be >= 1, got {count}")
    if layout == "1d":
        if d_model % 2:
            raise ConfigError(f"1d positional codes need an even d_model, got {d_model}")
        return _sincos_1d(np.arange(count), d_model)
    if layout != "2d":
        raise ConfigError(f"unknown positional layout {layout!r}")
    if d_model % 4:
        raise ConfigError(f"2d positional codes need d_model divisible by 4, got {d_model}")
    width = width or math.isqrt(count)
    if width < 1 or count % width:
        raise ConfigError(f"{count} positions do not fill rows of width {width}")
    index = np.arange(count)
    half = d_model // 2
    return np.concatenate([_sincos_1d(index // width, half), _sincos_1d(index % width, half)], axis=1)
