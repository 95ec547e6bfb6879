"""
Occupancy grids parametrized by decomposition factors.

A grid is an N x N x N array indexed [z, y, x]. A FactorSet holds k triplets of length-N
vectors in [0, 1]; composing them sums the k rank-1 volumes z_i (x) y_i (x) x_i and clips the
result at 1, so overlapping parts behave like a boolean OR.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from src.config import ORACLE_STREAM, THRESHOLD, derive_seed
from src.errors import DataIOError, RangeError, ShapeMismatchError
from src.optim import OptimizerState, adagrad_step
from src.tensor import Tape, Tensor, mean, minimum, mul, rank1_sum, sigmoid, sub

logger = logging.getLogger(__name__)

# alias used in signatures: numpy [N, N, N] (real or {0, 1}) or a Tensor of that shape
OccupancyGrid = Union[np.ndarray, Tensor]

VOXEL_MAGIC = b"VOXG"
BINARY_PAYLOAD = 0
REAL_PAYLOAD = 1
# 6-connected neighbourhood
FACE_NEIGHBOURS = ndimage.generate_binary_structure(3, 1)


@dataclass
class FactorSet:
    """k triplets (z_i, y_i, x_i); each field is a Tensor [..., k, N]"""

    z: Tensor
    y: Tensor
    x: Tensor

    def __post_init__(self):
        self.z, self.y, self.x = (v if isinstance(v, Tensor) else Tensor(v) for v in (self.z, self.y, self.x))
        if not (self.z.shape == self.y.shape == self.x.shape) or self.z.ndim < 2:
            raise ShapeMismatchError("FactorSet", self.z.shape, self.y.shape)
        if self.k < 1:
            raise RangeError("a factor set needs k >= 1")

    @property
    def k(self) -> int:
        return self.z.shape[-2]

    @property
    def side(self) -> int:
        return self.z.shape[-1]

    def triplets(self) -> Iterator[Tuple[np.ndarray, np.ndarray, np.ndarray]]:
        for i in range(self.k):
            yield self.z.data[..., i, :], self.y.data[..., i, :], self.x.data[..., i, :]

    def numpy(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.z.data, self.y.data, self.x.data

    def select(self, order: Sequence[int]) -> "FactorSet":
        """Constant copy holding the triplets in the given order"""
        idx = list(order)
        return FactorSet(self.z.data[..., idx, :], self.y.data[..., idx, :], self.x.data[..., idx, :])

    def validate(self) -> "FactorSet":
        for axis, values in zip("zyx", self.numpy()):
            if values.size and (values.min() < 0.0 or values.max() > 1.0 or not np.isfinite(values).all()):
                raise RangeError(f"{axis} factors must lie in [0, 1], got range "
                                 f"[{values.min():.4g}, {values.max():.4g}]")
        return self


def compose_factors(factors: FactorSet) -> Tensor:
    """P = min(1, sum_i z_i (x) y_i (x) x_i); differentiable w.r.t. the factor tensors"""
    factors.validate()
    return minimum(rank1_sum(factors.z, factors.y, factors.x), 1.0)


def mse_loss(p: OccupancyGrid, g: OccupancyGrid) -> Tensor:
    """Mean squared voxel error; batched grids average over every voxel of every sample"""
    p = p if isinstance(p, Tensor) else Tensor(p)
    g = g if isinstance(g, Tensor) else Tensor(g)
    if p.shape != g.shape:
        raise ShapeMismatchError("mse_loss", p.shape, g.shape)
    diff = sub(p, g)
    return mean(mul(diff, diff))


def threshold(p: OccupancyGrid, tau: float = THRESHOLD) -> np.ndarray:
    """Binary grid with 1 where p >= tau"""
    if not 0.0 < tau < 1.0:
        raise RangeError(f"threshold must lie in (0, 1), got {tau}")
    values = p.data if isinstance(p, Tensor) else np.asarray(p)
    return (values >= tau).astype(np.uint8)


def binary_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def surface_voxels(grid: np.ndarray) -> np.ndarray:
    """Occupied voxels with an empty 6-neighbour; cells on the grid border always count"""
    occupied = np.asarray(grid) != 0
    inner = ndimage.binary_erosion(occupied, structure=FACE_NEIGHBOURS, border_value=0)
    return occupied & ~inner


def cp_fit_oracle(grid: np.ndarray, k: int, iterations: int = 2000, seed: int = 0, lr: float = 0.5,
                  restarts: int = 4, tau: float = THRESHOLD, eps: float = 1e-10) -> FactorSet:
    """Fit k clipped rank-1 factors to a binary grid by gradient descent on pre-sigmoid logits.

    Each restart draws fresh logits from its own seed and applies Adagrad-scaled steps; the
    first restart whose thresholded composition reproduces the grid exactly wins, otherwise
    the lowest-loss factors seen across all restarts are returned.
    """
    if k < 1:
        raise RangeError(f"cp_fit_oracle needs k >= 1, got {k}")
    target = np.asarray(grid, dtype=np.float32)
    if target.ndim != 3 or len(set(target.shape)) != 1:
        raise ShapeMismatchError("cp_fit_oracle", target.shape, (target.shape[0],) * 3)
    binary_target = target >= 0.5
    side = target.shape[0]

    best_loss, best = np.inf, None
    for restart in range(max(1, restarts)):
        rng = np.random.default_rng(derive_seed(seed, ORACLE_STREAM, restart))
        logits = {axis: rng.normal(0.0, 1.0, size=(k, side)).astype(np.float32) for axis in "zyx"}
        state = OptimizerState.zeros_like(logits)
        for iteration in range(iterations + 1):
            tape = Tape()
            leaves = {axis: tape.leaf(value) for axis, value in logits.items()}
            factors = FactorSet(*(sigmoid(leaves[axis]) for axis in "zyx"))
            composed = compose_factors(factors)
            loss = mse_loss(composed, target)
            value = loss.item()
            if value < best_loss:
                best_loss, best = value, factors.select(range(k))
            if np.array_equal(composed.data >= tau, binary_target):
                logger.debug("restart %d reproduced the grid after %d iterations", restart, iteration)
                return factors.select(range(k))
            if iteration == iterations:
                break
            tape.backward(loss)
            adagrad_step(logits, {axis: tape.grad(leaves[axis]) for axis in "zyx"}, state, lr, eps)
        logger.debug("restart %d finished with loss %.6f", restart, best_loss)
    return best


# -- VOXG files ------------------------------------------------------------------------------

def voxels_to_bytes(grid: np.ndarray, binary: Optional[bool] = None) -> bytes:
    values = np.asarray(grid)
    if values.ndim != 3 or len(set(values.shape)) != 1:
        raise ShapeMismatchError("voxel file", values.shape, (values.shape[0],) * 3)
    if binary is None:
        binary = values.dtype in (np.bool_, np.uint8)
    header = VOXEL_MAGIC + struct.pack("<IB", values.shape[0], BINARY_PAYLOAD if binary else REAL_PAYLOAD)
    if binary:
        payload = np.ascontiguousarray(values != 0, dtype=np.uint8).tobytes()
    else:
        payload = np.ascontiguousarray(values, dtype="<f4").tobytes()
    return header + payload


def voxels_from_bytes(blob: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(blob) < 9 or blob[:4] != VOXEL_MAGIC:
        raise DataIOError("not a VOXG voxel file", source)
    side, flag = struct.unpack("<IB", blob[4:9])
    count = side ** 3
    if flag == BINARY_PAYLOAD:
        expected, dtype = count, np.uint8
    elif flag == REAL_PAYLOAD:
        expected, dtype = 4 * count, np.dtype("<f4")
    else:
        raise DataIOError(f"unknown VOXG payload flag {flag}", source)
    if len(blob) - 9 != expected:
        raise DataIOError(f"VOXG payload has {len(blob) - 9} bytes, expected {expected}", source)
    values = np.frombuffer(blob, dtype=dtype, offset=9).reshape(side, side, side)
    return values.astype(np.float32) if flag == REAL_PAYLOAD else values.copy()


def save_voxels(path, grid: np.ndarray, binary: Optional[bool] = None) -> Path:
    target = Path(path)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(voxels_to_bytes(grid, binary))
    except OSError as exc:
        raise DataIOError(f"cannot write voxel file ({exc.strerror})", target) from exc
    return target


def load_voxels(path) -> np.ndarray:
    source = Path(path)
    try:
        blob = source.read_bytes()
    except OSError as exc:
        raise DataIOError(f"cannot read voxel file ({exc.strerror})", source) from exc
    return voxels_from_bytes(blob, str(source))
