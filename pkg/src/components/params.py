"""
Parameter declarations shared by the network components
"""
from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np


@dataclass(frozen=True)
class ParamSpec:
    shape: Tuple[int, ...]
    init: str = "xavier"  # xavier | he | zeros | ones | normal
    mean: float = 0.0
    std: float = 1.0

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


def linear_specs(name: str, fan_in: int, fan_out: int, bias: bool = True) -> Dict[str, ParamSpec]:
    specs = {f"{name}.weight": ParamSpec((fan_in, fan_out))}
    if bias:
        specs[f"{name}.bias"] = ParamSpec((fan_out,), "zeros")
    return specs


def norm_specs(name: str, dim: int) -> Dict[str, ParamSpec]:
    return {f"{name}.gain": ParamSpec((dim,), "ones"), f"{name}.bias": ParamSpec((dim,), "zeros")}


def initialize(spec: ParamSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.init == "zeros":
        return np.zeros(spec.shape, dtype=np.float32)
    if spec.init == "ones":
        return np.ones(spec.shape, dtype=np.float32)
    if spec.init == "normal":
        return rng.normal(spec.mean, spec.std, size=spec.shape).astype(np.float32)
    if spec.init == "he":
        # conv kernels [out, in, kh, kw]
        fan_in = int(np.prod(spec.shape[1:]))
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=spec.shape).astype(np.float32)
    fan_in, fan_out = spec.shape[0], spec.shape[-1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=spec.shape).astype(np.float32)
