"""
The LegoFormer network: backbone tokens -> pre-norm transformer -> output scheme.

Parameters live in a flat name -> float32 array dict. A forward pass binds them either as
tape leaves (training, gradient checks) or as constants (inference), so one frozen model can
serve several evaluation workers, each with its own tape.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from src.components.attention import AttentionRecorder, causal_mask, diagonal_mask
from src.components.backbone import (backbone_buffers, backbone_specs, embed_patches, embed_views,
                                     update_running_stats)
from src.components.heads import (apply_factor_heads, apply_patch_head, apply_volume_head, head_specs,
                                  split_patches, stitch_patches)
from src.components.params import ParamSpec, initialize, linear_specs
from src.components.positional import sincos_positional
from src.components.transformer import decode, decoder_specs, encode, encoder_specs
from src.config import INIT_STREAM, ModelConfig, derive_seed
from src.errors import ConfigError, DataIOError
from src.tensor import Tape, Tensor, add, concatenate, linear
from src.voxels import FactorSet, compose_factors

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"LGFC"
CHECKPOINT_VERSION = 1
BUFFER_PREFIX = "buffer/"
EXTRA_PREFIX = "extra/"


def model_specs(config: ModelConfig) -> Dict[str, ParamSpec]:
    """Every trainable tensor of a configuration, in a fixed order"""
    config.validate()
    specs = dict(backbone_specs(config))
    specs.update(encoder_specs(config))
    specs.update(decoder_specs(config))
    if config.scheme == "naive":
        specs["start_token"] = ParamSpec((config.d_model,), "normal",
                                         config.query_init_mean, config.query_init_std)
        specs.update(linear_specs("patch_embed", config.output_patch_side ** 3, config.d_model))
    else:
        specs["queries"] = ParamSpec((config.decoder_query_count, config.d_model), "normal",
                                     config.query_init_mean, config.query_init_std)
    specs.update(head_specs(config))
    return specs


def parameter_count(config: ModelConfig) -> int:
    return sum(spec.size for spec in model_specs(config).values())


def transformer_layer_parameter_count(config: ModelConfig) -> int:
    return sum(spec.size for name, spec in model_specs(config).items()
               if name.startswith(("encoder.layers.", "decoder.layers.")))


@dataclass
class ForwardResult:
    grid: Tensor
    factors: Optional[FactorSet] = None
    patches: Optional[Tensor] = None
    attention: Optional[AttentionRecorder] = None
    batch_stats: Dict[str, tuple] = field(default_factory=dict)


class LegoFormer:
    """Reconstruction network for one ModelConfig"""

    def __init__(self, config: ModelConfig, params: Dict[str, np.ndarray], buffers: Dict[str, np.ndarray]):
        self.config = config.validate()
        specs = model_specs(config)
        missing = set(specs) - set(params)
        unexpected = set(params) - set(specs)
        if missing or unexpected:
            raise ConfigError(f"parameters do not match the config: missing {sorted(missing)}, "
                              f"unexpected {sorted(unexpected)}")
        for name, spec in specs.items():
            if params[name].shape != spec.shape:
                raise ConfigError(f"parameter {name} has shape {params[name].shape}, expected {spec.shape}")
        self.params = {name: params[name] for name in specs}
        self.buffers = dict(backbone_buffers(config))
        self.buffers.update(buffers)

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int = 0) -> "LegoFormer":
        rng = np.random.default_rng(derive_seed(seed, INIT_STREAM))
        params = {name: initialize(spec, rng) for name, spec in model_specs(config).items()}
        return cls(config, params, {})

    def parameter_count(self) -> int:
        return sum(value.size for value in self.params.values())

    def copy(self, dtype=None) -> "LegoFormer":
        cast = (lambda a: a.astype(dtype)) if dtype is not None else (lambda a: a.copy())
        return LegoFormer(self.config, {n: cast(v) for n, v in self.params.items()},
                          {n: cast(v) for n, v in self.buffers.items()})

    def bind(self, tape: Optional[Tape] = None) -> Dict[str, Tensor]:
        if tape is None:
            return {name: Tensor(value) for name, value in self.params.items()}
        return {name: tape.leaf(value, name) for name, value in self.params.items()}

    # -- forward -------------------------------------------------------------------------------

    def forward(self, views: np.ndarray, tape: Optional[Tape] = None, capture: bool = False,
                targets: Optional[np.ndarray] = None, training: bool = False,
                params: Optional[Dict[str, Tensor]] = None) -> ForwardResult:
        """views [B, v, H, W] -> grid [B, N, N, N] in [0, 1].

        `targets` are only read by the autoregressive scheme (teacher forcing). With
        `training`, per-channel batch statistics are returned for the running-stat update.
        """
        config = self.config
        params = params if params is not None else self.bind(tape)
        recorder = AttentionRecorder() if capture else None
        batch_stats = {} if training else None
        embed = embed_views if config.variant == "multi-view" else embed_patches
        tokens = embed(views, params, self.buffers, config, batch_stats)
        memory = encode(tokens, params, config, recorder)

        result = ForwardResult(grid=None, attention=recorder, batch_stats=batch_stats or {})
        if config.scheme == "factors":
            decoded = self.decode_factors(memory, params, recorder)
            result.factors = apply_factor_heads(decoded, params)
            result.grid = compose_factors(result.factors)
        elif config.scheme == "naive":
            result.grid, result.patches = self.decode_naive(memory, params, recorder, targets)
        elif config.scheme == "naive-nar":
            result.grid, result.patches = self.decode_naive_nar(memory, params, recorder)
        else:
            result.grid = self.decode_naive_full(memory, params, recorder)
        return result

    def decode_factors(self, memory: Tensor, params: Dict[str, Tensor],
                       recorder: Optional[AttentionRecorder] = None) -> Tensor:
        """Learned queries -> [B, k, d_model]; each query is blocked from attending to itself"""
        return decode(self._queries(params, memory.shape[0]), memory, params, self.config,
                      diagonal_mask(self.config.decoder_query_count), recorder)

    def decode_naive_nar(self, memory: Tensor, params: Dict[str, Tensor],
                         recorder: Optional[AttentionRecorder] = None) -> Tuple[Tensor, Tensor]:
        """One parallel pass over (N/s)^3 patch queries, stitched in raster order"""
        config = self.config
        decoded = decode(self._queries(params, memory.shape[0]), memory, params, config,
                         diagonal_mask(config.decoder_query_count), recorder)
        patches = apply_patch_head(decoded, params)
        return stitch_patches(patches, config.grid_side, config.output_patch_side), patches

    def decode_naive_full(self, memory: Tensor, params: Dict[str, Tensor],
                          recorder: Optional[AttentionRecorder] = None) -> Tensor:
        """A single query projected to the whole N^3 volume"""
        config = self.config
        decoded = decode(self._queries(params, memory.shape[0]), memory, params, config,
                         diagonal_mask(1), recorder)
        return apply_volume_head(decoded, params, config.grid_side)

    def decode_naive(self, memory: Tensor, params: Dict[str, Tensor],
                     recorder: Optional[AttentionRecorder] = None,
                     targets: Optional[np.ndarray] = None) -> Tuple[Tensor, Tensor]:
        """Autoregressive patch decoding: teacher forcing when targets are given, greedy otherwise"""
        config = self.config
        if targets is not None:
            patches = self._decode_naive_forced(memory, params, targets, recorder)
        else:
            patches = self._decode_naive_greedy(memory, params, recorder)
        return stitch_patches(patches, config.grid_side, config.output_patch_side), patches

    def _queries(self, params: Dict[str, Tensor], batch: int) -> Tensor:
        queries = params["queries"]
        codes = sincos_positional(queries.shape[0], self.config.d_model, "1d")
        placed = add(queries, codes.astype(queries.data.dtype))
        return add(np.zeros((batch, 1, 1), dtype=queries.data.dtype), placed)

    def _step_inputs(self, params: Dict[str, Tensor], previous: Optional[Tensor], batch: int) -> Tensor:
        """Start token followed by the embedded previous patches, plus 1D position codes"""
        start = add(np.zeros((batch, 1, 1), dtype=params["start_token"].data.dtype),
                    params["start_token"].reshape(1, 1, -1))
        pieces = [start]
        if previous is not None and previous.shape[1]:
            pieces.append(linear(previous, params["patch_embed.weight"], params["patch_embed.bias"]))
        inputs = concatenate(pieces, axis=1) if len(pieces) > 1 else start
        codes = sincos_positional(inputs.shape[1], self.config.d_model, "1d")
        return add(inputs, codes.astype(inputs.data.dtype))

    def _decode_naive_forced(self, memory: Tensor, params: Dict[str, Tensor], targets: np.ndarray,
                             recorder: Optional[AttentionRecorder]) -> Tensor:
        config = self.config
        truth = split_patches(np.asarray(targets, dtype=memory.data.dtype), config.output_patch_side)
        inputs = self._step_inputs(params, Tensor(truth[:, :-1]), memory.shape[0])
        decoded = decode(inputs, memory, params, config, causal_mask(config.patch_count), recorder)
        return apply_patch_head(decoded, params)

    def _decode_naive_greedy(self, memory: Tensor, params: Dict[str, Tensor],
                             recorder: Optional[AttentionRecorder]) -> Tensor:
        # inference only: each step re-decodes the whole prefix and keeps its last row
        config = self.config
        batch, steps = memory.shape[0], config.patch_count
        emitted = np.zeros((batch, 0, config.output_patch_side ** 3), dtype=memory.data.dtype)
        for step in range(steps):
            inputs = self._step_inputs(params, Tensor(emitted), batch)
            last = step == steps - 1
            decoded = decode(inputs, memory, params, config, causal_mask(step + 1),
                             recorder if last else None)
            patch = apply_patch_head(Tensor(decoded.data[:, -1:]), params)
            emitted = np.concatenate([emitted, patch.data], axis=1)
        return Tensor(emitted)

    # -- conveniences --------------------------------------------------------------------------

    def reconstruct(self, views: np.ndarray, capture: bool = False) -> ForwardResult:
        """Inference for one object: views [v, H, W] -> ForwardResult with a batch of one"""
        return self.forward(np.asarray(views)[None], capture=capture)

    def apply_batch_stats(self, batch_stats: Dict[str, tuple]) -> None:
        update_running_stats(self.buffers, batch_stats)


# -- checkpoints ---------------------------------------------------------------------------------

def _pack_tensor(name: str, values: np.ndarray) -> bytes:
    encoded = name.encode("utf-8")
    values = np.ascontiguousarray(values, dtype="<f4")
    head = struct.pack("<I", len(encoded)) + encoded + struct.pack("<I", values.ndim)
    head += struct.pack(f"<{values.ndim}I", *values.shape)
    return head + values.tobytes()


def checkpoint_bytes(model: LegoFormer, extras: Optional[Dict[str, np.ndarray]] = None) -> bytes:
    config_blob = model.config.to_json().encode("utf-8")
    tensors = [(name, value) for name, value in model.params.items()]
    tensors += [(BUFFER_PREFIX + name, value) for name, value in sorted(model.buffers.items())]
    tensors += [(EXTRA_PREFIX + name, value) for name, value in sorted((extras or {}).items())]
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION),
             struct.pack("<I", len(config_blob)), config_blob, struct.pack("<I", len(tensors))]
    parts += [_pack_tensor(name, np.asarray(value)) for name, value in tensors]
    return b"".join(parts)


def save_checkpoint(path, model: LegoFormer, extras: Optional[Dict[str, np.ndarray]] = None) -> Path:
    target = Path(path)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(checkpoint_bytes(model, extras))
    except OSError as exc:
        raise DataIOError(f"cannot write checkpoint ({exc.strerror})", target) from exc
    logger.debug("checkpoint written to %s", target)
    return target


class _Reader:
    def __init__(self, blob: bytes, source: str):
        self.blob, self.offset, self.source = blob, 0, source

    def take(self, count: int) -> bytes:
        if self.offset + count > len(self.blob):
            raise DataIOError("truncated checkpoint", self.source)
        chunk = self.blob[self.offset:self.offset + count]
        self.offset += count
        return chunk

    def u32(self, count: int = 1) -> Tuple[int, ...]:
        return struct.unpack(f"<{count}I", self.take(4 * count))


def load_checkpoint(path, expect: Optional[ModelConfig] = None) -> Tuple[LegoFormer, Dict[str, np.ndarray]]:
    """Read a checkpoint; the config is validated (and compared with `expect`) before any weight"""
    source = Path(path)
    try:
        blob = source.read_bytes()
    except OSError as exc:
        raise DataIOError(f"cannot read checkpoint ({exc.strerror})", source) from exc
    reader = _Reader(blob, str(source))
    if reader.take(4) != CHECKPOINT_MAGIC:
        raise DataIOError("not a LegoFormer checkpoint", source)
    (version,) = reader.u32()
    if version != CHECKPOINT_VERSION:
        raise DataIOError(f"unsupported checkpoint version {version}", source)
    (config_length,) = reader.u32()
    config = ModelConfig.from_json(reader.take(config_length).decode("utf-8"))
    if expect is not None and expect != config:
        raise ConfigError(f"checkpoint config {config.to_json()} differs from the requested {expect.to_json()}")

    params, buffers, extras = {}, {}, {}
    (count,) = reader.u32()
    for _ in range(count):
        (name_length,) = reader.u32()
        name = reader.take(name_length).decode("utf-8")
        (rank,) = reader.u32()
        shape = reader.u32(rank) if rank else ()
        size = int(np.prod(shape)) if rank else 1
        values = np.frombuffer(reader.take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
        if name.startswith(BUFFER_PREFIX):
            buffers[name[len(BUFFER_PREFIX):]] = values
        elif name.startswith(EXTRA_PREFIX):
            extras[name[len(EXTRA_PREFIX):]] = values
        else:
            params[name] = values
    return LegoFormer(config, params, buffers), extras
