"""
Pre-norm transformer encoder and decoder stacks.

Every sub-layer is `x + f(LayerNorm(x))`; a closing LayerNorm follows the last layer of each
side. With `share_layer_weights` all layers of one side read the same parameters, so their
gradients accumulate onto one set of tensors.
"""
from __future__ import annotations

from typing import Dict, Optional

import numpy as np

from src.components.attention import AttentionRecorder, attention_specs, multi_head_attention
from src.components.params import ParamSpec, linear_specs, norm_specs
from src.config import ModelConfig
from src.tensor import Tensor, layer_norm, linear, relu


def layer_name(side: str, index: int, config: ModelConfig) -> str:
    return f"{side}.layers.{0 if config.share_layer_weights else index}"


def _stored_layers(config: ModelConfig) -> int:
    return 1 if config.share_layer_weights else config.n_layers


def feed_forward_specs(name: str, config: ModelConfig) -> Dict[str, ParamSpec]:
    specs = linear_specs(f"{name}.ff1", config.d_model, config.ff_dim)
    specs.update(linear_specs(f"{name}.ff2", config.ff_dim, config.d_model))
    return specs


def encoder_specs(config: ModelConfig) -> Dict[str, ParamSpec]:
    specs: Dict[str, ParamSpec] = {}
    for i in range(_stored_layers(config)):
        name = f"encoder.layers.{i}"
        specs.update(norm_specs(f"{name}.norm1", config.d_model))
        specs.update(attention_specs(f"{name}.self_attn", config.d_model))
        specs.update(norm_specs(f"{name}.norm2", config.d_model))
        specs.update(feed_forward_specs(name, config))
    specs.update(norm_specs("encoder.final_norm", config.d_model))
    return specs


def decoder_specs(config: ModelConfig) -> Dict[str, ParamSpec]:
    specs: Dict[str, ParamSpec] = {}
    for i in range(_stored_layers(config)):
        name = f"decoder.layers.{i}"
        specs.update(norm_specs(f"{name}.norm1", config.d_model))
        specs.update(attention_specs(f"{name}.self_attn", config.d_model))
        specs.update(norm_specs(f"{name}.norm2", config.d_model))
        specs.update(attention_specs(f"{name}.cross_attn", config.d_model))
        specs.update(norm_specs(f"{name}.norm3", config.d_model))
        specs.update(feed_forward_specs(name, config))
    specs.update(norm_specs("decoder.final_norm", config.d_model))
    return specs


def _norm(x: Tensor, params: Dict[str, Tensor], name: str, eps: float) -> Tensor:
    return layer_norm(x, params[f"{name}.gain"], params[f"{name}.bias"], eps)


def _feed_forward(x: Tensor, params: Dict[str, Tensor], name: str) -> Tensor:
    hidden = relu(linear(x, params[f"{name}.ff1.weight"], params[f"{name}.ff1.bias"]))
    return linear(hidden, params[f"{name}.ff2.weight"], params[f"{name}.ff2.bias"])


def encode(tokens: Tensor, params: Dict[str, Tensor], config: ModelConfig,
           recorder: Optional[AttentionRecorder] = None) -> Tensor:
    """tokens [B, T, d] -> memory [B, T, d]; attention is unmasked"""
    eps = config.layer_norm_eps
    x = tokens
    for i in range(config.n_layers):
        name = layer_name("encoder", i, config)
        normed = _norm(x, params, f"{name}.norm1", eps)
        x = x + multi_head_attention(normed, normed, params, f"{name}.self_attn", config.n_heads,
                                     recorder=recorder, kind="encoder-encoder", layer=i)
        x = x + _feed_forward(_norm(x, params, f"{name}.norm2", eps), params, name)
    return _norm(x, params, "encoder.final_norm", eps)


def decode(queries: Tensor, memory: Tensor, params: Dict[str, Tensor], config: ModelConfig,
           self_mask: Optional[np.ndarray], recorder: Optional[AttentionRecorder] = None) -> Tensor:
    """queries [B, Q, d] -> [B, Q, d] through masked self-attention, cross-attention and FF"""
    eps = config.layer_norm_eps
    x = queries
    for i in range(config.n_layers):
        name = layer_name("decoder", i, config)
        normed = _norm(x, params, f"{name}.norm1", eps)
        x = x + multi_head_attention(normed, normed, params, f"{name}.self_attn", config.n_heads,
                                     mask=self_mask, recorder=recorder, kind="decoder-decoder", layer=i)
        x = x + multi_head_attention(_norm(x, params, f"{name}.norm2", eps), memory, params,
                                     f"{name}.cross_attn", config.n_heads,
                                     recorder=recorder, kind="decoder-encoder", layer=i)
        x = x + _feed_forward(_norm(x, params, f"{name}.norm3", eps), params, name)
    return _norm(x, params, "decoder.final_norm", eps)
