"""
Multi-head scaled dot-product attention with optional score capture
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from src.components.params import ParamSpec, linear_specs
from src.tensor import Tensor, linear, masked_fill, matmul, mul, scale, softmax, swap_last

ATTENTION_KINDS = ("encoder-encoder", "decoder-encoder", "decoder-decoder")


@dataclass
class AttentionRecord:
    """Post-softmax scores of one head: rows attend, columns are attended"""

    kind: str
    layer: int
    head: int
    scores: np.ndarray

    @property
    def rows(self) -> int:
        return self.scores.shape[0]

    @property
    def cols(self) -> int:
        return self.scores.shape[1]

    def masked_rows(self) -> np.ndarray:
        """Rows that could attend nowhere (all scores zero)"""
        return ~self.scores.any(axis=1)


class AttentionRecorder:
    """Collects attention weights of every layer during one forward pass"""

    def __init__(self):
        self.entries: List[Tuple[str, int, np.ndarray]] = []

    def __len__(self) -> int:
        return len(self.entries)

    def add(self, kind: str, layer: int, weights: np.ndarray) -> None:
        self.entries.append((kind, layer, np.array(weights, copy=True)))

    def clear(self) -> None:
        self.entries.clear()

    def records(self, sample: int = 0) -> List[AttentionRecord]:
        out = []
        for kind, layer, weights in self.entries:
            for head in range(weights.shape[1]):
                out.append(AttentionRecord(kind, layer, head, weights[sample, head]))
        return out


def diagonal_mask(size: int) -> np.ndarray:
    """Blocks every position from attending to itself"""
    return np.eye(size, dtype=bool)


def causal_mask(size: int) -> np.ndarray:
    """Blocks attention to later positions; each position still sees itself"""
    return np.triu(np.ones((size, size), dtype=bool), k=1)


def attention_specs(name: str, d_model: int) -> Dict[str, ParamSpec]:
    specs = {}
    for proj in ("q", "k", "v", "o"):
        specs.update(linear_specs(f"{name}.{proj}", d_model, d_model))
    return specs


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    batch, length, d_model = x.shape
    return x.reshape(batch, length, n_heads, d_model // n_heads).transpose(0, 2, 1, 3)


def multi_head_attention(queries: Tensor, keys: Tensor, params: Dict[str, Tensor], name: str,
                         n_heads: int, mask: Optional[np.ndarray] = None,
                         recorder: Optional[AttentionRecorder] = None, kind: str = "",
                         layer: int = 0) -> Tensor:
    """queries [B, Lq, d] attend over keys [B, Lk, d]; mask [Lq, Lk] is True where blocked.

    Rows whose every column is blocked get all-zero weights, so they contribute nothing.
    """
    batch, length, d_model = queries.shape
    q = _split_heads(linear(queries, params[f"{name}.q.weight"], params[f"{name}.q.bias"]), n_heads)
    k = _split_heads(linear(keys, params[f"{name}.k.weight"], params[f"{name}.k.bias"]), n_heads)
    v = _split_heads(linear(keys, params[f"{name}.v.weight"], params[f"{name}.v.bias"]), n_heads)

    scores = scale(matmul(q, swap_last(k)), 1.0 / math.sqrt(d_model // n_heads))
    if mask is not None:
        scores = masked_fill(scores, mask)
    weights = softmax(scores, axis=-1)
    if mask is not None:
        open_rows = ~mask.all(axis=-1)
        if not open_rows.all():
            weights = mul(weights, open_rows[:, None].astype(weights.data.dtype))
    if recorder is not None:
        recorder.add(kind, layer, weights.data)

    context = matmul(weights, v).transpose(0, 2, 1, 3).reshape(batch, length, d_model)
    return linear(context, params[f"{name}.o.weight"], params[f"{name}.o.bias"])
