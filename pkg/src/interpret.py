"""
Interpretation helpers: per-query part grids and attention-score export
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Union

import numpy as np

from src.components.attention import AttentionRecord, AttentionRecorder
from src.config import THRESHOLD
from src.errors import ConfigError, DataIOError, LegoFormerError
from src.model import LegoFormer
from src.voxels import save_voxels, threshold

logger = logging.getLogger(__name__)


@dataclass
class PartAnalysis:
    parts: np.ndarray  # [k, N, N, N] unclipped rank-1 grid of each query
    part_masks: np.ndarray  # [k, N, N, N] thresholded parts
    partial_sums: np.ndarray  # [k, N, N, N] min(1, sum of the first i+1 parts)
    aggregate_masks: np.ndarray  # [k, N, N, N] thresholded partial sums
    composed: np.ndarray  # [N, N, N] the model's own output

    @property
    def k(self) -> int:
        return len(self.parts)


def part_analysis(model: LegoFormer, views: np.ndarray, tau: float = THRESHOLD) -> PartAnalysis:
    """Split one reconstruction into the contribution of each factor query, in query order"""
    if model.config.scheme != "factors":
        raise ConfigError(f"part analysis needs the factors scheme, the model uses {model.config.scheme!r}")
    result = model.reconstruct(views)
    z, y, x = (values[0] for values in result.factors.numpy())
    parts = np.einsum("ai,aj,ak->aijk", z, y, x)
    partial = np.minimum(np.cumsum(parts, axis=0), 1.0)
    return PartAnalysis(parts, threshold(parts, tau), partial, threshold(partial, tau), result.grid.data[0])


def save_parts(analysis: PartAnalysis, out_dir) -> List[Path]:
    """parts/part-XX.voxg (real-valued parts) and parts/aggregate-XX.voxg (thresholded running sums)"""
    root = Path(out_dir) / "parts"
    written = []
    for i in range(analysis.k):
        written.append(save_voxels(root / f"part-{i:02d}.voxg", analysis.parts[i], binary=False))
        written.append(save_voxels(root / f"aggregate-{i:02d}.voxg", analysis.aggregate_masks[i], binary=True))
    return written


# -- attention -----------------------------------------------------------------------------------

RecordSource = Union[AttentionRecorder, Iterable[AttentionRecord]]


def _records(source: RecordSource) -> List[AttentionRecord]:
    if isinstance(source, AttentionRecorder):
        return source.records()
    return list(source)


def attention_to_json(source: RecordSource) -> list:
    records = _records(source)
    if not records:
        raise LegoFormerError("no attention was captured; run the forward pass with capture enabled")
    return [
        {
            "kind": r.kind,
            "layer": int(r.layer),
            "head": int(r.head),
            "rows": r.rows,
            "cols": r.cols,
            "scores": np.asarray(r.scores, dtype=np.float64).ravel().tolist(),
        }
        for r in records
    ]


def export_attention(source: RecordSource, path) -> Path:
    """JSON list of {kind, layer, head, rows, cols, scores}; scores are row-major post-softmax"""
    target = Path(path)
    payload = attention_to_json(source)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(json.dumps(payload) + "\n", encoding="utf-8")
    except OSError as exc:
        raise DataIOError(f"cannot write attention export ({exc.strerror})", target) from exc
    logger.debug("exported %d attention records to %s", len(payload), target)
    return target


def load_attention(path) -> List[AttentionRecord]:
    source = Path(path)
    try:
        payload = json.loads(source.read_text(encoding="utf-8"))
        return [
            AttentionRecord(item["kind"], int(item["layer"]), int(item["head"]),
                            np.asarray(item["scores"], dtype=np.float32).reshape(item["rows"], item["cols"]))
            for item in payload
        ]
    except OSError as exc:
        raise DataIOError(f"cannot read attention export ({exc.strerror})", source) from exc
    except (ValueError, KeyError, TypeError) as exc:
        raise DataIOError(f"malformed attention export ({exc})", source) from exc


def _cross_attention(records: List[AttentionRecord]) -> List[AttentionRecord]:
    cross = [r for r in records if r.kind == "decoder-encoder"]
    if not cross:
        raise LegoFormerError("no decoder-encoder attention among the records")
    return cross


def view_attention_share(source: RecordSource) -> np.ndarray:
    """Decoder-encoder attention averaged over layers, heads and queries: one weight per token.

    For the multi-view variant each token is one input view, so a dominant entry shows the
    view the decoder relied on most.
    """
    cross = _cross_attention(_records(source))
    share = np.mean([r.scores.mean(axis=0) for r in cross], axis=0)
    return share / share.sum()


def patch_attention_maps(source: RecordSource, grid_width: int) -> np.ndarray:
    """Last-layer decoder-encoder attention of each query on the single-view token grid.

    Heads are averaged; every map is min-max normalized to [0, 1] (constant maps become 0).
    Returns [queries, grid_width, grid_width].
    """
    cross = _cross_attention(_records(source))
    last = max(r.layer for r in cross)
    scores = np.mean([r.scores for r in cross if r.layer == last], axis=0)
    if scores.shape[1] != grid_width * grid_width:
        raise ConfigError(f"{scores.shape[1]} tokens do not form a {grid_width}x{grid_width} grid")
    maps = scores.reshape(-1, grid_width, grid_width)
    low = maps.min(axis=(1, 2), keepdims=True)
    span = maps.max(axis=(1, 2), keepdims=True) - low
    return np.divide(maps - low, span, out=np.zeros_like(maps), where=span > 0)
