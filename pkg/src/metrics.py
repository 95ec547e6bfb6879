"""
Reconstruction metrics (voxel IoU, surface F-score) and view-count evaluation sweeps
"""
from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.spatial.distance import cdist

from src.config import EvalConfig
from src.dataset import LoadedObject, SyntheticDataset
from src.errors import ConfigError, DataIOError, RangeError, ShapeMismatchError
from src.model import LegoFormer
from src.profiler import profiler
from src.voxels import binary_iou, surface_voxels, threshold

logger = logging.getLogger(__name__)

NEIGHBOR_CHUNK = 1024


def _as_binary(grid, name: str) -> np.ndarray:
    values = np.asarray(grid)
    if values.size and not np.isin(values, (0, 1)).all():
        raise RangeError(f"{name} is not a binary grid")
    return values != 0


def voxel_iou(a: np.ndarray, b: np.ndarray) -> float:
    """|a and b| / |a or b|; 1 when both grids are empty"""
    if np.shape(a) != np.shape(b):
        raise ShapeMismatchError("voxel_iou", np.shape(a), np.shape(b))
    return binary_iou(_as_binary(a, "first grid"), _as_binary(b, "second grid"))


@dataclass
class SurfaceCloud:
    """Voxel centers of surface voxels, normalized to [0, 1]^3, in (z, y, x) index order"""

    points: np.ndarray

    def __len__(self) -> int:
        return len(self.points)


def surface_points(grid: np.ndarray) -> SurfaceCloud:
    occupied = _as_binary(grid, "grid")
    cells = np.argwhere(surface_voxels(occupied))
    return SurfaceCloud((cells + 0.5) / occupied.shape[0])


def _nearest_distances(source: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Exact all-pairs nearest-neighbour distance from every source point to the target cloud"""
    out = np.empty(len(source))
    for start in range(0, len(source), NEIGHBOR_CHUNK):
        out[start:start + NEIGHBOR_CHUNK] = cdist(source[start:start + NEIGHBOR_CHUNK], target).min(axis=1)
    return out


def fscore_components(pred: SurfaceCloud, gt: SurfaceCloud, distance: float) -> Tuple[float, float, float]:
    """(precision, recall, F) at a distance threshold in normalized units"""
    if distance <= 0:
        raise RangeError(f"F-score distance must be > 0, got {distance}")
    if len(pred) == 0 and len(gt) == 0:
        return 1.0, 1.0, 1.0
    if len(pred) == 0 or len(gt) == 0:
        return 0.0, 0.0, 0.0
    precision = float(np.mean(_nearest_distances(pred.points, gt.points) < distance))
    recall = float(np.mean(_nearest_distances(gt.points, pred.points) < distance))
    if precision + recall == 0:
        return precision, recall, 0.0
    return precision, recall, 2 * precision * recall / (precision + recall)


def fscore(pred: SurfaceCloud, gt: SurfaceCloud, distance: float) -> float:
    return fscore_components(pred, gt, distance)[2]


# -- sweeps --------------------------------------------------------------------------------------

def reconstruct_binary(model: LegoFormer, views: np.ndarray, tau: float) -> np.ndarray:
    return threshold(model.reconstruct(views).grid.data[0], tau)


def score_object(model: LegoFormer, obj: LoadedObject, view_count: int, config: EvalConfig) -> Dict[str, object]:
    started = time.perf_counter()
    predicted = reconstruct_binary(model, obj.views[:view_count], config.threshold)
    elapsed = time.perf_counter() - started
    precision, recall, f = fscore_components(surface_points(predicted), surface_points(obj.grid),
                                             config.fscore_distance)
    return {
        "id": obj.id,
        "iou": voxel_iou(predicted, obj.grid),
        "fscore": f,
        "precision": precision,
        "recall": recall,
        "_seconds": elapsed,
    }


def check_view_counts(model: LegoFormer, objects: Sequence[LoadedObject], view_counts: Sequence[int]) -> None:
    if model.config.variant == "single-view" and any(v != 1 for v in view_counts):
        raise ConfigError(f"the single-view variant only accepts 1 view, got {list(view_counts)}")
    for obj in objects:
        short = [v for v in view_counts if v > len(obj.views)]
        if short:
            raise ConfigError(f"object {obj.id} has {len(obj.views)} views, cannot evaluate with {short}")


@profiler.profile_function("evaluate_sweep")
def evaluate_sweep(model: LegoFormer, dataset: SyntheticDataset, config: EvalConfig,
                   checkpoint: str = "", threads: int = 1, timing: bool = True,
                   objects: Optional[List[LoadedObject]] = None) -> Dict[str, object]:
    """IoU and F-score per object and view count; each object contributes its first v views.

    Objects may be scored in parallel, the report keeps manifest order either way.
    """
    config.validate()
    if model.config.grid_side != dataset.grid_side:
        raise ConfigError(f"model grid side {model.config.grid_side} differs from dataset "
                          f"grid side {dataset.grid_side}")
    objects = objects if objects is not None else dataset.split(config.split)
    if not objects:
        raise ConfigError(f"no objects in the {config.split!r} split")
    check_view_counts(model, objects, config.view_counts)

    sweep, seconds = [], {}
    for view_count in config.view_counts:
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                rows = list(pool.map(lambda o: score_object(model, o, view_count, config), objects))
        else:
            rows = [score_object(model, o, view_count, config) for o in objects]
        seconds[str(view_count)] = float(np.mean([row.pop("_seconds") for row in rows]))
        sweep.append({
            "views": int(view_count),
            "mean_iou": float(np.mean([row["iou"] for row in rows])),
            "mean_fscore": float(np.mean([row["fscore"] for row in rows])),
            "per_object": rows,
        })
        logger.info("views=%d mean IoU %.4f, mean F-score %.4f", view_count,
                    sweep[-1]["mean_iou"], sweep[-1]["mean_fscore"])

    report = {"checkpoint": str(checkpoint), "dataset": str(dataset.path), "per_view_count": sweep}
    if timing:
        report["timing"] = {"scheme": model.config.scheme, "seconds_per_reconstruction": seconds}
    return report


def mean_iou(model: LegoFormer, objects: Sequence[LoadedObject], view_count: int, tau: float) -> float:
    """Quick training-time check: mean thresholded IoU with the first view_count views"""
    scores = [voxel_iou(reconstruct_binary(model, o.views[:view_count], tau), o.grid) for o in objects]
    return float(np.mean(scores)) if scores else float("nan")


def sweep_frame(report: Dict[str, object]) -> pd.DataFrame:
    """Mean metrics per view count, as printed by the eval command"""
    return pd.DataFrame([
        {"views": entry["views"], "mean_iou": entry["mean_iou"], "mean_fscore": entry["mean_fscore"],
         "objects": len(entry["per_object"])}
        for entry in report["per_view_count"]
    ])


def write_report(path, report: Dict[str, object]) -> Path:
    target = Path(path)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    except OSError as exc:
        raise DataIOError(f"cannot write report ({exc.strerror})", target) from exc
    return target
