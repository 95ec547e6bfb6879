"""
Synthetic desk-scale dataset: blocky voxel objects and orthographic renders.

Objects are unions of axis-aligned boxes arranged as simple furniture-like archetypes. The
grid is indexed [z, y, x] with y pointing up; the world places voxel (z, y, x) in the cube
[x/N, (x+1)/N] x [y/N, (y+1)/N] x [z/N, (z+1)/N] inside [0, 1]^3.
"""
from __future__ import annotations

import json
import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.config import ARCHETYPES, DATA_STREAM, DATASET_VERSION, MANIFEST_NAME, DataConfig, derive_seed
from src.errors import ConfigError, DataIOError
from src.profiler import profiler
from src.voxels import load_voxels, save_voxels, surface_voxels

logger = logging.getLogger(__name__)

RENDER_MODES = ("silhouette", "depth")
CAMERA_DISTANCE = 2.0
HALF_DIAGONAL = math.sqrt(3.0) / 2.0
RAY_CHUNK = 512


@dataclass(frozen=True)
class Box:
    origin: Tuple[int, int, int]  # (z, y, x)
    extent: Tuple[int, int, int]

    @property
    def volume(self) -> int:
        return int(np.prod(self.extent))

    def slices(self) -> Tuple[slice, slice, slice]:
        return tuple(slice(o, o + e) for o, e in zip(self.origin, self.extent))


@dataclass
class ShapeSpec:
    seed: int
    archetype: str
    boxes: List[Box]
    grid_side: int

    def validate(self) -> "ShapeSpec":
        if not self.boxes:
            raise ConfigError(f"{self.archetype} shape has no boxes")
        for box in self.boxes:
            if min(box.extent) < 1 or min(box.origin) < 0 or \
                    any(o + e > self.grid_side for o, e in zip(box.origin, box.extent)):
                raise ConfigError(f"box {box} leaves the {self.grid_side}^3 grid")
        return self

    def occupancy(self) -> np.ndarray:
        grid = np.zeros((self.grid_side,) * 3, dtype=np.uint8)
        for box in self.boxes:
            grid[box.slices()] = 1
        return grid


def _box(z, y, x, dz, dy, dx) -> Box:
    return Box((int(z), int(y), int(x)), (int(dz), int(dy), int(dx)))


def _span(rng: np.random.Generator, low: int, high: int) -> int:
    """Integer in [low, high], tolerant of high < low"""
    return int(rng.integers(low, max(low, high) + 1))


def _table(rng, n: int) -> List[Box]:
    leg = 2 if n >= 12 else 1
    dz, dx = _span(rng, n // 2, n - 2), _span(rng, n // 2, n - 2)
    oz, ox = _span(rng, 0, n - dz), _span(rng, 0, n - dx)
    thickness = _span(rng, 1, 2)
    height = _span(rng, n // 3, n - thickness - 1)
    boxes = [_box(oz, height, ox, dz, thickness, dx)]
    corners = [(oz, ox), (oz, ox + dx - leg), (oz + dz - leg, ox), (oz + dz - leg, ox + dx - leg)]
    count = _span(rng, 2, 4)
    for index in sorted(rng.choice(4, size=count, replace=False)):
        z, x = corners[index]
        boxes.append(_box(z, 0, x, leg, height, leg))
    return boxes


def _chair(rng, n: int) -> List[Box]:
    dz, dx = _span(rng, n // 3, n // 2 + 1), _span(rng, n // 3, n // 2 + 1)
    oz, ox = _span(rng, 0, n - dz), _span(rng, 0, n - dx)
    seat = _span(rng, n // 4, n // 2)
    back = _span(rng, n // 4, n - seat - 2)
    boxes = [_box(oz, seat, ox, dz, 1, dx), _box(oz, seat + 1, ox, 1, back, dx)]
    for z, x in ((oz, ox), (oz, ox + dx - 1), (oz + dz - 1, ox), (oz + dz - 1, ox + dx - 1)):
        boxes.append(_box(z, 0, x, 1, seat, 1))
    return boxes


def _lshape(rng, n: int) -> List[Box]:
    dz, dx = _span(rng, n // 4, n - 2), _span(rng, n // 2, n - 1)
    oz, ox = _span(rng, 0, n - dz), _span(rng, 0, n - dx)
    base = _span(rng, 1, max(1, n // 4))
    width = _span(rng, 1, dx // 2)
    rise = _span(rng, n // 4, n - base)
    start = ox if rng.random() < 0.5 else ox + dx - width
    return [_box(oz, 0, ox, dz, base, dx), _box(oz, base, start, dz, rise, width)]


def _slab(rng, n: int) -> List[Box]:
    dz, dy, dx = _span(rng, n // 2, n - 2), _span(rng, 1, max(1, n // 4)), _span(rng, n // 2, n - 2)
    return [_box(_span(rng, 0, n - dz), _span(rng, 0, n - dy), _span(rng, 0, n - dx), dz, dy, dx)]


def _random_union(rng, n: int) -> List[Box]:
    boxes = []
    for _ in range(_span(rng, 2, 4)):
        dz, dy, dx = (_span(rng, 2, n // 2) for _ in range(3))
        boxes.append(_box(_span(rng, 0, n - dz), _span(rng, 0, n - dy), _span(rng, 0, n - dx), dz, dy, dx))
    return boxes


SHAPE_BUILDERS = {
    "table": _table,
    "chair": _chair,
    "lshape": _lshape,
    "slab": _slab,
    "random-union": _random_union,
}


def generate_shape(seed: int, archetype: str, grid_side: int) -> Tuple[ShapeSpec, np.ndarray]:
    """Deterministic box layout for (seed, archetype, N) and its occupancy grid"""
    if archetype not in SHAPE_BUILDERS:
        raise ConfigError(f"unknown archetype {archetype!r}, expected one of {ARCHETYPES}")
    if grid_side < 8:
        raise ConfigError(f"grid side must be >= 8, got {grid_side}")
    rng = np.random.default_rng(seed)
    spec = ShapeSpec(seed, archetype, SHAPE_BUILDERS[archetype](rng, grid_side), grid_side).validate()
    return spec, spec.occupancy()


def rotate_quarter(grid: np.ndarray, turns: int = 1) -> np.ndarray:
    """Rotate about the vertical axis so that rendering the result at azimuth a equals
    rendering the input at a + 90 * turns"""
    rotated = np.asarray(grid)
    for _ in range(turns % 4):
        rotated = rotated.transpose(2, 1, 0)[:, :, ::-1]
    return np.ascontiguousarray(rotated)


# -- rendering -----------------------------------------------------------------------------------

@dataclass
class RenderedView:
    image: np.ndarray  # [H, W] float32 in [0, 1]
    azimuth_deg: float
    elevation_deg: float
    mode: str = "depth"

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


def _snap(value: float) -> float:
    return 0.0 if abs(value) < 1e-12 else value


def camera_basis(azimuth_deg: float, elevation_deg: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(view direction, right, up) in world (x, y, z); azimuth turns about +y, 0 looks down -z"""
    az, el = math.radians(azimuth_deg), math.radians(elevation_deg)
    ca, sa, ce, se = (_snap(v) for v in (math.cos(az), math.sin(az), math.cos(el), math.sin(el)))
    view = -np.array([ce * sa, se, ce * ca])
    right = np.array([ca, 0.0, -sa])
    up = np.cross(right, view)
    return view, right, up


def _first_hits(origins: np.ndarray, direction: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Entry distance of each ray into the nearest box (inf when it misses every box)"""
    entry = np.full(len(origins), np.inf)
    if len(lo) == 0:
        return entry
    for start in range(0, len(origins), RAY_CHUNK):
        o = origins[start:start + RAY_CHUNK, None, :]
        t_near = np.full((o.shape[0], len(lo)), -np.inf)
        t_far = np.full((o.shape[0], len(lo)), np.inf)
        inside = np.ones_like(t_near, dtype=bool)
        for axis in range(3):
            d = direction[axis]
            if d == 0.0:
                inside &= (o[..., axis] >= lo[:, axis]) & (o[..., axis] < hi[:, axis])
                continue
            t1 = (lo[:, axis] - o[..., axis]) / d
            t2 = (hi[:, axis] - o[..., axis]) / d
            t_near = np.maximum(t_near, np.minimum(t1, t2))
            t_far = np.minimum(t_far, np.maximum(t1, t2))
        hit = inside & (t_far > t_near) & (t_far > 0)
        entry[start:start + RAY_CHUNK] = np.where(hit, t_near, np.inf).min(axis=1)
    return entry


def render_view(grid: np.ndarray, azimuth_deg: float, elevation_deg: float, width: int, height: int,
                mode: str = "depth") -> RenderedView:
    """Orthographic ray cast through each pixel center of a unit-wide view window.

    silhouette: 1 where the ray hits an occupied voxel. depth: normalized inverse first-hit
    distance, 1 at the near plane of the bounding sphere, 0 where nothing is hit.
    """
    if mode not in RENDER_MODES:
        raise ConfigError(f"unknown render mode {mode!r}")
    grid = np.asarray(grid)
    side = grid.shape[0]
    view, right, up = camera_basis(azimuth_deg, elevation_deg)
    center = np.full(3, 0.5)
    s = (np.arange(width) + 0.5) / width - 0.5
    t = 0.5 - (np.arange(height) + 0.5) / height
    origins = (center - CAMERA_DISTANCE * view
               + s[None, :, None] * right + t[:, None, None] * up).reshape(-1, 3)

    # only surface voxels can be the first hit; argwhere gives (z, y, x), the world wants (x, y, z)
    cells = np.argwhere(surface_voxels(grid))[:, ::-1].astype(np.float64)
    lo, hi = cells / side, (cells + 1.0) / side
    entry = _first_hits(origins, view, lo, hi).reshape(height, width)
    hit = np.isfinite(entry)
    if mode == "silhouette":
        image = hit.astype(np.float32)
    else:
        near, far = CAMERA_DISTANCE - HALF_DIAGONAL, CAMERA_DISTANCE + HALF_DIAGONAL
        depth = np.clip(1.0 - (np.where(hit, entry, far) - near) / (far - near), 0.0, 1.0)
        image = np.where(hit, depth, 0.0).astype(np.float32)
    return RenderedView(image, float(azimuth_deg), float(elevation_deg), mode)


# -- PGM images ----------------------------------------------------------------------------------

def quantize(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(path, image: np.ndarray) -> Path:
    """8-bit binary PGM (P5); float images in [0, 1] are quantized"""
    target = Path(path)
    pixels = image if image.dtype == np.uint8 else quantize(image)
    header = f"P5\n{pixels.shape[1]} {pixels.shape[0]}\n255\n".encode("ascii")
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(header + np.ascontiguousarray(pixels).tobytes())
    except OSError as exc:
        raise DataIOError(f"cannot write image ({exc.strerror})", target) from exc
    return target


_PGM_HEADER = re.compile(rb"P5(?:\s+|#[^\n]*\n)+(\d+)(?:\s+|#[^\n]*\n)+(\d+)(?:\s+|#[^\n]*\n)+(\d+)\s")


def read_pgm(path) -> np.ndarray:
    """PGM P5 -> float32 [H, W] in [0, 1]"""
    source = Path(path)
    try:
        blob = source.read_bytes()
    except OSError as exc:
        raise DataIOError(f"cannot read image ({exc.strerror})", source) from exc
    match = _PGM_HEADER.match(blob)
    if not match:
        raise DataIOError("not a binary PGM (P5) image", source)
    width, height, maxval = (int(g) for g in match.groups())
    if maxval != 255:
        raise DataIOError(f"unsupported PGM maxval {maxval}", source)
    payload = blob[match.end():]
    if len(payload) != width * height:
        raise DataIOError(f"PGM payload has {len(payload)} bytes, expected {width * height}", source)
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width).astype(np.float32) / 255.0


# -- manifest ------------------------------------------------------------------------------------

@dataclass
class ViewEntry:
    path: str
    azimuth_deg: float
    elevation_deg: float


@dataclass
class ManifestEntry:
    id: str
    archetype: str
    voxel_path: str
    views: List[ViewEntry]
    split: str


@dataclass
class DatasetManifest:
    grid_side: int
    objects: List[ManifestEntry] = field(default_factory=list)
    version: int = DATASET_VERSION

    def ids(self, split: Optional[str] = None) -> List[str]:
        return [o.id for o in self.objects if split is None or o.split == split]

    def validate(self, source: str = "<manifest>") -> "DatasetManifest":
        train, test = set(self.ids("train")), set(self.ids("test"))
        if train & test:
            raise DataIOError(f"ids in both splits: {sorted(train & test)}", source)
        unknown = [o.id for o in self.objects if o.split not in ("train", "test")]
        if unknown:
            raise DataIOError(f"objects with an unknown split: {unknown}", source)
        return self

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "grid_side": self.grid_side,
            "objects": [
                {
                    "id": o.id,
                    "archetype": o.archetype,
                    "voxel_path": o.voxel_path,
                    "views": [{"path": v.path, "azimuth_deg": v.azimuth_deg,
                               "elevation_deg": v.elevation_deg} for v in o.views],
                    "split": o.split,
                }
                for o in self.objects
            ],
        }

    def save(self, path) -> Path:
        target = Path(path)
        try:
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")
        except OSError as exc:
            raise DataIOError(f"cannot write manifest ({exc.strerror})", target) from exc
        return target

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        source = Path(path)
        try:
            raw = json.loads(source.read_text(encoding="utf-8"))
            objects = [
                ManifestEntry(o["id"], o["archetype"], o["voxel_path"],
                              [ViewEntry(v["path"], float(v["azimuth_deg"]), float(v["elevation_deg"]))
                               for v in o["views"]], o["split"])
                for o in raw["objects"]
            ]
            manifest = cls(int(raw["grid_side"]), objects, int(raw["version"]))
        except OSError as exc:
            raise DataIOError(f"cannot read manifest ({exc.strerror})", source) from exc
        except (ValueError, KeyError, TypeError) as exc:
            raise DataIOError(f"malformed manifest ({exc})", source) from exc
        if manifest.version != DATASET_VERSION:
            raise DataIOError(f"unsupported dataset version {manifest.version}", source)
        return manifest.validate(str(source))


def manifest_path(path) -> Path:
    """Accept either a dataset directory or the manifest file itself"""
    target = Path(path)
    return target / MANIFEST_NAME if target.is_dir() else target


# -- building ------------------------------------------------------------------------------------

def object_id(index: int) -> str:
    return f"obj-{index:04d}"


def assign_splits(ids: Sequence[str], fraction: float, seed: int) -> Dict[str, str]:
    """Seeded shuffle, the first round(fraction * n) ids go to train"""
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"split fraction must lie in (0, 1), got {fraction}")
    order = np.random.default_rng(derive_seed(seed, DATA_STREAM)).permutation(len(ids))
    train_count = int(round(fraction * len(ids)))
    return {ids[i]: ("train" if rank < train_count else "test") for rank, i in enumerate(order)}


def _build_object(index: int, config: DataConfig, root: Path) -> Tuple[str, str, str, List[ViewEntry]]:
    archetype = config.archetypes[index % len(config.archetypes)]
    name = object_id(index)
    _, grid = generate_shape(derive_seed(config.seed, DATA_STREAM, index), archetype, config.grid_side)
    voxel_path = f"voxels/{name}.voxg"
    save_voxels(root / voxel_path, grid, binary=True)
    views = []
    for number, (azimuth, elevation) in enumerate(config.view_angles()):
        rendered = render_view(grid, azimuth, elevation, config.image_side, config.image_side,
                               config.render_mode)
        view_path = f"views/{name}/view-{number:02d}.pgm"
        write_pgm(root / view_path, rendered.image)
        views.append(ViewEntry(view_path, azimuth, elevation))
    return name, archetype, voxel_path, views


@profiler.profile_function("build_dataset")
def build_dataset(config: DataConfig, out_dir, threads: int = 1) -> DatasetManifest:
    """Generate every object, render its view pool and write the manifest.

    Objects draw their seeds from (seed, index), so building with several threads
    produces the same bytes as a single-threaded build.
    """
    config.validate()
    root = Path(out_dir)
    indices = range(config.object_count)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            built = list(pool.map(lambda i: _build_object(i, config, root), indices))
    else:
        built = [_build_object(i, config, root) for i in indices]

    splits = assign_splits([name for name, *_ in built], config.split_fraction, config.seed)
    manifest = DatasetManifest(config.grid_side, [
        ManifestEntry(name, archetype, voxel_path, views, splits[name])
        for name, archetype, voxel_path, views in built
    ])
    manifest.validate().save(root / MANIFEST_NAME)
    logger.info("built %d objects (%d train / %d test) in %s", len(built),
                len(manifest.ids("train")), len(manifest.ids("test")), root)
    return manifest


# -- loading -------------------------------------------------------------------------------------

@dataclass
class LoadedObject:
    id: str
    archetype: str
    split: str
    grid: np.ndarray  # [N, N, N] uint8
    views: np.ndarray  # [V, H, W] float32
    angles: List[Tuple[float, float]]


class SyntheticDataset:
    """In-memory view of a built dataset, objects in manifest order"""

    def __init__(self, manifest: DatasetManifest, root: Path, objects: List[LoadedObject]):
        self.manifest = manifest
        self.root = root
        self.objects = objects

    @classmethod
    def load(cls, path) -> "SyntheticDataset":
        source = manifest_path(path)
        manifest = DatasetManifest.load(source)
        root = source.parent
        objects = []
        for entry in manifest.objects:
            grid = load_voxels(root / entry.voxel_path)
            if grid.shape[0] != manifest.grid_side:
                raise DataIOError(f"voxel side {grid.shape[0]} differs from manifest grid_side "
                                  f"{manifest.grid_side}", root / entry.voxel_path)
            if not entry.views:
                raise DataIOError(f"object {entry.id} has no views", source)
            views = np.stack([read_pgm(root / view.path) for view in entry.views])
            objects.append(LoadedObject(entry.id, entry.archetype, entry.split, grid.astype(np.uint8),
                                        views, [(v.azimuth_deg, v.elevation_deg) for v in entry.views]))
        logger.debug("loaded %d objects from %s", len(objects), source)
        return cls(manifest, root, objects)

    @property
    def grid_side(self) -> int:
        return self.manifest.grid_side

    @property
    def path(self) -> Path:
        return self.root / MANIFEST_NAME

    def __len__(self) -> int:
        return len(self.objects)

    def split(self, name: Optional[str]) -> List[LoadedObject]:
        return [o for o in self.objects if name is None or o.split == name]
