"""
Configuration settings for the LegoFormer desk-scale reconstruction pipeline
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from src.errors import ConfigError, DataIOError

# Output grid and rendered views
GRID_SIDE = 16
IMAGE_SIDE = 32
VIEWS_PER_OBJECT = 8
VIEW_ELEVATION_DEG = 20.0
RENDER_MODE = "depth"
ARCHETYPES = ("table", "chair", "lshape", "slab", "random-union")

# Network
D_MODEL = 64
FF_DIM = 128
N_LAYERS = 2
N_HEADS = 4
N_QUERIES = 8
CONV_UNITS = 3
CONV_CHANNELS = 16
STEM_STRIDE = 2
PATCH_SIDE = 4
OUTPUT_PATCH_SIDE = 4
LAYER_NORM_EPS = 1e-5
VARIANTS = ("multi-view", "single-view")
SCHEMES = ("factors", "naive", "naive-nar", "naive-full")

# Training
BATCH_SIZE = 8
TOTAL_STEPS = 2000
BASE_LR = 0.01
WARMUP_STEPS = 200
ADAGRAD_EPS = 1e-10
TRAIN_VIEWS = 4
CHECKPOINT_INTERVAL = 500
OPTIMIZERS = ("adagrad", "sgd")
VIEW_POLICIES = ("fixed", "uniform")

# Evaluation
THRESHOLD = 0.3
FSCORE_DISTANCE = 0.01
SWEEP_VIEW_COUNTS = (1, 2, 4, 8)

# File names
MANIFEST_NAME = "manifest.json"
LOSS_LOG_NAME = "loss_log.csv"
REPORT_NAME = "report.json"
EFFECTIVE_CONFIG_NAME = "effective_config.txt"
DATASET_VERSION = 1

# Root seed streams, see derive_seed
DATA_STREAM = 0
INIT_STREAM = 1
SAMPLING_STREAM = 2
ORACLE_STREAM = 3


def derive_seed(root: int, stream: int, *counters: int) -> int:
    """Split the root seed into an independent 32-bit seed for one subsystem.

    The (root, stream, counters...) tuple is fed to numpy's SeedSequence, so the same
    triple always yields the same seed and distinct counters never collide in practice.
    """
    sequence = np.random.SeedSequence([int(root), int(stream), *[int(c) for c in counters]])
    return int(sequence.generate_state(1, dtype=np.uint32)[0])


def _fail(message: str) -> None:
    raise ConfigError(message)


@dataclass(frozen=True)
class ModelConfig:
    grid_side: int = GRID_SIDE
    image_side: int = IMAGE_SIDE
    image_channels: int = 1
    d_model: int = D_MODEL
    ff_dim: int = FF_DIM
    n_layers: int = N_LAYERS
    n_heads: int = N_HEADS
    n_queries: int = N_QUERIES
    variant: str = "multi-view"
    scheme: str = "factors"
    conv_units: int = CONV_UNITS
    conv_channels: int = CONV_CHANNELS
    stem_stride: int = STEM_STRIDE
    patch_side: int = PATCH_SIDE
    share_layer_weights: bool = False
    query_init_mean: float = 0.0
    query_init_std: float = 1.0
    output_patch_side: int = OUTPUT_PATCH_SIDE
    layer_norm_eps: float = LAYER_NORM_EPS

    @property
    def pooled(self) -> bool:
        # MaxPool follows the second conv unit
        return self.conv_units >= 2

    @property
    def feature_side(self) -> int:
        side = self.image_side // self.stem_stride
        return side // 2 if self.pooled else side

    @property
    def patch_grid_side(self) -> int:
        return self.feature_side // self.patch_side

    @property
    def output_patch_grid(self) -> int:
        return self.grid_side // self.output_patch_side

    @property
    def patch_count(self) -> int:
        """Number of 3D output patches used by the naive schemes"""
        return self.output_patch_grid ** 3

    @property
    def decoder_query_count(self) -> int:
        if self.scheme == "factors":
            return self.n_queries
        if self.scheme == "naive-full":
            return 1
        return self.patch_count

    def token_count(self, n_views: int) -> int:
        if self.variant == "multi-view":
            return n_views
        return self.patch_grid_side ** 2

    def validate(self) -> "ModelConfig":
        if self.variant not in VARIANTS:
            _fail(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.scheme not in SCHEMES:
            _fail(f"unknown scheme {self.scheme!r}, expected one of {SCHEMES}")
        for name in ("grid_side", "image_side", "image_channels", "d_model", "ff_dim", "n_layers",
                     "n_heads", "n_queries", "conv_units", "conv_channels", "stem_stride",
                     "patch_side", "output_patch_side"):
            if getattr(self, name) < 1:
                _fail(f"model.{name} must be a positive integer, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            _fail(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.d_model % 2:
            _fail(f"d_model={self.d_model} must be even for sine-cos positional codes")
        if self.image_side % self.stem_stride:
            _fail(f"image_side={self.image_side} is not divisible by stem_stride={self.stem_stride}")
        if self.pooled and (self.image_side // self.stem_stride) % 2:
            _fail("feature map side before pooling must be even")
        if self.variant == "single-view":
            if self.feature_side % self.patch_side:
                _fail(f"feature side {self.feature_side} is not divisible by patch_side={self.patch_side}")
            if self.d_model % 4:
                _fail(f"d_model={self.d_model} must be divisible by 4 for 2D positional codes")
        if self.scheme != "factors" and self.grid_side % self.output_patch_side:
            _fail(f"grid_side={self.grid_side} is not divisible by output_patch_side={self.output_patch_side}")
        if self.query_init_std <= 0:
            _fail("query_init_std must be positive")
        if self.layer_norm_eps <= 0:
            _fail("layer_norm_eps must be positive")
        return self

    def to_json(self) -> str:
        """Canonical serialization: sorted keys, no whitespace"""
        return json.dumps(dataclasses.asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed model config: {exc}") from exc
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**raw).validate()


@dataclass(frozen=True)
class ViewPolicy:
    """How many views each training iteration sees: a constant count or uniform on [1, max)"""

    kind: str = "fixed"
    count: int = TRAIN_VIEWS

    def validate(self) -> "ViewPolicy":
        if self.kind not in VIEW_POLICIES:
            _fail(f"unknown view policy {self.kind!r}")
        if self.count < 1 or (self.kind == "uniform" and self.count < 2):
            _fail(f"view count {self.count} is invalid for the {self.kind} policy")
        return self


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = BATCH_SIZE
    total_steps: int = TOTAL_STEPS
    base_lr: float = BASE_LR
    warmup_steps: int = WARMUP_STEPS
    optimizer: str = "adagrad"
    adagrad_eps: float = ADAGRAD_EPS
    view_policy: str = "fixed"
    train_views: int = TRAIN_VIEWS
    seed: int = 0
    checkpoint_interval: int = CHECKPOINT_INTERVAL
    eval_interval: int = 0

    @property
    def views(self) -> ViewPolicy:
        return ViewPolicy(self.view_policy, self.train_views)

    def validate(self) -> "TrainConfig":
        if self.batch_size < 1:
            _fail(f"batch size must be >= 1, got {self.batch_size}")
        if self.total_steps < 0:
            _fail("total steps must be >= 0")
        if self.base_lr <= 0:
            _fail(f"base learning rate must be > 0, got {self.base_lr}")
        if self.warmup_steps < 0 or self.warmup_steps > max(self.total_steps, 0):
            _fail(f"warmup steps {self.warmup_steps} must lie in [0, total steps={self.total_steps}]")
        if self.optimizer not in OPTIMIZERS:
            _fail(f"unknown optimizer {self.optimizer!r}")
        if self.adagrad_eps < 0:
            _fail("adagrad epsilon must be >= 0")
        if self.checkpoint_interval < 0 or self.eval_interval < 0:
            _fail("intervals must be >= 0")
        self.views.validate()
        return self


@dataclass(frozen=True)
class EvalConfig:
    threshold: float = THRESHOLD
    fscore_distance: float = FSCORE_DISTANCE
    view_counts: Tuple[int, ...] = SWEEP_VIEW_COUNTS
    capture_attention: bool = False
    split: str = "test"

    def validate(self) -> "EvalConfig":
        if not 0.0 < self.threshold < 1.0:
            _fail(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.fscore_distance <= 0:
            _fail(f"F-score distance must be > 0, got {self.fscore_distance}")
        if not self.view_counts or any(v < 1 for v in self.view_counts):
            _fail(f"view counts must be positive, got {self.view_counts}")
        if self.split not in ("train", "test"):
            _fail(f"unknown split {self.split!r}")
        return self


@dataclass(frozen=True)
class DataConfig:
    object_count: int = 20
    archetypes: Tuple[str, ...] = ARCHETYPES
    grid_side: int = GRID_SIDE
    image_side: int = IMAGE_SIDE
    views_per_object: int = VIEWS_PER_OBJECT
    elevation_deg: float = VIEW_ELEVATION_DEG
    azimuth_offset_deg: float = 0.0
    render_mode: str = RENDER_MODE
    split_fraction: float = 0.8
    seed: int = 0

    def view_angles(self) -> Tuple[Tuple[float, float], ...]:
        """(azimuth, elevation) pairs evenly spaced around the vertical axis"""
        step = 360.0 / self.views_per_object
        return tuple(
            ((self.azimuth_offset_deg + i * step) % 360.0, self.elevation_deg)
            for i in range(self.views_per_object)
        )

    def archetype_counts(self) -> Dict[str, int]:
        counts = {name: 0 for name in self.archetypes}
        for i in range(self.object_count):
            counts[self.archetypes[i % len(self.archetypes)]] += 1
        return counts

    def validate(self) -> "DataConfig":
        if self.object_count < 1:
            _fail(f"object count must be >= 1, got {self.object_count}")
        unknown = set(self.archetypes) - set(ARCHETYPES)
        if not self.archetypes or unknown:
            _fail(f"unknown archetypes {sorted(unknown)}")
        if self.grid_side < 8:
            _fail(f"grid side must be >= 8, got {self.grid_side}")
        if self.image_side < 1 or self.views_per_object < 1:
            _fail("image side and views per object must be positive")
        if self.render_mode not in ("silhouette", "depth"):
            _fail(f"unknown render mode {self.render_mode!r}")
        if not 0.0 < self.split_fraction < 1.0:
            _fail(f"split fraction must lie in (0, 1), got {self.split_fraction}")
        return self


SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
    "data": DataConfig,
}

# run.seed is the single root seed; it is copied into the sections that carry one
SEEDED_SECTIONS = ("train", "data")


@dataclass
class RunSettings:
    seed: int = 0
    out: str = "runs"
    data: str = ""
    checkpoint: str = ""
    deterministic: bool = False
    threads: int = 1


def _coerce(raw, default, key: str):
    """Convert a raw config value to the type of the field default"""
    if not isinstance(raw, str):
        value = raw
    elif isinstance(default, bool):
        lowered = raw.strip().lower()
        if lowered not in ("true", "false", "1", "0", "yes", "no"):
            _fail(f"{key}: expected a boolean, got {raw!r}")
        value = lowered in ("true", "1", "yes")
    elif isinstance(default, int):
        try:
            value = int(raw)
        except ValueError:
            _fail(f"{key}: expected an integer, got {raw!r}")
    elif isinstance(default, float):
        try:
            value = float(raw)
        except ValueError:
            _fail(f"{key}: expected a number, got {raw!r}")
    elif isinstance(default, tuple):
        items = [item.strip() for item in raw.split(",") if item.strip()]
        if default and isinstance(default[0], int):
            try:
                value = tuple(int(item) for item in items)
            except ValueError:
                _fail(f"{key}: expected a comma-separated integer list, got {raw!r}")
        else:
            value = tuple(items)
    else:
        value = raw.strip()
    if isinstance(default, tuple) and isinstance(value, list):
        value = tuple(value)
    return value


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, str]:
    """Parse `section.key=value` lines; blank lines and `#` comments are skipped"""
    values: Dict[str, str] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            _fail(f"{source}:{number}: expected key=value, got {stripped!r}")
        key, value = stripped.split("=", 1)
        key = key.strip()
        if "." not in key:
            _fail(f"{source}:{number}: key {key!r} lacks a section prefix")
        values[key] = value.strip()
    return values


@dataclass
class RunConfig:
    """Effective configuration: defaults, then the config file, then flag overrides"""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    data: DataConfig = field(default_factory=DataConfig)
    run: RunSettings = field(default_factory=RunSettings)

    @classmethod
    def load(cls, path: Optional[str] = None, overrides: Optional[Dict[str, object]] = None) -> "RunConfig":
        merged: Dict[str, object] = {}
        if path:
            config_path = Path(path)
            try:
                text = config_path.read_text(encoding="utf-8")
            except OSError as exc:
                raise DataIOError(f"cannot read config file ({exc.strerror})", config_path) from exc
            merged.update(parse_config_text(text, str(config_path)))
        for key, value in (overrides or {}).items():
            if value is not None:
                merged[key] = value
        return cls.from_values(merged)

    @classmethod
    def from_values(cls, values: Dict[str, object]) -> "RunConfig":
        grouped: Dict[str, Dict[str, object]] = {name: {} for name in (*SECTIONS, "run")}
        for key, raw in values.items():
            section, _, name = key.partition(".")
            if section not in grouped:
                _fail(f"unknown config section in {key!r}")
            target = RunSettings if section == "run" else SECTIONS[section]
            defaults = {f.name: f.default for f in fields(target)}
            if name not in defaults or (section in SEEDED_SECTIONS and name == "seed"):
                _fail(f"unknown config key {key!r}")
            grouped[section][name] = _coerce(raw, defaults[name], key)
        run = RunSettings(**grouped["run"])
        built = {}
        for section, section_cls in SECTIONS.items():
            params = dict(grouped[section])
            if section in SEEDED_SECTIONS:
                params["seed"] = run.seed
            try:
                built[section] = section_cls(**params).validate()
            except TypeError as exc:
                raise ConfigError(f"invalid {section} config: {exc}") from exc
        return cls(run=run, **built)

    def with_model(self, **changes) -> "RunConfig":
        return replace(self, model=replace(self.model, **changes).validate())

    def items(self):
        for section in ("run", *SECTIONS):
            obj = getattr(self, section)
            for f in fields(obj):
                if section in SEEDED_SECTIONS and f.name == "seed":
                    continue
                value = getattr(obj, f.name)
                if isinstance(value, tuple):
                    value = ",".join(str(v) for v in value)
                elif isinstance(value, bool):
                    value = "true" if value else "false"
                yield f"{section}.{f.name}", str(value)

    def dump(self) -> str:
        return "".join(f"{key}={value}\n" for key, value in self.items())

    def write(self, out_dir) -> Path:
        target = Path(out_dir) / EFFECTIVE_CONFIG_NAME
        try:
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_text(self.dump(), encoding="utf-8")
        except OSError as exc:
            raise DataIOError(f"cannot write effective config ({exc.strerror})", target) from exc
        return target
