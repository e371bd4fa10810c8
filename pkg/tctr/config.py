#!/usr/bin/env python3
"""
config.py
--------------------------------
Run configuration: every knob of every module with its default and a
one-line description.

Config files hold `key = value` lines (`#` starts a comment). Values are
parsed with yaml.safe_load, so `[0.5, 1.0]`, `true`, `1e-3` and bare
words all come out typed. A `.yaml`/`.yml` file with nested mappings is
accepted too and flattened to dotted keys.

Example:

    seed = 7
    model.frames = 3
    grid.x_range = [-3.2, 3.2]

Unknown keys are rejected. Typed views (`grid()`, `tctr()`, ...) build the
per-module dataclasses and validate them.
"""
from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Tuple, Union

import yaml

from .backbone import BackboneConfig
from .errors import ConfigError
from .head import HeadConfig
from .pillars import AugmentConfig, GridConfig
from .refine import FUSION_MODES, RefineConfig
from .synthlidar import SceneConfig
from .transformer import TctrConfig

TEMPORAL_MODES = ("tctr", "concat", "none")
ABLATION_AXES = ("framework", "encoder", "fusion", "frames")

# key -> (default, description)
DEFAULTS: Dict[str, Tuple[Any, str]] = {
    "seed": (0, "Master seed for initialization, data order, voxel subsampling and augmentation"),

    "grid.x_range": ([-6.4, 6.4], "BEV x extent in meters"),
    "grid.y_range": ([-6.4, 6.4], "BEV y extent in meters"),
    "grid.z_range": ([-5.0, 3.0], "Kept z interval in meters"),
    "grid.pillar_size": ([0.2, 0.2], "Pillar footprint (dx, dy) in meters"),
    "grid.max_points_per_pillar": (20, "Points kept per pillar; overflow is subsampled"),
    "grid.max_pillars": (4096, "Occupied pillars kept per frame"),

    "pfn.channels": (32, "Pseudo-image channels C0"),

    "backbone.stem_channels": (32, "Width of the two stem convolutions"),
    "backbone.block_channels": ([32, 64, 64, 64], "Output width of each residual block"),
    "backbone.pool_after": ([True, True, True, False], "Max-pool after each residual block"),
    "backbone.out_channels": (64, "Backbone output channels C1"),

    "tctr.T": (1, "Context radius; window N = 2T+1 unless model.frames is set"),
    "tctr.C2": (16, "Encoder channel-transform width"),
    "tctr.C3": (32, "Decoder voxel feature width (divisible by 4)"),
    "tctr.encoder_blocks": (2, "Encoder blocks M"),
    "tctr.decoder_blocks": (2, "Decoder blocks"),
    "tctr.heads": (4, "Attention heads"),
    "tctr.d_k": (16, "Per-head query/key/value width"),
    "tctr.ffn_hidden": (128, "Hidden width of feed-forward sublayers"),
    "tctr.variant": ("tc_encoder", "Encoder variant: tc_encoder, t_encoder or c_encoder"),
    "tctr.positional_encoding": (True, "Add sinusoidal positions to encoder tokens"),

    "model.frames": (None, "Window length N (odd); overrides tctr.T when set"),
    "model.temporal": ("tctr", "Temporal module: tctr, concat or none"),
    "model.fusion": ("gate", "How g enters the target features: gate, concat, add, x_only or g_only"),

    "refine.stages": (2, "Up-sampling refinement stages (each doubles the extents)"),
    "refine.channels": (32, "Width of the refinement convolutions"),
    "refine.gated": (True, "Gate each refinement stage with the up-sampled g"),

    "head.classes": (["car", "pedestrian"], "Class names, indexed by class id"),
    "head.anchor_yaws": ([0.0, 1.5707963267948966], "Anchor yaws per class"),
    "head.anchor_stats": (None, "Per-class anchor [l, w, h, z]; default is the training-set mean"),
    "head.pos_iou": (0.6, "BEV IoU at or above which an anchor is positive"),
    "head.neg_iou": (0.45, "BEV IoU below which an anchor is negative"),
    "head.gamma": (2.0, "Focal loss exponent"),
    "head.beta_cls": (1.0, "Classification loss weight"),
    "head.beta_loc": (0.25, "Localization loss weight"),
    "head.beta_dir": (0.2, "Direction loss weight"),
    "head.score_threshold": (0.1, "Minimum detection score"),
    "head.nms_iou": (0.5, "NMS IoU threshold"),
    "head.max_detections": (100, "Detections kept per frame"),
    "head.prior": (0.01, "Foreground prior used to initialize the class bias"),

    "augment.enabled": (True, "Apply sequence-level augmentation during training"),
    "augment.flip_x": (True, "Randomly negate x"),
    "augment.flip_y": (True, "Randomly negate y"),
    "augment.rotation": ([-0.3925, 0.3925], "Rotation range about z in radians"),
    "augment.scale": ([0.95, 1.05], "Global scale range"),

    "train.steps": (300, "Optimizer steps"),
    "train.lr": (0.001, "Peak learning rate"),
    "train.batch_size": (2, "Sequences per step"),
    "train.warmup_fraction": (0.3, "Share of steps spent warming up to the peak"),
    "train.initial_div": (10.0, "Start learning rate is lr / initial_div"),
    "train.final_div": (100.0, "Final learning rate is lr / final_div"),
    "train.log_every": (10, "Progress log interval in steps"),

    "scene.objects": ([1, 3], "Object count range per sequence"),
    "scene.class_probs": ([0.6, 0.4], "Class sampling probabilities"),
    "scene.size_jitter": (0.1, "Relative size jitter around class templates"),
    "scene.speed": ([0.0, 0.3], "Speed range in meters per frame"),
    "scene.yaw_rate": (0.05, "Maximum yaw rate in radians per frame"),
    "scene.point_density": (40.0, "Points per square meter of visible surface at the reference range"),
    "scene.reference_range": (5.0, "Range at which point_density applies"),
    "scene.clutter_points": (30, "Uniform ground clutter points per frame"),
    "scene.occlusion_dropout": (0.0, "Probability an object is missing from a context frame"),
    "scene.frames": (7, "Frames per generated sequence"),
    "scene.noise_sigma": (0.02, "Point noise standard deviation in meters"),
    "scene.ground_z": (-1.8, "Ground plane height"),
    "scene.margin": (0.3, "Clearance between boxes and the world boundary"),

    "data.train": ("train.lseq", "Training dataset path (relative paths resolve against --out)"),
    "data.eval": ("eval.lseq", "Evaluation dataset path"),
    "data.train_sequences": (8, "Sequences written by gen for training"),
    "data.eval_sequences": (8, "Sequences written by gen for evaluation"),
    "data.eval_seed": (1000, "Generator seed of the evaluation split"),
    "data.checkpoint": ("model.tckp", "Checkpoint path"),

    "eval.thresholds": ([0.5, 1.0], "Center-distance match thresholds in meters"),

    "gradcheck.h": (1e-5, "Central finite-difference step"),
    "gradcheck.tolerance": (1e-4, "Maximum allowed relative error"),
    "gradcheck.samples_per_param": (6, "Coordinates checked per parameter tensor (0 = all)"),

    "ablate.axis": ("framework", "Ablation axis: framework, encoder, fusion or frames"),
    "ablate.seeds": ([0, 1, 2], "Seeds averaged per variant"),
    "ablate.frames": ([1, 3, 5], "Window lengths for the frames axis"),

    "render.width": (512, "Raster width in pixels"),
    "render.height": (512, "Raster height in pixels"),
    "render.sequence": (0, "Index of the sequence to render"),
}


def parse_value(text: str) -> Any:
    try:
        return yaml.safe_load(text) if text.strip() else None
    except yaml.YAMLError as exc:
        raise ConfigError(f"Cannot parse value '{text}': {exc}") from None


def render_value(value: Any) -> str:
    text = yaml.safe_dump(value, default_flow_style=True, width=10_000)
    if text.endswith("...\n"):
        text = text[:-4]
    return text.strip()


def flatten(mapping: Mapping[str, Any], prefix: str = "") -> Dict[str, Any]:
    out: Dict[str, Any] = {}
    for key, value in mapping.items():
        full = f"{prefix}{key}"
        if isinstance(value, Mapping):
            out.update(flatten(value, full + "."))
        else:
            out[full] = value
    return out


def read_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    text = path.read_text()
    if path.suffix in (".yaml", ".yml"):
        data = yaml.safe_load(text) or {}
        if not isinstance(data, Mapping):
            raise ConfigError(f"{path}: top level must be a mapping")
        return flatten(data)
    values: Dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got '{raw.strip()}'")
        key, value = line.split("=", 1)
        values[key.strip()] = parse_value(value)
    return values


def parse_override(item: str) -> Tuple[str, Any]:
    if "=" not in item:
        raise ConfigError(f"--set expects key=value, got '{item}'")
    key, value = item.split("=", 1)
    return key.strip(), parse_value(value)


def _pair(value: Any, key: str) -> Tuple[float, float]:
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise ConfigError(f"{key} must be a two-element list, got {value!r}")
    return (float(value[0]), float(value[1]))


class RunConfig:
    """Resolved configuration: defaults, then file values, then overrides."""

    def __init__(self, values: Optional[Mapping[str, Any]] = None):
        self._values: Dict[str, Any] = {k: v for k, (v, _) in DEFAULTS.items()}
        if values:
            self.update(values)

    @classmethod
    def load(cls, path: Optional[Union[str, Path]] = None, overrides: Iterable[str] = (),
             seed: Optional[int] = None) -> "RunConfig":
        cfg = cls(read_config_file(path) if path else None)
        cfg.update(dict(parse_override(o) for o in overrides))
        if seed is not None:
            cfg.update({"seed": int(seed)})
        return cfg

    def update(self, values: Mapping[str, Any]) -> None:
        unknown = sorted(k for k in values if k not in DEFAULTS)
        if unknown:
            raise ConfigError(f"Unknown config key(s): {', '.join(unknown)}")
        self._values.update({k: list(v) if isinstance(v, tuple) else v for k, v in values.items()})

    def with_overrides(self, values: Mapping[str, Any]) -> "RunConfig":
        out = RunConfig(self._values)
        out.update(values)
        return out

    def __getitem__(self, key: str) -> Any:
        if key not in DEFAULTS:
            raise ConfigError(f"Unknown config key: {key}")
        return self._values[key]

    def get_int(self, key: str) -> int:
        try:
            return int(self[key])
        except (TypeError, ValueError):
            raise ConfigError(f"{key} must be an integer, got {self[key]!r}") from None

    def get_float(self, key: str) -> float:
        try:
            return float(self[key])
        except (TypeError, ValueError):
            raise ConfigError(f"{key} must be a number, got {self[key]!r}") from None

    @property
    def seed(self) -> int:
        return self.get_int("seed")

    def echo(self) -> List[str]:
        """Resolved `key = value` lines, sorted; the text reloads as a config file."""
        return [f"{k} = {render_value(self._values[k])}" for k in sorted(self._values)]

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(self.echo()) + "\n")
        return path

    def config_hash(self) -> str:
        return hashlib.sha256("\n".join(self.echo()).encode("utf-8")).hexdigest()

    # -------------------- Typed views --------------------

    def frames(self) -> int:
        n = self["model.frames"]
        n = 2 * self.get_int("tctr.T") + 1 if n is None else int(n)
        if n < 1 or n % 2 == 0:
            raise ConfigError(f"model.frames must be odd and positive, got {n}")
        return n

    def temporal(self) -> str:
        mode = self["model.temporal"]
        if mode not in TEMPORAL_MODES:
            raise ConfigError(f"Unknown model.temporal '{mode}' (expected one of {', '.join(TEMPORAL_MODES)})")
        return mode

    def fusion(self) -> str:
        mode = self["model.fusion"]
        if mode not in FUSION_MODES:
            raise ConfigError(f"Unknown model.fusion '{mode}' (expected one of {', '.join(FUSION_MODES)})")
        return mode

    def grid(self) -> GridConfig:
        return GridConfig(
            x_range=_pair(self["grid.x_range"], "grid.x_range"),
            y_range=_pair(self["grid.y_range"], "grid.y_range"),
            z_range=_pair(self["grid.z_range"], "grid.z_range"),
            pillar_size=_pair(self["grid.pillar_size"], "grid.pillar_size"),
            max_points_per_pillar=self.get_int("grid.max_points_per_pillar"),
            max_pillars=self.get_int("grid.max_pillars"),
        ).validate()

    def backbone(self) -> BackboneConfig:
        blocks = tuple(int(c) for c in self["backbone.block_channels"])
        pools = tuple(bool(p) for p in self["backbone.pool_after"])
        grid = self.grid()
        return BackboneConfig(
            in_channels=self.get_int("pfn.channels"),
            stem_channels=self.get_int("backbone.stem_channels"),
            block_channels=blocks,
            pool_after=pools,
            out_channels=self.get_int("backbone.out_channels"),
        ).validate(grid.H0, grid.W0)

    def tctr(self) -> TctrConfig:
        return TctrConfig(
            T=self.frames() // 2,
            C2=self.get_int("tctr.C2"),
            C3=self.get_int("tctr.C3"),
            encoder_blocks=self.get_int("tctr.encoder_blocks"),
            decoder_blocks=self.get_int("tctr.decoder_blocks"),
            heads=self.get_int("tctr.heads"),
            d_k=self.get_int("tctr.d_k"),
            ffn_hidden=self.get_int("tctr.ffn_hidden"),
            variant=str(self["tctr.variant"]),
            positional_encoding=bool(self["tctr.positional_encoding"]),
        ).validate()

    def refine(self) -> RefineConfig:
        return RefineConfig(
            stages=self.get_int("refine.stages"),
            channels=self.get_int("refine.channels"),
            gated=bool(self["refine.gated"]),
        ).validate()

    def head(self) -> HeadConfig:
        cfg = HeadConfig(
            classes=tuple(str(c) for c in self["head.classes"]),
            anchor_yaws=tuple(float(y) for y in self["head.anchor_yaws"]),
            pos_iou=self.get_float("head.pos_iou"),
            neg_iou=self.get_float("head.neg_iou"),
            gamma=self.get_float("head.gamma"),
            beta_cls=self.get_float("head.beta_cls"),
            beta_loc=self.get_float("head.beta_loc"),
            beta_dir=self.get_float("head.beta_dir"),
            score_threshold=self.get_float("head.score_threshold"),
            nms_iou=self.get_float("head.nms_iou"),
            max_detections=self.get_int("head.max_detections"),
            prior=self.get_float("head.prior"),
        )
        if not 0.0 < cfg.prior < 1.0:
            raise ConfigError(f"head.prior must lie in (0, 1), got {cfg.prior}")
        if cfg.neg_iou > cfg.pos_iou:
            raise ConfigError("head.neg_iou cannot exceed head.pos_iou")
        return cfg

    def augment(self) -> AugmentConfig:
        return AugmentConfig(
            enabled=bool(self["augment.enabled"]),
            flip_x=bool(self["augment.flip_x"]),
            flip_y=bool(self["augment.flip_y"]),
            rotation=_pair(self["augment.rotation"], "augment.rotation"),
            scale=_pair(self["augment.scale"], "augment.scale"),
        )

    def scene(self) -> SceneConfig:
        grid = self.grid()
        objects = self["scene.objects"]
        return SceneConfig(
            x_range=grid.x_range,
            y_range=grid.y_range,
            ground_z=self.get_float("scene.ground_z"),
            objects=(int(objects[0]), int(objects[1])),
            class_probs=tuple(float(p) for p in self["scene.class_probs"]),
            size_jitter=self.get_float("scene.size_jitter"),
            speed=_pair(self["scene.speed"], "scene.speed"),
            yaw_rate=self.get_float("scene.yaw_rate"),
            point_density=self.get_float("scene.point_density"),
            reference_range=self.get_float("scene.reference_range"),
            clutter_points=self.get_int("scene.clutter_points"),
            occlusion_dropout=self.get_float("scene.occlusion_dropout"),
            frames=self.get_int("scene.frames"),
            noise_sigma=self.get_float("scene.noise_sigma"),
            margin=self.get_float("scene.margin"),
            seed=self.seed,
        ).validate()

    def eval_thresholds(self) -> Tuple[float, ...]:
        return tuple(float(t) for t in self["eval.thresholds"])

    def ablation_axis(self) -> str:
        axis = self["ablate.axis"]
        if axis not in ABLATION_AXES:
            raise ConfigError(f"Unknown ablation axis '{axis}' (expected one of {', '.join(ABLATION_AXES)})")
        return axis


def describe_defaults() -> List[str]:
    """One `key = default  # description` line per key, for `--help`-style listings."""
    return [f"{k} = {render_value(v)}  # {doc}" for k, (v, doc) in DEFAULTS.items()]
