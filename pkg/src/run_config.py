"""
Run Configuration Layer

Handles:
- Reading flat `key = value` files (with `#` comments) via python-dotenv
- Standardizing raw strings into ints, floats, booleans and comma lists
- Desk-scale and full-scale default profiles
- Cross-module validation before any compute runs
"""

import hashlib
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

from dotenv import dotenv_values

from src.gaussian_scene import DecoderConfig, GridSpec
from src.hgfa import HgfaConfig
from src.objective_metrics import LossConfig
from src.token_provider import TokenConfig


class ConfigError(ValueError):
    """Raised for unknown keys, unparsable values and inconsistent settings."""


@dataclass(frozen=True)
class CameraConfig:
    """Synthetic surround rig: image size, field of view, mounting height."""
    image_h: int = 128
    image_w: int = 128
    fov_deg: float = 90.0
    height: float = 1.5


@dataclass(frozen=True)
class OptimConfig:
    """Adaptive-moment optimizer with linear warm-up and cosine decay."""
    peak_lr: float = 2e-2
    warmup_steps: int = 30
    total_steps: int = 300
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class SceneConfig:
    """Gaussian count, class set, lattice initialization and splatting knobs."""
    num_gaussians: int = 512
    num_classes: int = 4
    class_names: Tuple[str, ...] = ("ground", "vehicle", "building", "vegetation")
    init_scale_factor: float = 1.5
    init_opacity: float = 0.1
    init_jitter: float = 0.25
    cull_kappa: float = 3.0
    occ_threshold: float = 0.5


@dataclass(frozen=True)
class RunConfig:
    tokens: TokenConfig = field(default_factory=TokenConfig)
    camera: CameraConfig = field(default_factory=CameraConfig)
    hgfa: HgfaConfig = field(default_factory=HgfaConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    grid: GridSpec = field(default_factory=GridSpec)
    scene: SceneConfig = field(default_factory=SceneConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    seed: int = 0
    workers: int = 1
    log_every: int = 10
    profile: str = "desk"

    def fingerprint(self) -> str:
        """Hash of every setting that changes parameter shapes or the data."""
        shape_keys = {
            "tokens": asdict(self.tokens),
            "hgfa": {k: v for k, v in asdict(self.hgfa).items() if k != "dropout"},
            "decoder": {"blocks": self.decoder.blocks, "hidden": self.decoder.hidden},
            "grid": asdict(self.grid),
            "num_gaussians": self.scene.num_gaussians,
            "num_classes": self.scene.num_classes,
        }
        return hashlib.sha256(repr(sorted(shape_keys.items())).encode()).hexdigest()[:16]


# Flat key -> (section, field). Section None means a top-level RunConfig field.
CONFIG_KEYS: Dict[str, Tuple[Optional[str], str]] = {
    "profile": (None, "profile"),
    "seed": (None, "seed"),
    "workers": (None, "workers"),
    "log_every": (None, "log_every"),
    # tokens
    "views": ("tokens", "views"),
    "layers": ("tokens", "layers"),
    "patch_h": ("tokens", "patch_h"),
    "patch_w": ("tokens", "patch_w"),
    "token_dim": ("tokens", "channels"),
    "token_noise": ("tokens", "noise_std"),
    "layer_mix": ("tokens", "layer_mix"),
    "near": ("tokens", "near"),
    "far": ("tokens", "far"),
    # camera
    "image_h": ("camera", "image_h"),
    "image_w": ("camera", "image_w"),
    "fov_deg": ("camera", "fov_deg"),
    "camera_height": ("camera", "height"),
    # hgfa
    "groups": ("hgfa", "groups"),
    "layers_per_group": ("hgfa", "layers_per_group"),
    "expansion_ratios": ("hgfa", "expansion_ratios"),
    "pyramid_dims": ("hgfa", "pyramid_dims"),
    "scale_factors": ("hgfa", "scale_factors"),
    "target_dim": ("hgfa", "target_dim"),
    "se_reduction": ("hgfa", "se_reduction"),
    "dropout": ("hgfa", "dropout"),
    "use_gatf": ("hgfa", "use_gatf"),
    "use_tatr": ("hgfa", "use_tatr"),
    "use_lsfp": ("hgfa", "use_lsfp"),
    "use_hgfa": ("hgfa", "use_hgfa"),
    # decoder
    "decoder_blocks": ("decoder", "blocks"),
    "decoder_hidden": ("decoder", "hidden"),
    "max_offset": ("decoder", "max_offset"),
    "max_log_scale": ("decoder", "max_log_scale"),
    "scale_min_factor": ("decoder", "scale_min_factor"),
    # grid
    "grid_dims": ("grid", "dims"),
    "grid_origin": ("grid", "origin"),
    "voxel_size": ("grid", "voxel_size"),
    # scene
    "num_gaussians": ("scene", "num_gaussians"),
    "num_classes": ("scene", "num_classes"),
    "class_names": ("scene", "class_names"),
    "init_scale_factor": ("scene", "init_scale_factor"),
    "init_opacity": ("scene", "init_opacity"),
    "init_jitter": ("scene", "init_jitter"),
    "cull_kappa": ("scene", "cull_kappa"),
    "occ_threshold": ("scene", "occ_threshold"),
    # loss
    "ce_weight": ("loss", "ce_weight"),
    "lovasz_weight": ("loss", "lovasz_weight"),
    "class_weights": ("loss", "class_weights"),
    # optimizer
    "peak_lr": ("optim", "peak_lr"),
    "warmup_steps": ("optim", "warmup_steps"),
    "total_steps": ("optim", "total_steps"),
    "beta1": ("optim", "beta1"),
    "beta2": ("optim", "beta2"),
    "adam_eps": ("optim", "eps"),
}

# Full-scale constants: ViT-L tokens from six cameras, 200 x 200 x 16 grid.
FULL_PROFILE: Dict[str, Any] = {
    "views": 6,
    "layers": 24,
    "patch_h": 16,
    "patch_w": 44,
    "token_dim": 1024,
    "image_h": 224,
    "image_w": 616,
    "fov_deg": 70.0,
    "groups": 4,
    "layers_per_group": 6,
    "expansion_ratios": (4.0, 3.0, 2.0, 1.5),
    "pyramid_dims": (768, 512, 384, 256),
    "scale_factors": (4.0, 2.0, 1.0, 0.5),
    "target_dim": 128,
    "num_gaussians": 25600,
    "num_classes": 16,
    "class_names": (
        "barrier", "bicycle", "bus", "car", "construction_vehicle", "motorcycle",
        "pedestrian", "traffic_cone", "trailer", "truck", "driveable_surface",
        "other_flat", "sidewalk", "terrain", "manmade", "vegetation",
    ),
    "grid_dims": (200, 200, 16),
    "grid_origin": (-50.0, -50.0, -5.0),
    "voxel_size": 0.5,
    "decoder_blocks": 4,
    "decoder_hidden": 256,
    "peak_lr": 2e-4,
    "warmup_steps": 500,
    "total_steps": 20000,
}

PROFILES = {"desk": {}, "full": FULL_PROFILE}

SECTION_TYPES = {
    "tokens": TokenConfig,
    "camera": CameraConfig,
    "hgfa": HgfaConfig,
    "decoder": DecoderConfig,
    "grid": GridSpec,
    "scene": SceneConfig,
    "loss": LossConfig,
    "optim": OptimConfig,
}


class ConfigStandardizer:
    """Converts raw config strings into typed values."""

    TRUE_VALUES = {"1", "true", "yes", "on"}
    FALSE_VALUES = {"0", "false", "no", "off"}

    @staticmethod
    def standardize_bool(key: str, raw: str) -> bool:
        value = raw.strip().lower()
        if value in ConfigStandardizer.TRUE_VALUES:
            return True
        if value in ConfigStandardizer.FALSE_VALUES:
            return False
        raise ConfigError(f"{key}: expected a boolean, got '{raw}'")

    @staticmethod
    def standardize_int(key: str, raw: str) -> int:
        try:
            value = float(raw.strip())
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got '{raw}'")
        if not value.is_integer():
            raise ConfigError(f"{key}: expected an integer, got '{raw}'")
        return int(value)

    @staticmethod
    def standardize_float(key: str, raw: str) -> float:
        """Accepts plain numbers, exponents, and 'inf'."""
        try:
            value = float(raw.strip())
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got '{raw}'")
        if math.isnan(value):
            raise ConfigError(f"{key}: NaN is not allowed")
        return value

    @staticmethod
    def standardize_list(key: str, raw: str, item) -> tuple:
        parts = [p.strip() for p in raw.replace(";", ",").split(",") if p.strip()]
        if not parts:
            raise ConfigError(f"{key}: expected a comma-separated list, got '{raw}'")
        return tuple(item(key, p) for p in parts)

    @staticmethod
    def standardize_value(key: str, raw: Optional[str], default: Any) -> Any:
        """Convert raw to the type of the default value for key."""
        if raw is None:
            raise ConfigError(f"{key}: missing value")
        if isinstance(default, bool):
            return ConfigStandardizer.standardize_bool(key, raw)
        if isinstance(default, int):
            return ConfigStandardizer.standardize_int(key, raw)
        if isinstance(default, float):
            return ConfigStandardizer.standardize_float(key, raw)
        if isinstance(default, tuple):
            if default and isinstance(default[0], str):
                return ConfigStandardizer.standardize_list(key, raw, lambda _k, p: p)
            if default and isinstance(default[0], int) and not isinstance(default[0], bool):
                return ConfigStandardizer.standardize_list(key, raw, ConfigStandardizer.standardize_int)
            return ConfigStandardizer.standardize_list(key, raw, ConfigStandardizer.standardize_float)
        if default is None:
            # Optional float tuples (class weights).
            return ConfigStandardizer.standardize_list(key, raw, ConfigStandardizer.standardize_float)
        return raw.strip()


def config_values(cfg: RunConfig) -> Dict[str, Any]:
    """Flat key -> typed value view of cfg; inverse of building from flat keys."""
    values = {}
    for key, (section, name) in CONFIG_KEYS.items():
        holder = cfg if section is None else getattr(cfg, section)
        values[key] = getattr(holder, name)
    return values


def _defaults() -> Dict[str, Any]:
    return config_values(RunConfig())


def _build(values: Dict[str, Any]) -> RunConfig:
    sections: Dict[str, Dict[str, Any]] = {}
    top: Dict[str, Any] = {}
    for key, value in values.items():
        section, name = CONFIG_KEYS[key]
        if section is None:
            top[name] = value
        else:
            sections.setdefault(section, {})[name] = value
    built = {}
    for section, kwargs in sections.items():
        try:
            built[section] = SECTION_TYPES[section](**kwargs)
        except ValueError as e:
            raise ConfigError(f"[{section}] {e}") from e
    return RunConfig(**built, **top)


def validate_config(cfg: RunConfig) -> RunConfig:
    """
    Cross-module checks; each message names both keys involved.

    Raises:
        ConfigError: on the first inconsistency found
    """
    t, h, g, s, o = cfg.tokens, cfg.hgfa, cfg.grid, cfg.scene, cfg.optim

    if cfg.profile not in PROFILES:
        raise ConfigError(f"profile must be one of {sorted(PROFILES)}, got '{cfg.profile}'")
    if t.layers != h.groups * h.layers_per_group:
        raise ConfigError(
            f"layers must equal groups * layers_per_group: "
            f"{t.layers} != {h.groups} * {h.layers_per_group}")
    for level in range(h.groups):
        tau = h.scale_factors[level]
        if not float(tau * t.patch_h).is_integer() or not float(tau * t.patch_w).is_integer():
            raise ConfigError(
                f"scale_factors[{level}] = {tau} gives a non-integral level for "
                f"patch_h x patch_w = {t.patch_h} x {t.patch_w}")
    for level, ratio in enumerate(h.expansion_ratios):
        if int(math.floor(ratio * t.channels)) < 1:
            raise ConfigError(f"expansion_ratios[{level}] * token_dim must be at least 1")
    if h.se_reduction < 1 or t.channels // h.se_reduction < 1:
        raise ConfigError(f"se_reduction {h.se_reduction} leaves no SE bottleneck for token_dim {t.channels}")
    if any(d < 1 for d in h.pyramid_dims) or h.target_dim < 1:
        raise ConfigError("pyramid_dims and target_dim must be positive")
    if not 0.0 <= h.dropout < 1.0:
        raise ConfigError(f"dropout must lie in [0, 1), got {h.dropout}")
    if t.views < 1 or t.channels < 1 or t.patch_h < 1 or t.patch_w < 1:
        raise ConfigError("views, token_dim, patch_h and patch_w must be positive")
    if not 0.0 < t.near < t.far:
        raise ConfigError(f"near must lie in (0, far): near = {t.near}, far = {t.far}")
    if not 0.0 <= t.layer_mix <= 1.0:
        raise ConfigError(f"layer_mix must lie in [0, 1], got {t.layer_mix}")
    if cfg.camera.image_h < 1 or cfg.camera.image_w < 1 or not 0.0 < cfg.camera.fov_deg < 180.0:
        raise ConfigError("image_h, image_w must be positive and fov_deg in (0, 180)")
    if cfg.camera.image_h % t.patch_h or cfg.camera.image_w % t.patch_w:
        raise ConfigError(
            f"image_h x image_w = {cfg.camera.image_h} x {cfg.camera.image_w} is not divisible "
            f"by patch_h x patch_w = {t.patch_h} x {t.patch_w}")

    if len(g.dims) != 3 or any(d < 1 for d in g.dims) or len(g.origin) != 3:
        raise ConfigError(f"grid_dims and grid_origin need three entries, got {g.dims} and {g.origin}")
    if g.voxel_size <= 0:
        raise ConfigError(f"voxel_size must be positive, got {g.voxel_size}")
    if s.num_gaussians < 1:
        raise ConfigError(f"num_gaussians must be positive, got {s.num_gaussians}")
    if s.num_classes < 1 or s.num_classes > 254:
        raise ConfigError(f"num_classes must lie in [1, 254], got {s.num_classes}")
    if len(s.class_names) != s.num_classes:
        raise ConfigError(
            f"class_names has {len(s.class_names)} entries but num_classes = {s.num_classes}")
    if not 0.0 < s.init_opacity < 1.0:
        raise ConfigError(f"init_opacity must lie in (0, 1), got {s.init_opacity}")
    if s.cull_kappa <= 0:
        raise ConfigError(f"cull_kappa must be positive (inf disables culling), got {s.cull_kappa}")
    if not 0.0 < s.occ_threshold < 1.0:
        raise ConfigError(f"occ_threshold must lie in (0, 1), got {s.occ_threshold}")
    if cfg.loss.class_weights is not None and len(cfg.loss.class_weights) != s.num_classes + 1:
        raise ConfigError(
            f"class_weights needs num_classes + 1 = {s.num_classes + 1} entries, "
            f"got {len(cfg.loss.class_weights)}")
    if cfg.decoder.scale_min_factor <= 0 or s.init_scale_factor < cfg.decoder.scale_min_factor:
        raise ConfigError("init_scale_factor must be at least scale_min_factor (both positive)")

    if o.peak_lr <= 0 or o.total_steps < 1:
        raise ConfigError("peak_lr and total_steps must be positive")
    if not 0 <= o.warmup_steps <= o.total_steps:
        raise ConfigError(
            f"warmup_steps must lie in [0, total_steps]: {o.warmup_steps} vs {o.total_steps}")
    if not (0.0 <= o.beta1 < 1.0 and 0.0 <= o.beta2 < 1.0) or o.eps <= 0:
        raise ConfigError("beta1, beta2 must lie in [0, 1) and adam_eps must be positive")
    if cfg.workers < 1 or cfg.log_every < 1:
        raise ConfigError("workers and log_every must be positive")
    return cfg


def config_from_values(overrides: Dict[str, Any]) -> RunConfig:
    """Build and validate a RunConfig from typed flat-key overrides."""
    unknown = sorted(set(overrides) - set(CONFIG_KEYS))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    profile = overrides.get("profile", "desk")
    if profile not in PROFILES:
        raise ConfigError(f"profile must be one of {sorted(PROFILES)}, got '{profile}'")
    values = _defaults()
    values.update(PROFILES[profile])
    values.update(overrides)
    return validate_config(_build(values))


def derive_config(cfg: RunConfig, overrides: Dict[str, Any]) -> RunConfig:
    """
    A validated copy of cfg with some flat keys replaced.

    Raises:
        ConfigError: unknown key or an inconsistent result
    """
    unknown = sorted(set(overrides) - set(CONFIG_KEYS))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    values = config_values(cfg)
    values.update(overrides)
    return validate_config(_build(values))


def parse_config(path=None, seed: Optional[int] = None) -> RunConfig:
    """
    Read a flat `key = value` file; missing keys take profile defaults.
    The VG3S_WORKERS environment variable, when set, overrides `workers`.

    Args:
        path: Config file path, or None for all defaults
        seed: Command-line seed; overrides the file's seed

    Returns:
        Validated RunConfig

    Raises:
        FileNotFoundError: path does not exist
        ConfigError: unknown key, bad value or cross-module inconsistency
    """
    raw: Dict[str, Optional[str]] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"Config file not found: {path}")
        raw = dict(dotenv_values(path))

    unknown = sorted(set(raw) - set(CONFIG_KEYS))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")

    profile = (raw.get("profile") or "desk").strip()
    if profile not in PROFILES:
        raise ConfigError(f"profile must be one of {sorted(PROFILES)}, got '{profile}'")
    defaults = _defaults()
    defaults.update(PROFILES[profile])

    typed: Dict[str, Any] = {"profile": profile}
    for key, value in raw.items():
        if key == "profile":
            continue
        typed[key] = ConfigStandardizer.standardize_value(key, value, defaults[key])
    workers = os.getenv("VG3S_WORKERS")
    if workers:
        typed["workers"] = ConfigStandardizer.standardize_value("workers", workers, defaults["workers"])
    if seed is not None:
        typed["seed"] = seed
    return config_from_values(typed)
