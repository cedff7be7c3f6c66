"""
Token Provider for the Frozen Vision Foundation Model Stand-In

Handles:
- TokenStack: per-view, per-layer patch tokens (S x N x L x D^V)
- CameraRig: pinhole intrinsics and world-to-camera poses per view
- Synthetic token generation from a scene (deterministic, desk scale)
- Bit-exact binary token files (VG3STOK1)
"""

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Tuple

import numpy as np

if TYPE_CHECKING:
    from src.synthetic_scene import SyntheticScene

TOKEN_MAGIC = b"VG3STOK1"
_HEADER = struct.Struct("<8s7I")
_DTYPE_TAGS = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
MAX_TOKEN_VALUES = 1 << 31


class TokenFileError(ValueError):
    """Raised when a token file cannot be decoded."""


@dataclass(frozen=True)
class TokenConfig:
    """Shape and signal settings for synthetic tokens."""
    views: int = 2
    layers: int = 8
    patch_h: int = 8
    patch_w: int = 8
    channels: int = 32
    noise_std: float = 0.05
    layer_mix: float = 0.3
    near: float = 0.1
    far: float = 60.0

    @property
    def tokens_per_view(self) -> int:
        return self.patch_h * self.patch_w


@dataclass
class TokenStack:
    """Layerwise visual tokens, data of shape (views, layers, tokens, channels)."""
    data: np.ndarray
    patch_grid: Tuple[int, int]

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ValueError(f"token data must be 4-D (S, N, L, D), got shape {self.data.shape}")
        h, w = self.patch_grid
        if self.data.shape[2] != h * w:
            raise ValueError(f"tokens per view {self.data.shape[2]} != patch grid {h}x{w}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("token stack contains non-finite values")

    @property
    def views(self) -> int:
        return self.data.shape[0]

    @property
    def layers(self) -> int:
        return self.data.shape[1]

    @property
    def tokens_per_view(self) -> int:
        return self.data.shape[2]

    @property
    def channels(self) -> int:
        return self.data.shape[3]


@dataclass
class CameraRig:
    """
    Per-view pinhole cameras.

    intrinsics: (S, 4) rows of (fx, fy, cx, cy) in pixels
    rotations: (S, 3, 3) world-to-camera rotations
    translations: (S, 3) world-to-camera translations
    image_size: (H, W) in pixels, shared by all views

    Camera axes: x right, y down, z forward.
    """
    intrinsics: np.ndarray
    rotations: np.ndarray
    translations: np.ndarray
    image_size: Tuple[int, int]

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64)
        self.rotations = np.asarray(self.rotations, dtype=np.float64)
        self.translations = np.asarray(self.translations, dtype=np.float64)
        views = self.intrinsics.shape[0]
        if self.rotations.shape != (views, 3, 3) or self.translations.shape != (views, 3):
            raise ValueError(f"rig arrays disagree on view count {views}")
        if np.any(self.intrinsics[:, :2] <= 0):
            raise ValueError("focal lengths fx, fy must be positive")
        for view, rotation in enumerate(self.rotations):
            if not np.allclose(rotation @ rotation.T, np.eye(3), atol=1e-9) \
                    or abs(np.linalg.det(rotation) - 1.0) > 1e-9:
                raise ValueError(f"view {view} rotation is not a proper rotation")

    @property
    def views(self) -> int:
        return self.intrinsics.shape[0]

    @staticmethod
    def surround(views: int, center, height: float, image_size=(128, 128),
                 fov_deg: float = 90.0) -> "CameraRig":
        """
        Ring of outward-looking cameras at one point, yaw spread evenly.

        Args:
            views: Number of cameras
            center: (x, y) world position of the rig
            height: Camera height above z = 0
            image_size: (H, W) in pixels
            fov_deg: Horizontal field of view

        Returns:
            CameraRig
        """
        img_h, img_w = image_size
        focal = 0.5 * img_w / np.tan(np.radians(fov_deg) / 2.0)
        position = np.array([center[0], center[1], height], dtype=np.float64)
        intrinsics, rotations, translations = [], [], []
        for view in range(views):
            yaw = 2.0 * np.pi * view / views
            forward = np.array([np.cos(yaw), np.sin(yaw), 0.0])
            right = np.cross(forward, [0.0, 0.0, 1.0])
            down = np.array([0.0, 0.0, -1.0])
            rotation = np.stack([right, down, forward])
            intrinsics.append([focal, focal, img_w / 2.0, img_h / 2.0])
            rotations.append(rotation)
            translations.append(-rotation @ position)
        return CameraRig(np.array(intrinsics), np.array(rotations), np.array(translations),
                         (img_h, img_w))


def project_points(rig: CameraRig, view: int, points: np.ndarray, near: float = 0.1):
    """
    Pinhole projection of world points into one view.

    Returns:
        (pixels (P, 2) as (u, v), depth (P,), visible (P,) bool). A point is
        visible when it lies beyond the near plane and inside the image.
    """
    fx, fy, cx, cy = rig.intrinsics[view]
    cam = points @ rig.rotations[view].T + rig.translations[view]
    depth = cam[:, 2]
    safe = np.where(depth > near, depth, 1.0)
    pixels = np.stack([fx * cam[:, 0] / safe + cx, fy * cam[:, 1] / safe + cy], axis=1)
    img_h, img_w = rig.image_size
    visible = (depth > near) & (pixels[:, 0] >= 0) & (pixels[:, 0] < img_w) \
        & (pixels[:, 1] >= 0) & (pixels[:, 1] < img_h)
    return pixels, depth, visible


def encode_patches(scene: "SyntheticScene", rig: CameraRig, cfg: TokenConfig):
    """
    Per-patch geometry summary of a scene.

    For every view and patch cell, the occupied voxel centres projecting
    into that cell give a mean depth and a majority class (ties go to the
    lowest class index). Cells that see nothing get the far-plane depth and
    the empty label.

    Returns:
        (depth (S, L), label (S, L))
    """
    img_h, img_w = rig.image_size
    if img_h % cfg.patch_h or img_w % cfg.patch_w:
        raise ValueError(f"image {img_h}x{img_w} is not divisible into a "
                         f"{cfg.patch_h}x{cfg.patch_w} patch grid")
    if rig.views != cfg.views:
        raise ValueError(f"rig has {rig.views} views, token config expects {cfg.views}")

    grid = scene.rasterize()
    empty = grid.num_classes
    flat_labels = grid.labels.reshape(-1)
    occupied = np.flatnonzero(flat_labels != empty)
    centers = grid.spec.voxel_centers()[occupied]
    classes = flat_labels[occupied]

    cells = cfg.tokens_per_view
    depth_out = np.full((cfg.views, cells), cfg.far)
    label_out = np.full((cfg.views, cells), empty, dtype=np.int64)
    for view in range(cfg.views):
        pixels, depth, visible = project_points(rig, view, centers, cfg.near)
        visible &= depth < cfg.far
        if not np.any(visible):
            continue
        rows = (pixels[visible, 1] // (img_h // cfg.patch_h)).astype(np.int64)
        cols = (pixels[visible, 0] // (img_w // cfg.patch_w)).astype(np.int64)
        cell = rows * cfg.patch_w + cols
        counts = np.bincount(cell, minlength=cells)
        depth_sum = np.bincount(cell, weights=depth[visible], minlength=cells)
        votes = np.bincount(cell * (empty + 1) + classes[visible],
                            minlength=cells * (empty + 1)).reshape(cells, empty + 1)
        seen = counts > 0
        depth_out[view, seen] = depth_sum[seen] / counts[seen]
        label_out[view, seen] = np.argmax(votes[seen], axis=1)
    return depth_out, label_out


def generate_synthetic_tokens(scene: "SyntheticScene", rig: CameraRig, cfg: TokenConfig,
                              seed: int) -> TokenStack:
    """
    Deterministic stand-in for frozen VFM tokens.

    Each patch encoding (normalized depth, one-hot class including empty,
    normalized row and column, constant 1) is embedded by a per-layer
    projection. Layer projections mix a shared matrix with a layer-specific
    one, so layers carry correlated but distinct signal; seeded Gaussian
    noise is added last.

    Args:
        scene: Synthetic scene providing geometry
        rig: Camera rig with cfg.views views
        cfg: Token configuration
        seed: PRNG seed

    Returns:
        TokenStack of shape (S, N, L, D^V)
    """
    depth, label = encode_patches(scene, rig, cfg)
    classes = scene.num_classes + 1
    cells = cfg.tokens_per_view
    rows, cols = np.divmod(np.arange(cells), cfg.patch_w)

    features = np.zeros((cfg.views, cells, classes + 4))
    features[:, :, 0] = depth / cfg.far
    features[:, :, 1:classes + 1] = np.eye(classes)[label]
    features[:, :, classes + 1] = (rows + 0.5) / cfg.patch_h
    features[:, :, classes + 2] = (cols + 0.5) / cfg.patch_w
    features[:, :, classes + 3] = 1.0

    rng = np.random.default_rng(seed)
    width = features.shape[-1]
    shared = rng.standard_normal((width, cfg.channels)) / np.sqrt(width)
    own = rng.standard_normal((cfg.layers, width, cfg.channels)) / np.sqrt(width)
    mix = float(np.clip(cfg.layer_mix, 0.0, 1.0))
    projections = np.sqrt(1.0 - mix) * shared[None] + np.sqrt(mix) * own

    tokens = np.einsum("sle,nec->snlc", features, projections)
    tokens = tokens + cfg.noise_std * rng.standard_normal(tokens.shape)
    return TokenStack(tokens, (cfg.patch_h, cfg.patch_w))


def write_token_file(stack: TokenStack, path) -> None:
    """Write a token stack as VG3STOK1 (little-endian header, row-major payload)."""
    dtype = stack.data.dtype
    if dtype == np.float32:
        tag = 1
    elif dtype == np.float64:
        tag = 2
    else:
        raise TokenFileError(f"unsupported token dtype {dtype}")
    views, layers, tokens, channels = stack.data.shape
    h, w = stack.patch_grid
    header = _HEADER.pack(TOKEN_MAGIC, views, layers, tokens, channels, h, w, tag)
    payload = np.ascontiguousarray(stack.data, dtype=_DTYPE_TAGS[tag]).tobytes()
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)


def read_token_file(path) -> TokenStack:
    """
    Read a VG3STOK1 file.

    Raises:
        FileNotFoundError: If the path does not exist
        TokenFileError: On magic/version mismatch, bad dimensions, unknown
            dtype tag, or a payload of the wrong length
    """
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise TokenFileError(f"truncated header: expected {_HEADER.size} bytes, got {len(raw)}")
    magic, views, layers, tokens, channels, h, w, tag = _HEADER.unpack_from(raw)
    if magic[:7] != TOKEN_MAGIC[:7]:
        raise TokenFileError(f"magic mismatch: expected {TOKEN_MAGIC!r}, got {magic!r}")
    if magic != TOKEN_MAGIC:
        raise TokenFileError(f"version mismatch: expected {TOKEN_MAGIC!r}, got {magic!r}")
    if tag not in _DTYPE_TAGS:
        raise TokenFileError(f"unknown dtype tag {tag}")
    if tokens != h * w:
        raise TokenFileError(f"header tokens {tokens} != patch grid {h}x{w}")
    count = views * layers * tokens * channels
    if count == 0 or count > MAX_TOKEN_VALUES:
        raise TokenFileError(f"dimension overflow: {views}x{layers}x{tokens}x{channels}")

    dtype = _DTYPE_TAGS[tag]
    expected = count * dtype.itemsize
    actual = len(raw) - _HEADER.size
    if actual < expected:
        raise TokenFileError(f"truncated payload: expected {expected} bytes, got {actual}")
    if actual > expected:
        raise TokenFileError(f"trailing data: expected {expected} payload bytes, got {actual}")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=_HEADER.size)
    return TokenStack(data.reshape(views, layers, tokens, channels).astype(dtype.newbyteorder("=")),
                      (h, w))
