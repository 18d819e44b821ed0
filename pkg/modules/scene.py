
"""
Gaussian-splat scenes, orbit cameras, pose sampling and procedural scenes.

Scenes and cameras are immutable value objects holding plain Python floats
(float64), so converting to tensors and back is exact.
"""
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from modules.errors import ConfigError, SchemaError

SCENE_FORMAT_VERSION = 1
CAMERA_DIM = 16

DEFAULT_PALETTE = (
    (0.85, 0.20, 0.20),
    (0.20, 0.65, 0.25),
    (0.20, 0.35, 0.85),
    (0.90, 0.80, 0.25),
)


def _vec(values, n: int, name: str) -> tuple:
    values = tuple(float(v) for v in values)
    if len(values) != n:
        raise ConfigError(f"'{name}' must have {n} components, got {len(values)}")
    if not all(math.isfinite(v) for v in values):
        raise ConfigError(f"'{name}' must be finite", value=values)
    return values


@dataclass(frozen=True)
class GaussianSplat:
    position: tuple
    scale: tuple
    rotation: tuple  # unit quaternion (w, x, y, z)
    color: tuple
    opacity: float

    def __post_init__(self):
        object.__setattr__(self, "position", _vec(self.position, 3, "position"))
        object.__setattr__(self, "scale", _vec(self.scale, 3, "scale"))
        object.__setattr__(self, "rotation", _vec(self.rotation, 4, "rotation"))
        object.__setattr__(self, "color", _vec(self.color, 3, "color"))
        object.__setattr__(self, "opacity", float(self.opacity))
        if min(self.scale) <= 0:
            raise ConfigError("splat scale components must be > 0", scale=self.scale)
        if abs(math.sqrt(sum(q * q for q in self.rotation)) - 1.0) > 1e-6:
            raise ConfigError("splat rotation must be a unit quaternion", rotation=self.rotation)
        if not all(0.0 <= c <= 1.0 for c in self.color):
            raise ConfigError("splat color must lie in [0, 1]", color=self.color)
        if not 0.0 <= self.opacity <= 1.0:
            raise ConfigError("splat opacity must lie in [0, 1]", opacity=self.opacity)


@dataclass(frozen=True)
class Scene:
    splats: tuple = ()
    background: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        splats = tuple(self.splats)
        for s in splats:
            if not isinstance(s, GaussianSplat):
                raise ConfigError("scene splats must be GaussianSplat instances")
        object.__setattr__(self, "splats", splats)
        background = _vec(self.background, 3, "background")
        if not all(0.0 <= c <= 1.0 for c in background):
            raise ConfigError("background must lie in [0, 1]", background=background)
        object.__setattr__(self, "background", background)

    def __len__(self):
        return len(self.splats)

    def to_params(self, dtype=torch.float64, device=None) -> "SplatParams":
        return SplatParams.from_scene(self, dtype=dtype, device=device)


@dataclass
class SplatParams:
    """Tensor view of a scene's splats: one row per splat."""
    position: torch.Tensor  # (N, 3)
    scale: torch.Tensor     # (N, 3)
    rotation: torch.Tensor  # (N, 4)
    color: torch.Tensor     # (N, 3)
    opacity: torch.Tensor   # (N,)

    NAMES = ("position", "scale", "rotation", "color", "opacity")

    @classmethod
    def from_scene(cls, scene: Scene, dtype=torch.float64, device=None) -> "SplatParams":
        def stack(attr, width):
            rows = [getattr(s, attr) for s in scene.splats]
            if not rows:
                shape = (0, width) if width else (0,)
                return torch.zeros(shape, dtype=dtype, device=device)
            return torch.tensor(rows, dtype=dtype, device=device)

        return cls(
            position=stack("position", 3),
            scale=stack("scale", 3),
            rotation=stack("rotation", 4),
            color=stack("color", 3),
            opacity=stack("opacity", 0),
        )

    def tensors(self) -> list:
        return [getattr(self, name) for name in self.NAMES]

    def __len__(self):
        return self.position.shape[0]

    def detach(self) -> "SplatParams":
        return SplatParams(*(t.detach().clone() for t in self.tensors()))

    def requires_grad_(self, flag: bool = True) -> "SplatParams":
        for t in self.tensors():
            t.requires_grad_(flag)
        return self

    def permute(self, order) -> "SplatParams":
        return SplatParams(*(t[order] for t in self.tensors()))

    def to_scene(self, background) -> Scene:
        rows = zip(*(t.detach().cpu().tolist() for t in self.tensors()))
        splats = [GaussianSplat(p, s, r, c, o) for p, s, r, c, o in rows]
        return Scene(splats=tuple(splats), background=background)


@dataclass(frozen=True)
class Camera:
    """Orbit camera: the eye sits on a sphere of `radius` around `look_at`."""
    azimuth: float = 0.0
    elevation: float = 0.0
    radius: float = 2.0
    look_at: tuple = (0.0, 0.0, 0.0)
    fov_y: float = 49.1
    resolution: tuple = (64, 64)

    def __post_init__(self):
        object.__setattr__(self, "azimuth", float(self.azimuth))
        object.__setattr__(self, "elevation", float(self.elevation))
        object.__setattr__(self, "radius", float(self.radius))
        object.__setattr__(self, "fov_y", float(self.fov_y))
        object.__setattr__(self, "look_at", _vec(self.look_at, 3, "look_at"))
        object.__setattr__(self, "resolution", tuple(int(v) for v in self.resolution))
        if not 0.0 <= self.azimuth < 360.0:
            raise ConfigError("azimuth must lie in [0, 360)", azimuth=self.azimuth)
        # the world-up vector is degenerate at the poles
        if not -90.0 < self.elevation < 90.0:
            raise ConfigError("elevation must lie in (-90, 90)", elevation=self.elevation)
        if not self.radius > 0:
            raise ConfigError("camera radius must be > 0", radius=self.radius)
        if not 0.0 < self.fov_y < 180.0:
            raise ConfigError("fov_y must lie in (0, 180)", fov_y=self.fov_y)
        if len(self.resolution) != 2 or min(self.resolution) < 1:
            raise ConfigError("resolution must be (height, width) >= 1", resolution=self.resolution)

    @classmethod
    def canonical(cls, resolution=(64, 64), radius: float = 2.0, fov_y: float = 49.1) -> "Camera":
        """Camera whose camera-to-world matrix is the identity (eye at the origin, looking down -z)."""
        return cls(azimuth=0.0, elevation=0.0, radius=radius, look_at=(0.0, 0.0, -radius),
                   fov_y=fov_y, resolution=resolution)

    @property
    def height(self) -> int:
        return self.resolution[0]

    @property
    def width(self) -> int:
        return self.resolution[1]

    @property
    def position(self) -> np.ndarray:
        az, el = math.radians(self.azimuth), math.radians(self.elevation)
        offset = np.array([math.cos(el) * math.sin(az), math.sin(el), math.cos(el) * math.cos(az)])
        return np.asarray(self.look_at) + self.radius * offset

    def camera_to_world(self) -> np.ndarray:
        """4x4 rigid transform; columns are right, up, back (OpenGL convention) and the eye."""
        eye = self.position
        back = eye - np.asarray(self.look_at)
        back = back / np.linalg.norm(back)
        right = np.cross(np.array([0.0, 1.0, 0.0]), back)
        right = right / np.linalg.norm(right)
        up = np.cross(back, right)
        c2w = np.eye(4)
        c2w[:3, 0] = right
        c2w[:3, 1] = up
        c2w[:3, 2] = back
        c2w[:3, 3] = eye
        return c2w

    def focal(self) -> float:
        return 0.5 * self.height / math.tan(math.radians(self.fov_y) / 2.0)

    def with_resolution(self, resolution) -> "Camera":
        return Camera(self.azimuth, self.elevation, self.radius, self.look_at, self.fov_y, resolution)


@dataclass(frozen=True)
class CameraEmbedding:
    values: tuple

    def __post_init__(self):
        values = tuple(float(v) for v in self.values)
        if len(values) != CAMERA_DIM:
            raise ConfigError(f"camera embedding must have {CAMERA_DIM} values, got {len(values)}")
        object.__setattr__(self, "values", values)

    def as_tensor(self, dtype=torch.float32, device=None) -> torch.Tensor:
        return torch.tensor(self.values, dtype=dtype, device=device)


def camera_embedding(camera: Camera) -> CameraEmbedding:
    """The camera-to-world matrix flattened row-major into 16 values."""
    return CameraEmbedding(tuple(camera.camera_to_world().reshape(-1).tolist()))


def stack_embeddings(embeddings, dtype=torch.float32, device=None) -> torch.Tensor:
    return torch.stack([e.as_tensor(dtype, device) for e in embeddings], dim=0)


@dataclass(frozen=True)
class SceneSpec:
    num_splats: int = 16
    seed: int = 0
    palette: tuple = DEFAULT_PALETTE
    extent: float = 0.6
    scale_range: tuple = (0.08, 0.25)
    opacity_range: tuple = (0.6, 0.95)
    color_jitter: float = 0.05
    rotation_jitter: float = 0.15
    background: tuple = (0.0, 0.0, 0.0)


def make_synthetic_scene(spec: SceneSpec) -> Scene:
    """
    Procedural scene of palette-colored splats with jittered axis-aligned frames.

    Positions lie in the cube [-extent, extent]^3 and scales are relative to
    `extent`. Deterministic given `spec.seed`.
    """
    if spec.num_splats < 0:
        raise ConfigError("num_splats must be >= 0", num_splats=spec.num_splats)
    if not spec.extent > 0:
        raise ConfigError("extent must be > 0", extent=spec.extent)
    if not spec.palette:
        raise ConfigError("palette must not be empty")

    rng = np.random.default_rng(spec.seed)
    palette = np.clip(np.asarray(spec.palette, dtype=np.float64), 0.0, 1.0)
    lo, hi = spec.scale_range
    splats = []
    for _ in range(spec.num_splats):
        position = rng.uniform(-spec.extent, spec.extent, size=3)
        scale = rng.uniform(lo, hi, size=3) * spec.extent
        half = rng.normal(0.0, spec.rotation_jitter, size=3)
        quat = np.concatenate([[1.0], half])
        quat = quat / np.linalg.norm(quat)
        base = palette[rng.integers(len(palette))]
        color = np.clip(base + rng.normal(0.0, spec.color_jitter, size=3), 0.0, 1.0)
        opacity = rng.uniform(*spec.opacity_range)
        splats.append(GaussianSplat(position, scale, quat, color, opacity))
    return Scene(splats=tuple(splats), background=spec.background)


def random_splat_cloud(num_splats: int, seed: int, extent: float = 0.5, opacity: float = 0.1,
                       scale: float = 0.08, background=(0.0, 0.0, 0.0)) -> Scene:
    """Low-opacity grey cloud used to initialize reconstruction."""
    rng = np.random.default_rng(seed)
    splats = []
    for _ in range(num_splats):
        position = rng.uniform(-extent, extent, size=3)
        color = np.clip(0.5 + rng.normal(0.0, 0.05, size=3), 0.0, 1.0)
        splats.append(GaussianSplat(position, (scale, scale, scale), (1.0, 0.0, 0.0, 0.0), color, opacity))
    return Scene(splats=tuple(splats), background=background)


def _check_range(name: str, bounds) -> tuple:
    lo, hi = (float(b) for b in bounds)
    if not hi > lo:
        raise ConfigError(f"{name} range must be non-empty", range=(lo, hi))
    return lo, hi


def sample_camera(rng_seed: int, azimuth_range=(0.0, 360.0), elevation_range=(-30.0, 30.0),
                  radius: float = 2.0, look_at=(0.0, 0.0, 0.0), fov_y: float = 49.1,
                  resolution=(64, 64)) -> Camera:
    rng = np.random.default_rng(rng_seed)
    return _draw_camera(rng, azimuth_range, elevation_range, radius, look_at, fov_y, resolution)


def sample_cameras(rng: np.random.Generator, count: int, azimuth_range=(0.0, 360.0),
                   elevation_range=(-30.0, 30.0), radius: float = 2.0, look_at=(0.0, 0.0, 0.0),
                   fov_y: float = 49.1, resolution=(64, 64)) -> list:
    """Draws `count` cameras from a shared generator (used inside optimization loops)."""
    return [_draw_camera(rng, azimuth_range, elevation_range, radius, look_at, fov_y, resolution)
            for _ in range(count)]


def _draw_camera(rng, azimuth_range, elevation_range, radius, look_at, fov_y, resolution) -> Camera:
    az_lo, az_hi = _check_range("azimuth", azimuth_range)
    el_lo, el_hi = _check_range("elevation", elevation_range)
    if not radius > 0:
        raise ConfigError("camera radius must be > 0", radius=radius)
    azimuth = float(rng.uniform(az_lo, az_hi)) % 360.0
    elevation = float(rng.uniform(el_lo, el_hi))
    return Camera(azimuth, elevation, radius, look_at, fov_y, resolution)


def orbit_cameras(count: int, elevation: float = 15.0, radius: float = 2.0, start: float = 0.0,
                  fov_y: float = 49.1, resolution=(64, 64)) -> list:
    """Evenly spaced turnaround cameras (evaluation / held-out views)."""
    return [Camera((start + 360.0 * i / count) % 360.0, elevation, radius, (0.0, 0.0, 0.0), fov_y, resolution)
            for i in range(count)]


# --- serialization ---------------------------------------------------------

def scene_to_dict(scene: Scene) -> dict:
    return {
        "format": "invert3d-scene",
        "version": SCENE_FORMAT_VERSION,
        "background": list(scene.background),
        "splats": [
            {
                "position": list(s.position),
                "scale": list(s.scale),
                "rotation": list(s.rotation),
                "color": list(s.color),
                "opacity": s.opacity,
            }
            for s in scene.splats
        ],
    }


def scene_from_dict(doc: dict) -> Scene:
    if doc.get("format") != "invert3d-scene":
        raise SchemaError("not a scene document", format=doc.get("format"))
    if doc.get("version") != SCENE_FORMAT_VERSION:
        raise SchemaError("unsupported scene format version", version=doc.get("version"))
    try:
        splats = tuple(
            GaussianSplat(s["position"], s["scale"], s["rotation"], s["color"], s["opacity"])
            for s in doc["splats"]
        )
        return Scene(splats=splats, background=doc["background"])
    except (KeyError, TypeError) as e:
        raise SchemaError(f"malformed scene document: {e}") from e


def save_scene(scene: Scene, path) -> Path:
    path = Path(path)
    # json writes floats with repr(), which round-trips float64 exactly
    path.write_text(json.dumps(scene_to_dict(scene), indent=2))
    return path


def load_scene(path) -> Scene:
    return scene_from_dict(json.loads(Path(path).read_text()))
