"""Synthetic RGB-D scenes with exact pinhole projection.

Scenes are colored, labeled point sets built from a few primitives (planes,
boxes, spheres). The class table is laid out so that half of the classes can
only be told apart by geometry and the other half only by color, which makes
a linear probe on learned features sensitive to how well the features fuse
both modalities.
"""

from __future__ import annotations

import colorsys
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError

SCENE_MAGIC = b"P4CSCN01"
SHAPES = ("plane", "box", "sphere")

_GEOMETRY_PAIRS = (("plane", "sphere"), ("box", "sphere"), ("plane", "box"))
_COLOR_PAIR_SHAPES = ("plane", "box", "sphere")


def _freeze(*arrays: np.ndarray) -> None:
    for a in arrays:
        a.setflags(write=False)


@dataclass(frozen=True, eq=False)
class Scene:
    points: np.ndarray
    colors: np.ndarray
    labels: np.ndarray
    extent: float
    n_classes: int

    def __post_init__(self):
        points = np.ascontiguousarray(self.points, dtype=np.float64)
        colors = np.ascontiguousarray(self.colors, dtype=np.float64)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        n = points.shape[0]
        if points.ndim != 2 or points.shape[1] != 3 or n < 2:
            raise ContractError(f"points must be N x 3 with N >= 2, got {points.shape}")
        if colors.shape != (n, 3) or labels.shape != (n,):
            raise ContractError("colors/labels do not match points")
        if not (self.extent > 0 and np.isfinite(self.extent)):
            raise ContractError(f"extent must be positive, got {self.extent}")
        if not np.all(np.isfinite(points)) or np.abs(points).max() > self.extent:
            raise ContractError("points must be finite and inside [-extent, extent]^3")
        if colors.min() < 0.0 or colors.max() > 1.0:
            raise ContractError("colors must lie in [0, 1]")
        if labels.min() < 0 or labels.max() >= self.n_classes:
            raise ContractError("labels must lie in [0, n_classes)")
        _freeze(points, colors, labels)
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "colors", colors)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "extent", float(self.extent))

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    def with_geometry(self, points: np.ndarray, colors: np.ndarray | None = None) -> "Scene":
        """Copy with new coordinates (and optionally colors); labels kept.

        The extent grows to cover the new coordinates if needed.
        """
        colors = self.colors if colors is None else colors
        extent = max(self.extent, float(np.abs(points).max()))
        return Scene(points, colors, self.labels, extent, self.n_classes)

    def identical_to(self, other: "Scene") -> bool:
        return (
            self.extent == other.extent
            and self.n_classes == other.n_classes
            and np.array_equal(self.points, other.points)
            and np.array_equal(self.colors, other.colors)
            and np.array_equal(self.labels, other.labels)
        )


@dataclass(frozen=True)
class SceneConfig:
    n_primitives: int = 4
    points_per_primitive: int = 256
    extent: float = 1.0
    n_classes: int = 8
    color_noise: float = 0.02
    color_wave: float = 0.06

    def validate(self) -> None:
        if self.n_primitives < 2:
            raise ConfigError("a scene needs at least 2 primitives")
        if self.points_per_primitive < 16:
            raise ConfigError("a primitive needs at least 16 points")
        if not self.extent > 0:
            raise ConfigError("extent must be positive")
        if self.n_classes < 4 or self.n_classes % 4:
            raise ConfigError("n_classes must be a positive multiple of 4")
        if self.color_noise < 0 or self.color_wave < 0:
            raise ConfigError("color noise parameters must be >= 0")


@dataclass(frozen=True)
class ClassSpec:
    shape: str
    color: tuple[float, float, float]
    kind: str  # "geometry" or "color": which modality separates it from its twin
    twin: int


def class_table(n_classes: int) -> list[ClassSpec]:
    """Class layout: consecutive twins differ either only in shape or only in color."""
    n_palettes = 3 * n_classes // 4
    palette = [
        colorsys.hsv_to_rgb((p / n_palettes + 0.03) % 1.0, 0.65, 0.8) for p in range(n_palettes)
    ]
    table: list[ClassSpec] = []
    pal = 0
    for q in range(n_classes // 2):
        c = len(table)
        if q % 2 == 0:
            a, b = _GEOMETRY_PAIRS[(q // 2) % len(_GEOMETRY_PAIRS)]
            table.append(ClassSpec(a, palette[pal], "geometry", c + 1))
            table.append(ClassSpec(b, palette[pal], "geometry", c))
            pal += 1
        else:
            shape = _COLOR_PAIR_SHAPES[(q // 2) % len(_COLOR_PAIR_SHAPES)]
            table.append(ClassSpec(shape, palette[pal], "color", c + 1))
            table.append(ClassSpec(shape, palette[pal + 1], "color", c))
            pal += 2
    return table


def _sample_shape(shape: str, n: int, size: float, rng: np.random.Generator) -> np.ndarray:
    if shape == "plane":
        uv = rng.uniform(-1.0, 1.0, size=(n, 2)) * size
        return np.column_stack([uv, np.zeros(n)])
    if shape == "sphere":
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return d * (0.8 * size)
    if shape == "box":
        half = 0.7 * size
        face = rng.integers(0, 6, size=n)
        uv = rng.uniform(-half, half, size=(n, 2))
        out = np.empty((n, 3))
        axis = face // 2
        sign = np.where(face % 2 == 0, -1.0, 1.0)
        for ax in range(3):
            sel = axis == ax
            others = [a for a in range(3) if a != ax]
            out[sel, ax] = sign[sel] * half
            out[sel, others[0]] = uv[sel, 0]
            out[sel, others[1]] = uv[sel, 1]
        return out
    raise ConfigError(f"unknown shape {shape!r}")


def _rot_z(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def generate_scene(seed: int, cfg: SceneConfig = SceneConfig()) -> Scene:
    cfg.validate()
    rng = np.random.default_rng(seed)
    table = class_table(cfg.n_classes)
    e = cfg.extent
    if cfg.n_primitives <= cfg.n_classes:
        classes = rng.permutation(cfg.n_classes)[: cfg.n_primitives]
    else:
        classes = rng.integers(0, cfg.n_classes, size=cfg.n_primitives)

    pts, cols, labs = [], [], []
    n = cfg.points_per_primitive
    for cls in classes:
        spec = table[int(cls)]
        size = rng.uniform(0.25, 0.4) * e
        center = rng.uniform(-0.55 * e, 0.55 * e, size=3)
        local = _sample_shape(spec.shape, n, size, rng) @ _rot_z(rng.uniform(0, 2 * np.pi)).T
        # smooth in-primitive color variation plus per-point noise
        wave_dir = rng.normal(size=3)
        wave_dir /= np.linalg.norm(wave_dir)
        phase = rng.uniform(0, 2 * np.pi, size=3)
        wave = np.sin((local @ wave_dir)[:, None] * (np.pi / size) + phase)
        color = np.asarray(spec.color) + cfg.color_wave * wave + rng.normal(0.0, cfg.color_noise, (n, 3))
        pts.append(local + center)
        cols.append(np.clip(color, 0.0, 1.0))
        labs.append(np.full(n, cls))
    points = np.concatenate(pts)
    return Scene(np.clip(points, -e, e), np.concatenate(cols), np.concatenate(labs), e, cfg.n_classes)


# --- cameras and projection -------------------------------------------------


@dataclass(frozen=True, eq=False)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ContractError("rotation must be 3x3 and translation a 3-vector")
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-9:
            raise ContractError("rotation is not orthonormal")
        if not (self.fx > 0 and self.fy > 0 and self.width > 0 and self.height > 0):
            raise ContractError("focal lengths and image size must be positive")
        _freeze(r, t)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    def to_camera_frame(self, points: np.ndarray) -> np.ndarray:
        return (points - self.translation) @ self.rotation.T

    def pixel_coords(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Continuous (u, v) and depth for every point, ignoring occlusion."""
        pc = self.to_camera_frame(points)
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * pc[:, 0] / z + self.cx
            v = self.fy * pc[:, 1] / z + self.cy
        return np.column_stack([u, v]), z


def look_at(eye, target, width: int = 64, height: int = 64, fov_deg: float = 60.0) -> Camera:
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    up = np.array([0.0, 0.0, 1.0])
    if abs(forward @ up) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
    return Camera(
        fx=f, fy=f,
        cx=(width - 1) / 2, cy=(height - 1) / 2,
        rotation=np.stack([right, down, forward]), translation=eye,
        width=width, height=height,
    )


def default_camera(extent: float, width: int = 64, height: int = 64) -> Camera:
    """Oblique view from above that frames a scene of the given extent."""
    return look_at((0.0, -2.2 * extent, 2.2 * extent), (0.0, 0.0, 0.0), width, height)


def random_camera(extent: float, rng: np.random.Generator, width: int = 64, height: int = 64) -> Camera:
    azimuth = rng.uniform(0.0, 2 * np.pi)
    elevation = rng.uniform(np.radians(20), np.radians(70))
    r = 3.2 * extent
    eye = r * np.array([np.cos(elevation) * np.cos(azimuth), np.cos(elevation) * np.sin(azimuth), np.sin(elevation)])
    return look_at(eye, (0.0, 0.0, 0.0), width, height)


@dataclass(frozen=True, eq=False)
class RGBDImage:
    """Rendered view. ``subpixel`` keeps the exact projected (u, v) of the
    point splatted into each pixel so the projection can be inverted exactly."""

    rgb: np.ndarray
    depth: np.ndarray
    corr: np.ndarray
    subpixel: np.ndarray = field(repr=False)

    def __post_init__(self):
        _freeze(self.rgb, self.depth, self.corr, self.subpixel)

    @property
    def occupied(self) -> np.ndarray:
        return self.corr >= 0

    def visible_points(self) -> np.ndarray:
        """Point indices visible in this image, in row-major pixel order."""
        return self.corr[self.corr >= 0]


def project(scene: Scene, cam: Camera) -> RGBDImage:
    h, w = cam.height, cam.width
    uv, z = cam.pixel_coords(scene.points)
    front = z > 1e-12
    px = np.floor(uv[:, 0] + 0.5)
    py = np.floor(uv[:, 1] + 0.5)
    inside = front & (px >= 0) & (px < w) & (py >= 0) & (py < h)
    idx = np.flatnonzero(inside)
    flat = (py[idx] * w + px[idx]).astype(np.int64)
    # nearest depth wins; equal depths go to the lower point index
    order = np.lexsort((idx, z[idx], flat))
    flat, idx = flat[order], idx[order]
    first = np.ones(len(flat), dtype=bool)
    first[1:] = flat[1:] != flat[:-1]
    flat, idx = flat[first], idx[first]

    corr = np.full(h * w, -1, dtype=np.int64)
    depth = np.zeros(h * w)
    rgb = np.zeros((h * w, 3))
    sub = np.full((h * w, 2), np.nan)
    corr[flat] = idx
    depth[flat] = z[idx]
    rgb[flat] = scene.colors[idx]
    sub[flat] = uv[idx]
    return RGBDImage(rgb.reshape(h, w, 3), depth.reshape(h, w), corr.reshape(h, w), sub.reshape(h, w, 2))


def backproject(img: RGBDImage, cam: Camera) -> np.ndarray:
    """World coordinates of every occupied pixel, in row-major pixel order."""
    mask = img.occupied
    uv = img.subpixel[mask]
    z = img.depth[mask]
    pc = np.column_stack([(uv[:, 0] - cam.cx) * z / cam.fx, (uv[:, 1] - cam.cy) * z / cam.fy, z])
    return pc @ cam.rotation + cam.translation


# --- serialization ----------------------------------------------------------


def scene_to_bytes(scene: Scene) -> bytes:
    head = SCENE_MAGIC + struct.pack("<QQd", scene.n_points, scene.n_classes, scene.extent)
    return b"".join([
        head,
        scene.points.astype("<f8").tobytes(),
        scene.colors.astype("<f8").tobytes(),
        scene.labels.astype("<u4").tobytes(),
    ])


def scene_from_bytes(data: bytes) -> Scene:
    if data[:8] != SCENE_MAGIC:
        raise ContractError("not a scene file (bad magic)")
    n, c, extent = struct.unpack_from("<QQd", data, 8)
    off = 32
    expected = off + n * 24 * 2 + n * 4
    if len(data) != expected:
        raise ContractError(f"scene file has {len(data)} bytes, expected {expected}")
    points = np.frombuffer(data, "<f8", n * 3, off).reshape(n, 3)
    off += n * 24
    colors = np.frombuffer(data, "<f8", n * 3, off).reshape(n, 3)
    off += n * 24
    labels = np.frombuffer(data, "<u4", n, off)
    return Scene(points.astype(np.float64), colors.astype(np.float64), labels.astype(np.int64), extent, int(c))


def save_scene(scene: Scene, path) -> None:
    Path(path).write_bytes(scene_to_bytes(scene))


def load_scene(path) -> Scene:
    return scene_from_bytes(Path(path).read_bytes())
