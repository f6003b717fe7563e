"""Two-view augmentation: jitter by default, plus the rejected ablation zoo.

Mode names follow the augmentation ablation columns: ``jitter`` (base),
``rot``, ``scal``, ``trans``, ``flip``, ``mvr`` (multi-view rendering).
Extra modes are always applied on top of jitter; a config lists them joined
by ``+``, e.g. ``rot+scal``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, SamplingError
from .scene import Camera, RGBDImage, Scene, default_camera, project, random_camera

AUG_MODES = ("jitter", "rot", "scal", "trans", "flip", "mvr")
MIN_MVR_CORRESPONDENCES = 32
MVR_ATTEMPTS = 16


@dataclass(frozen=True)
class AugmentConfig:
    sigma_xyz: float | None = None  # None -> 0.02 * scene extent
    sigma_rgb: float = 0.05
    modes: tuple[str, ...] = ()
    rot_range: float = np.pi
    scale_range: tuple[float, float] = (0.8, 1.2)
    trans_range: float = 0.2
    image_size: int = 64

    def validate(self) -> None:
        for s in (self.sigma_xyz, self.sigma_rgb):
            if s is not None and not (np.isfinite(s) and s >= 0):
                raise ConfigError(f"augmentation sigmas must be finite and >= 0, got {s}")
        for m in self.modes:
            if m not in AUG_MODES or m == "jitter":
                raise ConfigError(f"unknown augmentation mode {m!r}")
        lo, hi = self.scale_range
        if not (np.isfinite(self.rot_range) and np.isfinite(self.trans_range) and 0 < lo <= hi < np.inf):
            raise ConfigError("augmentation ranges must be finite (and scales positive)")

    @property
    def mode_name(self) -> str:
        return "+".join(self.modes) if self.modes else "jitter"

    def sigma_xyz_for(self, extent: float) -> float:
        return 0.02 * extent if self.sigma_xyz is None else self.sigma_xyz


def parse_modes(text: str) -> tuple[str, ...]:
    parts = [p.strip() for p in text.split("+") if p.strip()]
    if not parts:
        raise ConfigError("empty augmentation mode")
    for p in parts:
        if p not in AUG_MODES:
            raise ConfigError(f"unknown augmentation mode {p!r}; expected one of {AUG_MODES}")
    return tuple(sorted({p for p in parts if p != "jitter"}, key=AUG_MODES.index))


def jitter(scene: Scene, sigma_xyz: float, sigma_rgb: float, seed) -> Scene:
    if sigma_xyz < 0 or sigma_rgb < 0:
        raise ConfigError("jitter sigmas must be >= 0")
    if sigma_xyz == 0 and sigma_rgb == 0:
        return scene
    rng = np.random.default_rng(seed)
    n = scene.n_points
    points = scene.points + rng.normal(0.0, 1.0, (n, 3)) * sigma_xyz
    colors = np.clip(scene.colors + rng.normal(0.0, 1.0, (n, 3)) * sigma_rgb, 0.0, 1.0)
    return scene.with_geometry(points, colors)


def rotation_z(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class View:
    scene: Scene
    camera: Camera
    image: RGBDImage
    uv: np.ndarray  # continuous pixel coordinates of every point (no occlusion)
    depth: np.ndarray
    transform: dict = field(default_factory=dict)


def make_view(scene: Scene, camera: Camera, transform: dict | None = None) -> View:
    uv, depth = camera.pixel_coords(scene.points)
    return View(scene, camera, project(scene, camera), uv, depth, transform or {})


def _geometric(scene: Scene, cfg: AugmentConfig, rng: np.random.Generator) -> tuple[Scene, dict]:
    pts = scene.points
    info: dict = {}
    if "rot" in cfg.modes:
        theta = rng.uniform(-cfg.rot_range, cfg.rot_range)
        r = rotation_z(theta)
        pts = pts @ r.T
        info["theta"], info["rotation"] = theta, r
    if "scal" in cfg.modes:
        s = rng.uniform(*cfg.scale_range)
        pts = pts * s
        info["scale"] = s
    if "trans" in cfg.modes:
        t = rng.uniform(-cfg.trans_range, cfg.trans_range, size=3)
        pts = pts + t
        info["translation"] = t
    if "flip" in cfg.modes:
        flip = bool(rng.random() < 0.5)
        if flip:
            pts = pts * np.array([-1.0, 1.0, 1.0])
        info["flip"] = flip
    if pts is scene.points:
        return scene, info
    return scene.with_geometry(pts), info


def make_views(scene: Scene, cfg: AugmentConfig, seed) -> tuple[View, View, np.ndarray]:
    """Two independently augmented views and their correspondence.

    ``corr`` is an M x 2 array of (view-1 point index, view-2 point index).
    Views keep the scene's point order, so both columns are equal; for ``mvr``
    only points rendered in both images are kept.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    sx = cfg.sigma_xyz_for(scene.extent)
    scenes, infos = [], []
    for _ in range(2):
        jittered = jitter(scene, sx, cfg.sigma_rgb, rng.integers(2**63))
        s, info = _geometric(jittered, cfg, rng)
        scenes.append(s)
        infos.append(info)

    size = cfg.image_size
    if "mvr" not in cfg.modes:
        cam = default_camera(scene.extent, size, size)
        v1, v2 = make_view(scenes[0], cam, infos[0]), make_view(scenes[1], cam, infos[1])
        idx = np.arange(scene.n_points)
        return v1, v2, np.column_stack([idx, idx])

    for _ in range(MVR_ATTEMPTS):
        c1 = random_camera(scene.extent, rng, size, size)
        c2 = random_camera(scene.extent, rng, size, size)
        v1, v2 = make_view(scenes[0], c1, infos[0]), make_view(scenes[1], c2, infos[1])
        shared = np.intersect1d(v1.image.visible_points(), v2.image.visible_points())
        if len(shared) >= MIN_MVR_CORRESPONDENCES:
            return v1, v2, np.column_stack([shared, shared])
    raise SamplingError(f"multi-view rendering found < {MIN_MVR_CORRESPONDENCES} correspondences "
                        f"after {MVR_ATTEMPTS} camera draws")
