"""Procedural analytic scenes with exact radiance, used for training data
and as the brute-force oracle in tests.

Primitives are homogeneous (constant opacity inside), so dense quadrature
converges quickly and surface positions are known exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, save_dataset
from .geometry import CameraPose, rays_for_pixels, clamp_t_far_to_ground


@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple
    rgb: tuple
    sigma: float

    def contains(self, pts: np.ndarray) -> np.ndarray:
        lo = np.asarray(self.lo)
        hi = np.asarray(self.hi)
        return ((pts >= lo) & (pts <= hi)).all(axis=-1)


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    rgb: tuple
    sigma: float

    def contains(self, pts: np.ndarray) -> np.ndarray:
        d = pts - np.asarray(self.center)
        return (d * d).sum(axis=-1) <= self.radius ** 2


@dataclass
class AnalyticScene:
    primitives: list
    ground_rgb: tuple = (0.10, 0.12, 0.08)
    ground_top_z: float = 0.0     # visible terrain surface
    ground_sigma: float = 80.0
    sky_rgb: tuple = (0.53, 0.72, 0.92)
    per_image_tint: dict = field(default_factory=dict)  # image_id -> rgb multiplier
    seed: int = 0

    def tint(self, image_id: int) -> np.ndarray:
        return np.asarray(self.per_image_tint.get(int(image_id), (1.0, 1.0, 1.0)))


def oracle_radiance(scene: AnalyticScene, x) -> tuple:
    """(sigma, rgb) of the first primitive containing x; empty space is
    transparent with the sky color as context."""
    s, c = oracle_radiance_batch(scene, np.asarray(x, dtype=np.float64)[None])
    return float(s[0]), tuple(float(v) for v in c[0])


def oracle_radiance_batch(scene: AnalyticScene, pts: np.ndarray):
    """Vectorized field lookup: pts (...,3) -> sigma (...,), rgb (...,3).

    List order gives precedence; the ground slab sits below all primitives;
    everything else is empty space (sigma 0, sky color as context).
    """
    pts = np.asarray(pts, dtype=np.float64)
    flat = pts.reshape(-1, 3)
    sigma = np.zeros(len(flat))
    rgb = np.broadcast_to(np.asarray(scene.sky_rgb), (len(flat), 3)).copy()
    unset = np.ones(len(flat), dtype=bool)
    for prim in scene.primitives:
        m = unset & prim.contains(flat)
        sigma[m] = prim.sigma
        rgb[m] = prim.rgb
        unset &= ~m
    m = unset & (flat[:, 2] <= scene.ground_top_z)
    sigma[m] = scene.ground_sigma
    rgb[m] = scene.ground_rgb
    return sigma.reshape(pts.shape[:-1]), rgb.reshape(pts.shape[:-1] + (3,))


def oracle_render(scene: AnalyticScene, pose: CameraPose, n_dense: int = 4096,
                  t_max: float = 400.0) -> np.ndarray:
    """Dense uniform quadrature of the analytic field: the ground-truth image.

    Rays integrate from the camera to 1 m below the terrain surface (or
    t_max for escaping rays); residual transmittance picks up the sky color.
    The per-image tint multiplies the final color.
    """
    if n_dense < 256:
        raise ValueError("n_dense must be >= 256")
    H, W = pose.height, pose.width
    ys, xs = np.mgrid[0:H, 0:W]
    origins, dirs = rays_for_pixels(pose, xs.ravel(), ys.ravel())
    t_far = np.full(len(dirs), t_max)
    t_far = clamp_t_far_to_ground(origins, dirs, t_far, scene.ground_top_z - 1.0)
    t_far = np.maximum(t_far, 1e-6)

    color = np.zeros((len(dirs), 3))
    trans = np.ones(len(dirs))
    # chunk over sample index to bound memory; uniform midpoint rule
    chunk = max(1, int(2e6 // len(dirs)))
    for s0 in range(0, n_dense, chunk):
        s1 = min(n_dense, s0 + chunk)
        frac = (np.arange(s0, s1) + 0.5) / n_dense
        t = t_far[:, None] * frac[None, :]
        pts = origins[:, None, :] + t[..., None] * dirs[:, None, :]
        sig, rgb = oracle_radiance_batch(scene, pts)
        delta = (t_far / n_dense)[:, None]
        alpha = 1.0 - np.exp(-sig * delta)
        surv = np.cumprod(1.0 - alpha, axis=1)
        before = np.concatenate([np.ones((len(alpha), 1)), surv[:, :-1]], axis=1)
        w = trans[:, None] * before * alpha
        color += (w[..., None] * rgb).sum(axis=1)
        trans *= surv[:, -1]
    color += trans[:, None] * np.asarray(scene.sky_rgb)
    color *= scene.tint(pose.image_id)
    return np.clip(color, 0.0, 1.0).reshape(H, W, 3).astype(np.float32)


class AnalyticFieldModel:
    """Drop-in replacement for FieldModel queries backed by the exact field.

    Lets the renderer run against ground-truth radiance, which is how the
    compositing path is validated independently of any trained weights.
    """

    def __init__(self, scene: AnalyticScene, bounds, tint_id=None):
        self.scene = scene
        self.bounds = bounds
        self.tint_id = tint_id

    def _tinted(self, rgb):
        if self.tint_id is None:
            return rgb
        return np.clip(rgb * self.scene.tint(self.tint_id), 0.0, 1.0)

    def query_fg(self, pts, dirs, emb=None, nets=None, counter=None):
        sig, rgb = oracle_radiance_batch(self.scene, pts)
        if counter is not None:
            counter["queries"] = counter.get("queries", 0) + len(pts)
        return sig.astype(np.float32), self._tinted(rgb).astype(np.float32)

    def query_bg(self, coords4, dirs, route_pos, emb=None, nets=None, counter=None):
        sig, rgb = oracle_radiance_batch(self.scene, route_pos)
        if counter is not None:
            counter["queries"] = counter.get("queries", 0) + len(route_pos)
        return sig.astype(np.float32), self._tinted(rgb).astype(np.float32)


@dataclass(frozen=True)
class CameraGridSpec:
    rows: int = 6
    cols: int = 8
    altitude: float = 12.0
    pitch_deg: float = 62.0     # downward tilt from horizontal
    fov_deg: float = 60.0
    width: int = 96
    height: int = 96
    x_range: tuple = (-16.0, 16.0)
    y_range: tuple = (-7.0, 7.0)


def _look_rotation(forward: np.ndarray) -> np.ndarray:
    """Camera-to-world rotation for a camera facing `forward` (y-down image)."""
    f = forward / np.linalg.norm(forward)
    up = np.array([0.0, 0.0, 1.0])
    if abs(f @ up) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    x_cam = np.cross(f, up)
    x_cam /= np.linalg.norm(x_cam)
    z_cam = -f
    y_cam = np.cross(z_cam, x_cam)
    return np.stack([x_cam, y_cam, z_cam], axis=1)


def grid_poses(spec: CameraGridSpec) -> list[CameraPose]:
    """Serpentine (boustrophedon) survey pattern, pitched toward the ground."""
    fx = (spec.width / 2.0) / math.tan(math.radians(spec.fov_deg) / 2.0)
    fy = fx
    cx, cy = spec.width / 2.0, spec.height / 2.0
    xs = np.linspace(spec.x_range[0], spec.x_range[1], spec.cols)
    ys = np.linspace(spec.y_range[0], spec.y_range[1], spec.rows)
    pitch = math.radians(spec.pitch_deg)
    poses = []
    image_id = 0
    for r, y in enumerate(ys):
        row_xs = xs if r % 2 == 0 else xs[::-1]
        heading = np.array([1.0, 0.0, 0.0]) if r % 2 == 0 else np.array([-1.0, 0.0, 0.0])
        for x in row_xs:
            forward = heading * math.cos(pitch) + np.array([0, 0, -1.0]) * math.sin(pitch)
            poses.append(CameraPose(
                image_id=image_id, width=spec.width, height=spec.height,
                fx=fx, fy=fy, cx=cx, cy=cy,
                rotation=_look_rotation(forward),
                position=np.array([x, y, spec.altitude]),
            ))
            image_id += 1
    return poses


def generate_dataset(scene: AnalyticScene, spec: CameraGridSpec, root,
                     n_dense: int = 2048) -> Dataset:
    """Render the grid with the oracle and write the dataset directory.

    The pipeline ground_z is placed 1 m below the visible terrain surface so
    that clipped rays march through the (opaque) ground instead of stopping
    exactly on it.
    """
    poses = grid_poses(spec)
    images = [oracle_render(scene, p, n_dense=n_dense) for p in poses]
    return save_dataset(root, scene.ground_top_z - 1.0, poses, images)


def default_desk_scene(variant: str = "default", n_images: int = 48, seed: int = 0) -> AnalyticScene:
    """5 boxes + 2 spheres over a 40 x 20 m footprint.

    Variants: "default", "tinted" (per-image color multipliers, exercising
    appearance embeddings), "wall" (adds a tall occluder for pruning tests).
    """
    # large saturated blocks: plenty of per-pixel contrast (a constant-color
    # image scores poorly) while every face stays several samples thick
    prims = [
        Box(lo=(-18.0, -9.0, 0.0), hi=(-8.0, -1.0, 3.0), rgb=(0.95, 0.08, 0.06), sigma=80.0),
        Box(lo=(-18.0, 1.0, 0.0), hi=(-9.0, 9.0, 2.2), rgb=(0.06, 0.22, 0.95), sigma=80.0),
        Box(lo=(-6.0, -9.0, 0.0), hi=(3.0, -2.0, 4.5), rgb=(0.97, 0.86, 0.06), sigma=80.0),
        Box(lo=(-5.0, 2.0, 0.0), hi=(4.0, 9.0, 2.8), rgb=(0.55, 0.10, 0.85), sigma=80.0),
        Box(lo=(6.0, -8.0, 0.0), hi=(17.0, 0.5, 3.4), rgb=(0.98, 0.45, 0.04), sigma=80.0),
        Sphere(center=(12.0, 5.5, 2.2), radius=2.2, rgb=(0.05, 0.85, 0.25), sigma=80.0),
        Sphere(center=(6.0, 5.0, 1.6), radius=1.6, rgb=(0.95, 0.15, 0.60), sigma=80.0),
    ]
    scene = AnalyticScene(primitives=prims, seed=seed)
    if variant == "wall":
        # tall occluder west of center, clear of the east cells' overlap band
        scene.primitives.insert(0, Box(lo=(-5.0, -6.5, 0.0), hi=(-4.0, 6.5, 9.0),
                                       rgb=(0.60, 0.60, 0.62), sigma=120.0))
    elif variant == "tinted":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
        scene.per_image_tint = {
            i: tuple(np.round(rng.uniform(0.72, 1.28, size=3), 4)) for i in range(n_images)
        }
    elif variant != "default":
        raise ValueError(f"unknown scene variant: {variant}")
    return scene
