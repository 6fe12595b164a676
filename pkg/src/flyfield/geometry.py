"""Camera/ray geometry, scene bounds and the centroid grid that routes queries.

Conventions used throughout the package:
  - camera space: camera looks along -z, x right, y down in pixel space
  - pixel centers sit at integer + 0.5
  - world up is +z; the ground is a single plane z = ground_z
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class CameraPose:
    """Pinhole camera with a camera-to-world rigid transform."""

    image_id: int
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # (3,3) camera-to-world, orthonormal
    position: np.ndarray  # (3,) world meters

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        pos = np.asarray(self.position, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "position", pos)
        if not (np.isfinite(rot).all() and np.isfinite(pos).all()):
            raise ValueError("non-finite pose")
        if np.abs(rot.T @ rot - np.eye(3)).max() > 1e-5:
            raise ValueError("rotation is not orthonormal")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point outside image")

    @property
    def altitude_z(self) -> float:
        return float(self.position[2])


@dataclass
class Ray:
    origin: np.ndarray     # (3,)
    direction: np.ndarray  # (3,) unit
    t_near: float = 0.0
    t_far: float = np.inf

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.direction = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-6:
            raise ValueError("direction must be unit length")
        if not 0 <= self.t_near <= self.t_far:
            raise ValueError("need 0 <= t_near <= t_far")

    def at(self, t):
        return self.origin + np.multiply.outer(np.asarray(t), self.direction)


@dataclass(frozen=True)
class EllipsoidBounds:
    """Foreground ellipsoid plus the terrain plane that clips rays."""

    center: np.ndarray  # (3,)
    radii: np.ndarray   # (3,) semi-axes, > 0
    ground_z: float

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64).reshape(3)
        r = np.asarray(self.radii, dtype=np.float64).reshape(3)
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "radii", r)
        if not (r > 0).all():
            raise ValueError("radii must be positive")
        if self.ground_z > c[2]:
            raise ValueError("ground plane above ellipsoid center")

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        s = (x - self.center) / self.radii
        return (s * s).sum(axis=-1) <= 1.0

    def bbox(self):
        return self.center - self.radii, self.center + self.radii


@dataclass(frozen=True)
class SpatialLayout:
    """Regular top-down centroid grid; one submodule per cell."""

    nx: int
    ny: int
    centroids: np.ndarray          # (nx*ny, 3), row-major over (iy, ix)
    cell_half_extents: np.ndarray  # (2,) x/y half-size of one cell
    overlap: float = 0.15

    def __post_init__(self):
        c = np.asarray(self.centroids, dtype=np.float64).reshape(-1, 3)
        h = np.asarray(self.cell_half_extents, dtype=np.float64).reshape(2)
        object.__setattr__(self, "centroids", c)
        object.__setattr__(self, "cell_half_extents", h)
        if len(c) != self.nx * self.ny:
            raise ValueError("centroid count must equal nx*ny")
        if not 0 <= self.overlap < 1:
            raise ValueError("overlap must be in [0, 1)")
        if np.ptp(c[:, 2]) > 1e-9:
            raise ValueError("all centroids must share one height")

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    @property
    def origin_xy(self) -> np.ndarray:
        return self.centroids[0, :2]

    @property
    def spacing_xy(self) -> np.ndarray:
        return 2.0 * self.cell_half_extents


@dataclass(frozen=True)
class BackgroundCoord:
    """Inverted-sphere exterior parameterization: (unit direction, 1/norm)."""

    unit_dir: np.ndarray
    inv_norm: float

    def __post_init__(self):
        u = np.asarray(self.unit_dir, dtype=np.float64).reshape(3)
        object.__setattr__(self, "unit_dir", u)
        if abs(np.linalg.norm(u) - 1.0) > 1e-6:
            raise ValueError("unit_dir must be unit length")
        if not 0 < self.inv_norm <= 1:
            raise ValueError("inv_norm must be in (0, 1]")


def pixel_to_ray(pose: CameraPose, px: float, py: float) -> Ray:
    """Cast the world-space ray through sub-pixel coordinates (px, py)."""
    if not (np.isfinite(px) and np.isfinite(py)):
        raise ValueError("non-finite pixel coordinates")
    if not (0 <= px < pose.width and 0 <= py < pose.height):
        raise ValueError("pixel outside image")
    d_cam = np.array([(px - pose.cx) / pose.fx, (py - pose.cy) / pose.fy, -1.0])
    d = pose.rotation @ d_cam
    d /= np.linalg.norm(d)
    return Ray(origin=pose.position.copy(), direction=d, t_near=0.0, t_far=np.inf)


def rays_for_pixels(pose: CameraPose, px: np.ndarray, py: np.ndarray):
    """Vectorized pixel_to_ray: centers of integer pixels (px, py).

    Returns (origins (N,3), directions (N,3)).
    """
    px = np.asarray(px, dtype=np.float64) + 0.5
    py = np.asarray(py, dtype=np.float64) + 0.5
    d_cam = np.stack(
        [(px - pose.cx) / pose.fx, (py - pose.cy) / pose.fy, -np.ones_like(px)], axis=-1
    )
    d = d_cam @ pose.rotation.T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(pose.position, d.shape).copy()
    return o, d


def ray_ellipsoid_interval(ray: Ray, bounds: EllipsoidBounds):
    """Parametric interval where the ray is inside the ellipsoid, or None.

    The ellipsoid is reduced to a unit sphere by scaling about its center,
    then the sphere quadratic is solved; the result is clipped to the
    ray's own [t_near, t_far].
    """
    t = _ellipsoid_intervals(
        ray.origin[None], ray.direction[None], bounds,
        np.array([ray.t_near]), np.array([ray.t_far]),
    )
    t0, t1 = t[0]
    if t0 >= t1:
        return None
    return float(t0), float(t1)


def _ellipsoid_intervals(origins, dirs, bounds, t_near, t_far):
    """Vectorized ellipsoid clip. Returns (N,2); empty intervals have t0 >= t1."""
    o = (origins - bounds.center) / bounds.radii
    d = dirs / bounds.radii
    a = (d * d).sum(axis=-1)
    b = 2.0 * (o * d).sum(axis=-1)
    c = (o * o).sum(axis=-1) - 1.0
    disc = b * b - 4.0 * a * c
    hit = disc > 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t0 = (-b - sq) / (2.0 * a)
    t1 = (-b + sq) / (2.0 * a)
    t0 = np.maximum(t0, t_near)
    t1 = np.minimum(t1, t_far)
    t1 = np.where(hit, t1, t_near - 1.0)  # force empty when no real roots
    return np.stack([t0, t1], axis=-1)


def clamp_to_ground(ray: Ray, ground_z: float) -> Ray:
    """Stop descending rays at the terrain plane; ascending rays pass."""
    t_far = ray.t_far
    if ray.direction[2] < 0:
        t_hit = (ground_z - ray.origin[2]) / ray.direction[2]
        t_far = min(t_far, t_hit)
    t_near = min(ray.t_near, t_far)  # empty interval if plane is behind t_near
    return Ray(ray.origin.copy(), ray.direction.copy(), t_near, t_far)


def clamp_t_far_to_ground(origins, dirs, t_far, ground_z):
    """Vectorized ground clamp of far bounds (origins above or below plane)."""
    dz = dirs[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t_hit = (ground_z - origins[..., 2]) / dz
    return np.where(dz < 0, np.minimum(t_far, t_hit), t_far)


def fit_bounds(poses, margin: float = 0.1, ground_z: float = 0.0) -> EllipsoidBounds:
    """Ellipsoid enclosing all camera positions, extended down to the ground.

    Center is the midpoint of the positions' bounding box, with z midway
    between box top and ground_z. Radii start at box half-extents *(1+margin)
    and are inflated uniformly until every pose is strictly inside (an AABB
    corner is otherwise outside an ellipsoid with radii equal to the
    half-extents).
    """
    if len(poses) == 0:
        raise ValueError("need at least one pose")
    if margin < 0:
        raise ValueError("margin must be >= 0")
    pos = np.stack([p.position for p in poses])
    lo, hi = pos.min(axis=0), pos.max(axis=0)
    center = (lo + hi) / 2.0
    top = hi[2]
    center = np.array([center[0], center[1], (top + ground_z) / 2.0])
    half = np.maximum((hi - lo) / 2.0, 1e-3)
    half[2] = max(top - center[2], 1e-3)
    radii = half * (1.0 + margin)
    radii[2] = max(radii[2], center[2] - ground_z)  # reach the ground exactly
    s = np.linalg.norm((pos - center) / radii, axis=1).max()
    if s >= 1.0:
        radii = radii * s * (1.0 + 1e-6)
    return EllipsoidBounds(center=center, radii=radii, ground_z=ground_z)


def make_layout(bounds: EllipsoidBounds, nx: int, ny: int, overlap: float = 0.15) -> SpatialLayout:
    """Tessellate the ellipsoid's xy bounding rectangle into nx*ny cells."""
    if nx < 1 or ny < 1:
        raise ValueError("grid dimensions must be >= 1")
    hx, hy = bounds.radii[0] / nx, bounds.radii[1] / ny
    x0 = bounds.center[0] - bounds.radii[0]
    y0 = bounds.center[1] - bounds.radii[1]
    xs = x0 + (2 * np.arange(nx) + 1) * hx
    ys = y0 + (2 * np.arange(ny) + 1) * hy
    gx, gy = np.meshgrid(xs, ys)  # row-major over (iy, ix) so index = iy*nx + ix
    cz = np.full(nx * ny, bounds.center[2])
    centroids = np.stack([gx.ravel(), gy.ravel(), cz], axis=-1)
    return SpatialLayout(nx=nx, ny=ny, centroids=centroids,
                         cell_half_extents=np.array([hx, hy]), overlap=overlap)


def route_point(layout: SpatialLayout, x) -> int:
    """Index of the nearest centroid; exact ties go to the lower index."""
    return int(route_points(layout, np.asarray(x, dtype=np.float64)[None])[0])


def route_points(layout: SpatialLayout, x: np.ndarray) -> np.ndarray:
    """Vectorized nearest-centroid routing via O(1) grid arithmetic.

    Points outside the grid footprint clamp to the boundary cells. On an
    exact mid-boundary tie the lower index wins, matching a linear argmin
    scan with lowest-index tie-breaking.
    """
    x = np.asarray(x, dtype=np.float64)
    u = (x[..., 0] - layout.origin_xy[0]) / layout.spacing_xy[0]
    v = (x[..., 1] - layout.origin_xy[1]) / layout.spacing_xy[1]
    # ceil(u - 0.5) sends an exact half-way tie down to the lower cell
    ix = np.clip(np.ceil(u - 0.5), 0, layout.nx - 1).astype(np.int64)
    iy = np.clip(np.ceil(v - 0.5), 0, layout.ny - 1).astype(np.int64)
    return iy * layout.nx + ix


def to_background_coords(x, bounds: EllipsoidBounds) -> BackgroundCoord:
    """Map an exterior point to the 4D outer-volume parameterization."""
    x = np.asarray(x, dtype=np.float64).reshape(3)
    s = (x - bounds.center) / bounds.radii
    n = np.linalg.norm(s)
    if n <= 1.0:
        raise ValueError("point is inside the foreground ellipsoid")
    return BackgroundCoord(unit_dir=s / n, inv_norm=1.0 / n)


def from_background_coords(coord: BackgroundCoord, bounds: EllipsoidBounds) -> np.ndarray:
    """Inverse of to_background_coords."""
    s = coord.unit_dir / coord.inv_norm
    return s * bounds.radii + bounds.center


def quat_to_rotation(qw: float, qx: float, qy: float, qz: float) -> np.ndarray:
    """Unit quaternion (w, x, y, z) to a 3x3 rotation matrix."""
    n = np.sqrt(qw * qw + qx * qx + qy * qy + qz * qz)
    if n < 1e-12 or not np.isfinite(n):
        raise ValueError("quaternion has zero or non-finite norm")
    w, x, y, z = qw / n, qx / n, qy / n, qz / n
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def dataset_stats(dataset) -> dict:
    """Image/pixel counts: n_pixels is the plain sum of width*height."""
    n_images = len(dataset.images)
    n_pixels = int(sum(int(im.width) * int(im.height) for im in dataset.images))
    return {"n_images": n_images, "n_pixels": n_pixels}
