"""Geometry-aware partitioning of training pixels into per-submodule shards,
plus occupancy-grid pruning once a coarse model exists.

A pixel joins the shard of every cell its (clipped) ray passes through,
with cells expanded by the overlap factor; pruning later removes pixels
whose rays are blocked by solid surfaces before reaching a cell.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .geometry import (EllipsoidBounds, SpatialLayout, clamp_t_far_to_ground,
                       _ellipsoid_intervals, rays_for_pixels, route_points)


@dataclass(frozen=True)
class PixelRef:
    image_id: int
    px: int
    py: int


@dataclass
class ShardAssignment:
    """Per-submodule pixel lists, stored as (P,3) arrays of (image_id, px, py),
    sorted by (image_id, py, px)."""

    shards: list           # list of (P,3) int64 arrays
    source_dataset_id: str
    overlap: float

    @property
    def n_cells(self) -> int:
        return len(self.shards)

    def counts(self) -> list:
        return [len(s) for s in self.shards]


SHARD_MAGIC = b"MGSH"
SHARD_VERSION = 1


def save_shard(path, shard: np.ndarray, index: int):
    """Binary shard file: header then packed (image_id u32, px u16, py u16)."""
    with open(path, "wb") as f:
        f.write(SHARD_MAGIC)
        f.write(struct.pack("<IIQ", SHARD_VERSION, index, len(shard)))
        rec = np.empty(len(shard), dtype=[("id", "<u4"), ("px", "<u2"), ("py", "<u2")])
        rec["id"] = shard[:, 0]
        rec["px"] = shard[:, 1]
        rec["py"] = shard[:, 2]
        f.write(rec.tobytes())


def load_shard(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != SHARD_MAGIC:
        raise ValueError("not a shard file")
    version, index, count = struct.unpack("<IIQ", raw[4:20])
    if version != SHARD_VERSION:
        raise ValueError(f"unsupported shard version {version}")
    rec = np.frombuffer(raw, dtype=[("id", "<u4"), ("px", "<u2"), ("py", "<u2")],
                        count=count, offset=20)
    out = np.empty((count, 3), dtype=np.int64)
    out[:, 0] = rec["id"]
    out[:, 1] = rec["px"]
    out[:, 2] = rec["py"]
    return out, index


def _sorted_refs(image_id, px, py):
    order = np.lexsort((px, py, image_id))
    return np.stack([image_id[order], px[order], py[order]], axis=1).astype(np.int64)


def _ray_cell_membership(origins, dirs, t0, t1, layout, samples_per_ray, expand):
    """Boolean (R, n_cells): does any of the uniform samples on [t0, t1]
    fall inside the overlap-expanded cell?"""
    R = len(origins)
    frac = (np.arange(samples_per_ray) + 0.5) / samples_per_ray
    member = np.zeros((R, layout.n_cells), dtype=bool)
    ehx, ehy = layout.cell_half_extents * (1.0 + expand)
    valid = t1 > t0
    # chunk over samples to bound memory
    chunk = max(1, int(4e6 // max(R, 1)))
    for s0 in range(0, samples_per_ray, chunk):
        f = frac[s0:s0 + chunk]
        t = t0[:, None] + (t1 - t0)[:, None] * f[None, :]
        xs = origins[:, None, 0] + t * dirs[:, None, 0]
        ys = origins[:, None, 1] + t * dirs[:, None, 1]
        for ci, c in enumerate(layout.centroids):
            inside = (np.abs(xs - c[0]) <= ehx) & (np.abs(ys - c[1]) <= ehy)
            member[:, ci] |= inside.any(axis=1)
    member[~valid] = False
    return member


def assign_pixels(dataset: Dataset, layout: SpatialLayout, bounds: EllipsoidBounds,
                  samples_per_ray: int = 256) -> ShardAssignment:
    """Build each submodule's trainset from ray/cell intersections.

    Every pixel's ray is clipped to the foreground interval (ellipsoid and
    ground); uniform samples on the interval vote for every expanded cell
    they land in. Pixels with empty intervals join no shard.
    """
    if samples_per_ray < 2:
        raise ValueError("samples_per_ray must be >= 2")
    per_cell = [[] for _ in range(layout.n_cells)]
    for rec in dataset.images:
        pose = rec.pose
        H, W = pose.height, pose.width
        ys, xs = np.mgrid[0:H, 0:W]
        xs, ys = xs.ravel(), ys.ravel()
        o, d = rays_for_pixels(pose, xs, ys)
        iv = _ellipsoid_intervals(o, d, bounds, np.zeros(len(d)), np.full(len(d), np.inf))
        t0, t1 = iv[:, 0], iv[:, 1]
        t1 = np.minimum(t1, clamp_t_far_to_ground(o, d, t1, bounds.ground_z))
        member = _ray_cell_membership(o, d, t0, t1, layout, samples_per_ray,
                                      layout.overlap)
        for ci in range(layout.n_cells):
            m = member[:, ci]
            if m.any():
                ids = np.full(m.sum(), pose.image_id)
                per_cell[ci].append(_sorted_refs(ids, xs[m], ys[m]))
    shards = [np.concatenate(chunks) if chunks else np.empty((0, 3), dtype=np.int64)
              for chunks in per_cell]
    return ShardAssignment(shards=shards, source_dataset_id=dataset.dataset_id,
                           overlap=layout.overlap)


@dataclass
class OccupancyGrid:
    """Boolean voxelization of where model opacity exceeds the threshold."""

    resolution: tuple      # (rx, ry, rz)
    origin: np.ndarray     # (3,) lower corner
    voxel_size: np.ndarray # (3,)
    occupied: np.ndarray   # (rx, ry, rz) bool
    sigma_threshold: float

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.voxel_size = np.asarray(self.voxel_size, dtype=np.float64)
        if self.occupied.shape != tuple(self.resolution):
            raise ValueError("bitset does not match resolution")
        if not (self.voxel_size > 0).all():
            raise ValueError("voxel size must be positive")

    @property
    def upper(self) -> np.ndarray:
        return self.origin + self.voxel_size * np.asarray(self.resolution)


def build_occupancy_grid(model, layout: SpatialLayout, bounds: EllipsoidBounds,
                         resolution=(128, 128, 128), sigma_threshold: float = 1.0) -> OccupancyGrid:
    """Tabulate model opacity at voxel centers over the ellipsoid's bbox."""
    res = tuple(int(r) for r in resolution)
    lo, hi = bounds.bbox()
    size = (hi - lo) / np.asarray(res)
    centers = [lo[a] + (np.arange(res[a]) + 0.5) * size[a] for a in range(3)]
    occupied = np.zeros(res, dtype=bool)
    if np.isfinite(sigma_threshold):
        # evaluate in z-slabs to bound memory
        gx, gy = np.meshgrid(centers[0], centers[1], indexing="ij")
        dirs = np.tile(np.array([0.0, 0.0, -1.0]), (gx.size, 1))
        for iz, z in enumerate(centers[2]):
            pts = np.stack([gx.ravel(), gy.ravel(), np.full(gx.size, z)], axis=1)
            sigma, _ = model.query_fg(pts, dirs)
            occupied[:, :, iz] = (sigma > sigma_threshold).reshape(res[0], res[1])
    return OccupancyGrid(resolution=res, origin=lo, voxel_size=size,
                         occupied=occupied, sigma_threshold=sigma_threshold)


def march_first_hit(grid: OccupancyGrid, origins, dirs, t0, t1) -> np.ndarray:
    """Entry parameter of the first occupied voxel along each ray segment.

    Exact amortized DDA (every traversed voxel is visited), vectorized over
    rays in lockstep; +inf where the segment is unobstructed.
    """
    R = len(origins)
    res = np.asarray(grid.resolution)
    t_hit = np.full(R, np.inf)

    # clip [t0, t1] to the grid box
    with np.errstate(divide="ignore", invalid="ignore"):
        ta_ax = (grid.origin - origins) / dirs
        tb_ax = (grid.upper - origins) / dirs
    lo_ax = np.where(np.isnan(ta_ax), -np.inf, np.minimum(ta_ax, tb_ax))
    hi_ax = np.where(np.isnan(tb_ax), np.inf, np.maximum(ta_ax, tb_ax))
    ta = np.maximum(lo_ax.max(axis=1), t0)
    tb = np.minimum(hi_ax.min(axis=1), t1)
    active = ta < tb

    eps = 1e-9
    t_cur = ta.copy()
    pts = origins + (ta + eps)[:, None] * dirs
    vox = np.floor((pts - grid.origin) / grid.voxel_size).astype(np.int64)
    np.clip(vox, 0, res - 1, out=vox)
    step = np.sign(dirs).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv_d = 1.0 / dirs
        next_edge = grid.origin + (vox + (step > 0)) * grid.voxel_size
        t_max = (next_edge - origins) * inv_d
        t_delta = grid.voxel_size * np.abs(inv_d)
    t_max[~np.isfinite(t_max)] = np.inf
    t_delta[~np.isfinite(t_delta)] = np.inf

    max_iter = int(res.sum()) + 4
    for _ in range(max_iter):
        if not active.any():
            break
        act = np.where(active)[0]
        v = vox[act]
        occ = grid.occupied[v[:, 0], v[:, 1], v[:, 2]]
        hit = act[occ]
        t_hit[hit] = np.maximum(t_cur[hit], t0[hit])
        active[hit] = False
        mov = act[~occ]
        if not len(mov):
            break
        ax = np.argmin(t_max[mov], axis=1)
        t_cur[mov] = t_max[mov, ax]
        vox[mov, ax] += step[mov, ax]
        t_max[mov, ax] += t_delta[mov, ax]
        out = (vox[mov, ax] < 0) | (vox[mov, ax] >= res[ax]) | (t_cur[mov] > tb[mov])
        active[mov[out]] = False
    return t_hit


def prune_shards(assignment: ShardAssignment, grid: OccupancyGrid, dataset: Dataset,
                 layout: SpatialLayout, bounds: EllipsoidBounds,
                 slack: float | None = None, samples_per_ray: int = 256) -> ShardAssignment:
    """Drop pixels whose rays hit a solid surface before reaching a cell.

    A pixel stays in shard k iff the segment up to (first hit + slack)
    still touches the expanded cell. Output shards are subsets of inputs.
    """
    lo, hi = bounds.bbox()
    if (np.abs(grid.origin - lo) > 1e-6).any() or (np.abs(grid.upper - hi) > 1e-6).any():
        raise ValueError("occupancy grid does not cover this scene's bounds")
    if slack is None:
        slack = 2.0 * float(np.linalg.norm(grid.voxel_size))
    new_shards = []
    for ci in range(assignment.n_cells):
        shard = assignment.shards[ci]
        if not len(shard):
            new_shards.append(shard.copy())
            continue
        keep = np.zeros(len(shard), dtype=bool)
        for image_id in np.unique(shard[:, 0]):
            rows = np.where(shard[:, 0] == image_id)[0]
            pose = dataset.pose(int(image_id))
            px, py = shard[rows, 1], shard[rows, 2]
            o, d = rays_for_pixels(pose, px, py)
            iv = _ellipsoid_intervals(o, d, bounds, np.zeros(len(d)),
                                      np.full(len(d), np.inf))
            t0, t1 = iv[:, 0], iv[:, 1]
            t1 = np.minimum(t1, clamp_t_far_to_ground(o, d, t1, bounds.ground_z))
            t_hit = march_first_hit(grid, o, d, t0, t1)
            t_end = np.minimum(t_hit + slack, t1)
            member = _ray_cell_membership(o, d, t0, t_end, layout, samples_per_ray,
                                          layout.overlap)
            keep[rows] = member[:, ci]
        new_shards.append(shard[keep])
    return ShardAssignment(shards=new_shards, source_dataset_id=assignment.source_dataset_id,
                           overlap=assignment.overlap)


def shard_stats(assignment: ShardAssignment, dataset: Dataset) -> dict:
    """Per-shard sizes and the mean shard fraction of the dataset's pixels."""
    total = sum(r.width * r.height for r in dataset.images)
    counts = assignment.counts()
    fracs = [c / total if total else 0.0 for c in counts]
    return {
        "per_shard_pixels": counts,
        "per_shard_fraction": fracs,
        "mean_shard_fraction": float(np.mean(fracs)) if counts else 0.0,
        "total_pixels": total,
    }
