"""Dynamic octree cache for interactive rendering.

The tree stores (opacity, color, usage) payloads over the foreground bbox.
A fly-through renders an instant preview straight from the cache, then
refines: the most-viewed leaves subdivide with fresh model queries, and
guided sampling places a few samples inside occupied leaves only, skipping
empty space and terminating on accumulated transmittance. Rendering is
foreground-only; residual transmittance shows the clear color.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geometry import CameraPose, rays_for_pixels

F32 = np.float32

TAU_BAKE = 0.01     # opacity/m below which bake treats space as empty
TAU_SKIP = 0.01     # guided sampling skips leaves at or below this opacity
EPS_TERM = 1e-4     # transmittance early-exit threshold
N_SURFACE = 8       # guided samples per occupied leaf interval

DESK_OCTREE = dict(bake_depth=6, max_depth=10, max_elements=2_000_000, refine_k=4096)
PAPER_OCTREE = dict(bake_depth=8, max_depth=12, max_elements=20_000_000, refine_k=16384)


@dataclass
class FrameRequest:
    camera: CameraPose
    quality_level: int = 0
    embedding_id: Optional[int] = None

    def __post_init__(self):
        if self.quality_level < 0:
            raise ValueError("quality_level must be >= 0")


class CapacityError(RuntimeError):
    def __init__(self, needed, capacity):
        super().__init__(f"octree needs {needed} elements, capacity {capacity}")
        self.needed = needed
        self.capacity = capacity


class OctreeCache:
    """Sparse capacity-bounded octree; single writer, node arrays grow on demand."""

    def __init__(self, root_lo, root_hi, max_elements=2_000_000, max_depth=10):
        self.root_lo = np.asarray(root_lo, dtype=np.float64)
        self.root_hi = np.asarray(root_hi, dtype=np.float64)
        self.root_half = (self.root_hi - self.root_lo) / 2.0
        self.max_elements = int(max_elements)
        self.max_depth = int(max_depth)
        self.frame_counter = 0
        cap = 4096
        self.child_base = np.full(cap, -1, dtype=np.int64)
        self.parent = np.full(cap, -1, dtype=np.int64)
        self.center = np.zeros((cap, 3), dtype=np.float64)
        self.depth = np.zeros(cap, dtype=np.int16)
        self.sigma = np.zeros(cap, dtype=F32)
        self.rgb = np.zeros((cap, 3), dtype=F32)
        self.pixel_count = np.zeros(cap, dtype=np.float64)
        self.last_used = np.zeros(cap, dtype=np.int64)
        self.alive = np.zeros(cap, dtype=bool)
        self.free_blocks: list[int] = []
        self.n_nodes = 0
        self.size = 1  # high-water slot mark
        self.alive[0] = True
        self.center[0] = (self.root_lo + self.root_hi) / 2.0
        self.n_nodes = 1

    # ------------------------------------------------------------ allocation

    def _capacity_left(self) -> int:
        return self.max_elements - self.n_nodes

    def _grow(self, need_slots):
        cap = len(self.child_base)
        if self.size + need_slots <= cap:
            return
        new_cap = cap
        while new_cap < self.size + need_slots:
            new_cap *= 2
        new_cap = min(new_cap, max(self.max_elements + 8, self.size + need_slots))
        for name in ["child_base", "parent", "center", "depth", "sigma", "rgb",
                     "pixel_count", "last_used", "alive"]:
            old = getattr(self, name)
            shape = (new_cap,) + old.shape[1:]
            arr = np.zeros(shape, dtype=old.dtype)
            if name == "child_base" or name == "parent":
                arr[...] = -1
            arr[: len(old)] = old
            setattr(self, name, arr)

    def _alloc_blocks(self, n_blocks: int) -> np.ndarray:
        bases = []
        while self.free_blocks and len(bases) < n_blocks:
            bases.append(self.free_blocks.pop())
        remaining = n_blocks - len(bases)
        if remaining:
            self._grow(remaining * 8)
            fresh = self.size + 8 * np.arange(remaining)
            self.size += remaining * 8
            bases.extend(fresh.tolist())
        out = np.array(bases, dtype=np.int64)
        self.n_nodes += 8 * n_blocks
        return out

    # ------------------------------------------------------------- traversal

    def _child_offsets(self, parent_depth: int):
        """Center offsets of the 8 children of a node at parent_depth."""
        child_half = self.root_half * (0.5 ** (parent_depth + 1))
        oct_idx = np.arange(8)
        signs = np.stack([(oct_idx & 1) * 2 - 1, ((oct_idx >> 1) & 1) * 2 - 1,
                          ((oct_idx >> 2) & 1) * 2 - 1], axis=1)
        return signs * child_half

    def half_at(self, depth):
        return self.root_half * (0.5 ** np.asarray(depth, dtype=np.float64)[..., None])

    def find_leaves(self, pts: np.ndarray) -> np.ndarray:
        """Leaf index containing each point (points must be inside the root box)."""
        cur = np.zeros(len(pts), dtype=np.int64)
        for _ in range(self.max_depth + 1):
            cb = self.child_base[cur]
            m = cb >= 0
            if not m.any():
                break
            c = self.center[cur[m]]
            p = pts[m]
            octant = ((p[:, 0] > c[:, 0]).astype(np.int64)
                      + ((p[:, 1] > c[:, 1]).astype(np.int64) << 1)
                      + ((p[:, 2] > c[:, 2]).astype(np.int64) << 2))
            cur[m] = cb[m] + octant
        return cur

    def _exit_t(self, leaves, origins, dirs):
        c = self.center[leaves]
        h = self.half_at(self.depth[leaves])
        lo, hi = c - h, c + h
        with np.errstate(divide="ignore", invalid="ignore"):
            tx = np.where(dirs > 0, (hi - origins) / dirs,
                          np.where(dirs < 0, (lo - origins) / dirs, np.inf))
        tx[~np.isfinite(tx)] = np.inf
        return tx.min(axis=1)

    def _clip_root(self, origins, dirs, t_near, t_far):
        with np.errstate(divide="ignore", invalid="ignore"):
            ta_ax = (self.root_lo - origins) / dirs
            tb_ax = (self.root_hi - origins) / dirs
        lo_ax = np.where(np.isnan(ta_ax), -np.inf, np.minimum(ta_ax, tb_ax))
        hi_ax = np.where(np.isnan(tb_ax), np.inf, np.maximum(ta_ax, tb_ax))
        ta = np.maximum(lo_ax.max(axis=1), t_near)
        tb = np.minimum(hi_ax.min(axis=1), t_far)
        return ta, tb

    def traverse_ray(self, ray) -> list:
        """Ordered (leaf index, t_enter, t_exit) intervals tiling ray ∩ root box."""
        o = ray.origin[None]
        d = ray.direction[None]
        ta, tb = self._clip_root(o, d, np.array([ray.t_near]), np.array([ray.t_far]))
        out = []
        t = float(ta[0])
        end = float(tb[0])
        if not t < end:
            return out
        guard = 0
        while t < end - 1e-12:
            nudge = 1e-9 * (1.0 + abs(t))
            p = o[0] + (t + nudge) * d[0]
            leaf = int(self.find_leaves(p[None])[0])
            t_exit = float(self._exit_t(np.array([leaf]), o, d)[0])
            t_exit = min(max(t_exit, t + nudge), end)
            out.append((leaf, t, t_exit))
            t = t_exit
            guard += 1
            if guard > 8 ** 6:
                raise RuntimeError("traversal failed to make progress")
        return out

    # ------------------------------------------------------------ validation

    def validate(self):
        """Structural walk: 8 children per internal node, consistent depths
        and parents, finite payloads, within capacity."""
        assert self.alive[0], "root must be alive"
        count = 0
        stack = [0]
        while stack:
            i = stack.pop()
            count += 1
            cb = self.child_base[i]
            assert self.alive[i], f"dead node {i} reachable"
            assert self.depth[i] <= self.max_depth
            if cb >= 0:
                for j in range(8):
                    ch = cb + j
                    assert self.alive[ch], f"missing child {ch}"
                    assert self.parent[ch] == i, f"bad parent link at {ch}"
                    assert self.depth[ch] == self.depth[i] + 1
                    stack.append(ch)
        assert count == self.n_nodes, f"node count {self.n_nodes} != walked {count}"
        assert self.n_nodes <= self.max_elements
        live = self.alive[: self.size]
        assert np.isfinite(self.sigma[: self.size][live]).all()
        assert np.isfinite(self.rgb[: self.size][live]).all()
        return True


def bake_initial(model, layout, bounds, depth: int, max_elements=2_000_000,
                 max_depth=10, tau_bake=TAU_BAKE) -> OctreeCache:
    """Precompute the coarse cache: subdivide to `depth` wherever the model
    is opaque at leaf centers; fully transparent subtrees stay collapsed.

    Leaf color is evaluated at the reference view direction (world -z) with
    the zero embedding; live queries replace it during guided rendering.
    """
    if depth < 1:
        raise ValueError("depth must be >= 1")
    lo, hi = bounds.bbox()
    n = 1 << depth
    cache = OctreeCache(lo, hi, max_elements=max_elements, max_depth=max_depth)

    # opacity at every depth-`depth` leaf center, sliced along z
    centers = [lo[a] + (np.arange(n) + 0.5) * (hi[a] - lo[a]) / n for a in range(3)]
    sig_grid = np.empty((n, n, n), dtype=F32)
    gx, gy = np.meshgrid(centers[0], centers[1], indexing="ij")
    down = np.tile(np.array([0.0, 0.0, -1.0]), (gx.size, 1))
    for iz in range(n):
        pts = np.stack([gx.ravel(), gy.ravel(), np.full(gx.size, centers[2][iz])], axis=1)
        s, _ = model.query_fg(pts, down)
        sig_grid[:, :, iz] = s.reshape(n, n)
    occ = sig_grid > tau_bake

    # occupancy pyramid: occ_any[l] marks subtrees holding any occupied leaf
    occ_any = [None] * (depth + 1)
    occ_any[depth] = occ
    for l in range(depth - 1, -1, -1):
        src = occ_any[l + 1]
        m = src.shape[0] // 2
        occ_any[l] = src.reshape(m, 2, m, 2, m, 2).any(axis=(1, 3, 5))

    needed = 1
    per_level_cells = []
    for l in range(depth):
        cells = np.argwhere(occ_any[l])
        per_level_cells.append(cells)
        needed += 8 * len(cells)
    if needed > max_elements:
        raise CapacityError(needed, max_elements)

    # allocate level by level; children of subdivided cells are contiguous
    level_nodes = {(0, 0, 0): 0}  # (cx, cy, cz) at current level -> node index
    for l in range(depth):
        cells = per_level_cells[l]
        if not len(cells):
            level_nodes = {}
            break
        bases = cache._alloc_blocks(len(cells))
        parents = np.array([level_nodes[(cx, cy, cz)] for cx, cy, cz in cells],
                           dtype=np.int64)
        cache.child_base[parents] = bases
        offs = cache._child_offsets(l)
        for oct_i in range(8):
            ch = bases + oct_i
            cache.parent[ch] = parents
            cache.depth[ch] = l + 1
            cache.center[ch] = cache.center[parents] + offs[oct_i]
            cache.alive[ch] = True
        next_nodes = {}
        for row, (cx, cy, cz) in enumerate(cells):
            for oct_i in range(8):
                cell = (2 * cx + (oct_i & 1), 2 * cy + ((oct_i >> 1) & 1),
                        2 * cz + ((oct_i >> 2) & 1))
                next_nodes[cell] = int(bases[row]) + oct_i
        level_nodes = next_nodes

    # payloads for depth-`depth` leaves present in the tree
    if level_nodes:
        cells = np.array(list(level_nodes.keys()), dtype=np.int64)
        leaf_ids = np.array(list(level_nodes.values()), dtype=np.int64)
        sig_vals = sig_grid[cells[:, 0], cells[:, 1], cells[:, 2]]
        cache.sigma[leaf_ids] = sig_vals
        occ_leaf = sig_vals > tau_bake
        if occ_leaf.any():
            pts = cache.center[leaf_ids[occ_leaf]]
            down = np.tile(np.array([0.0, 0.0, -1.0]), (len(pts), 1))
            _, rgb = model.query_fg(pts, down)
            cache.rgb[leaf_ids[occ_leaf]] = rgb

    _refresh_internal_payloads(cache)
    return cache


def _refresh_internal_payloads(cache: OctreeCache):
    """Internal payload = mean of children, deepest level first."""
    live = np.where(cache.alive[: cache.size])[0]
    internal = live[cache.child_base[live] >= 0]
    for d in sorted(set(cache.depth[internal].tolist()), reverse=True):
        nodes = internal[cache.depth[internal] == d]
        cb = cache.child_base[nodes]
        ch = cb[:, None] + np.arange(8)
        cache.sigma[nodes] = cache.sigma[ch].mean(axis=1)
        cache.rgb[nodes] = cache.rgb[ch].mean(axis=1)


def _march(cache: OctreeCache, origins, dirs, t_near, t_far, visit,
           eps_term=EPS_TERM, max_iters=100_000):
    """Lockstep leaf march over a ray batch.

    `visit(rows, leaves, t_in, t_out, trans)` composites one leaf interval
    per active ray and returns the updated transmittance values.
    """
    R = len(origins)
    ta, tb = cache._clip_root(origins, dirs, t_near, t_far)
    trans = np.ones(R)
    t = ta.copy()
    active = ta < tb
    it = 0
    while active.any():
        rows = np.where(active)[0]
        nudge = 1e-9 * (1.0 + np.abs(t[rows]))
        p = origins[rows] + (t[rows] + nudge)[:, None] * dirs[rows]
        leaves = cache.find_leaves(p)
        t_exit = cache._exit_t(leaves, origins[rows], dirs[rows])
        t_exit = np.minimum(np.maximum(t_exit, t[rows] + nudge), tb[rows])
        trans[rows] = visit(rows, leaves, t[rows], t_exit, trans[rows])
        t[rows] = t_exit
        active[rows] = (t[rows] < tb[rows] - 1e-9) & (trans[rows] >= eps_term)
        it += 1
        if it > max_iters:
            raise RuntimeError("leaf march failed to terminate")
    return trans


def render_from_cache(cache: OctreeCache, request: FrameRequest,
                      eps_term=EPS_TERM):
    """Instant preview purely from cached payloads (zero model queries).

    Returns (frame, per-leaf pixel counts for this frame). Visited leaves'
    usage counters update as a side effect.
    """
    pose = request.camera
    H, W = pose.height, pose.width
    ys, xs = np.mgrid[0:H, 0:W]
    origins, dirs = rays_for_pixels(pose, xs.ravel(), ys.ravel())
    color = np.zeros((len(dirs), 3))
    visited: list[np.ndarray] = []

    def visit(rows, leaves, t_in, t_out, trans):
        sig = cache.sigma[leaves].astype(np.float64)
        alpha = -np.expm1(-sig * (t_out - t_in))
        color[rows] += (trans * alpha)[:, None] * cache.rgb[leaves]
        visited.append(leaves)
        return trans * (1.0 - alpha)

    _march(cache, origins, dirs, np.zeros(len(dirs)), np.full(len(dirs), np.inf),
           visit, eps_term)
    counts = np.zeros(0, dtype=np.int64)
    if visited:
        allv = np.concatenate(visited)
        uniq, cnt = np.unique(allv, return_counts=True)
        np.add.at(cache.pixel_count, allv, 1.0)
        cache.last_used[uniq] = cache.frame_counter
        counts = np.stack([uniq, cnt], axis=1)
    frame = np.clip(color, 0.0, 1.0).reshape(H, W, 3).astype(F32)
    return frame, counts


def refine(cache: OctreeCache, model, k: int) -> int:
    """Subdivide the k most-viewed leaves (ties to the lower index); children
    get fresh model payloads. Evicts stale subtrees first when near capacity."""
    live = np.where(cache.alive[: cache.size])[0]
    leaves = live[(cache.child_base[live] < 0) & (cache.depth[live] < cache.max_depth)
                  & (cache.pixel_count[live] > 0)]
    if not len(leaves):
        return 0
    order = np.lexsort((leaves, -cache.pixel_count[leaves]))
    chosen = leaves[order[:k]]
    need = 8 * len(chosen)
    if need > cache._capacity_left():
        protect = set(cache.parent[chosen].tolist())
        evict(cache, need - cache._capacity_left(), protect=protect)
        chosen = chosen[cache.alive[chosen] & (cache.child_base[chosen] < 0)]
        need = 8 * len(chosen)
        if need > cache._capacity_left():
            chosen = chosen[: cache._capacity_left() // 8]
    if not len(chosen):
        return 0
    bases = cache._alloc_blocks(len(chosen))
    cache.child_base[chosen] = bases
    child_half = cache.half_at(cache.depth[chosen].astype(np.int64) + 1)
    for oct_i in range(8):
        ch = bases + oct_i
        cache.parent[ch] = chosen
        cache.depth[ch] = cache.depth[chosen] + 1
        cache.alive[ch] = True
        cache.pixel_count[ch] = 0.0
        cache.last_used[ch] = cache.frame_counter
        signs = np.array([(oct_i & 1) * 2 - 1, ((oct_i >> 1) & 1) * 2 - 1,
                          ((oct_i >> 2) & 1) * 2 - 1], dtype=np.float64)
        cache.center[ch] = cache.center[chosen] + signs * child_half
    cache.pixel_count[chosen] = 0.0

    child_ids = (bases[:, None] + np.arange(8)).reshape(-1)
    pts = cache.center[child_ids]
    down = np.tile(np.array([0.0, 0.0, -1.0]), (len(pts), 1))
    sig, rgb = model.query_fg(pts, down)
    cache.sigma[child_ids] = sig
    cache.rgb[child_ids] = rgb
    return int(len(chosen))


def evict(cache: OctreeCache, needed: int, protect=frozenset()) -> int:
    """Collapse subdivided subtrees (stalest, least-viewed first) until
    `needed` slots are free. Never evicts the root."""
    freed = 0
    while cache._capacity_left() < needed:
        live = np.where(cache.alive[: cache.size])[0]
        internal = live[cache.child_base[live] >= 0]
        cb = cache.child_base[internal]
        ch = cb[:, None] + np.arange(8)
        collapsible = (cache.child_base[ch] < 0).all(axis=1)
        cand = internal[collapsible]
        cand = cand[cand != 0]
        cand = np.array([c for c in cand if c not in protect], dtype=np.int64)
        if not len(cand):
            raise CapacityError(needed, cache.max_elements)
        ch = cache.child_base[cand][:, None] + np.arange(8)
        key_used = cache.last_used[ch].max(axis=1)
        key_count = cache.pixel_count[ch].sum(axis=1)
        order = np.lexsort((cand, key_count, key_used))
        for node in cand[order]:
            if cache._capacity_left() >= needed:
                break
            _collapse(cache, int(node))
            freed += 1
    return freed


def _collapse(cache: OctreeCache, node: int):
    cb = cache.child_base[node]
    ch = cb + np.arange(8)
    cache.sigma[node] = cache.sigma[ch].mean()
    cache.rgb[node] = cache.rgb[ch].mean(axis=0)
    cache.pixel_count[node] = cache.pixel_count[ch].sum()
    cache.last_used[node] = cache.last_used[ch].max()
    cache.alive[ch] = False
    cache.child_base[ch] = -1
    cache.parent[ch] = -1
    cache.child_base[node] = -1
    cache.free_blocks.append(int(cb))
    cache.n_nodes -= 8


def guided_render(cache: OctreeCache, model, request: FrameRequest, embedding=None,
                  tau_skip=TAU_SKIP, eps_term=EPS_TERM, n_surface=N_SURFACE,
                  counter=None, diagnostics=None):
    """Render with live model queries placed only inside occupied leaves.

    Skips leaves with cached opacity <= tau_skip, composites in one pass
    with transmittance early exit, and EMA-writes queried opacity back into
    the cache (weight 0.5, one update per leaf per frame). Passing a dict
    as `diagnostics` records per-pixel weight sums and end transmittance.
    """
    pose = request.camera
    H, W = pose.height, pose.width
    ys, xs = np.mgrid[0:H, 0:W]
    origins, dirs = rays_for_pixels(pose, xs.ravel(), ys.ravel())
    color = np.zeros((len(dirs), 3))
    w_sum = np.zeros(len(dirs))
    if embedding is not None:
        embedding = np.asarray(embedding, dtype=F32)
    sig_sum = {}
    sig_cnt = {}
    touched: list[np.ndarray] = []

    def visit(rows, leaves, t_in, t_out, trans):
        touched.append(leaves)
        occ = cache.sigma[leaves] > tau_skip
        if not occ.any():
            return trans
        r = rows[occ]
        lv = leaves[occ]
        a, b = t_in[occ], t_out[occ]
        frac = (np.arange(n_surface) + 0.5) / n_surface
        t = a[:, None] + (b - a)[:, None] * frac[None, :]
        pts = origins[r][:, None, :] + t[..., None] * dirs[r][:, None, :]
        d_rep = np.repeat(dirs[r], n_surface, axis=0)
        emb_rep = None
        if embedding is not None:
            emb_rep = np.broadcast_to(embedding, (len(d_rep), len(embedding)))
        sig, rgb = model.query_fg(pts.reshape(-1, 3), d_rep, emb_rep, counter=counter)
        sig = sig.reshape(-1, n_surface).astype(np.float64)
        rgb = rgb.reshape(-1, n_surface, 3).astype(np.float64)
        delta = ((b - a) / n_surface)[:, None]
        alpha = -np.expm1(-sig * delta)
        surv = np.cumprod(1.0 - alpha, axis=1)
        before = np.concatenate([np.ones((len(alpha), 1)), surv[:, :-1]], axis=1)
        w = trans[occ][:, None] * before * alpha
        color[r] += (w[..., None] * rgb).sum(axis=1)
        w_sum[r] += w.sum(axis=1)
        new_t = trans.copy()
        new_t[occ] = trans[occ] * surv[:, -1]
        # per-leaf mean of queried opacity, merged at frame end
        mean_sig = sig.mean(axis=1)
        for leaf, ms in zip(lv, mean_sig):
            sig_sum[leaf] = sig_sum.get(leaf, 0.0) + ms
            sig_cnt[leaf] = sig_cnt.get(leaf, 0) + 1
        return new_t

    trans_end = _march(cache, origins, dirs, np.zeros(len(dirs)),
                       np.full(len(dirs), np.inf), visit, eps_term)
    if diagnostics is not None:
        diagnostics["w_sum"] = w_sum.reshape(H, W)
        diagnostics["trans_end"] = trans_end.reshape(H, W)
    if touched:
        # guided passes also count as visibility: multi-round refinement
        # within one frame keeps digging where the camera is looking
        allv = np.concatenate(touched)
        np.add.at(cache.pixel_count, allv, 1.0)
        cache.last_used[np.unique(allv)] = cache.frame_counter
    if sig_sum:
        leaves = np.array(sorted(sig_sum), dtype=np.int64)
        means = np.array([sig_sum[l] / sig_cnt[l] for l in leaves], dtype=F32)
        cache.sigma[leaves] = 0.5 * cache.sigma[leaves] + 0.5 * means
        cache.last_used[leaves] = cache.frame_counter
    frame = np.clip(color, 0.0, 1.0).reshape(H, W, 3).astype(F32)
    return frame


def render_frame(cache: OctreeCache, model, request: FrameRequest, refine_k=4096,
                 embedding=None, counter=None):
    """One interactive frame: cache-only level 0, then quality_level rounds
    of refine + guided sampling. Cache mutations persist across calls; that
    persistence is the temporal-coherence mechanism."""
    cache.frame_counter += 1
    live = cache.alive[: cache.size]
    cache.pixel_count[: cache.size][live] *= 0.5  # usage decays per frame
    frames = []
    stats = []
    t0 = time.perf_counter()
    frame0, _ = render_from_cache(cache, request)
    frames.append(frame0)
    stats.append({"level": 0, "ms": (time.perf_counter() - t0) * 1000.0,
                  "queries": 0, "nodes": cache.n_nodes})
    for level in range(1, request.quality_level + 1):
        t0 = time.perf_counter()
        c = {"queries": 0}
        refine(cache, model, refine_k)
        frames.append(guided_render(cache, model, request, embedding=embedding,
                                    counter=c))
        stats.append({"level": level, "ms": (time.perf_counter() - t0) * 1000.0,
                      "queries": c["queries"], "nodes": cache.n_nodes})
    return frames, stats


# ---------------------------------------------------------------- snapshots

OC_MAGIC = b"MGOC"
OC_VERSION = 1


def save_octree(cache: OctreeCache, path):
    """Breadth-first snapshot; bit-exact round trip at the file level."""
    order = []
    remap = {}
    queue = [0]
    while queue:
        nxt = []
        for i in queue:
            remap[i] = len(order)
            order.append(i)
        for i in queue:
            cb = cache.child_base[i]
            if cb >= 0:
                nxt.extend(range(cb, cb + 8))
        queue = nxt
    with open(path, "wb") as f:
        f.write(OC_MAGIC)
        f.write(struct.pack("<I", OC_VERSION))
        f.write(np.concatenate([cache.root_lo, cache.root_hi]).astype("<f4").tobytes())
        f.write(struct.pack("<IQ", cache.max_depth, len(order)))
        for i in order:
            cb = cache.child_base[i]
            if cb >= 0:
                f.write(struct.pack("<B", 1))
                # children are contiguous in BFS order
                f.write(struct.pack("<Q", remap[cb]))
            else:
                f.write(struct.pack("<B", 0))
                f.write(struct.pack("<5f", float(cache.sigma[i]), *cache.rgb[i],
                                    0.0))
                f.write(struct.pack("<II", min(int(cache.pixel_count[i]), 2**32 - 1),
                                    min(int(cache.last_used[i]), 2**32 - 1)))


def load_octree(path, max_elements=None) -> OctreeCache:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != OC_MAGIC:
        raise ValueError("not an octree snapshot")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != OC_VERSION:
        raise ValueError(f"unsupported octree version {version}")
    b = np.frombuffer(raw, dtype="<f4", count=6, offset=8)
    lo, hi = b[:3].astype(np.float64), b[3:].astype(np.float64)
    max_depth, count = struct.unpack("<IQ", raw[32:44])
    cache = OctreeCache(lo, hi, max_elements=max_elements or max(count * 2, 4096),
                        max_depth=max_depth)
    cache._grow(count + 8)
    pos = 44
    child_of = np.full(count, -1, dtype=np.int64)
    for i in range(count):
        flag = raw[pos]
        pos += 1
        if flag == 1:
            (cb,) = struct.unpack_from("<Q", raw, pos)
            pos += 8
            child_of[i] = cb
        else:
            sig, r, g, bl, _pad = struct.unpack_from("<5f", raw, pos)
            pos += 20
            pc, lu = struct.unpack_from("<II", raw, pos)
            pos += 8
            cache.sigma[i] = sig
            cache.rgb[i] = (r, g, bl)
            cache.pixel_count[i] = pc
            cache.last_used[i] = lu
    # rebuild structure: BFS order is already contiguous-by-level
    cache.alive[:count] = True
    cache.size = int(count)
    cache.n_nodes = int(count)
    cache.child_base[:count] = child_of
    cache.center[0] = (lo + hi) / 2.0
    cache.depth[0] = 0
    for i in range(count):
        cb = child_of[i]
        if cb >= 0:
            offs = cache._child_offsets(int(cache.depth[i]))
            for oct_i in range(8):
                ch = cb + oct_i
                cache.parent[ch] = i
                cache.depth[ch] = cache.depth[i] + 1
                cache.center[ch] = cache.center[i] + offs[oct_i]
    _refresh_internal_payloads(cache)
    return cache
