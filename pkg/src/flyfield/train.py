"""Per-submodule training with spatial data parallelism.

Each submodule owns its parameters; rays are drawn from its shard and
rendered end-to-end, with samples falling in *other* cells evaluated
against read-only snapshots that refresh at round boundaries. Rounds are
barrier-synchronized, so results are bit-identical for any worker count.
"""

from __future__ import annotations

import contextlib
import csv
import pickle
from dataclasses import dataclass, field, replace

import numpy as np

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover
    def threadpool_limits(*a, **kw):
        return contextlib.nullcontext()

from .data import Dataset
from .field import (AdamState, AppearanceTable, FieldModel, MlpGrads, adam_step,
                    encode, field_backward, field_forward, lr_schedule)
from .geometry import route_points
from .metrics import psnr
from .render import (SampleCounts, bg_start_s, bg_t_of_s, composite_backward,
                     composite_batch, fg_intervals, render_image, sample_pdf_bins,
                     stratified_1d, _bg_deltas, _deltas)

F32 = np.float32


@dataclass
class TrainConfig:
    batch_rays: int = 1024
    n_coarse_fg: int = 64
    n_fine_fg: int = 128
    n_coarse_bg: int = 32
    n_fine_bg: int = 64
    total_steps: int = 20000
    seed: int = 0
    snapshot_interval: int = 1000   # cross-cell snapshot refresh cadence
    lr_init: float = 5e-4
    lr_final: float = 5e-5
    frozen_neighbors: bool = False  # True = strict independence (no refresh)

    @property
    def counts(self) -> SampleCounts:
        return SampleCounts(self.n_coarse_fg, self.n_fine_fg,
                            self.n_coarse_bg, self.n_fine_bg)


class TrainingDiverged(RuntimeError):
    pass


def step_rng(seed: int, submodule: int, step: int) -> np.random.Generator:
    """Counter-based stream per (seed, submodule, step): deterministic under
    any scheduling or worker count."""
    return np.random.Generator(np.random.Philox(key=[seed, (submodule << 40) | step]))


@dataclass
class _DatasetArrays:
    ids: np.ndarray        # (M,)
    rot: np.ndarray        # (M,3,3)
    pos: np.ndarray        # (M,3)
    fx: float
    fy: float
    cx: float
    cy: float
    images: np.ndarray     # (M,H,W,3) float32

    @classmethod
    def from_dataset(cls, dataset: Dataset):
        recs = dataset.images
        p0 = recs[0].pose
        return cls(
            ids=np.array([r.image_id for r in recs], dtype=np.int64),
            rot=np.stack([r.pose.rotation for r in recs]),
            pos=np.stack([r.pose.position for r in recs]),
            fx=p0.fx, fy=p0.fy, cx=p0.cx, cy=p0.cy,
            images=np.stack([dataset.load_image(r.image_id) for r in recs]).astype(F32),
        )

    def index_of(self, image_ids):
        return np.searchsorted(self.ids, image_ids)


@dataclass
class _TrainContext:
    """Everything a worker needs that stays fixed across rounds."""
    data: _DatasetArrays
    shards: list                      # (P,3) int arrays, one per submodule
    layout: object
    bounds: object
    enc: object
    config: TrainConfig


@dataclass
class SubmoduleState:
    k: int
    fg: object
    bg: object
    adam_fg: AdamState
    adam_bg: AdamState
    table: AppearanceTable
    adam_table: AdamState

    @classmethod
    def fresh(cls, model: FieldModel, k: int):
        fg = model.fg_nets[k].copy()
        bg = model.bg_nets[k].copy()
        table = model.appearance.copy()
        return cls(k=k, fg=fg, bg=bg,
                   adam_fg=AdamState.for_arrays(fg.arrays()),
                   adam_bg=AdamState.for_arrays(bg.arrays()),
                   table=table,
                   adam_table=AdamState.for_arrays([table.vectors]))


class _ChunkedGraph:
    """Forward pass in cache-friendly chunks, retaining per-chunk caches so
    the backward pass can stream the same way."""

    def __init__(self, net, enc_x, enc_d, emb, chunk=8192):
        self.net = net
        self.chunk = chunk
        self.n = len(enc_x)
        self.caches = []
        dt = net.trunk_w[0].dtype
        self.sigma = np.empty(self.n, dtype=dt)
        self.rgb = np.empty((self.n, 3), dtype=dt)
        for i in range(0, self.n, chunk):
            s = slice(i, min(self.n, i + chunk))
            sg, cg, cache = field_forward(net, enc_x[s], enc_d[s], emb[s], want_cache=True)
            self.sigma[s] = sg
            self.rgb[s] = cg
            self.caches.append((s, cache))

    def backward(self, d_sigma, d_rgb):
        total = None
        d_emb = np.empty((self.n, self.net.embedding_dim), dtype=self.sigma.dtype)
        for s, cache in self.caches:
            grads, de = field_backward(self.net, cache, d_sigma[s], d_rgb[s])
            d_emb[s] = de
            if total is None:
                total = grads
            else:
                for a, b in zip(total.arrays, grads.arrays):
                    a += b
        if total is None:
            total = MlpGrads.zeros_like(self.net)
        return total, d_emb


def _eval_mixed(net_own, snapshot_nets, k, cells, enc_x, enc_d, emb, with_graph=True):
    """Evaluate points: own-cell through the live net (with graph), the rest
    through frozen snapshots. Returns (sigma, rgb, graph, own_mask)."""
    n = len(enc_x)
    dt = enc_x.dtype
    sigma = np.empty(n, dtype=dt)
    rgb = np.empty((n, 3), dtype=dt)
    own = cells == k
    graph = None
    if own.any():
        if with_graph:
            graph = _ChunkedGraph(net_own, enc_x[own], enc_d[own], emb[own])
            sigma[own], rgb[own] = graph.sigma, graph.rgb
        else:
            sg, cg = field_forward(net_own, enc_x[own], enc_d[own], emb[own])
            sigma[own], rgb[own] = sg, cg
    for j in np.unique(cells[~own]):
        m = cells == j
        sg, cg = field_forward(snapshot_nets[j], enc_x[m], enc_d[m], emb[m])
        sigma[m], rgb[m] = sg, cg
    return sigma, rgb, graph, own


def _train_step(ctx: _TrainContext, state: SubmoduleState, snap_fg, snap_bg, step: int):
    cfg = ctx.config
    loss, g_fg, g_bg, g_table = _forward_backward(ctx, state, snap_fg, snap_bg, step)
    lr = lr_schedule(step, cfg.total_steps, cfg.lr_init, cfg.lr_final)
    ok = adam_step(state.adam_fg, state.fg.arrays(), g_fg.arrays, lr)
    ok &= adam_step(state.adam_bg, state.bg.arrays(), g_bg.arrays, lr)
    if g_table is not None:
        ok &= adam_step(state.adam_table, [state.table.vectors], [g_table], lr)
    if not ok:
        raise TrainingDiverged(f"submodule {state.k}: non-finite gradients at step {step}")
    return loss, lr


def _forward_backward(ctx: _TrainContext, state: SubmoduleState, snap_fg, snap_bg,
                      step: int, want_grads: bool = True):
    cfg = ctx.config
    k = state.k
    rng = step_rng(cfg.seed, k, step)
    shard = ctx.shards[k]
    B = cfg.batch_rays
    sel = rng.integers(0, len(shard), size=B)
    img_idx = ctx.data.index_of(shard[sel, 0])
    px, py = shard[sel, 1], shard[sel, 2]
    gt = ctx.data.images[img_idx, py, px].astype(np.float64)

    origins = ctx.data.pos[img_idx]
    d_cam = np.stack([(px + 0.5 - ctx.data.cx) / ctx.data.fx,
                      (py + 0.5 - ctx.data.cy) / ctx.data.fy,
                      -np.ones(B)], axis=1)
    dirs = np.einsum("bij,bj->bi", ctx.data.rot[img_idx], d_cam)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)

    dt = state.fg.trunk_w[0].dtype
    enc_d_ray = encode(dirs.astype(dt), ctx.enc.L_dir)
    E = state.fg.embedding_dim
    if E:
        emb_rows = state.table.rows_for(shard[sel, 0])
        emb_ray = state.table.vectors[emb_rows].astype(dt, copy=False)
    else:
        emb_rows = None
        emb_ray = np.zeros((B, 0), dtype=dt)

    t0, t1, exited = fg_intervals(ctx.bounds, origins, dirs, np.zeros(B), np.full(B, np.inf))
    fg_hit = t1 > t0
    t1c = np.where(fg_hit, t1, t0)  # degenerate rays collapse to zero-length

    nc, nf = cfg.n_coarse_fg, cfg.n_fine_fg
    t_c = stratified_1d(t0, t1c, nc, rng)
    sig_c, rgb_c, graph_c, own_c = _eval_fg(ctx, state, snap_fg, origins, dirs, t_c,
                                            enc_d_ray, emb_ray)
    d_c = _deltas(t_c, t1c)
    _, w_c, _, _ = composite_batch(sig_c, rgb_c, d_c)

    t_f = sample_pdf_bins(t0, t1c, w_c, nf, rng)
    sig_f, rgb_f, graph_f, own_f = _eval_fg(ctx, state, snap_fg, origins, dirs, t_f,
                                            enc_d_ray, emb_ray)

    t_all = np.concatenate([t_c, t_f], axis=1)
    order = np.argsort(t_all, axis=1, kind="stable")
    t_u = np.take_along_axis(t_all, order, axis=1)
    sig_u = np.take_along_axis(np.concatenate([sig_c, sig_f], axis=1), order, axis=1)
    rgb_u = np.take_along_axis(np.concatenate([rgb_c, rgb_f], axis=1), order[..., None], axis=1)
    d_u = _deltas(t_u, t1c)
    d_u[~fg_hit] = 1e-12
    c_fg, w_u, te_fg, _ = composite_batch(sig_u, rgb_u, d_u)

    # background (two-stage, uniform in inverse norm); rays whose foreground
    # is already opaque contribute < 1e-4 and are gated out
    s_start, (aq, bq, cq) = bg_start_s(ctx.bounds, origins, dirs, np.zeros(B), fg_hit, exited)
    from .render import S_FLOOR
    u_c = stratified_1d(np.zeros(B), np.maximum(s_start - S_FLOOR, 1e-9), cfg.n_coarse_bg, rng)
    bgm = (s_start > 0) & (te_fg > 1e-4)
    bg_parts = None
    c_bg = np.zeros((B, 3))
    te_bg = np.ones(B)
    if bgm.any():
        s_c = s_start[bgm][:, None] - u_c[bgm]
        sig_bc, rgb_bc, g_bc, own_bc, route_bc = _eval_bg(ctx, state, snap_bg, origins[bgm],
                                                          dirs[bgm], aq[bgm], bq[bgm], cq[bgm],
                                                          s_c, enc_d_ray[bgm], emb_ray[bgm])
        t_bc = bg_t_of_s(aq[bgm], bq[bgm], cq[bgm], s_c)
        d_bc = _bg_deltas(aq[bgm], bq[bgm], cq[bgm], t_bc, s_c)
        _, w_bc, _, _ = composite_batch(sig_bc, rgb_bc, d_bc)
        u_f = sample_pdf_bins(np.zeros(B), np.maximum(s_start - S_FLOOR, 1e-9),
                              _scatter_rows(w_bc, bgm, B), cfg.n_fine_bg, rng)
        s_f = s_start[bgm][:, None] - u_f[bgm]
        sig_bf, rgb_bf, g_bf, own_bf, route_bf = _eval_bg(ctx, state, snap_bg, origins[bgm],
                                                          dirs[bgm], aq[bgm], bq[bgm], cq[bgm],
                                                          s_f, enc_d_ray[bgm], emb_ray[bgm])
        s_all = np.concatenate([s_c, s_f], axis=1)
        order_b = np.argsort(-s_all, axis=1, kind="stable")
        s_u = np.take_along_axis(s_all, order_b, axis=1)
        sig_bu = np.take_along_axis(np.concatenate([sig_bc, sig_bf], axis=1), order_b, axis=1)
        rgb_bu = np.take_along_axis(np.concatenate([rgb_bc, rgb_bf], axis=1),
                                    order_b[..., None], axis=1)
        t_bu = bg_t_of_s(aq[bgm], bq[bgm], cq[bgm], s_u)
        d_bu = _bg_deltas(aq[bgm], bq[bgm], cq[bgm], t_bu, s_u)
        cb, w_bu, tb, _ = composite_batch(sig_bu, rgb_bu, d_bu)
        c_bg[bgm] = cb
        te_bg[bgm] = tb
        bg_parts = (order_b, sig_bu, rgb_bu, d_bu, w_bu, tb, g_bc, own_bc, g_bf, own_bf)

    color = c_fg + te_fg[:, None] * c_bg
    err = color - gt
    loss = float((err ** 2).sum(axis=1).mean())
    if not np.isfinite(loss):
        raise TrainingDiverged(f"submodule {k} diverged at step {step}: loss={loss}")
    if not want_grads:
        return loss, None, None, None

    dC = (2.0 / B) * err
    d_te_fg = (dC * c_bg).sum(axis=1)

    g_fg = MlpGrads.zeros_like(state.fg)
    g_bg = MlpGrads.zeros_like(state.bg)
    g_table = np.zeros(state.table.vectors.shape, dtype=dt) if E else None

    # foreground backward
    d_sig_u, d_rgb_u = composite_backward(sig_u, d_u, rgb_u, w_u, te_fg, dC, d_te_fg)
    d_sig = np.empty_like(d_sig_u)
    d_rgb = np.empty_like(d_rgb_u)
    np.put_along_axis(d_sig, order, d_sig_u, axis=1)
    np.put_along_axis(d_rgb, order[..., None], d_rgb_u, axis=1)
    _accumulate(graph_c, own_c, d_sig[:, :nc], d_rgb[:, :nc], g_fg, g_table, emb_rows, nc)
    _accumulate(graph_f, own_f, d_sig[:, nc:], d_rgb[:, nc:], g_fg, g_table, emb_rows, nf)

    # background backward
    if bg_parts is not None:
        (order_b, sig_bu, rgb_bu, d_bu, w_bu, tb, g_bc, own_bc, g_bf, own_bf) = bg_parts
        d_cbg = te_fg[bgm, None] * dC[bgm]
        ds_bu, dr_bu = composite_backward(sig_bu, d_bu, rgb_bu, w_bu, tb, d_cbg, None)
        ds = np.empty_like(ds_bu)
        dr = np.empty_like(dr_bu)
        np.put_along_axis(ds, order_b, ds_bu, axis=1)
        np.put_along_axis(dr, order_b[..., None], dr_bu, axis=1)
        nbc = cfg.n_coarse_bg
        rows_bg = emb_rows[bgm] if E else None
        _accumulate(g_bc, own_bc, ds[:, :nbc], dr[:, :nbc], g_bg, g_table, rows_bg, nbc)
        _accumulate(g_bf, own_bf, ds[:, nbc:], dr[:, nbc:], g_bg, g_table, rows_bg,
                    cfg.n_fine_bg)
    return loss, g_fg, g_bg, g_table


def _scatter_rows(values, mask, n_rows):
    out = np.zeros((n_rows,) + values.shape[1:], dtype=values.dtype)
    out[mask] = values
    return out


def _eval_fg(ctx, state, snap_fg, origins, dirs, t, enc_d_ray, emb_ray):
    B, n = t.shape
    dt = enc_d_ray.dtype
    pos = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    flat = pos.reshape(-1, 3)
    cells = route_points(ctx.layout, flat)
    enc_x = encode(((flat - ctx.bounds.center) / ctx.bounds.radii).astype(dt), ctx.enc.L_pos)
    enc_d = np.repeat(enc_d_ray, n, axis=0)
    emb = np.repeat(emb_ray, n, axis=0)
    sigma, rgb, graph, own = _eval_mixed(state.fg, snap_fg, state.k, cells, enc_x, enc_d, emb)
    return sigma.reshape(B, n), rgb.reshape(B, n, 3), graph, own


def _eval_bg(ctx, state, snap_bg, origins, dirs, aq, bq, cq, s, enc_d_ray, emb_ray):
    B, n = s.shape
    dt = enc_d_ray.dtype
    t = bg_t_of_s(aq, bq, cq, s)
    pts = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    flat = pts.reshape(-1, 3)
    sp = (flat - ctx.bounds.center) / ctx.bounds.radii
    norm = np.linalg.norm(sp, axis=-1, keepdims=True)
    unit = sp / np.maximum(norm, 1e-12)
    coords4 = np.concatenate([unit, s.reshape(-1, 1)], axis=-1).astype(dt)
    cells = route_points(ctx.layout, flat)
    enc_x = encode(coords4, ctx.enc.L_pos)
    enc_d = np.repeat(enc_d_ray, n, axis=0)
    emb = np.repeat(emb_ray, n, axis=0)
    sigma, rgb, graph, own = _eval_mixed(state.bg, snap_bg, state.k, cells, enc_x, enc_d, emb)
    return sigma.reshape(B, n), rgb.reshape(B, n, 3), graph, own, cells


def _accumulate(graph, own_mask, d_sig, d_rgb, g_net, g_table, emb_rows, n_per_ray):
    """Backward one evaluation pass: own-cell samples feed the live net."""
    if graph is None:
        return
    dt = graph.sigma.dtype
    ds = np.ascontiguousarray(d_sig, dtype=dt).reshape(-1)[own_mask]
    dr = np.ascontiguousarray(d_rgb, dtype=dt).reshape(-1, 3)[own_mask]
    grads, d_emb = graph.backward(ds, dr)
    for a, b in zip(g_net.arrays, grads.arrays):
        a += b
    if g_table is not None and emb_rows is not None:
        rows = np.repeat(emb_rows, n_per_ray)[own_mask]
        np.add.at(g_table, rows, d_emb)


def run_steps(ctx: _TrainContext, state: SubmoduleState, snap_fg, snap_bg,
              start: int, stop: int):
    trace = []
    # single-threaded BLAS wins at these GEMM shapes; worker processes
    # provide the parallelism (results are thread-count invariant anyway)
    with threadpool_limits(limits=1, user_api="blas"):
        for step in range(start, stop):
            loss, lr = _train_step(ctx, state, snap_fg, snap_bg, step)
            trace.append((step, lr, loss))
    return trace


# ------------------------------------------------------------- orchestration

_WORKER_CTX = {}


def _init_worker(ctx_bytes):
    _WORKER_CTX["ctx"] = pickle.loads(ctx_bytes)


def _round_task(args):
    k, state_bytes, snap_bytes, start, stop = args
    ctx = _WORKER_CTX["ctx"]
    state = pickle.loads(state_bytes)
    snap_fg, snap_bg = pickle.loads(snap_bytes)
    table_before = state.table.vectors.copy()
    trace = run_steps(ctx, state, snap_fg, snap_bg, start, stop)
    delta = state.table.vectors - table_before
    return k, pickle.dumps(state), delta, trace


def train_submodule(shard, dataset: Dataset, model: FieldModel, k: int,
                    config: TrainConfig):
    """Train one submodule against its shard; other submodules stay frozen
    at their current values. Returns (state, trace)."""
    if not len(shard):
        raise ValueError("empty shard")
    ctx = _TrainContext(data=_DatasetArrays.from_dataset(dataset),
                        shards=[shard if i == k else np.empty((0, 3), np.int64)
                                for i in range(model.layout.n_cells)],
                        layout=model.layout, bounds=model.bounds, enc=model.enc,
                        config=config)
    state = SubmoduleState.fresh(model, k)
    snap_fg, snap_bg = model.snapshot_nets()
    trace = run_steps(ctx, state, snap_fg, snap_bg, 0, config.total_steps)
    return state, trace


def train_all(shards, dataset: Dataset, model: FieldModel, config: TrainConfig,
              workers: int = 1, start_step: int = 0, round_hook=None,
              trace_path=None) -> FieldModel:
    """Train all submodules in barrier-synchronized rounds.

    round_hook(model, next_step) runs between rounds (evaluation, early
    stop): returning True ends training after the current round. The result
    is bit-identical for any `workers` given the same config.
    """
    K = model.layout.n_cells
    if len(shards) != K:
        raise ValueError("need one shard per submodule")
    for k in range(K):
        if not len(shards[k]):
            raise ValueError(f"shard {k} is empty")
    ctx = _TrainContext(data=_DatasetArrays.from_dataset(dataset), shards=list(shards),
                        layout=model.layout, bounds=model.bounds, enc=model.enc,
                        config=config)
    states = [SubmoduleState.fresh(model, k) for k in range(K)]
    traces = [[] for _ in range(K)]

    pool = None
    if workers > 1:
        import multiprocessing as mp
        pool = mp.get_context("spawn").Pool(min(workers, K), initializer=_init_worker,
                                            initargs=(pickle.dumps(ctx),))
    try:
        step = start_step
        frozen_snap = model.snapshot_nets() if config.frozen_neighbors else None
        while step < config.total_steps:
            stop = min(step + config.snapshot_interval, config.total_steps)
            snap = frozen_snap or ([s.fg for s in states], [s.bg for s in states])
            snap_bytes = pickle.dumps(snap)
            tasks = [(k, pickle.dumps(states[k]), snap_bytes, step, stop)
                     for k in range(K)]
            if pool is not None:
                results = pool.map(_round_task, tasks)
            else:
                _WORKER_CTX["ctx"] = ctx
                results = [_round_task(t) for t in tasks]
            results.sort(key=lambda r: r[0])
            table = states[0].table.vectors.copy() if states else None
            for k, state_bytes, delta, trace in results:
                states[k] = pickle.loads(state_bytes)
                traces[k].extend(trace)
                if table is not None:
                    table += delta
            # shared appearance table: merge deltas deterministically
            for s in states:
                s.table.vectors[...] = table
            _sync_model(model, states, table)
            step = stop
            if round_hook is not None and round_hook(model, step):
                break
    finally:
        if pool is not None:
            pool.close()
            pool.join()
    if trace_path is not None:
        write_trace(trace_path, traces)
    model.traces = traces
    return model


def _sync_model(model: FieldModel, states, table):
    for k, s in enumerate(states):
        model.fg_nets[k] = s.fg
        model.bg_nets[k] = s.bg
    model.appearance.vectors[...] = table


def write_trace(path, traces, psnr_rows=None):
    """CSV trace: step, lr, loss (mean over submodules), psnr_val."""
    by_step = {}
    for trace in traces:
        for step, lr, loss in trace:
            by_step.setdefault(step, [lr, []])[1].append(loss)
    psnr_rows = psnr_rows or {}
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "lr", "loss", "psnr_val"])
        for step in sorted(by_step):
            lr, losses = by_step[step]
            w.writerow([step, f"{lr:.8g}", f"{float(np.mean(losses)):.8g}",
                        psnr_rows.get(step, "")])


def eval_psnr(model: FieldModel, dataset: Dataset, image_ids, counts: SampleCounts,
              stride: int = 1, use_table: bool = True) -> dict:
    """Mean held-out PSNR (deterministic midpoint sampling).

    stride > 1 renders every stride-th pixel only: a cheap progress probe.
    """
    from .geometry import rays_for_pixels
    from .render import render_rays

    scores = {}
    for image_id in image_ids:
        pose = dataset.pose(image_id)
        gt = dataset.load_image(image_id)
        emb = None
        if use_table and model.embedding_dim:
            emb = model.appearance.lookup([image_id])[0]
        if stride == 1:
            img = render_image(model, pose, counts, embedding=emb)
            scores[image_id] = psnr(img, gt)
            continue
        ys, xs = np.mgrid[0:pose.height:stride, 0:pose.width:stride]
        o, d = rays_for_pixels(pose, xs.ravel(), ys.ravel())
        embs = None
        if emb is not None:
            embs = np.broadcast_to(emb, (len(o), len(emb)))
        out = render_rays(model, o, d, 0.0, np.inf, counts, embeddings=embs)
        img = out["color"].reshape(xs.shape + (3,)).astype(F32)
        scores[image_id] = psnr(img, gt[::stride, ::stride])
    vals = list(scores.values())
    return {"per_image": scores, "mean": float(np.mean(vals)) if vals else float("nan")}


def optimize_embedding(model: FieldModel, dataset: Dataset, image_id: int,
                       pixel_mask: np.ndarray, iters: int, counts: SampleCounts,
                       batch: int = 256, lr: float = 5e-3, seed: int = 0) -> np.ndarray:
    """Gradient-descend one appearance embedding with all weights frozen.

    pixel_mask (H,W) selects the pixels whose photometric loss is optimized.
    """
    if not pixel_mask.any():
        raise ValueError("empty pixel mask")
    E = model.embedding_dim
    emb = model.appearance.lookup([image_id])[0].copy()
    if iters <= 0:
        return emb
    pose = dataset.pose(image_id)
    gt_full = dataset.load_image(image_id)
    ys, xs = np.nonzero(pixel_mask)
    state = AdamState.for_arrays([emb])
    from .geometry import rays_for_pixels
    for it in range(iters):
        rng = step_rng(seed, 1 << 20, it)
        pick = rng.integers(0, len(xs), size=min(batch, len(xs)))
        px, py = xs[pick], ys[pick]
        o, d = rays_for_pixels(pose, px, py)
        gt = gt_full[py, px].astype(np.float64)
        g_emb, loss = _embedding_grad(model, o, d, emb, gt, counts, rng)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"embedding optimization diverged at iter {it}")
        adam_step(state, [emb], [g_emb], lr)
    return emb


def _embedding_grad(model: FieldModel, origins, dirs, emb, gt, counts, rng):
    """Photometric loss gradient wrt a single shared embedding vector.

    All networks are frozen; every sample (foreground and background,
    whichever cell it routes to) contributes its embedding gradient.
    """
    B = len(origins)
    enc_d_ray = encode(dirs.astype(F32), model.enc.L_dir)
    emb_ray = np.broadcast_to(emb.astype(F32), (B, len(emb)))
    t0, t1, exited = fg_intervals(model.bounds, origins, dirs, np.zeros(B),
                                  np.full(B, np.inf))
    fg_hit = t1 > t0
    t1c = np.where(fg_hit, t1, t0)
    nc, nf = counts.n_coarse_fg, counts.n_fine_fg

    def eval_all(nets, enc_x, enc_d, emb_in, cells):
        n = len(enc_x)
        sigma = np.empty(n, dtype=F32)
        rgb = np.empty((n, 3), dtype=F32)
        graphs = []
        for j in np.unique(cells):
            m = cells == j
            g = _ChunkedGraph(nets[j], enc_x[m], enc_d[m], emb_in[m])
            sigma[m], rgb[m] = g.sigma, g.rgb
            graphs.append((m, g))
        return sigma, rgb, graphs

    def fg_pass(t):
        n = t.shape[1]
        pos = origins[:, None, :] + t[..., None] * dirs[:, None, :]
        flat = pos.reshape(-1, 3)
        cells = route_points(model.layout, flat)
        enc_x = encode(model.normalize_fg(flat), model.enc.L_pos)
        enc_d = np.repeat(enc_d_ray, n, axis=0)
        emb_in = np.repeat(emb_ray, n, axis=0)
        sigma, rgb, graphs = eval_all(model.fg_nets, enc_x, enc_d, emb_in, cells)
        return sigma.reshape(-1, n), rgb.reshape(-1, n, 3), graphs

    t_c = stratified_1d(t0, t1c, nc, rng)
    sig_c, rgb_c, graphs_c = fg_pass(t_c)
    d_c = _deltas(t_c, t1c)
    _, w_c, _, _ = composite_batch(sig_c, rgb_c, d_c)
    t_f = sample_pdf_bins(t0, t1c, w_c, nf, rng)
    sig_f, rgb_f, graphs_f = fg_pass(t_f)
    t_all = np.concatenate([t_c, t_f], axis=1)
    order = np.argsort(t_all, axis=1, kind="stable")
    t_u = np.take_along_axis(t_all, order, axis=1)
    sig_u = np.take_along_axis(np.concatenate([sig_c, sig_f], axis=1), order, axis=1)
    rgb_u = np.take_along_axis(np.concatenate([rgb_c, rgb_f], axis=1), order[..., None], axis=1)
    d_u = _deltas(t_u, t1c)
    d_u[~fg_hit] = 1e-12
    c_fg, w_u, te_fg, _ = composite_batch(sig_u, rgb_u, d_u)

    # background forward + graphs (uniform in inverse norm, same as training)
    s_start, (aq, bq, cq) = bg_start_s(model.bounds, origins, dirs, np.zeros(B),
                                       fg_hit, exited)
    from .render import S_FLOOR
    u_c = stratified_1d(np.zeros(B), np.maximum(s_start - S_FLOOR, 1e-9),
                        counts.n_coarse_bg, rng)
    bgm = s_start > 0
    c_bg = np.zeros((B, 3))
    bg_parts = None
    if bgm.any():
        def bg_pass(s):
            n = s.shape[1]
            t = bg_t_of_s(aq[bgm], bq[bgm], cq[bgm], s)
            pts = origins[bgm][:, None, :] + t[..., None] * dirs[bgm][:, None, :]
            flat = pts.reshape(-1, 3)
            sp = (flat - model.bounds.center) / model.bounds.radii
            nrm = np.linalg.norm(sp, axis=-1, keepdims=True)
            coords4 = np.concatenate([sp / np.maximum(nrm, 1e-12),
                                      s.reshape(-1, 1)], axis=-1).astype(F32)
            cells = route_points(model.layout, flat)
            enc_x = encode(coords4, model.enc.L_pos)
            enc_d = np.repeat(enc_d_ray[bgm], n, axis=0)
            emb_in = np.repeat(emb_ray[bgm], n, axis=0)
            sigma, rgb, graphs = eval_all(model.bg_nets, enc_x, enc_d, emb_in, cells)
            return sigma.reshape(-1, n), rgb.reshape(-1, n, 3), graphs, t

        s_c = s_start[bgm][:, None] - u_c[bgm]
        sig_bc, rgb_bc, graphs_bc, t_bc = bg_pass(s_c)
        d_bc = _bg_deltas(aq[bgm], bq[bgm], cq[bgm], t_bc, s_c)
        _, w_bc, _, _ = composite_batch(sig_bc, rgb_bc, d_bc)
        u_f = sample_pdf_bins(np.zeros(B), np.maximum(s_start - S_FLOOR, 1e-9),
                              _scatter_rows(w_bc, bgm, B), counts.n_fine_bg, rng)
        s_f = s_start[bgm][:, None] - u_f[bgm]
        sig_bf, rgb_bf, graphs_bf, _ = bg_pass(s_f)
        s_all = np.concatenate([s_c, s_f], axis=1)
        order_b = np.argsort(-s_all, axis=1, kind="stable")
        s_u = np.take_along_axis(s_all, order_b, axis=1)
        sig_bu = np.take_along_axis(np.concatenate([sig_bc, sig_bf], axis=1), order_b, axis=1)
        rgb_bu = np.take_along_axis(np.concatenate([rgb_bc, rgb_bf], axis=1),
                                    order_b[..., None], axis=1)
        t_bu = bg_t_of_s(aq[bgm], bq[bgm], cq[bgm], s_u)
        d_bu = _bg_deltas(aq[bgm], bq[bgm], cq[bgm], t_bu, s_u)
        cb, w_bu, tb, _ = composite_batch(sig_bu, rgb_bu, d_bu)
        c_bg[bgm] = cb
        bg_parts = (order_b, sig_bu, rgb_bu, d_bu, w_bu, tb, graphs_bc, graphs_bf)

    color = c_fg + te_fg[:, None] * c_bg
    err = color - gt
    loss = float((err ** 2).sum(axis=1).mean())
    dC = (2.0 / B) * err
    d_te_fg = (dC * c_bg).sum(axis=1)
    d_sig_u, d_rgb_u = composite_backward(sig_u, d_u, rgb_u, w_u, te_fg, dC, d_te_fg)
    d_sig = np.empty_like(d_sig_u)
    d_rgb = np.empty_like(d_rgb_u)
    np.put_along_axis(d_sig, order, d_sig_u, axis=1)
    np.put_along_axis(d_rgb, order[..., None], d_rgb_u, axis=1)

    g_emb = np.zeros(len(emb))
    for (graphs, ds, dr) in [(graphs_c, d_sig[:, :nc], d_rgb[:, :nc]),
                             (graphs_f, d_sig[:, nc:], d_rgb[:, nc:])]:
        dsf = np.ascontiguousarray(ds, F32).reshape(-1)
        drf = np.ascontiguousarray(dr, F32).reshape(-1, 3)
        for m, g in graphs:
            _, d_emb = g.backward(dsf[m], drf[m])
            g_emb += d_emb.sum(axis=0)

    if bg_parts is not None:
        order_b, sig_bu, rgb_bu, d_bu, w_bu, tb, graphs_bc, graphs_bf = bg_parts
        d_cbg = te_fg[bgm, None] * dC[bgm]
        ds_bu, dr_bu = composite_backward(sig_bu, d_bu, rgb_bu, w_bu, tb, d_cbg, None)
        ds = np.empty_like(ds_bu)
        dr = np.empty_like(dr_bu)
        np.put_along_axis(ds, order_b, ds_bu, axis=1)
        np.put_along_axis(dr, order_b[..., None], dr_bu, axis=1)
        nbc = counts.n_coarse_bg
        for (graphs, dss, drr) in [(graphs_bc, ds[:, :nbc], dr[:, :nbc]),
                                   (graphs_bf, ds[:, nbc:], dr[:, nbc:])]:
            dsf = np.ascontiguousarray(dss, F32).reshape(-1)
            drf = np.ascontiguousarray(drr, F32).reshape(-1, 3)
            for m, g in graphs:
                _, d_emb = g.backward(dsf[m], drf[m])
                g_emb += d_emb.sum(axis=0)
    return g_emb.astype(F32), loss
