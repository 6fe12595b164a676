"""Ray sampling, quadrature compositing and full-model rendering.

All sampling/compositing primitives come in batched array form (used by the
training loop with gradients, and by evaluation without); the per-ray
wrappers mirror them for direct use and testing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .field import FieldModel
from .geometry import (EllipsoidBounds, Ray, _ellipsoid_intervals,
                       clamp_t_far_to_ground)

F32 = np.float32

S_FLOOR = 0.02  # background inverse-norm floor: ~50x the ellipsoid radius


@dataclass
class SamplePoints:
    t_values: np.ndarray   # (S,) strictly increasing
    positions: np.ndarray  # (S,3)
    deltas: np.ndarray     # (S,) > 0, terminal delta closes the interval
    interval: tuple = (0.0, 0.0)

    def __len__(self):
        return len(self.t_values)


@dataclass
class CompositeResult:
    color: np.ndarray             # (3,)
    weights: np.ndarray           # (S,)
    transmittance_end: float
    depth: float


def stratified_1d(lo, hi, n: int, rng=None) -> np.ndarray:
    """One draw per equal stratum of [lo, hi]; midpoints when rng is None.

    lo/hi may be scalars or (R,) arrays; returns (..., n).
    """
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    shape = lo.shape + (n,)
    if rng is None:
        u = np.full(shape, 0.5)
    else:
        u = rng.random(shape)
    k = np.arange(n)
    return lo[..., None] + (k + u) / n * (hi - lo)[..., None]


def sample_pdf_bins(lo, hi, weights, n: int, rng=None, floor=1e-5) -> np.ndarray:
    """Inverse-CDF draws from a piecewise-constant pdf over equal bins of [lo, hi].

    weights (..., B) >= 0 get a small floor per bin so an all-zero row falls
    back to uniform. Returns (..., n) draws, unsorted.
    """
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64) + floor
    B = w.shape[-1]
    cdf = np.cumsum(w, axis=-1)
    cdf /= cdf[..., -1:]
    if rng is None:
        u = np.broadcast_to((np.arange(n) + 0.5) / n, lo.shape + (n,)).copy()
    else:
        u = rng.random(lo.shape + (n,))
    # searchsorted over all rows at once: offset each row by 2 so the
    # flattened cdf stays strictly increasing (values live in [0, 1])
    if cdf.ndim == 2:
        R = cdf.shape[0]
        off = 2.0 * np.arange(R)[:, None]
        flat_idx = np.searchsorted((cdf + off).ravel(), (u + off).ravel(), side="left")
        idx = flat_idx.reshape(u.shape) - np.arange(R)[:, None] * B
    else:
        idx = np.searchsorted(cdf, u, side="left")
    idx = np.clip(idx, 0, B - 1)
    cdf_lo = np.where(idx > 0, np.take_along_axis(cdf, np.maximum(idx - 1, 0), axis=-1), 0.0)
    p = np.take_along_axis(cdf, idx, axis=-1) - cdf_lo
    frac_in_bin = np.where(p > 0, (u - cdf_lo) / np.where(p > 0, p, 1.0), 0.5)
    bin_w = (hi - lo)[..., None] / B
    return lo[..., None] + (idx + frac_in_bin) * bin_w


def composite_batch(sigmas, colors, deltas):
    """Quadrature compositing over (R, S) samples.

    Returns (color (R,3), weights (R,S), trans_end (R,), depth (R,)) with
    w_i = T_i (1 - exp(-sigma_i delta_i)) and T_i = exp(-sum_{j<i} sigma_j delta_j).
    """
    sd = (np.asarray(sigmas, np.float64) * np.asarray(deltas, np.float64))
    acc = np.cumsum(sd, axis=-1)
    T = np.exp(-np.concatenate([np.zeros_like(acc[..., :1]), acc[..., :-1]], axis=-1))
    alpha = -np.expm1(-sd)
    w = T * alpha
    t_end = np.exp(-acc[..., -1]) if sd.shape[-1] else np.ones(sd.shape[:-1])
    color = (w[..., None] * np.asarray(colors, np.float64)).sum(axis=-2)
    return color, w, t_end, T


def composite_backward(sigmas, deltas, colors, w, trans_end, dC, dT_end=None):
    """Gradients of (color, trans_end) through composite_batch.

    dC (R,3) upstream on color, dT_end (R,) upstream on end transmittance.
    Returns (d_sigma (R,S), d_rgb (R,S,3)).
    """
    sig = np.asarray(sigmas, np.float64)
    dl = np.asarray(deltas, np.float64)
    col = np.asarray(colors, np.float64)
    dC = np.asarray(dC, np.float64)
    g = (dC[..., None, :] * col).sum(axis=-1)        # (R,S): dC . c_i
    wg = w * g
    # suffix sum over j > i
    suffix = np.cumsum(wg[..., ::-1], axis=-1)[..., ::-1] - wg
    sd = sig * dl
    acc = np.cumsum(sd, axis=-1)
    T = np.exp(-np.concatenate([np.zeros_like(acc[..., :1]), acc[..., :-1]], axis=-1))
    d_sigma = dl * (T * np.exp(-sd) * g - suffix)
    if dT_end is not None:
        d_sigma -= dl * (trans_end * np.asarray(dT_end, np.float64))[..., None]
    d_rgb = w[..., None] * dC[..., None, :]
    return d_sigma, d_rgb


def composite(sigmas, colors, deltas) -> CompositeResult:
    """Per-ray compositing (spec form)."""
    sigmas = np.atleast_1d(np.asarray(sigmas, dtype=np.float64))
    deltas = np.atleast_1d(np.asarray(deltas, dtype=np.float64))
    colors = np.asarray(colors, dtype=np.float64).reshape(len(sigmas), 3)
    if (sigmas < 0).any():
        raise ValueError("opacities must be >= 0")
    if (deltas <= 0).any():
        raise ValueError("deltas must be > 0")
    c, w, t_end, T = composite_batch(sigmas[None], colors[None], deltas[None])
    t_vals = np.cumsum(deltas) - deltas  # sample positions if t0 = 0; depth uses caller's ts
    depth = float((w[0] * t_vals).sum())
    return CompositeResult(color=c[0], weights=w[0], transmittance_end=float(t_end[0]), depth=depth)


def sample_coarse(ray: Ray, interval, n: int, jitter_seed=None) -> SamplePoints:
    """Stratified coarse samples on the interval; midpoints when unseeded."""
    if interval is None or interval[1] <= interval[0]:
        e = np.empty(0)
        return SamplePoints(e, e.reshape(0, 3), e, interval=(0.0, 0.0))
    if n < 2:
        raise ValueError("need n >= 2")
    rng = None if jitter_seed is None else np.random.default_rng(jitter_seed)
    t = stratified_1d(interval[0], interval[1], n, rng)
    return _points_from_t(ray, t, interval)


def sample_fine(ray: Ray, coarse: SamplePoints, weights, n: int, seed=None) -> SamplePoints:
    """Inverse-CDF fine samples guided by coarse weights, merged with coarse."""
    w = np.asarray(weights, dtype=np.float64)
    if (w < 0).any():
        raise ValueError("weights must be >= 0")
    lo, hi = coarse.interval
    rng = None if seed is None else np.random.default_rng(seed)
    t_f = sample_pdf_bins(np.float64(lo), np.float64(hi), w, n, rng)
    t = np.sort(np.concatenate([coarse.t_values, t_f]))
    return _points_from_t(ray, t, coarse.interval)


def _points_from_t(ray: Ray, t: np.ndarray, interval) -> SamplePoints:
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    pos = ray.at(t)
    deltas = np.empty_like(t)
    deltas[:-1] = np.diff(t)
    deltas[-1] = interval[1] - t[-1]
    return SamplePoints(t, pos, deltas, interval=(float(interval[0]), float(interval[1])))


# ------------------------------------------------------------ scene sampling


@dataclass
class SampleCounts:
    n_coarse_fg: int = 64
    n_fine_fg: int = 128
    n_coarse_bg: int = 32
    n_fine_bg: int = 64


def fg_intervals(bounds: EllipsoidBounds, origins, dirs, t_near, t_far):
    """Foreground sampling interval per ray: ellipsoid clip then ground clamp.

    Returns (t0, t1, exited) where exited marks rays whose interval ends at
    the ellipsoid surface (so the background continues beyond them).
    """
    iv = _ellipsoid_intervals(origins, dirs, bounds, t_near, t_far)
    t0, t1e = iv[..., 0], iv[..., 1]
    t1 = clamp_t_far_to_ground(origins, dirs, t1e, bounds.ground_z)
    exited = (t1e <= t1 + 1e-12) & (t1e > t0)
    return t0, np.minimum(t1, t1e), exited


def bg_quadratic(bounds: EllipsoidBounds, origins, dirs):
    """Coefficients of ||x'(t)||^2 = aq t^2 + bq t + cq in ellipsoid-scaled space."""
    o = (origins - bounds.center) / bounds.radii
    d = dirs / bounds.radii
    aq = (d * d).sum(axis=-1)
    bq = 2.0 * (o * d).sum(axis=-1)
    cq = (o * o).sum(axis=-1)
    return aq, bq, cq


def bg_t_of_s(aq, bq, cq, s):
    """Largest ray parameter with scaled norm 1/s (the outbound branch)."""
    rhs = 1.0 / (s * s)
    disc = np.maximum(bq[..., None] ** 2 - 4.0 * aq[..., None] * (cq[..., None] - rhs), 0.0)
    return (-bq[..., None] + np.sqrt(disc)) / (2.0 * aq[..., None])


def bg_start_s(bounds, origins, dirs, t_near, fg_hit, fg_exited):
    """Starting inverse-norm for background sampling, 0 where no background.

    Rays that exit the ellipsoid start at s = 1; rays that never enter start
    at their closest-approach norm; rays absorbed by the ground clamp inside
    the foreground have no background segment.
    """
    aq, bq, cq = bg_quadratic(bounds, origins, dirs)
    t_peak = np.maximum(-bq / (2.0 * aq), t_near)
    q_peak = aq * t_peak ** 2 + bq * t_peak + cq
    s_miss = 1.0 / np.sqrt(np.maximum(q_peak, 1.0))
    s = np.where(fg_hit & fg_exited, 1.0, np.where(~fg_hit, s_miss, 0.0))
    return np.where(s > S_FLOOR * 1.001, s, 0.0), (aq, bq, cq)


def render_rays(model: FieldModel, origins, dirs, t_near, t_far,
                counts: SampleCounts, embeddings=None, rng=None,
                include_bg=True, clear_color=(0.0, 0.0, 0.0), counter=None,
                fg_query=None, bg_query=None):
    """Two-stage render of a ray batch against the full model.

    Foreground: stratified coarse pass, then inverse-CDF fine samples
    composited once over the sorted union (coarse evaluations are reused).
    Background: the same two-stage process uniform in inverse norm.
    fg_query/bg_query override the model lookups (e.g. analytic fields).

    Returns a dict with "color" (R,3) plus per-part diagnostics.
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    R = len(origins)
    t_near = np.broadcast_to(np.asarray(t_near, dtype=np.float64), (R,))
    t_far = np.broadcast_to(np.asarray(t_far, dtype=np.float64), (R,))
    fg_query = fg_query or model.query_fg
    bg_query = bg_query or model.query_bg

    t0, t1, exited = fg_intervals(model.bounds, origins, dirs, t_near, t_far)
    fg_hit = t1 > t0

    color = np.zeros((R, 3))
    trans = np.ones(R)
    out = {
        "fg_hit": fg_hit,
        "fg_weights_sum": np.zeros(R),
        "fg_trans_end": np.ones(R),
        "fg_depth": np.zeros(R),
        "bg_weights_sum": np.zeros(R),
    }

    if fg_hit.any():
        m = fg_hit
        sub_o, sub_d = origins[m], dirs[m]
        emb = None if embeddings is None else embeddings[m]
        t_c = stratified_1d(t0[m], t1[m], counts.n_coarse_fg, rng)
        pos_c = sub_o[:, None, :] + t_c[..., None] * sub_d[:, None, :]
        dirs_rep = np.repeat(sub_d, counts.n_coarse_fg, axis=0)
        emb_rep = None if emb is None else np.repeat(emb, counts.n_coarse_fg, axis=0)
        sig_c, rgb_c = fg_query(pos_c.reshape(-1, 3), dirs_rep, emb_rep, counter=counter)
        sig_c = sig_c.reshape(t_c.shape)
        rgb_c = rgb_c.reshape(t_c.shape + (3,))
        d_c = _deltas(t_c, t1[m])
        _, w_c, _, _ = composite_batch(sig_c, rgb_c, d_c)

        t_f = sample_pdf_bins(t0[m], t1[m], w_c, counts.n_fine_fg, rng)
        pos_f = sub_o[:, None, :] + t_f[..., None] * sub_d[:, None, :]
        dirs_rep = np.repeat(sub_d, counts.n_fine_fg, axis=0)
        emb_rep = None if emb is None else np.repeat(emb, counts.n_fine_fg, axis=0)
        sig_f, rgb_f = fg_query(pos_f.reshape(-1, 3), dirs_rep, emb_rep, counter=counter)
        sig_f = sig_f.reshape(t_f.shape)
        rgb_f = rgb_f.reshape(t_f.shape + (3,))

        t_all = np.concatenate([t_c, t_f], axis=1)
        order = np.argsort(t_all, axis=1, kind="stable")
        t_u = np.take_along_axis(t_all, order, axis=1)
        sig_u = np.take_along_axis(np.concatenate([sig_c, sig_f], axis=1), order, axis=1)
        rgb_u = np.take_along_axis(np.concatenate([rgb_c, rgb_f], axis=1),
                                   order[..., None], axis=1)
        d_u = _deltas(t_u, t1[m])
        c_fg, w_u, te_fg, _ = composite_batch(sig_u, rgb_u, d_u)
        color[m] += c_fg
        trans[m] = te_fg
        out["fg_weights_sum"][m] = w_u.sum(axis=1)
        out["fg_trans_end"][m] = te_fg
        out["fg_depth"][m] = (w_u * t_u).sum(axis=1)

    if include_bg and model is not None:
        s_start, (aq, bq, cq) = bg_start_s(model.bounds, origins, dirs, t_near,
                                           fg_hit, exited)
        bgm = s_start > 0
        if bgm.any():
            sub_o, sub_d = origins[bgm], dirs[bgm]
            emb = None if embeddings is None else embeddings[bgm]
            aqm, bqm, cqm = aq[bgm], bq[bgm], cq[bgm]
            # strata descend in s so ray parameters ascend
            s_c = s_start[bgm][:, None] - stratified_1d(
                np.zeros(bgm.sum()), s_start[bgm] - S_FLOOR, counts.n_coarse_bg, rng)
            sig_c, rgb_c = _eval_bg(model, bg_query, aqm, bqm, cqm, s_c, sub_o, sub_d,
                                    emb, counter)
            t_c = bg_t_of_s(aqm, bqm, cqm, s_c)
            d_c = _bg_deltas(aqm, bqm, cqm, t_c, s_c)
            _, w_c, _, _ = composite_batch(sig_c, rgb_c, d_c)

            u_f = sample_pdf_bins(np.zeros(bgm.sum()), s_start[bgm] - S_FLOOR,
                                  w_c, counts.n_fine_bg, rng)
            s_f = s_start[bgm][:, None] - u_f
            sig_f, rgb_f = _eval_bg(model, bg_query, aqm, bqm, cqm, s_f, sub_o, sub_d,
                                    emb, counter)
            s_all = np.concatenate([s_c, s_f], axis=1)
            order = np.argsort(-s_all, axis=1, kind="stable")  # descending s = ascending t
            s_u = np.take_along_axis(s_all, order, axis=1)
            sig_u = np.take_along_axis(np.concatenate([sig_c, sig_f], axis=1), order, axis=1)
            rgb_u = np.take_along_axis(np.concatenate([rgb_c, rgb_f], axis=1),
                                       order[..., None], axis=1)
            t_u = bg_t_of_s(aqm, bqm, cqm, s_u)
            d_u = _bg_deltas(aqm, bqm, cqm, t_u, s_u)
            c_bg, w_bg, te_bg, _ = composite_batch(sig_u, rgb_u, d_u)
            color[bgm] += trans[bgm, None] * c_bg
            out["bg_weights_sum"][bgm] = w_bg.sum(axis=1)
            trans[bgm] *= te_bg
            out["bg_sampled"] = bgm

    color += trans[:, None] * np.asarray(clear_color)
    out["color"] = np.clip(color, 0.0, 1.0)
    out["trans_end"] = trans
    # per-ray conservation: fg weights + fg_T*(bg weights) + final transmittance
    out["w_plus_t"] = (out["fg_weights_sum"]
                       + out["fg_trans_end"] * out["bg_weights_sum"] + trans)
    return out


def _deltas(t, t_end):
    d = np.empty_like(t)
    d[..., :-1] = np.diff(t, axis=-1)
    d[..., -1] = t_end - t[..., -1]
    return np.maximum(d, 1e-12)


def _bg_deltas(aq, bq, cq, t, s):
    d = np.empty_like(t)
    d[..., :-1] = np.diff(t, axis=-1)
    t_tail = bg_t_of_s(aq, bq, cq, np.maximum(s[..., -1:] * 0.5, S_FLOOR * 0.5))
    d[..., -1] = (t_tail[..., 0] - t[..., -1])
    return np.maximum(d, 1e-12)


def _eval_bg(model, bg_query, aq, bq, cq, s, origins, dirs, emb, counter):
    t = bg_t_of_s(aq, bq, cq, s)
    pts = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    sp = (pts - model.bounds.center) / model.bounds.radii
    norm = np.linalg.norm(sp, axis=-1, keepdims=True)
    unit = sp / np.maximum(norm, 1e-12)
    coords4 = np.concatenate([unit, s[..., None]], axis=-1)
    n = len(s)
    S = s.shape[1]
    dirs_rep = np.repeat(dirs, S, axis=0)
    emb_rep = None if emb is None else np.repeat(emb, S, axis=0)
    sig, rgb = bg_query(coords4.reshape(-1, 4).astype(F32), dirs_rep,
                        pts.reshape(-1, 3), emb_rep, counter=counter)
    return sig.reshape(n, S), rgb.reshape(n, S, 3)


def render_ray(model: FieldModel, ray: Ray, counts: SampleCounts,
               embedding=None, rng=None, include_bg=True,
               clear_color=(0.0, 0.0, 0.0)) -> CompositeResult:
    """Single-ray convenience wrapper over render_rays."""
    emb = None if embedding is None else np.asarray(embedding, F32)[None]
    out = render_rays(model, ray.origin[None], ray.direction[None],
                      np.array([ray.t_near]), np.array([ray.t_far]),
                      counts, embeddings=emb, rng=rng, include_bg=include_bg,
                      clear_color=clear_color)
    return CompositeResult(color=out["color"][0], weights=np.empty(0),
                           transmittance_end=float(out["trans_end"][0]),
                           depth=float(out.get("fg_depth", np.zeros(1))[0]))


def render_image(model: FieldModel, pose, counts: SampleCounts, embedding=None,
                 rng=None, include_bg=True, clear_color=(0.0, 0.0, 0.0),
                 counter=None, row_chunk=16) -> np.ndarray:
    """Render a full frame through render_rays, chunked by pixel rows."""
    from .geometry import rays_for_pixels

    H, W = pose.height, pose.width
    img = np.empty((H, W, 3), dtype=F32)
    emb = None
    if embedding is not None:
        embedding = np.asarray(embedding, F32)
    for y0 in range(0, H, row_chunk):
        y1 = min(H, y0 + row_chunk)
        ys, xs = np.mgrid[y0:y1, 0:W]
        o, d = rays_for_pixels(pose, xs.ravel(), ys.ravel())
        if embedding is not None:
            emb = np.broadcast_to(embedding, (len(o), len(embedding)))
        out = render_rays(model, o, d, 0.0, np.inf, counts, embeddings=emb,
                          rng=rng, include_bg=include_bg, clear_color=clear_color,
                          counter=counter)
        img[y0:y1] = out["color"].reshape(y1 - y0, W, 3)
    return img
