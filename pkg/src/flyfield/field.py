"""Submodule MLPs: positional encoding, forward/backward passes, Adam.

Everything is float32 and hand-vectorized over sample batches; gradients are
exact reverse-mode, validated against central finite differences in the test
suite. No autodiff framework is involved, which keeps checkpoints and
parallel training bit-reproducible.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .geometry import EllipsoidBounds, SpatialLayout, route_points

F32 = np.float32

# opacity activation input gain: sigma = softplus(SIGMA_GAIN * z). Physical
# opacities span 1..100 per meter; the gain lets the head reach them with
# order-one pre-activations instead of grinding weights up for thousands of
# Adam steps. softplus(0) is unchanged.
SIGMA_GAIN = 25.0


@dataclass(frozen=True)
class EncodingSpec:
    L_pos: int = 10
    L_dir: int = 4

    def __post_init__(self):
        if self.L_pos < 0 or self.L_dir < 0:
            raise ValueError("frequency counts must be >= 0")


def encode(x: np.ndarray, L: int) -> np.ndarray:
    """Sinusoidal features: per coordinate p, (sin(2^i pi p), cos(2^i pi p)) for i < L.

    Output is grouped per coordinate, so a D-dim input yields 2*L*D features.
    Raw coordinates are not appended. float32 unless given float64.
    """
    x = np.asarray(x)
    dtype = np.float64 if x.dtype == np.float64 else F32
    x = x.astype(dtype, copy=False)
    if L == 0:
        return np.zeros(x.shape[:-1] + (0,), dtype=dtype)
    freqs = (np.pi * (2.0 ** np.arange(L))).astype(dtype)
    args = x[..., :, None] * freqs  # (..., D, L)
    out = np.empty(x.shape[:-1] + (x.shape[-1], L, 2), dtype=dtype)
    np.sin(args, out=out[..., 0])
    np.cos(args, out=out[..., 1])
    return out.reshape(x.shape[:-1] + (x.shape[-1] * 2 * L,))


def _softplus(z):
    return np.where(z > 20.0, z, np.log1p(np.exp(np.minimum(z, 20.0))))


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class MlpParams:
    """One submodule network: trunk -> (opacity head, view/appearance color branch)."""

    depth: int
    width: int
    skip_layer: int
    color_head_width: int
    embedding_dim: int
    in_dim: int
    dir_dim: int
    trunk_w: list
    trunk_b: list
    sigma_w: np.ndarray
    sigma_b: np.ndarray
    color1_w: np.ndarray
    color1_b: np.ndarray
    color2_w: np.ndarray
    color2_b: np.ndarray

    @staticmethod
    def layer_dims(depth, width, skip_layer, color_head_width, in_dim, dir_dim, embedding_dim):
        trunk = []
        for i in range(depth):
            d_in = in_dim if i == 0 else width
            if i == skip_layer and 0 < i < depth:
                d_in += in_dim
            trunk.append((d_in, width))
        return trunk, (width, 1), (width + dir_dim + embedding_dim, color_head_width), (color_head_width, 3)

    @classmethod
    def create(cls, rng, depth=4, width=64, skip_layer=2, color_head_width=32,
               in_dim=60, dir_dim=24, embedding_dim=48):
        trunk_dims, sig, c1, c2 = cls.layer_dims(
            depth, width, skip_layer, color_head_width, in_dim, dir_dim, embedding_dim)

        def he(shape):
            bound = np.sqrt(6.0 / shape[0])
            return rng.uniform(-bound, bound, size=shape).astype(F32)

        return cls(
            depth=depth, width=width, skip_layer=skip_layer,
            color_head_width=color_head_width, embedding_dim=embedding_dim,
            in_dim=in_dim, dir_dim=dir_dim,
            trunk_w=[he(d) for d in trunk_dims],
            trunk_b=[np.zeros(d[1], dtype=F32) for d in trunk_dims],
            # start nearly transparent (sigma ~ 0.05/m) so the volume does
            # not open as opaque fog that takes thousands of steps to carve
            sigma_w=he(sig), sigma_b=np.full(1, -3.0 / SIGMA_GAIN, dtype=F32),
            color1_w=he(c1), color1_b=np.zeros(c1[1], dtype=F32),
            # small output logits: start near mid-gray with live sigmoid grads
            color2_w=(he(c2) * F32(0.2)), color2_b=np.zeros(3, dtype=F32),
        )

    @classmethod
    def zeros(cls, **kw):
        p = cls.create(np.random.default_rng(0), **kw)
        for a in p.arrays():
            a[...] = 0.0
        return p

    def arrays(self) -> list:
        """Parameter tensors in canonical (serialization/optimizer) order."""
        out = []
        for w, b in zip(self.trunk_w, self.trunk_b):
            out += [w, b]
        out += [self.sigma_w, self.sigma_b,
                self.color1_w, self.color1_b, self.color2_w, self.color2_b]
        return out

    def copy(self) -> "MlpParams":
        return MlpParams(
            depth=self.depth, width=self.width, skip_layer=self.skip_layer,
            color_head_width=self.color_head_width, embedding_dim=self.embedding_dim,
            in_dim=self.in_dim, dir_dim=self.dir_dim,
            trunk_w=[w.copy() for w in self.trunk_w],
            trunk_b=[b.copy() for b in self.trunk_b],
            sigma_w=self.sigma_w.copy(), sigma_b=self.sigma_b.copy(),
            color1_w=self.color1_w.copy(), color1_b=self.color1_b.copy(),
            color2_w=self.color2_w.copy(), color2_b=self.color2_b.copy(),
        )

    def n_params(self) -> int:
        return int(sum(a.size for a in self.arrays()))

    def astype(self, dtype) -> "MlpParams":
        return MlpParams(
            depth=self.depth, width=self.width, skip_layer=self.skip_layer,
            color_head_width=self.color_head_width, embedding_dim=self.embedding_dim,
            in_dim=self.in_dim, dir_dim=self.dir_dim,
            trunk_w=[w.astype(dtype) for w in self.trunk_w],
            trunk_b=[b.astype(dtype) for b in self.trunk_b],
            sigma_w=self.sigma_w.astype(dtype), sigma_b=self.sigma_b.astype(dtype),
            color1_w=self.color1_w.astype(dtype), color1_b=self.color1_b.astype(dtype),
            color2_w=self.color2_w.astype(dtype), color2_b=self.color2_b.astype(dtype),
        )


def field_forward(params: MlpParams, enc_x, enc_d, emb, want_cache=False):
    """Batched forward pass over pre-encoded inputs.

    enc_x: (N, in_dim), enc_d: (N, dir_dim), emb: (N, embedding_dim).
    Returns (sigma (N,), rgb (N,3)) and, when requested, the cache consumed
    by field_backward. Opacity depends on position only.
    """
    enc_x = np.ascontiguousarray(enc_x)  # float32 in the pipeline; float64 for checks
    N = enc_x.shape[0]
    if enc_x.shape[1] != params.in_dim:
        raise ValueError(f"enc_x dim {enc_x.shape[1]} != {params.in_dim}")
    h = enc_x
    hs = [h]  # plain layer outputs
    skip_in = None
    for i, (w, b) in enumerate(zip(params.trunk_w, params.trunk_b)):
        if i == params.skip_layer and 0 < i < params.depth:
            h = np.concatenate([h, enc_x], axis=1)
            skip_in = h
        z = h @ w
        z += b
        np.maximum(z, 0.0, out=z)
        h = z
        hs.append(h)
    sig_z = (h @ params.sigma_w)[:, 0] + params.sigma_b[0]
    sig_z = sig_z * np.asarray(SIGMA_GAIN, dtype=sig_z.dtype)
    sigma = _softplus(sig_z)

    if params.embedding_dim:
        c_in = np.concatenate([h, np.asarray(enc_d, h.dtype), np.asarray(emb, h.dtype)], axis=1)
    else:
        c_in = np.concatenate([h, np.asarray(enc_d, h.dtype)], axis=1)
    z1 = c_in @ params.color1_w
    z1 += params.color1_b
    np.maximum(z1, 0.0, out=z1)
    z2 = z1 @ params.color2_w
    z2 += params.color2_b
    rgb = _sigmoid(z2)

    if not want_cache:
        return sigma, rgb
    cache = {"hs": hs, "sig_z": sig_z, "c_in": c_in, "h1": z1, "rgb": rgb, "n": N,
             "skip_in": skip_in}
    return sigma, rgb, cache


@dataclass
class MlpGrads:
    arrays: list  # congruent to MlpParams.arrays()

    @classmethod
    def zeros_like(cls, params: MlpParams):
        return cls([np.zeros_like(a) for a in params.arrays()])


def field_backward(params: MlpParams, cache, d_sigma, d_rgb):
    """Exact reverse-mode gradients of (sigma, rgb) wrt parameters and embeddings.

    d_sigma: (N,) upstream on opacity, d_rgb: (N,3) upstream on color.
    Returns (MlpGrads, d_emb (N, embedding_dim)).
    """
    hs, sig_z, c_in, h1, rgb = cache["hs"], cache["sig_z"], cache["c_in"], cache["h1"], cache["rgb"]
    d_sigma = np.asarray(d_sigma, h1.dtype)
    d_rgb = np.asarray(d_rgb, h1.dtype)

    # color branch
    dz2 = d_rgb * rgb * (1.0 - rgb)
    g_c2w = h1.T @ dz2
    g_c2b = dz2.sum(axis=0)
    dh1 = dz2 @ params.color2_w.T
    dh1 *= h1 > 0
    g_c1w = c_in.T @ dh1
    g_c1b = dh1.sum(axis=0)
    dc_in = dh1 @ params.color1_w.T
    w = params.width
    d_trunk = dc_in[:, :w].copy()
    if params.embedding_dim:
        d_emb = dc_in[:, w + params.dir_dim:]
    else:
        d_emb = np.zeros((cache["n"], 0), dtype=h1.dtype)

    # opacity head: d softplus(g z)/dz = g sigmoid(g z); cache holds g z
    dsz = d_sigma * _sigmoid(sig_z) * np.asarray(SIGMA_GAIN, dtype=h1.dtype)
    h_last = hs[-1]
    g_sw = (h_last.T @ dsz[:, None])
    g_sb = np.array([dsz.sum()], dtype=F32)
    d_trunk += dsz[:, None] * params.sigma_w[:, 0]

    # trunk, reversed
    g_tw = [None] * params.depth
    g_tb = [None] * params.depth
    skip = params.skip_layer if 0 < params.skip_layer < params.depth else -1
    dh = d_trunk
    for i in range(params.depth - 1, -1, -1):
        z_out = hs[i + 1]
        dh *= z_out > 0
        layer_in = cache["skip_in"] if i == skip else hs[i]
        g_tw[i] = layer_in.T @ dh
        g_tb[i] = dh.sum(axis=0)
        if i > 0:
            dh = dh @ params.trunk_w[i].T
            if i == skip:
                dh = dh[:, : params.width].copy()  # drop the re-injected encoding slice

    out = []
    for gw, gb in zip(g_tw, g_tb):
        out += [gw, gb]
    out += [g_sw, g_sb, g_c1w, g_c1b, g_c2w, g_c2b]
    return MlpGrads(out), d_emb


@dataclass
class AdamState:
    step: int
    m: list
    v: list
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_arrays(cls, arrays, beta1=0.9, beta2=0.999, epsilon=1e-8):
        return cls(step=0, m=[np.zeros_like(a) for a in arrays],
                   v=[np.zeros_like(a) for a in arrays],
                   beta1=beta1, beta2=beta2, epsilon=epsilon)


def adam_step(state: AdamState, arrays, grad_arrays, lr: float) -> bool:
    """Bias-corrected Adam update, in place. Returns False (step skipped)
    when any gradient is non-finite, signalling divergence to the caller."""
    for g in grad_arrays:
        if not np.isfinite(g).all():
            return False
    state.step += 1
    b1, b2, eps = state.beta1, state.beta2, state.epsilon
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    alpha = F32(lr * np.sqrt(c2) / c1)
    for a, g, m, v in zip(arrays, grad_arrays, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * np.square(g)
        a -= alpha * m / (np.sqrt(v) + eps)
    return True


def lr_schedule(step: int, total_steps: int, lr_init=5e-4, lr_final=5e-5) -> float:
    """Exponential decay from lr_init to lr_final over the full run."""
    if not 0 <= step <= total_steps:
        raise ValueError("step outside schedule")
    if total_steps == 0:
        return lr_init
    return float(lr_init * (lr_final / lr_init) ** (step / total_steps))


@dataclass
class AppearanceTable:
    """One latent vector per training image, shared by all submodules."""

    image_ids: np.ndarray  # (M,) int64, sorted
    vectors: np.ndarray    # (M, E) float32

    def __post_init__(self):
        self.image_ids = np.asarray(self.image_ids, dtype=np.int64)
        self.vectors = np.asarray(self.vectors, dtype=F32)
        if len(self.image_ids) != len(self.vectors):
            raise ValueError("id/vector count mismatch")
        self._row = {int(i): k for k, i in enumerate(self.image_ids)}

    @classmethod
    def zeros(cls, image_ids, dim):
        ids = np.asarray(sorted(int(i) for i in image_ids), dtype=np.int64)
        return cls(ids, np.zeros((len(ids), dim), dtype=F32))

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def rows_for(self, image_ids) -> np.ndarray:
        return np.array([self._row[int(i)] for i in np.atleast_1d(image_ids)], dtype=np.int64)

    def lookup(self, image_ids) -> np.ndarray:
        """Vectors for a batch of image ids; unknown ids get the zero vector."""
        ids = np.atleast_1d(image_ids)
        out = np.zeros((len(ids), self.dim), dtype=F32)
        for k, i in enumerate(ids):
            r = self._row.get(int(i))
            if r is not None:
                out[k] = self.vectors[r]
        return out

    def copy(self) -> "AppearanceTable":
        return AppearanceTable(self.image_ids.copy(), self.vectors.copy())


# architecture presets (desk runs on CPU in minutes; paper mirrors the source setup)
PRESETS = {
    "desk": dict(depth=4, width=64, skip_layer=2, color_head_width=32,
                 bg_depth=3, bg_width=32, bg_color_head_width=16),
    "paper": dict(depth=8, width=256, skip_layer=4, color_head_width=128,
                  bg_depth=8, bg_width=256, bg_color_head_width=128),
}


class FieldModel:
    """A full scene model: K foreground nets, K background nets, appearance table.

    Query positions are normalized to the ellipsoid frame before encoding;
    background queries use the 4D (unit direction, inverse norm) coordinates.
    """

    def __init__(self, layout: SpatialLayout, bounds: EllipsoidBounds,
                 enc: EncodingSpec, fg_nets, bg_nets, appearance: AppearanceTable):
        if len(fg_nets) != layout.n_cells or len(bg_nets) != layout.n_cells:
            raise ValueError("need one fg and one bg net per cell")
        self.layout = layout
        self.bounds = bounds
        self.enc = enc
        self.fg_nets = list(fg_nets)
        self.bg_nets = list(bg_nets)
        self.appearance = appearance

    @classmethod
    def create(cls, layout, bounds, image_ids, seed=0, preset="desk",
               enc: EncodingSpec | None = None, embedding_dim=48, arch=None):
        enc = enc or EncodingSpec()
        arch = {**PRESETS[preset], **(arch or {})}
        fg, bg = [], []
        for k in range(layout.n_cells):
            rng = np.random.default_rng(np.random.SeedSequence([seed, k]))
            fg.append(MlpParams.create(
                rng, depth=arch["depth"], width=arch["width"], skip_layer=arch["skip_layer"],
                color_head_width=arch["color_head_width"], in_dim=6 * enc.L_pos,
                dir_dim=6 * enc.L_dir, embedding_dim=embedding_dim))
            bg.append(MlpParams.create(
                rng, depth=arch["bg_depth"], width=arch["bg_width"],
                skip_layer=arch["bg_depth"] // 2, color_head_width=arch["bg_color_head_width"],
                in_dim=8 * enc.L_pos, dir_dim=6 * enc.L_dir, embedding_dim=embedding_dim))
        table = AppearanceTable.zeros(image_ids, embedding_dim)
        return cls(layout, bounds, enc, fg, bg, table)

    @property
    def embedding_dim(self) -> int:
        return self.fg_nets[0].embedding_dim

    def normalize_fg(self, pts: np.ndarray) -> np.ndarray:
        return ((pts - self.bounds.center) / self.bounds.radii).astype(F32)

    def query_fg(self, pts, dirs, emb=None, nets=None, counter=None):
        """Route foreground points to their cells and evaluate.

        pts (N,3) world, dirs (N,3) unit, emb (N,E) or None for zeros.
        `nets` overrides the live nets (e.g. frozen snapshots).
        """
        nets = self.fg_nets if nets is None else nets
        pts = np.asarray(pts, dtype=np.float64)
        N = len(pts)
        enc_x = encode(self.normalize_fg(pts), self.enc.L_pos)
        enc_d = encode(np.asarray(dirs, F32), self.enc.L_dir)
        if emb is None:
            emb = np.zeros((N, self.embedding_dim), dtype=F32)
        cells = route_points(self.layout, pts)
        sigma = np.empty(N, dtype=F32)
        rgb = np.empty((N, 3), dtype=F32)
        for k in np.unique(cells):
            m = cells == k
            s, c = _forward_chunked(nets[k], enc_x[m], enc_d[m], emb[m])
            sigma[m] = s
            rgb[m] = c
        if counter is not None:
            counter["queries"] = counter.get("queries", 0) + N
        return sigma, rgb

    def query_bg(self, coords4, dirs, route_pos, emb=None, nets=None, counter=None):
        """Evaluate background points given 4D coords and routing positions."""
        nets = self.bg_nets if nets is None else nets
        coords4 = np.asarray(coords4, dtype=F32)
        N = len(coords4)
        enc_x = encode(coords4, self.enc.L_pos)
        enc_d = encode(np.asarray(dirs, F32), self.enc.L_dir)
        if emb is None:
            emb = np.zeros((N, self.embedding_dim), dtype=F32)
        cells = route_points(self.layout, route_pos)
        sigma = np.empty(N, dtype=F32)
        rgb = np.empty((N, 3), dtype=F32)
        for k in np.unique(cells):
            m = cells == k
            s, c = _forward_chunked(nets[k], enc_x[m], enc_d[m], emb[m])
            sigma[m] = s
            rgb[m] = c
        if counter is not None:
            counter["queries"] = counter.get("queries", 0) + N
        return sigma, rgb

    def snapshot_nets(self):
        return ([p.copy() for p in self.fg_nets], [p.copy() for p in self.bg_nets])


def _forward_chunked(params, enc_x, enc_d, emb, chunk=16384):
    n = len(enc_x)
    if n <= chunk:
        return field_forward(params, enc_x, enc_d, emb)
    sigma = np.empty(n, dtype=F32)
    rgb = np.empty((n, 3), dtype=F32)
    for i in range(0, n, chunk):
        s, c = field_forward(params, enc_x[i:i + chunk], enc_d[i:i + chunk], emb[i:i + chunk])
        sigma[i:i + chunk] = s
        rgb[i:i + chunk] = c
    return sigma, rgb


# ---------------------------------------------------------------- checkpoints

MAGIC = b"MGNF"
VERSION = 1


def _write_net(buf, p: MlpParams, L_pos: int, L_dir: int):
    buf.write(struct.pack("<7I", p.depth, p.width, p.skip_layer,
                          p.color_head_width, L_pos, L_dir, p.embedding_dim))
    for a in p.arrays():
        buf.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def _read_net(buf, in_dim_for):
    depth, width, skip, chw, L_pos, L_dir, emb = struct.unpack("<7I", buf.read(28))
    in_dim = in_dim_for(L_pos)
    dims = MlpParams.layer_dims(depth, width, skip, chw, in_dim, 6 * L_dir, emb)
    trunk_dims, sig, c1, c2 = dims

    def arr(shape):
        n = int(np.prod(shape))
        a = np.frombuffer(buf.read(4 * n), dtype="<f4").reshape(shape)
        return np.ascontiguousarray(a)

    tw, tb = [], []
    for d in trunk_dims:
        tw.append(arr(d))
        tb.append(arr((d[1],)))
    p = MlpParams(depth=depth, width=width, skip_layer=skip, color_head_width=chw,
                  embedding_dim=emb, in_dim=in_dim, dir_dim=6 * L_dir,
                  trunk_w=tw, trunk_b=tb,
                  sigma_w=arr(sig), sigma_b=arr((1,)),
                  color1_w=arr(c1), color1_b=arr((c1[1],)),
                  color2_w=arr(c2), color2_b=arr((3,)))
    return p, L_pos, L_dir


def save_checkpoint(model: FieldModel, path):
    """MGNF checkpoint: 2K nets (K foreground then K background), then the
    shared appearance table. A sidecar JSON carries layout/bounds metadata."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    K = model.layout.n_cells
    buf.write(struct.pack("<II", VERSION, 2 * K))
    for p in model.fg_nets:
        _write_net(buf, p, model.enc.L_pos, model.enc.L_dir)
    for p in model.bg_nets:
        _write_net(buf, p, model.enc.L_pos, model.enc.L_dir)
    tab = model.appearance
    buf.write(struct.pack("<I", len(tab.image_ids)))
    for i, vec in zip(tab.image_ids, tab.vectors):
        buf.write(struct.pack("<I", int(i)))
        buf.write(np.ascontiguousarray(vec, dtype="<f4").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())
    meta = {
        "n_cells": K,
        "layout": {
            "nx": model.layout.nx, "ny": model.layout.ny,
            "centroids": model.layout.centroids.tolist(),
            "cell_half_extents": model.layout.cell_half_extents.tolist(),
            "overlap": model.layout.overlap,
        },
        "bounds": {
            "center": model.bounds.center.tolist(),
            "radii": model.bounds.radii.tolist(),
            "ground_z": model.bounds.ground_z,
        },
    }
    with open(str(path) + ".json", "w") as f:
        json.dump(meta, f, sort_keys=True, indent=1)


def load_checkpoint(path) -> FieldModel:
    with open(str(path) + ".json") as f:
        meta = json.load(f)
    lay = meta["layout"]
    layout = SpatialLayout(nx=lay["nx"], ny=lay["ny"], centroids=np.array(lay["centroids"]),
                           cell_half_extents=np.array(lay["cell_half_extents"]),
                           overlap=lay["overlap"])
    b = meta["bounds"]
    bounds = EllipsoidBounds(center=np.array(b["center"]), radii=np.array(b["radii"]),
                             ground_z=b["ground_z"])
    with open(path, "rb") as f:
        raw = f.read()
    buf = io.BytesIO(raw)
    if buf.read(4) != MAGIC:
        raise ValueError("not a checkpoint file")
    version, count = struct.unpack("<II", buf.read(8))
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    K = count // 2
    fg, bg = [], []
    L_pos = L_dir = None
    for _ in range(K):
        p, L_pos, L_dir = _read_net(buf, lambda L: 6 * L)
        fg.append(p)
    for _ in range(K):
        p, _, _ = _read_net(buf, lambda L: 8 * L)
        bg.append(p)
    (n_emb,) = struct.unpack("<I", buf.read(4))
    dim = fg[0].embedding_dim
    ids = np.empty(n_emb, dtype=np.int64)
    vecs = np.empty((n_emb, dim), dtype=F32)
    for i in range(n_emb):
        (ids[i],) = struct.unpack("<I", buf.read(4))
        vecs[i] = np.frombuffer(buf.read(4 * dim), dtype="<f4")
    table = AppearanceTable(ids, vecs)
    enc = EncodingSpec(L_pos=L_pos, L_dir=L_dir)
    return FieldModel(layout, bounds, enc, fg, bg, table)
