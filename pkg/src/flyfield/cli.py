"""Operator pipeline: generate data, partition, train, prune, bake, evaluate,
replay camera paths, and serve the interactive renderer.

Configuration comes from an optional TOML file; command-line flags win.
Every run writes a JSON manifest (inputs, seeds, versions, wall time) next
to its outputs. Artifacts default to $MEGANERF_HOME (or ./runs).
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

try:
    import tomllib
except ImportError:  # python 3.10
    import tomli as tomllib

from . import __version__
from .data import load_dataset, write_image
from .field import FieldModel, PRESETS, load_checkpoint, save_checkpoint
from .geometry import (CameraPose, dataset_stats, fit_bounds, make_layout,
                       quat_to_rotation)
from .metrics import psnr, ssim
from .octree import (DESK_OCTREE, PAPER_OCTREE, FrameRequest, bake_initial,
                     load_octree, render_frame, save_octree)
from .partition import (ShardAssignment, assign_pixels, build_occupancy_grid,
                        load_shard, prune_shards, save_shard, shard_stats)
from .render import SampleCounts, render_image
from .synth import CameraGridSpec, default_desk_scene, generate_dataset
from .train import TrainConfig, eval_psnr, train_all, write_trace


def artifact_root() -> Path:
    return Path(os.environ.get("MEGANERF_HOME", "./runs"))


def _load_toml(path):
    if not path:
        return {}
    with open(path, "rb") as f:
        return tomllib.load(f)


def _write_manifest(out_dir: Path, command: str, args: dict, t0: float, outputs):
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "args": {k: (str(v) if isinstance(v, Path) else v) for k, v in args.items()
                 if not callable(v)},
        "versions": {"flyfield": __version__, "numpy": np.__version__,
                     "python": sys.version.split()[0]},
        "wall_time_s": round(time.time() - t0, 3),
        "outputs": [str(o) for o in outputs],
    }
    with open(out_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)


def _opt(args, cfg, section, key, default):
    """Flag > config file > default."""
    flag = getattr(args, key.replace("-", "_"), None)
    if flag is not None:
        return flag
    return cfg.get(section, {}).get(key, default)


def _desk_grid_spec(args, cfg):
    g = cfg.get("scene", {})
    return CameraGridSpec(
        rows=int(_opt(args, cfg, "scene", "rows", g.get("rows", 6))),
        cols=int(_opt(args, cfg, "scene", "cols", g.get("cols", 8))),
        altitude=float(g.get("altitude", 12.0)),
        pitch_deg=float(g.get("pitch_deg", 62.0)),
        fov_deg=float(g.get("fov_deg", 60.0)),
        width=int(_opt(args, cfg, "scene", "width", g.get("width", 96))),
        height=int(_opt(args, cfg, "scene", "height", g.get("height", 96))),
    )


def cmd_gen_scene(args, cfg):
    t0 = time.time()
    out = Path(args.out or artifact_root() / "dataset")
    spec = _desk_grid_spec(args, cfg)
    scene = default_desk_scene(args.variant, n_images=spec.rows * spec.cols,
                               seed=args.seed)
    ds = generate_dataset(scene, spec, out, n_dense=args.n_dense)
    st = dataset_stats(ds)
    print(json.dumps({"dataset": str(out), **st}))
    _write_manifest(out, "gen-scene", vars(args), t0, [out / "metadata.json"])
    return 0


def cmd_stats(args, cfg):
    ds = load_dataset(args.dataset)
    st = dataset_stats(ds)
    print(json.dumps(st))
    return 0


def _layout_for(args, cfg, ds):
    poses = [r.pose for r in ds.images]
    bounds = fit_bounds(poses, margin=float(_opt(args, cfg, "layout", "margin", 0.1)),
                        ground_z=ds.ground_z)
    nx = int(_opt(args, cfg, "layout", "nx", 2))
    ny = int(_opt(args, cfg, "layout", "ny", 2))
    overlap = float(_opt(args, cfg, "layout", "overlap", 0.15))
    return bounds, make_layout(bounds, nx=nx, ny=ny, overlap=overlap)


def cmd_partition(args, cfg):
    t0 = time.time()
    ds = load_dataset(args.dataset)
    if args.val_every > 0:
        ds, _ = ds.train_val_split(args.val_every)
    bounds, layout = _layout_for(args, cfg, ds)
    asg = assign_pixels(ds, layout, bounds, samples_per_ray=args.samples_per_ray)
    out = Path(args.out or artifact_root() / "shards")
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for k, shard in enumerate(asg.shards):
        p = out / f"shard_{k:03d}.mgsh"
        save_shard(p, shard, k)
        files.append(p)
    st = shard_stats(asg, ds)
    print(json.dumps({"shards": [len(s) for s in asg.shards],
                      "mean_shard_fraction": st["mean_shard_fraction"]}))
    _write_manifest(out, "partition", vars(args), t0, files)
    return 0


def _train_config(args, cfg) -> TrainConfig:
    t = cfg.get("train", {})
    preset = args.preset or t.get("preset", "desk")
    defaults = dict(batch_rays=1024, total_steps=20000, snapshot_interval=1000)
    if preset == "desk":
        counts = dict(n_coarse_fg=64, n_fine_fg=128, n_coarse_bg=32, n_fine_bg=64)
    else:
        counts = dict(n_coarse_fg=256, n_fine_fg=512, n_coarse_bg=128, n_fine_bg=256)
    merged = {**defaults, **counts, **t}
    valid = set(TrainConfig.__dataclass_fields__)
    merged = {k: v for k, v in merged.items() if k in valid}
    if args.steps is not None:
        merged["total_steps"] = args.steps
    if args.batch_rays is not None:
        merged["batch_rays"] = args.batch_rays
    merged["seed"] = args.seed
    return TrainConfig(**merged)


def _load_shards(shard_dir: Path):
    files = sorted(Path(shard_dir).glob("shard_*.mgsh"))
    if not files:
        raise FileNotFoundError(f"no shard files in {shard_dir}")
    shards = [None] * len(files)
    for f in files:
        shard, idx = load_shard(f)
        shards[idx] = shard
    return shards


def cmd_train(args, cfg):
    t0 = time.time()
    ds_all = load_dataset(args.dataset)
    train_ds, val_ds = ds_all.train_val_split(args.val_every) if args.val_every > 0 \
        else (ds_all, ds_all.select([]))
    bounds, layout = _layout_for(args, cfg, train_ds)
    config = _train_config(args, cfg)
    preset = args.preset or cfg.get("train", {}).get("preset", "desk")
    shards = _load_shards(args.shards) if args.shards else \
        assign_pixels(train_ds, layout, bounds, samples_per_ray=256).shards
    model = FieldModel.create(layout, bounds, image_ids=train_ds.image_ids,
                              seed=args.seed, preset=preset,
                              embedding_dim=args.embedding_dim)
    out = Path(args.out or artifact_root() / "model")
    out.mkdir(parents=True, exist_ok=True)

    if args.with_prune:
        trigger = args.prune_at or config.total_steps // 2
        stage1 = TrainConfig(**{**config.__dict__, "total_steps": trigger})
        train_all(shards, train_ds, model, stage1, workers=args.workers)
        grid = build_occupancy_grid(model, layout, bounds,
                                    resolution=(args.grid_res,) * 3,
                                    sigma_threshold=args.sigma_threshold)
        asg = ShardAssignment(shards=shards, source_dataset_id=train_ds.dataset_id,
                              overlap=layout.overlap)
        pruned = prune_shards(asg, grid, train_ds, layout, bounds)
        for k, shard in enumerate(pruned.shards):
            save_shard(out / f"shard_pruned_{k:03d}.mgsh", shard, k)
        shards = pruned.shards
        train_all(shards, train_ds, model, config, workers=args.workers,
                  start_step=trigger)
    else:
        train_all(shards, train_ds, model, config, workers=args.workers)

    ckpt = out / "model.mgnf"
    save_checkpoint(model, ckpt)
    write_trace(out / "train_trace.csv", model.traces)
    result = {"checkpoint": str(ckpt), "steps": config.total_steps}
    if len(val_ds):
        rep = eval_psnr(model, val_ds, val_ds.image_ids, config.counts)
        result["val_psnr"] = round(rep["mean"], 3)
    print(json.dumps(result))
    _write_manifest(out, "train", vars(args), t0, [ckpt])
    return 0


def cmd_prune(args, cfg):
    t0 = time.time()
    ds = load_dataset(args.dataset)
    if args.val_every > 0:
        ds, _ = ds.train_val_split(args.val_every)
    model = load_checkpoint(args.model)
    shards = _load_shards(args.shards)
    grid = build_occupancy_grid(model, model.layout, model.bounds,
                                resolution=(args.grid_res,) * 3,
                                sigma_threshold=args.sigma_threshold)
    asg = ShardAssignment(shards=shards, source_dataset_id=ds.dataset_id,
                          overlap=model.layout.overlap)
    pruned = prune_shards(asg, grid, ds, model.layout, model.bounds)
    out = Path(args.out or artifact_root() / "shards_pruned")
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for k, shard in enumerate(pruned.shards):
        p = out / f"shard_{k:03d}.mgsh"
        save_shard(p, shard, k)
        files.append(p)
    print(json.dumps({"before": [len(s) for s in shards],
                      "after": [len(s) for s in pruned.shards]}))
    _write_manifest(out, "prune", vars(args), t0, files)
    return 0


def _octree_params(args, cfg):
    preset = PAPER_OCTREE if (args.preset or "desk") == "paper" else DESK_OCTREE
    o = cfg.get("octree", {})
    return {
        "bake_depth": int(args.depth or o.get("bake_depth", preset["bake_depth"])),
        "max_depth": int(o.get("max_depth", preset["max_depth"])),
        "max_elements": int(o.get("max_elements", preset["max_elements"])),
        "refine_k": int(o.get("refine_k", preset["refine_k"])),
    }


def cmd_bake(args, cfg):
    t0 = time.time()
    model = load_checkpoint(args.model)
    p = _octree_params(args, cfg)
    cache = bake_initial(model, model.layout, model.bounds, depth=p["bake_depth"],
                         max_elements=p["max_elements"], max_depth=p["max_depth"])
    out = Path(args.out or artifact_root() / "octree.mgoc")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_octree(cache, out)
    print(json.dumps({"octree": str(out), "nodes": cache.n_nodes}))
    _write_manifest(out.parent, "bake", vars(args), t0, [out])
    return 0


def cmd_eval(args, cfg):
    t0 = time.time()
    ds = load_dataset(args.dataset)
    model = load_checkpoint(args.model)
    train_ds, val_ds = ds.train_val_split(args.val_every) if args.val_every > 0 \
        else (ds, ds.select([]))
    target = {"val": val_ds, "train": train_ds, "all": ds}[args.split]
    counts = _counts_for(args.preset or "desk")
    out = Path(args.out or artifact_root() / "eval.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = []
    for image_id in target.image_ids:
        pose = target.pose(image_id)
        gt = target.load_image(image_id)
        emb = model.appearance.lookup([image_id])[0] if model.embedding_dim else None
        img = render_image(model, pose, counts, embedding=emb)
        rows.append([image_id, psnr(img, gt), ssim(img, gt)])
    with open(out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["image_id", "psnr", "ssim"])
        for r in rows:
            w.writerow([r[0], f"{r[1]:.4f}", f"{r[2]:.5f}"])
    mean_psnr = float(np.mean([r[1] for r in rows])) if rows else float("nan")
    print(json.dumps({"eval_csv": str(out), "mean_psnr": round(mean_psnr, 3),
                      "views": len(rows)}))
    _write_manifest(out.parent, "eval", vars(args), t0, [out])
    return 0


def _counts_for(preset):
    if preset == "paper":
        return SampleCounts(256, 512, 128, 256)
    return SampleCounts(64, 128, 32, 64)


def read_camera_path(path, width, height):
    """Camera path CSV: frame_index, px, py, pz, qw, qx, qy, qz, fov_deg."""
    poses = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        for ln, row in enumerate(reader, start=1):
            if not row or row[0].strip().startswith("#"):
                continue
            if row[0].strip() == "frame_index":
                continue
            try:
                frame = int(row[0])
                px, py, pz, qw, qx, qy, qz, fov = (float(v) for v in row[1:9])
            except (ValueError, IndexError) as e:
                raise ValueError(f"{path}: malformed path row at line {ln}: {row}") from e
            fx = (width / 2.0) / math.tan(math.radians(fov) / 2.0)
            poses.append(CameraPose(
                image_id=frame, width=width, height=height, fx=fx, fy=fx,
                cx=width / 2.0, cy=height / 2.0,
                rotation=quat_to_rotation(qw, qx, qy, qz),
                position=np.array([px, py, pz])))
    return poses


def cmd_render_path(args, cfg):
    t0 = time.time()
    model = load_checkpoint(args.model)
    p = _octree_params(args, cfg)
    poses = read_camera_path(args.path, args.width, args.height)
    if args.octree:
        cache = load_octree(args.octree, max_elements=p["max_elements"])
    else:
        cache = bake_initial(model, model.layout, model.bounds, depth=p["bake_depth"],
                             max_elements=p["max_elements"], max_depth=p["max_depth"])
    out = Path(args.out or artifact_root() / "path_render")
    out.mkdir(parents=True, exist_ok=True)
    counts = _counts_for(args.preset or "desk")
    timing_rows = []
    outputs = []
    for pose in poses:
        req = FrameRequest(camera=pose, quality_level=args.quality,
                           embedding_id=args.embedding_id)
        emb = None
        if args.embedding_id is not None and model.embedding_dim:
            emb = model.appearance.lookup([args.embedding_id])[0]
        frames, stats = render_frame(cache, model, req, refine_k=p["refine_k"],
                                     embedding=emb)
        oracle_img = None
        if args.oracle:
            oracle_img = render_image(model, pose, counts, embedding=emb,
                                      include_bg=False)
        for frame, st in zip(frames, stats):
            name = f"frame_{pose.image_id:04d}_L{st['level']}.ppm"
            write_image(out / name, frame)
            outputs.append(out / name)
            row = [pose.image_id, st["level"], round(st["ms"], 3), st["queries"]]
            if oracle_img is not None:
                row.append(round(psnr(frame, oracle_img), 4))
            timing_rows.append(row)
    tpath = out / "timings.csv"
    with open(tpath, "w", newline="") as f:
        w = csv.writer(f)
        header = ["frame", "level", "ms", "queries"]
        if args.oracle:
            header.append("psnr_vs_full")
        w.writerow(header)
        w.writerows(timing_rows)
    print(json.dumps({"frames": len(poses), "out": str(out)}))
    _write_manifest(out, "render-path", vars(args), t0, outputs + [tpath])
    return 0


def cmd_serve(args, cfg):
    from .service import build_app
    import uvicorn

    p = _octree_params(args, cfg)
    app = build_app(model_path=args.model, octree_path=args.octree,
                    refine_k=p["refine_k"], octree_params=p,
                    default_quality=args.quality)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def build_parser():
    ap = argparse.ArgumentParser(prog="flyfield",
                                 description="modular radiance fields with an "
                                             "interactive octree renderer")
    ap.add_argument("--config", help="TOML config file (flags win)")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--preset", choices=["desk", "paper"])
        p.add_argument("--out")

    g = sub.add_parser("gen-scene", help="generate an analytic dataset")
    common(g)
    g.add_argument("--variant", default="default", choices=["default", "tinted", "wall"])
    g.add_argument("--rows", type=int)
    g.add_argument("--cols", type=int)
    g.add_argument("--width", type=int)
    g.add_argument("--height", type=int)
    g.add_argument("--n-dense", type=int, default=2048)
    g.set_defaults(fn=cmd_gen_scene)

    s = sub.add_parser("stats", help="dataset image/pixel counts")
    s.add_argument("--dataset", required=True)
    s.set_defaults(fn=cmd_stats)

    p = sub.add_parser("partition", help="assign pixels to submodule shards")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--nx", type=int)
    p.add_argument("--ny", type=int)
    p.add_argument("--overlap", type=float)
    p.add_argument("--samples-per-ray", type=int, default=256)
    p.add_argument("--val-every", type=int, default=8)
    p.set_defaults(fn=cmd_partition)

    t = sub.add_parser("train", help="train all submodules")
    common(t)
    t.add_argument("--dataset", required=True)
    t.add_argument("--shards")
    t.add_argument("--nx", type=int)
    t.add_argument("--ny", type=int)
    t.add_argument("--overlap", type=float)
    t.add_argument("--steps", type=int)
    t.add_argument("--batch-rays", type=int)
    t.add_argument("--workers", type=int, default=1)
    t.add_argument("--with-prune", action="store_true")
    t.add_argument("--prune-at", type=int)
    t.add_argument("--grid-res", type=int, default=128)
    t.add_argument("--sigma-threshold", type=float, default=1.0)
    t.add_argument("--embedding-dim", type=int, default=48)
    t.add_argument("--val-every", type=int, default=8)
    t.set_defaults(fn=cmd_train)

    pr = sub.add_parser("prune", help="prune shards with a trained model")
    common(pr)
    pr.add_argument("--dataset", required=True)
    pr.add_argument("--shards", required=True)
    pr.add_argument("--model", required=True)
    pr.add_argument("--grid-res", type=int, default=128)
    pr.add_argument("--sigma-threshold", type=float, default=1.0)
    pr.add_argument("--val-every", type=int, default=8)
    pr.set_defaults(fn=cmd_prune)

    b = sub.add_parser("bake", help="bake the octree cache")
    common(b)
    b.add_argument("--model", required=True)
    b.add_argument("--depth", type=int)
    b.set_defaults(fn=cmd_bake)

    e = sub.add_parser("eval", help="per-view PSNR/SSIM table")
    common(e)
    e.add_argument("--dataset", required=True)
    e.add_argument("--model", required=True)
    e.add_argument("--split", default="val", choices=["val", "train", "all"])
    e.add_argument("--val-every", type=int, default=8)
    e.set_defaults(fn=cmd_eval)

    r = sub.add_parser("render-path", help="replay a camera path headlessly")
    common(r)
    r.add_argument("--model", required=True)
    r.add_argument("--octree")
    r.add_argument("--path", required=True)
    r.add_argument("--quality", type=int, default=1)
    r.add_argument("--width", type=int, default=160)
    r.add_argument("--height", type=int, default=90)
    r.add_argument("--depth", type=int)
    r.add_argument("--oracle", action="store_true")
    r.add_argument("--embedding-id", type=int)
    r.set_defaults(fn=cmd_render_path)

    sv = sub.add_parser("serve", help="run the interactive fly-through service")
    common(sv)
    sv.add_argument("--model", required=True)
    sv.add_argument("--octree")
    sv.add_argument("--host", default="127.0.0.1")
    sv.add_argument("--port", type=int, default=8800)
    sv.add_argument("--quality", type=int, default=2)
    sv.add_argument("--depth", type=int)
    sv.set_defaults(fn=cmd_serve)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return 1 if e.code not in (0, None) else 0
    cfg = _load_toml(args.config)
    try:
        return args.fn(args, cfg)
    except (ValueError, FileNotFoundError, IOError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failure
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
