"""Dev probe: one exact desk-preset round on the full desk dataset, then
held-out PSNR. Writes progress to stdout (run under nohup/background)."""
import sys
import time

import numpy as np

sys.path.insert(0, "src")
from flyfield.field import FieldModel
from flyfield.geometry import fit_bounds, make_layout
from flyfield.metrics import psnr
from flyfield.partition import assign_pixels, shard_stats
from flyfield.render import SampleCounts, render_image
from flyfield.synth import CameraGridSpec, default_desk_scene, generate_dataset
from flyfield.data import load_dataset
from flyfield.train import TrainConfig, eval_psnr, train_all

def main():
    t0 = time.time()
    import pathlib
    root = pathlib.Path("/tmp/desk48")
    if not (root / "metadata.json").exists():
        scene = default_desk_scene()
        generate_dataset(scene, CameraGridSpec(), root, n_dense=2048)
        print(f"dataset generated {time.time()-t0:.0f}s", flush=True)
    ds = load_dataset(root)
    train_ds, val_ds = ds.train_val_split(8)
    print("train/val:", len(train_ds), len(val_ds), flush=True)

    bounds = fit_bounds([r.pose for r in train_ds.images], margin=0.1, ground_z=ds.ground_z)
    layout = make_layout(bounds, nx=2, ny=2, overlap=0.15)
    t1 = time.time()
    asg = assign_pixels(train_ds, layout, bounds, samples_per_ray=256)
    print(f"assign {time.time()-t1:.0f}s; stats:", shard_stats(asg, train_ds)["mean_shard_fraction"], flush=True)

    model = FieldModel.create(layout, bounds, image_ids=train_ds.image_ids, seed=0, preset="desk")
    config = TrainConfig(seed=0)  # exact desk preset

    # mean-color baseline
    imgs = [train_ds.load_image(i) for i in train_ds.image_ids]
    mean_color = np.mean(np.stack(imgs), axis=(0, 1, 2))
    base = np.mean([psnr(np.broadcast_to(mean_color.astype(np.float32), (96, 96, 3)),
                         val_ds.load_image(i)) for i in val_ds.image_ids])
    print("mean-color baseline PSNR:", round(base, 2), flush=True)


    def hook(m, step):
        t = time.time()
        rep = eval_psnr(m, val_ds, val_ds.image_ids, config.counts, stride=2)
        print(f"step {step}: val PSNR(stride2) = {rep['mean']:.2f} dB "
              f"(eval {time.time()-t:.0f}s, wall {time.time()-t0:.0f}s)", flush=True)
        from flyfield.field import save_checkpoint
        save_checkpoint(m, "/tmp/desk48_model.mgnf")
        return rep["mean"] >= 22.0 or step >= 3000

    train_all(asg.shards, train_ds, model, config, workers=2, round_hook=hook)
    t = time.time()
    rep = eval_psnr(model, val_ds, val_ds.image_ids, config.counts, stride=1)
    print("FULL val PSNR:", {k: round(v, 2) for k, v in rep["per_image"].items()},
          "mean", round(rep["mean"], 3), f"(eval {time.time()-t:.0f}s)", flush=True)
    from flyfield.field import save_checkpoint
    save_checkpoint(model, "/tmp/desk48_model.mgnf")
    print("TOTAL", round((time.time() - t0) / 60, 1), "min", flush=True)


if __name__ == "__main__":
    main()
