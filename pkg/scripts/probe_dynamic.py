"""Dev probe for the dynamic-renderer criteria using the trained desk model."""
import sys
import time

import numpy as np

sys.path.insert(0, "src")
from flyfield.data import load_dataset
from flyfield.field import load_checkpoint
from flyfield.metrics import psnr
from flyfield.octree import FrameRequest, bake_initial, render_frame, render_from_cache
from flyfield.render import SampleCounts, render_image
from flyfield.synth import CameraGridSpec, grid_poses

DESK = SampleCounts(64, 128, 32, 64)


def main():
    t0 = time.time()
    model = load_checkpoint("/tmp/desk48_model.mgnf")
    ds = load_dataset("/tmp/desk48")
    _, val = ds.train_val_split(8)
    pose = val.images[2].pose

    c1 = {"queries": 0}
    full_a = render_image(model, pose, DESK, include_bg=False,
                          rng=np.random.default_rng(1), counter=c1)
    full_b = render_image(model, pose, DESK, include_bg=False,
                          rng=np.random.default_rng(2))
    cap = psnr(full_a, full_b)
    print(f"full-render self-PSNR cap: {cap:.2f} dB; queries {c1['queries']} "
          f"({time.time()-t0:.0f}s)", flush=True)

    t1 = time.time()
    cache = bake_initial(model, model.layout, model.bounds, depth=6,
                         max_elements=2_000_000, max_depth=10)
    print(f"bake depth 6: {cache.n_nodes} nodes in {time.time()-t1:.0f}s", flush=True)
    frames, stats = render_frame(cache, model, FrameRequest(camera=pose, quality_level=3),
                                 refine_k=4096)
    for f, s in zip(frames, stats):
        print(f"  level {s['level']}: PSNR vs full {psnr(f, full_a):.2f} dB, "
              f"queries {s['queries']}, nodes {s['nodes']}, {s['ms']:.0f} ms", flush=True)
    q_guided = stats[-1]["queries"]
    print(f"c7 verdict: guided {psnr(frames[-1], full_a):.2f} vs cap-1 "
          f"{cap-1:.2f}; query ratio {c1['queries']/max(q_guided,1):.1f}x", flush=True)

    # c8 probe: short smooth path (8 frames for speed)
    import math as m
    poses = []
    for i, t in enumerate(np.linspace(0, 1, 8)):
        x = -10.0 + 20.0 * t
        y = -2.0 + 2.5 * m.sin(2 * m.pi * t * 0.75)
        spec = CameraGridSpec(rows=1, cols=1, width=96, height=54, altitude=11.0,
                              pitch_deg=60.0, x_range=(x, x), y_range=(y, y))
        poses.append(grid_poses(spec)[0])
    t1 = time.time()
    refs = [render_image(model, p, DESK, include_bg=False) for p in poses]
    print(f"c8 refs in {time.time()-t1:.0f}s", flush=True)
    warm_cache = bake_initial(model, model.layout, model.bounds, depth=5,
                              max_elements=2_000_000, max_depth=10)
    warm, cold = [], []
    for i, p in enumerate(poses):
        frames, _ = render_frame(warm_cache, model, FrameRequest(camera=p, quality_level=2),
                                 refine_k=4096)
        if i:
            warm.append(psnr(frames[0], refs[i]))
            cold_cache = bake_initial(model, model.layout, model.bounds, depth=5,
                                      max_elements=2_000_000, max_depth=10)
            cf, _ = render_from_cache(cold_cache, FrameRequest(camera=p))
            cold.append(psnr(cf, refs[i]))
    print(f"c8 verdict: warm {np.mean(warm):.2f} vs cold {np.mean(cold):.2f} "
          f"(gain {np.mean(warm)-np.mean(cold):+.2f} dB) total {time.time()-t0:.0f}s",
          flush=True)


if __name__ == "__main__":
    main()
