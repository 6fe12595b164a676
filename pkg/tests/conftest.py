import numpy as np
import pytest

from flyfield.data import Dataset, ImageRecord
from flyfield.field import EncodingSpec, FieldModel
from flyfield.geometry import fit_bounds, make_layout
from flyfield.synth import (CameraGridSpec, default_desk_scene, grid_poses,
                            oracle_render)

TINY_ARCH = dict(depth=2, width=8, skip_layer=1, color_head_width=6,
                 bg_depth=2, bg_width=8, bg_color_head_width=6)


def make_mini_dataset(rows=1, cols=2, wh=20, scene=None):
    """Small in-memory desk dataset rendered by the oracle."""
    scene = scene or default_desk_scene()
    spec = CameraGridSpec(rows=rows, cols=cols, width=wh, height=wh,
                          x_range=(-8.0, 8.0), y_range=(-3.0, 3.0))
    poses = grid_poses(spec)
    ds = Dataset(None, scene.ground_top_z - 1.0,
                 [ImageRecord(pose=p, file="") for p in poses])
    for p in poses:
        ds.put_image(p.image_id, oracle_render(scene, p, n_dense=512))
    return scene, ds


def make_mini_model(ds, nx=2, ny=1, emb=4, seed=0):
    poses = [r.pose for r in ds.images]
    bounds = fit_bounds(poses, margin=0.1, ground_z=ds.ground_z)
    layout = make_layout(bounds, nx=nx, ny=ny, overlap=0.15)
    enc = EncodingSpec(L_pos=4, L_dir=2)
    return FieldModel.create(layout, bounds, image_ids=ds.image_ids, seed=seed,
                             enc=enc, embedding_dim=emb, arch=TINY_ARCH)
