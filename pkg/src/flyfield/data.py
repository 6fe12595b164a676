"""Dataset directory format and image I/O.

A dataset is a directory with `metadata.json` (shared intrinsics, ground_z,
per-image id/file/camera-to-world/altitude) and an `images/` folder of
binary PPM (P6, maxval 255) files. PNG is accepted when Pillow is present.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import CameraPose


def write_ppm(path, image: np.ndarray):
    """Write float [0,1] (H,W,3) or uint8 as binary PPM."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = (np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    h, w, _ = img.shape
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(img.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read binary PPM into float32 [0,1] (H,W,3)."""
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(b"P6"):
        raise IOError(f"{path}: not a binary PPM")
    # header = magic, width, height, maxval; '#' comments allowed between tokens
    tokens, pos = [], 2
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while raw[pos : pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(int(raw[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = tokens
    img = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos)
    return img.reshape(h, w, 3).astype(np.float32) / float(maxval)


def write_image(path, image: np.ndarray):
    path = Path(path)
    if path.suffix == ".ppm":
        write_ppm(path, image)
    elif path.suffix == ".png":
        try:
            from PIL import Image
        except ImportError as e:
            raise IOError("PNG output requires Pillow; use .ppm instead") from e
        img = (np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
        Image.fromarray(img).save(path)
    else:
        raise IOError(f"unsupported image format: {path.suffix}")


def read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".ppm":
        return read_ppm(path)
    try:
        from PIL import Image
    except ImportError as e:
        raise IOError("reading non-PPM images requires Pillow") from e
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0


@dataclass
class ImageRecord:
    pose: CameraPose
    file: str

    @property
    def image_id(self) -> int:
        return self.pose.image_id

    @property
    def width(self) -> int:
        return self.pose.width

    @property
    def height(self) -> int:
        return self.pose.height


class Dataset:
    """Posed image collection; pixel data loads lazily and is cached."""

    def __init__(self, root, ground_z: float, images: list[ImageRecord], dataset_id: str = ""):
        self.root = Path(root) if root is not None else None
        self.ground_z = float(ground_z)
        self.images = sorted(images, key=lambda r: r.image_id)
        self.dataset_id = dataset_id or (str(self.root) if self.root else "in-memory")
        self._cache: dict[int, np.ndarray] = {}
        self._by_id = {r.image_id: r for r in self.images}

    def __len__(self):
        return len(self.images)

    @property
    def image_ids(self) -> list[int]:
        return [r.image_id for r in self.images]

    def record(self, image_id: int) -> ImageRecord:
        return self._by_id[image_id]

    def pose(self, image_id: int) -> CameraPose:
        return self._by_id[image_id].pose

    def load_image(self, image_id: int) -> np.ndarray:
        if image_id not in self._cache:
            rec = self._by_id[image_id]
            if self.root is None:
                raise IOError("dataset has no image files on disk")
            self._cache[image_id] = read_image(self.root / rec.file)
        return self._cache[image_id]

    def put_image(self, image_id: int, image: np.ndarray):
        self._cache[image_id] = np.asarray(image, dtype=np.float32)

    def select(self, image_ids) -> "Dataset":
        """View over a subset of images (shares the pixel cache)."""
        keep = set(int(i) for i in image_ids)
        sub = Dataset(self.root, self.ground_z,
                      [r for r in self.images if r.image_id in keep],
                      dataset_id=self.dataset_id)
        sub._cache = self._cache
        return sub

    def train_val_split(self, val_every: int = 8):
        ids = self.image_ids
        val = [i for k, i in enumerate(ids) if (k + 1) % val_every == 0]
        train = [i for i in ids if i not in set(val)]
        return self.select(train), self.select(val)


def save_dataset(root, ground_z: float, poses: list[CameraPose], images=None,
                 image_format: str = "ppm") -> Dataset:
    """Write metadata and (optionally) pixel data; returns the loaded Dataset."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    records = []
    meta_images = []
    for k, pose in enumerate(poses):
        fname = f"images/{pose.image_id:06d}.{image_format}"
        c2w = np.eye(4)
        c2w[:3, :3] = pose.rotation
        c2w[:3, 3] = pose.position
        meta_images.append({
            "id": pose.image_id,
            "file": fname,
            "camera_to_world": [round(float(v), 12) for v in c2w.reshape(-1)],
            "altitude": pose.altitude_z,
        })
        records.append(ImageRecord(pose=pose, file=fname))
        if images is not None:
            write_image(root / fname, images[k])
    p0 = poses[0]
    for p in poses:
        if (p.width, p.height, p.fx, p.fy, p.cx, p.cy) != \
                (p0.width, p0.height, p0.fx, p0.fy, p0.cx, p0.cy):
            raise ValueError("dataset requires shared intrinsics across images")
    meta = {
        "intrinsics": {"width": p0.width, "height": p0.height,
                       "fx": p0.fx, "fy": p0.fy, "cx": p0.cx, "cy": p0.cy},
        "ground_z": ground_z,
        "images": meta_images,
    }
    with open(root / "metadata.json", "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)
    return Dataset(root, ground_z, records)


def load_dataset(root) -> Dataset:
    root = Path(root)
    try:
        with open(root / "metadata.json") as f:
            meta = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise IOError(f"unreadable dataset metadata at {root}: {e}") from e
    intr = meta["intrinsics"]
    records = []
    for im in meta["images"]:
        c2w = np.array(im["camera_to_world"], dtype=np.float64).reshape(4, 4)
        pose = CameraPose(
            image_id=int(im["id"]), width=int(intr["width"]), height=int(intr["height"]),
            fx=float(intr["fx"]), fy=float(intr["fy"]),
            cx=float(intr["cx"]), cy=float(intr["cy"]),
            rotation=c2w[:3, :3], position=c2w[:3, 3],
        )
        records.append(ImageRecord(pose=pose, file=im["file"]))
    return Dataset(root, float(meta["ground_z"]), records)
