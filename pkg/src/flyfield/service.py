"""Interactive fly-through service.

One WebSocket session owns one octree cache (single writer). The client
streams camera messages; the render loop always takes the latest one
(stale intermediates are never rendered) and emits every quality level of
a frame as soon as it is ready, followed by a stats message. Slow clients
lose old frames first: the outbox is bounded and drops the oldest entry.

Frame wire format: 12-byte little-endian header
  seq u32 | quality u8 | pad u8[3] | width u16 | height u16
followed by width*height*3 RGB8 bytes, row-major.
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
import threading
import time
from collections import deque
from typing import Optional

import anyio
import numpy as np
from fastapi import FastAPI, WebSocket, WebSocketDisconnect
from pydantic import BaseModel, Field, ValidationError

from .field import load_checkpoint
from .geometry import CameraPose, quat_to_rotation
from .octree import (DESK_OCTREE, FrameRequest, bake_initial, load_octree,
                     render_frame, save_octree)

HEADER = struct.Struct("<IB3xHH")


class CameraMsg(BaseModel):
    type: str = Field(pattern="^camera$")
    seq: int = Field(ge=0, lt=2 ** 32)
    pos: list[float] = Field(min_length=3, max_length=3)
    quat: list[float] = Field(min_length=4, max_length=4)
    fov_deg: float = Field(gt=0, lt=180)
    width: int = Field(ge=8, le=4096)
    height: int = Field(ge=8, le=4096)


class ConfigMsg(BaseModel):
    type: str = Field(pattern="^config$")
    quality: int = Field(ge=0, le=8)
    embedding_id: Optional[int] = None


class StatsMsg(BaseModel):
    type: str = "stats"
    seq: int
    level: int
    render_ms: float
    mlp_queries: int
    cache_nodes: int


def pack_frame(seq: int, quality: int, frame: np.ndarray) -> bytes:
    h, w, _ = frame.shape
    rgb8 = (np.clip(frame, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    return HEADER.pack(seq, quality, w, h) + rgb8.tobytes()


def unpack_frame_header(data: bytes):
    seq, quality, w, h = HEADER.unpack_from(data, 0)
    return {"seq": seq, "quality": quality, "width": w, "height": h}


def camera_pose(msg: CameraMsg) -> CameraPose:
    fx = (msg.width / 2.0) / math.tan(math.radians(msg.fov_deg) / 2.0)
    return CameraPose(image_id=msg.seq, width=msg.width, height=msg.height,
                      fx=fx, fy=fx, cx=msg.width / 2.0, cy=msg.height / 2.0,
                      rotation=quat_to_rotation(*msg.quat),
                      position=np.asarray(msg.pos, dtype=np.float64))


class Session:
    """Render loop state for one connection: a latest-camera slot feeding a
    single writer thread, and a bounded drop-oldest outbox."""

    def __init__(self, model, cache, refine_k, quality, outbox_size=64,
                 min_frame_seconds=0.0):
        self.model = model
        self.cache = cache
        self.refine_k = refine_k
        self.quality = quality
        self.embedding_id = None
        self.min_frame_seconds = min_frame_seconds
        self.lock = threading.Condition()
        self.pending: Optional[CameraMsg] = None
        self.stopped = False
        self.outbox: deque = deque(maxlen=outbox_size)
        self.out_event = threading.Event()
        self.frames_rendered = 0
        self.seqs_rendered: list[int] = []
        self.thread = threading.Thread(target=self._run, daemon=True)

    def submit(self, msg: CameraMsg):
        with self.lock:
            # latest camera wins; anything unrendered is discarded
            self.pending = msg
            self.lock.notify()

    def configure(self, msg: ConfigMsg):
        with self.lock:
            self.quality = msg.quality
            self.embedding_id = msg.embedding_id

    def stop(self):
        with self.lock:
            self.stopped = True
            self.lock.notify()
        self.out_event.set()

    def _emit(self, payload):
        self.outbox.append(payload)  # deque(maxlen) drops the oldest
        self.out_event.set()

    def _run(self):
        while True:
            with self.lock:
                while self.pending is None and not self.stopped:
                    self.lock.wait()
                if self.stopped:
                    return
                msg = self.pending
                self.pending = None
                quality = self.quality
                embedding_id = self.embedding_id
            try:
                pose = camera_pose(msg)
            except ValueError as e:
                self._emit(json.dumps({"type": "error", "message": str(e)}))
                continue
            emb = None
            if embedding_id is not None and self.model.embedding_dim:
                emb = self.model.appearance.lookup([embedding_id])[0]
            req = FrameRequest(camera=pose, quality_level=quality,
                               embedding_id=embedding_id)
            try:
                frames, stats = render_frame(self.cache, self.model, req,
                                             refine_k=self.refine_k, embedding=emb)
            except Exception as e:  # keep the session alive on render failure
                self._emit(json.dumps({"type": "error",
                                       "message": f"render failed: {e}"}))
                continue
            for frame, st in zip(frames, stats):
                self._emit(pack_frame(msg.seq, st["level"], frame))
                self._emit(StatsMsg(seq=msg.seq, level=st["level"],
                                    render_ms=round(st["ms"], 3),
                                    mlp_queries=int(st["queries"]),
                                    cache_nodes=int(st["nodes"]),
                                    ).model_dump_json())
            self.frames_rendered += len(frames)
            self.seqs_rendered.append(msg.seq)
            if self.min_frame_seconds:
                time.sleep(self.min_frame_seconds)


def build_app(model_path=None, octree_path=None, model=None, octree_bytes=None,
              refine_k=None, octree_params=None, default_quality=2,
              min_frame_seconds=0.0) -> FastAPI:
    """App factory. Each session gets its own fresh cache: either the given
    snapshot deserialized anew, or a fresh bake from the model."""
    params = {**DESK_OCTREE, **(octree_params or {})}
    if refine_k is None:
        refine_k = params["refine_k"]
    if model is None:
        model = load_checkpoint(model_path)
    if octree_bytes is None and octree_path:
        with open(octree_path, "rb") as f:
            octree_bytes = f.read()

    app = FastAPI(title="flyfield fly-through service")
    app.state.model = model
    app.state.sessions = []

    def fresh_cache():
        if octree_bytes is not None:
            # load_octree reads from a path; stage the snapshot bytes
            with tempfile.NamedTemporaryFile(suffix=".mgoc", delete=False) as tf:
                tf.write(octree_bytes)
                tmp = tf.name
            try:
                return load_octree(tmp, max_elements=params["max_elements"])
            finally:
                os.unlink(tmp)
        return bake_initial(model, model.layout, model.bounds,
                            depth=params["bake_depth"],
                            max_elements=params["max_elements"],
                            max_depth=params["max_depth"])

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "model": str(model_path or "in-memory"),
                "octree": str(octree_path or "baked-per-session"),
                "embedding_dim": model.embedding_dim,
                "cells": model.layout.n_cells,
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
                }}

    @app.websocket("/fly")
    async def fly(ws: WebSocket):
        await ws.accept()
        cache = await anyio.to_thread.run_sync(fresh_cache)
        session = Session(model, cache, refine_k, default_quality,
                          min_frame_seconds=min_frame_seconds)
        app.state.sessions.append(session)
        session.thread.start()

        async def sender():
            # timed waits keep this cancellable even while the render thread
            # is quiet; abandon_on_cancel lets teardown proceed immediately
            while not session.stopped:
                await anyio.to_thread.run_sync(
                    lambda: session.out_event.wait(0.2), abandon_on_cancel=True)
                session.out_event.clear()
                while session.outbox:
                    payload = session.outbox.popleft()
                    if isinstance(payload, bytes):
                        await ws.send_bytes(payload)
                    else:
                        await ws.send_text(payload)

        try:
            async with anyio.create_task_group() as tg:
                tg.start_soon(sender)
                try:
                    while True:
                        raw = await ws.receive_text()
                        try:
                            data = json.loads(raw)
                            kind = data.get("type")
                            if kind == "camera":
                                session.submit(CameraMsg(**data))
                            elif kind == "config":
                                session.configure(ConfigMsg(**data))
                            else:
                                raise ValueError(f"unknown message type: {kind!r}")
                        except (ValueError, ValidationError) as e:
                            await ws.send_text(json.dumps(
                                {"type": "error", "message": str(e)}))
                except WebSocketDisconnect:
                    pass
                finally:
                    session.stop()
                    tg.cancel_scope.cancel()
        finally:
            session.stop()
            session.thread.join(timeout=10)
    return app
