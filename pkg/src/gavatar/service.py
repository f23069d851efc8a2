"""Long-running render service: a human drives pose and camera interactively.

One render worker owns the splatting; request handlers mutate SessionState
under a short lock and wake the worker.  Mutations are latest-wins per field,
so a fast slider never builds backlog: intermediate states may be skipped but
the final delivered frame always reflects the newest sequence number.
"""

from __future__ import annotations

import asyncio
import io
import json
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Response, WebSocket, WebSocketDisconnect
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles
from PIL import Image

from .animate import FrameStamp
from .assets import Checkpoint, _srgb_encode
from .body import Pose, SkinnedBody
from .geometry import rotmat_from_axis_angle
from .render import Camera, render


@dataclass
class SessionState:
    pose: Pose
    camera: Camera
    stamp: FrameStamp
    background: tuple = (0.0, 0.0, 0.0)
    seq: int = 0
    lock: threading.Lock = field(default_factory=threading.Lock)

    def bump(self) -> int:
        self.seq += 1
        return self.seq


def _encode_png(image64: np.ndarray) -> bytes:
    u8 = np.round(_srgb_encode(image64) * 255.0).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(u8, mode='RGB').save(buf, format='PNG')
    return buf.getvalue()


class RenderSession:
    """Snapshot-isolated rendering over an immutable checkpoint."""

    def __init__(self, checkpoint: Checkpoint | None, body: SkinnedBody | None,
                 width: int = 256, height: int = 256, background=(0.0, 0.0, 0.0)):
        self.checkpoint = checkpoint
        self.body = body
        self.background = background
        joint_count = body.joint_count if body else 0
        center = (0.5 * (body.vertices.max(axis=0) + body.vertices.min(axis=0))
                  if body is not None else np.zeros(3))
        self.default_target = center
        cam = Camera.orbit(0.0, 10.0, 2.6, target=center, width=width, height=height)
        self.state = SessionState(pose=Pose.rest(joint_count), camera=cam,
                                  stamp=FrameStamp(0, 1), background=background)
        self._render_cond = threading.Condition()
        self._dirty = False
        self._last_frame: tuple[int, bytes, float] | None = None
        self._subscribers: list[asyncio.Queue] = []
        self._loop: asyncio.AbstractEventLoop | None = None
        self._worker: threading.Thread | None = None
        self._stop = False

    # -- state mutation (latest wins) --

    def set_pose(self, pose: Pose) -> int:
        with self.state.lock:
            self.state.pose = pose
            seq = self.state.bump()
        self._wake()
        return seq

    def set_camera(self, cam: Camera) -> int:
        with self.state.lock:
            self.state.camera = cam
            seq = self.state.bump()
        self._wake()
        return seq

    def snapshot(self):
        with self.state.lock:
            return self.state.pose, self.state.camera, self.state.stamp, self.state.seq

    # -- rendering --

    def render_current(self) -> tuple[bytes, int, float]:
        pose, cam, stamp, seq = self.snapshot()
        t0 = time.perf_counter()
        result = render(self.checkpoint.cloud, self.body, pose, self.checkpoint.net,
                        stamp, cam, background=self.background)
        ms = (time.perf_counter() - t0) * 1000.0
        return _encode_png(result.image), seq, ms

    def _wake(self):
        with self._render_cond:
            self._dirty = True
            self._render_cond.notify()

    def start_worker(self, loop: asyncio.AbstractEventLoop):
        self._loop = loop
        if self._worker is None:
            self._worker = threading.Thread(target=self._worker_loop, daemon=True)
            self._worker.start()

    def stop_worker(self):
        self._stop = True
        self._wake()

    def _worker_loop(self):
        while not self._stop:
            with self._render_cond:
                while not self._dirty and not self._stop:
                    self._render_cond.wait(timeout=0.5)
                self._dirty = False
            if self._stop:
                return
            png, seq, ms = self.render_current()
            # if a newer mutation raced in, the loop renders again right away
            self._last_frame = (seq, png, ms)
            self._publish(seq, png, ms)

    def _publish(self, seq: int, png: bytes, ms: float):
        if self._loop is None:
            return
        for q in list(self._subscribers):
            self._loop.call_soon_threadsafe(q.put_nowait, (seq, png, ms))

    def subscribe(self) -> asyncio.Queue:
        q: asyncio.Queue = asyncio.Queue()
        self._subscribers.append(q)
        return q

    def unsubscribe(self, q: asyncio.Queue):
        if q in self._subscribers:
            self._subscribers.remove(q)


def create_app(checkpoint: Checkpoint | None = None, body: SkinnedBody | None = None,
               width: int = 256, height: int = 256, background=(0.0, 0.0, 0.0),
               ui_dir: Path | None = None) -> FastAPI:
    app = FastAPI(title='gavatar render service')
    session = RenderSession(checkpoint, body, width, height, background)
    app.state.session = session

    @app.on_event('startup')
    async def _startup():
        session.start_worker(asyncio.get_running_loop())

    @app.on_event('shutdown')
    async def _shutdown():
        session.stop_worker()

    def _ready() -> JSONResponse | None:
        if session.checkpoint is None or session.body is None:
            return JSONResponse({'error': 'no checkpoint loaded'}, status_code=409)
        return None

    @app.get('/info')
    async def info():
        if (resp := _ready()) is not None:
            return resp
        b = session.body
        names = b.joint_names or [f'joint_{i}' for i in range(b.joint_count)]
        return {
            'joints': b.joint_count,
            'joint_names': names,
            'gaussians': len(session.checkpoint.cloud),
            'width': session.state.camera.width,
            'height': session.state.camera.height,
            'seq': session.state.seq,
        }

    @app.post('/pose')
    async def set_pose(payload: dict):
        if (resp := _ready()) is not None:
            return resp
        joints = payload.get('joints')
        expected = session.body.joint_count
        if joints is None or len(joints) != expected:
            got = 0 if joints is None else len(joints)
            return JSONResponse(
                {'error': f'expected {expected} joint rotations, got {got}'},
                status_code=400)
        try:
            pose = Pose(
                joint_rotations=np.asarray(joints, dtype=np.float64),
                root_rotation=rotmat_from_axis_angle(
                    np.asarray(payload.get('root_rotation_aa', [0, 0, 0]), dtype=np.float64)),
                root_translation=np.asarray(payload.get('root_translation', [0, 0, 0]),
                                            dtype=np.float64),
                betas=(np.asarray(payload['betas'], dtype=np.float64)
                       if 'betas' in payload else None))
            pose.validate(expected)
        except Exception as exc:
            return JSONResponse({'error': f'invalid pose: {exc}'}, status_code=400)
        return {'seq': session.set_pose(pose)}

    @app.post('/camera')
    async def set_camera(payload: dict):
        if (resp := _ready()) is not None:
            return resp
        try:
            target = payload.get('target')
            cam = Camera.orbit(
                azimuth_deg=float(payload['azimuth_deg']),
                elevation_deg=float(payload['elevation_deg']),
                radius=float(payload['radius_m']),
                target=(np.asarray(target, dtype=np.float64) if target is not None
                        else session.default_target),
                width=session.state.camera.width,
                height=session.state.camera.height)
        except Exception as exc:
            return JSONResponse({'error': f'invalid camera: {exc}'}, status_code=400)
        return {'seq': session.set_camera(cam)}

    @app.post('/camera/raw')
    async def set_camera_raw(payload: dict):
        if (resp := _ready()) is not None:
            return resp
        try:
            cur = session.state.camera
            cam = Camera(
                fx=float(payload.get('fx', cur.fx)), fy=float(payload.get('fy', cur.fy)),
                cx=float(payload.get('cx', cur.cx)), cy=float(payload.get('cy', cur.cy)),
                rotation=np.asarray(payload['rotation'], dtype=np.float64),
                translation=np.asarray(payload['translation'], dtype=np.float64),
                width=cur.width, height=cur.height, near=cur.near, far=cur.far)
        except Exception as exc:
            return JSONResponse({'error': f'invalid camera: {exc}'}, status_code=400)
        return {'seq': session.set_camera(cam)}

    @app.get('/frame.png')
    async def frame():
        if (resp := _ready()) is not None:
            return resp
        png, seq, ms = await asyncio.to_thread(session.render_current)
        return Response(content=png, media_type='image/png',
                        headers={'X-Seq': str(seq), 'X-Render-Ms': f'{ms:.2f}'})

    @app.websocket('/stream')
    async def stream(ws: WebSocket):
        await ws.accept()
        if session.checkpoint is None or session.body is None:
            await ws.close(code=1013)
            return
        queue = session.subscribe()
        try:
            # prime the canvas with the current state
            png, seq, ms = await asyncio.to_thread(session.render_current)
            await _send_frame(ws, seq, png, ms)
            last_seq = seq
            while True:
                seq, png, ms = await queue.get()
                # drain to the newest pending frame (latest wins)
                while not queue.empty():
                    seq, png, ms = queue.get_nowait()
                if seq < last_seq:
                    continue
                last_seq = seq
                await _send_frame(ws, seq, png, ms)
        except WebSocketDisconnect:
            pass
        finally:
            session.unsubscribe(queue)

    async def _send_frame(ws: WebSocket, seq: int, png: bytes, ms: float):
        pose, cam, _, _ = session.snapshot()
        await ws.send_text(json.dumps({'seq': seq, 'render_ms': round(ms, 2),
                                       'width': cam.width, 'height': cam.height}))
        await ws.send_bytes(png)

    if ui_dir is not None and Path(ui_dir).is_dir():
        app.mount('/ui', StaticFiles(directory=str(ui_dir), html=True), name='ui')

    return app
