"""Persistence: images, point clouds, dataset manifests, checkpoints, and the
synthetic-dataset generator.

Formats:
  - PNG: 8-bit, fixed sRGB transfer applied on save and inverted on load.
  - PFM: 32-bit float linear, little-endian, for exact-comparison fixtures.
  - PLY: ascii or binary-little-endian, properties x y z (float32) and
    red green blue (uint8).
  - Manifest: JSON; see DatasetManifest.
  - Checkpoint: "GAVC\\0" sectioned container (see container.py).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from PIL import Image

from . import container
from .animate import FrameStamp, RefinementNet
from .body import Pose, SkinnedBody, load_body, save_body
from .cloud import GaussianCloud, ColoredPointCloud, init_from_points, logit
from .errors import (MissingFile, ParseError, SchemaVersionMismatch,
                     UnsupportedPlyVariant)
from .fixtures import make_cylinder_body, make_smpl_sized_body
from .geometry import PEConfig, rotmat_from_axis_angle
from .render import Camera, render
from .training import TrainConfig, TrainResult

MANIFEST_VERSION = 1
CHECKPOINT_MAGIC = b'GAVC\0'
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# images


def _srgb_encode(linear: np.ndarray) -> np.ndarray:
    linear = np.clip(linear, 0.0, 1.0)
    return np.where(linear <= 0.0031308, 12.92 * linear,
                    1.055 * np.power(linear, 1 / 2.4) - 0.055)


def _srgb_decode(encoded: np.ndarray) -> np.ndarray:
    return np.where(encoded <= 0.04045, encoded / 12.92,
                    np.power((encoded + 0.055) / 1.055, 2.4))


def save_png(path, linear_rgb: np.ndarray) -> None:
    """Write a linear [0, 1] image as 8-bit sRGB PNG."""
    u8 = np.round(_srgb_encode(np.asarray(linear_rgb)) * 255.0).astype(np.uint8)
    Image.fromarray(u8, mode='RGB').save(path)


def load_png(path) -> np.ndarray:
    """Read a PNG back to a linear float64 image."""
    with Image.open(path) as img:
        u8 = np.asarray(img.convert('RGB'), dtype=np.float64)
    return _srgb_decode(u8 / 255.0)


def save_mask(path, mask: np.ndarray) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode='L').save(path)


def load_mask(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert('L')) > 127


def save_pfm(path, image: np.ndarray) -> None:
    """Little-endian PFM, rows stored bottom-to-top per the format."""
    image = np.asarray(image, dtype=np.float32)
    color = image.ndim == 3
    h, w = image.shape[:2]
    with open(path, 'wb') as fh:
        fh.write(b'PF\n' if color else b'Pf\n')
        fh.write(f'{w} {h}\n'.encode('ascii'))
        fh.write(b'-1.0\n')
        fh.write(np.ascontiguousarray(image[::-1]).tobytes())


def load_pfm(path) -> np.ndarray:
    with open(path, 'rb') as fh:
        header = fh.readline().strip()
        if header not in (b'PF', b'Pf'):
            raise ParseError(f"{path}: not a PFM file")
        w, h = (int(v) for v in fh.readline().split())
        scale = float(fh.readline())
        data = np.frombuffer(fh.read(), dtype='<f4' if scale < 0 else '>f4')
    channels = 3 if header == b'PF' else 1
    img = data.reshape(h, w, channels) if channels == 3 else data.reshape(h, w)
    return np.asarray(img[::-1], dtype=np.float32)


# ---------------------------------------------------------------------------
# PLY point clouds


def write_ply(path, pc: ColoredPointCloud, binary: bool = True) -> None:
    pos = np.asarray(pc.positions, dtype='<f4')
    col = np.round(np.asarray(pc.colors, dtype=np.float64) * 255.0).astype(np.uint8)
    fmt = 'binary_little_endian' if binary else 'ascii'
    header = (f"ply\nformat {fmt} 1.0\nelement vertex {len(pos)}\n"
              "property float x\nproperty float y\nproperty float z\n"
              "property uchar red\nproperty uchar green\nproperty uchar blue\n"
              "end_header\n")
    with open(path, 'wb') as fh:
        fh.write(header.encode('ascii'))
        if binary:
            rec = np.zeros(len(pos), dtype=[('xyz', '<f4', 3), ('rgb', 'u1', 3)])
            rec['xyz'] = pos
            rec['rgb'] = col
            fh.write(rec.tobytes())
        else:
            for p, c in zip(pos, col):
                fh.write(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g} {c[0]} {c[1]} {c[2]}\n"
                         .encode('ascii'))


def read_ply(path) -> ColoredPointCloud:
    with open(path, 'rb') as fh:
        line = fh.readline().strip()
        if line != b'ply':
            raise UnsupportedPlyVariant(f"{path}: missing ply magic")
        fmt = None
        count = 0
        props: list[tuple[str, str]] = []
        while True:
            line = fh.readline()
            if not line:
                raise ParseError(f"{path}: unterminated header")
            tokens = line.strip().split()
            if not tokens:
                continue
            if tokens[0] == b'format':
                fmt = tokens[1].decode()
            elif tokens[0] == b'comment':
                continue
            elif tokens[0] == b'element':
                if tokens[1] != b'vertex':
                    raise UnsupportedPlyVariant(f"{path}: unsupported element {tokens[1]!r}")
                count = int(tokens[2])
            elif tokens[0] == b'property':
                props.append((tokens[1].decode(), tokens[2].decode()))
            elif tokens[0] == b'end_header':
                break
        if fmt == 'binary_big_endian':
            raise UnsupportedPlyVariant(f"{path}: big-endian PLY is not supported")
        if fmt not in ('ascii', 'binary_little_endian'):
            raise UnsupportedPlyVariant(f"{path}: unknown format {fmt!r}")
        expected = [('float', 'x'), ('float', 'y'), ('float', 'z'),
                    ('uchar', 'red'), ('uchar', 'green'), ('uchar', 'blue')]
        if props != expected:
            raise UnsupportedPlyVariant(
                f"{path}: expected properties x y z red green blue, got {props}")
        if fmt == 'binary_little_endian':
            rec = np.frombuffer(fh.read(count * 15),
                                dtype=[('xyz', '<f4', 3), ('rgb', 'u1', 3)], count=count)
            pos = rec['xyz'].astype(np.float64)
            col = rec['rgb'].astype(np.float64) / 255.0
        else:
            rows = [fh.readline().split() for _ in range(count)]
            arr = np.array(rows, dtype=np.float64)
            pos = arr[:, :3].astype(np.float32).astype(np.float64)
            col = arr[:, 3:6] / 255.0
    return ColoredPointCloud(pos, col)


# ---------------------------------------------------------------------------
# dataset manifest


def _pose_to_json(pose: Pose) -> dict:
    from .geometry import rotmat_to_quat
    # store the root rotation as an axis-angle triple for readability
    q = rotmat_to_quat(pose.root_rotation)
    angle = 2.0 * np.arccos(np.clip(q[0], -1.0, 1.0))
    axis = q[1:]
    norm = np.linalg.norm(axis)
    aa = axis / norm * angle if norm > 1e-12 else np.zeros(3)
    doc = {
        'joints': pose.joint_rotations.tolist(),
        'root_rotation_aa': aa.tolist(),
        'root_translation': pose.root_translation.tolist(),
    }
    if pose.betas is not None:
        doc['betas'] = pose.betas.tolist()
    return doc


def _pose_from_json(doc: dict) -> Pose:
    return Pose(
        joint_rotations=np.asarray(doc['joints'], dtype=np.float64),
        root_rotation=rotmat_from_axis_angle(np.asarray(doc['root_rotation_aa'])),
        root_translation=np.asarray(doc['root_translation'], dtype=np.float64),
        betas=np.asarray(doc['betas'], dtype=np.float64) if 'betas' in doc else None)


def _camera_to_json(cam: Camera) -> dict:
    return {'fx': cam.fx, 'fy': cam.fy, 'cx': cam.cx, 'cy': cam.cy,
            'rotation': cam.rotation.tolist(), 'translation': cam.translation.tolist(),
            'width': cam.width, 'height': cam.height, 'near': cam.near, 'far': cam.far}


def _camera_from_json(doc: dict) -> Camera:
    return Camera(fx=doc['fx'], fy=doc['fy'], cx=doc['cx'], cy=doc['cy'],
                  rotation=np.asarray(doc['rotation']),
                  translation=np.asarray(doc['translation']),
                  width=doc['width'], height=doc['height'],
                  near=doc.get('near', 0.01), far=doc.get('far', 100.0))


@dataclass
class TrainSample:
    frame: int
    image: np.ndarray   # (H, W, 3) f64, mask already applied
    mask: np.ndarray    # (H, W) bool
    camera: Camera
    pose: Pose


@dataclass
class Dataset:
    root: Path
    body_path: Path
    background: np.ndarray
    cameras: dict[str, Camera]
    frames: list[dict]
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def frame_indices(self) -> list[int]:
        return [f['index'] for f in self.frames]

    @property
    def frame_count(self) -> int:
        return len(self.frames)

    def stamp(self, frame: int) -> FrameStamp:
        rank = sorted(self.frame_indices).index(frame)
        return FrameStamp(rank, self.frame_count)

    def load_body(self) -> SkinnedBody:
        return load_body(self.body_path)

    def sample(self, frame: int) -> TrainSample:
        if frame in self._cache:
            return self._cache[frame]
        rec = next((f for f in self.frames if f['index'] == frame), None)
        if rec is None:
            raise KeyError(f"frame {frame} not in dataset")
        image = load_png(self.root / rec['image'])
        mask = load_mask(self.root / rec['mask'])
        image = np.where(mask[..., None], image, self.background)
        s = TrainSample(frame=frame, image=image, mask=mask,
                        camera=self.cameras[rec['camera']],
                        pose=_pose_from_json(rec['pose']))
        self._cache[frame] = s
        return s


def load_dataset(manifest_path) -> Dataset:
    """Parse and validate a dataset manifest; referenced files must exist."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise MissingFile(f"manifest not found: {manifest_path}")
    try:
        doc = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{manifest_path}: invalid JSON ({exc})") from exc
    if doc.get('version') != MANIFEST_VERSION:
        raise SchemaVersionMismatch(
            f"{manifest_path}: manifest version {doc.get('version')}, "
            f"expected {MANIFEST_VERSION}")
    root = manifest_path.parent
    body_path = root / doc['body']
    if not body_path.exists():
        raise MissingFile(f"body file not found: {body_path}")
    cameras = {name: _camera_from_json(c) for name, c in doc.get('cameras', {}).items()}
    if not cameras:
        raise ParseError(f"{manifest_path}: at least one camera required")
    if 'frames' not in doc:
        raise ParseError(f"{manifest_path}: missing frames list")
    frames = doc['frames']
    for f in frames:
        missing = {'index', 'image', 'mask', 'camera', 'pose'} - set(f)
        if missing:
            raise ParseError(f"{manifest_path}: frame record missing {sorted(missing)}")
    indices = [f['index'] for f in frames]
    if len(set(indices)) != len(indices):
        raise ParseError(f"{manifest_path}: duplicate frame indices")
    for f in frames:
        for key in ('image', 'mask'):
            p = root / f[key]
            if not p.exists():
                raise MissingFile(f"referenced file not found: {p}")
        if f['camera'] not in cameras:
            raise ParseError(f"{manifest_path}: frame {f['index']} references "
                             f"unknown camera {f['camera']!r}")
    background = np.asarray(doc.get('background', [0.0, 0.0, 0.0]), dtype=np.float64)
    return Dataset(root=root, body_path=body_path, background=background,
                   cameras=cameras, frames=frames)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    cloud: GaussianCloud
    net: RefinementNet
    config: TrainConfig
    iteration: int
    rng_state: dict | None = None

    @staticmethod
    def from_train_result(result: TrainResult) -> "Checkpoint":
        return Checkpoint(cloud=result.cloud, net=result.net, config=result.config,
                          iteration=result.iterations, rng_state=result.rng_state)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    cloud = ckpt.cloud
    meta = {
        'degree': cloud.degree,
        'iteration': ckpt.iteration,
        'net': {
            'joint_count': ckpt.net.joint_count,
            'beta_count': ckpt.net.beta_count,
            'hidden': ckpt.net.hidden,
            'pose_embed': ckpt.net.pose_embed,
            'pe_frequencies': ckpt.net.pe.frequencies,
            'seed': ckpt.net.seed,
        },
        'config': {f.name: getattr(ckpt.config, f.name)
                   for f in fields(TrainConfig)},
        'rng_state': _jsonable(ckpt.rng_state),
    }
    sections = {
        'meta_json': np.frombuffer(json.dumps(meta, sort_keys=True).encode('utf-8'),
                                   dtype=np.uint8),
        'positions': cloud.positions.astype('<f8'),
        'rotations': cloud.rotations.astype('<f8'),
        'scales': cloud.scales.astype('<f8'),
        'opacity_logits': cloud.opacity_logits.astype('<f8'),
        'sh': cloud.sh.astype('<f8'),
        'bind_vertex': cloud.bind_vertex.astype('<i8'),
        'bind_face': cloud.bind_face.astype('<i8'),
        'bind_weights': cloud.bind_weights.astype('<f8'),
    }
    for key in sorted(ckpt.net.params):
        sections[f'net.{key}'] = ckpt.net.params[key].astype('<f8')
    container.write_container(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, sections)


def load_checkpoint(path) -> Checkpoint:
    sections = container.read_container(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    meta = json.loads(sections['meta_json'].tobytes().decode('utf-8'))
    cloud = GaussianCloud(
        positions=sections['positions'], rotations=sections['rotations'],
        scales=sections['scales'], opacity_logits=sections['opacity_logits'],
        sh=sections['sh'], degree=int(meta['degree']),
        bind_vertex=sections['bind_vertex'], bind_face=sections['bind_face'],
        bind_weights=sections['bind_weights'])
    nm = meta['net']
    params = {key[len('net.'):]: arr for key, arr in sections.items()
              if key.startswith('net.')}
    net = RefinementNet(joint_count=nm['joint_count'], beta_count=nm['beta_count'],
                        hidden=nm['hidden'], pose_embed=nm['pose_embed'],
                        pe=PEConfig(frequencies=nm['pe_frequencies']),
                        seed=nm['seed'], params=params)
    config = TrainConfig(**meta['config'])
    return Checkpoint(cloud=cloud, net=net, config=config,
                      iteration=int(meta['iteration']), rng_state=meta['rng_state'])


def _jsonable(value):
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    return value


# ---------------------------------------------------------------------------
# synthetic datasets


@dataclass
class SyntheticSpec:
    """Recipe for a self-rendered dataset with a known generating avatar."""
    name: str = 'turntable'
    body: str = 'cylinder2'            # cylinder2 | smpl_sized
    frames: int = 60
    width: int = 64
    height: int = 64
    gaussians: int = 500
    yaw_start_deg: float = 0.0
    yaw_end_deg: float = 360.0
    swing_joint: int = -1              # -1 disables the pose script
    swing_amplitude_deg: float = 0.0
    swing_cycles: float = 1.0
    camera_radius: float = 2.6
    camera_elevation_deg: float = 8.0
    camera_fov_deg: float = 55.0
    background: tuple = (0.0, 0.0, 0.0)
    seed: int = 11

    @staticmethod
    def from_json(path) -> "SyntheticSpec":
        doc = json.loads(Path(path).read_text())
        return SyntheticSpec(**doc)


def _make_body(kind: str) -> SkinnedBody:
    if kind == 'cylinder2':
        return make_cylinder_body()
    if kind == 'smpl_sized':
        return make_smpl_sized_body()
    raise ValueError(f"unknown body kind {kind!r}")


def _surface_points(body: SkinnedBody, count: int, rng: np.random.Generator):
    tri = body.vertices[body.faces]
    areas = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]),
                                 axis=1)
    face_idx = rng.choice(len(tri), size=count, p=areas / areas.sum())
    r1 = np.sqrt(rng.uniform(size=count))
    r2 = rng.uniform(size=count)
    a, b, c = tri[face_idx, 0], tri[face_idx, 1], tri[face_idx, 2]
    pts = (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c
    return pts


def _smooth_colors(points: np.ndarray) -> np.ndarray:
    y = points[:, 1]
    y01 = (y - y.min()) / max(y.max() - y.min(), 1e-9)
    ang = np.arctan2(points[:, 2], points[:, 0])
    rgb = np.stack([
        0.55 + 0.3 * np.sin(2 * np.pi * y01),
        0.5 + 0.3 * np.sin(ang),
        0.5 + 0.3 * np.cos(2 * np.pi * y01 + ang),
    ], axis=1)
    return np.clip(rgb, 0.05, 0.95)


def synthetic_pose(spec: SyntheticSpec, body: SkinnedBody, t: int) -> Pose:
    frac = t / max(spec.frames - 1, 1)
    yaw = np.radians(spec.yaw_start_deg + (spec.yaw_end_deg - spec.yaw_start_deg) * frac)
    joints = np.zeros((body.joint_count, 3))
    if 0 <= spec.swing_joint < body.joint_count and spec.swing_amplitude_deg:
        angle = np.radians(spec.swing_amplitude_deg) * np.sin(
            2 * np.pi * spec.swing_cycles * frac)
        joints[spec.swing_joint] = [0.0, 0.0, angle]
    root = rotmat_from_axis_angle(np.array([0.0, yaw, 0.0]))
    return Pose(joints, root_rotation=root, root_translation=np.zeros(3))


def synthetic_camera(spec: SyntheticSpec, body: SkinnedBody) -> Camera:
    center = 0.5 * (body.vertices.max(axis=0) + body.vertices.min(axis=0))
    return Camera.orbit(azimuth_deg=0.0, elevation_deg=spec.camera_elevation_deg,
                        radius=spec.camera_radius, target=center,
                        width=spec.width, height=spec.height,
                        fov_deg=spec.camera_fov_deg)


def make_ground_truth(spec: SyntheticSpec, body: SkinnedBody) -> Checkpoint:
    """The generating avatar: surface-sampled Gaussians with smooth colors."""
    rng = np.random.default_rng(spec.seed)
    points = _surface_points(body, spec.gaussians, rng)
    pc = ColoredPointCloud(points, _smooth_colors(points))
    cloud = init_from_points(pc, body)
    cloud.opacity_logits = np.full(len(cloud), logit(0.95))
    cloud.scales = cloud.scales * 1.4
    net = RefinementNet(joint_count=body.joint_count, seed=spec.seed)
    return Checkpoint(cloud=cloud, net=net, config=TrainConfig(), iteration=0)


def make_synthetic(spec: SyntheticSpec, out_dir) -> tuple[Path, Path]:
    """Render a dataset from a known avatar.

    Returns (manifest path, ground-truth checkpoint path); re-rendering the
    checkpoint at a dataset pose reproduces the stored frame exactly.
    """
    out = Path(out_dir)
    (out / 'images').mkdir(parents=True, exist_ok=True)
    (out / 'masks').mkdir(parents=True, exist_ok=True)
    body = _make_body(spec.body)
    body_path = out / 'body.json'
    save_body(body, body_path)
    gt = make_ground_truth(spec, body)
    cam = synthetic_camera(spec, body)
    frames = []
    for t in range(spec.frames):
        pose = synthetic_pose(spec, body, t)
        stamp = FrameStamp(t, spec.frames)
        result = render(gt.cloud, body, pose, gt.net, stamp, cam,
                        background=spec.background)
        mask = (1.0 - result.framebuffer.transmittance) > 0.5
        img_rel = f'images/frame_{t:04d}.png'
        mask_rel = f'masks/frame_{t:04d}.png'
        save_png(out / img_rel, result.image)
        save_mask(out / mask_rel, mask)
        frames.append({'index': t, 'image': img_rel, 'mask': mask_rel,
                       'camera': 'cam0', 'pose': _pose_to_json(pose)})
    manifest = {
        'version': MANIFEST_VERSION,
        'body': 'body.json',
        'background': list(spec.background),
        'cameras': {'cam0': _camera_to_json(cam)},
        'frames': frames,
    }
    manifest_path = out / 'manifest.json'
    manifest_path.write_text(json.dumps(manifest, indent=1))
    ckpt_path = out / 'gt_checkpoint.gavc'
    save_checkpoint(gt, ckpt_path)
    return manifest_path, ckpt_path
