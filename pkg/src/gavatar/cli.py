"""Command-line entry points.

Exit codes: 0 success, 1 usage error, 2 runtime error.  With --json, errors
and primary results also emit one machine-readable JSON line.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .animate import FrameStamp, RefinementNet
from .assets import (Checkpoint, SyntheticSpec, load_checkpoint, load_dataset,
                     load_png, make_synthetic, read_ply, save_checkpoint,
                     save_pfm, save_png, write_ply)
from .body import Pose, forward_kinematics, load_body
from .cloud import ColoredPointCloud, fuse_parts, init_from_points, init_from_vertices, select_frames
from .errors import EngineError
from .geometry import rotmat_from_axis_angle
from .render import Camera, render
from .training import TrainConfig, psnr, ssim, train


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise _UsageError(message)


def _emit(args, payload: dict, text: str | None = None):
    if text:
        print(text)
    if getattr(args, 'json', False):
        print(json.dumps(payload))


def _pose_joints_for_selection(body, pose: Pose) -> np.ndarray:
    g = forward_kinematics(body, pose, include_root=False)
    # posed joint positions: apply each bone map to its own rest joint
    return (np.einsum('nij,nj->ni', g.matrices[:, :3, :3], body.joints)
            + g.matrices[:, :3, 3])


def cmd_synth(args) -> int:
    if args.spec:
        spec = SyntheticSpec.from_json(args.spec)
    else:
        spec = SyntheticSpec(frames=args.frames, width=args.size, height=args.size,
                             gaussians=args.gaussians, swing_joint=args.swing_joint,
                             swing_amplitude_deg=args.swing_amplitude, seed=args.seed)
    manifest, ckpt = make_synthetic(spec, args.out)
    _emit(args, {'manifest': str(manifest), 'gt_checkpoint': str(ckpt)},
          f"wrote {manifest} and {ckpt}")
    return 0


def cmd_init(args) -> int:
    body = load_body(args.body)
    if args.ply:
        clouds = [read_ply(p) for p in args.ply]
        pc = ColoredPointCloud(np.concatenate([c.positions for c in clouds]),
                               np.concatenate([c.colors for c in clouds]))
        cloud = init_from_points(pc, body)
        source = f"{len(pc)} points from {len(args.ply)} PLY file(s)"
    else:
        cloud = init_from_vertices(body)
        source = f"{body.vertex_count} template vertices"
    net = RefinementNet(joint_count=body.joint_count, seed=args.seed)
    ckpt = Checkpoint(cloud=cloud, net=net, config=TrainConfig(seed=args.seed), iteration=0)
    save_checkpoint(ckpt, args.out)
    _emit(args, {'gaussians': len(cloud), 'out': str(args.out)},
          f"initialized {len(cloud)} Gaussians from {source} -> {args.out}")
    return 0


def cmd_select_frames(args) -> int:
    dataset = load_dataset(args.dataset)
    body = dataset.load_body()
    rotations, joints = [], []
    for idx in dataset.frame_indices:
        pose = dataset.sample(idx).pose
        rotations.append(pose.root_rotation)
        joints.append(_pose_joints_for_selection(body, pose))
    selection = select_frames(np.stack(rotations), np.stack(joints), body.joints)
    doc = selection.to_json_dict()
    doc['frame_indices'] = [dataset.frame_indices[i] for i in selection.indices]
    print(json.dumps(doc))
    return 0


def cmd_fuse(args) -> int:
    dataset = load_dataset(args.dataset)
    body = dataset.load_body()
    frames = [int(v) for v in args.frames.split(',')]
    plys = args.plys.split(',')
    if len(frames) != len(plys):
        raise _UsageError("--frames and --plys must list the same count")
    parts = [(read_ply(p), dataset.sample(f).pose) for p, f in zip(plys, frames)]
    fused = fuse_parts(parts, body)
    write_ply(args.out, fused)
    _emit(args, {'points': len(fused), 'out': str(args.out)},
          f"fused {len(fused)} canonical points -> {args.out}")
    return 0


def cmd_train(args) -> int:
    dataset = load_dataset(args.dataset)
    body = dataset.load_body()
    cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    overrides = {}
    if args.iters is not None:
        overrides['iterations'] = args.iters
    if args.seed is not None:
        overrides['seed'] = args.seed
    for kv in args.set or []:
        key, _, raw = kv.partition('=')
        if not raw:
            raise _UsageError(f"--set expects key=value, got {kv!r}")
        current = getattr(TrainConfig(), key, None)
        if current is None:
            raise _UsageError(f"unknown config key {key!r}")
        overrides[key] = type(current)(raw) if not isinstance(current, bool) \
            else raw.lower() in ('1', 'true', 'yes', 'on')
    cfg = cfg.with_overrides(overrides)
    init_cloud = None
    if args.init_ply:
        init_cloud = init_from_points(read_ply(args.init_ply), body)
    elif args.init_checkpoint:
        init_cloud = load_checkpoint(args.init_checkpoint).cloud
    result = train(dataset, body, cfg, init_cloud=init_cloud,
                   metrics_path=args.metrics, log=print if args.verbose else None)
    save_checkpoint(Checkpoint.from_train_result(result), args.out)
    final_row = result.metrics[-1] if len(result.metrics) > 1 else ''
    _emit(args, {'out': str(args.out), 'final_metrics': final_row,
                 'gaussians': len(result.cloud)},
          f"trained {cfg.iterations} iterations -> {args.out}\nfinal: {final_row}")
    return 0


def _load_avatar(args):
    ckpt = load_checkpoint(args.checkpoint)
    body = load_body(args.body)
    return ckpt, body


def _orbit_camera(body, spec: str, size: int) -> Camera:
    az, el, radius = (float(v) for v in spec.split(','))
    center = 0.5 * (body.vertices.max(axis=0) + body.vertices.min(axis=0))
    return Camera.orbit(az, el, radius, target=center, width=size, height=size)


def cmd_render(args) -> int:
    ckpt, body = _load_avatar(args)
    if args.dataset and args.frame is not None:
        dataset = load_dataset(args.dataset)
        sample = dataset.sample(args.frame)
        pose, cam = sample.pose, sample.camera
        stamp = dataset.stamp(args.frame)
        background = dataset.background
    else:
        pose = Pose.rest(body.joint_count)
        cam = _orbit_camera(body, args.orbit, args.size)
        stamp = FrameStamp(0, 1)
        background = np.zeros(3)
    result = render(ckpt.cloud, body, pose, ckpt.net, stamp, cam, background=background)
    out = Path(args.out)
    if out.suffix.lower() == '.pfm':
        save_pfm(out, result.image)
    else:
        save_png(out, result.image)
    _emit(args, {'out': str(out)}, f"rendered {out}")
    return 0


def cmd_animate(args) -> int:
    ckpt, body = _load_avatar(args)
    script = json.loads(Path(args.script).read_text())
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if 'poses' in script:
        poses = [_pose_from_script(p, body.joint_count) for p in script['poses']]
    else:
        poses = _generated_poses(script, body.joint_count)
    cam = _orbit_camera(body, args.orbit, args.size)
    paths = []
    for t, pose in enumerate(poses):
        result = render(ckpt.cloud, body, pose, ckpt.net,
                        FrameStamp(t, len(poses)), cam)
        path = out_dir / f'frame_{t:04d}.png'
        save_png(path, result.image)
        paths.append(str(path))
    _emit(args, {'frames': len(paths), 'out': str(out_dir)},
          f"wrote {len(paths)} frames to {out_dir}")
    return 0


def _pose_from_script(doc: dict, joint_count: int) -> Pose:
    joints = np.asarray(doc.get('joints', np.zeros((joint_count, 3))), dtype=np.float64)
    return Pose(joints,
                root_rotation=rotmat_from_axis_angle(
                    np.asarray(doc.get('root_rotation_aa', [0, 0, 0]), dtype=np.float64)),
                root_translation=np.asarray(doc.get('root_translation', [0, 0, 0]),
                                            dtype=np.float64))


def _generated_poses(script: dict, joint_count: int) -> list[Pose]:
    frames = int(script.get('frames', 30))
    joint = int(script.get('joint', joint_count - 1))
    axis = np.asarray(script.get('axis', [0, 0, 1]), dtype=np.float64)
    amplitude = np.radians(float(script.get('amplitude_deg', 45.0)))
    cycles = float(script.get('cycles', 1.0))
    yaw = np.radians(float(script.get('yaw_sweep_deg', 0.0)))
    poses = []
    for t in range(frames):
        frac = t / max(frames - 1, 1)
        joints = np.zeros((joint_count, 3))
        joints[joint] = axis * amplitude * np.sin(2 * np.pi * cycles * frac)
        root = rotmat_from_axis_angle(np.array([0.0, yaw * frac, 0.0]))
        poses.append(Pose(joints, root_rotation=root))
    return poses


def cmd_eval(args) -> int:
    if args.pred and args.gt:
        a, b = load_png(args.pred), load_png(args.gt)
        p, s = psnr(a, b), ssim(a, b)
        text = f"psnr={'inf' if np.isinf(p) else f'{p:.4f}'} ssim={s:.4f}"
        print(text)
        if args.json:
            print(json.dumps({'psnr': None if np.isinf(p) else p, 'ssim': s}))
        return 0
    if not args.checkpoint or not args.dataset:
        raise _UsageError("eval requires --pred/--gt or --checkpoint/--dataset")
    ckpt = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.dataset)
    body = dataset.load_body()
    frames = ([int(v) for v in args.frames.split(',')] if args.frames
              else dataset.frame_indices)
    rows = []
    for f in frames:
        sample = dataset.sample(f)
        result = render(ckpt.cloud, body, sample.pose, ckpt.net, dataset.stamp(f),
                        sample.camera, background=dataset.background)
        p = psnr(result.image, sample.image)
        s = ssim(result.image, sample.image)
        rows.append({'frame': f, 'psnr': None if np.isinf(p) else p, 'ssim': s})
        print(f"frame {f}: psnr={'inf' if np.isinf(p) else f'{p:.4f}'} ssim={s:.4f}")
    finite = [r['psnr'] for r in rows if r['psnr'] is not None]
    mean_psnr = float(np.mean(finite)) if finite else float('inf')
    mean_ssim = float(np.mean([r['ssim'] for r in rows]))
    print(f"mean: psnr={mean_psnr if finite else 'inf'} ssim={mean_ssim:.4f}")
    if args.json:
        print(json.dumps({'frames': rows, 'mean_psnr': mean_psnr, 'mean_ssim': mean_ssim}))
    return 0


def cmd_serve(args) -> int:
    import uvicorn
    from .service import create_app
    ckpt, body = _load_avatar(args)
    host, _, port = args.bind.partition(':')
    ui_dir = Path(args.ui) if args.ui else None
    app = create_app(ckpt, body, width=args.size, height=args.size, ui_dir=ui_dir)
    uvicorn.run(app, host=host or '127.0.0.1', port=int(port or 8080), log_level='warning')
    return 0


def cmd_info(args) -> int:
    doc: dict = {}
    if args.body:
        body = load_body(args.body)
        doc['body'] = {'vertices': body.vertex_count, 'faces': body.face_count,
                       'joints': body.joint_count,
                       'has_shape_basis': body.shape_basis is not None}
    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        doc['checkpoint'] = {'gaussians': len(ckpt.cloud), 'sh_degree': ckpt.cloud.degree,
                             'iteration': ckpt.iteration,
                             'net_params': ckpt.net.param_count()}
    if args.dataset:
        ds = load_dataset(args.dataset)
        doc['dataset'] = {'frames': ds.frame_count, 'cameras': len(ds.cameras),
                          'body': str(ds.body_path)}
    if not doc:
        raise _UsageError("info requires --body, --checkpoint, or --dataset")
    print(json.dumps(doc, indent=1))
    return 0


def _build_parser() -> _Parser:
    parser = _Parser(prog='gavatar', description=__doc__)
    parser.add_argument('--json', action='store_true',
                        help='emit a machine-readable trailing JSON line')
    sub = parser.add_subparsers(dest='command')

    p = sub.add_parser('synth', help='generate a synthetic dataset')
    p.add_argument('--spec', help='JSON spec file')
    p.add_argument('--out', required=True)
    p.add_argument('--frames', type=int, default=60)
    p.add_argument('--size', type=int, default=64)
    p.add_argument('--gaussians', type=int, default=500)
    p.add_argument('--swing-joint', type=int, default=-1)
    p.add_argument('--swing-amplitude', type=float, default=0.0)
    p.add_argument('--seed', type=int, default=11)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser('init', help='build a Gaussian cloud checkpoint')
    p.add_argument('--body', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--ply', action='append', help='canonical colored PLY (repeatable)')
    p.add_argument('--seed', type=int, default=0)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser('select-frames', help='pick four yaw-spanning frames')
    p.add_argument('--dataset', required=True)
    p.set_defaults(func=cmd_select_frames)

    p = sub.add_parser('fuse', help='canonicalize and fuse posed point-cloud parts')
    p.add_argument('--dataset', required=True)
    p.add_argument('--frames', required=True, help='comma-separated frame indices')
    p.add_argument('--plys', required=True, help='comma-separated PLY paths')
    p.add_argument('--body', help='unused; body comes from the dataset')
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser('train', help='fit the avatar to a dataset')
    p.add_argument('--dataset', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--config')
    p.add_argument('--iters', type=int)
    p.add_argument('--seed', type=int)
    p.add_argument('--metrics', help='CSV metrics log path')
    p.add_argument('--set', action='append', metavar='KEY=VALUE')
    p.add_argument('--init-ply')
    p.add_argument('--init-checkpoint')
    p.add_argument('--verbose', action='store_true')
    p.set_defaults(func=cmd_train)

    p = sub.add_parser('render', help='render one frame to PNG or PFM')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--body', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--dataset')
    p.add_argument('--frame', type=int)
    p.add_argument('--orbit', default='0,10,2.6', help='azimuth_deg,elevation_deg,radius_m')
    p.add_argument('--size', type=int, default=256)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser('animate', help='render a pose script to an image sequence')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--body', required=True)
    p.add_argument('--script', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--orbit', default='0,10,2.6')
    p.add_argument('--size', type=int, default=256)
    p.set_defaults(func=cmd_animate)

    p = sub.add_parser('eval', help='PSNR/SSIM of images or checkpoint vs dataset')
    p.add_argument('--pred')
    p.add_argument('--gt')
    p.add_argument('--checkpoint')
    p.add_argument('--dataset')
    p.add_argument('--frames')
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser('serve', help='run the interactive render service')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--body', required=True)
    p.add_argument('--bind', default='127.0.0.1:8080')
    p.add_argument('--size', type=int, default=256)
    p.add_argument('--ui', help='static viewer bundle directory')
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser('info', help='echo asset metadata')
    p.add_argument('--body')
    p.add_argument('--checkpoint')
    p.add_argument('--dataset')
    p.set_defaults(func=cmd_info)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError:
        return 1
    if not getattr(args, 'command', None):
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.func(args) or 0
    except _UsageError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1
    except EngineError as exc:
        sys.stderr.write(f"error: {exc}\n")
        if getattr(args, 'json', False):
            sys.stderr.write(json.dumps({'error': str(exc),
                                         'type': type(exc).__name__}) + '\n')
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        sys.stderr.write(f"unexpected error: {exc}\n")
        if getattr(args, 'json', False):
            sys.stderr.write(json.dumps({'error': str(exc),
                                         'type': type(exc).__name__}) + '\n')
        return 2


def entrypoint() -> None:
    sys.exit(main(sys.argv[1:]))


if __name__ == '__main__':
    entrypoint()
