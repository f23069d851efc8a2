"""Optimization loop: photometric losses, Adam updates, schedules, density
control, and image-quality metrics."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .animate import FrameStamp, RefinementNet
from .body import SkinnedBody, bind_nearest
from .cloud import SCALE_FLOOR, GaussianCloud, logit, sigmoid
from .errors import MaxGaussiansExceeded, NonFiniteGradient, ShapeMismatch
from .geometry import MAX_SH_DEGREE, quat_normalize, quat_to_rotmat
from .render import Camera, RenderGrads, render

_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2


# ---------------------------------------------------------------------------
# config


@dataclass
class TrainConfig:
    lambda_l1: float = 0.8
    lambda_s3im: float = 0.2
    iterations: int = 2000
    # per-group learning rates; position lr is multiplied by the scene extent
    lr_position: float = 1.6e-4
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_opacity: float = 5e-2
    lr_sh_dc: float = 2.5e-3
    lr_sh_rest: float = 1.25e-4
    lr_net: float = 2e-3
    sh_ramp_interval: int = 500
    opacity_reset_interval: int = 1500
    densify_interval: int = 300
    densify_from: int = 500
    densify_until: int = 7000
    densify_grad_threshold: float = 2e-4
    densify_size_frac: float = 0.01
    split_scale_shrink: float = 1.6
    prune_opacity: float = 0.005
    max_gaussians: int = 100000
    augmentation: bool = True
    seed: int = 0
    s3im_samples: int = 4096
    s3im_repeats: int = 10
    s3im_kernel: int = 4
    holdout_frame: int = -1          # -1 picks the middle frame
    metrics_every: int = 200
    workers: int = 1

    def validate(self) -> None:
        if self.lambda_l1 < 0 or self.lambda_s3im < 0:
            raise ValueError("loss weights must be non-negative")
        if self.lambda_l1 + self.lambda_s3im <= 0:
            raise ValueError("at least one loss weight must be positive")
        for name in ('sh_ramp_interval', 'opacity_reset_interval', 'densify_interval',
                     'metrics_every'):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @staticmethod
    def from_file(path) -> "TrainConfig":
        """Parse a plain key = value file (#-comments, bools, ints, floats)."""
        values = {}
        names = {f.name: f.type for f in fields(TrainConfig)}
        for lineno, line in enumerate(open(path), 1):
            line = line.split('#', 1)[0].strip()
            if not line:
                continue
            if '=' not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            key, raw = (part.strip() for part in line.split('=', 1))
            if key not in names:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = _coerce(raw, getattr(TrainConfig, key))
        cfg = TrainConfig(**values)
        cfg.validate()
        return cfg

    def with_overrides(self, overrides: dict) -> "TrainConfig":
        cfg = replace(self, **overrides)
        cfg.validate()
        return cfg


def _coerce(raw: str, default):
    if isinstance(default, bool):
        if raw.lower() in ('true', '1', 'yes', 'on'):
            return True
        if raw.lower() in ('false', '0', 'no', 'off'):
            return False
        raise ValueError(f"expected boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    return float(raw)


# ---------------------------------------------------------------------------
# losses and metrics


def l1_loss(pred: np.ndarray, gt: np.ndarray) -> tuple[float, np.ndarray]:
    diff = pred - gt
    grad = np.sign(diff) / diff.size
    return float(np.abs(diff).mean()), grad


def _block_ssim_and_grad(x: np.ndarray, y: np.ndarray, kernel: int):
    """SSIM over non-overlapping kernel x kernel blocks with its gradient in x.

    Biased (divide-by-n) moments, standard constants.  x and y are
    (side, side, 3) patches with side divisible by kernel.
    """
    side = x.shape[0]
    b = side // kernel
    xb = x.reshape(b, kernel, b, kernel, 3)
    yb = y.reshape(b, kernel, b, kernel, 3)
    n = kernel * kernel
    mx = xb.mean(axis=(1, 3))
    my = yb.mean(axis=(1, 3))
    vx = (xb * xb).mean(axis=(1, 3)) - mx * mx
    vy = (yb * yb).mean(axis=(1, 3)) - my * my
    cxy = (xb * yb).mean(axis=(1, 3)) - mx * my
    n1 = 2 * mx * my + _SSIM_C1
    d1 = mx * mx + my * my + _SSIM_C1
    n2 = 2 * cxy + _SSIM_C2
    d2 = vx + vy + _SSIM_C2
    s = (n1 * n2) / (d1 * d2)
    value = float(s.mean())
    count = s.size
    # dS/d(mu_x), dS/d(var_x), dS/d(cov_xy) per block
    inv = 1.0 / (d1 * d2)
    d_mx = 2 * my * n2 * inv - s * 2 * mx / d1
    d_vx = -s / d2
    d_cxy = 2 * n1 * inv
    exp = lambda a: a[:, None, :, None, :]
    grad = (exp(d_mx) / n
            + exp(d_vx) * 2 * (xb - exp(mx)) / n
            + exp(d_cxy) * (yb - exp(my)) / n) / count
    return value, grad.reshape(side, side, 3)


def s3im_loss(pred: np.ndarray, gt: np.ndarray, cfg: TrainConfig,
              seed: int) -> tuple[float, np.ndarray]:
    """Stochastic structural loss: 1 - mean SSIM over randomly sampled
    virtual patches; the same pixel indices are used for pred and gt within
    a repeat and resampled across repeats."""
    h, w, _ = pred.shape
    flat_pred = pred.reshape(-1, 3)
    flat_gt = gt.reshape(-1, 3)
    side = int(round(np.sqrt(cfg.s3im_samples)))
    if side * side != cfg.s3im_samples:
        raise ValueError("s3im_samples must be a perfect square")
    rng = np.random.default_rng(seed)
    grad = np.zeros_like(flat_pred)
    total = 0.0
    for _ in range(cfg.s3im_repeats):
        idx = rng.integers(0, h * w, size=cfg.s3im_samples)
        px = flat_pred[idx].reshape(side, side, 3)
        gx = flat_gt[idx].reshape(side, side, 3)
        value, g = _block_ssim_and_grad(px, gx, cfg.s3im_kernel)
        total += value
        np.add.at(grad, idx, g.reshape(-1, 3))
    mean_ssim = total / cfg.s3im_repeats
    return 1.0 - mean_ssim, (-grad / cfg.s3im_repeats).reshape(pred.shape)


def loss_total(pred: np.ndarray, gt: np.ndarray, cfg: TrainConfig,
               seed: int) -> tuple[float, np.ndarray, dict]:
    """Weighted L1 + stochastic SSIM loss with its analytic image gradient."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"image shapes differ: {pred.shape} vs {gt.shape}")
    l1, grad = l1_loss(pred, gt)
    grad = cfg.lambda_l1 * grad
    s3im = 0.0
    if cfg.lambda_s3im > 0:
        s3im, g2 = s3im_loss(pred, gt, cfg, seed)
        grad += cfg.lambda_s3im * g2
    total = cfg.lambda_l1 * l1 + cfg.lambda_s3im * s3im
    return total, grad, {'l1': l1, 's3im': s3im}


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images; inf below 1e-12 MSE."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(((a - b) ** 2).mean())
    if mse < 1e-12:
        return float('inf')
    return 10.0 * np.log10(1.0 / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    """Separable valid-mode correlation along the two leading axes."""
    from numpy.lib.stride_tricks import sliding_window_view
    k = len(window)
    out = sliding_window_view(img, k, axis=0) @ window
    out = sliding_window_view(out, k, axis=1) @ window
    return out


def ssim(a: np.ndarray, b: np.ndarray, window_size: int = 11,
         sigma: float = 1.5) -> float:
    """Mean structural similarity with a Gaussian window (valid region only)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[0], a.shape[1]) < window_size:
        raise ValueError("image smaller than the SSIM window")
    win = _gaussian_window(window_size, sigma)
    mu_a = _filter_valid(a, win)
    mu_b = _filter_valid(b, win)
    var_a = _filter_valid(a * a, win) - mu_a ** 2
    var_b = _filter_valid(b * b, win) - mu_b ** 2
    cov = _filter_valid(a * b, win) - mu_a * mu_b
    num = (2 * mu_a * mu_b + _SSIM_C1) * (2 * cov + _SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + _SSIM_C1) * (var_a + var_b + _SSIM_C2)
    return float((num / den).mean())


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @staticmethod
    def like(param: np.ndarray) -> "AdamState":
        return AdamState(np.zeros_like(param), np.zeros_like(param))


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float,
              name: str = "param") -> np.ndarray:
    """Bias-corrected Adam update; returns the new parameter array."""
    if param.shape != grad.shape:
        raise ShapeMismatch(f"{name}: grad shape {grad.shape} != param {param.shape}")
    if not np.isfinite(grad).all():
        raise NonFiniteGradient(f"non-finite gradient in group {name!r}")
    state.step += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    m_hat = state.m / (1 - state.beta1 ** state.step)
    v_hat = state.v / (1 - state.beta2 ** state.step)
    return param - lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------------------
# camera-rotation augmentation


def augment_camera(root_rotation: np.ndarray, root_translation: np.ndarray,
                   cam_rotation: np.ndarray, cam_translation: np.ndarray
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Fold the body's global transform into the camera; the caller then
    renders with the global transform set to identity."""
    r_new = cam_rotation @ root_rotation
    t_new = cam_rotation @ root_translation + cam_translation
    return r_new, t_new


def _augmented_view(pose, cam: Camera):
    r_new, t_new = augment_camera(pose.root_rotation, pose.root_translation,
                                  cam.rotation, cam.translation)
    return pose.without_root(), cam.with_extrinsics(r_new, t_new)


# ---------------------------------------------------------------------------
# schedules and density control


@dataclass
class DensifyStats:
    grad_sum: np.ndarray   # accumulated screen-space positional gradient norms
    seen: np.ndarray       # visibility counts

    @staticmethod
    def zeros(n: int) -> "DensifyStats":
        return DensifyStats(np.zeros(n), np.zeros(n, dtype=np.int64))

    def accumulate(self, grads: RenderGrads) -> None:
        self.grad_sum += grads.screen_grad_norm
        self.seen += grads.visible


def housekeeping(iteration: int, cloud: GaussianCloud, cfg: TrainConfig,
                 body: SkinnedBody | None = None, stats: DensifyStats | None = None,
                 rng: np.random.Generator | None = None, scene_extent: float = 1.0,
                 ) -> tuple[GaussianCloud, np.ndarray | None, dict]:
    """Periodic maintenance: SH degree ramp, opacity reset, clone/split/prune.

    Returns (cloud, index_map, events); index_map gives each surviving row's
    source index (-1 for freshly created Gaussians) whenever the population
    changed, so optimizer state can follow.
    """
    events: dict = {}
    if iteration > 0 and iteration % cfg.sh_ramp_interval == 0:
        if cloud.degree < MAX_SH_DEGREE:
            cloud.degree += 1
            events['sh_degree'] = cloud.degree
    if iteration > 0 and iteration % cfg.opacity_reset_interval == 0:
        cap = logit(0.01)
        cloud.opacity_logits = np.minimum(cloud.opacity_logits, cap)
        events['opacity_reset'] = True
    index_map = None
    if (stats is not None and iteration % cfg.densify_interval == 0
            and cfg.densify_from <= iteration <= cfg.densify_until):
        cloud, index_map, info = _densify(cloud, cfg, body, stats, rng, scene_extent)
        events.update(info)
    return cloud, index_map, events


def _densify(cloud: GaussianCloud, cfg: TrainConfig, body: SkinnedBody | None,
             stats: DensifyStats, rng: np.random.Generator | None,
             scene_extent: float):
    n = len(cloud)
    avg = stats.grad_sum / np.maximum(stats.seen, 1)
    high = avg > cfg.densify_grad_threshold
    size_bound = cfg.densify_size_frac * scene_extent
    small = cloud.scales.max(axis=1) < size_bound
    clone_idx = np.nonzero(high & small)[0]
    split_idx = np.nonzero(high & ~small)[0]
    keep = sigmoid(cloud.opacity_logits) >= cfg.prune_opacity
    keep[split_idx] = False  # split parents are replaced by their children
    new_sources = []
    pieces = [cloud.select(np.nonzero(keep)[0])]
    index_map_parts = [np.nonzero(keep)[0]]
    if len(clone_idx):
        clones = cloud.select(clone_idx)
        pieces.append(clones)
        index_map_parts.append(np.full(len(clone_idx), -1, dtype=np.int64))
        new_sources.append(clones)
    if len(split_idx):
        children = _split_gaussians(cloud.select(split_idx), cfg, rng)
        pieces.append(children)
        index_map_parts.append(np.full(len(children), -1, dtype=np.int64))
        new_sources.append(children)
    merged = pieces[0]
    for extra in pieces[1:]:
        merged = _concat_clouds(merged, extra)
    if len(merged) > cfg.max_gaussians:
        raise MaxGaussiansExceeded(
            f"densification would grow the cloud to {len(merged)} > {cfg.max_gaussians}")
    index_map = np.concatenate(index_map_parts) if len(merged) else np.zeros(0, np.int64)
    fresh = index_map < 0
    if body is not None and fresh.any():
        vidx, fidx = bind_nearest(merged.positions[fresh], body)
        merged.bind_vertex[fresh] = vidx
        merged.bind_face[fresh] = fidx
        merged.bind_weights[fresh] = body.weights[vidx]
    info = {'cloned': len(clone_idx), 'split': len(split_idx),
            'pruned': int(np.sum(~keep) - len(split_idx)), 'total': len(merged)}
    return merged, index_map, info


def _split_gaussians(parents: GaussianCloud, cfg: TrainConfig,
                     rng: np.random.Generator | None) -> GaussianCloud:
    """Replace each oversized Gaussian by two, offset along its major axis."""
    two = _concat_clouds(parents.copy(), parents.copy())
    rot = quat_to_rotmat(quat_normalize(parents.rotations))
    major = np.argmax(parents.scales, axis=1)
    axis = rot[np.arange(len(parents)), :, major]
    sigma = parents.scales[np.arange(len(parents)), major]
    offset = axis * sigma[:, None] * 0.5
    two.positions[:len(parents)] += offset
    two.positions[len(parents):] -= offset
    two.scales = np.maximum(two.scales / cfg.split_scale_shrink, SCALE_FLOOR)
    return two


def _concat_clouds(a: GaussianCloud, b: GaussianCloud) -> GaussianCloud:
    from .cloud import merge_clouds
    return merge_clouds(a, b)


# ---------------------------------------------------------------------------
# training loop


_METRIC_COLUMNS = 'iteration,wall_ms,loss,l1,s3im,psnr_holdout,n_gaussians'


@dataclass
class TrainResult:
    cloud: GaussianCloud
    net: RefinementNet
    config: TrainConfig
    iterations: int
    rng_state: dict
    metrics: list[str] = field(default_factory=list)
    final_loss: float = float('nan')


def train(dataset, body: SkinnedBody, cfg: TrainConfig,
          init_cloud: GaussianCloud | None = None,
          net: RefinementNet | None = None,
          metrics_path=None, log=None) -> TrainResult:
    """Fit the avatar to the dataset; see TrainConfig for every knob."""
    from .cloud import init_from_vertices
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    cloud = (init_cloud or init_from_vertices(body)).copy()
    beta_count = 0
    first_pose = dataset.sample(dataset.frame_indices[0]).pose
    if first_pose.betas is not None:
        beta_count = len(first_pose.betas)
    if net is None:
        net = RefinementNet(joint_count=body.joint_count, beta_count=beta_count,
                            seed=cfg.seed)
    if log:
        log(f"refinement net parameters: {net.param_count()}")
    extent = body.extent()
    frames = list(dataset.frame_indices)
    holdout = cfg.holdout_frame if cfg.holdout_frame >= 0 else frames[len(frames) // 2]
    train_frames = [f for f in frames if f != holdout] or frames

    params = {
        'position': cloud.positions,
        'rotation': cloud.rotations,
        'log_scale': np.log(cloud.scales),
        'opacity': cloud.opacity_logits,
        'sh_dc': cloud.sh[:, :1, :].copy(),
        'sh_rest': cloud.sh[:, 1:, :].copy(),
    }
    states = {k: AdamState.like(v) for k, v in params.items()}
    net_states = {k: AdamState.like(v) for k, v in net.params.items()}
    lrs = {
        'position': cfg.lr_position * extent,
        'rotation': cfg.lr_rotation,
        'log_scale': cfg.lr_scale,
        'opacity': cfg.lr_opacity,
        'sh_dc': cfg.lr_sh_dc,
        'sh_rest': cfg.lr_sh_rest,
    }
    stats = DensifyStats.zeros(len(cloud))
    metrics: list[str] = [_METRIC_COLUMNS]
    t_start = time.perf_counter()
    last_loss = float('nan')

    def sync_cloud_from_params(stepped=None):
        # groups that were not stepped keep their arrays bit-identical
        # (exp(log(s)) would otherwise perturb untouched scales)
        def did(group):
            return stepped is None or group in stepped
        if did('position'):
            cloud.positions = params['position']
        if did('rotation'):
            cloud.rotations = params['rotation']
        if did('log_scale'):
            cloud.scales = np.maximum(np.exp(params['log_scale']), SCALE_FLOOR)
        if did('opacity'):
            cloud.opacity_logits = params['opacity']
        if did('sh_dc') or did('sh_rest'):
            cloud.sh = np.concatenate([params['sh_dc'], params['sh_rest']], axis=1)

    def eval_holdout() -> float:
        sample = dataset.sample(holdout)
        res = _render_sample(cloud, body, net, sample, dataset, cfg, with_grads=False)
        return psnr(res.image, sample.image)

    def write_metrics():
        if metrics_path is not None:
            with open(metrics_path, 'w') as fh:
                fh.write('\n'.join(metrics) + '\n')

    write_metrics()
    for it in range(1, cfg.iterations + 1):
        frame = train_frames[int(rng.integers(len(train_frames)))]
        sample = dataset.sample(frame)
        result = _render_sample(cloud, body, net, sample, dataset, cfg, with_grads=True)
        seed_i = int(rng.integers(2 ** 31))
        loss, grad_img, parts = loss_total(result.image, sample.image, cfg, seed_i)
        if not np.isfinite(loss):
            raise NonFiniteGradient(f"non-finite loss at iteration {it}, frame {frame}")
        last_loss = loss
        grads = result.backward(grad_img, workers=cfg.workers)
        stats.accumulate(grads)

        grad_map = {
            'position': grads.positions,
            'rotation': grads.rotations,
            'log_scale': grads.scales * cloud.scales,  # chain through exp
            'opacity': grads.opacity_logits,
            'sh_dc': grads.sh[:, :1, :],
            'sh_rest': grads.sh[:, 1:, :],
        }
        stepped = set()
        for group, lr in lrs.items():
            if lr == 0.0:
                continue
            params[group] = adam_step(params[group], grad_map[group],
                                      states[group], lr, name=group)
            if group == 'rotation':
                params[group] = quat_normalize(params[group])
            stepped.add(group)
        if cfg.lr_net != 0.0 and grads.net:
            for key, g in grads.net.items():
                net.params[key] = adam_step(net.params[key], g, net_states[key],
                                            cfg.lr_net, name=f'net.{key}')
        sync_cloud_from_params(stepped)

        cloud2, index_map, events = housekeeping(
            it, cloud, cfg, body=body, stats=stats, rng=rng, scene_extent=extent)
        cloud = cloud2
        if index_map is not None:
            params, states, stats = _remap_optimizer(cloud, params, states, index_map)
            sync_cloud_from_params()
            stats = DensifyStats.zeros(len(cloud))
        if 'opacity_reset' in events:
            params['opacity'] = cloud.opacity_logits
            states['opacity'] = AdamState.like(params['opacity'])

        if it % cfg.metrics_every == 0 or it == cfg.iterations:
            wall_ms = (time.perf_counter() - t_start) * 1000.0
            row = (f"{it},{wall_ms:.1f},{loss:.6f},{parts['l1']:.6f},"
                   f"{parts['s3im']:.6f},{_fmt_psnr(eval_holdout())},{len(cloud)}")
            metrics.append(row)
            write_metrics()
            if log:
                log(f"iter {it}: loss {loss:.5f} holdout {metrics[-1].split(',')[-2]} "
                    f"gaussians {len(cloud)}")

    state = rng.bit_generator.state
    return TrainResult(cloud=cloud, net=net, config=cfg, iterations=cfg.iterations,
                       rng_state=state, metrics=metrics, final_loss=last_loss)


def _fmt_psnr(value: float) -> str:
    return 'inf' if np.isinf(value) else f"{value:.3f}"


def _render_sample(cloud, body, net, sample, dataset, cfg, with_grads: bool):
    stamp = FrameStamp(sample.frame, dataset.frame_count)
    pose, cam = sample.pose, sample.camera
    if cfg.augmentation and pose.has_root_motion():
        pose, cam = _augmented_view(pose, cam)
    return render(cloud, body, pose, net, stamp, cam,
                  background=dataset.background, with_grads=with_grads,
                  workers=cfg.workers)


def _remap_optimizer(cloud: GaussianCloud, params: dict, states: dict,
                     index_map: np.ndarray):
    """After densification, carry optimizer state for surviving Gaussians and
    zero it for new ones."""
    new_params = {
        'position': cloud.positions,
        'rotation': cloud.rotations,
        'log_scale': np.log(cloud.scales),
        'opacity': cloud.opacity_logits,
        'sh_dc': cloud.sh[:, :1, :].copy(),
        'sh_rest': cloud.sh[:, 1:, :].copy(),
    }
    new_states = {}
    survivors = index_map >= 0
    src = index_map[survivors]
    for key, state in states.items():
        m = np.zeros_like(new_params[key])
        v = np.zeros_like(new_params[key])
        m[survivors] = state.m[src]
        v[survivors] = state.v[src]
        new_states[key] = AdamState(m, v, step=state.step)
    return new_params, new_states, None
