"""Screen-space projection and front-to-back compositing of 3D Gaussians.

Both rasterizers share one compositing contract: splats sorted by camera
depth, per-pixel alpha = opacity * exp(-0.5 * mahalanobis^2) clamped at 0.99,
support limited to the 3-sigma ellipse, transmittance early-exit below 1e-4,
remaining transmittance times the background added last.  The reference
renderer evaluates every splat at every pixel; the tiled renderer bins splats
into 16x16-pixel tiles by their 3-sigma bounding box.  Because a splat whose
box misses a tile has zero support everywhere in that tile, the two paths
agree to floating-point accumulation error.

The forward pipeline (skinning -> refinement -> covariance -> SH color ->
projection -> compositing) caches what the exact reverse-mode pass needs;
gradients w.r.t. the depth ordering are zero (sorting is treated as
piecewise-constant) and facet rotations are constants of the given pose.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .animate import IDENTITY_QUAT, FrameStamp, RefinementNet
from .body import Pose, SkinnedBody, blend_transforms, facet_rotations, forward_kinematics
from .cloud import SCALE_FLOOR, GaussianCloud, sigmoid
from .errors import NoCachedForward, ShapeMismatch, ZeroDirection
from .geometry import (normalize_vec_vjp, quat_multiply_raw, quat_multiply_vjp,
                       quat_normalize, quat_normalize_vjp, quat_to_rotmat,
                       quat_to_rotmat_vjp, require_rotation, rotmat_to_quat,
                       sh_basis, sh_basis_grad)

TILE = 16
ALPHA_CLAMP = 0.99
T_MIN = 1e-4
SUPPORT_M2 = 9.0           # 3-sigma ellipse
COV2D_DILATION = 0.3       # px^2 low-pass added to the projected covariance


@dataclass
class Camera:
    """Pinhole camera: intrinsics in pixels, world-to-camera extrinsics."""
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray      # (3, 3) world -> camera
    translation: np.ndarray   # (3,)
    width: int
    height: int
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not 0 < self.near < self.far:
            raise ValueError("require 0 < near < far")
        require_rotation(self.rotation)

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    @staticmethod
    def look_at(eye, target, up=(0.0, 1.0, 0.0), width=256, height=256,
                fov_deg=50.0, near=0.01, far=100.0) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd = fwd / np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        right = right / np.linalg.norm(right)
        down = np.cross(fwd, right)
        rot = np.stack([right, down, fwd])
        f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
        return Camera(fx=f, fy=f, cx=width / 2, cy=height / 2, rotation=rot,
                      translation=-rot @ eye, width=width, height=height,
                      near=near, far=far)

    @staticmethod
    def orbit(azimuth_deg: float, elevation_deg: float, radius: float,
              target=(0.0, 0.0, 0.0), **kwargs) -> "Camera":
        az, el = np.radians(azimuth_deg), np.radians(elevation_deg)
        offset = radius * np.array([np.cos(el) * np.sin(az), np.sin(el),
                                    np.cos(el) * np.cos(az)])
        return Camera.look_at(np.asarray(target, dtype=np.float64) + offset,
                              target, **kwargs)

    def with_extrinsics(self, rotation: np.ndarray, translation: np.ndarray) -> "Camera":
        return Camera(self.fx, self.fy, self.cx, self.cy, rotation, translation,
                      self.width, self.height, self.near, self.far)


@dataclass
class Splat2D:
    """One projected Gaussian ready for compositing."""
    mean2d: np.ndarray      # (2,) pixels
    cov2d: np.ndarray       # (2, 2) pixels^2, includes dilation
    depth: float            # camera-space z, meters
    color: np.ndarray       # (3,)
    alpha: float            # activated base opacity
    radius: float           # 3-sigma screen radius


@dataclass
class SplatBatch:
    """Struct-of-arrays form used by the rasterizers."""
    mean2d: np.ndarray   # (K, 2)
    cov2d: np.ndarray    # (K, 2, 2)
    depth: np.ndarray    # (K,)
    color: np.ndarray    # (K, 3)
    alpha: np.ndarray    # (K,)
    radius: np.ndarray   # (K,)

    def __len__(self) -> int:
        return len(self.depth)

    @staticmethod
    def from_list(splats: list[Splat2D]) -> "SplatBatch":
        if not splats:
            z = np.zeros(0)
            return SplatBatch(np.zeros((0, 2)), np.zeros((0, 2, 2)), z,
                              np.zeros((0, 3)), z.copy(), z.copy())
        return SplatBatch(
            mean2d=np.stack([s.mean2d for s in splats]),
            cov2d=np.stack([s.cov2d for s in splats]),
            depth=np.array([s.depth for s in splats]),
            color=np.stack([s.color for s in splats]),
            alpha=np.array([s.alpha for s in splats]),
            radius=np.array([s.radius for s in splats]))


@dataclass
class Framebuffer:
    color: np.ndarray          # (H, W, 3) f32 linear [0, 1]
    transmittance: np.ndarray  # (H, W)
    splat_count: np.ndarray    # (H, W) int32


@dataclass
class RenderGrads:
    """Gradients of a scalar loss w.r.t. cloud parameters and net weights."""
    positions: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray
    net: dict[str, np.ndarray]
    screen_grad_norm: np.ndarray  # (N,) |dL/d mean2d| per Gaussian
    visible: np.ndarray           # (N,) bool


# ---------------------------------------------------------------------------
# projection


def project_points(positions: np.ndarray, cam: Camera) -> np.ndarray:
    """World points -> camera space (K, 3)."""
    return positions @ cam.rotation.T + cam.translation


def project_batch(positions: np.ndarray, covariances: np.ndarray, cam: Camera):
    """Project Gaussians to screen space.

    Returns (mean2d, cov2d, depth, radius, valid, p_cam, jacobians); culled
    Gaussians are flagged in `valid` rather than dropped so indices stay
    aligned with the input.
    """
    p = project_points(positions, cam)
    z = p[:, 2]
    in_depth = (z > cam.near) & (z < cam.far)
    zs = np.where(in_depth, z, 1.0)  # keep the math finite for culled rows
    mean2d = np.stack([cam.fx * p[:, 0] / zs + cam.cx,
                       cam.fy * p[:, 1] / zs + cam.cy], axis=1)
    k = len(p)
    jac = np.zeros((k, 2, 3))
    jac[:, 0, 0] = cam.fx / zs
    jac[:, 1, 1] = cam.fy / zs
    jac[:, 0, 2] = -cam.fx * p[:, 0] / zs ** 2
    jac[:, 1, 2] = -cam.fy * p[:, 1] / zs ** 2
    a = jac @ cam.rotation
    cov2d = a @ covariances @ np.swapaxes(a, -1, -2)
    cov2d[:, 0, 0] += COV2D_DILATION
    cov2d[:, 1, 1] += COV2D_DILATION
    # largest eigenvalue of the symmetric 2x2
    mid = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1])
    disc = np.sqrt(np.maximum(0.25 * (cov2d[:, 0, 0] - cov2d[:, 1, 1]) ** 2
                              + cov2d[:, 0, 1] ** 2, 0.0))
    radius = 3.0 * np.sqrt(np.maximum(mid + disc, 1e-12))
    on_screen = ((mean2d[:, 0] + radius > 0) & (mean2d[:, 0] - radius < cam.width)
                 & (mean2d[:, 1] + radius > 0) & (mean2d[:, 1] - radius < cam.height))
    valid = in_depth & on_screen
    return mean2d, cov2d, z, radius, valid, p, jac


def project(mu: np.ndarray, cov: np.ndarray, cam: Camera,
            color=(1.0, 1.0, 1.0), alpha: float = 1.0) -> Splat2D | None:
    """Project a single Gaussian; returns None when culled."""
    mean2d, cov2d, z, radius, valid, _, _ = project_batch(
        np.asarray(mu, dtype=np.float64)[None], np.asarray(cov, dtype=np.float64)[None], cam)
    if not valid[0]:
        return None
    return Splat2D(mean2d[0], cov2d[0], float(z[0]),
                   np.asarray(color, dtype=np.float64), float(alpha), float(radius[0]))


# ---------------------------------------------------------------------------
# compositing kernel (shared by reference and tiled paths)


def _pixel_centers(x0: int, x1: int, y0: int, y1: int) -> np.ndarray:
    xs = np.arange(x0, x1) + 0.5
    ys = np.arange(y0, y1) + 0.5
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)  # (P, 2), row-major


def _inverse_cov2d(cov2d: np.ndarray) -> np.ndarray:
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    inv = np.empty_like(cov2d)
    inv[:, 0, 0] = cov2d[:, 1, 1]
    inv[:, 1, 1] = cov2d[:, 0, 0]
    inv[:, 0, 1] = -cov2d[:, 0, 1]
    inv[:, 1, 0] = -cov2d[:, 1, 0]
    return inv / det[:, None, None]


def _composite(batch: SplatBatch, order: np.ndarray, inv_cov: np.ndarray,
               pixels: np.ndarray, background: np.ndarray,
               want_cache: bool = False):
    """Front-to-back composite `order`-sorted splats over the given pixels.

    Returns (color (P, 3), transmittance (P,), count (P,), cache)."""
    k, p = len(order), len(pixels)
    if k == 0:
        color = np.broadcast_to(background, (p, 3)).copy()
        return color, np.ones(p), np.zeros(p, dtype=np.int32), None
    q = inv_cov[order]
    dx = pixels[None, :, 0] - batch.mean2d[order, 0][:, None]  # (K, P)
    dy = pixels[None, :, 1] - batch.mean2d[order, 1][:, None]
    m2 = (q[:, 0, 0, None] * dx * dx + (q[:, 0, 1, None] + q[:, 1, 0, None]) * dx * dy
          + q[:, 1, 1, None] * dy * dy)
    g = np.where(m2 <= SUPPORT_M2, np.exp(-0.5 * m2), 0.0)
    alpha = batch.alpha[order, None] * g
    clamped = alpha > ALPHA_CLAMP
    alpha = np.minimum(alpha, ALPHA_CLAMP)
    assert alpha.max(initial=0.0) <= ALPHA_CLAMP + 1e-12
    cp = np.cumprod(1.0 - alpha, axis=0)
    t_before = np.vstack([np.ones((1, p)), cp[:-1]])
    alive = t_before >= T_MIN
    # early exit freezes T: dead splats multiply by exactly 1, so the frozen
    # value is the last alive cumprod entry
    w = np.where(alive, t_before * alpha, 0.0)
    t_final = np.min(np.where(alive, cp, 1.0), axis=0)
    color = w.T @ batch.color[order]
    color += t_final[:, None] * background
    count = (w > 0.0).sum(axis=0).astype(np.int32)
    cache = None
    if want_cache:
        cache = {'g': g, 'alpha': alpha, 'w': w, 't_before': t_before,
                 't_final': t_final, 'dx': dx, 'dy': dy,
                 'clamped': clamped, 'alive': alive, 'q': q}
    return color, t_final, count, cache


def _composite_backward(batch: SplatBatch, order: np.ndarray, cache: dict,
                        background: np.ndarray, grad_color: np.ndarray):
    """Reverse the compositing over one pixel group.

    grad_color is (P, 3).  Returns per-ordered-splat gradients
    (d_color (K,3), d_alpha_base (K,), d_mean2d (K,2), d_invcov (K,2,2))."""
    w, alpha = cache['w'], cache['alpha']
    t_before, t_final = cache['t_before'], cache['t_final']
    g, dx, dy, q = cache['g'], cache['dx'], cache['dy'], cache['q']
    colors = batch.color[order]  # (K, 3)
    # project everything onto the pixel gradient once: cdot_kp = c_k . dL/dC_p
    cdot = colors @ grad_color.T                                  # (K, P)
    u = w * cdot
    # suffix_k = sum_{m > k} w_m (c_m . dL/dC) + t_final (bg . dL/dC)
    suffix = np.cumsum(u[::-1], axis=0)[::-1] - u
    suffix += t_final[None, :] * (grad_color @ background)[None, :]
    d_color = w @ grad_color
    # d alpha: live contribution minus what it occludes
    alpha_live = np.where(w > 0.0, alpha, 0.0)
    d_alpha = t_before * cdot - suffix / (1.0 - alpha_live)
    prop = (w > 0.0) & ~cache['clamped']
    d_alpha = np.where(prop, d_alpha, 0.0)
    d_base = np.einsum('kp,kp->k', d_alpha, g)
    d_g = d_alpha * batch.alpha[order, None]
    d_m2 = -0.5 * g * d_g
    q00, q01, q11 = q[:, 0, 0, None], q[:, 0, 1, None], q[:, 1, 1, None]
    d_dx = d_m2 * (2 * q00 * dx + 2 * q01 * dy)
    d_dy = d_m2 * (2 * q01 * dx + 2 * q11 * dy)
    d_mean2d = -np.stack([d_dx.sum(axis=1), d_dy.sum(axis=1)], axis=1)
    d_q = np.empty((len(order), 2, 2))
    d_q[:, 0, 0] = np.einsum('kp,kp->k', d_m2, dx * dx)
    d_q[:, 1, 1] = np.einsum('kp,kp->k', d_m2, dy * dy)
    off = np.einsum('kp,kp->k', d_m2, dx * dy)
    d_q[:, 0, 1] = off
    d_q[:, 1, 0] = off
    return d_color, d_base, d_mean2d, d_q


def rasterize_reference(splats, cam: Camera, background) -> Framebuffer:
    """Brute-force oracle: every splat evaluated at every pixel."""
    batch = splats if isinstance(splats, SplatBatch) else SplatBatch.from_list(splats)
    background = np.asarray(background, dtype=np.float64)
    h, w = cam.height, cam.width
    order = np.argsort(batch.depth, kind='stable')
    inv_cov = _inverse_cov2d(batch.cov2d) if len(batch) else batch.cov2d
    color = np.empty((h, w, 3))
    trans = np.empty((h, w))
    count = np.empty((h, w), dtype=np.int32)
    rows_per_chunk = max(1, int(4e6 / max(1, len(batch) * w)))
    for y0 in range(0, h, rows_per_chunk):
        y1 = min(h, y0 + rows_per_chunk)
        pix = _pixel_centers(0, w, y0, y1)
        c, t, n, _ = _composite(batch, order, inv_cov, pix, background)
        color[y0:y1] = c.reshape(y1 - y0, w, 3)
        trans[y0:y1] = t.reshape(y1 - y0, w)
        count[y0:y1] = n.reshape(y1 - y0, w)
    return Framebuffer(color.astype(np.float32), trans, count)


def _bin_tiles(batch: SplatBatch, order: np.ndarray, cam: Camera) -> dict:
    """Map (tile_y, tile_x) -> ordered positions of overlapping splats."""
    tiles: dict[tuple[int, int], list[int]] = {}
    tx_max = (cam.width + TILE - 1) // TILE
    ty_max = (cam.height + TILE - 1) // TILE
    mean = batch.mean2d
    rad = batch.radius
    for pos, idx in enumerate(order):
        x0 = max(0, int((mean[idx, 0] - rad[idx]) // TILE))
        x1 = min(tx_max - 1, int((mean[idx, 0] + rad[idx]) // TILE))
        y0 = max(0, int((mean[idx, 1] - rad[idx]) // TILE))
        y1 = min(ty_max - 1, int((mean[idx, 1] + rad[idx]) // TILE))
        if x1 < x0 or y1 < y0:
            continue
        for ty in range(y0, y1 + 1):
            for tx in range(x0, x1 + 1):
                tiles.setdefault((ty, tx), []).append(pos)
    return tiles


def rasterize_tiled(splats, cam: Camera, background, workers: int = 1,
                    want_cache: bool = False, want_image64: bool = False):
    """Tile-binned rasterization; identical output contract to the reference."""
    batch = splats if isinstance(splats, SplatBatch) else SplatBatch.from_list(splats)
    background = np.asarray(background, dtype=np.float64)
    h, w = cam.height, cam.width
    order = np.argsort(batch.depth, kind='stable')
    inv_cov = _inverse_cov2d(batch.cov2d) if len(batch) else batch.cov2d
    tiles = _bin_tiles(batch, order, cam)
    color = np.tile(background, (h, w, 1))
    trans = np.ones((h, w))
    count = np.zeros((h, w), dtype=np.int32)
    caches: dict[tuple[int, int], dict] = {}

    def run_tile(key):
        ty, tx = key
        x0, x1 = tx * TILE, min((tx + 1) * TILE, w)
        y0, y1 = ty * TILE, min((ty + 1) * TILE, h)
        sub_order = order[np.asarray(tiles[key], dtype=np.int64)]
        pix = _pixel_centers(x0, x1, y0, y1)
        c, t, n, cache = _composite(batch, sub_order, inv_cov, pix, background,
                                    want_cache=want_cache)
        return key, (x0, x1, y0, y1), c, t, n, cache, sub_order

    keys = sorted(tiles.keys())
    if workers > 1 and len(keys) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_tile, keys))
    else:
        results = [run_tile(k) for k in keys]
    for key, (x0, x1, y0, y1), c, t, n, cache, sub_order in results:
        shape = (y1 - y0, x1 - x0)
        color[y0:y1, x0:x1] = c.reshape(*shape, 3)
        trans[y0:y1, x0:x1] = t.reshape(shape)
        count[y0:y1, x0:x1] = n.reshape(shape)
    fb = Framebuffer(color.astype(np.float32), trans, count)
    if want_cache:
        raster_cache = {'tiles': tiles, 'order': order, 'inv_cov': inv_cov,
                        'batch': batch, 'color64': color,
                        'tile_caches': {r[0]: (r[1], r[5], r[6]) for r in results}}
        return fb, raster_cache
    if want_image64:
        return fb, color
    return fb


def _rasterize_backward(raster_cache: dict, cam: Camera, background,
                        grad_image: np.ndarray, workers: int = 1):
    """Accumulate per-splat gradients over all tiles (fixed tile order)."""
    batch: SplatBatch = raster_cache['batch']
    background = np.asarray(background, dtype=np.float64)
    k = len(batch)
    d_color = np.zeros((k, 3))
    d_alpha = np.zeros(k)
    d_mean2d = np.zeros((k, 2))
    d_invcov = np.zeros((k, 2, 2))

    def run_tile(key):
        (x0, x1, y0, y1), cache, sub_order = raster_cache['tile_caches'][key]
        g = grad_image[y0:y1, x0:x1].reshape(-1, 3)
        return sub_order, _composite_backward(batch, sub_order, cache, background, g)

    keys = sorted(raster_cache['tile_caches'].keys())
    if workers > 1 and len(keys) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_tile, keys))
    else:
        results = [run_tile(k) for k in keys]
    for sub_order, (dc, da, dm, dq) in results:
        np.add.at(d_color, sub_order, dc)
        np.add.at(d_alpha, sub_order, da)
        np.add.at(d_mean2d, sub_order, dm)
        np.add.at(d_invcov, sub_order, dq)
    return d_color, d_alpha, d_mean2d, d_invcov


# ---------------------------------------------------------------------------
# full pipeline


@dataclass
class RenderResult:
    framebuffer: Framebuffer
    image: np.ndarray                    # (H, W, 3) f64 pre-downcast buffer
    scale_clamps: int = 0
    _ctx: dict | None = field(default=None, repr=False)

    def backward(self, grad_image: np.ndarray, workers: int = 1) -> RenderGrads:
        if self._ctx is None:
            raise NoCachedForward("render was not run with with_grads=True")
        return _pipeline_backward(self._ctx, np.asarray(grad_image, dtype=np.float64),
                                  workers=workers)


def render(cloud: GaussianCloud, body: SkinnedBody | None, pose: Pose,
           net: RefinementNet | None, stamp: FrameStamp, cam: Camera,
           background=(0.0, 0.0, 0.0), with_grads: bool = False,
           workers: int = 1) -> RenderResult:
    """Animate, refine, and rasterize the avatar for one frame.

    The articulated deformation and the refinement both happen in the
    root-free frame; the global root transform is applied to the refined
    Gaussians as a final rigid motion.  This makes a root-motion render and
    the matching rotated-camera render algebraically identical.
    """
    n = len(cloud)
    background = np.asarray(background, dtype=np.float64)
    bound = cloud.bind_vertex >= 0
    ctx: dict = {'cloud': cloud, 'cam': cam, 'bound': bound, 'net': net,
                 'background': background}

    # rigid skinning in the root-free frame
    local_pose = pose.without_root()
    rigid_rot = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
    affine = np.zeros((n, 3, 4))
    affine[:, :, :3] = np.eye(3)
    if body is not None and bound.any():
        local_pose.validate(body.joint_count)
        g = forward_kinematics(body, local_pose, include_root=True)
        affine[bound] = blend_transforms(cloud.bind_weights[bound], g)
        rf = facet_rotations(body, Pose.rest(body.joint_count), local_pose)
        rigid_rot[bound] = rf[cloud.bind_face[bound]]
    x_rigid = np.einsum('nij,nj->ni', affine[:, :, :3], cloud.positions) + affine[:, :, 3]
    r_norm = quat_normalize(cloud.rotations) if n else cloud.rotations
    q_f = rotmat_to_quat(rigid_rot) if n else np.zeros((0, 4))
    prod1 = quat_multiply_raw(q_f, r_norm) if n else r_norm
    r_rigid = quat_normalize(prod1) if n else prod1

    # learned per-frame residuals (identity for unbound rows)
    if net is not None and n:
        dx, dr, ds = net.forward(cloud.positions, stamp, pose, cache=with_grads)
        dx = np.where(bound[:, None], dx, 0.0)
        ds = np.where(bound[:, None], ds, 0.0)
        dr = np.where(bound[:, None], dr, IDENTITY_QUAT)
    else:
        dx = np.zeros((n, 3))
        ds = np.zeros((n, 3))
        dr = np.tile(IDENTITY_QUAT, (n, 1))
    x_loc = x_rigid + dx
    prod2 = quat_multiply_raw(dr, r_rigid) if n else r_rigid
    r_loc = quat_normalize(prod2) if n else prod2
    s_raw = cloud.scales + ds
    scale_mask = s_raw >= SCALE_FLOOR
    s_fin = np.maximum(s_raw, SCALE_FLOOR)
    clamps = int(np.sum(~scale_mask))

    # global root transform applied last
    root_r, root_t = pose.root_rotation, pose.root_translation
    x_world = x_loc @ root_r.T + root_t
    q_root = rotmat_to_quat(root_r)
    prod3 = quat_multiply_raw(np.broadcast_to(q_root, (n, 4)), r_loc) if n else r_loc
    r_world = quat_normalize(prod3) if n else prod3
    rot_total = np.einsum('ij,njk->nik', root_r, rigid_rot)

    # covariance
    r_mat = quat_to_rotmat(r_world) if n else np.zeros((0, 3, 3))
    m_mat = r_mat * s_fin[:, None, :]
    cov = m_mat @ np.swapaxes(m_mat, -1, -2)

    # per-Gaussian color from SH along the doubly-inverse-rotated view dir
    u = x_world - cam.center
    u_norm = np.linalg.norm(u, axis=-1)
    mean2d, cov2d, depth, radius, valid, p_cam, jac = project_batch(x_world, cov, cam)
    if np.any(u_norm[valid] < 1e-9):
        raise ZeroDirection("Gaussian center coincides with the camera center")
    safe_u = np.where((u_norm < 1e-9)[:, None], np.array([0.0, 0.0, 1.0]), u)
    d_view = safe_u / np.linalg.norm(safe_u, axis=-1, keepdims=True)
    d1 = np.einsum('nji,nj->ni', rot_total, d_view)
    q_delta_mat = quat_to_rotmat(dr) if n else np.zeros((0, 3, 3))
    d2 = np.einsum('nji,nj->ni', q_delta_mat, d1)
    basis = sh_basis(d2, cloud.degree) if n else np.zeros((0, 1))
    active = (cloud.degree + 1) ** 2
    color_pre = np.einsum('nk,nkc->nc', basis, cloud.sh[:, :active, :]) + 0.5
    # lower clamp only: an upper clamp freezes the gradient of saturated
    # (e.g. white-initialized) colors and they could never train away
    color = np.maximum(color_pre, 0.0)
    opacity = sigmoid(cloud.opacity_logits)

    batch = SplatBatch(mean2d=mean2d[valid], cov2d=cov2d[valid], depth=depth[valid],
                       color=color[valid], alpha=opacity[valid], radius=radius[valid])
    out = rasterize_tiled(batch, cam, background, workers=workers,
                          want_cache=with_grads, want_image64=True)
    if with_grads:
        fb, raster_cache = out
        ctx.update({
            'affine': affine, 'rigid_rot': rigid_rot, 'q_f': q_f, 'r_norm': r_norm,
            'prod1': prod1, 'r_rigid': r_rigid, 'dx': dx, 'dr': dr, 'ds': ds,
            'prod2': prod2, 'r_loc': r_loc, 's_raw': s_raw, 'scale_mask': scale_mask,
            's_fin': s_fin, 'root_r': root_r, 'q_root': q_root, 'prod3': prod3,
            'r_world': r_world, 'rot_total': rot_total, 'r_mat': r_mat, 'm_mat': m_mat,
            'u': safe_u, 'd_view': d_view, 'd1': d1, 'd2': d2, 'q_delta_mat': q_delta_mat,
            'basis': basis, 'color_pre': color_pre, 'opacity': opacity,
            'mean2d': mean2d, 'cov2d': cov2d, 'p_cam': p_cam, 'jac': jac,
            'valid': valid, 'raster_cache': raster_cache, 'active': active,
            'x_world': x_world, 'cov': cov,
        })
        return RenderResult(fb, raster_cache['color64'].copy(), clamps, ctx)
    fb, color64 = out
    return RenderResult(fb, color64, clamps, None)


def _pipeline_backward(ctx: dict, grad_image: np.ndarray, workers: int = 1) -> RenderGrads:
    cloud: GaussianCloud = ctx['cloud']
    cam: Camera = ctx['cam']
    n = len(cloud)
    valid = ctx['valid']
    if grad_image.shape != (cam.height, cam.width, 3):
        raise ShapeMismatch(f"gradient image must be {(cam.height, cam.width, 3)}, "
                            f"got {grad_image.shape}")

    d_color_v, d_alpha_v, d_mean2d_v, d_invcov_v = _rasterize_backward(
        ctx['raster_cache'], cam, ctx['background'], grad_image, workers=workers)

    # scatter the valid-subset gradients back to full-size arrays
    def scatter(values, shape):
        full = np.zeros(shape)
        full[valid] = values
        return full

    d_color = scatter(d_color_v, (n, 3))
    d_opacity = scatter(d_alpha_v, (n,))
    d_mean2d = scatter(d_mean2d_v, (n, 2))
    d_invcov = scatter(d_invcov_v, (n, 2, 2))

    # inverse conic -> projected covariance
    inv_full = np.zeros((n, 2, 2))
    inv_full[valid] = ctx['raster_cache']['inv_cov']
    d_cov2d = -inv_full @ d_invcov @ inv_full

    # projection chain
    jac, p_cam = ctx['jac'], ctx['p_cam']
    a_mat = jac @ cam.rotation                       # (N, 2, 3)
    d_cov = np.einsum('nai,nab,nbj->nij', a_mat, d_cov2d, a_mat)
    d_a = 2.0 * np.einsum('nab,nbi,nij->naj', d_cov2d, a_mat, ctx['cov'])
    d_jac = d_a @ cam.rotation.T
    z = np.where(valid, p_cam[:, 2], 1.0)
    px, py = p_cam[:, 0], p_cam[:, 1]
    d_p = np.zeros((n, 3))
    d_p[:, 0] = d_mean2d[:, 0] * cam.fx / z + d_jac[:, 0, 2] * (-cam.fx / z ** 2)
    d_p[:, 1] = d_mean2d[:, 1] * cam.fy / z + d_jac[:, 1, 2] * (-cam.fy / z ** 2)
    d_p[:, 2] = (-d_mean2d[:, 0] * cam.fx * px / z ** 2
                 - d_mean2d[:, 1] * cam.fy * py / z ** 2
                 + d_jac[:, 0, 0] * (-cam.fx / z ** 2)
                 + d_jac[:, 1, 1] * (-cam.fy / z ** 2)
                 + d_jac[:, 0, 2] * (2 * cam.fx * px / z ** 3)
                 + d_jac[:, 1, 2] * (2 * cam.fy * py / z ** 3))
    d_p[~valid] = 0.0
    d_xworld = d_p @ cam.rotation

    # color chain: clamp, SH basis, doubly rotated view direction
    unclamped = ctx['color_pre'] > 0.0
    d_pre = d_color * unclamped
    active = ctx['active']
    d_sh = np.zeros((n, cloud.sh.shape[1], 3))
    d_sh[:, :active, :] = np.einsum('nk,nc->nkc', ctx['basis'], d_pre)
    basis_grad = sh_basis_grad(ctx['d2'], cloud.degree)
    d_d2 = np.einsum('nkc,nkd,nc->nd', cloud.sh[:, :active, :], basis_grad, d_pre)
    d_d1 = np.einsum('nij,nj->ni', ctx['q_delta_mat'], d_d2)
    d_qdelta_mat = np.einsum('ni,nj->nij', ctx['d1'], d_d2)
    d_dview = np.einsum('nij,nj->ni', ctx['rot_total'], d_d1)
    d_u = normalize_vec_vjp(ctx['u'], d_dview)
    d_xworld += d_u

    # opacity
    op = ctx['opacity']
    d_logit = d_opacity * op * (1.0 - op)

    # covariance -> world rotation quaternion and final scales
    d_m = 2.0 * d_cov @ ctx['m_mat']
    d_rmat = d_m * ctx['s_fin'][:, None, :]
    d_sfin = np.einsum('nij,nij->nj', d_m, ctx['r_mat'])
    d_rworld = quat_to_rotmat_vjp(ctx['r_world'], d_rmat)

    # root quaternion chain
    d_prod3 = quat_normalize_vjp(ctx['prod3'], d_rworld)
    q_root_b = np.broadcast_to(ctx['q_root'], (n, 4))
    _, d_rloc = quat_multiply_vjp(q_root_b, ctx['r_loc'], d_prod3)

    # refinement chain
    d_prod2 = quat_normalize_vjp(ctx['prod2'], d_rloc)
    d_dr_a, d_rrigid = quat_multiply_vjp(ctx['dr'], ctx['r_rigid'], d_prod2)
    d_dr_b = quat_to_rotmat_vjp(ctx['dr'], d_qdelta_mat)
    d_dr = d_dr_a + d_dr_b
    d_xloc = d_xworld @ ctx['root_r']
    d_dx = d_xloc.copy()
    d_sraw = d_sfin * ctx['scale_mask']
    d_ds = d_sraw.copy()
    d_scales = d_sraw.copy()

    # rigid chain back to the canonical cloud
    d_prod1 = quat_normalize_vjp(ctx['prod1'], d_rrigid)
    _, d_rnorm = quat_multiply_vjp(ctx['q_f'], ctx['r_norm'], d_prod1)
    d_rot = quat_normalize_vjp(cloud.rotations, d_rnorm)
    d_pos = np.einsum('nij,ni->nj', ctx['affine'][:, :, :3], d_xloc)

    # network backward (bound rows only feed the heads)
    net: RefinementNet | None = ctx['net']
    bound = ctx['bound']
    net_grads: dict[str, np.ndarray] = {}
    if net is not None and n:
        mask = bound[:, None]
        net_grads, d_pos_net = net.backward(np.where(mask, d_dx, 0.0),
                                            np.where(mask, d_dr, 0.0),
                                            np.where(mask, d_ds, 0.0))
        d_pos += d_pos_net

    # densification statistics use viewport-normalized (NDC) units so the
    # 2e-4 threshold keeps its meaning across image resolutions
    ndc_scale = np.array([cam.width / 2.0, cam.height / 2.0])
    screen_norm = np.linalg.norm(d_mean2d * ndc_scale, axis=-1)
    return RenderGrads(positions=d_pos, rotations=d_rot, scales=d_scales,
                       opacity_logits=d_logit, sh=d_sh, net=net_grads,
                       screen_grad_norm=screen_norm, visible=valid)


# ---------------------------------------------------------------------------
# benchmark harness


def benchmark_renderers(n_splats: int = 10000, size: int = 256, workers: int = 4,
                        seed: int = 7, repeats: int = 1) -> dict:
    """Compare wall-clock of the tiled and reference rasterizers on one scene."""
    rng = np.random.default_rng(seed)
    cam = Camera.look_at((0, 0, 3.0), (0, 0, 0), width=size, height=size)
    pos = rng.uniform(-1, 1, (n_splats, 3))
    quats = quat_normalize(rng.normal(size=(n_splats, 4)))
    scales = rng.uniform(0.002, 0.01, (n_splats, 3))
    from .cloud import covariance_batch
    covs = covariance_batch(quats, scales)
    mean2d, cov2d, depth, radius, valid, _, _ = project_batch(pos, covs, cam)
    batch = SplatBatch(mean2d[valid], cov2d[valid], depth[valid],
                       rng.uniform(0, 1, (int(valid.sum()), 3)),
                       rng.uniform(0.3, 0.9, int(valid.sum())), radius[valid])
    t0 = time.perf_counter()
    for _ in range(repeats):
        fb_tiled = rasterize_tiled(batch, cam, (0, 0, 0), workers=workers)
    t_tiled = (time.perf_counter() - t0) / repeats
    t0 = time.perf_counter()
    fb_ref = rasterize_reference(batch, cam, (0, 0, 0))
    t_ref = time.perf_counter() - t0
    max_diff = float(np.abs(fb_tiled.color - fb_ref.color).max())
    return {'n_splats': int(valid.sum()), 'size': size, 'workers': workers,
            'tiled_s': t_tiled, 'reference_s': t_ref,
            'speedup': t_ref / t_tiled, 'max_diff': max_diff}
