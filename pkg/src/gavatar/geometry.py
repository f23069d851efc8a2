"""Rotation, spherical-harmonics, and encoding math used by every other module.

Conventions: Hamilton quaternions stored as (w, x, y, z), right-handed frames,
row-major 3x3 rotation matrices, all math in float64.  Functions accept either
a single element or a leading batch axis; batched variants are suffixed
``_batch`` where the shapes would otherwise be ambiguous.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NotARotation

UNIT_TOL = 1e-9

# Real SH basis constants, bands 0..3.
_SH_C0 = 0.28209479177387814
_SH_C1 = 0.4886025119029199
_SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
          -1.0925484305920792, 0.5462742152960396)
_SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
          0.3731763325901154, -0.4570457994644658, 1.445305721320277,
          -0.5900435899266435)

SH_DC = _SH_C0
MAX_SH_DEGREE = 3
SH_COEFF_COUNT = (MAX_SH_DEGREE + 1) ** 2  # 16


# ---------------------------------------------------------------------------
# quaternions


def quat_normalize(q: np.ndarray) -> np.ndarray:
    """Return q scaled to unit length (works on (..., 4) arrays)."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm < 1e-12):
        raise ValueError("cannot normalize zero quaternion")
    return q / norm


def quat_normalize_vjp(q_raw: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Reverse-mode gradient of quat_normalize: project onto the tangent space."""
    q_raw = np.asarray(q_raw, dtype=np.float64)
    norm = np.linalg.norm(q_raw, axis=-1, keepdims=True)
    unit = q_raw / norm
    radial = np.sum(unit * grad_out, axis=-1, keepdims=True)
    return (grad_out - unit * radial) / norm


def quat_from_axis_angle(axis_angle: np.ndarray) -> np.ndarray:
    """Unit quaternion for a rotation vector (axis * angle, radians), (..., 3)."""
    aa = np.asarray(axis_angle, dtype=np.float64)
    angle = np.linalg.norm(aa, axis=-1, keepdims=True)
    half = 0.5 * angle
    # sinc form is stable near zero angle
    small = angle < 1e-12
    k = np.where(small, 0.5, np.sin(half) / np.where(small, 1.0, angle))
    w = np.cos(half)
    return np.concatenate([w, k * aa], axis=-1)


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a * b, renormalized; a is applied after b."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    out = np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)
    return quat_normalize(out)


def quat_multiply_raw(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product without the renormalization step."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_multiply_vjp(a: np.ndarray, b: np.ndarray,
                      grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the raw Hamilton product c = a*b w.r.t. both operands."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    g = np.asarray(grad_out, dtype=np.float64)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    gw, gx, gy, gz = g[..., 0], g[..., 1], g[..., 2], g[..., 3]
    # c = M_R(b) a = M_L(a) b;  grads are the transposed linear maps
    grad_a = np.stack([
        bw * gw + bx * gx + by * gy + bz * gz,
        -bx * gw + bw * gx - bz * gy + by * gz,
        -by * gw + bz * gx + bw * gy - bx * gz,
        -bz * gw - by * gx + bx * gy + bw * gz,
    ], axis=-1)
    grad_b = np.stack([
        aw * gw + ax * gx + ay * gy + az * gz,
        -ax * gw + aw * gx + az * gy - ay * gz,
        -ay * gw - az * gx + aw * gy + ax * gz,
        -az * gw + ay * gx - ax * gy + aw * gz,
    ], axis=-1)
    return grad_a, grad_b


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Unit quaternion (..., 4) -> rotation matrix (..., 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    row0 = np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1)
    row1 = np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1)
    row2 = np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1)
    return np.stack([row0, row1, row2], axis=-2)


def quat_to_rotmat_vjp(q: np.ndarray, grad_rotmat: np.ndarray) -> np.ndarray:
    """Gradient of quat_to_rotmat w.r.t. the (unit) quaternion entries."""
    q = np.asarray(q, dtype=np.float64)
    g = np.asarray(grad_rotmat, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    g00, g01, g02 = g[..., 0, 0], g[..., 0, 1], g[..., 0, 2]
    g10, g11, g12 = g[..., 1, 0], g[..., 1, 1], g[..., 1, 2]
    g20, g21, g22 = g[..., 2, 0], g[..., 2, 1], g[..., 2, 2]
    dw = 2 * (z * (g10 - g01) + y * (g02 - g20) + x * (g21 - g12))
    dx = 2 * (y * (g01 + g10) + z * (g02 + g20) - 2 * x * (g11 + g22) + w * (g21 - g12))
    dy = 2 * (x * (g01 + g10) + w * (g02 - g20) - 2 * y * (g00 + g22) + z * (g12 + g21))
    dz = 2 * (w * (g10 - g01) + x * (g02 + g20) + y * (g12 + g21) - 2 * z * (g00 + g11))
    return np.stack([dw, dx, dy, dz], axis=-1)


def require_rotation(R: np.ndarray, tol: float = 1e-6) -> None:
    """Raise NotARotation unless R is orthonormal with det +1 within tol."""
    R = np.asarray(R, dtype=np.float64)
    eye = np.eye(3)
    gram_err = np.abs(R @ np.swapaxes(R, -1, -2) - eye).max()
    det_err = np.abs(np.linalg.det(R) - 1.0).max()
    if gram_err > tol or det_err > tol:
        raise NotARotation(
            f"orthonormality error {gram_err:.3g}, det error {det_err:.3g} exceed tol {tol:g}")


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrix -> unit quaternion with w >= 0 (Shepperd's method).

    Accepts (3, 3) or (N, 3, 3); raises NotARotation when the orthonormality
    check fails beyond 1e-6.
    """
    R = np.asarray(R, dtype=np.float64)
    require_rotation(R, tol=1e-6)
    single = R.ndim == 2
    m = R[None] if single else R
    n = m.shape[0]
    m00, m01, m02 = m[:, 0, 0], m[:, 0, 1], m[:, 0, 2]
    m10, m11, m12 = m[:, 1, 0], m[:, 1, 1], m[:, 1, 2]
    m20, m21, m22 = m[:, 2, 0], m[:, 2, 1], m[:, 2, 2]
    tr = m00 + m11 + m22
    # branch on the largest of (trace, m00, m11, m22) for numerical stability
    choice = np.argmax(np.stack([tr, m00, m11, m22], axis=1), axis=1)
    q = np.empty((n, 4))
    s = np.empty(n)
    c = choice == 0
    s[c] = np.sqrt(tr[c] + 1.0) * 2.0
    q[c, 0] = 0.25 * s[c]
    q[c, 1] = (m21[c] - m12[c]) / s[c]
    q[c, 2] = (m02[c] - m20[c]) / s[c]
    q[c, 3] = (m10[c] - m01[c]) / s[c]
    c = choice == 1
    s[c] = np.sqrt(1.0 + m00[c] - m11[c] - m22[c]) * 2.0
    q[c, 0] = (m21[c] - m12[c]) / s[c]
    q[c, 1] = 0.25 * s[c]
    q[c, 2] = (m01[c] + m10[c]) / s[c]
    q[c, 3] = (m02[c] + m20[c]) / s[c]
    c = choice == 2
    s[c] = np.sqrt(1.0 + m11[c] - m00[c] - m22[c]) * 2.0
    q[c, 0] = (m02[c] - m20[c]) / s[c]
    q[c, 1] = (m01[c] + m10[c]) / s[c]
    q[c, 2] = 0.25 * s[c]
    q[c, 3] = (m12[c] + m21[c]) / s[c]
    c = choice == 3
    s[c] = np.sqrt(1.0 + m22[c] - m00[c] - m11[c]) * 2.0
    q[c, 0] = (m10[c] - m01[c]) / s[c]
    q[c, 1] = (m02[c] + m20[c]) / s[c]
    q[c, 2] = (m12[c] + m21[c]) / s[c]
    q[c, 3] = 0.25 * s[c]
    q /= np.linalg.norm(q, axis=-1, keepdims=True)
    # canonical sign: w >= 0
    q[q[:, 0] < 0.0] *= -1.0
    return q[0] if single else q


def rotmat_from_axis_angle(axis_angle: np.ndarray) -> np.ndarray:
    """Rodrigues map, (..., 3) rotation vector -> (..., 3, 3)."""
    return quat_to_rotmat(quat_from_axis_angle(axis_angle))


def rotation_angle(R: np.ndarray) -> np.ndarray:
    """Geodesic angle (radians) of one or many rotation matrices."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R, axis1=-2, axis2=-1)
    return np.arccos(np.clip((tr - 1.0) * 0.5, -1.0, 1.0))


# ---------------------------------------------------------------------------
# spherical harmonics


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Real SH basis values for unit directions.

    Args:
        dirs: (..., 3) unit directions.
        degree: active band limit, 0..3.

    Returns:
        (..., (degree+1)**2) basis values.
    """
    if not 0 <= degree <= MAX_SH_DEGREE:
        raise ValueError(f"degree must be in [0, {MAX_SH_DEGREE}], got {degree}")
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    out = [np.full(x.shape, _SH_C0)]
    if degree >= 1:
        out += [-_SH_C1 * y, _SH_C1 * z, -_SH_C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        out += [_SH_C2[0] * xy, _SH_C2[1] * yz, _SH_C2[2] * (2 * zz - xx - yy),
                _SH_C2[3] * xz, _SH_C2[4] * (xx - yy)]
    if degree >= 3:
        out += [_SH_C3[0] * y * (3 * xx - yy),
                _SH_C3[1] * xy * z,
                _SH_C3[2] * y * (4 * zz - xx - yy),
                _SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
                _SH_C3[4] * x * (4 * zz - xx - yy),
                _SH_C3[5] * z * (xx - yy),
                _SH_C3[6] * x * (xx - 3 * yy)]
    return np.stack(out, axis=-1)


def sh_basis_grad(dirs: np.ndarray, degree: int) -> np.ndarray:
    """d(basis)/d(direction): (..., (degree+1)**2, 3)."""
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    zero = np.zeros(x.shape)
    rows = [np.stack([zero, zero, zero], axis=-1)]
    if degree >= 1:
        rows += [np.stack([zero, np.full(x.shape, -_SH_C1), zero], axis=-1),
                 np.stack([zero, zero, np.full(x.shape, _SH_C1)], axis=-1),
                 np.stack([np.full(x.shape, -_SH_C1), zero, zero], axis=-1)]
    if degree >= 2:
        rows += [_SH_C2[0] * np.stack([y, x, zero], axis=-1),
                 _SH_C2[1] * np.stack([zero, z, y], axis=-1),
                 _SH_C2[2] * np.stack([-2 * x, -2 * y, 4 * z], axis=-1),
                 _SH_C2[3] * np.stack([z, zero, x], axis=-1),
                 _SH_C2[4] * np.stack([2 * x, -2 * y, zero], axis=-1)]
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        rows += [_SH_C3[0] * np.stack([6 * x * y, 3 * xx - 3 * yy, zero], axis=-1),
                 _SH_C3[1] * np.stack([y * z, x * z, x * y], axis=-1),
                 _SH_C3[2] * np.stack([-2 * x * y, 4 * zz - xx - 3 * yy, 8 * y * z], axis=-1),
                 _SH_C3[3] * np.stack([-6 * x * z, -6 * y * z, 6 * zz - 3 * xx - 3 * yy], axis=-1),
                 _SH_C3[4] * np.stack([4 * zz - 3 * xx - yy, -2 * x * y, 8 * x * z], axis=-1),
                 _SH_C3[5] * np.stack([2 * x * z, -2 * y * z, xx - yy], axis=-1),
                 _SH_C3[6] * np.stack([3 * xx - 3 * yy, -6 * x * y, zero], axis=-1)]
    return np.stack(rows, axis=-2)


def sh_eval(coeffs: np.ndarray, dirs: np.ndarray, degree: int,
            clamp: bool = True) -> np.ndarray:
    """Evaluate SH color: sum_k c_k Y_k(d) + 0.5, optionally clamped to [0, 1].

    coeffs has shape (..., K, 3) with K >= (degree+1)**2; bands above the
    active degree are ignored (they are zero by the SHCoeffs invariant).
    """
    coeffs = np.asarray(coeffs, dtype=np.float64)
    basis = sh_basis(dirs, degree)  # (..., K_active)
    k = basis.shape[-1]
    rgb = np.einsum('...k,...kc->...c', basis, coeffs[..., :k, :]) + 0.5
    if clamp:
        rgb = np.clip(rgb, 0.0, 1.0)
    return rgb


def sh_dc_from_color(rgb: np.ndarray) -> np.ndarray:
    """DC coefficient encoding a flat color under the +0.5 offset convention."""
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / _SH_C0


def sh_rotate_dir(R: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Inverse-rotate an SH query direction: returns R^T d (unit preserved)."""
    R = np.asarray(R, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    return np.einsum('...ji,...j->...i', R, d)


# ---------------------------------------------------------------------------
# positional encoding


@dataclass(frozen=True)
class PEConfig:
    """Sin/cos frequency encoding config.

    frequencies: number of octaves F; output dim per input component is
    2F + (1 if include_raw else 0).
    """
    frequencies: int = 10
    include_raw: bool = True

    def __post_init__(self):
        if self.frequencies < 1:
            raise ValueError("frequency count must be >= 1")

    def out_dim(self, in_dim: int) -> int:
        return in_dim * (2 * self.frequencies + (1 if self.include_raw else 0))


def positional_encode(p: np.ndarray, cfg: PEConfig) -> np.ndarray:
    """Per component: [p, sin(2^0 pi p), cos(2^0 pi p), ..., sin(2^{F-1} pi p), cos(...)].

    The raw term leads each component's block when cfg.include_raw is set.
    Input (..., D) -> output (..., D * (2F + include_raw)).
    """
    p = np.asarray(p, dtype=np.float64)
    scaled = p[..., None] * (np.pi * (2.0 ** np.arange(cfg.frequencies)))  # (..., D, F)
    sin, cos = np.sin(scaled), np.cos(scaled)
    inter = np.stack([sin, cos], axis=-1).reshape(*p.shape, 2 * cfg.frequencies)
    if cfg.include_raw:
        inter = np.concatenate([p[..., None], inter], axis=-1)
    return inter.reshape(*p.shape[:-1], -1)


def positional_encode_vjp(p: np.ndarray, cfg: PEConfig,
                          grad_out: np.ndarray) -> np.ndarray:
    """Reverse-mode gradient of positional_encode w.r.t. p."""
    p = np.asarray(p, dtype=np.float64)
    freqs = np.pi * (2.0 ** np.arange(cfg.frequencies))
    scaled = p[..., None] * freqs
    block = 2 * cfg.frequencies + (1 if cfg.include_raw else 0)
    g = np.asarray(grad_out, dtype=np.float64).reshape(*p.shape, block)
    if cfg.include_raw:
        grad_p = g[..., 0].copy()
        g = g[..., 1:]
    else:
        grad_p = np.zeros(p.shape)
    gsin = g[..., 0::2]
    gcos = g[..., 1::2]
    grad_p += np.sum(freqs * (np.cos(scaled) * gsin - np.sin(scaled) * gcos), axis=-1)
    return grad_p


def normalize_vec(v: np.ndarray) -> np.ndarray:
    """Unit-normalize the last axis."""
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def normalize_vec_vjp(v_raw: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Reverse-mode gradient of normalize_vec."""
    v_raw = np.asarray(v_raw, dtype=np.float64)
    norm = np.linalg.norm(v_raw, axis=-1, keepdims=True)
    unit = v_raw / norm
    radial = np.sum(unit * grad_out, axis=-1, keepdims=True)
    return (grad_out - unit * radial) / norm
