"""Deform canonical Gaussians into observation space and apply the learned
per-frame refinement."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .body import Pose, SkinnedBody, blend_transforms, facet_rotations, forward_kinematics
from .cloud import SCALE_FLOOR, GaussianCloud
from .errors import NoCachedForward, ZeroDirection
from .geometry import (PEConfig, positional_encode, positional_encode_vjp,
                       quat_multiply, quat_multiply_vjp, quat_normalize,
                       quat_normalize_vjp, quat_to_rotmat, rotmat_to_quat)

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


@dataclass
class FrameStamp:
    """Frame index plus its normalized position in the clip."""
    index: int
    total: int

    @property
    def normalized(self) -> float:
        if self.total <= 1:
            return 0.0
        t = self.index / (self.total - 1)
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"frame index {self.index} outside clip of {self.total}")
        return t


@dataclass
class RigidlyPosedCloud:
    """Gaussians after the rigid (skinning + facet rotation) stage."""
    positions: np.ndarray          # (N, 3) deformed centers
    rotations: np.ndarray          # (N, 4) rotated unit quaternions
    rigid_rotations: np.ndarray    # (N, 3, 3) per-Gaussian rigid rotation
    scales: np.ndarray             # pass-through
    opacity_logits: np.ndarray     # pass-through
    sh: np.ndarray                 # pass-through
    degree: int


def animate_rigid(cloud: GaussianCloud, body: SkinnedBody, pose: Pose,
                  include_root: bool = True) -> RigidlyPosedCloud:
    """Skin Gaussian centers with their cached weight rows and rotate their
    orientations by the bound facet's rotation.

    Gaussians with a null binding pass through untouched (static scene
    content).
    """
    pose.validate(body.joint_count)
    n = len(cloud)
    bound = cloud.bind_vertex >= 0
    positions = cloud.positions.copy()
    rigid = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
    if bound.any():
        g = forward_kinematics(body, pose, include_root=include_root)
        a = blend_transforms(cloud.bind_weights[bound], g)
        positions[bound] = (np.einsum('pij,pj->pi', a[:, :, :3], cloud.positions[bound])
                            + a[:, :, 3])
        rf = facet_rotations(body, Pose.rest(body.joint_count), pose,
                             include_root=include_root)
        rigid[bound] = rf[cloud.bind_face[bound]]
    q_f = rotmat_to_quat(rigid)
    rotations = quat_multiply(q_f, quat_normalize(cloud.rotations))
    return RigidlyPosedCloud(
        positions=positions, rotations=rotations, rigid_rotations=rigid,
        scales=cloud.scales.copy(), opacity_logits=cloud.opacity_logits.copy(),
        sh=cloud.sh.copy(), degree=cloud.degree)


def apply_refinement(rigid: RigidlyPosedCloud, delta_x: np.ndarray,
                     delta_r: np.ndarray, delta_s: np.ndarray
                     ) -> tuple[np.ndarray, np.ndarray, np.ndarray, int]:
    """Apply per-Gaussian residuals; returns (x'', r'', s'') plus the number
    of scale entries clamped at the positivity floor."""
    x = rigid.positions + delta_x
    r = quat_multiply(delta_r, rigid.rotations)
    s_raw = rigid.scales + delta_s
    clamped = int(np.sum(s_raw < SCALE_FLOOR))
    s = np.maximum(s_raw, SCALE_FLOOR)
    return x, r, s, clamped


def effective_view_dir(positions: np.ndarray, camera_center: np.ndarray,
                       rigid_rotations: np.ndarray, delta_r: np.ndarray) -> np.ndarray:
    """SH query directions: normalize(x - P_c), inverse-rotated by the rigid
    rotation and then by the refinement rotation."""
    u = np.atleast_2d(positions) - np.asarray(camera_center, dtype=np.float64)
    norms = np.linalg.norm(u, axis=-1)
    if np.any(norms < 1e-9):
        raise ZeroDirection("Gaussian center coincides with the camera center")
    d = u / norms[:, None]
    d1 = np.einsum('nji,nj->ni', rigid_rotations, d)
    q = np.atleast_2d(delta_r)
    return np.einsum('nji,nj->ni', quat_to_rotmat(q), d1)


# ---------------------------------------------------------------------------
# refinement network


def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


@dataclass
class RefinementNet:
    """Per-frame residual MLP with three independent heads.

    Input per Gaussian: gamma(x) ++ gamma(t) ++ p', where p' is a linear
    compression of the pose vector (axis-angles plus shape coefficients) to
    `pose_embed` dims.  Each head is 5 fully-connected layers of width
    `hidden` with ReLU between and a zero-initialized output layer, so a
    freshly built net is an exact no-op.
    """
    joint_count: int
    beta_count: int = 0
    hidden: int = 64
    pose_embed: int = 32
    pe: PEConfig = field(default_factory=lambda: PEConfig(frequencies=10))
    seed: int = 0
    params: dict[str, np.ndarray] = field(default_factory=dict)

    HEADS = (('position', 3), ('rotation', 4), ('scale', 3))
    LAYERS = 5

    def __post_init__(self):
        if not self.params:
            self._init_params()
        self._cache = None

    @property
    def in_dim(self) -> int:
        return self.pe.out_dim(3) + self.pe.out_dim(1) + self.pose_embed

    @property
    def pose_dim(self) -> int:
        return 3 * self.joint_count + self.beta_count

    def _init_params(self) -> None:
        rng = np.random.default_rng(self.seed)

        def kaiming(shape):
            bound = np.sqrt(6.0 / shape[1])
            return rng.uniform(-bound, bound, size=shape)

        p = {}
        p['encoder.w'] = kaiming((self.pose_embed, self.pose_dim))
        p['encoder.b'] = np.zeros(self.pose_embed)
        dims = [self.in_dim] + [self.hidden] * (self.LAYERS - 1)
        for head, out in self.HEADS:
            for i in range(self.LAYERS):
                d_in = dims[i]
                d_out = out if i == self.LAYERS - 1 else self.hidden
                if i == self.LAYERS - 1:
                    p[f'{head}.{i}.w'] = np.zeros((d_out, d_in))
                else:
                    p[f'{head}.{i}.w'] = kaiming((d_out, d_in))
                p[f'{head}.{i}.b'] = np.zeros(d_out)
        self.params = p

    def param_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def _pose_vector(self, pose: Pose) -> np.ndarray:
        vec = pose.joint_rotations.ravel()
        betas = np.zeros(self.beta_count)
        if pose.betas is not None and self.beta_count:
            b = min(self.beta_count, len(pose.betas))
            betas[:b] = pose.betas[:b]
        return np.concatenate([vec, betas])

    def forward(self, positions: np.ndarray, stamp: FrameStamp, pose: Pose,
                cache: bool = False) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Residuals (dx, dr, ds); dr is normalize((1,0,0,0) + raw) so a zero
        raw output is the identity rotation."""
        positions = np.atleast_2d(np.asarray(positions, dtype=np.float64))
        n = len(positions)
        enc_x = positional_encode(positions, self.pe)
        enc_t = positional_encode(np.array([stamp.normalized]), self.pe)
        pvec = self._pose_vector(pose)
        if pvec.shape != (self.pose_dim,):
            raise ValueError(f"pose vector has dim {pvec.shape}, net expects {self.pose_dim}")
        p_embed = self.params['encoder.w'] @ pvec + self.params['encoder.b']
        inp = np.concatenate([enc_x,
                              np.broadcast_to(enc_t, (n, enc_t.shape[-1])),
                              np.broadcast_to(p_embed, (n, self.pose_embed))], axis=1)
        acts: dict[str, list[np.ndarray]] = {}
        outs = {}
        for head, _ in self.HEADS:
            h = inp
            layer_inputs = [h]
            for i in range(self.LAYERS):
                z = h @ self.params[f'{head}.{i}.w'].T + self.params[f'{head}.{i}.b']
                if i < self.LAYERS - 1:
                    h = _relu(z)
                else:
                    h = z
                layer_inputs.append(h)
            acts[head] = layer_inputs
            outs[head] = h
        raw_rot = outs['rotation']
        dr_raw = raw_rot + IDENTITY_QUAT
        dr = quat_normalize(dr_raw)
        if cache:
            self._cache = {
                'positions': positions, 'inp': inp, 'acts': acts,
                'dr_raw': dr_raw, 'pvec': pvec, 'n': n,
            }
        return outs['position'], dr, outs['scale']

    def backward(self, grad_dx: np.ndarray, grad_dr: np.ndarray,
                 grad_ds: np.ndarray) -> tuple[dict[str, np.ndarray], np.ndarray]:
        """Exact reverse-mode gradients for every parameter and the input
        positions.  grad_dr is taken w.r.t. the normalized quaternion."""
        if self._cache is None:
            raise NoCachedForward("run forward(..., cache=True) before backward()")
        c = self._cache
        grads = self.zero_grads()
        grad_raw = {
            'position': np.asarray(grad_dx, dtype=np.float64),
            'rotation': quat_normalize_vjp(c['dr_raw'], np.asarray(grad_dr, dtype=np.float64)),
            'scale': np.asarray(grad_ds, dtype=np.float64),
        }
        grad_inp = np.zeros_like(c['inp'])
        for head, _ in self.HEADS:
            layer_inputs = c['acts'][head]
            g = grad_raw[head]
            for i in reversed(range(self.LAYERS)):
                x_in = layer_inputs[i]
                if i < self.LAYERS - 1:
                    # g arrived after the ReLU of layer i's output
                    g = g * (layer_inputs[i + 1] > 0)
                grads[f'{head}.{i}.w'] += g.T @ x_in
                grads[f'{head}.{i}.b'] += g.sum(axis=0)
                g = g @ self.params[f'{head}.{i}.w']
            grad_inp += g
        dim_x = self.pe.out_dim(3)
        grad_x = positional_encode_vjp(c['positions'], self.pe, grad_inp[:, :dim_x])
        # the pose embedding is shared across the batch; its encoder learns
        grad_embed = grad_inp[:, -self.pose_embed:].sum(axis=0)
        grads['encoder.w'] += np.outer(grad_embed, c['pvec'])
        grads['encoder.b'] += grad_embed
        # raw pose and time inputs are given, so the chain stops here
        return grads, grad_x
