"""Canonical Gaussian avatar state: parameterization, initialization, frame
selection, and cloud splicing."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .body import (Pose, SkinnedBody, bind_nearest, forward_kinematics,
                   inverse_lbs)
from .errors import DegreeMismatch, EmptyCloud, NoValidQuadruple, SingularBlend
from .geometry import (MAX_SH_DEGREE, SH_COEFF_COUNT, quat_normalize,
                       quat_to_rotmat, sh_dc_from_color)
from .spatial import UniformGrid, estimate_knn_cell

SCALE_FLOOR = 1e-7
INIT_SCALE_FLOOR = 1e-4
LONE_POINT_SCALE = 0.01
INIT_OPACITY = 0.1


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def logit(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1.0 - p))


@dataclass
class ColoredPointCloud:
    """Positions with RGB colors in [0, 1]; optional blend-weight rows."""
    positions: np.ndarray                 # (P, 3)
    colors: np.ndarray                    # (P, 3)
    weights: np.ndarray | None = None     # (P, N)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.colors = np.asarray(self.colors, dtype=np.float64)
        if not np.isfinite(self.positions).all():
            raise ValueError("point positions must be finite")
        if np.any(self.colors < -1e-9) or np.any(self.colors > 1 + 1e-9):
            raise ValueError("colors must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.positions)


@dataclass
class FrameSelection:
    """Four frames spanning the yaw circle: chained pairs within [80, 100]
    degrees, the remaining pairs strictly above 80 degrees."""
    indices: tuple[int, int, int, int]
    d_min: float
    pairwise_deg: np.ndarray  # (4, 4)

    def to_json_dict(self) -> dict:
        return {
            'indices': list(self.indices),
            'd_min': self.d_min,
            'pairwise_deg': np.round(self.pairwise_deg, 6).tolist(),
        }


@dataclass
class GaussianCloud:
    """Per-Gaussian canonical parameters plus skinning bindings.

    Scales are raw positive lengths (floor SCALE_FLOOR); opacity is stored as
    a logit; a binding vertex index of -1 marks a static (never animated)
    Gaussian.
    """
    positions: np.ndarray        # (N, 3)
    rotations: np.ndarray        # (N, 4) unit quaternions
    scales: np.ndarray           # (N, 3) meters
    opacity_logits: np.ndarray   # (N,)
    sh: np.ndarray               # (N, 16, 3)
    degree: int = 0
    bind_vertex: np.ndarray = None   # (N,)
    bind_face: np.ndarray = None     # (N,)
    bind_weights: np.ndarray = None  # (N, J); zero-width when unbound
    clamp_events: int = field(default=0, compare=False)

    def __post_init__(self):
        n = len(self.positions)
        if self.bind_vertex is None:
            self.bind_vertex = np.full(n, -1, dtype=np.int64)
        if self.bind_face is None:
            self.bind_face = np.full(n, -1, dtype=np.int64)
        if self.bind_weights is None:
            self.bind_weights = np.zeros((n, 0))

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @staticmethod
    def empty(degree: int = 0, joint_count: int = 0) -> "GaussianCloud":
        return GaussianCloud(
            positions=np.zeros((0, 3)), rotations=np.zeros((0, 4)),
            scales=np.zeros((0, 3)), opacity_logits=np.zeros(0),
            sh=np.zeros((0, SH_COEFF_COUNT, 3)), degree=degree,
            bind_vertex=np.zeros(0, dtype=np.int64),
            bind_face=np.zeros(0, dtype=np.int64),
            bind_weights=np.zeros((0, joint_count)))

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(
            positions=self.positions.copy(), rotations=self.rotations.copy(),
            scales=self.scales.copy(), opacity_logits=self.opacity_logits.copy(),
            sh=self.sh.copy(), degree=self.degree,
            bind_vertex=self.bind_vertex.copy(), bind_face=self.bind_face.copy(),
            bind_weights=self.bind_weights.copy(), clamp_events=self.clamp_events)

    def select(self, idx: np.ndarray) -> "GaussianCloud":
        return GaussianCloud(
            positions=self.positions[idx], rotations=self.rotations[idx],
            scales=self.scales[idx], opacity_logits=self.opacity_logits[idx],
            sh=self.sh[idx], degree=self.degree,
            bind_vertex=self.bind_vertex[idx], bind_face=self.bind_face[idx],
            bind_weights=self.bind_weights[idx], clamp_events=self.clamp_events)

    def validate(self, body: SkinnedBody | None = None) -> None:
        n = len(self)
        assert self.rotations.shape == (n, 4) and self.scales.shape == (n, 3)
        if n:
            norms = np.linalg.norm(self.rotations, axis=-1)
            assert np.abs(norms - 1.0).max() < 1e-6, "rotations must be unit quaternions"
            assert self.scales.min() >= SCALE_FLOOR - 1e-12, "scales below the positive floor"
            op = self.opacities
            assert 0.0 < op.min() and op.max() < 1.0
        assert 0 <= self.degree <= MAX_SH_DEGREE
        active = (self.degree + 1) ** 2
        assert np.all(self.sh[:, active:, :] == 0.0), "bands above the active degree must be zero"
        if body is not None:
            bound = self.bind_vertex >= 0
            assert self.bind_vertex[bound].max(initial=0) < body.vertex_count
            assert self.bind_face[bound].max(initial=0) < body.face_count


def covariance(rotation: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """Covariance of one Gaussian: R diag(s^2) R^T (symmetric positive-definite)."""
    return covariance_batch(np.asarray(rotation)[None], np.asarray(scale)[None])[0]


def covariance_batch(rotations: np.ndarray, scales: np.ndarray) -> np.ndarray:
    """(N, 4) quaternions + (N, 3) scales -> (N, 3, 3) covariances."""
    r = quat_to_rotmat(quat_normalize(rotations))
    m = r * np.asarray(scales, dtype=np.float64)[:, None, :]
    return m @ np.swapaxes(m, -1, -2)


def _neighbor_scales(positions: np.ndarray) -> np.ndarray:
    """Isotropic initial scale: mean distance to the (up to) 3 nearest neighbors."""
    p = len(positions)
    if p == 1:
        return np.full(1, LONE_POINT_SCALE)
    k = min(3, p - 1)
    cell = estimate_knn_cell(positions, k)
    d2, _ = UniformGrid(positions, cell).query(positions, k=k + 1)
    dists = np.sqrt(d2[:, 1:])  # drop self
    return np.maximum(dists.mean(axis=1), INIT_SCALE_FLOOR)


def _fresh_cloud(positions: np.ndarray, colors: np.ndarray,
                 body: SkinnedBody | None) -> GaussianCloud:
    n = len(positions)
    sh = np.zeros((n, SH_COEFF_COUNT, 3))
    sh[:, 0, :] = sh_dc_from_color(colors)
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    scales = np.repeat(_neighbor_scales(positions)[:, None], 3, axis=1)
    cloud = GaussianCloud(
        positions=positions.copy(), rotations=rotations, scales=scales,
        opacity_logits=np.full(n, logit(INIT_OPACITY)), sh=sh, degree=0)
    if body is not None:
        vidx, fidx = bind_nearest(positions, body)
        cloud.bind_vertex = vidx
        cloud.bind_face = fidx
        cloud.bind_weights = body.weights[vidx]
    return cloud


def init_from_points(pc: ColoredPointCloud, body: SkinnedBody | None) -> GaussianCloud:
    """One Gaussian per canonical-space point; DC color, isotropic scale,
    activated opacity 0.1."""
    if len(pc) == 0:
        raise EmptyCloud("cannot initialize from an empty point cloud")
    return _fresh_cloud(pc.positions, pc.colors, body)


def init_from_vertices(body: SkinnedBody) -> GaussianCloud:
    """One white Gaussian per template vertex, bound to that vertex."""
    white = np.ones((body.vertex_count, 3))
    cloud = _fresh_cloud(body.vertices, white, body)
    # each Gaussian sits exactly on its vertex; bind there directly
    cloud.bind_vertex = np.arange(body.vertex_count, dtype=np.int64)
    cloud.bind_weights = body.weights.copy()
    return cloud


def fuse_parts(parts: list[tuple[ColoredPointCloud, Pose]],
               body: SkinnedBody) -> ColoredPointCloud:
    """Canonicalize each posed part by inverse blend skinning, then concatenate."""
    pieces_pos, pieces_col = [], []
    for k, (pc, pose) in enumerate(parts):
        pose.validate(body.joint_count)
        g = forward_kinematics(body, pose, include_root=True)
        if pc.weights is not None:
            w = pc.weights
        else:
            posed = _posed_template(body, pose)
            vidx, _ = bind_nearest(pc.positions, body, vertices=posed)
            w = body.weights[vidx]
        try:
            canonical = inverse_lbs(pc.positions, w, g)
        except SingularBlend as exc:
            raise SingularBlend(f"part {k}: {exc}") from exc
        pieces_pos.append(canonical)
        pieces_col.append(pc.colors)
    return ColoredPointCloud(np.concatenate(pieces_pos), np.concatenate(pieces_col))


def _posed_template(body: SkinnedBody, pose: Pose) -> np.ndarray:
    from .body import pose_vertices
    return pose_vertices(body, pose, include_root=True)


def merge_clouds(a: GaussianCloud, b: GaussianCloud) -> GaussianCloud:
    """Splice two clouds; a static scene cloud keeps its null bindings."""
    if len(a) == 0:
        return b.copy()
    if len(b) == 0:
        return a.copy()
    if a.degree != b.degree:
        raise DegreeMismatch(f"SH degrees differ: {a.degree} vs {b.degree}")
    ja, jb = a.bind_weights.shape[1], b.bind_weights.shape[1]
    if ja and jb and ja != jb:
        raise DegreeMismatch(f"clouds bound to different bodies ({ja} vs {jb} joints)")
    j = max(ja, jb)
    wa = a.bind_weights if ja == j else np.zeros((len(a), j))
    wb = b.bind_weights if jb == j else np.zeros((len(b), j))
    return GaussianCloud(
        positions=np.concatenate([a.positions, b.positions]),
        rotations=np.concatenate([a.rotations, b.rotations]),
        scales=np.concatenate([a.scales, b.scales]),
        opacity_logits=np.concatenate([a.opacity_logits, b.opacity_logits]),
        sh=np.concatenate([a.sh, b.sh]),
        degree=a.degree,
        bind_vertex=np.concatenate([a.bind_vertex, b.bind_vertex]),
        bind_face=np.concatenate([a.bind_face, b.bind_face]),
        bind_weights=np.concatenate([wa, wb]))


# ---------------------------------------------------------------------------
# frame selection


def pairwise_yaw_angles(rotations: np.ndarray) -> np.ndarray:
    """Geodesic angle (degrees) between every pair of global rotations."""
    r = np.asarray(rotations, dtype=np.float64)
    tr = np.einsum('iab,jab->ij', r, r)  # trace(R_i^T R_j)
    return np.degrees(np.arccos(np.clip((tr - 1.0) * 0.5, -1.0, 1.0)))


def select_frames(rotations: np.ndarray, joint_positions: np.ndarray,
                  canonical_joints: np.ndarray) -> FrameSelection:
    """Pick four frames roughly 90 degrees apart with poses nearest canonical.

    Chained pairs (i,j), (j,k), (k,l) must fall within [80, 100] degrees; the
    remaining pairs must exceed 80 degrees.  Among valid quadruples the one
    minimizing the summed mean joint distance to the canonical pose wins;
    the first minimum in ascending index order is kept.
    """
    t = len(rotations)
    if t < 4:
        raise ValueError(f"need at least 4 frames, got {t}")
    delta = pairwise_yaw_angles(rotations)
    cand = [np.nonzero((delta[i] >= 80.0) & (delta[i] <= 100.0)
                       & (np.arange(t) > i))[0] for i in range(t)]
    dist = np.linalg.norm(np.asarray(joint_positions) - np.asarray(canonical_joints)[None],
                          axis=-1).mean(axis=-1)  # (T,)
    min_d = dist.min()
    best = None
    best_d = np.inf
    for i in range(t):
        if dist[i] + 3 * min_d >= best_d:
            continue
        for j in cand[i]:
            dij = dist[i] + dist[j]
            if dij + 2 * min_d >= best_d:
                continue
            for k in cand[j]:
                if delta[i, k] <= 80.0:
                    continue
                dijk = dij + dist[k]
                if dijk + min_d >= best_d:
                    continue
                for l in cand[k]:
                    if delta[i, l] <= 80.0 or delta[j, l] <= 80.0:
                        continue
                    d = dijk + dist[l]
                    if d < best_d:
                        best_d = d
                        best = (i, int(j), int(k), int(l))
    if best is None:
        raise NoValidQuadruple(
            f"no four frames satisfy the angle predicate (max pairwise angle "
            f"{delta.max():.2f} degrees)")
    idx = np.array(best)
    return FrameSelection(indices=tuple(int(v) for v in best), d_min=float(best_d),
                          pairwise_deg=delta[np.ix_(idx, idx)])
