"""Skinned template body: kinematics, blend skinning, and facet frames."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import container
from .errors import (DegenerateFacet, JointCountMismatch, ParseError,
                     ShapeMismatch, SingularBlend, ValidationError)
from .geometry import require_rotation, rotmat_from_axis_angle
from .spatial import UniformGrid

BODY_MAGIC = b'GAVB\0'
BODY_VERSION = 1

_WEIGHT_SUM_TOL = 1e-6
_MIN_FACE_AREA = 1e-12


@dataclass
class SkinnedBody:
    """Template mesh with joints, parents, and per-vertex blend weights.

    Immutable after load; canonical-pose vertices are in meters.
    """
    vertices: np.ndarray          # (V, 3) f64
    faces: np.ndarray             # (F, 3) int
    weights: np.ndarray           # (V, N) f64
    joints: np.ndarray            # (N, 3) f64 rest joint positions
    parents: np.ndarray           # (N,) int, root = -1
    shape_basis: np.ndarray | None = None  # (V, 3, B)
    joint_names: list[str] = field(default_factory=list)

    @property
    def vertex_count(self) -> int:
        return len(self.vertices)

    @property
    def face_count(self) -> int:
        return len(self.faces)

    @property
    def joint_count(self) -> int:
        return len(self.joints)

    def validate(self) -> None:
        v, f, w = self.vertices, self.faces, self.weights
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValidationError(f"vertices must be (V, 3), got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise ValidationError(f"faces must be (F, 3), got {f.shape}")
        if w.shape != (len(v), self.joint_count):
            raise ValidationError(
                f"weights must be (V, N) = ({len(v)}, {self.joint_count}), got {w.shape}")
        if not np.isfinite(v).all() or not np.isfinite(w).all():
            raise ValidationError("vertices and weights must be finite")
        if f.min(initial=0) < 0 or f.max(initial=-1) >= len(v):
            raise ValidationError("faces index out-of-range vertices")
        if np.any(w < -1e-12):
            row = int(np.argwhere(np.any(w < -1e-12, axis=1))[0][0])
            raise ValidationError(f"weight row {row} has negative entries")
        sums = w.sum(axis=1)
        bad = np.abs(sums - 1.0) > _WEIGHT_SUM_TOL
        if bad.any():
            row = int(np.argmax(bad))
            raise ValidationError(f"weight row {row} sums to {sums[row]:.6g}, expected 1")
        self._validate_tree()
        areas = _face_areas(self.vertices, self.faces)
        if np.any(areas < _MIN_FACE_AREA):
            idx = int(np.argmax(areas < _MIN_FACE_AREA))
            raise ValidationError(f"template face {idx} is degenerate (area {areas[idx]:.3g})")
        if self.shape_basis is not None and self.shape_basis.shape[:2] != (len(v), 3):
            raise ValidationError(
                f"shape basis must be (V, 3, B), got {self.shape_basis.shape}")

    def _validate_tree(self) -> None:
        parents = self.parents
        if len(parents) != self.joint_count:
            raise ValidationError("parents length must equal joint count")
        if parents[0] != -1:
            raise ValidationError("joint 0 must be the root (parent -1)")
        if np.sum(parents == -1) != 1:
            raise ValidationError("exactly one root joint expected")
        # every joint must reach the root without cycles
        for j in range(1, self.joint_count):
            seen = set()
            cur = j
            while cur != 0:
                if cur in seen or not 0 <= parents[cur] < self.joint_count:
                    raise ValidationError(f"joint {j} does not reach the root")
                seen.add(cur)
                cur = int(parents[cur])

    def topological_order(self) -> list[int]:
        """Joint order with every parent before its children."""
        children: dict[int, list[int]] = {}
        for j, p in enumerate(self.parents):
            children.setdefault(int(p), []).append(j)
        order, stack = [], [0]
        while stack:
            j = stack.pop()
            order.append(j)
            stack.extend(reversed(children.get(j, [])))
        return order

    def mean_edge_length(self) -> float:
        f = self.faces
        v = self.vertices
        edges = np.concatenate([v[f[:, 1]] - v[f[:, 0]],
                                v[f[:, 2]] - v[f[:, 1]],
                                v[f[:, 0]] - v[f[:, 2]]])
        return float(np.linalg.norm(edges, axis=1).mean())

    def extent(self) -> float:
        """Diagonal of the canonical template bounding box (meters)."""
        return float(np.linalg.norm(self.vertices.max(axis=0) - self.vertices.min(axis=0)))

    def face_centroids(self, vertices: np.ndarray | None = None) -> np.ndarray:
        v = self.vertices if vertices is None else vertices
        return v[self.faces].mean(axis=1)


@dataclass
class Pose:
    """One frame of articulation: per-joint axis-angle plus a global transform."""
    joint_rotations: np.ndarray                       # (N, 3) axis-angle, radians
    root_rotation: np.ndarray = None                  # (3, 3), defaults to identity
    root_translation: np.ndarray = None               # (3,), defaults to zero
    betas: np.ndarray | None = None                   # (B,) optional shape coefficients

    def __post_init__(self):
        self.joint_rotations = np.asarray(self.joint_rotations, dtype=np.float64)
        if self.root_rotation is None:
            self.root_rotation = np.eye(3)
        self.root_rotation = np.asarray(self.root_rotation, dtype=np.float64)
        if self.root_translation is None:
            self.root_translation = np.zeros(3)
        self.root_translation = np.asarray(self.root_translation, dtype=np.float64)
        if self.betas is not None:
            self.betas = np.asarray(self.betas, dtype=np.float64)

    def validate(self, joint_count: int | None = None) -> None:
        if not np.isfinite(self.joint_rotations).all():
            raise ValidationError("pose rotations must be finite")
        mags = np.linalg.norm(self.joint_rotations, axis=-1)
        if np.any(mags >= 2 * np.pi):
            raise ValidationError("axis-angle magnitude must stay below 2*pi")
        require_rotation(self.root_rotation)
        if joint_count is not None and self.joint_rotations.shape != (joint_count, 3):
            raise JointCountMismatch(
                f"pose has {self.joint_rotations.shape[0]} joints, body has {joint_count}")

    @staticmethod
    def rest(joint_count: int) -> "Pose":
        return Pose(np.zeros((joint_count, 3)))

    def without_root(self) -> "Pose":
        return Pose(self.joint_rotations, np.eye(3), np.zeros(3), self.betas)

    def has_root_motion(self) -> bool:
        return (np.abs(self.root_rotation - np.eye(3)).max() > 0
                or np.abs(self.root_translation).max() > 0)


@dataclass
class BoneTransforms:
    """Per-joint rigid maps from canonical space to the posed frame."""
    matrices: np.ndarray  # (N, 4, 4)

    def __len__(self) -> int:
        return len(self.matrices)

    @property
    def rotations(self) -> np.ndarray:
        return self.matrices[:, :3, :3]

    @property
    def translations(self) -> np.ndarray:
        return self.matrices[:, :3, 3]


def forward_kinematics(body: SkinnedBody, pose: Pose, include_root: bool = True) -> BoneTransforms:
    """Compose joint transforms root-to-leaf.

    G_i maps a canonical-space point rigidly attached to joint i to its posed
    location; at rest every G_i is the identity.  The global (root) transform
    is applied last, or withheld when include_root is False.
    """
    if pose.joint_rotations.shape[0] != body.joint_count:
        raise JointCountMismatch(
            f"pose has {pose.joint_rotations.shape[0]} joints, body has {body.joint_count}")
    n = body.joint_count
    local_rot = rotmat_from_axis_angle(pose.joint_rotations)
    world = np.zeros((n, 4, 4))
    for j in body.topological_order():
        a = np.eye(4)
        a[:3, :3] = local_rot[j]
        p = int(body.parents[j])
        if p < 0:
            a[:3, 3] = body.joints[j]
            world[j] = a
        else:
            a[:3, 3] = body.joints[j] - body.joints[p]
            world[j] = world[p] @ a
    # subtract the rest joint so canonical points map through directly
    g = world.copy()
    g[:, :3, 3] -= np.einsum('nij,nj->ni', world[:, :3, :3], body.joints)
    if include_root:
        root = np.eye(4)
        root[:3, :3] = pose.root_rotation
        root[:3, 3] = pose.root_translation
        g = root[None] @ g
    return BoneTransforms(g)


def blend_transforms(weights: np.ndarray, transforms: BoneTransforms) -> np.ndarray:
    """Per-point blended affine maps: (P, N) weights -> (P, 3, 4)."""
    g = transforms.matrices[:, :3, :]
    return np.einsum('pn,nij->pij', weights, g)


def lbs_deform(points: np.ndarray, weights: np.ndarray, transforms: BoneTransforms) -> np.ndarray:
    """Forward linear blend skinning: each point moves by its weighted bone mix."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ShapeMismatch(f"points must be (P, 3), got {points.shape}")
    if weights.shape != (len(points), len(transforms)):
        raise ShapeMismatch(
            f"weights must be ({len(points)}, {len(transforms)}), got {weights.shape}")
    a = blend_transforms(weights, transforms)
    return np.einsum('pij,pj->pi', a[:, :, :3], points) + a[:, :, 3]


def inverse_lbs(points: np.ndarray, weights: np.ndarray, transforms: BoneTransforms) -> np.ndarray:
    """Invert the blended transform per point (observation -> canonical)."""
    points = np.asarray(points, dtype=np.float64)
    if weights.shape != (len(points), len(transforms)):
        raise ShapeMismatch(
            f"weights must be ({len(points)}, {len(transforms)}), got {weights.shape}")
    a = blend_transforms(weights, transforms)
    rot = a[:, :, :3]
    det = np.linalg.det(rot)
    if np.any(np.abs(det) < 1e-12):
        idx = int(np.argmax(np.abs(det) < 1e-12))
        raise SingularBlend(f"blended transform for point {idx} is singular (|det|={abs(det[idx]):.3g})")
    return np.linalg.solve(rot, (points - a[:, :, 3])[..., None])[..., 0]


def pose_vertices(body: SkinnedBody, pose: Pose, include_root: bool = True) -> np.ndarray:
    """Template vertices posed by FK + LBS, with shape offsets applied first."""
    verts = body.vertices
    if body.shape_basis is not None and pose.betas is not None and len(pose.betas):
        b = min(len(pose.betas), body.shape_basis.shape[2])
        verts = verts + body.shape_basis[:, :, :b] @ pose.betas[:b]
    g = forward_kinematics(body, pose, include_root=include_root)
    return lbs_deform(verts, body.weights, g)


def _face_areas(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    tri = vertices[faces]
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    return 0.5 * np.linalg.norm(cross, axis=-1)


def facet_basis(vertices: np.ndarray, face: np.ndarray) -> np.ndarray:
    """Orthonormal frame of one triangle, columns (a, b, c).

    a follows edge AB, b is the face normal, c completes the right-handed
    frame; vertex order is taken as given (the basis depends on winding).
    """
    bases = facet_bases(np.asarray(vertices, dtype=np.float64),
                        np.asarray(face, dtype=np.int64)[None])
    return bases[0]


def facet_bases(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Batched facet frames, (F, 3, 3) with columns (a, b, c)."""
    tri = vertices[faces]
    ab = tri[:, 1] - tri[:, 0]
    ac = tri[:, 2] - tri[:, 0]
    normal = np.cross(ab, ac)
    area = 0.5 * np.linalg.norm(normal, axis=-1)
    if np.any(area < _MIN_FACE_AREA):
        idx = int(np.argmax(area < _MIN_FACE_AREA))
        raise DegenerateFacet(f"facet {idx} is degenerate (area {area[idx]:.3g} m^2)")
    a = ab / np.linalg.norm(ab, axis=-1, keepdims=True)
    b = normal / np.linalg.norm(normal, axis=-1, keepdims=True)
    c = np.cross(a, b)
    return np.stack([a, b, c], axis=-1)


def facet_rotations_from_vertices(verts_can: np.ndarray, verts_ob: np.ndarray,
                                  faces: np.ndarray) -> np.ndarray:
    """Per-facet rotation mapping the canonical facet frame onto the observed one."""
    e_can = facet_bases(verts_can, faces)
    e_ob = facet_bases(verts_ob, faces)
    return np.einsum('fij,fkj->fik', e_ob, e_can)  # E_ob @ E_can^T


def facet_rotations(body: SkinnedBody, pose_can: Pose, pose_ob: Pose,
                    include_root: bool = True) -> np.ndarray:
    """Batch-precompute the facet rotations between two poses of the body."""
    pose_can.validate(body.joint_count)
    pose_ob.validate(body.joint_count)
    verts_can = pose_vertices(body, pose_can, include_root=include_root)
    verts_ob = pose_vertices(body, pose_ob, include_root=include_root)
    return facet_rotations_from_vertices(verts_can, verts_ob, body.faces)


def bind_nearest(points: np.ndarray, body: SkinnedBody,
                 vertices: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Nearest template vertex and nearest facet centroid per point.

    Computed in canonical space unless explicit vertices are given; ties break
    to the lowest index.
    """
    points = np.asarray(points, dtype=np.float64)
    verts = body.vertices if vertices is None else vertices
    cell = max(body.mean_edge_length(), 1e-9)
    _, vidx = UniformGrid(verts, cell).query(points, k=1)
    centroids = body.face_centroids(verts)
    _, fidx = UniformGrid(centroids, cell).query(points, k=1)
    return vidx[:, 0], fidx[:, 0]


# ---------------------------------------------------------------------------
# body file I/O


def load_body(path) -> SkinnedBody:
    """Load and validate a skinned body from the binary or JSON format."""
    path = Path(path)
    if not path.exists():
        raise ParseError(f"body file not found: {path}")
    if path.suffix.lower() == '.json':
        body = _body_from_json(path)
    else:
        body = _body_from_binary(path)
    body.validate()
    return body


def save_body(body: SkinnedBody, path) -> None:
    path = Path(path)
    if path.suffix.lower() == '.json':
        doc = {
            'version': BODY_VERSION,
            'vertices': body.vertices.tolist(),
            'faces': body.faces.tolist(),
            'weights': body.weights.tolist(),
            'joints': body.joints.tolist(),
            'parents': body.parents.tolist(),
        }
        if body.shape_basis is not None:
            doc['shape_basis'] = body.shape_basis.tolist()
        if body.joint_names:
            doc['joint_names'] = body.joint_names
        path.write_text(json.dumps(doc))
        return
    sections = {
        'vertices': body.vertices.astype('<f8'),
        'faces': body.faces.astype('<u4'),
        'weights': body.weights.astype('<f8'),
        'joints': body.joints.astype('<f8'),
        'parents': body.parents.astype('<i4'),
    }
    if body.shape_basis is not None:
        sections['shape_basis'] = body.shape_basis.astype('<f8')
    if body.joint_names:
        names = '\n'.join(body.joint_names).encode('utf-8')
        sections['joint_names'] = np.frombuffer(names, dtype=np.uint8)
    container.write_container(path, BODY_MAGIC, BODY_VERSION, sections)


def _body_from_json(path: Path) -> SkinnedBody:
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc})") from exc
    try:
        return SkinnedBody(
            vertices=np.asarray(doc['vertices'], dtype=np.float64),
            faces=np.asarray(doc['faces'], dtype=np.int64),
            weights=np.asarray(doc['weights'], dtype=np.float64),
            joints=np.asarray(doc['joints'], dtype=np.float64),
            parents=np.asarray(doc['parents'], dtype=np.int64),
            shape_basis=(np.asarray(doc['shape_basis'], dtype=np.float64)
                         if 'shape_basis' in doc else None),
            joint_names=list(doc.get('joint_names', [])),
        )
    except KeyError as exc:
        raise ParseError(f"{path}: missing required field {exc}") from exc


def _body_from_binary(path: Path) -> SkinnedBody:
    sections = container.read_container(path, BODY_MAGIC, BODY_VERSION)
    for required in ('vertices', 'faces', 'weights', 'joints', 'parents'):
        if required not in sections:
            raise ParseError(f"{path}: missing section {required!r}")
    names: list[str] = []
    if 'joint_names' in sections:
        names = sections['joint_names'].tobytes().decode('utf-8').split('\n')
    return SkinnedBody(
        vertices=sections['vertices'].astype(np.float64),
        faces=sections['faces'].astype(np.int64),
        weights=sections['weights'].astype(np.float64),
        joints=sections['joints'].astype(np.float64),
        parents=sections['parents'].astype(np.int64),
        shape_basis=(sections['shape_basis'].astype(np.float64)
                     if 'shape_basis' in sections else None),
        joint_names=names,
    )
