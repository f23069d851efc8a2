"""Deterministic synthetic bodies used by tests, the CLI, and the dataset generator."""

from __future__ import annotations

import numpy as np

from .body import SkinnedBody


def make_cylinder_body(segments: int = 14, rings: int = 9, joint_count: int = 2,
                       radius: float = 0.15, height: float = 1.6) -> SkinnedBody:
    """Capped cylinder along +y with a joint chain on the axis.

    Vertex count is rings * segments + 2 (two pole vertices), face count is
    2 * rings * segments.  The defaults give the 128-vertex two-joint body.
    """
    ys = np.linspace(0.0, height, rings + 2)[1:-1]
    phi = 2 * np.pi * np.arange(segments) / segments
    ring_pts = np.stack([
        np.repeat(np.cos(phi)[None, :] * radius, rings, axis=0).ravel(),
        np.repeat(ys[:, None], segments, axis=1).ravel(),
        np.repeat(np.sin(phi)[None, :] * radius, rings, axis=0).ravel(),
    ], axis=1)
    bottom = np.array([[0.0, 0.0, 0.0]])
    top = np.array([[0.0, height, 0.0]])
    vertices = np.concatenate([ring_pts, bottom, top])
    bottom_idx = rings * segments
    top_idx = bottom_idx + 1

    def rv(i, j):
        return i * segments + (j % segments)

    faces = []
    for j in range(segments):
        faces.append((bottom_idx, rv(0, j), rv(0, j + 1)))
    for i in range(rings - 1):
        for j in range(segments):
            a, b = rv(i, j), rv(i, j + 1)
            c, d = rv(i + 1, j + 1), rv(i + 1, j)
            faces.append((a, b, c))
            faces.append((a, c, d))
    for j in range(segments):
        faces.append((top_idx, rv(rings - 1, j + 1), rv(rings - 1, j)))
    faces = np.asarray(faces, dtype=np.int64)

    joint_y = height * (np.arange(joint_count) + 0.5) / joint_count
    joints = np.stack([np.zeros(joint_count), joint_y, np.zeros(joint_count)], axis=1)
    parents = np.arange(joint_count) - 1

    weights = _axis_hat_weights(vertices[:, 1], joint_y)
    names = [f"joint_{i}" for i in range(joint_count)]
    body = SkinnedBody(vertices=vertices, faces=faces, weights=weights,
                       joints=joints, parents=parents, joint_names=names)
    body.validate()
    return body


def make_smpl_sized_body() -> SkinnedBody:
    """Body with the classic full-body mesh dimensions: 6890 vertices,
    13776 faces, 24 joints."""
    return make_cylinder_body(segments=56, rings=123, joint_count=24,
                              radius=0.25, height=1.8)


def _axis_hat_weights(heights: np.ndarray, joint_y: np.ndarray) -> np.ndarray:
    """Piecewise-linear weights between adjacent joints along the axis."""
    n = len(joint_y)
    w = np.zeros((len(heights), n))
    if n == 1:
        w[:, 0] = 1.0
        return w
    for vi, y in enumerate(heights):
        if y <= joint_y[0]:
            w[vi, 0] = 1.0
        elif y >= joint_y[-1]:
            w[vi, -1] = 1.0
        else:
            j = int(np.searchsorted(joint_y, y) - 1)
            t = (y - joint_y[j]) / (joint_y[j + 1] - joint_y[j])
            w[vi, j] = 1.0 - t
            w[vi, j + 1] = t
    return w
