import numpy as np
import pytest

from gavatar.animate import (FrameStamp, RefinementNet, animate_rigid,
                             apply_refinement, effective_view_dir)
from gavatar.body import Pose
from gavatar.cloud import SCALE_FLOOR
from gavatar.errors import NoCachedForward, ZeroDirection
from gavatar.geometry import quat_multiply, rotmat_from_axis_angle

from conftest import build_test_cloud

RNG = np.random.default_rng(31)


class TestAnimateRigid:
    def test_canonical_pose_is_identity(self, body):
        cloud = build_test_cloud(body, n=8)
        rigid = animate_rigid(cloud, body, Pose.rest(body.joint_count))
        assert np.abs(rigid.positions - cloud.positions).max() < 1e-12
        assert np.abs(rigid.rigid_rotations - np.eye(3)).max() < 1e-12
        dots = np.abs(np.sum(rigid.rotations * cloud.rotations, axis=-1))
        assert np.abs(dots - 1).max() < 1e-12

    def test_pure_root_rotation(self, body):
        cloud = build_test_cloud(body, n=6)
        rot = rotmat_from_axis_angle(np.array([0, 0, np.pi / 2]))
        pose = Pose.rest(body.joint_count)
        pose.root_rotation = rot
        rigid = animate_rigid(cloud, body, pose)
        assert np.abs(rigid.positions - cloud.positions @ rot.T).max() < 1e-9
        assert np.abs(rigid.rigid_rotations - rot).max() < 1e-9
        # orientation rotated by the same quarter turn
        from gavatar.geometry import rotmat_to_quat
        expect = quat_multiply(np.tile(rotmat_to_quat(rot), (6, 1)), cloud.rotations)
        dots = np.abs(np.sum(rigid.rotations * expect, axis=-1))
        assert np.abs(dots - 1).max() < 1e-9

    def test_random_pose_keeps_rotations_proper(self, body):
        cloud = build_test_cloud(body, n=10)
        pose = Pose(RNG.uniform(-0.6, 0.6, (body.joint_count, 3)))
        rigid = animate_rigid(cloud, body, pose)
        assert np.abs(np.linalg.norm(rigid.rotations, axis=-1) - 1).max() < 1e-9
        gram = rigid.rigid_rotations @ np.swapaxes(rigid.rigid_rotations, -1, -2)
        assert np.abs(gram - np.eye(3)).max() < 1e-9
        assert np.abs(np.linalg.det(rigid.rigid_rotations) - 1).max() < 1e-9


class TestRefinementNet:
    def test_zero_init_is_identity(self, body):
        net = RefinementNet(joint_count=2, seed=0)
        x = RNG.normal(size=(7, 3))
        dx, dr, ds = net.forward(x, FrameStamp(2, 10), Pose.rest(2))
        assert np.abs(dx).max() == 0.0
        assert np.abs(ds).max() == 0.0
        assert np.allclose(dr, [1, 0, 0, 0])

    def test_output_shapes(self):
        net = RefinementNet(joint_count=2, seed=0)
        dx, dr, ds = net.forward(np.zeros((12, 3)), FrameStamp(0, 5), Pose.rest(2))
        assert dx.shape == (12, 3) and dr.shape == (12, 4) and ds.shape == (12, 3)

    def test_head_jacobian_matches_finite_differences(self):
        net = RefinementNet(joint_count=2, seed=2)
        rng = np.random.default_rng(0)
        for head in ('position', 'rotation', 'scale'):
            net.params[f'{head}.4.w'] = rng.normal(0, 0.05,
                                                   net.params[f'{head}.4.w'].shape)
        x = rng.normal(0, 0.4, (10, 3))
        stamp, pose = FrameStamp(3, 9), Pose(rng.uniform(-0.3, 0.3, (2, 3)))
        up = {h: rng.normal(size=(10, d)) for h, d in RefinementNet.HEADS}
        net.forward(x, stamp, pose, cache=True)
        _, grad_x = net.backward(up['position'], up['rotation'], up['scale'])

        def weighted(xv):
            a, b, c = net.forward(xv, stamp, pose)
            return float((a * up['position']).sum() + (b * up['rotation']).sum()
                         + (c * up['scale']).sum())

        # the highest encoding frequency is ~2^9 pi, so the step must stay
        # small enough not to cross ReLU kinks
        h = 1e-7
        worst = 0.0
        for i in range(10):
            for j in range(3):
                xp, xm = x.copy(), x.copy()
                xp[i, j] += h
                xm[i, j] -= h
                fd = (weighted(xp) - weighted(xm)) / (2 * h)
                an = grad_x[i, j]
                worst = max(worst, abs(an - fd) / max(abs(fd), abs(an), 1e-4))
        assert worst <= 1e-5

    def test_backward_requires_cached_forward(self):
        net = RefinementNet(joint_count=2, seed=0)
        with pytest.raises(NoCachedForward):
            net.backward(np.zeros((1, 3)), np.zeros((1, 4)), np.zeros((1, 3)))

    def test_zero_upstream_gives_zero_grads(self):
        net = RefinementNet(joint_count=2, seed=1)
        net.forward(RNG.normal(size=(4, 3)), FrameStamp(1, 4), Pose.rest(2), cache=True)
        grads, gx = net.backward(np.zeros((4, 3)), np.zeros((4, 4)), np.zeros((4, 3)))
        assert all(np.abs(v).max() == 0.0 for v in grads.values())
        assert np.abs(gx).max() == 0.0

    def test_grads_linear_in_upstream(self):
        net = RefinementNet(joint_count=2, seed=1)
        rng = np.random.default_rng(9)
        for head in ('position', 'rotation', 'scale'):
            net.params[f'{head}.4.w'] = rng.normal(0, 0.05,
                                                   net.params[f'{head}.4.w'].shape)
        net.forward(rng.normal(size=(5, 3)), FrameStamp(1, 4), Pose.rest(2), cache=True)
        up = [rng.normal(size=(5, 3)), rng.normal(size=(5, 4)), rng.normal(size=(5, 3))]
        g1, _ = net.backward(*up)
        net.forward(net._cache['positions'], FrameStamp(1, 4), Pose.rest(2), cache=True)
        g2, _ = net.backward(*(2 * u for u in up))
        for key in g1:
            assert np.abs(g2[key] - 2 * g1[key]).max() < 1e-12

    def test_miniature_all_parameters_match_finite_differences(self):
        net = RefinementNet(joint_count=2, hidden=8, pose_embed=4,
                            pe=__import__('gavatar.geometry', fromlist=['PEConfig'])
                            .PEConfig(frequencies=3), seed=5)
        rng = np.random.default_rng(2)
        for head in ('position', 'rotation', 'scale'):
            net.params[f'{head}.4.w'] = rng.normal(0, 0.1, net.params[f'{head}.4.w'].shape)
            net.params[f'{head}.4.b'] = rng.normal(0, 0.1, net.params[f'{head}.4.b'].shape)
        x = rng.normal(0, 0.5, (6, 3))
        stamp, pose = FrameStamp(2, 7), Pose(rng.uniform(-0.4, 0.4, (2, 3)))
        up = [rng.normal(size=(6, 3)), rng.normal(size=(6, 4)), rng.normal(size=(6, 3))]
        net.forward(x, stamp, pose, cache=True)
        grads, _ = net.backward(*up)

        def weighted():
            a, b, c = net.forward(x, stamp, pose)
            return float((a * up[0]).sum() + (b * up[1]).sum() + (c * up[2]).sum())

        h = 1e-6
        worst = 0.0
        for key, arr in net.params.items():
            for idx in np.ndindex(arr.shape):
                orig = arr[idx]
                arr[idx] = orig + h
                lp = weighted()
                arr[idx] = orig - h
                lm = weighted()
                arr[idx] = orig
                fd = (lp - lm) / (2 * h)
                an = grads[key][idx]
                worst = max(worst, abs(an - fd) / max(abs(fd), abs(an), 1e-4))
        assert worst <= 1e-5

    def test_deterministic_forward(self):
        net = RefinementNet(joint_count=2, seed=3)
        x = RNG.normal(size=(5, 3))
        args = (x, FrameStamp(4, 9), Pose(RNG.uniform(-0.2, 0.2, (2, 3))))
        out1 = net.forward(*args)
        out2 = net.forward(*args)
        for a, b in zip(out1, out2):
            assert np.array_equal(a, b)

    def test_parameter_count_reported(self):
        net = RefinementNet(joint_count=2, seed=0)
        total = sum(v.size for v in net.params.values())
        assert net.param_count() == total > 0


class TestApplyRefinement:
    def test_zero_residuals_are_identity(self, body):
        cloud = build_test_cloud(body, n=5)
        rigid = animate_rigid(cloud, body, Pose.rest(body.joint_count))
        n = len(cloud)
        x, r, s, clamps = apply_refinement(rigid, np.zeros((n, 3)),
                                           np.tile([1.0, 0, 0, 0], (n, 1)),
                                           np.zeros((n, 3)))
        assert np.abs(x - rigid.positions).max() == 0.0
        assert np.abs(s - rigid.scales).max() == 0.0
        dots = np.abs(np.sum(r * rigid.rotations, axis=-1))
        assert np.abs(dots - 1).max() < 1e-12
        assert clamps == 0

    def test_scale_floor_clamps_and_counts(self, body):
        cloud = build_test_cloud(body, n=4)
        rigid = animate_rigid(cloud, body, Pose.rest(body.joint_count))
        _, _, s, clamps = apply_refinement(rigid, np.zeros((4, 3)),
                                           np.tile([1.0, 0, 0, 0], (4, 1)),
                                           np.full((4, 3), -10.0))
        assert np.all(s == SCALE_FLOOR)
        assert clamps == 12

    def test_quarter_turn_residual(self, body):
        cloud = build_test_cloud(body, n=1)
        cloud.rotations = np.array([[1.0, 0, 0, 0]])
        rigid = animate_rigid(cloud, body, Pose.rest(body.joint_count))
        h = np.sqrt(0.5)
        _, r, _, _ = apply_refinement(rigid, np.zeros((1, 3)),
                                      np.array([[h, 0, 0, h]]), np.zeros((1, 3)))
        assert np.allclose(r[0], [0.70711, 0, 0, 0.70711], atol=1e-5)

    def test_delta_rotation_never_degenerate(self):
        # raw head output near (-1, 0, 0, 0) stresses the normalization guard
        net = RefinementNet(joint_count=2, seed=0)
        raw = np.array([[-1.0 + 1e-6, 1e-8, 0, 0]])
        from gavatar.geometry import quat_normalize
        dr = quat_normalize(raw + np.array([1.0, 0, 0, 0]))
        assert np.isfinite(dr).all()
        assert abs(np.linalg.norm(dr) - 1) < 1e-12


class TestEffectiveViewDir:
    def test_identity_rotations(self):
        x = np.array([[1.0, 2.0, 3.0]])
        pc = np.array([0.0, 0.0, 0.0])
        d = effective_view_dir(x, pc, np.eye(3)[None], np.array([[1.0, 0, 0, 0]]))
        assert np.allclose(d[0], x[0] / np.linalg.norm(x[0]))

    def test_quarter_turn_rigid(self):
        rot = rotmat_from_axis_angle(np.array([0, 0, np.pi / 2]))[None]
        d = effective_view_dir(np.array([[2.0, 0.0, 0.0]]), np.zeros(3), rot,
                               np.array([[1.0, 0, 0, 0]]))
        assert np.allclose(d[0], [0, -1, 0], atol=1e-12)

    def test_unit_norm_for_random_configs(self):
        rot = rotmat_from_axis_angle(RNG.uniform(-np.pi, np.pi, (1000, 3)))
        from gavatar.geometry import quat_normalize
        dr = quat_normalize(RNG.normal(size=(1000, 4)))
        x = RNG.uniform(-2, 2, (1000, 3)) + np.array([0, 0, 5.0])
        d = effective_view_dir(x, np.zeros(3), rot, dr)
        assert np.abs(np.linalg.norm(d, axis=-1) - 1).max() < 1e-12

    def test_zero_direction_rejected(self):
        with pytest.raises(ZeroDirection):
            effective_view_dir(np.zeros((1, 3)), np.zeros(3), np.eye(3)[None],
                               np.array([[1.0, 0, 0, 0]]))
