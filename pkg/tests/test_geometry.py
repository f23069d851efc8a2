import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gavatar.errors import NotARotation
from gavatar.geometry import (PEConfig, positional_encode, quat_from_axis_angle,
                              quat_multiply, quat_normalize, quat_to_rotmat,
                              rotmat_from_axis_angle, rotmat_to_quat, sh_basis,
                              sh_dc_from_color, sh_eval, sh_rotate_dir)

RNG = np.random.default_rng(7)


def random_unit_quats(n):
    return quat_normalize(RNG.normal(size=(n, 4)))


def random_dirs(n):
    v = RNG.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


class TestQuaternions:
    def test_identity_element(self):
        q = random_unit_quats(1)[0]
        assert np.allclose(quat_multiply(np.array([1.0, 0, 0, 0]), q), q, atol=1e-12)

    def test_two_quarter_turns_make_half_turn(self):
        h = np.sqrt(0.5)
        q = np.array([h, 0.0, 0.0, h])
        out = quat_multiply(q, q)
        assert np.allclose(out, [0, 0, 0, 1], atol=1e-9)

    def test_product_matches_matrix_product(self):
        a, b = random_unit_quats(100), random_unit_quats(100)
        lhs = quat_to_rotmat(quat_multiply(a, b))
        rhs = quat_to_rotmat(a) @ quat_to_rotmat(b)
        assert np.abs(lhs - rhs).max() < 1e-9

    def test_associative(self):
        a, b, c = (random_unit_quats(50) for _ in range(3))
        lhs = quat_multiply(quat_multiply(a, b), c)
        rhs = quat_multiply(a, quat_multiply(b, c))
        assert np.abs(np.abs(np.sum(lhs * rhs, axis=-1)) - 1.0).max() < 1e-9

    def test_result_normalized(self):
        out = quat_multiply(random_unit_quats(20), random_unit_quats(20))
        assert np.abs(np.linalg.norm(out, axis=-1) - 1).max() < 1e-9


class TestRotationMatrices:
    def test_identity_quat_gives_identity(self):
        assert np.allclose(quat_to_rotmat(np.array([1.0, 0, 0, 0])), np.eye(3))

    def test_half_turn_about_x(self):
        r = quat_to_rotmat(np.array([0.0, 1.0, 0.0, 0.0]))
        assert np.allclose(r, np.diag([1.0, -1.0, -1.0]), atol=1e-12)

    def test_quarter_turn_about_z(self):
        q = rotmat_to_quat(rotmat_from_axis_angle(np.array([0, 0, np.pi / 2])))
        assert np.allclose(q, [0.70711, 0, 0, 0.70711], atol=1e-5)

    def test_round_trip_sign_canonical(self):
        q = random_unit_quats(200)
        q[q[:, 0] < 0] *= -1
        back = rotmat_to_quat(quat_to_rotmat(q))
        assert np.abs(back - q).max() < 1e-9

    def test_round_trip_near_half_turns(self):
        # rotations within a whisker of 180 degrees about each axis stress
        # the conversion branches
        for axis in np.eye(3):
            for eps in (0.0, 1e-4, -1e-4):
                r = rotmat_from_axis_angle(axis * (np.pi - eps))
                back = quat_to_rotmat(rotmat_to_quat(r))
                assert np.abs(back - r).max() < 1e-7

    def test_rejects_non_rotation(self):
        with pytest.raises(NotARotation):
            rotmat_to_quat(np.diag([1.0, 1.0, 2.0]))

    def test_identity_matrix_to_quat(self):
        assert np.allclose(rotmat_to_quat(np.eye(3)), [1, 0, 0, 0])

    def test_constructors_orthonormal(self):
        aa = RNG.uniform(-np.pi, np.pi, (100, 3))
        r = rotmat_from_axis_angle(aa)
        gram = r @ np.swapaxes(r, -1, -2)
        assert np.abs(gram - np.eye(3)).max() < 1e-9
        assert np.abs(np.linalg.det(r) - 1).max() < 1e-9


class TestSphericalHarmonics:
    def test_zero_coeffs_give_mid_gray(self):
        c = np.zeros((16, 3))
        out = sh_eval(c, np.array([0.0, 0.0, 1.0]), degree=3)
        assert np.allclose(out, 0.5)

    def test_dc_only_is_view_independent(self):
        c = np.zeros((16, 3))
        c[0] = sh_dc_from_color(np.array([0.3, 0.6, 0.9]))
        outs = sh_eval(np.tile(c, (100, 1, 1)), random_dirs(100), degree=0)
        assert np.abs(outs - outs[0]).max() < 1e-12
        assert np.allclose(outs[0], [0.3, 0.6, 0.9], atol=1e-12)

    def test_band1_is_odd(self):
        c = np.zeros((16, 3))
        c[1:4] = RNG.normal(0, 0.1, (3, 3))
        d = random_dirs(50)
        plus = sh_eval(np.tile(c, (50, 1, 1)), d, degree=1, clamp=False) - 0.5
        minus = sh_eval(np.tile(c, (50, 1, 1)), -d, degree=1, clamp=False) - 0.5
        assert np.abs(plus + minus).max() < 1e-12

    def test_linear_in_coefficients(self):
        c = RNG.normal(0, 0.2, (10, 16, 3))
        d = random_dirs(10)
        one = sh_eval(c, d, degree=3, clamp=False) - 0.5
        three = sh_eval(3 * c, d, degree=3, clamp=False) - 0.5
        assert np.abs(three - 3 * one).max() < 1e-12

    def test_basis_matches_finite_difference_gradient(self):
        from gavatar.geometry import sh_basis_grad
        d = random_dirs(5)
        grad = sh_basis_grad(d, 3)
        h = 1e-7
        for axis in range(3):
            dp, dm = d.copy(), d.copy()
            dp[:, axis] += h
            dm[:, axis] -= h
            fd = (sh_basis(dp, 3) - sh_basis(dm, 3)) / (2 * h)
            assert np.abs(fd - grad[:, :, axis]).max() < 1e-6

    def test_rotate_dir_identity(self):
        d = random_dirs(10)
        assert np.allclose(sh_rotate_dir(np.eye(3), d), d)

    def test_rotate_dir_quarter_turn(self):
        r = rotmat_from_axis_angle(np.array([0, 0, np.pi / 2]))
        out = sh_rotate_dir(r, np.array([1.0, 0.0, 0.0]))
        assert np.allclose(out, [0, -1, 0], atol=1e-12)

    def test_rotate_dir_matches_matvec_and_preserves_norm(self):
        r = rotmat_from_axis_angle(RNG.uniform(-np.pi, np.pi, (50, 3)))
        d = random_dirs(50)
        out = sh_rotate_dir(r, d)
        oracle = np.einsum('nij,nj->ni', np.swapaxes(r, -1, -2), d)
        assert np.abs(out - oracle).max() < 1e-12
        assert np.abs(np.linalg.norm(out, axis=-1) - 1).max() < 1e-12

    def test_transpose_reverses_composition(self):
        r1 = rotmat_from_axis_angle(RNG.uniform(-1, 1, (20, 3)))
        r2 = rotmat_from_axis_angle(RNG.uniform(-1, 1, (20, 3)))
        d = random_dirs(20)
        lhs = sh_rotate_dir(r2, sh_rotate_dir(r1, d))
        rhs = sh_rotate_dir(r1 @ r2, d)
        assert np.abs(lhs - rhs).max() < 1e-9


class TestPositionalEncoding:
    def test_zero_input(self):
        out = positional_encode(np.array([0.0]), PEConfig(frequencies=10))
        assert out.shape == (21,)
        assert out[0] == 0.0
        assert np.allclose(out[1::2], 0.0)
        assert np.allclose(out[2::2], 1.0)

    def test_vector_dimension(self):
        out = positional_encode(np.zeros(3), PEConfig(frequencies=10))
        assert out.shape == (63,)

    def test_exact_trig_values(self):
        out = positional_encode(np.array([1.0]), PEConfig(frequencies=2))
        assert np.abs(out - np.array([1.0, 0.0, -1.0, 0.0, 1.0])).max() < 1e-12

    @given(st.lists(st.floats(-5, 5), min_size=1, max_size=4))
    @settings(max_examples=30, deadline=None)
    def test_deterministic(self, values):
        p = np.array(values)
        cfg = PEConfig(frequencies=6)
        assert np.array_equal(positional_encode(p, cfg), positional_encode(p, cfg))

    def test_rejects_zero_frequencies(self):
        with pytest.raises(ValueError):
            PEConfig(frequencies=0)


def test_axis_angle_quat_small_angle_stable():
    q = quat_from_axis_angle(np.array([1e-14, 0, 0]))
    assert np.allclose(q, [1, 0, 0, 0])
