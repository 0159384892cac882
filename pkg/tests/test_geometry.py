import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kamtori import geometry as geo
from kamtori import spectral as sp
from kamtori.errors import (ConfigurationError, DegenerateParameterizationError, NoTwistError,
                            UnsupportedCaseError)
from kamtori.models import PendulumModel, TokamakModel, UnitCoordinates

OMEGA_TOK = 0.57981245427252670451


def rotor_torus(shape=(16, 8, 8), p0=2.0):
    units = UnitCoordinates(PendulumModel())
    freq = sp.FrequencyVector([p0 / (2 * np.pi)], units.alpha)
    return geo.TorusEmbedding.flat([p0], [[1]], freq, shape), units


def random_embedding(rng, n=1, shape=(16, 8), degree=None, amp=0.05, kmax=3):
    d = len(shape)
    freq = sp.FrequencyVector(rng.uniform(0.3, 0.7, n), rng.uniform(0.5, 1.5, d - n))
    vals = np.zeros((2 * n,) + shape)
    lat = sp.lattice(shape)
    for comp in range(2 * n):
        for _ in range(4):
            k = rng.integers(-kmax, kmax + 1, d)
            ph = rng.uniform(0, 2 * np.pi)
            vals[comp] = vals[comp] + amp * rng.standard_normal() * np.cos(
                2 * np.pi * sum(ki * x for ki, x in zip(k, lat)) + ph)
    vals[n:] += 0.4
    degree = np.eye(n, dtype=int) if degree is None else degree
    return geo.TorusEmbedding.from_grid(vals, degree, freq)


def random_hessian(rng, n, shape):
    a = rng.standard_normal((2 * n, 2 * n) + shape)
    return a + np.swapaxes(a, 0, 1)


class StubUnits:
    """Constant-Hessian model on the unit torus."""

    def __init__(self, hess):
        self.hess = np.asarray(hess, dtype=float)

    def hessian(self, z, phi):
        return np.broadcast_to(self.hess.reshape(self.hess.shape + (1,) * (z.ndim - 1)),
                               self.hess.shape + z.shape[1:]).copy()

    def jacobian(self, z, phi):
        h = self.hessian(z, phi)
        n = h.shape[0] // 2
        return np.concatenate([h[n:], -h[:n]])


class TestEmbedding:
    def test_flat_grid(self):
        K, _ = rotor_torus((8, 4, 4))
        g = K.grid()
        th = np.arange(8) / 8
        np.testing.assert_allclose(g[0], np.broadcast_to(th[:, None, None], (8, 4, 4)))
        np.testing.assert_allclose(g[1], 2.0)

    def test_full_grid_roundtrip(self):
        rng = np.random.default_rng(0)
        K = random_embedding(rng)
        again = geo.TorusEmbedding.from_full_grid(K.grid(), K.degree, K.freq)
        assert np.abs(again.coeffs - K.coeffs).max() < 1e-15

    def test_resample_preserves_values(self):
        rng = np.random.default_rng(1)
        K = random_embedding(rng)
        big = K.resampled((32, 16))
        np.testing.assert_allclose(big.grid()[:, ::2, ::2], K.grid(), atol=1e-14)

    def test_rejects_fractional_degree(self):
        freq = sp.FrequencyVector([0.3], [1.0])
        with pytest.raises(ConfigurationError):
            geo.TorusEmbedding.from_grid(np.zeros((2, 8, 8)), [[0.5]], freq)

    def test_rejects_wrong_dimension(self):
        freq = sp.FrequencyVector([0.3], [1.0, 2.0])
        with pytest.raises(ConfigurationError):
            geo.TorusEmbedding.from_grid(np.zeros((2, 8, 8)), [[1]], freq)

    def test_sobolev_norm_combines_components(self):
        freq = sp.FrequencyVector([0.3], [1.0])
        th, ph = sp.lattice((16, 8))
        vals = np.stack([np.cos(2 * np.pi * th) + 0 * ph, np.sin(2 * np.pi * ph) + 0 * th])
        K = geo.TorusEmbedding.from_grid(vals, [[1]], freq)
        one = (2 * np.pi) ** 4 / np.sqrt(2)
        assert K.sobolev_norm(4) == pytest.approx(np.sqrt(2) * one, rel=1e-13)


class TestFrames:
    def test_rotor_tangent_and_normal(self):
        K, units = rotor_torus()
        L = geo.tangent_frame(K)
        np.testing.assert_array_equal(L[:, 0, 0, 0, 0], [1.0, 0.0])
        assert np.abs(L[0, 0] - 1).max() == 0 and np.abs(L[1, 0]).max() == 0
        B, A, Nt, N = geo.normal_frame(K, L)
        assert np.all(B == 1.0)
        assert np.all(A == 0.0)
        assert np.abs(N[0]).max() == 0 and np.all(N[1] == 1.0)

    def test_librational_tangent_has_no_linear_part(self):
        freq = sp.FrequencyVector([0.3], [1.0])
        th, ph = sp.lattice((16, 8))
        r = 0.1
        vals = np.stack([r * np.cos(2 * np.pi * th) + 0 * ph, r * np.sin(2 * np.pi * th) + 0 * ph])
        K = geo.TorusEmbedding.from_grid(vals, [[0]], freq)
        L = geo.tangent_frame(K)
        expected = 2 * np.pi * r * np.stack([-np.sin(2 * np.pi * th), np.cos(2 * np.pi * th)]) + 0 * ph
        np.testing.assert_allclose(L[:, 0], expected, atol=1e-14)

    def test_circle_duality(self):
        freq = sp.FrequencyVector([0.3], [1.0])
        th, ph = sp.lattice((16, 8))
        r = 1 / (2 * np.pi)
        vals = np.stack([r * np.cos(2 * np.pi * th) + 0 * ph, r * np.sin(2 * np.pi * th) + 0 * ph])
        K = geo.TorusEmbedding.from_grid(vals, [[0]], freq)
        frame = geo.build_frame(K)
        nol = geo.matmul(geo.transpose(frame.N), geo.omega_left(frame.L))
        lon = geo.matmul(geo.transpose(frame.L), geo.omega_left(frame.N))
        assert np.abs(nol - 1).max() < 1e-12
        assert np.abs(lon + 1).max() < 1e-12

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.sampled_from([1, 2]))
    def test_frame_identities(self, seed, n):
        rng = np.random.default_rng(seed)
        shape = (8,) * n + (8,)
        K = random_embedding(rng, n, shape, amp=0.02, kmax=2)
        frame = geo.build_frame(K)
        d = K.dim
        eye = geo.identity_field(n, d)
        B = frame.B
        assert np.abs(B - geo.transpose(B)).max() < 1e-13
        evals = np.linalg.eigvalsh(np.moveaxis(B, (0, 1), (-2, -1)))
        assert evals.min() > 0
        assert np.all(frame.A == 0)
        nol = geo.matmul(geo.transpose(frame.N), geo.omega_left(frame.L))
        lon = geo.matmul(geo.transpose(frame.L), geo.omega_left(frame.N))
        assert np.abs(nol - eye).max() < 1e-10
        assert np.abs(lon + eye).max() < 1e-10

    def test_degenerate_parameterization(self):
        freq = sp.FrequencyVector([0.3], [1.0])
        K = geo.TorusEmbedding.from_grid(np.full((2, 8, 8), 0.5), [[0]], freq)
        with pytest.raises(DegenerateParameterizationError):
            geo.build_frame(K)

    def test_degenerate_two_dimensional(self):
        rng = np.random.default_rng(3)
        freq = sp.FrequencyVector([0.3, 0.5], [1.0])
        vals = np.zeros((4, 8, 8, 8))
        vals[2:] = 0.3
        K = geo.TorusEmbedding.from_grid(vals, [[1, 0], [1, 0]], freq)
        with pytest.raises(DegenerateParameterizationError):
            geo.build_frame(K)
        assert rng is not None

    def test_other_cases_unsupported(self):
        K, _ = rotor_torus()
        L = geo.tangent_frame(K)
        with pytest.raises(UnsupportedCaseError):
            geo.normal_frame(K, L, case="non-canonical")


class TestTorsion:
    def test_rotor_torsion(self):
        K, units = rotor_torus()
        frame = geo.build_frame(K)
        T, T_avg, T_inv = geo.torsion(K, frame, units)
        # the unit-torus Hamiltonian is p^2 / (4 pi), so the native value 1 becomes 1/(2 pi)
        np.testing.assert_allclose(T * 2 * np.pi, 1.0, rtol=1e-15)
        assert T_avg[0, 0] * T_inv[0, 0] == pytest.approx(1.0, abs=1e-15)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.sampled_from([1, 2]))
    def test_routes_agree_on_random_fields(self, seed, n):
        rng = np.random.default_rng(seed)
        shape = (8,) * n + (4,)
        K = random_embedding(rng, n, shape, amp=0.03, kmax=2)
        frame = geo.build_frame(K)
        hess = random_hessian(rng, n, shape)
        jac = np.concatenate([hess[n:], -hess[:n]])
        t1 = geo.torsion_field(frame, jac)
        t2 = geo.hamiltonian_torsion_field(frame, hess)
        assert np.abs(t1 - t2).max() < 1e-10 * max(1.0, np.abs(t1).max())

    def test_routes_agree_on_tokamak(self):
        rng = np.random.default_rng(4)
        units = UnitCoordinates(TokamakModel(eps=0.004))
        K = random_embedding(rng, 1, (32, 16), amp=0.03)
        K.freq = sp.FrequencyVector([OMEGA_TOK], [1.0])
        frame = geo.build_frame(K)
        t1 = geo.torsion(K, frame, units, "flow")[0].copy()
        t2 = geo.torsion(K, frame, units, "hamiltonian")[0]
        assert np.abs(t1 - t2).max() < 1e-10 * np.abs(t1).max()

    def test_average_inverse(self):
        rng = np.random.default_rng(5)
        K = random_embedding(rng, 2, (8, 8, 4), amp=0.03)
        frame = geo.build_frame(K)
        units = StubUnits(np.diag([0.2, 0.1, 1.0, 2.0]) + 0.05)
        _, T_avg, T_inv = geo.torsion(K, frame, units)
        assert np.abs(T_avg @ T_inv - np.eye(2)).max() < 1e-12

    def test_no_twist(self):
        K, _ = rotor_torus()
        frame = geo.build_frame(K)
        with pytest.raises(NoTwistError):
            geo.torsion(K, frame, StubUnits(np.zeros((2, 2))))

    def test_unknown_route(self):
        K, units = rotor_torus()
        with pytest.raises(ConfigurationError):
            geo.torsion(K, geo.build_frame(K), units, "lie")


class TestSymplecticFrame:
    def test_rotor(self):
        K, units = rotor_torus()
        frame = geo.build_frame(K)
        geo.torsion(K, frame, units)
        P, lam = geo.symplectic_frame(frame)
        np.testing.assert_array_equal(P[..., 0, 0, 0], np.eye(2))
        assert np.all(lam[0, 0] == 0) and np.all(lam[1] == 0)
        np.testing.assert_allclose(lam[0, 1], frame.T[0, 0])
        assert geo.symplectic_defect(frame) == 0.0

    def test_one_dimensional_tori_are_lagrangian(self):
        rng = np.random.default_rng(6)
        K = random_embedding(rng, 1, (16, 8), amp=0.1)
        frame = geo.build_frame(K)
        assert geo.lagrangian_defect(K, frame.L) == 0.0
        assert geo.symplectic_defect(frame) < 1e-13

    def test_lagrangian_defect_detects_twisted_plane(self):
        # x = (theta1, theta2), y = (0, c theta1)-like periodic shear: L^T Omega0 L != 0
        freq = sp.FrequencyVector([0.3, 0.5], [1.0])
        th1, th2, ph = sp.lattice((8, 8, 4))
        vals = np.zeros((4, 8, 8, 4))
        vals[3] = 0.1 * np.sin(2 * np.pi * th1) + 0 * th2 + 0 * ph
        K = geo.TorusEmbedding.from_grid(vals, np.eye(2, dtype=int), freq)
        L = geo.tangent_frame(K)
        assert geo.lagrangian_defect(K, L) == pytest.approx(0.2 * np.pi, rel=1e-12)

    def test_requires_torsion(self):
        K, _ = rotor_torus()
        with pytest.raises(ConfigurationError):
            geo.symplectic_frame(geo.build_frame(K))


class TestPointwiseAlgebra:
    def test_closed_form_inverse_matches_numpy(self):
        rng = np.random.default_rng(7)
        a = rng.standard_normal((2, 2, 5, 3)) + 3 * np.eye(2)[..., None, None]
        inv = geo.inverse_field(a)
        ref = np.moveaxis(np.linalg.inv(np.moveaxis(a, (0, 1), (-2, -1))), (-2, -1), (0, 1))
        np.testing.assert_allclose(inv, ref, rtol=1e-13)

    def test_general_inverse(self):
        rng = np.random.default_rng(8)
        a = rng.standard_normal((3, 3, 4)) + 4 * np.eye(3)[..., None]
        prod = geo.matmul(a, geo.inverse_field(a))
        np.testing.assert_allclose(prod, np.broadcast_to(np.eye(3)[..., None], (3, 3, 4)), atol=1e-13)

    def test_omega_actions(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((4, 4, 3))
        om = geo.omega_left(np.eye(4))
        assert np.allclose(om, [[0, 0, -1, 0], [0, 0, 0, -1], [1, 0, 0, 0], [0, 1, 0, 0]])
        np.testing.assert_allclose(geo.omega_left(x), np.einsum("ij,jk...->ik...", om, x))
        np.testing.assert_allclose(geo.omega_right(x), np.einsum("ij...,jk->ik...", x, om))
