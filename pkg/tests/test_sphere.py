"""Spectral calculus on the round sphere."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import sph_harm_y

from conftest import random_coeffs
from nullfol.errors import GridMismatch, NotMeanZero, UnsupportedOrder
from nullfol.sphere import (ScalarField, SphereGrid, TangentField, covariant_derivatives,
                            divergence, grad, gradient_norm, hessian, inv_laplacian, laplacian,
                            lie_derivative, lp_norm, mean, rotate_derivative, rotation_field,
                            sobolev_norm)


def real_harmonic_oracle(l, m, theta, phi):
    """Real orthonormal harmonic built from scipy's complex one (Condon-Shortley removed)."""
    y = sph_harm_y(l, abs(m), theta, phi)
    if m == 0:
        return y.real
    sign = (-1.0) ** m
    return sign * np.sqrt(2.0) * (y.real if m > 0 else y.imag)


class TestGrid:

    def test_invariants(self, grid):
        assert grid.nlon >= 2 * grid.nlat
        assert grid.lmax <= 2 * grid.nlat // 3
        assert grid.lmax == 31

    def test_quadrature_exact(self, grid):
        th, ph = np.meshgrid(grid.theta, grid.phi, indexing="ij")
        np.testing.assert_allclose(grid.integrate(np.ones(grid.shape)), 4 * np.pi, rtol=1e-14)
        for l in (1, 5, 2 * grid.lmax):
            vals = real_harmonic_oracle(l, 0, th, ph)
            assert abs(grid.integrate(vals)) < 1e-12

    def test_bad_sizes(self):
        with pytest.raises(ValueError):
            SphereGrid(8, nlon=10)
        with pytest.raises(ValueError):
            SphereGrid(12, lmax=20)

    @pytest.mark.parametrize("l,m", [(0, 0), (1, 0), (2, 1), (3, -2), (7, 5), (12, -12)])
    def test_harmonics_match_scipy(self, grid, l, m):
        f = ScalarField.harmonic(grid, l, m)
        th, ph = np.meshgrid(grid.theta, grid.phi, indexing="ij")
        np.testing.assert_allclose(f.values, real_harmonic_oracle(l, m, th, ph), atol=1e-12)

    def test_round_trip(self, grid, rng):
        c = grid.truncate(rng.standard_normal(grid.coeff_shape))
        c *= np.tril(np.ones(grid.coeff_shape[1:]))
        c[1, :, 0] = 0.0
        np.testing.assert_allclose(grid.analysis(grid.synthesis(c)), c, atol=1e-10)

    def test_parseval(self, grid, rng):
        c = random_coeffs(grid, rng, lmax=20, mean=0.3)
        f = ScalarField.from_coeffs(grid, c)
        np.testing.assert_allclose(grid.integrate(f.values ** 2), np.sum(c ** 2), rtol=1e-10)

    def test_synthesize_at_matches_grid(self, grid, rng):
        f = ScalarField.from_coeffs(grid, random_coeffs(grid, rng, lmax=10))
        th = np.repeat(grid.theta[::7], 3)
        ph = np.tile(grid.phi[[0, 11, 50]], len(grid.theta[::7]))
        np.testing.assert_allclose(f.at(th, ph), f.values[::7][:, [0, 11, 50]].ravel(),
                                   atol=1e-13)


class TestOperators:

    def test_grad_constant(self, grid):
        np.testing.assert_allclose(grad(ScalarField.constant(grid, 2.5)).comps, 0.0, atol=1e-10)

    def test_grad_cos_theta(self, grid):
        f = ScalarField.from_function(grid, lambda th, ph: np.cos(th))
        v = grad(f)
        th = grid.theta[:, None]
        np.testing.assert_allclose(v.comps[0], -np.sin(th) * np.ones(grid.shape), atol=1e-12)
        np.testing.assert_allclose(v.pointwise_norm() ** 2, np.sin(th) ** 2 * np.ones(grid.shape),
                                   atol=1e-12)

    def test_grad_against_fd(self, grid, rng):
        f = ScalarField.from_coeffs(grid, random_coeffs(grid, rng, lmax=12))
        v = grad(f)
        h = 1e-5
        th, ph = np.meshgrid(grid.theta[5:-5:6], grid.phi[::9], indexing="ij")
        th, ph = th.ravel(), ph.ravel()
        d_th = (f.at(th + h, ph) - f.at(th - h, ph)) / (2 * h)
        d_ph = (f.at(th, ph + h) - f.at(th, ph - h)) / (2 * h) / np.sin(th)
        comps = v.comps[:, 5:-5:6][:, :, ::9].reshape(2, -1)
        np.testing.assert_allclose(comps[0], d_th, atol=1e-6)
        np.testing.assert_allclose(comps[1], d_ph, atol=1e-6)

    def test_eigenfunction(self, grid):
        f = ScalarField.harmonic(grid, 2, 1)
        np.testing.assert_allclose(laplacian(f).values, -6.0 * f.values, atol=1e-12)

    def test_hessian_trace(self, grid, rng):
        f = ScalarField.from_coeffs(grid, random_coeffs(grid, rng, lmax=15))
        H = hessian(f)
        np.testing.assert_allclose(H.trace().values, laplacian(f).values, atol=1e-10)
        np.testing.assert_allclose(H.comps[0, 1], H.comps[1, 0])

    def test_hessian_matches_covariant_derivative(self, grid, rng):
        f = ScalarField.from_coeffs(grid, random_coeffs(grid, rng, lmax=10))
        D2 = covariant_derivatives(f, 2)[2]
        np.testing.assert_allclose(hessian(f).ambient(), D2, atol=1e-10)

    def test_integration_by_parts(self, grid, rng):
        f = ScalarField.from_coeffs(grid, random_coeffs(grid, rng, lmax=14))
        g = ScalarField.from_coeffs(grid, random_coeffs(grid, rng, lmax=14, mean=0.7))
        lhs = grid.integrate(f.values * laplacian(g).values)
        rhs = -grid.integrate(grad(f).dot(grad(g)).values)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-9, atol=1e-12)

    def test_div_grad(self, grid, rng):
        f = ScalarField.from_coeffs(grid, random_coeffs(grid, rng, lmax=14))
        np.testing.assert_allclose(divergence(grad(f)).values, laplacian(f).values, atol=1e-9)

    def test_inverse_laplacian(self, grid, rng):
        f = ScalarField.from_coeffs(grid, random_coeffs(grid, rng, lmax=14, mean=0.4))
        back = inv_laplacian(laplacian(f))
        np.testing.assert_allclose(back.values, f.values - f.mean(), atol=1e-12)
        g = laplacian(f)
        np.testing.assert_allclose(laplacian(inv_laplacian(g)).values, g.values, atol=1e-9)
        assert abs(back.mean()) < 1e-14

    def test_inverse_laplacian_rejects_mean(self, grid):
        with pytest.raises(NotMeanZero):
            inv_laplacian(ScalarField.constant(grid, 1.0))

    def test_grid_mismatch(self, grid, small_grid):
        with pytest.raises(GridMismatch):
            ScalarField.constant(grid, 1.0) + ScalarField.constant(small_grid, 1.0)
        with pytest.raises(GridMismatch):
            lie_derivative(rotation_field(grid, 1), rotation_field(small_grid, 2))

    @settings(max_examples=15, deadline=None)
    @given(seed=st.integers(0, 2 ** 31), l=st.integers(1, 20))
    def test_ibp_property(self, seed, l):
        grid = SphereGrid(32)
        r = np.random.default_rng(seed)
        f = ScalarField.from_coeffs(grid, random_coeffs(grid, r, lmax=l))
        np.testing.assert_allclose(grid.integrate(f.values * laplacian(f).values),
                                   -grid.integrate(grad(f).pointwise_norm() ** 2),
                                   rtol=1e-9, atol=1e-12)


class TestMeanAndNorms:

    def test_mean(self, grid):
        assert mean(ScalarField.constant(grid, 3.0)) == pytest.approx(3.0, rel=1e-14)
        assert abs(mean(ScalarField.harmonic(grid, 4, -3))) < 1e-12
        f = 1.0 + ScalarField.harmonic(grid, 3, 2, 0.3)
        assert mean(f) == pytest.approx(1.0, rel=1e-13)

    @pytest.mark.parametrize("n,p", [(0, 2.0), (2, 2.0), (1, 3.0), (3, 1.5)])
    def test_constant_norm(self, grid, n, p):
        np.testing.assert_allclose(sobolev_norm(ScalarField.constant(grid, -2.0), n, p),
                                   2.0 * (4 * np.pi) ** (1 / p), rtol=1e-12)

    def test_harmonic_norms(self, grid):
        y10 = ScalarField.from_function(grid, lambda th, ph: np.cos(th))
        np.testing.assert_allclose(sobolev_norm(y10, 0, 2.0), np.sqrt(4 * np.pi / 3), rtol=1e-13)
        np.testing.assert_allclose(sobolev_norm(ScalarField.harmonic(grid, 2, 0), 1, 2.0),
                                   np.sqrt(7.0), rtol=1e-12)

    def test_higher_order_harmonic_norm(self, grid):
        # int |nabla^2 Y_l|^2 = l(l+1)(l(l+1) - 1) by Bochner on the unit sphere
        l = 3
        lam = l * (l + 1)
        expected = np.sqrt(1 + lam + lam * (lam - 1))
        np.testing.assert_allclose(sobolev_norm(ScalarField.harmonic(grid, l, 1), 2, 2.0),
                                   expected, rtol=1e-11)

    def test_gradient_norm_orders(self, grid):
        f = ScalarField.harmonic(grid, 2, 0)
        lam = 6.0
        np.testing.assert_allclose(gradient_norm(f, 0, 2.0), np.sqrt(lam), rtol=1e-12)
        np.testing.assert_allclose(gradient_norm(f, 1, 2.0), np.sqrt(lam + lam * (lam - 1)),
                                   rtol=1e-12)

    def test_lp(self, grid):
        f = ScalarField.harmonic(grid, 1, 0)
        th = grid.theta
        # int |Y_10|^4 = (3/(4 pi))^2 * 2 pi * 2/5
        np.testing.assert_allclose(lp_norm(f, 4.0), ((3 / (4 * np.pi)) ** 2 * 4 * np.pi / 5) ** 0.25,
                                   rtol=1e-12)

    def test_unsupported_order(self, grid):
        with pytest.raises(UnsupportedOrder):
            sobolev_norm(ScalarField.constant(grid, 1.0), 5, 2.0)

    def test_self_convergence(self):
        norms = []
        for nlat in (24, 48):
            g = SphereGrid(nlat)
            f = ScalarField.from_function(
                g, lambda th, ph: np.exp(0.3 * np.sin(th) * np.cos(ph) + 0.2 * np.cos(th)))
            norms.append([sobolev_norm(f.truncated(), 3, 2.0), sobolev_norm(f.truncated(), 2, 3.0)])
        assert np.max(np.abs(np.diff(norms, axis=0))) < 1e-8


class TestRotations:

    def test_zonal_invariant(self, grid):
        f = ScalarField.from_function(grid, lambda th, ph: np.cos(th) ** 3 + np.sin(th) ** 2)
        np.testing.assert_allclose(rotate_derivative(f, 3).values, 0.0, atol=1e-12)

    def test_r3_on_pair(self, grid):
        c = ScalarField.harmonic(grid, 4, 3)
        s = ScalarField.harmonic(grid, 4, -3)
        np.testing.assert_allclose(rotate_derivative(c, 3).values, -3.0 * s.values, atol=1e-11)
        np.testing.assert_allclose(rotate_derivative(s, 3).values, 3.0 * c.values, atol=1e-11)

    def test_casimir(self, grid):
        f = ScalarField.harmonic(grid, 2, 1)
        total = sum(rotate_derivative(rotate_derivative(f, i), i).values for i in (1, 2, 3))
        np.testing.assert_allclose(total, -6.0 * f.values, atol=1e-11)

    def test_killing(self, grid):
        for i in (1, 2, 3):
            np.testing.assert_allclose(divergence(rotation_field(grid, i)).values, 0.0, atol=1e-10)

    def test_brackets(self, grid):
        R1, R2, R3 = (rotation_field(grid, i) for i in (1, 2, 3))
        np.testing.assert_allclose(lie_derivative(R3, R3).comps, 0.0, atol=1e-12)
        np.testing.assert_allclose(lie_derivative(R1, R2).comps, -R3.comps, atol=1e-11)

    @pytest.mark.parametrize("zonal", [True, False])
    def test_bracket_against_flow_pullback(self, grid, rng, zonal):
        """[R3, X](p) = d/dt Rz(-t) X(Rz(t) p) at t = 0."""
        if zonal:
            a = ScalarField.from_function(grid, lambda th, ph: np.sin(th) * (1 + np.cos(th) ** 2))
            X = TangentField(grid, np.stack([a.values, np.zeros(grid.shape)]))
        else:
            f = ScalarField.from_coeffs(grid, random_coeffs(grid, rng, lmax=8))
            X = grad(f) + 0.5 * rotation_field(grid, 1) * f
        br = lie_derivative(rotation_field(grid, 3), X).ambient()
        amb_coeffs = np.stack([grid.analysis(c) for c in X.ambient()])
        th, ph = np.meshgrid(grid.theta[3:-3:5], grid.phi[::13], indexing="ij")
        th, ph = th.ravel(), ph.ravel()
        h = 1e-4

        def pulled(t):
            v = grid.synthesize_at(amb_coeffs, th, ph + t)
            c, s = np.cos(-t), np.sin(-t)
            return np.stack([c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]])

        fd = (pulled(h) - pulled(-h)) / (2 * h)
        ref = br[:, 3:-3:5][:, :, ::13].reshape(3, -1)
        np.testing.assert_allclose(ref, fd, atol=1e-7)
        if zonal:
            np.testing.assert_allclose(ref, 0.0, atol=1e-9)

    def test_lie_derivative_of_scalar(self, grid):
        f = ScalarField.harmonic(grid, 3, 2)
        R = rotation_field(grid, 2)
        np.testing.assert_allclose(lie_derivative(R, f).values, rotate_derivative(f, 2).values)
