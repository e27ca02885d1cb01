"""Graph evolution: right side, transport vector, remainder and the two integrators."""

import numpy as np
import pytest

from conftest import axisym_oracle, random_coeffs, trig_eval
from nullfol.errors import OutOfDomain, StepRejected
from nullfol.evolution import (BOUNDARY_HIT, COMPLETED, GUARD_HIT, LEDGER_COLUMNS,
                               EvolutionConfig, FoliationState, assemble_re, assemble_X,
                               evolve, evolve_laplacian_form, frame_quantities, null_residual,
                               rhs_F)
from nullfol.geometry import (PerturbationProfile, PerturbedMetric, area_radius, eval_metric,
                              schwarzschild_omega_sq)
from nullfol.sphere import ScalarField, SphereGrid, grad, laplacian


def state(grid, s, f):
    return FoliationState(s, f)


def const(grid, value):
    """Constant leaf from its l = 0 coefficient alone, so that its gradient is exactly zero."""
    c = np.zeros(grid.coeff_shape)
    c[0, 0, 0] = value * np.sqrt(4 * np.pi)
    return ScalarField.from_coeffs(grid, c)


@pytest.fixture(scope="module")
def random_profile_metric(grid, params):
    return PerturbedMetric(PerturbationProfile.random(0.01, seed=5), params, grid)


class TestRightSide:

    @pytest.mark.parametrize("which", ["background", "perturbed", "random_profile_metric"])
    def test_constant_is_fixed_point(self, request, grid, which):
        metric = request.getfixturevalue(which)
        st = state(grid, 1.0, const(grid, 0.15))
        np.testing.assert_array_equal(rhs_F(metric, st).values, 0.0)
        np.testing.assert_allclose(assemble_X(metric, st).comps,
                                   -metric.sample(st.f.values, 1.0, (0, 0)).b_dyad, atol=1e-15)
        np.testing.assert_array_equal(assemble_re(metric, st).values, 0.0)

    def test_background_reduction(self, grid, background, params):
        f = ScalarField.harmonic(grid, 1, 0, 0.05) + ScalarField.harmonic(grid, 3, 2, 0.01)
        for s in (0.0, 0.7, 12.0):
            F = rhs_F(background, state(grid, s, f)).values
            r, _ = area_radius(params, f.values, s)
            om = schwarzschild_omega_sq(params, f.values, s)
            expected = om / r ** 2 * grad(f).pointwise_norm() ** 2
            np.testing.assert_allclose(F, expected, atol=1e-10, rtol=0)

    def test_perturbed_pointwise_oracle(self, params):
        """Compose eval_metric with finite-difference gradients on a refined grid."""
        grid = SphereGrid(32)
        fine = SphereGrid(64)
        metric = PerturbedMetric(PerturbationProfile.default(0.01), params, grid)
        f = ScalarField.harmonic(grid, 2, 1, 0.05)
        F = rhs_F(metric, state(grid, 1.5, f)).values.ravel()
        f_fine = ScalarField.harmonic(fine, 2, 1, 0.05)
        th, ph = np.meshgrid(grid.theta, grid.phi, indexing="ij")
        th, ph = th.ravel(), ph.ravel()
        h = 1e-5
        d_th = (f_fine.at(th + h, ph) - f_fine.at(th - h, ph)) / (2 * h)
        d_ph = (f_fine.at(th, ph + h) - f_fine.at(th, ph - h)) / (2 * h) / np.sin(th)
        df = np.stack([d_th, d_ph])
        smp = eval_metric(PerturbationProfile.default(0.01), params, f_fine.at(th, ph), 1.5,
                          (th, ph), grid=fine)
        ginv = np.linalg.inv(np.moveaxis(smp.gslash_dyad, (0, 1), (-2, -1)))
        oracle = (-np.sum(smp.b_dyad * df, axis=0)
                  + smp.omega_sq[0][0] * np.einsum("ni,nij,nj->n", df.T, ginv, df.T))
        np.testing.assert_allclose(F, oracle, atol=1e-6 * np.max(np.abs(oracle)))

    def test_out_of_domain(self, grid, background):
        with pytest.raises(OutOfDomain):
            rhs_F(background, state(grid, 1.0, ScalarField.constant(grid, 0.6)))


class TestTransportVector:

    def test_background(self, grid, background, params):
        f = ScalarField.harmonic(grid, 2, 0, 0.04)
        X = assemble_X(background, state(grid, 2.0, f))
        r, _ = area_radius(params, f.values, 2.0)
        om = schwarzschild_omega_sq(params, f.values, 2.0)
        np.testing.assert_allclose(X.comps, 2 * om / r ** 2 * grad(f).comps, atol=1e-13)

    def test_constant_background(self, grid, background):
        X = assemble_X(background, state(grid, 2.0, const(grid, 0.1)))
        np.testing.assert_array_equal(X.comps, 0.0)

    def test_equals_minus_bdot(self, grid, perturbed, rng):
        f = ScalarField.from_coeffs(grid, random_coeffs(grid, rng, lmax=6, scale=0.03, mean=0.1))
        st = state(grid, 0.8, f)
        fq = frame_quantities(perturbed, st)
        np.testing.assert_allclose(assemble_X(perturbed, st).comps, -fq.bdot.comps, atol=1e-12)
        assert np.all(fq.vareps.values <= 0)


class TestRemainder:

    @pytest.mark.parametrize("which", ["background", "perturbed"])
    def test_matches_spectral_laplacian_of_F(self, request, grid, rng, which):
        """re assembled term by term equals lap F - X . grad lap f formed spectrally."""
        metric = request.getfixturevalue(which)
        f = ScalarField.from_coeffs(grid, random_coeffs(grid, rng, lmax=4, scale=0.02, mean=0.05))
        st = state(grid, 1.3, f)
        re = assemble_re(metric, st).values
        F = rhs_F(metric, st)
        X = assemble_X(metric, st)
        spectral = laplacian(F).values - X.dot(grad(laplacian(f))).values
        np.testing.assert_allclose(re, spectral, atol=1e-9 * np.max(np.abs(spectral)))

    def test_background_zonal(self, grid, background):
        f = ScalarField.harmonic(grid, 2, 0, 0.03)
        re = assemble_re(background, state(grid, 1.0, f)).values
        assert np.all(np.isfinite(re)) and np.max(np.abs(re)) > 0

    def test_consistency_along_trajectory(self, grid, perturbed):
        """Centred differences in s of lap f approach X . grad lap f + re at second order."""
        f0 = ScalarField.harmonic(grid, 1, 0, 0.03) + ScalarField.harmonic(grid, 2, 1, 0.02)
        errs = []
        for h, j in ((0.02, 10), (0.01, 20)):
            cfg = EvolutionConfig(s_end=0.4, h0=h, stretch=False, diagnostics=False)
            traj = evolve(perturbed, f0, cfg)
            lap = [laplacian(traj.states[i].f).values for i in (j - 1, j + 1)]
            fd = (lap[1] - lap[0]) / (2 * h)
            st = traj.states[j]
            rhs = (assemble_X(perturbed, st).dot(grad(laplacian(st.f))).values
                   + assemble_re(perturbed, st).values)
            # the integrator advances the band-limited part only
            rhs = grid.synthesis(grid.truncate(grid.analysis(rhs)))
            errs.append(np.max(np.abs(fd - rhs)) / np.max(np.abs(rhs)))
        assert errs[1] <= 1e-4
        assert 3.5 <= errs[0] / errs[1] <= 4.5


class TestNullResidual:

    def test_constant(self, grid, perturbed):
        res = null_residual(perturbed, state(grid, 1.0, const(grid, 0.1)))
        np.testing.assert_array_equal(res.values, 0.0)

    def test_evolved_and_corrupted(self, grid, background, rng):
        f0 = ScalarField.harmonic(grid, 1, 0, 0.05)
        traj = evolve(background, f0, EvolutionConfig(s_end=1.0, h0=0.1))
        st = traj.final
        om = background.sample(st.f.values, st.s, (0, 0)).omega_sq[0][0]
        assert np.all(np.abs(null_residual(background, st).values) <= 1e-9 * om)
        noisy = ScalarField(grid, st.f.values + 1e-3 * rng.standard_normal(grid.shape))
        res = null_residual(background, state(grid, st.s, noisy)).values
        assert np.all(np.abs(res) <= 1e-9 * om)


class TestEvolve:

    @pytest.mark.parametrize("which", ["background", "perturbed", "random_profile_metric"])
    def test_constants_preserved(self, request, grid, which):
        metric = request.getfixturevalue(which)
        traj = evolve(metric, ScalarField.constant(grid, 0.15), EvolutionConfig(s_end=10.0))
        assert traj.status == COMPLETED
        drift = max(np.max(np.abs(st.f.values - 0.15)) for st in traj.states)
        assert drift <= 1e-10

    def test_axisymmetric_oracle(self, grid, background):
        f0 = ScalarField.harmonic(grid, 1, 0, 0.02)
        traj = evolve(background, f0, EvolutionConfig(s_end=20.0))
        a = 0.02 * np.sqrt(3 / (4 * np.pi))
        Y = axisym_oracle(lambda t: a * np.cos(t), traj.s)
        diff = max(np.max(np.abs(trig_eval(Y[:, i], grid.theta)[:, None] - st.f.values))
                   for i, st in enumerate(traj.states))
        assert diff <= 1e-6

    def test_rk4_self_convergence(self, grid, perturbed):
        f0 = ScalarField.harmonic(grid, 1, 0, 0.1) + ScalarField.harmonic(grid, 2, 1, 0.06)
        fs = [evolve(perturbed, f0, EvolutionConfig(s_end=2.0, h0=h, stretch=False,
                                                    diagnostics=False)).final.f.values
              for h in (0.25, 0.125, 0.0625)]
        ratio = np.max(np.abs(fs[0] - fs[1])) / np.max(np.abs(fs[1] - fs[2]))
        assert 12 <= ratio <= 20

    def test_ledger(self, grid, perturbed):
        traj = evolve(perturbed, ScalarField.harmonic(grid, 1, 1, 0.02), EvolutionConfig(s_end=1.0))
        assert [set(r) for r in traj.ledger] == [set(LEDGER_COLUMNS)] * len(traj.ledger)
        np.testing.assert_allclose([r["s"] for r in traj.ledger], traj.s)
        assert traj.ledger[0]["h"] == 0.0

    def test_schedule_hits_output_times(self):
        cfg = EvolutionConfig(s_end=10.0, output_times=(1.0, 3.3))
        pts = cfg.schedule()
        assert 1.0 in pts and 3.3 in pts and pts[-1] == 10.0
        assert np.all(np.diff(pts) > 0)

    def test_guard_and_boundary(self, grid, background):
        f0 = ScalarField.constant(grid, 0.46)
        assert evolve(background, f0, EvolutionConfig(s_end=1.0, guard=0.9)).status == GUARD_HIT
        assert evolve(background, f0, EvolutionConfig(s_end=1.0)).status == COMPLETED
        traj = evolve(background, const(grid, 0.52), EvolutionConfig(s_end=1.0))
        assert traj.status == BOUNDARY_HIT and len(traj.states) == 1

    def test_sup_never_grows(self, grid, perturbed):
        """F carries a factor grad f, so it vanishes where |f| is extremal."""
        f0 = const(grid, 0.3) + ScalarField.harmonic(grid, 1, 0, 0.2)
        traj = evolve(perturbed, f0, EvolutionConfig(s_end=20.0, tail_tol=1.0, guard=0.95))
        assert traj.status == COMPLETED
        th, ph = np.meshgrid(np.linspace(0, np.pi, 181), np.linspace(0, 2 * np.pi, 360),
                             indexing="ij")
        th, ph = th.ravel(), ph.ravel()
        sup0 = np.max(np.abs(f0.at(th, ph)))
        for st in traj.states[::10] + [traj.final]:
            assert np.max(np.abs(st.f.at(th, ph))) <= sup0 + 1e-6

    def test_under_resolved_rejected(self, grid, background):
        f0 = ScalarField.harmonic(grid, 30, 4, 0.01)
        with pytest.raises(StepRejected):
            evolve(background, f0, EvolutionConfig(s_end=1.0))

    def test_budget_warning(self, grid, background):
        f0 = ScalarField.harmonic(grid, 1, 0, 0.5)
        with pytest.warns(RuntimeWarning):
            evolve(background, f0, EvolutionConfig(s_end=0.1, budgets=(0.02, 0.1)))

    def test_bad_config(self):
        with pytest.raises(ValueError):
            EvolutionConfig(h0=0.0)
        with pytest.raises(ValueError):
            EvolutionConfig(guard=1.5)

    def test_decay_of_rhs(self, grid, perturbed):
        f0 = ScalarField.harmonic(grid, 1, 0, 0.02) + ScalarField.harmonic(grid, 2, 2, 0.01)
        traj = evolve(perturbed, f0, EvolutionConfig(s_end=100.0))
        s = traj.s
        F = np.array([r["max_abs_F"] for r in traj.ledger])
        sel = s >= 1.0
        q = -np.polyfit(np.log(1.0 + s[sel]), np.log(F[sel]), 1)[0]
        assert q >= 1.9


class TestLaplacianForm:

    def test_constant(self, grid, background):
        traj = evolve_laplacian_form(background, ScalarField.constant(grid, 0.1),
                                     EvolutionConfig(s_end=2.0))
        for st in traj.states:
            np.testing.assert_allclose(st.f.values, 0.1, atol=1e-14)
        assert traj.method == "laplacian"

    @pytest.mark.parametrize("which", ["background", "perturbed"])
    def test_agrees_with_direct(self, request, grid, which):
        metric = request.getfixturevalue(which)
        f0 = ScalarField.harmonic(grid, 1, 0, 0.02) + ScalarField.harmonic(grid, 2, 1, 0.01) + 0.05
        cfg = EvolutionConfig(s_end=20.0, diagnostics=False)
        a, b = evolve(metric, f0, cfg), evolve_laplacian_form(metric, f0, cfg)
        np.testing.assert_allclose(a.s, b.s)
        diff = max(np.max(np.abs(x.f.values - y.f.values)) for x, y in zip(a.states, b.states))
        assert diff <= 1e-5
        for st in b.states:
            assert abs(laplacian(st.f).mean()) <= 1e-10
