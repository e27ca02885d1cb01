"""Flows of transport fields, the transport estimate, fits and ensemble certificates."""

import copy
import math

import numpy as np
import pytest

from nullfol.analysis import (EnsembleSpec, certify, certify_records, commutator_residual,
                              decay_exponent, fit_two_constants, flow_of_trajectory,
                              format_certificates, integrate_flow, lp_comparability,
                              run_ensemble, transport_check, transport_norm_check)
from nullfol.errors import (ConfigError, EnsembleIncomplete, GridMismatch, HypothesisViolated,
                            NonDiffeo, OffGridEvalFailure)
from nullfol.evolution import EvolutionConfig, evolve
from nullfol.sphere import ScalarField, SphereGrid, grad, rotation_field


def probe(grid):
    return ScalarField.harmonic(grid, 2, 1, 1.0) + ScalarField.harmonic(grid, 3, -2, 0.5)


@pytest.fixture(scope="module")
def rotation_flow(grid):
    R = rotation_field(grid, 3)
    return integrate_flow(lambda s: R, EvolutionConfig(s_end=1.0), grid)


@pytest.fixture(scope="module")
def gradient_flow(grid):
    """Contracting flow of grad Y_1^0 with the decay r0 / (r0 + s)^2."""
    G = grad(ScalarField.harmonic(grid, 1, 0, 0.3))
    return integrate_flow(lambda s: G * (1.0 / (1.0 + s) ** 2), EvolutionConfig(s_end=10.0), grid)


class TestFlows:

    def test_rotation_is_rigid(self, grid, rotation_flow):
        s = rotation_flow.s[-1]
        Rz = np.array([[np.cos(s), -np.sin(s), 0], [np.sin(s), np.cos(s), 0], [0, 0, 1]])
        rigid = np.einsum("ij,j...->i...", Rz, grid.x_hat)
        np.testing.assert_allclose(rotation_flow.positions[-1], rigid, atol=1e-6)

    def test_rotation_volume_factor(self, rotation_flow):
        for v in rotation_flow.vol_factor:
            np.testing.assert_allclose(v.values, 1.0, atol=1e-9)
        assert rotation_flow.agreement <= 1e-6
        assert rotation_flow.k_bound <= 1e-10

    def test_rotation_is_isometry(self, grid, rotation_flow):
        rep = lp_comparability(rotation_flow, probe(grid))
        np.testing.assert_allclose(rep["ratio"], 1.0, atol=1e-9)
        assert rep["within"]

    def test_zero_field(self, grid):
        flow = integrate_flow(lambda s: None, EvolutionConfig(s_end=2.0), grid)
        for P, v in zip(flow.positions, flow.vol_factor):
            np.testing.assert_allclose(P, grid.x_hat, atol=1e-15)
            np.testing.assert_array_equal(v.values, 1.0)
        assert flow.k_bound == 0.0
        rep = lp_comparability(flow, probe(grid), p=3.0)
        np.testing.assert_allclose(rep["ratio"], 1.0, rtol=1e-13)

    def test_gradient_flow_bound(self, gradient_flow):
        k = gradient_flow.k_bound
        logs = [np.max(np.abs(np.log(v.values))) for v in gradient_flow.vol_factor]
        assert 0 < max(logs) <= k
        assert gradient_flow.agreement <= 1e-6
        lag = max(np.max(np.abs(a - b)) for a, b in zip(gradient_flow.log_vol_lagrangian,
                                                         gradient_flow.log_vol_jacobian))
        assert lag <= 1e-6

    @pytest.mark.parametrize("p", [1.0, 2.0, 4.0])
    def test_gradient_flow_comparability(self, grid, gradient_flow, p):
        rep = lp_comparability(gradient_flow, probe(grid), p)
        assert rep["within"]
        assert np.all(rep["ratio"] > rep["lower"]) and np.all(rep["ratio"] < rep["upper"])
        assert np.max(np.abs(rep["ratio"] - 1.0)) > 1e-4
        # |f|^p has kinks at the zeros of f for odd p, where quadrature is only algebraic
        assert rep["method_gap"] <= (1e-8 if p % 2 == 0 else 1e-2)

    def test_sampled_series_fixes_steps(self, grid):
        R = rotation_field(grid, 1)
        series = [(s, R) for s in (0.0, 0.1, 0.25, 0.4)]
        flow = integrate_flow(series)
        np.testing.assert_array_equal(flow.s, [0.0, 0.1, 0.25, 0.4])
        np.testing.assert_allclose(flow.vol_factor[-1].values, 1.0, atol=1e-9)

    def test_flow_of_trajectory(self, grid, background):
        traj = evolve(background, ScalarField.harmonic(grid, 1, 0, 0.05), EvolutionConfig(s_end=2.0))
        flow = flow_of_trajectory(traj, sign=-1.0)
        np.testing.assert_array_equal(flow.s, traj.s)
        assert flow.agreement <= 1e-6
        assert max(np.max(np.abs(np.log(v.values))) for v in flow.vol_factor) <= flow.k_bound

    def test_non_diffeo(self, grid):
        G = grad(ScalarField.harmonic(grid, 1, 0, 30.0))
        with pytest.raises(NonDiffeo):
            integrate_flow(lambda s: G, EvolutionConfig(s_end=2.0, h0=0.1, stretch=False), grid)

    def test_off_grid_failure(self, grid):
        bad = np.full((3,) + grid.shape, np.nan)
        with pytest.raises(OffGridEvalFailure):
            integrate_flow(lambda s: bad, EvolutionConfig(s_end=0.1), grid)

    def test_grid_mismatch(self, rotation_flow):
        with pytest.raises(GridMismatch):
            lp_comparability(rotation_flow, probe(SphereGrid(64)))


class TestTransport:

    def test_rotation_preserves_norms(self, grid):
        R = rotation_field(grid, 3)
        rep = transport_check(grid, lambda s: R * (1.0 / (1.0 + s) ** 2), lambda s: 0.0,
                              probe(grid), EvolutionConfig(s_end=3.0).schedule())
        np.testing.assert_allclose(rep.norms, rep.norms[0], rtol=1e-8)
        assert rep.passed and rep.c_measured == 0.0

    @pytest.mark.parametrize("m", [1, 2])
    def test_rotation_higher_orders(self, grid, m):
        R = rotation_field(grid, 2)
        rep = transport_check(grid, lambda s: R * (1.0 / (1.0 + s) ** 2), lambda s: 0.0,
                              probe(grid), EvolutionConfig(s_end=3.0).schedule(), m=m)
        assert rep.passed
        assert rep.prefactor <= 1.0 + 1e-8

    def test_zero_field_is_additive(self, grid):
        u0 = probe(grid)
        rep = transport_check(grid, lambda s: None, lambda s: 0.3 * u0.values, u0,
                              EvolutionConfig(s_end=3.0).schedule())
        np.testing.assert_allclose(rep.norms, rep.bound_base, rtol=1e-12)
        np.testing.assert_allclose(rep.norms[-1], (1.0 + 0.9) * rep.norms[0], rtol=1e-12)

    def test_commutator_identity(self, grid):
        u = ScalarField.harmonic(grid, 3, 1, 1.0) + ScalarField.harmonic(grid, 4, -2, 0.5)
        Y = grad(ScalarField.harmonic(grid, 2, 1, 0.3)) + rotation_field(grid, 1) * 0.2
        assert commutator_residual(grid, Y, u.coeffs) <= 1e-6 * u.max_abs()

    def test_evolved_background_field(self, grid, background):
        f0 = ScalarField.harmonic(grid, 1, 0, 0.02) + ScalarField.harmonic(grid, 2, 1, 0.01)
        traj = evolve(background, f0, EvolutionConfig(s_end=2.0))
        rep = transport_norm_check(background, traj)
        assert rep.passed and rep.c_measured <= 4.0
        assert 0 < rep.k <= 1.0
        assert rep.commutator_residual <= 1e-6 * rep.u_scale
        assert rep.extra["tracking_error"] <= 1e-8

    def test_hypothesis_violated(self, grid, background):
        traj = evolve(background, ScalarField.harmonic(grid, 1, 0, 0.02), EvolutionConfig(s_end=0.2))
        with pytest.raises(HypothesisViolated):
            transport_norm_check(background, traj, k_ceiling=1e-6)

    def test_requires_diagnostics(self, grid, background):
        traj = evolve(background, ScalarField.harmonic(grid, 1, 0, 0.02),
                      EvolutionConfig(s_end=0.2, diagnostics=False))
        with pytest.raises(ValueError):
            transport_norm_check(background, traj)


class TestFits:

    def test_exact_single_term(self):
        a = np.array([1.0, 2.0, 0.5])
        ca, cb, t = fit_two_constants(a, a, np.array([0.3, 0.1, 0.7]), 2.0, 8.0)
        assert np.all(a <= ca * a + cb * np.array([0.3, 0.1, 0.7]) + 1e-12)
        # the minimax stage trades c_a against c_b, so t sits below c_a / ceil_a = 0.5
        assert t <= 0.5 + 1e-12
        # the second stage then minimises c_a / 2 + c_b / 8 inside the ceilings
        np.testing.assert_allclose([ca, cb], [1.0, 0.0], atol=1e-9)

    def test_admissible_pair(self, rng):
        a, b = rng.uniform(0.1, 1.0, 10), rng.uniform(0.1, 1.0, 10)
        y = 1.5 * a + 3.0 * b
        ca, cb, t = fit_two_constants(y, a, b, 2.0, 8.0)
        assert t <= 1.0 and ca <= 2.0 + 1e-9 and cb <= 8.0 + 1e-9
        assert np.all(y <= ca * a + cb * b + 1e-9)

    def test_infeasible_within_ceilings(self):
        ca, cb, t = fit_two_constants([10.0], [1.0], [1.0], 2.0, 2.0)
        assert t > 1.0
        assert 10.0 <= ca + cb + 1e-9

    def test_zero_rows(self):
        assert fit_two_constants([0.0, 0.0], [1.0, 1.0], [1.0, 1.0], 2.0, 8.0) == (0.0, 0.0, 0.0)

    def test_decay_exponent(self):
        s = np.linspace(0, 100, 200)
        np.testing.assert_allclose(decay_exponent(s, 3.0 * (1.0 + s) ** -2.5), 2.5, rtol=1e-12)
        assert math.isnan(decay_exponent([0.0, 0.5], [1.0, 0.5]))


SMALL = dict(n_runs=3, s_end=5.0)


def halved(spec):
    return EnsembleSpec.from_dict(dict(spec.to_dict(), epsilon=spec.epsilon / 2,
                                       delta_o=spec.delta_o / 2, delta_m=spec.delta_m / 2,
                                       d_o=spec.d_o / 2, d_m=spec.d_m / 2))


def constants(certs):
    return {(c.theorem, k): v for c in certs for k, v in c.constants.items()
            if not isinstance(v, bool) and k != "t"}


class TestCertificates:

    @pytest.mark.parametrize("kind", ["foliation", "perturbation", "constant"])
    def test_constants_only(self, kind):
        spec = EnsembleSpec(kind=kind, n_runs=2, s_end=2.0, delta_o=0.0, d_o=0.0)
        certs, _ = certify(spec)
        for (name, key), v in constants(certs).items():
            assert v in (0.0, 1.0), (name, key, v)
        assert all(c.status == "pass" for c in certs)

    def test_deterministic(self):
        spec = EnsembleSpec(kind="perturbation", n_runs=2, s_end=2.0)
        a, ra = certify(spec)
        b, rb = certify(spec)
        assert [c.to_dict() for c in a] == [c.to_dict() for c in b]
        assert [r["ledger"] for r in ra] == [r["ledger"] for r in rb]

    def test_recomputable_from_records(self):
        spec = EnsembleSpec(kind="foliation", n_runs=2, s_end=2.0)
        certs, records = certify(spec)
        again = certify_records(spec, copy.deepcopy(records))
        assert [c.to_dict() for c in certs] == [c.to_dict() for c in again]

    def test_parallel_matches_serial(self):
        spec = EnsembleSpec(kind="foliation", n_runs=2, s_end=1.0)
        assert run_ensemble(spec, workers=2) == run_ensemble(spec, workers=1)

    @pytest.mark.parametrize("kind", [
        "foliation", "perturbation",
        pytest.param("constant", marks=pytest.mark.xfail(strict=True, reason=(
            "halving epsilon with the data budgets shrinks the epsilon-weighted terms of the "
            "error bound cubically while the error itself scales quadratically; with f2 "
            "constant these terms are comparable to the data terms and the error constant "
            "rises by about 9.5%")))])
    def test_budget_monotonicity(self, kind):
        spec = EnsembleSpec(kind=kind, **SMALL)
        base = constants(certify(spec)[0])
        small = constants(certify(halved(spec))[0])
        for key, v in base.items():
            assert small[key] <= 1.05 * v + 1e-12, (key, v, small[key])

    def test_np1_claim_on_generic_leaf(self):
        spec = EnsembleSpec(kind="perturbation", n_runs=1, s_end=1.0)
        records = run_ensemble(spec)
        for row in records[0]["ledger"]:
            row["dd_grad_norm_np1"] = row["dd_grad_norm"]
        with pytest.raises(AssertionError):
            certify_records(spec, records)

    def test_aborted_runs_inconclusive(self):
        spec = EnsembleSpec(kind="foliation", n_runs=3, s_end=1.0, delta_m=5.0)
        certs, records = certify(spec)
        assert any(r["status"] != "Completed" for r in records)
        assert all(c.status == "inconclusive" or c.theorem == "foliation-guard" for c in certs)
        assert all(c.passed is None for c in certs if c.status == "inconclusive")
        with pytest.raises(EnsembleIncomplete) as info:
            certify(spec, strict=True)
        assert info.value.certificates

    def test_background_axisymmetric_gradient(self, grid, background):
        """Gradient growth on the background is quadratic in the amplitude."""
        growth = []
        for a in (2e-4, 0.01, 0.02):
            traj = evolve(background, ScalarField.harmonic(grid, 1, 0, a), EvolutionConfig(s_end=10.0))
            g = np.array([r["grad_norm"] for r in traj.ledger])
            growth.append(g.max() / g[0] - 1.0)
        assert growth[0] <= 1e-6
        assert 3.5 <= growth[2] / growth[1] <= 4.5

    def test_spec_round_trip_and_errors(self):
        spec = EnsembleSpec(kind="constant", ceilings=(("c_o", 3.0),))
        assert EnsembleSpec.from_dict(spec.to_dict()) == spec
        assert spec.ceiling_map["c_o"] == 3.0
        with pytest.raises(ConfigError):
            EnsembleSpec(kind="bogus")
        with pytest.raises(ConfigError):
            EnsembleSpec.from_dict({"unknown": 1})

    def test_table(self):
        spec = EnsembleSpec(kind="constant", n_runs=1, s_end=1.0)
        text = format_certificates(certify(spec)[0])
        for name in ("perturbation-gradient", "perturbation-gradient-np1", "linearisation-error"):
            assert name in text
