"""Oracles, error measures, and convergence studies."""
import math

import numpy as np
import pytest

from ebt.measures import DiscreteMeasure, flat_distance
from ebt.model import catalog_build
from ebt.solver import run
from ebt.testfunctions import FlatProfile, TestFunction, standard_family
from ebt.verify import (
    ConstantRatesOracle,
    convergence_study,
    fit_loglog_slope,
    flat_error,
    functional_error,
    oracle_functional,
    report_summary,
    write_report_csv,
)


def atoms(*pairs):
    return DiscreteMeasure.from_atoms(pairs)


def constant_spec(**overrides):
    params = {"g0": 1.0, "mu0": 0.2, "beta0": 0.5, "T": 1.0, "N": 20, "n": 10}
    params.update({k: v for k, v in overrides.items() if k in params})
    kwargs = {k: v for k, v in overrides.items() if k not in params}
    return catalog_build("constant_rates", params, **kwargs)


# Computed by the oracle itself (adaptive quadrature to ~1e-10) for
# g0=1, mu0=0.2, beta0=0.5, nu_0 = delta at x_b+1, T=1, standard family;
# frozen before any solver comparison.
ORACLE_FIXTURE = {
    "phi_00": 0.03600975710380438,
    "phi_01": 0.03582282298518944,
    "phi_02": 0.031054013552523557,
    "phi_03": 0.023757122234601538,
    "phi_04": 0.0,
    "phi_05": 0.0,
    "phi_06": 0.0,
    "phi_07": 0.21581508339868927,
    "phi_08": 0.009442793618122215,
    "phi_09": 0.0,
}


class TestConstantRatesOracle:
    def test_frozen_fixture_values(self):
        spec = constant_spec(N=1, n=50, initial=atoms((1.0, 1.0)))
        oracle = ConstantRatesOracle.from_problem(spec)
        for phi in standard_family(spec):
            assert oracle.functional(phi) == pytest.approx(
                ORACLE_FIXTURE[phi.label], abs=1e-9), phi.label

    def test_birth_free_reduces_to_transported_initial(self):
        # beta0 = 0, mu0 = 0: the oracle is literally the shifted initial sum
        spec = constant_spec(mu0=0.0, beta0=0.0,
                             initial=atoms((0.3, 0.4), (0.9, 0.6)))
        oracle = ConstantRatesOracle.from_problem(spec)
        phi = TestFunction(label="w", center=1.6, half_width=1.0,
                           profile=FlatProfile())
        expected = 0.4 * float(phi.value(np.asarray(1.3), 1.0)) \
            + 0.6 * float(phi.value(np.asarray(1.9), 1.0))
        assert oracle.functional(phi) == pytest.approx(expected, abs=1e-12)

    def test_total_mass_balance(self):
        oracle = ConstantRatesOracle.from_problem(constant_spec())
        assert oracle.total_mass(1.0) == pytest.approx(math.exp(0.3), rel=1e-12)

    def test_density_initial_data_supported(self):
        spec = constant_spec()  # default uniform density on [0.2, 1.2]
        oracle = ConstantRatesOracle.from_problem(spec)
        phi = TestFunction(label="w", center=1.7, half_width=0.5,
                           profile=FlatProfile())
        # transported part only (support [1.2, 2.2] shifted back: [0.2, 1.2])
        from scipy.integrate import quad
        expected = math.exp(-0.2) * quad(
            lambda x0: float(phi.value(np.asarray(x0 + 1.0), 1.0)),
            0.2, 1.2, epsabs=1e-12, epsrel=1e-10)[0]
        # plus births reaching [0, 1]: support overlap [1.2, 1.0] empty -> none
        assert oracle.functional(phi) == pytest.approx(expected, rel=1e-9)

    def test_feedback_model_rejected(self):
        spec = catalog_build("logistic_feedback",
                             {"g0": 1.0, "mu0": 0.1, "mu1": 0.3, "beta0": 0.2})
        with pytest.raises(ValueError, match="feedback-free"):
            ConstantRatesOracle.from_problem(spec)

    def test_zero_growth_rejected(self):
        spec = catalog_build("pure_decay", {"mu0": 0.5})
        with pytest.raises(ValueError, match="g0 > 0"):
            ConstantRatesOracle.from_problem(spec)

    def test_ramp_model_rejected(self):
        spec = catalog_build("ramp_fecundity",
                             {"g0": 1.0, "mu0": 0.1, "beta0": 0.4})
        with pytest.raises(ValueError, match="constant"):
            ConstantRatesOracle.from_problem(spec)

    def test_one_shot_wrapper(self):
        spec = constant_spec(N=1, n=50, initial=atoms((1.0, 1.0)))
        phi = standard_family(spec)[7]
        assert oracle_functional(spec, phi) == pytest.approx(
            ORACLE_FIXTURE["phi_07"], abs=1e-9)


class TestFlatError:
    def test_trajectory_against_itself(self):
        traj = run(constant_spec(N=8, n=4), h=2e-3)
        assert flat_error(traj, traj.measure_at(1.0)) == 0.0

    def test_pure_decay_exact_reference(self):
        # the scheme is exact for decay in place: compare against the
        # analytically decayed atoms
        initial = atoms((0.4, 0.5), (1.1, 0.5))
        spec = catalog_build("pure_decay", {"mu0": 0.5, "T": 2.0, "N": 2, "n": 4},
                             initial=initial)
        traj = run(spec, h=1e-3)
        exact = DiscreteMeasure(initial.locations, initial.masses * math.exp(-1.0))
        assert flat_error(traj, exact) <= 1e-8

    def test_functional_error_drops_with_resolution(self):
        coarse = run(constant_spec(N=10, n=10), h=2e-3)
        fine = run(constant_spec(N=40, n=40), h=2e-3)
        assert functional_error(fine) < functional_error(coarse)

    def test_self_convergence_reference_orders_n(self):
        # error against a fine self-reference decreases when n doubles
        ref = run(constant_spec(N=240, n=240), h=1e-3).measure_at(1.0)
        err = {}
        for n in (30, 60):
            traj = run(constant_spec(N=60, n=n), h=1e-3)
            err[n] = flat_error(traj, ref)
        assert err[60] < err[30]

    def test_flat_error_dispatches_to_oracle(self):
        spec = constant_spec(N=8, n=8)
        traj = run(spec, h=2e-3)
        oracle = ConstantRatesOracle.from_problem(spec)
        assert flat_error(traj, oracle) == pytest.approx(
            functional_error(traj, oracle), abs=1e-15)


class TestSlopeFit:
    def test_exact_power_law(self):
        xs = [10, 20, 40, 80]
        ys = [3.0 / x ** 1.5 for x in xs]
        assert fit_loglog_slope(xs, ys) == pytest.approx(-1.5, abs=1e-12)

    def test_floor_contamination_excluded(self):
        xs = [10, 20, 40, 80, 160]
        ys = [1.0 / x for x in xs[:3]] + [5e-9, 5e-9]
        assert fit_loglog_slope(xs, ys, floor=1e-9) == pytest.approx(-1.0, abs=1e-12)

    def test_too_few_points(self):
        assert fit_loglog_slope([1, 2], [1.0, 0.5]) is None
        assert fit_loglog_slope([1, 2, 3], [float("nan")] * 3) is None


class TestConvergenceStudy:
    @pytest.fixture(scope="class")
    @staticmethod
    def study():
        return convergence_study(constant_spec(), [8, 16, 32], [8, 16, 32],
                                 2e-3, reference="self", jobs=1)

    def test_rows_cover_grid_in_order(self, study):
        keys = [(r.n_cohorts, r.n_internalizations) for r in study.rows]
        assert keys == [(nc, ni) for nc in (8, 16, 32) for ni in (8, 16, 32)]

    def test_all_rows_satisfy_mass_bound(self, study):
        assert all(r.mass_bound_ok for r in study.rows)

    def test_finest_row_is_near_minimal(self, study):
        finest = study.row(32, 32).flat_error
        assert finest <= 1.2 * min(r.flat_error for r in study.rows)

    def test_slopes_fitted_on_both_axes(self, study):
        assert study.slopes["residual_norm_vs_n"] is not None
        assert study.slopes["flat_error_vs_N"] is not None

    def test_parallel_rows_identical(self):
        kwargs = dict(n_grid=[6, 12], n_internalization_grid=[6, 12],
                      h=4e-3, reference="none")
        seq = convergence_study(constant_spec(), jobs=1, **kwargs)
        par = convergence_study(constant_spec(), jobs=2, **kwargs)
        for a, b in zip(seq.rows, par.rows):
            assert (a.n_cohorts, a.n_internalizations) == (b.n_cohorts, b.n_internalizations)
            assert a.functional_error == b.functional_error
            assert a.residual_norm == b.residual_norm

    def test_row_failures_recorded_not_fatal(self):
        # one integrator step per interval starves the residual quadrature
        report = convergence_study(constant_spec(), [4], [4], h=1.0,
                                   reference="none")
        row = report.rows[0]
        assert row.error is not None and "snapshots" in row.error
        assert math.isnan(row.residual_norm)

    def test_formulation_agreement_within_triple_error(self):
        # simplified vs original at the finest grid, each measured against
        # the same fine simplified reference
        ref = run(constant_spec(N=64, n=64), h=2e-3).measure_at(1.0)
        t_s = run(constant_spec(N=16, n=16), h=2e-3)
        t_o = run(constant_spec(N=16, n=16, boundary_formulation="original"), h=2e-3)
        err_s = flat_error(t_s, ref)
        err_o = flat_error(t_o, ref)
        gap = flat_distance(t_s.measure_at(1.0), t_o.measure_at(1.0))
        assert gap <= 3.0 * max(err_s, err_o)

    def test_decay_flat_error_first_order_in_cohort_count(self):
        # quantile discretization of a Lipschitz density: O(1/N) flat error,
        # preserved under decay-only dynamics
        spec = catalog_build("pure_decay", {"mu0": 0.5, "T": 1.0, "N": 80, "n": 4})
        report = convergence_study(spec, [10, 20, 40, 80], [4], 2e-3,
                                   reference="self", jobs=1)
        assert report.reference == "self"  # no functional oracle for g0 = 0
        assert report.slopes["flat_error_vs_N"] <= -0.9

    def test_zero_rate_problem_flat_error_constant_in_n(self):
        spec = catalog_build("pure_decay", {"mu0": 0.0, "T": 1.0, "N": 6, "n": 4})
        report = convergence_study(spec, [6], [2, 4, 8], h=2e-2, reference="self")
        errs = [r.flat_error for r in report.rows]
        assert max(errs) - min(errs) <= 1e-12
        assert all(e > 1e-6 for e in errs)  # initial discretization error only

    def test_bad_grids_rejected(self):
        with pytest.raises(ValueError):
            convergence_study(constant_spec(), [], [4], 1e-2)
        with pytest.raises(ValueError, match="reference"):
            convergence_study(constant_spec(), [4], [4], 1e-2, reference="bogus")


class TestReportOutput:
    def test_csv_columns_and_blank_nan(self, tmp_path):
        report = convergence_study(constant_spec(), [6], [6, 12], h=4e-3,
                                   reference="none")
        path = tmp_path / "report.csv"
        write_report_csv(report, path)
        lines = path.read_text().splitlines()
        assert lines[0] == ("N,n,h_eff,flat_error,functional_error,"
                            "residual_norm,mass_bound_ok,runtime_s")
        first = lines[1].split(",")
        assert first[0] == "6" and first[3] == ""  # no flat reference
        assert first[6] == "true"

    def test_summary_payload(self):
        report = convergence_study(constant_spec(), [6], [6, 12], h=4e-3,
                                   reference="none")
        payload = report_summary(report)
        assert payload["N_grid"] == [6]
        assert payload["reference"] == "none"
        assert "slopes" in payload and "runtime_s" in payload
        assert payload["rows_with_errors"] == []
