"""Atomic measures and the flat metric."""
import numpy as np
import pytest

from ebt.measures import (
    CapacityError,
    DiscreteMeasure,
    EvaluationError,
    flat_distance,
    read_measure_csv,
    write_measure_csv,
)
from oracles import flat_distance_dense_lp, flat_distance_split_search, random_measure


def measure(*atoms):
    return DiscreteMeasure.from_atoms(atoms)


class TestTotalMass:
    def test_empty(self):
        assert DiscreteMeasure.empty().total_mass() == 0.0

    def test_two_atoms(self):
        assert measure((1.0, 0.25), (3.0, 0.75)).total_mass() == 1.0

    def test_duplicate_locations_merge(self):
        assert measure((2.0, 0.5), (2.0, 0.5)).total_mass() == 1.0


class TestIntegrate:
    def test_constant_equals_total_mass(self):
        m = measure((0.5, 0.3), (2.0, 1.2))
        assert m.integrate(lambda x: np.ones_like(x)) == pytest.approx(m.total_mass())

    def test_identity(self):
        assert measure((1.0, 0.5), (3.0, 0.5)).integrate(lambda x: x) == pytest.approx(2.0)

    def test_square(self):
        assert measure((0.0, 1.0), (2.0, 0.25)).integrate(lambda x: x ** 2) == pytest.approx(1.0)

    def test_scalar_only_callable(self):
        m = measure((1.0, 0.5), (3.0, 0.5))
        assert m.integrate(lambda x: float(x) ** 2) == pytest.approx(0.5 + 4.5)

    def test_nonfinite_names_atom(self):
        m = measure((1.0, 0.5), (0.0, 0.5))
        with pytest.raises(EvaluationError, match="location=0.0"):
            with np.errstate(divide="ignore"):
                m.integrate(lambda x: 1.0 / x)


class TestTailMass:
    def test_below_all(self):
        m = measure((1.0, 0.3), (5.0, 0.7))
        assert m.tail_mass(0.0) == pytest.approx(m.total_mass())

    def test_above_all(self):
        assert measure((1.0, 0.3), (5.0, 0.7)).tail_mass(10.0) == 0.0

    def test_between(self):
        assert measure((1.0, 0.3), (5.0, 0.7)).tail_mass(2.0) == pytest.approx(0.7)

    def test_strict_inequality(self):
        assert measure((2.0, 0.4)).tail_mass(2.0) == 0.0

    def test_monotone_in_threshold(self):
        rng = np.random.default_rng(7)
        m = random_measure(rng, 6)
        ts = np.linspace(-1, 6, 40)
        vals = [m.tail_mass(t) for t in ts]
        assert all(a >= b for a, b in zip(vals, vals[1:]))


class TestValidation:
    def test_negative_mass_rejected(self):
        with pytest.raises(ValueError, match="masses"):
            DiscreteMeasure(np.array([1.0]), np.array([-0.1]))

    def test_nonfinite_location_rejected(self):
        with pytest.raises(ValueError, match="locations"):
            DiscreteMeasure(np.array([np.inf]), np.array([1.0]))

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError, match="length"):
            DiscreteMeasure(np.array([1.0, 2.0]), np.array([1.0]))

    def test_immutable(self):
        m = measure((1.0, 1.0))
        with pytest.raises(ValueError):
            m.locations[0] = 2.0


class TestFlatDistance:
    def test_identity_of_indiscernibles(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            m = random_measure(rng, 6)
            assert flat_distance(m, m) == 0.0

    def test_against_empty_is_mass(self):
        for x, c in [(0.0, 1.0), (7.5, 0.25), (-3.0, 2.0)]:
            assert flat_distance(measure((x, c)), DiscreteMeasure.empty()) == pytest.approx(c, abs=1e-12)

    @pytest.mark.parametrize("d", [0.5, 1.0, 2.0, 4.0])
    def test_unit_dirac_closed_form(self, d):
        # sum-norm convention: 2d/(d+2), not min(d, 2)
        got = flat_distance(measure((0.0, 1.0)), measure((d, 1.0)))
        assert got == pytest.approx(2 * d / (d + 2), abs=1e-9)

    def test_colocated_atoms_mass_difference(self):
        got = flat_distance(measure((3.0, 1.5)), measure((3.0, 0.25)))
        assert got == pytest.approx(1.25, abs=1e-9)

    def test_permutation_invariance(self):
        a1 = measure((1.0, 0.5), (2.0, 0.25), (0.5, 1.0))
        a2 = measure((0.5, 1.0), (1.0, 0.5), (2.0, 0.25))
        b = measure((1.5, 0.8))
        assert flat_distance(a1, b) == pytest.approx(flat_distance(a2, b), abs=1e-12)

    def test_zero_mass_atoms_ignored(self):
        a = measure((1.0, 0.5), (9.0, 0.0))
        b = measure((1.0, 0.5))
        assert flat_distance(a, b) == 0.0

    def test_bounded_by_total_masses(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            a, b = random_measure(rng, 6), random_measure(rng, 6)
            assert flat_distance(a, b) <= a.total_mass() + b.total_mass() + 1e-12

    def test_capacity_limit(self):
        a = DiscreteMeasure(np.arange(15.0), np.ones(15))
        with pytest.raises(CapacityError):
            flat_distance(a, DiscreteMeasure.empty(), max_atoms=10)

    def test_metric_properties_on_random_triples(self):
        rng = np.random.default_rng(11)
        for _ in range(40):
            a = random_measure(rng, 6)
            b = random_measure(rng, 6)
            c = random_measure(rng, 6)
            dab = flat_distance(a, b)
            dba = flat_distance(b, a)
            dac = flat_distance(a, c)
            dbc = flat_distance(b, c)
            assert dab >= 0.0
            assert abs(dab - dba) <= 1e-9
            assert dac <= dab + dbc + 1e-9

    def test_positivity_for_distinct_measures(self):
        assert flat_distance(measure((1.0, 0.5)), measure((1.0, 0.4))) > 1e-3

    def test_agrees_with_split_search_oracle(self):
        rng = np.random.default_rng(2024)
        for _ in range(60):
            a = random_measure(rng, 4)
            b = random_measure(rng, 4)
            assert flat_distance(a, b) == pytest.approx(
                flat_distance_split_search(a, b), abs=1e-9)

    def test_agrees_with_dense_grid_lp_oracle(self):
        rng = np.random.default_rng(99)
        for _ in range(50):
            a = random_measure(rng, 4)
            b = random_measure(rng, 4)
            assert flat_distance(a, b) == pytest.approx(
                flat_distance_dense_lp(a, b), abs=1e-6)

    def test_duality_upper_bound_for_bumps(self):
        # |int phi dm - int phi dm'| <= ||phi||_{W^{1,inf}} * rho(m, m')
        from ebt.testfunctions import FlatProfile, TestFunction

        rng = np.random.default_rng(5)
        grid = np.linspace(-1.0, 7.0, 40001)
        for _ in range(15):
            m = random_measure(rng, 5, allow_empty=False)
            mp = random_measure(rng, 5, allow_empty=False)
            phi = TestFunction(label="t", center=float(rng.uniform(0, 5)),
                               half_width=float(rng.uniform(0.3, 2.0)),
                               profile=FlatProfile())
            val, d_dx, _ = phi.eval(grid, 0.0)
            norm = float(np.max(np.abs(val)) + np.max(np.abs(d_dx)))
            gap = abs(m.integrate(lambda x: phi.value(x, 0.0))
                      - mp.integrate(lambda x: phi.value(x, 0.0)))
            assert gap <= norm * flat_distance(m, mp) * (1 + 1e-6) + 1e-12


class TestMerged:
    def test_canonical_form(self):
        m = measure((2.0, 0.5), (1.0, 0.0), (2.0, 0.25), (0.5, 0.1))
        canon = m.merged()
        assert canon.locations.tolist() == [0.5, 2.0]
        assert canon.masses.tolist() == [0.1, 0.75]
        assert canon.total_mass() == pytest.approx(m.total_mass())


class TestCsvRoundTrip:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(17)
        m = random_measure(rng, 8, allow_empty=False)
        path = tmp_path / "m.csv"
        write_measure_csv(m, path)
        back = read_measure_csv(path)
        assert np.array_equal(back.locations, m.locations)
        assert np.array_equal(back.masses, m.masses)

    def test_header_checked(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("x,y\n1,2\n")
        with pytest.raises(ValueError, match="header"):
            read_measure_csv(path)
