"""
Tests for energies, Casimirs, the renormalization residual and the separation functional.
"""

import math
from dataclasses import replace

import numpy as np
import pytest

from vlasov_flow.errors import ConfigurationError, InputError
from vlasov_flow.engine.diagnostics import (
    DiagnosticsRecord,
    SmoothTestFunction,
    casimir,
    casimir_function,
    energy_report,
    eulerian_record,
    kinetic_energy,
    kinetic_energy_grid,
    lagrangian_record,
    renorm_residual,
    separation_functional,
    total_energy,
)
from vlasov_flow.engine.eulerian import PhaseGridFunction
from vlasov_flow.engine.fields import FieldSolver, Grid, deposit_points
from vlasov_flow.engine.flow import FrozenField, ParticleStatus, PicField, run
from vlasov_flow.engine.kernels import KernelSpec
from vlasov_flow.utils.scenarios import build_initial, get_scenario


def _free_streaming_snapshots(nx, nv, dt, t_end=1.0, k=0.5, alpha=0.3, vmax=8.0):
    length = 2 * math.pi / k

    def exact(t):
        def f(X, V):
            return (1.0 + alpha * np.cos(k * (X - V * t))) * np.exp(-0.5 * V * V)
        state = PhaseGridFunction.from_function(f, length, nx, vmax, nv)
        state.t = t
        return state

    steps = int(round(t_end / dt))
    return [exact(i * dt) for i in range(steps + 1)]


# ── Energies ──────────────────────────────────────────────────────────


class TestKineticEnergy:
    """Test the kinetic energy of ensembles and phase grids."""

    def test_resting_particles(self, make_ensemble):
        assert kinetic_energy(make_ensemble([[0.0], [1.0]], [[0.0], [0.0]])) == 0.0

    def test_single_particle(self, make_ensemble):
        assert kinetic_energy(make_ensemble([[0.0, 0.0]], [[3.0, 0.0]], w=[2.0])) == 18.0

    def test_escaped_particles_excluded(self, make_ensemble):
        ensemble = make_ensemble([[0.0], [0.0]], [[1.0], [5.0]])
        ensemble.status[1] = ParticleStatus.ESCAPED
        assert kinetic_energy(ensemble) == 1.0

    @pytest.mark.slow
    def test_matches_phase_grid_quadrature(self, landau_scenario):
        initial = build_initial(landau_scenario)
        particles = kinetic_energy(initial.sample(40_000, seed=11))
        grid = kinetic_energy_grid(initial.phase_grid(64, 129))
        assert particles == pytest.approx(grid, rel=1e-3)

    def test_total_energy_prefers_h_form(self):
        assert total_energy(1.0, -1, 0.25, 0.5) == 0.75
        assert total_energy(1.0, 1, None, 0.5) == 1.5
        assert total_energy(1.0, 1, None, None) == 1.0


# ── Casimirs ──────────────────────────────────────────────────────────


class TestCasimir:
    """Test Casimir functionals on both representations."""

    def test_identity_is_mass(self, make_ensemble, rng):
        ensemble = make_ensemble(rng.normal(size=(100, 1)), rng.normal(size=(100, 1)),
                                 w=rng.uniform(0.1, 1.0, size=100),
                                 f0=rng.uniform(0.1, 2.0, size=100))
        assert casimir(ensemble, "identity") == pytest.approx(ensemble.total_mass(), rel=1e-12)

    def test_uniform_grid_square(self):
        c = 0.7
        state = PhaseGridFunction(f=np.full((8, 9), c), length=2.0, vmax=1.0)
        assert casimir(state, "square") == pytest.approx(c * c * 2.0 * 2.0, rel=1e-12)

    def test_uniform_particles_square(self, make_ensemble):
        c, volume, count = 0.7, 3.0, 50
        ensemble = make_ensemble(np.zeros((count, 1)), np.zeros((count, 1)),
                                 w=np.full(count, c * volume / count), f0=np.full(count, c))
        assert casimir(ensemble, "square") == pytest.approx(c * c * volume, rel=1e-12)

    def test_zero_value_particles_contribute_nothing(self, make_ensemble):
        ensemble = make_ensemble([[0.0], [1.0]], [[0.0], [0.0]], f0=[0.0, 0.5])
        assert casimir(ensemble, "identity") == 1.0

    def test_threshold(self):
        psi = casimir_function("threshold:0.5")
        np.testing.assert_array_equal(psi(np.array([0.2, 0.5, 0.8])), [0.0, 0.0, 0.8])

    @pytest.mark.parametrize("psi_id", ["cube", "threshold:abc", ""])
    def test_unregistered(self, psi_id):
        with pytest.raises(ConfigurationError):
            casimir_function(psi_id)

    @pytest.mark.slow
    def test_particles_match_phase_grid(self, landau_scenario):
        initial = build_initial(landau_scenario)
        particles = casimir(initial.sample(40_000, seed=5), "square")
        grid = casimir(initial.phase_grid(64, 129), "square")
        assert particles == pytest.approx(grid, rel=1e-2)

    def test_constant_along_run(self, landau_scenario):
        initial = build_initial(landau_scenario)
        ensemble = initial.sample(2000, seed=2)
        before = casimir(ensemble, "arctan_weighted")
        solver = FieldSolver(landau_scenario.field_grid(32), landau_scenario.kernel_spec(2.0))
        run(ensemble, PicField(solver), 0.1, 0.5)
        assert casimir(ensemble, "arctan_weighted") == before


# ── Renormalization residual ──────────────────────────────────────────


class TestRenormResidual:
    """Test the weak-form residual of renormalized transport."""

    def _test_fn(self):
        return SmoothTestFunction(k=0.5, v_width=4.0, decay=0.5)

    def test_zero_solution(self):
        snaps = [PhaseGridFunction(f=np.zeros((16, 17)), length=1.0, vmax=8.0, t=t)
                 for t in (0.0, 0.5, 1.0)]
        assert renorm_residual(snaps, "arctan", self._test_fn()) == 0.0

    def test_free_streaming_converges(self):
        coarse = renorm_residual(_free_streaming_snapshots(32, 65, 0.1), "arctan", self._test_fn())
        fine = renorm_residual(_free_streaming_snapshots(64, 129, 0.05), "arctan", self._test_fn())
        assert fine < coarse
        assert math.log2(coarse / fine) >= 1.0

    @pytest.mark.parametrize("beta", ["rational", "clamped"])
    def test_other_betas_small(self, beta):
        snaps = _free_streaming_snapshots(64, 129, 0.05)
        assert renorm_residual(snaps, beta, self._test_fn()) < 1e-2

    def test_unknown_beta(self):
        with pytest.raises(ConfigurationError):
            renorm_residual(_free_streaming_snapshots(16, 33, 0.5), "log", self._test_fn())

    def test_support_outside_grid(self):
        with pytest.raises(InputError):
            renorm_residual(_free_streaming_snapshots(16, 33, 0.5, vmax=3.0), "arctan",
                            self._test_fn())

    def test_mismatched_grids(self):
        snaps = _free_streaming_snapshots(16, 33, 0.5)
        snaps[-1] = _free_streaming_snapshots(32, 33, 1.0)[-1]
        with pytest.raises(InputError):
            renorm_residual(snaps, "arctan", self._test_fn())

    def test_test_function_derivatives(self):
        phi = SmoothTestFunction(k=0.5, v_width=2.0, v_center=0.3, decay=0.2)
        x, v, t, h = 0.7, 0.4, 0.3, 1e-6
        assert phi.dx(t, x, v) == pytest.approx(
            (phi.value(t, x + h, v) - phi.value(t, x - h, v)) / (2 * h), rel=1e-6)
        assert phi.dv(t, x, v) == pytest.approx(
            (phi.value(t, x, v + h) - phi.value(t, x, v - h)) / (2 * h), rel=1e-6)
        assert phi.dt(t, x, v) == pytest.approx(
            (phi.value(t + h, x, v) - phi.value(t - h, x, v)) / (2 * h), rel=1e-6)


# ── Separation functional ─────────────────────────────────────────────


class TestSeparationFunctional:
    """Test the flow-separation functional."""

    def test_identical_runs(self, make_ensemble, rng):
        ensemble = make_ensemble(rng.normal(size=(50, 1)), rng.normal(size=(50, 1)))
        assert separation_functional(ensemble, ensemble.copy(), 0.5, 0.5) == 0.0

    def test_constant_position_offset(self, make_ensemble, rng):
        a = make_ensemble(rng.normal(size=(50, 1)), rng.normal(size=(50, 1)),
                          w=rng.uniform(0.5, 1.5, size=50))
        b = a.copy()
        b.x += 0.3
        assert separation_functional(a, b, 1.0, 1.0) == pytest.approx(math.log1p(0.3), abs=1e-10)

    def test_matched_by_identity(self, make_ensemble, rng):
        a = make_ensemble(rng.normal(size=(20, 1)), rng.normal(size=(20, 1)))
        b = a.copy()
        perm = rng.permutation(20)
        for name in ("x", "v", "w", "ids", "status"):
            setattr(b, name, getattr(b, name)[perm])
        assert separation_functional(a, b, 0.1, 0.1) == 0.0

    def test_nonnegative(self, make_ensemble, rng):
        a = make_ensemble(rng.normal(size=(30, 2)), rng.normal(size=(30, 2)))
        b = a.copy()
        b.v += rng.normal(scale=0.1, size=b.v.shape)
        assert separation_functional(a, b, 0.2, 0.5) > 0.0

    def test_identity_mismatch(self, make_ensemble):
        a = make_ensemble([[0.0], [1.0]], [[0.0], [0.0]])
        b = make_ensemble([[0.0]], [[0.0]])
        with pytest.raises(InputError):
            separation_functional(a, b, 0.5, 0.5)

    def test_time_mismatch(self, make_ensemble):
        a = make_ensemble([[0.0]], [[0.0]])
        b = a.copy()
        b.t = 1.0
        with pytest.raises(InputError):
            separation_functional(a, b, 0.5, 0.5)

    def test_weight_mismatch(self, make_ensemble):
        a = make_ensemble([[0.0]], [[0.0]])
        b = a.copy()
        b.w = b.w * 2.0
        with pytest.raises(InputError):
            separation_functional(a, b, 0.5, 0.5)

    def test_snapshot_selected_by_time(self, make_ensemble, rng):
        start = make_ensemble(rng.normal(size=(20, 1)), rng.normal(size=(20, 1)))
        later_a, later_b = start.copy(), start.copy()
        later_a.t = later_b.t = 1.0
        later_a.x += 0.3
        run_a, run_b = [start, later_a], [start.copy(), later_b]
        assert separation_functional(run_a, run_b, 1.0, 1.0, t=0.0) == 0.0
        assert separation_functional(run_a, run_b, 1.0, 1.0, t=1.0) == pytest.approx(
            math.log1p(0.3), abs=1e-10)

    def test_time_not_recorded(self, make_ensemble):
        a = make_ensemble([[0.0]], [[0.0]])
        with pytest.raises(InputError, match="no snapshot"):
            separation_functional([a], [a.copy()], 0.5, 0.5, t=2.0)

    def test_sequence_needs_time(self, make_ensemble):
        a = make_ensemble([[0.0]], [[0.0]])
        later = a.copy()
        later.t = 1.0
        with pytest.raises(InputError):
            separation_functional([a, later], [a, later], 0.5, 0.5)

    @pytest.mark.parametrize("delta,zeta", [(0.0, 0.5), (1.5, 0.5), (0.5, 0.0)])
    def test_parameter_range(self, make_ensemble, delta, zeta):
        a = make_ensemble([[0.0]], [[0.0]])
        with pytest.raises(ConfigurationError):
            separation_functional(a, a, delta, zeta)

    @pytest.mark.slow
    def test_decreases_under_refinement(self):
        """Matched Landau runs approach the finest run as dt and the grid are refined."""
        scenario = get_scenario("landau")
        spec = scenario.kernel_spec(1.0)

        def final_ensemble(level):
            ensemble = build_initial(scenario).sample(20000, seed=5)
            solver = FieldSolver(scenario.field_grid(32 * 2 ** level), spec)
            run(ensemble, PicField(solver), 0.2 / 2 ** level, 5.0)
            return ensemble

        reference = final_ensemble(3)
        values = [separation_functional(final_ensemble(level), reference, 0.1, 1.0, t=5.0)
                  for level in range(3)]
        assert values[0] > values[1] > values[2] > 0.0


# ── Records and reports ───────────────────────────────────────────────


class TestRecords:
    """Test record builders."""

    def test_lagrangian_record_periodic(self, landau_scenario):
        ensemble = build_initial(landau_scenario).sample(2000, seed=4)
        solver = FieldSolver(landau_scenario.field_grid(32), landau_scenario.kernel_spec(2.0))
        pic = PicField(solver)
        pic.accel(ensemble)
        record = lagrangian_record(ensemble, pic, 1, ["identity", "square"], 1e6, 1e6)
        assert record.potential_H is None
        assert record.potential_E2 > 0.0
        assert record.total_energy == pytest.approx(record.kinetic + record.potential_E2)
        assert record.casimir_values["identity"] == pytest.approx(record.mass_total, rel=1e-12)
        assert record.ledger.active_mass == pytest.approx(record.mass_total, rel=1e-12)
        assert sum(record.mass_per_band.values()) == pytest.approx(record.mass_total, rel=1e-12)

    def test_lagrangian_record_frozen(self, make_ensemble):
        ensemble = make_ensemble([[0.0]], [[2.0]])
        record = lagrangian_record(ensemble, FrozenField.zero(), 1, [], 10.0, 10.0)
        assert record.potential_H is None and record.potential_E2 is None
        assert record.total_energy == 4.0

    def test_eulerian_record(self, landau_scenario):
        state = build_initial(landau_scenario).phase_grid(32, 65)
        state = replace(state, E=np.zeros(state.nx))
        record = eulerian_record(state, 1, ["identity"])
        assert record.mass_total == pytest.approx(state.mass())
        assert record.potential_E2 == 0.0
        assert record.casimir_values["identity"] == pytest.approx(record.mass_total)

    def test_static_equilibrium_with_background(self, make_ensemble):
        grid = Grid.centered(d=2, half_width=1.0, cells=16)
        nodes = grid.nodes().reshape(-1, 2)
        disc = nodes[np.sum(nodes ** 2, axis=1) < 0.25]
        w = np.full(disc.shape[0], 0.01)
        background = deposit_points(disc, w, grid).rho
        ensemble = make_ensemble(disc, np.zeros_like(disc), w=w)
        pic = PicField(FieldSolver(grid, KernelSpec(d=2, n=8.0), background=background))

        outcome = run(ensemble, pic, 0.1, 0.5, observer=lambda e, fm: lagrangian_record(
            e, fm, 1, ["identity"], 10.0, 10.0))
        totals = [r.total_energy for r in outcome.records[1:]]
        assert np.ptp(totals) <= 1e-10
        assert all(abs(r.potential_H) <= 1e-10 for r in outcome.records[1:])
        np.testing.assert_array_equal(ensemble.x, disc)


class TestEnergyReport:
    """Test energy verdicts."""

    def _records(self, totals, potential_H=None, potential_E2=None):
        return [DiagnosticsRecord(t=float(i), mass_total=1.0, total_energy=e,
                                  potential_H=potential_H, potential_E2=potential_E2)
                for i, e in enumerate(totals)]

    def test_empty(self):
        assert energy_report([], 1).passed

    def test_constant_energy(self):
        report = energy_report(self._records([2.0, 2.0, 2.0]), 1)
        assert report.passed
        assert report.max_relative_drift == 0.0
        assert report.total == [2.0, 2.0, 2.0]

    def test_growth_beyond_budget(self):
        report = energy_report(self._records([1.0, 1.005, 1.02]), 1)
        assert not report.bound_ok
        assert not report.passed
        assert report.final_relative_drift == pytest.approx(0.02)

    def test_attractive_growth_not_bounded(self):
        assert energy_report(self._records([1.0, 1.5]), -1).bound_ok

    def test_inequality_violation(self):
        report = energy_report(self._records([1.0, 1.0], potential_H=0.5, potential_E2=0.6), 1)
        assert report.inequality_checked == 2
        assert not report.inequality_ok
        assert not report.passed

    def test_inequality_tolerance(self):
        records = self._records([1.0], potential_H=0.5, potential_E2=0.50001)
        assert energy_report(records, 1, inequality_tol=1e-3).inequality_ok

    def test_inequality_unchecked(self):
        records = self._records([1.0], potential_H=0.5, potential_E2=0.6)
        report = energy_report(records, 1, check_inequality=False)
        assert report.inequality_ok
        assert report.inequality_checked == 0


# ── Landau energy budget ──────────────────────────────────────────────


def _landau_totals(dt, t_end, cadence=1, particles=20000, seed=9):
    scenario = get_scenario("landau")
    ensemble = build_initial(scenario).sample(particles, seed=seed)
    pic = PicField(FieldSolver(scenario.field_grid(64), scenario.kernel_spec(2.0)))
    outcome = run(ensemble, pic, dt, t_end, cadence=cadence,
                  observer=lambda e, fm: lagrangian_record(e, fm, 1, [], 1e6, 1e6))
    return outcome.records


@pytest.mark.slow
class TestLandauEnergy:
    """Total energy of the self-consistent Landau run."""

    def test_drift_within_budget_over_fifty_periods(self):
        records = _landau_totals(0.1, 50 * 2.0 * math.pi, cadence=10)
        report = energy_report(records, 1)
        assert records[-1].t == pytest.approx(314.2)
        assert report.bound_ok
        assert report.max_relative_drift <= 0.01

    def test_error_second_order_in_dt(self):
        """Halving dt cuts the deviation from a fine-step run about fourfold."""
        reference = np.array([r.total_energy for r in _landau_totals(0.0125, 10.0, cadence=16)])
        errors = []
        for dt, cadence in ((0.2, 1), (0.1, 2)):
            totals = np.array([r.total_energy for r in _landau_totals(dt, 10.0, cadence=cadence)])
            assert totals.shape == reference.shape
            errors.append(float(np.max(np.abs(totals - reference))) / reference[0])
        assert errors[1] > 0.0
        assert 2.5 < errors[0] / errors[1] < 6.0
