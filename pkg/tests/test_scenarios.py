"""
Tests for scenario presets, initial-data sampling and truncation.
"""

import json
import math
from unittest.mock import patch

import numpy as np
import pytest

import vlasov_flow.utils.scenarios as mod
from vlasov_flow.errors import ConfigurationError, InputError
from vlasov_flow.engine.flow import ParticleStatus
from vlasov_flow.utils.scenarios import (
    Scenario,
    analytic_kinetic,
    analytic_mass,
    background_grid,
    build_initial,
    get_scenario,
    load_scenarios,
    truncate_initial,
    truncation_energy_profile,
)


class TestLoadScenarios:
    """Test bundled presets and user overrides."""

    def test_bundled_json_loads(self):
        """Every bundled preset validates."""
        scenarios = load_scenarios()
        for name in ("landau", "two_stream", "bump3d", "bump2d_disc", "free_streaming"):
            assert name in scenarios
        for scenario in scenarios.values():
            assert scenario.validate() is scenario

    def test_cache_reused(self):
        """Second load returns the cached dict."""
        assert load_scenarios() is load_scenarios()

    def test_custom_override(self, tmp_path):
        """User scenarios replace bundled ones with the same name."""
        custom = tmp_path / "scenarios.json"
        custom.write_text(json.dumps({"scenarios": {
            "landau": {"family": "landau", "params": {"alpha": 0.2, "k": 0.5}},
            "mine": {"family": "two_stream", "params": {"alpha": 0.0, "k": 0.3, "v0": 3.0}},
        }}))
        mod._scenarios_cache = None
        with patch.object(mod, "_get_custom_scenarios_path", return_value=custom):
            scenarios = load_scenarios()
        assert scenarios["landau"].params["alpha"] == 0.2
        assert scenarios["mine"].family == "two_stream"
        assert "bump3d" in scenarios

    def test_broken_custom_file_ignored(self, tmp_path):
        """A corrupt override file falls back to the bundled presets."""
        custom = tmp_path / "scenarios.json"
        custom.write_text("{not json")
        mod._scenarios_cache = None
        with patch.object(mod, "_get_custom_scenarios_path", return_value=custom):
            scenarios = load_scenarios()
        assert scenarios["landau"].params["alpha"] == 0.05

    def test_malformed_entry(self, tmp_path):
        """An entry without a family is a configuration error."""
        custom = tmp_path / "scenarios.json"
        custom.write_text(json.dumps({"scenarios": {"bad": {"params": {}}}}))
        with pytest.raises(ConfigurationError):
            load_scenarios(custom_path=custom)

    def test_unknown_name(self):
        with pytest.raises(ConfigurationError, match="available"):
            get_scenario("nope")

    def test_missing_bundled_file(self, tmp_path):
        mod._scenarios_cache = None
        with patch.object(mod, "_get_bundled_scenarios_path", return_value=tmp_path / "x.json"):
            with pytest.raises(ConfigurationError):
                load_scenarios()


class TestScenarioValidate:
    """Test scenario validation."""

    @pytest.mark.parametrize("kwargs", [
        {"family": "plasma", "d": 1, "sigma": 1},
        {"family": "landau", "d": 2, "sigma": 1},
        {"family": "bump", "d": 4, "sigma": 1},
        {"family": "bump", "d": 3, "sigma": 0},
        {"family": "bump", "d": 3, "sigma": 1, "field_model": "external"},
        {"family": "bump", "d": 3, "sigma": 1, "background": {"radius": 1.0}},
    ])
    def test_rejected(self, kwargs):
        with pytest.raises(ConfigurationError):
            Scenario(name="x", **kwargs).validate()

    def test_landau_geometry(self, landau_scenario):
        assert landau_scenario.periodic
        assert landau_scenario.length == pytest.approx(4 * math.pi)
        assert landau_scenario.vmax == 8.0
        assert landau_scenario.field_grid(32).periodic
        assert landau_scenario.kernel_spec(2.0).n == 2.0

    def test_bump_grid(self):
        grid = get_scenario("bump3d").field_grid()
        assert grid.d == 3
        assert grid.shape == (33, 33, 33)
        assert not grid.periodic


# ── Initial data ──────────────────────────────────────────────────────


class TestInitialData:
    """Test sampling and pointwise evaluation."""

    @pytest.mark.parametrize("name", ["landau", "two_stream", "bump3d", "bump2d_disc"])
    def test_evaluator_nonnegative(self, name, rng):
        scenario = get_scenario(name)
        initial = build_initial(scenario)
        lower, upper = scenario.sample_box()
        points = rng.uniform(lower - 1.0, upper + 1.0, size=(500, lower.size))
        values = initial.evaluate(points[:, :scenario.d], points[:, scenario.d:])
        assert np.all(values >= 0.0)

    def test_sample_weights(self, landau_scenario):
        ensemble = build_initial(landau_scenario).sample(1000, seed=3)
        assert ensemble.size <= 1000
        assert np.all(ensemble.w > 0.0)
        assert np.all(ensemble.status == ParticleStatus.ACTIVE)
        box = 4 * math.pi * 16.0
        np.testing.assert_allclose(ensemble.w, ensemble.f0_value * box / 1000, rtol=1e-14)

    def test_sample_deterministic(self, landau_scenario):
        initial = build_initial(landau_scenario)
        a, b = initial.sample(500, seed=9), initial.sample(500, seed=9)
        np.testing.assert_array_equal(a.x, b.x)
        np.testing.assert_array_equal(a.band, b.band)

    def test_bump_drops_empty_corners(self):
        ensemble = build_initial(get_scenario("bump3d")).sample(4000, seed=1)
        assert 0 < ensemble.size < 4000
        assert np.all(ensemble.f0_value > 1e-12)

    def test_invalid_count(self, landau_scenario):
        with pytest.raises(ConfigurationError):
            build_initial(landau_scenario).sample(0, seed=1)

    def test_landau_mass(self, landau_scenario):
        ensemble = build_initial(landau_scenario).sample(40_000, seed=2)
        assert ensemble.total_mass() == pytest.approx(analytic_mass(landau_scenario), rel=1e-3)

    @pytest.mark.slow
    def test_bump_mass_and_kinetic(self):
        scenario = get_scenario("bump3d")
        ensemble = build_initial(scenario).sample(100_000, seed=2)
        assert ensemble.total_mass() == pytest.approx(analytic_mass(scenario), rel=1e-2)
        kinetic = float(np.sum(ensemble.w * np.sum(ensemble.v ** 2, axis=1)))
        assert kinetic == pytest.approx(analytic_kinetic(scenario), rel=2e-2)

    def test_phase_grid_landau(self, landau_scenario):
        state = build_initial(landau_scenario).phase_grid(32, 65)
        assert state.f.shape == (32, 65)
        assert state.mass() == pytest.approx(4 * math.pi, rel=1e-8)

    def test_phase_grid_rejects_bump(self):
        with pytest.raises(ConfigurationError):
            build_initial(get_scenario("bump3d")).phase_grid(16, 17)

    def test_two_stream_kinetic(self):
        scenario = get_scenario("two_stream")
        state = build_initial(scenario).phase_grid(64, 257)
        kinetic = state.integrate(state.f * state.v[None, :] ** 2)
        assert kinetic == pytest.approx(analytic_kinetic(scenario), rel=1e-6)


class TestBackground:
    """Test background densities."""

    def test_disc_normalized(self):
        scenario = get_scenario("bump2d_disc")
        grid = scenario.field_grid(32)
        rho_b = background_grid(scenario, grid, 2.5)
        assert rho_b.shape == grid.shape
        assert np.sum(rho_b) * grid.cell_volume == pytest.approx(2.5, rel=1e-12)
        assert rho_b[16, 16] > 0.0 and rho_b[0, 0] == 0.0

    def test_none_without_background(self, landau_scenario):
        assert background_grid(landau_scenario, landau_scenario.field_grid(16), 1.0) is None

    def test_unknown_shape(self):
        scenario = get_scenario("bump2d_disc")
        scenario.background = {"shape": "ring", "radius": 1.0}
        with pytest.raises(ConfigurationError):
            background_grid(scenario, scenario.field_grid(16), 1.0)


# ── Truncation ────────────────────────────────────────────────────────


class TestTruncation:
    """Test the truncated initial data and its energy profile."""

    def test_bounded_and_supported(self, landau_scenario, rng):
        f0 = build_initial(landau_scenario).evaluate
        truncated = truncate_initial(lambda x, v: 10.0 * f0(x, v), 2.0)
        x = rng.uniform(-4, 4, size=(1000, 1))
        v = rng.uniform(-4, 4, size=(1000, 1))
        values = truncated(x, v)
        assert np.all(values <= 2.0)
        outside = (x[:, 0] ** 2 + v[:, 0] ** 2) >= 4.0
        assert np.all(values[outside] == 0.0)
        inside = ~outside & (10.0 * f0(x, v) <= 2.0)
        np.testing.assert_array_equal(values[inside], 10.0 * f0(x, v)[inside])

    def test_invalid_level(self, landau_scenario):
        with pytest.raises(InputError):
            truncate_initial(build_initial(landau_scenario).evaluate, 0.5)

    def test_profile_monotone(self, landau_scenario):
        profile = truncation_energy_profile(build_initial(landau_scenario),
                                            [1, 2, 4, 8, 16, 32], samples=1 << 12)
        energies = [e for _, e in profile]
        assert [n for n, _ in profile] == [1.0, 2.0, 4.0, 8.0, 16.0, 32.0]
        assert all(b >= a for a, b in zip(energies, energies[1:]))
        assert energies[-1] == pytest.approx(analytic_kinetic(landau_scenario), rel=1e-2)
