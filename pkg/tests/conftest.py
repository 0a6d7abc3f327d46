"""
Shared test fixtures for VlasovFlow.

Provides common setup: temporary run directories, small configurations,
scenarios, frozen fields and prebuilt compactification profiles.
"""

import sys
from pathlib import Path

import numpy as np
import pytest

# Ensure `src/` package layout resolves when running tests from repo root.
SRC_PATH = Path(__file__).resolve().parents[1] / "src"
if str(SRC_PATH) not in sys.path:
    sys.path.insert(0, str(SRC_PATH))


@pytest.fixture
def tmp_project_dir(tmp_path):
    """Create a temporary run directory with the standard structure."""
    dirs = ["checkpoints", "snapshots", "logs"]
    for d in dirs:
        (tmp_path / d).mkdir()
    return tmp_path


@pytest.fixture(autouse=True)
def isolated_home(monkeypatch, tmp_path_factory):
    """Point the home directory at a temp dir so user overrides never leak in."""
    home = tmp_path_factory.mktemp("home")
    monkeypatch.setenv("HOME", str(home))
    monkeypatch.setattr(Path, "home", classmethod(lambda cls: home))
    import vlasov_flow.utils.scenarios as scenarios
    scenarios._scenarios_cache = None
    return home


@pytest.fixture
def small_config(tmp_path):
    """A RunConfig small enough for unit tests."""
    from vlasov_flow.utils.config import RunConfig
    return RunConfig(
        scenario="landau",
        dt=0.1,
        t_end=0.5,
        particles=2000,
        mollify_n=2.0,
        cadence=1,
        grid_cells=32,
        eulerian_nx=32,
        eulerian_nv=65,
        seed=7,
        out=str(tmp_path / "run"),
        logging_enabled=False,
    )


@pytest.fixture
def mock_hardware():
    """Return a fixed HardwareProfile for testing."""
    from vlasov_flow.utils.hardware_detect import HardwareProfile
    return HardwareProfile(
        ram_gb=16,
        cpu_count=4,
        machine="x86_64",
        tier=2,
        workers=1,
    )


@pytest.fixture
def landau_scenario():
    """The bundled weak Landau scenario."""
    from vlasov_flow.utils.scenarios import get_scenario
    return get_scenario("landau")


@pytest.fixture
def harmonic_field():
    """Frozen harmonic force E(x) = -x."""
    from vlasov_flow.engine.flow import FrozenField
    return FrozenField.harmonic(1.0)


@pytest.fixture(scope="session")
def power_profile():
    """Damped diffeomorphism for D(r) = min(1, 1/r); built once per session."""
    from vlasov_flow.engine.compactify import PowerDamping, build_profile
    return build_profile(PowerDamping(1.0))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def make_ensemble():
    """Factory: ensemble from positions and velocities (unit weights, f0 = 0.5 by default)."""
    from vlasov_flow.engine.flow import ParticleEnsemble

    def factory(x, v, w=None, f0=None, seed=0):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        v = np.atleast_2d(np.asarray(v, dtype=float))
        n = x.shape[0]
        w = np.full(n, 1.0) if w is None else np.asarray(w, dtype=float)
        f0 = np.full(n, 0.5) if f0 is None else np.asarray(f0, dtype=float)
        return ParticleEnsemble.from_samples(x, v, w, f0, seed=seed)
    return factory
