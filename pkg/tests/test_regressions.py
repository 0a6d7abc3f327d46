"""
Regression tests for bugs fixed during development.

Each class reproduces one defect and pins the fixed behavior.
"""

import math

import numpy as np
import pytest

from vlasov_flow.errors import ConfigurationError, InputError
from vlasov_flow.engine.compactify import CertificateSeries
from vlasov_flow.engine.fields import FieldSolver
from vlasov_flow.engine.flow import PicField, run
from vlasov_flow.utils.config import RunConfig, config_hash, ensure_output_dirs, with_overrides
from vlasov_flow.utils.scenarios import build_initial
from vlasov_flow.utils.snapshots import read_arrays, write_arrays


@pytest.mark.tdd
class TestResolutionOnLandauGrid:
    """mollify_n = 4 on a 32-cell Landau torus has 1/n below the cell size."""

    def test_rejected(self, landau_scenario):
        spacing = landau_scenario.field_grid(32).spacing
        assert spacing == pytest.approx(4 * math.pi / 32)
        with pytest.raises(ConfigurationError):
            RunConfig(mollify_n=4.0).validate(spacing)
        RunConfig(mollify_n=2.0).validate(spacing)


@pytest.mark.tdd
class TestCorruptHeader:
    """A snapshot cut inside its header raised struct.error instead of InputError."""

    def test_short_file(self, tmp_path):
        path = write_arrays(tmp_path / "s.bin", {"kind": "grid"}, {"a": np.ones(3)})
        path.write_bytes(path.read_bytes()[:10])
        with pytest.raises(InputError, match="corrupt header"):
            read_arrays(path)

    def test_garbled_json(self, tmp_path):
        path = write_arrays(tmp_path / "s.bin", {"kind": "grid"}, {})
        raw = bytearray(path.read_bytes())
        raw[17] = ord("}")
        path.write_bytes(bytes(raw))
        with pytest.raises(InputError):
            read_arrays(path)


@pytest.mark.tdd
class TestHashIndependentOfOutput:
    """Identical runs in different directories produced different diagnostics headers."""

    def test_out_excluded(self, small_config):
        assert config_hash(small_config) == config_hash(with_overrides(small_config, out="x"))


@pytest.mark.tdd
class TestCertificateOnResume:
    """Resuming with a continued series must not sample the start time twice."""

    def test_single_sample_per_time(self, landau_scenario):
        ensemble = build_initial(landau_scenario).sample(500, seed=3)
        solver = FieldSolver(landau_scenario.field_grid(32), landau_scenario.kernel_spec(2.0))
        series = CertificateSeries()
        run(ensemble, PicField(solver), 0.1, 0.2, certificate=series)
        run(ensemble, PicField(solver), 0.1, 0.4, certificate=series)
        assert len(series.times) == 5
        assert len(set(series.times)) == 5


@pytest.mark.tdd
class TestOutputDirsIdempotent:
    """Re-running into an existing run directory must not fail."""

    def test_existing_layout(self, tmp_project_dir):
        assert ensure_output_dirs(tmp_project_dir) == tmp_project_dir
        assert (tmp_project_dir / "checkpoints").is_dir()
