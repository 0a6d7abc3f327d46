"""
Tests for binary checkpoints, grid snapshots, diagnostics CSV and plot scripts.
"""

import json
import struct

import numpy as np
import pytest

from vlasov_flow.errors import InputError
from vlasov_flow.engine.diagnostics import DiagnosticsRecord
from vlasov_flow.engine.fields import EffectiveMassLedger, FieldSolver, Grid, deposit
from vlasov_flow.engine.kernels import KernelSpec
from vlasov_flow.utils.scenarios import build_initial
from vlasov_flow.utils.snapshots import (
    BASE_COLUMNS,
    MAGIC,
    diagnostics_columns,
    load_ensemble,
    load_grid_snapshot,
    load_phase_grid,
    read_arrays,
    read_diagnostics_csv,
    records_from_rows,
    save_ensemble,
    save_grid_snapshot,
    save_phase_grid,
    write_arrays,
    write_diagnostics_csv,
    write_gnuplot_script,
    write_grid_csv,
)


def _record(t, **kwargs):
    base = dict(
        t=t, mass_total=2.0, mass_per_band={0: 1.5, 1: 0.5}, kinetic=0.25 * t,
        potential_E2=0.1, total_energy=0.1 + 0.25 * t,
        casimir_values={"identity": 2.0, "square": 0.75},
        ledger=EffectiveMassLedger(2.0, 2.0, 0.0, 0.0),
    )
    base.update(kwargs)
    return DiagnosticsRecord(**base)


# ── Flat binary ───────────────────────────────────────────────────────


class TestFlatBinary:
    """Test the raw array container."""

    def test_arrays_preserved(self, tmp_path, rng):
        arrays = {"a": rng.random((3, 4)), "b": np.arange(5, dtype=np.int64),
                  "c": np.array([1, 0, 2], dtype=np.int8)}
        header, back = read_arrays(write_arrays(tmp_path / "f.bin", {"kind": "test"}, arrays))
        assert header["kind"] == "test"
        for name, arr in arrays.items():
            np.testing.assert_array_equal(back[name], arr)
            assert back[name].dtype == arr.dtype
        back["a"][0, 0] = 5.0

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "f.bin"
        path.write_bytes(b"NOTAFILE" + bytes(16))
        with pytest.raises(InputError):
            read_arrays(path)

    def test_truncated_payload(self, tmp_path):
        path = write_arrays(tmp_path / "f.bin", {}, {"a": np.zeros(100)})
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(InputError, match="truncated"):
            read_arrays(path)

    def test_truncated_header(self, tmp_path):
        path = write_arrays(tmp_path / "f.bin", {"kind": "x"}, {})
        path.write_bytes(path.read_bytes()[:12])
        with pytest.raises(InputError):
            read_arrays(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(InputError):
            read_arrays(tmp_path / "absent.bin")

    @pytest.mark.parametrize("entry", [
        {"name": "a", "dtype": "|O", "shape": [1]},
        {"name": "a", "dtype": "<f8", "shape": [-1]},
        {"name": "a", "dtype": "not-a-dtype", "shape": [1]},
        {"name": "a", "shape": [1]},
    ])
    def test_invalid_array_entry(self, tmp_path, entry):
        encoded = json.dumps({"arrays": [entry]}).encode("utf-8")
        path = tmp_path / "f.bin"
        path.write_bytes(MAGIC + struct.pack("<Q", len(encoded)) + encoded + bytes(64))
        with pytest.raises(InputError):
            read_arrays(path)


class TestCheckpoints:
    """Test ensemble, field-grid and phase-grid snapshots."""

    def test_ensemble(self, tmp_path, landau_scenario):
        ensemble = build_initial(landau_scenario).sample(300, seed=4)
        ensemble.t, ensemble.step = 1.5, 15
        ensemble.accel_cache = np.ones_like(ensemble.x)
        path = save_ensemble(tmp_path / "c.bin", ensemble, meta={"config_hash": "abc"},
                             extra={"cert_times": np.array([0.0, 1.5])})
        loaded, header, extras = load_ensemble(path)
        assert header["config_hash"] == "abc"
        assert (loaded.t, loaded.step, loaded.band_offset) == (1.5, 15, ensemble.band_offset)
        for name in ("x", "v", "w", "f0_value", "band", "status", "ids", "accel_cache"):
            np.testing.assert_array_equal(getattr(loaded, name), getattr(ensemble, name))
        np.testing.assert_array_equal(extras["cert_times"], [0.0, 1.5])

    def test_ensemble_without_cache(self, tmp_path, make_ensemble):
        loaded, _, extras = load_ensemble(save_ensemble(tmp_path / "c.bin",
                                                        make_ensemble([[0.0]], [[1.0]])))
        assert loaded.accel_cache is None
        assert extras == {}

    def test_wrong_kind(self, tmp_path):
        path = write_arrays(tmp_path / "f.bin", {"kind": "grid"}, {})
        with pytest.raises(InputError, match="expected"):
            load_ensemble(path)

    def test_grid_snapshot(self, tmp_path, landau_scenario):
        ensemble = build_initial(landau_scenario).sample(500, seed=1)
        grid = landau_scenario.field_grid(32)
        solver = FieldSolver(grid, landau_scenario.kernel_spec(2.0))
        state = solver.state(deposit(ensemble, grid).rho)
        loaded, header = load_grid_snapshot(save_grid_snapshot(tmp_path / "g.bin", state, 0.5))
        assert header["t"] == 0.5
        assert loaded.grid == grid
        assert loaded.spec == state.spec
        np.testing.assert_array_equal(loaded.rho, state.rho)
        np.testing.assert_array_equal(loaded.E, state.E)

    def test_phase_grid(self, tmp_path, landau_scenario):
        state = build_initial(landau_scenario).phase_grid(16, 33, spec=KernelSpec(d=1, n=2.0))
        state.t, state.E = 2.0, np.linspace(0, 1, 16)
        loaded, _ = load_phase_grid(save_phase_grid(tmp_path / "p.bin", state))
        assert loaded.same_grid(state)
        assert loaded.t == 2.0 and loaded.spec == state.spec
        np.testing.assert_array_equal(loaded.f, state.f)
        np.testing.assert_array_equal(loaded.E, state.E)

    def test_grid_csv(self, tmp_path):
        grid = Grid.centered(d=2, half_width=1.0, cells=2)
        solver = FieldSolver(grid, KernelSpec(d=2, n=1.0))
        rho = np.zeros(grid.shape)
        rho[1, 1] = 1.0
        path = write_grid_csv(tmp_path / "g.csv", solver.state(rho),
                              "hash123")
        lines = path.read_text().splitlines()
        assert lines[0] == "# config_hash: hash123"
        assert lines[1].startswith("# kernel: ")
        assert lines[2] == "x,y,rho,E_x,E_y"
        assert len(lines) == 3 + 9


# ── Diagnostics CSV ───────────────────────────────────────────────────


class TestDiagnosticsCsv:
    """Test the diagnostics table."""

    def test_columns(self):
        columns = diagnostics_columns(_record(0.0))
        assert columns[:len(BASE_COLUMNS)] == list(BASE_COLUMNS)
        assert columns[len(BASE_COLUMNS):] == ["casimir_identity", "casimir_square",
                                               "band_0", "band_1"]

    def test_header_metadata(self, tmp_path):
        path = write_diagnostics_csv(tmp_path / "d.csv", [_record(0.0)], "feed",
                                     kernel=KernelSpec(d=1, n=2.0), extra={"scenario": "landau"})
        meta, rows = read_diagnostics_csv(path)
        assert meta["config_hash"] == "feed"
        assert '"n": 2.0' in meta["kernel"]
        assert meta["scenario"] == '"landau"'
        assert len(rows) == 1

    def test_deterministic(self, tmp_path):
        records = [_record(t) for t in (0.0, 0.1, 0.2)]
        a = write_diagnostics_csv(tmp_path / "a.csv", records, "h")
        b = write_diagnostics_csv(tmp_path / "b.csv", records, "h")
        assert a.read_bytes() == b.read_bytes()

    def test_records_read_back(self, tmp_path):
        records = [_record(0.1), _record(0.2, potential_E2=None, phi_sep=0.3)]
        _, rows = read_diagnostics_csv(write_diagnostics_csv(tmp_path / "d.csv", records, "h"))
        back = records_from_rows(rows)
        assert back[0].t == 0.1 and back[0].kinetic == records[0].kinetic
        assert back[1].potential_E2 is None and back[1].potential_H is None
        assert back[1].phi_sep == 0.3
        assert back[0].mass_per_band == {0: 1.5, 1: 0.5}
        assert back[0].casimir_values == {"identity": 2.0, "square": 0.75}
        assert back[0].ledger.active_mass == 2.0

    def test_empty(self, tmp_path):
        path = write_diagnostics_csv(tmp_path / "d.csv", [], "h")
        assert path.read_text().splitlines()[-1] == ",".join(BASE_COLUMNS)

    def test_gnuplot_script(self, tmp_path):
        csv_path = write_diagnostics_csv(tmp_path / "d.csv", [_record(0.0)], "h")
        script = write_gnuplot_script(csv_path, diagnostics_columns(_record(0.0)),
                                      y_columns=("kinetic", "missing"), logscale=True)
        text = script.read_text()
        assert script.suffix == ".gp"
        assert "'d.csv' using 1:3 with lines title 'kinetic'" in text
        assert "missing" not in text
        assert "set logscale y" in text
