"""
VlasovFlow Snapshots
Flat-binary checkpoints and grid snapshots, diagnostics CSV and gnuplot scripts.

Binary layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON header,
then the arrays listed in header["arrays"] as raw little-endian bytes in that order.
"""

import csv
import json
import logging
import math
import struct
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from vlasov_flow.engine.diagnostics import DiagnosticsRecord
from vlasov_flow.engine.eulerian import PhaseGridFunction
from vlasov_flow.engine.fields import EffectiveMassLedger, FieldState, Grid
from vlasov_flow.engine.flow import ParticleEnsemble
from vlasov_flow.engine.kernels import KernelSpec
from vlasov_flow.errors import InputError

log = logging.getLogger("VlasovFlow")

MAGIC = b"VLFLOW01"
FORMAT_VERSION = 1

KIND_ENSEMBLE = "ensemble"
KIND_GRID = "grid"
KIND_PHASE_GRID = "phase_grid"

_ENSEMBLE_ARRAYS = ("x", "v", "w", "f0_value", "band", "status", "t_plus", "t_minus", "ids")


# ── Flat binary ─────────────────────────────────────────────────────────


def write_arrays(path: Path, header: dict[str, Any], arrays: dict[str, np.ndarray]) -> Path:
    """Write a JSON header and named arrays; the header gains an "arrays" table."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table = []
    payload = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dtype = arr.dtype.newbyteorder("<")
        table.append({"name": name, "dtype": dtype.str, "shape": list(arr.shape)})
        payload.append(arr.astype(dtype, copy=False).tobytes())

    full = dict(header, format_version=FORMAT_VERSION, arrays=table)
    encoded = json.dumps(full, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(encoded)))
        f.write(encoded)
        for chunk in payload:
            f.write(chunk)
    log.debug("Wrote %s (%s arrays)", path, len(table))
    return path


def read_arrays(path: Path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    """
    Read a file written by write_arrays.

    Raises:
        InputError: On a missing file, wrong magic or truncated payload
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise InputError(f"Cannot read snapshot {path}: {e}") from e
    if raw[:len(MAGIC)] != MAGIC:
        raise InputError(f"{path} is not a VlasovFlow snapshot")

    offset = len(MAGIC)
    try:
        (length,) = struct.unpack_from("<Q", raw, offset)
        offset += 8
        header = json.loads(raw[offset:offset + length].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise InputError(f"{path} has a corrupt header: {e}") from e
    offset += length

    arrays: dict[str, np.ndarray] = {}
    for entry in header.get("arrays", []):
        try:
            dtype = np.dtype(entry["dtype"])
            shape = tuple(int(s) for s in entry["shape"])
        except (KeyError, TypeError, ValueError) as e:
            raise InputError(f"{path} has a malformed array entry: {e}") from e
        if dtype.hasobject or any(s < 0 for s in shape):
            raise InputError(f"{path} has an invalid array entry {entry.get('name')!r}")
        nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(raw):
            raise InputError(f"{path} is truncated at array {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(raw, dtype=dtype, count=nbytes // dtype.itemsize,
                                              offset=offset).reshape(shape).copy()
        offset += nbytes
    return header, arrays


def _expect_kind(header: dict, kind: str, path: Path):
    if header.get("kind") != kind:
        raise InputError(f"{path} holds {header.get('kind')!r}, expected {kind!r}")


# ── Ensemble checkpoints ────────────────────────────────────────────────


def save_ensemble(path: Path, ensemble: ParticleEnsemble,
                  meta: Optional[dict[str, Any]] = None,
                  extra: Optional[dict[str, np.ndarray]] = None) -> Path:
    """
    Checkpoint an ensemble, including the cached force so restarts are bitwise exact.

    Args:
        path: Output file
        ensemble: Particles to store
        meta: Extra header entries (config hash, kernel, scenario)
        extra: Extra named arrays stored after the ensemble (e.g. certificate samples)
    """
    arrays = {name: getattr(ensemble, name) for name in _ENSEMBLE_ARRAYS}
    for name, arr in (extra or {}).items():
        arrays[f"extra_{name}"] = arr
    if ensemble.accel_cache is not None:
        arrays["accel_cache"] = ensemble.accel_cache
    header = dict(meta or {}, kind=KIND_ENSEMBLE, t=ensemble.t, step=ensemble.step,
                  band_offset=ensemble.band_offset)
    return write_arrays(path, header, arrays)


def load_ensemble(path: Path) -> tuple[ParticleEnsemble, dict[str, Any], dict[str, np.ndarray]]:
    """
    Returns:
        (ensemble, header, extra arrays by name)
    """
    header, arrays = read_arrays(path)
    _expect_kind(header, KIND_ENSEMBLE, path)
    ensemble = ParticleEnsemble(
        **{name: arrays[name] for name in _ENSEMBLE_ARRAYS},
        t=float(header["t"]),
        step=int(header["step"]),
        band_offset=float(header["band_offset"]),
        accel_cache=arrays.get("accel_cache"),
    )
    extras = {k[6:]: v for k, v in arrays.items() if k.startswith("extra_")}
    return ensemble, header, extras


# ── Grid snapshots ──────────────────────────────────────────────────────


def save_grid_snapshot(path: Path, state: FieldState, t: float,
                       meta: Optional[dict[str, Any]] = None) -> Path:
    header = dict(meta or {}, kind=KIND_GRID, t=t, grid=state.grid.to_header(),
                  kernel=state.spec.to_header())
    arrays = {"rho": state.rho, "E": state.E}
    if state.background is not None:
        arrays["background"] = state.background
    return write_arrays(path, header, arrays)


def load_grid_snapshot(path: Path) -> tuple[FieldState, dict[str, Any]]:
    header, arrays = read_arrays(path)
    _expect_kind(header, KIND_GRID, path)
    state = FieldState(
        grid=Grid.from_header(header["grid"]),
        rho=arrays["rho"],
        E=arrays["E"],
        spec=KernelSpec.from_header(header["kernel"]),
        background=arrays.get("background"),
    )
    return state, header


def save_phase_grid(path: Path, state: PhaseGridFunction,
                    meta: Optional[dict[str, Any]] = None) -> Path:
    header = dict(meta or {}, kind=KIND_PHASE_GRID, clamped_mass=state.clamped_mass,
                  **state.to_header())
    arrays = {"f": state.f}
    if state.E is not None:
        arrays["E"] = np.asarray(state.E)
    return write_arrays(path, header, arrays)


def load_phase_grid(path: Path) -> tuple[PhaseGridFunction, dict[str, Any]]:
    header, arrays = read_arrays(path)
    _expect_kind(header, KIND_PHASE_GRID, path)
    kernel = header.get("kernel")
    state = PhaseGridFunction(
        f=arrays["f"],
        length=float(header["length"]),
        vmax=float(header["vmax"]),
        x0=float(header["x0"]),
        t=float(header["t"]),
        E=arrays.get("E"),
        spec=None if kernel is None else KernelSpec.from_header(kernel),
        clamped_mass=float(header.get("clamped_mass", 0.0)),
    )
    return state, header


def write_grid_csv(path: Path, state: FieldState, config_hash: str) -> Path:
    """Node coordinates, rho and E components for 1D and 2D grids."""
    grid = state.grid
    if grid.d > 2:
        raise InputError("Grid CSV export supports d <= 2")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    coords = ["x", "y"][:grid.d]
    nodes = grid.nodes().reshape(-1, grid.d)
    rho = state.rho.reshape(-1)
    E = state.E.reshape(-1, grid.d)
    with open(path, "w", newline="", encoding="utf-8") as f:
        f.write(f"# config_hash: {config_hash}\n")
        f.write(f"# kernel: {state.spec.describe()}\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(coords + ["rho"] + [f"E_{c}" for c in coords])
        for i in range(rho.size):
            writer.writerow([_fmt(val) for val in (*nodes[i], rho[i], *E[i])])
    return path


# ── Diagnostics CSV ─────────────────────────────────────────────────────


BASE_COLUMNS = (
    "t", "mass_total", "kinetic", "potential_H", "potential_E2", "total_energy",
    "noblowup_partial", "phi_sep", "active_mass", "escaped_v_mass", "escaped_x_mass",
)


def _fmt(value: Optional[float]) -> str:
    if value is None:
        return ""
    value = float(value)
    if math.isnan(value):
        return "nan"
    return repr(value)


def diagnostics_columns(record: DiagnosticsRecord) -> list[str]:
    """Fixed schema for a run, taken from its first record."""
    columns = list(BASE_COLUMNS)
    columns += [f"casimir_{cid}" for cid in record.casimir_values]
    columns += [f"band_{k}" for k in sorted(record.mass_per_band)]
    return columns


def _row(record: DiagnosticsRecord, columns: Sequence[str]) -> list[str]:
    ledger = record.ledger
    values: dict[str, Optional[float]] = {
        "t": record.t,
        "mass_total": record.mass_total,
        "kinetic": record.kinetic,
        "potential_H": record.potential_H,
        "potential_E2": record.potential_E2,
        "total_energy": record.total_energy,
        "noblowup_partial": record.noblowup_partial,
        "phi_sep": record.phi_sep,
        "active_mass": None if ledger is None else ledger.active_mass,
        "escaped_v_mass": None if ledger is None else ledger.escaped_v_mass,
        "escaped_x_mass": None if ledger is None else ledger.escaped_x_mass,
    }
    for cid, val in record.casimir_values.items():
        values[f"casimir_{cid}"] = val
    for k, val in record.mass_per_band.items():
        values[f"band_{k}"] = val
    return [_fmt(values.get(c)) for c in columns]


def write_diagnostics_csv(path: Path, records: Sequence[DiagnosticsRecord], config_hash: str,
                          kernel: Optional[KernelSpec] = None,
                          extra: Optional[dict[str, Any]] = None) -> Path:
    """One row per output time; comment lines carry the config hash and kernel spec."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = diagnostics_columns(records[0]) if records else list(BASE_COLUMNS)
    with open(path, "w", newline="", encoding="utf-8") as f:
        f.write(f"# config_hash: {config_hash}\n")
        f.write(f"# kernel: {'none' if kernel is None else kernel.describe()}\n")
        for key, value in sorted((extra or {}).items()):
            f.write(f"# {key}: {json.dumps(value, sort_keys=True)}\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        for record in records:
            writer.writerow(_row(record, columns))
    log.debug("Wrote %s diagnostics rows to %s", len(records), path)
    return path


def read_diagnostics_csv(path: Path) -> tuple[dict[str, str], list[dict[str, Optional[float]]]]:
    """
    Returns:
        (comment metadata, rows with floats; empty cells become None)
    """
    meta: dict[str, str] = {}
    lines = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.startswith("#"):
                key, _, value = line[1:].partition(":")
                meta[key.strip()] = value.strip()
            else:
                lines.append(line)
    rows = []
    for raw in csv.DictReader(lines):
        rows.append({k: (float(v) if v != "" else None) for k, v in raw.items()})
    return meta, rows


def records_from_rows(rows: Sequence[dict[str, Optional[float]]]) -> list[DiagnosticsRecord]:
    """Rebuild records from diagnostics CSV rows."""
    records = []
    for row in rows:
        ledger = None
        if row.get("active_mass") is not None:
            ledger = EffectiveMassLedger(
                total_initial_mass=row["mass_total"],
                active_mass=row["active_mass"],
                escaped_v_mass=row["escaped_v_mass"],
                escaped_x_mass=row["escaped_x_mass"],
            )
        records.append(DiagnosticsRecord(
            t=row["t"],
            mass_total=row["mass_total"],
            mass_per_band={int(k[5:]): v for k, v in row.items() if k.startswith("band_")},
            kinetic=row["kinetic"],
            potential_H=row.get("potential_H"),
            potential_E2=row.get("potential_E2"),
            total_energy=row["total_energy"],
            casimir_values={k[8:]: v for k, v in row.items() if k.startswith("casimir_")},
            noblowup_partial=row.get("noblowup_partial") or 0.0,
            phi_sep=row.get("phi_sep"),
            ledger=ledger,
        ))
    return records


# ── Plot scripts ────────────────────────────────────────────────────────


def write_gnuplot_script(csv_path: Path, columns: Sequence[str],
                         y_columns: Sequence[str] = ("kinetic", "total_energy"),
                         logscale: bool = False) -> Path:
    """Emit a gnuplot script next to a diagnostics CSV plotting y_columns against t."""
    csv_path = Path(csv_path)
    script = csv_path.with_suffix(".gp")
    index = {name: i + 1 for i, name in enumerate(columns)}
    plots = [
        f"'{csv_path.name}' using {index['t']}:{index[c]} with lines title '{c}'"
        for c in y_columns if c in index
    ]
    lines = [
        "set datafile separator ','",
        "set datafile commentschars '#'",
        "set key autotitle columnhead",
        "set xlabel 't'",
        "set terminal pngcairo size 1000,600",
        f"set output '{csv_path.stem}.png'",
    ]
    if logscale:
        lines.append("set logscale y")
    lines.append("plot " + ", \\\n     ".join(plots))
    script.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return script
