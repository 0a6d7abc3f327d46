"""
VlasovFlow Run Controller
Orchestrates Lagrangian and Eulerian runs, comparisons, diagnostics recomputation and
the kernel and compactification demos; turns library errors into RunResults.
"""

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np

from vlasov_flow.engine import compactify, diagnostics, eulerian, fields, flow, kernels
from vlasov_flow.errors import ConfigurationError, InputError, NumericalFaultError, VlasovFlowError
from vlasov_flow.utils.config import (
    RunConfig,
    config_hash,
    config_to_dict,
    ensure_output_dirs,
    get_output_path,
    save_config,
)
from vlasov_flow.utils.hardware_detect import HardwareProfile, detect_hardware
from vlasov_flow.utils.scenarios import Scenario, background_grid, build_initial, get_scenario
from vlasov_flow.utils import snapshots

log = logging.getLogger("VlasovFlow")

# Casimir densities recorded in every diagnostics file
CASIMIR_IDS = ("identity", "square", "arctan_weighted")

DIAGNOSTICS_FILE = "diagnostics.csv"
EULERIAN_DIAGNOSTICS_FILE = "diagnostics_eulerian.csv"
RECOMPUTED_DIAGNOSTICS_FILE = "diagnostics_recomputed.csv"
METADATA_FILE = "run.json"
FAILED_MARKER = "FAILED"

CHECKPOINT_SUFFIX = ".vfc"
GRID_SUFFIX = ".vfg"
PHASE_SUFFIX = ".vfp"


@dataclass
class RunResult:
    """Result from a controller operation."""
    success: bool
    message: str
    exit_code: int = 0
    error: Optional[str] = None
    metadata: dict[str, Any] = field(default_factory=dict)


def checkpoint_path(out: Path, step: int) -> Path:
    return Path(out) / "checkpoints" / f"step_{step:08d}{CHECKPOINT_SUFFIX}"


def latest_checkpoint(path: Path) -> Path:
    """A checkpoint file itself, or the highest-step checkpoint of a run directory."""
    path = Path(path)
    if path.is_file():
        return path
    found = sorted((path / "checkpoints").glob(f"step_*{CHECKPOINT_SUFFIX}"))
    if not found:
        raise InputError(f"No checkpoints under {path}")
    return found[-1]


class RunController:
    """
    Runs one configured scenario and writes its outputs.

    Every public operation returns a RunResult; library errors are logged, a FAILED
    marker is written next to the partial outputs and the error's exit code is returned.
    """

    def __init__(self, config: RunConfig, hardware: Optional[HardwareProfile] = None,
                 scenario: Optional[Scenario] = None):
        self.config = config
        self.hardware = hardware if hardware is not None else detect_hardware()
        self._scenario = scenario
        self.out = get_output_path(config)
        self.workers = config.workers or self.hardware.workers
        self.config_hash = config_hash(config)
        self._partial: dict[str, Any] = {}

    @property
    def scenario(self) -> Scenario:
        if self._scenario is None:
            self._scenario = get_scenario(self.config.scenario)
        return self._scenario

    # ── Plumbing ────────────────────────────────────────────────────────

    def _guard(self, name: str, operation: Callable[[], RunResult]) -> RunResult:
        started = time.time()
        ensure_output_dirs(self.out)
        marker = self.out / FAILED_MARKER
        if marker.exists():
            marker.unlink()
        save_config(self.config, self.out / "config.json")
        try:
            result = operation()
        except VlasovFlowError as e:
            log.error("%s failed: %s", name, e)
            result = RunResult(success=False, message=f"{name} failed", exit_code=e.exit_code,
                               error=str(e), metadata=dict(self._partial))
            if isinstance(e, NumericalFaultError):
                result.metadata.update(fault_step=e.step, fault_t=e.t)
        result.metadata.setdefault("operation", name)
        result.metadata["elapsed_s"] = round(time.time() - started, 3)
        self._write_metadata(result)
        if not result.success:
            marker.write_text(f"{result.error or result.message}\n", encoding="utf-8")
        return result

    def _write_metadata(self, result: RunResult):
        meta = {
            "success": result.success,
            "message": result.message,
            "error": result.error,
            "exit_code": result.exit_code,
            "config": config_to_dict(self.config),
            "config_hash": self.config_hash,
            "hardware": asdict(self.hardware),
            **result.metadata,
        }
        path = self.out / METADATA_FILE
        with open(path, "w", encoding="utf-8") as f:
            json.dump(meta, f, indent=2, sort_keys=True, default=_json_default)

    def _file_meta(self, spec: Optional[kernels.KernelSpec]) -> dict[str, Any]:
        return {
            "config_hash": self.config_hash,
            "kernel": None if spec is None else spec.to_header(),
            "scenario": self.scenario.to_header(),
        }

    def _grid(self) -> fields.Grid:
        return self.scenario.field_grid(self.config.grid_cells)

    # ── Lagrangian ──────────────────────────────────────────────────────

    def run_lagrangian(self, restart: Optional[Path] = None) -> RunResult:
        """Particle run with diagnostics, checkpoints and a final field snapshot."""
        return self._guard("run", lambda: self._run_lagrangian(restart))

    def _field_model(self, grid: fields.Grid, spec: kernels.KernelSpec, mass: float):
        if self.scenario.field_model == "zero":
            return flow.FrozenField.zero()
        background = background_grid(self.scenario, grid, mass)
        solver = fields.FieldSolver(grid, spec, background=background, workers=self.workers,
                                    track_mass=True)
        return flow.PicField(solver)

    def _run_lagrangian(self, restart: Optional[Path]) -> RunResult:
        cfg = self.config
        scenario = self.scenario
        grid = self._grid()
        cfg.validate(grid.spacing)
        spec = scenario.kernel_spec(cfg.mollify_n)
        direction = -1 if cfg.backward else 1

        series = compactify.CertificateSeries()
        previous: list[diagnostics.DiagnosticsRecord] = []
        if restart is not None:
            ensemble, header, extras = snapshots.load_ensemble(latest_checkpoint(restart))
            if header.get("kernel") != spec.to_header():
                raise ConfigurationError("Checkpoint kernel does not match the configured kernel")
            if "cert_times" in extras:
                series.times = extras["cert_times"].tolist()
                series.values = extras["cert_values"].tolist()
            previous = self._previous_records(ensemble.step)
            log.info("Restarting from step %s (t=%.6g)", ensemble.step, ensemble.t)
        else:
            ensemble = build_initial(scenario).sample(cfg.particles, cfg.seed)
        self._partial = {"scenario": scenario.name, "kernel": spec.to_header(),
                         "band_offset": ensemble.band_offset, "particles": ensemble.size}

        field_model = self._field_model(grid, spec, ensemble.total_mass())

        def observe(ens, model):
            return diagnostics.lagrangian_record(
                ens, model, scenario.sigma, CASIMIR_IDS, cfg.ledger_rx, cfg.ledger_rv,
                noblowup_partial=abs(series.partial()),
            )

        def checkpoint(ens):
            if cfg.checkpoint_every and ens.step % cfg.checkpoint_every == 0:
                self._save_checkpoint(ens, spec, series)

        collected: list[diagnostics.DiagnosticsRecord] = []
        try:
            outcome = flow.run(
                ensemble, field_model, cfg.dt, cfg.t_end, escape_radius=cfg.escape_radius,
                cadence=cfg.cadence, direction=direction, observer=observe,
                on_step=checkpoint, certificate=series, records=collected,
            )
        finally:
            # the restart record repeats the checkpoint step already in previous
            records = previous + (collected[1:] if restart is not None else collected)
            if records:
                self._write_diagnostics(DIAGNOSTICS_FILE, records, spec)

        self._save_checkpoint(ensemble, spec, series)
        state = getattr(field_model, "last_state", None)
        if state is not None:
            snapshots.save_grid_snapshot(self.out / "snapshots" / f"field_final{GRID_SUFFIX}",
                                         state, ensemble.t, meta=self._file_meta(spec))
            if grid.d <= 2:
                snapshots.write_grid_csv(self.out / "snapshots" / "field_final.csv", state,
                                         self.config_hash)

        report = diagnostics.energy_report(records, scenario.sigma)
        metadata = dict(
            self._partial,
            t_final=ensemble.t,
            steps=outcome.steps_taken,
            escaped=outcome.escaped,
            noblowup_certificate=abs(series.partial()),
            energy=_report_summary(report),
        )
        log.info("Run finished: t=%.6g, max energy drift %.3e", ensemble.t,
                 report.max_relative_drift)
        return RunResult(success=True, message="run complete", metadata=metadata)

    def _save_checkpoint(self, ensemble: flow.ParticleEnsemble, spec: kernels.KernelSpec,
                         series: compactify.CertificateSeries):
        path = checkpoint_path(self.out, ensemble.step)
        snapshots.save_ensemble(
            path, ensemble, meta=self._file_meta(spec),
            extra={"cert_times": np.asarray(series.times),
                   "cert_values": np.asarray(series.values)},
        )
        log.info("Checkpoint written: %s", path)

    def _previous_records(self, step: int) -> list[diagnostics.DiagnosticsRecord]:
        """Records of the run being continued, up to the checkpoint step and on cadence."""
        path = self.out / DIAGNOSTICS_FILE
        if not path.exists():
            return []
        _, rows = snapshots.read_diagnostics_csv(path)
        kept = []
        for record in snapshots.records_from_rows(rows):
            k = int(round(abs(record.t) / self.config.dt))
            if k <= step and k % self.config.cadence == 0:
                kept.append(record)
        return kept

    def _write_diagnostics(self, name: str, records, spec: Optional[kernels.KernelSpec]):
        path = snapshots.write_diagnostics_csv(
            self.out / name, records, self.config_hash, kernel=spec,
            extra={"scenario": self.scenario.name},
        )
        snapshots.write_gnuplot_script(path, snapshots.diagnostics_columns(records[0]))

    # ── Eulerian ────────────────────────────────────────────────────────

    def run_eulerian(self) -> RunResult:
        """Semi-Lagrangian phase-grid run (1D families)."""
        return self._guard("run-eulerian", self._run_eulerian)

    def _eulerian_field(self, spec: kernels.KernelSpec):
        if self.scenario.field_model == "zero":
            return eulerian.FrozenField1D.zero()
        return eulerian.EulerianPoisson(sigma=spec.sigma, n=spec.n, shape=spec.shape)

    def _run_eulerian(self) -> RunResult:
        cfg = self.config
        scenario = self.scenario
        defaults = scenario.defaults
        nx = cfg.eulerian_nx or int(defaults.get("eulerian_nx", 0))
        nv = cfg.eulerian_nv or int(defaults.get("eulerian_nv", 0))
        if nx < 4 or nv < 4:
            raise ConfigurationError(f"Scenario {scenario.name} has no phase-grid resolution")
        cfg.validate(scenario.length / nx)
        if cfg.backward:
            raise ConfigurationError("Backward runs are supported by the particle solver only")
        spec = scenario.kernel_spec(cfg.mollify_n)
        state = build_initial(scenario).phase_grid(nx, nv, spec=spec)
        self._partial = {"scenario": scenario.name, "kernel": spec.to_header(),
                         "phase_grid": [nx, nv]}

        collected: list[diagnostics.DiagnosticsRecord] = []
        try:
            outcome = eulerian.run_eulerian(
                state, self._eulerian_field(spec), cfg.dt, cfg.t_end, cadence=cfg.cadence,
                observer=lambda s: diagnostics.eulerian_record(s, scenario.sigma, CASIMIR_IDS),
                records=collected,
            )
        finally:
            if collected:
                self._write_diagnostics(EULERIAN_DIAGNOSTICS_FILE, collected, spec)

        for i, snap in enumerate(outcome.snapshots):
            snapshots.save_phase_grid(self.out / "snapshots" / f"phase_{i:06d}{PHASE_SUFFIX}",
                                      snap, meta=self._file_meta(spec))

        first, last = outcome.snapshots[0], outcome.final
        metadata = dict(
            self._partial,
            t_final=last.t,
            snapshots=len(outcome.snapshots),
            mass_drift=abs(last.mass() - first.mass()) / max(first.mass(), 1e-300),
            clamped_mass=last.clamped_mass,
            renorm_residual=self._default_residual(outcome.snapshots),
        )
        return RunResult(success=True, message="eulerian run complete", metadata=metadata)

    def _default_residual(self, snaps) -> float:
        first = snaps[0]
        test = diagnostics.SmoothTestFunction(k=2.0 * math.pi / first.length,
                                              v_width=0.5 * first.vmax)
        return diagnostics.renorm_residual(snaps, "arctan", test)

    # ── Compare ─────────────────────────────────────────────────────────

    def compare(self, lagrangian: Path, eulerian_run: Path) -> RunResult:
        """L1 distance between a particle checkpoint and the phase-grid snapshot at its time."""
        return self._guard("compare", lambda: self._compare(lagrangian, eulerian_run))

    def _compare(self, lagrangian: Path, eulerian_run: Path) -> RunResult:
        ensemble, header, _ = snapshots.load_ensemble(latest_checkpoint(lagrangian))
        spec = None if header.get("kernel") is None else kernels.KernelSpec.from_header(
            header["kernel"])
        state = _phase_snapshot_at(Path(eulerian_run), ensemble.t)
        distance = eulerian.cross_validate(ensemble, state, spec=spec)
        metadata = {"t": ensemble.t, "l1_distance": distance, "particles": ensemble.size,
                    "phase_grid": [state.nx, state.nv]}
        with open(self.out / "compare.json", "w", encoding="utf-8") as f:
            json.dump(metadata, f, indent=2, sort_keys=True)
        log.info("Cross-validation at t=%.6g: L1 distance %.6e", ensemble.t, distance)
        return RunResult(success=True, message="comparison complete", metadata=metadata)

    # ── Diagnose ────────────────────────────────────────────────────────

    def diagnose(self, run_dir: Path) -> RunResult:
        """Recompute diagnostics from the checkpoints (and phase snapshots) of a run."""
        return self._guard("diagnose", lambda: self._diagnose(Path(run_dir)))

    def _diagnose(self, run_dir: Path) -> RunResult:
        cfg = self.config
        scenario = self.scenario
        metadata: dict[str, Any] = {"run_dir": str(run_dir)}
        records = []
        spec = None
        for path in sorted((run_dir / "checkpoints").glob(f"step_*{CHECKPOINT_SUFFIX}")):
            ensemble, header, extras = snapshots.load_ensemble(path)
            spec = kernels.KernelSpec.from_header(header["kernel"])
            grid = self._grid()
            model = self._field_model(grid, spec, ensemble.total_mass())
            ensemble.accel_cache = None
            model.accel(ensemble)
            series = compactify.CertificateSeries(
                times=extras.get("cert_times", np.array([])).tolist(),
                values=extras.get("cert_values", np.array([])).tolist(),
            )
            records.append(diagnostics.lagrangian_record(
                ensemble, model, scenario.sigma, CASIMIR_IDS, cfg.ledger_rx, cfg.ledger_rv,
                noblowup_partial=abs(series.partial()),
            ))

        if records:
            self._write_diagnostics(RECOMPUTED_DIAGNOSTICS_FILE, records, spec)
            metadata["energy"] = _report_summary(diagnostics.energy_report(records, scenario.sigma))
            metadata["checkpoints"] = len(records)

        phase_files = sorted((run_dir / "snapshots").glob(f"phase_*{PHASE_SUFFIX}"))
        if phase_files:
            snaps = [snapshots.load_phase_grid(p)[0] for p in phase_files]
            metadata["renorm_residual"] = self._default_residual(snaps)
            metadata["casimir_square"] = [diagnostics.casimir(s, "square") for s in snaps]

        if not records and not phase_files:
            raise InputError(f"No checkpoints or phase snapshots under {run_dir}")
        return RunResult(success=True, message="diagnostics recomputed", metadata=metadata)

    # ── Compactification demo ───────────────────────────────────────────

    def compactify_demo(self, t_end: float = 5.0, dt: float = 1e-3) -> RunResult:
        """Blow-up field x'' = x (1 + x^2) carried to the north pole of the sphere."""
        return self._guard("compactify-demo", lambda: self._compactify_demo(t_end, dt))

    def _compactify_demo(self, t_end: float, dt: float) -> RunResult:
        profile = compactify.build_profile(compactify.PowerDamping(1.0))
        profile.export_csv(self.out / "profile.csv")

        rng = np.random.default_rng(self.config.seed)
        samples = rng.standard_normal((2000, 2)) * np.exp(rng.uniform(-2.0, 6.0, (2000, 1)))
        report = compactify.gradient_bound_check(profile, samples)

        def blowup(z):
            x, v = z[..., :1], z[..., 1:]
            return np.concatenate([v, x * (1.0 + x * x)], axis=-1)

        traj = compactify.integrate_on_sphere(np.array([1.0, 0.0]), blowup, profile, dt, t_end)
        path = self.out / "sphere_trajectory.csv"
        with open(path, "w", encoding="utf-8") as f:
            f.write(f"# config_hash: {self.config_hash}\n")
            f.write("t,y0,y1,y2,tau\n")
            for t, y in zip(traj.times, traj.points):
                tau = float(compactify.distance_to_north(y))
                f.write(",".join(repr(float(v)) for v in (t, *y, tau)) + "\n")

        metadata = {
            "gradient_check": {"passed": report.passed, "samples": report.samples,
                               "max_global_ratio": report.max_global_ratio,
                               "max_decay_ratio": report.max_decay_ratio},
            "reached_north": traj.reached_north,
            "arrival_time": traj.arrival_time,
            "rejections": traj.rejections,
            "profile": {"c0": profile.c0, "r0": profile.r0, "r_max": profile.r_max},
        }
        success = report.passed
        return RunResult(success=success, exit_code=0 if success else 5,
                         message="compactification demo complete" if success
                         else "gradient bound check failed", metadata=metadata)

    # ── Kernel check ────────────────────────────────────────────────────

    def kernel_check(self, flux_tol: float = 1e-6, outside_tol: float = 1e-8) -> RunResult:
        """Flux oracles for K and K_n in d = 1, 2, 3, plus kernel table export."""
        return self._guard("kernel-check", lambda: self._kernel_check(flux_tol, outside_tol))

    def _kernel_check(self, flux_tol: float, outside_tol: float) -> RunResult:
        n = self.config.mollify_n if math.isfinite(self.config.mollify_n) else 4.0
        rng = np.random.default_rng(self.config.seed)
        checks: dict[str, Any] = {}
        passed = True
        for d in kernels.SUPPORTED_DIMENSIONS:
            for sigma in (1, -1):
                exact = kernels.KernelSpec(d=d, sigma=sigma)
                moll = kernels.KernelSpec(d=d, sigma=sigma, n=n)
                flux_errors = [
                    abs(kernels.sphere_flux(lambda p: kernels.poisson_kernel(p, exact), d, r)
                        - sigma) for r in (0.5, 1.0, 2.0)
                ]
                flux_errors.append(abs(kernels.sphere_flux(
                    lambda p: kernels.mollified_kernel(p, moll), d, 2.0 / n) - sigma))
                # inside the mollification radius the flux is the enclosed bump mass
                inner = abs(kernels.sphere_flux(
                    lambda p: kernels.mollified_kernel(p, moll), d, 0.5 / n)
                    - sigma * float(kernels.enclosed_mass(0.5, d, moll.shape)))
                pts = rng.standard_normal((1000, d))
                pts *= ((1.0 + 1e-9) / n + rng.exponential(1.0, (1000, 1))) \
                    / np.linalg.norm(pts, axis=1, keepdims=True)
                outside = float(np.max(np.abs(kernels.mollified_kernel(pts, moll)
                                              - kernels.poisson_kernel(pts, exact))))
                ok = max(flux_errors) <= flux_tol and inner <= flux_tol and outside <= outside_tol
                passed &= ok
                checks[f"d{d}_sigma{sigma:+d}"] = {"flux_error": max(flux_errors),
                                                   "inner_flux_error": inner,
                                                   "outside_error": outside, "passed": ok}
            kernels.export_table_csv(kernels.KernelSpec(d=d, sigma=1, n=n),
                                     self.out / f"kernel_table_d{d}.csv")

        message = "kernel checks passed" if passed else "kernel checks failed"
        log.info("%s (n=%s)", message, n)
        return RunResult(success=passed, message=message, exit_code=0 if passed else 5,
                         metadata={"checks": checks, "mollify_n": n})


# ── Helpers ─────────────────────────────────────────────────────────────


def _phase_snapshot_at(path: Path, t: float, tol: float = 1e-9) -> eulerian.PhaseGridFunction:
    """The phase snapshot of a run directory (or file) whose time matches t."""
    if path.is_file():
        return snapshots.load_phase_grid(path)[0]
    files = sorted((path / "snapshots").glob(f"phase_*{PHASE_SUFFIX}"))
    if not files:
        raise InputError(f"No phase snapshots under {path}")
    for p in files:
        state, _ = snapshots.load_phase_grid(p)
        if abs(state.t - t) <= tol * max(1.0, abs(t)):
            return state
    raise InputError(f"No phase snapshot at t={t} under {path}")


def _report_summary(report: diagnostics.EnergyReport) -> dict[str, Any]:
    return {
        "passed": report.passed,
        "initial_total": report.initial_total,
        "final_total": report.final_total,
        "max_relative_drift": report.max_relative_drift,
        "final_relative_drift": report.final_relative_drift,
        "bound_ok": report.bound_ok,
        "inequality_ok": report.inequality_ok,
    }


def _json_default(value: Any) -> Any:
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"Not JSON serializable: {type(value).__name__}")
