"""
VlasovFlow Diagnostics
Energies, Casimirs, the renormalization residual, the flow-separation functional and
per-output diagnostics records.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import integrate

from vlasov_flow.engine.eulerian import PhaseGridFunction
from vlasov_flow.engine.fields import EffectiveMassLedger, ledger_update, potential_two_forms
from vlasov_flow.errors import ConfigurationError, InputError

log = logging.getLogger("VlasovFlow")


@dataclass
class DiagnosticsRecord:
    """Scalar diagnostics at one output time."""

    t: float
    mass_total: float
    mass_per_band: dict[int, float] = field(default_factory=dict)
    kinetic: float = 0.0
    potential_H: Optional[float] = None
    potential_E2: Optional[float] = None
    total_energy: float = 0.0
    casimir_values: dict[str, float] = field(default_factory=dict)
    noblowup_partial: float = 0.0
    phi_sep: Optional[float] = None
    ledger: Optional[EffectiveMassLedger] = None


def total_energy(kinetic: float, sigma: int, potential_H: Optional[float],
                 potential_E2: Optional[float]) -> float:
    """kinetic + sigma * potential, the H form when available, else the E^2 form."""
    potential = potential_H if potential_H is not None else potential_E2
    if potential is None:
        return kinetic
    return kinetic + sigma * potential


# ── Energies ────────────────────────────────────────────────────────────


def kinetic_energy(ensemble) -> float:
    """sum of w |v|^2 over active particles."""
    active = ensemble.active_mask()
    v = ensemble.v[active]
    return math.fsum(ensemble.w[active] * np.sum(v * v, axis=1))


def kinetic_energy_grid(state: PhaseGridFunction) -> float:
    """Integral of v^2 f over the phase grid."""
    return state.integrate(state.f * state.v[None, :] ** 2)


def field_energy_1d(E: np.ndarray, hx: float) -> float:
    """Integral of E^2 over the periodic x grid."""
    return float(np.sum(np.asarray(E) ** 2) * hx)


# ── Casimirs ────────────────────────────────────────────────────────────


def _threshold(c: float) -> Callable[[np.ndarray], np.ndarray]:
    return lambda s: np.where(s > c, s, 0.0)


CASIMIRS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "identity": lambda s: s,
    "square": lambda s: s * s,
    "arctan_weighted": lambda s: np.arctan(s) * s,
}


def casimir_function(psi_id: str) -> Callable[[np.ndarray], np.ndarray]:
    """Look up a registered Casimir density; 'threshold:c' means 1_{s>c} s."""
    if psi_id in CASIMIRS:
        return CASIMIRS[psi_id]
    if psi_id.startswith("threshold:"):
        try:
            return _threshold(float(psi_id.split(":", 1)[1]))
        except ValueError as e:
            raise ConfigurationError(f"Bad threshold Casimir: {psi_id}") from e
    raise ConfigurationError(f"Unregistered Casimir: {psi_id}")


def casimir(state, psi_id: str) -> float:
    """
    Integral of psi(f) over phase space.

    Eulerian states use grid quadrature. Ensembles use sum psi(f0) w / f0 over active
    particles with f0 > 0 (w / f0 is the phase volume each particle carries).
    """
    psi = casimir_function(psi_id)
    if isinstance(state, PhaseGridFunction):
        return state.integrate(psi(state.f))

    active = state.active_mask() & (state.f0_value > 0.0)
    f0 = state.f0_value[active]
    return math.fsum(psi(f0) * state.w[active] / f0)


# ── Renormalization residual ────────────────────────────────────────────


BETAS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "arctan": np.arctan,
    "rational": lambda s: s / (1.0 + s * s),
    "clamped": lambda s: np.clip(s, 0.0, 1.0),
}


@dataclass(frozen=True)
class SmoothTestFunction:
    """
    phi(t, x, v) = exp(-decay t) (1 + amplitude cos(k (x - x_shift))) bump(v).

    bump(v) = (1 - ((v - v_center)/v_width)^2)^4 inside |v - v_center| < v_width.
    """

    k: float
    v_width: float
    v_center: float = 0.0
    amplitude: float = 0.5
    x_shift: float = 0.0
    decay: float = 0.0

    def _bump(self, v):
        s = (v - self.v_center) / self.v_width
        return np.where(np.abs(s) < 1.0, (1.0 - s * s) ** 4, 0.0)

    def _dbump(self, v):
        s = (v - self.v_center) / self.v_width
        inside = np.abs(s) < 1.0
        return np.where(inside, -8.0 * s * (1.0 - s * s) ** 3 / self.v_width, 0.0)

    def _time(self, t):
        return math.exp(-self.decay * t)

    def value(self, t, x, v):
        gx = 1.0 + self.amplitude * np.cos(self.k * (x - self.x_shift))
        return self._time(t) * gx * self._bump(v)

    def dt(self, t, x, v):
        return -self.decay * self.value(t, x, v)

    def dx(self, t, x, v):
        return (self._time(t) * -self.amplitude * self.k * np.sin(self.k * (x - self.x_shift))
                * self._bump(v))

    def dv(self, t, x, v):
        gx = 1.0 + self.amplitude * np.cos(self.k * (x - self.x_shift))
        return self._time(t) * gx * self._dbump(v)


def renorm_residual(snapshots: Sequence[PhaseGridFunction], beta: str,
                    test: SmoothTestFunction) -> float:
    """
    Weak-form residual of the renormalized transport equation.

    int phi_0 beta(f_0) + int int (d_t phi + v d_x phi + E d_v phi) beta(f) - int phi_T beta(f_T),
    with the time integral by the trapezoid rule over the snapshots (E taken from each
    snapshot, zero when absent).

    Raises:
        ConfigurationError: For an unknown beta
        InputError: If the test function's v support leaves the grid, or snapshots differ in grid
    """
    if beta not in BETAS:
        raise ConfigurationError(f"Unregistered beta: {beta}")
    if not snapshots:
        return 0.0
    first = snapshots[0]
    if test.v_center - test.v_width < -first.vmax or test.v_center + test.v_width > first.vmax:
        raise InputError("Test function support exceeds the velocity grid")
    for snap in snapshots[1:]:
        if not snap.same_grid(first):
            raise InputError("Snapshots must share one phase grid")

    b_fn = BETAS[beta]
    X, V = np.meshgrid(first.x, first.v, indexing="ij")

    def bulk(snap: PhaseGridFunction) -> float:
        E = np.zeros(first.nx) if snap.E is None else np.asarray(snap.E)
        integrand = (test.dt(snap.t, X, V) + V * test.dx(snap.t, X, V)
                     + E[:, None] * test.dv(snap.t, X, V)) * b_fn(snap.f)
        return snap.integrate(integrand)

    last = snapshots[-1]
    initial = first.integrate(test.value(first.t, X, V) * b_fn(first.f))
    final = last.integrate(test.value(last.t, X, V) * b_fn(last.f))
    if len(snapshots) > 1:
        times = np.array([s.t for s in snapshots])
        interior = integrate.trapezoid([bulk(s) for s in snapshots], times)
    else:
        interior = 0.0
    return abs(initial + interior - final)


# ── Flow separation ─────────────────────────────────────────────────────


def _ensemble_at(run, t: Optional[float], time_tol: float):
    """The ensemble of a run (one ensemble or a sequence of snapshots) at time t."""
    snaps = [run] if hasattr(run, "ids") else list(run)
    if t is None:
        if len(snaps) != 1:
            raise InputError("A time is needed to pick a snapshot from a sequence")
        return snaps[0]
    for snap in snaps:
        if abs(snap.t - t) <= time_tol * max(1.0, abs(t)):
            return snap
    raise InputError(f"Run has no snapshot at t={t}")


def separation_functional(run_a, run_b, delta: float, zeta: float, t: Optional[float] = None,
                          time_tol: float = 1e-12) -> float:
    """
    Weighted mean of log(1 + |x_A - x_B|/(zeta delta) + |v_A - v_B|/delta) over
    particles active in both ensembles, matched by id.

    Each run is an ensemble or a sequence of ensembles (checkpoints); with t given the
    snapshot at that time is taken from each.

    Raises:
        InputError: If identities, weights or times do not match, or t is not recorded
    """
    if not (0.0 < delta <= 1.0 and 0.0 < zeta <= 1.0):
        raise ConfigurationError("delta and zeta must lie in (0, 1]")
    run_a = _ensemble_at(run_a, t, time_tol)
    run_b = _ensemble_at(run_b, t, time_tol)
    if run_a.size != run_b.size or not np.array_equal(np.sort(run_a.ids), np.sort(run_b.ids)):
        raise InputError("Ensembles do not share particle identities")
    if abs(run_a.t - run_b.t) > time_tol * max(1.0, abs(run_a.t)):
        raise InputError(f"Ensembles are at different times ({run_a.t} vs {run_b.t})")

    order_a = np.argsort(run_a.ids, kind="stable")
    order_b = np.argsort(run_b.ids, kind="stable")
    w = run_a.w[order_a]
    if not np.array_equal(w, run_b.w[order_b]):
        raise InputError("Matched particles carry different weights")

    both = run_a.active_mask()[order_a] & run_b.active_mask()[order_b]
    if not np.any(both):
        return 0.0
    dx = np.linalg.norm(run_a.x[order_a][both] - run_b.x[order_b][both], axis=1)
    dv = np.linalg.norm(run_a.v[order_a][both] - run_b.v[order_b][both], axis=1)
    terms = w[both] * np.log1p(dx / (zeta * delta) + dv / delta)
    return math.fsum(terms) / math.fsum(w[both])


# ── Records ─────────────────────────────────────────────────────────────


def lagrangian_record(ensemble, field_model, sigma: int, casimir_ids: Sequence[str],
                      ledger_rx: float, ledger_rv: float,
                      noblowup_partial: float = 0.0) -> DiagnosticsRecord:
    """Diagnostics of an ensemble; potentials come from the field model's last solve."""
    kinetic = kinetic_energy(ensemble)
    potential_H = potential_E2 = None
    grid = None
    state = getattr(field_model, "last_state", None)
    if state is not None:
        grid = state.grid
        if grid.periodic:
            potential_E2 = float(np.sum(state.E * state.E) * grid.cell_volume)
        elif grid.d >= 2:
            rho = state.rho if state.background is None else state.rho - state.background
            potential_H, potential_E2 = potential_two_forms(rho, grid, state.spec)

    return DiagnosticsRecord(
        t=ensemble.t,
        mass_total=ensemble.total_mass(),
        mass_per_band=ensemble.band_masses(),
        kinetic=kinetic,
        potential_H=potential_H,
        potential_E2=potential_E2,
        total_energy=total_energy(kinetic, sigma, potential_H, potential_E2),
        casimir_values={cid: casimir(ensemble, cid) for cid in casimir_ids},
        noblowup_partial=noblowup_partial,
        ledger=ledger_update(ensemble, ledger_rx, ledger_rv, grid=grid),
    )


def eulerian_record(state: PhaseGridFunction, sigma: int,
                    casimir_ids: Sequence[str]) -> DiagnosticsRecord:
    kinetic = kinetic_energy_grid(state)
    potential_E2 = None if state.E is None else field_energy_1d(state.E, state.hx)
    mass = state.mass()
    return DiagnosticsRecord(
        t=state.t,
        mass_total=mass,
        mass_per_band={},
        kinetic=kinetic,
        potential_E2=potential_E2,
        total_energy=total_energy(kinetic, sigma, None, potential_E2),
        casimir_values={cid: casimir(state, cid) for cid in casimir_ids},
    )


# ── Energy report ───────────────────────────────────────────────────────


@dataclass
class EnergyReport:
    """Verdicts over a record series."""

    passed: bool
    sigma: int
    initial_total: float
    final_total: float
    max_relative_drift: float
    final_relative_drift: float
    bound_ok: bool
    inequality_ok: bool
    inequality_checked: int
    kinetic: list[float] = field(default_factory=list)
    potential: list[float] = field(default_factory=list)
    total: list[float] = field(default_factory=list)


def energy_report(records: Sequence[DiagnosticsRecord], sigma: int,
                  drift_budget: float = 0.01, inequality_tol: float = 0.0,
                  check_inequality: bool = True) -> EnergyReport:
    """
    Energy drift statistics and verdicts.

    For sigma=+1 the total energy must stay below total(0) (1 + drift_budget). The
    inequality potential_H >= potential_E2 - tol is checked wherever both are recorded.
    """
    if not records:
        return EnergyReport(True, sigma, 0.0, 0.0, 0.0, 0.0, True, True, 0)

    totals = np.array([r.total_energy for r in records])
    e0 = totals[0]
    scale = abs(e0) if e0 != 0.0 else max(float(np.max(np.abs(totals))), 1e-300)
    drift = np.abs(totals - e0) / scale

    bound_ok = True
    if sigma == 1:
        bound_ok = bool(np.all(totals <= e0 + abs(e0) * drift_budget))

    inequality_ok = True
    checked = 0
    if check_inequality:
        for r in records:
            if r.potential_H is not None and r.potential_E2 is not None:
                checked += 1
                if r.potential_H < r.potential_E2 - inequality_tol:
                    inequality_ok = False
                    log.warning("Potential inequality fails at t=%.6g: %.9g < %.9g",
                                r.t, r.potential_H, r.potential_E2)

    potentials = [
        (r.potential_H if r.potential_H is not None else (r.potential_E2 or 0.0))
        for r in records
    ]
    return EnergyReport(
        passed=bound_ok and inequality_ok,
        sigma=sigma,
        initial_total=float(e0),
        final_total=float(totals[-1]),
        max_relative_drift=float(np.max(drift)),
        final_relative_drift=float(drift[-1]),
        bound_ok=bound_ok,
        inequality_ok=inequality_ok,
        inequality_checked=checked,
        kinetic=[r.kinetic for r in records],
        potential=potentials,
        total=totals.tolist(),
    )
