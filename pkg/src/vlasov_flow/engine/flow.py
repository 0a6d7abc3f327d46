"""
VlasovFlow Flow
Lagrangian particle pusher: kick-drift-kick leapfrog for b = (v, E), per-particle escape
times and level-set band bookkeeping.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Callable, Optional

import numpy as np

from vlasov_flow.engine.compactify import CertificateSeries, certificate_integrand
from vlasov_flow.engine.fields import FieldSolver, FieldState, deposit_points, gather
from vlasov_flow.errors import ConfigurationError, InputError, NumericalFaultError

log = logging.getLogger("VlasovFlow")


class ParticleStatus(IntEnum):
    """Particle lifecycle states."""
    ACTIVE = 0
    ESCAPED = 1     # left the escape ball forward in time (T+ recorded)
    PRE_BIRTH = 2   # left the escape ball backward in time (T- recorded)


@dataclass
class ParticleEnsemble:
    """Weighted phase-space points with carried f0 values, bands and escape times."""

    x: np.ndarray
    v: np.ndarray
    w: np.ndarray
    f0_value: np.ndarray
    band: np.ndarray
    status: np.ndarray
    t_plus: np.ndarray
    t_minus: np.ndarray
    ids: np.ndarray
    t: float = 0.0
    step: int = 0
    band_offset: float = 0.0
    accel_cache: Optional[np.ndarray] = field(default=None, repr=False)

    @classmethod
    def from_samples(cls, x, v, w, f0_value, seed: Optional[int] = None) -> "ParticleEnsemble":
        """Build a fresh ensemble at t = 0; bands come from band_assign."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        v = np.atleast_2d(np.asarray(v, dtype=float))
        w = np.asarray(w, dtype=float).reshape(-1)
        f0_value = np.asarray(f0_value, dtype=float).reshape(-1)
        n = w.size
        if x.shape != v.shape or x.shape[0] != n or f0_value.size != n:
            raise InputError("x, v, w and f0_value must describe the same particles")
        if np.any(w <= 0.0):
            raise InputError("Particle weights must be positive")
        band, offset = band_assign(f0_value, seed=seed)
        return cls(
            x=x.copy(),
            v=v.copy(),
            w=w.copy(),
            f0_value=f0_value.copy(),
            band=band,
            status=np.full(n, ParticleStatus.ACTIVE, dtype=np.int8),
            t_plus=np.full(n, np.nan),
            t_minus=np.full(n, np.nan),
            ids=np.arange(n, dtype=np.int64),
            band_offset=offset,
        )

    @property
    def size(self) -> int:
        return int(self.w.size)

    @property
    def d(self) -> int:
        return int(self.x.shape[1])

    def active_mask(self) -> np.ndarray:
        return self.status == ParticleStatus.ACTIVE

    def escaped_mask(self) -> np.ndarray:
        return self.status != ParticleStatus.ACTIVE

    def total_mass(self) -> float:
        return math.fsum(self.w)

    def band_masses(self) -> dict[int, float]:
        """Sum of weights per band index (all particles, escaped included)."""
        return {int(k): math.fsum(self.w[self.band == k]) for k in np.unique(self.band)}

    def copy(self) -> "ParticleEnsemble":
        return replace(
            self,
            x=self.x.copy(), v=self.v.copy(), w=self.w.copy(),
            f0_value=self.f0_value.copy(), band=self.band.copy(),
            status=self.status.copy(), t_plus=self.t_plus.copy(),
            t_minus=self.t_minus.copy(), ids=self.ids.copy(), accel_cache=None,
        )


# ── Bands ───────────────────────────────────────────────────────────────


def band_assign(f0_values, seed: Optional[int] = None,
                rng: Optional[np.random.Generator] = None) -> tuple[np.ndarray, float]:
    """
    Level-set band index k with k <= value - R < k + 1, clamped at 0.

    R = 0 unless some value sits exactly on an integer; then R is drawn in (0, 1)
    from a seeded generator so that no shifted value lands on a boundary.

    Returns:
        (bands, R)

    Raises:
        InputError: If any value is negative or not finite
    """
    values = np.asarray(f0_values, dtype=float).reshape(-1)
    if np.any(~np.isfinite(values)) or np.any(values < 0.0):
        raise InputError("f0 values must be finite and nonnegative")

    offset = 0.0
    if values.size and np.any(values == np.floor(values)):
        rng = rng if rng is not None else np.random.default_rng(seed)
        fractions = values - np.floor(values)
        for _ in range(64):
            offset = float(rng.uniform(0.0, 1.0))
            if offset > 0.0 and not np.any(fractions == offset):
                break
        log.debug("Band boundary hit, using offset R=%.17g", offset)

    bands = np.floor(values - offset).astype(np.int64)
    return np.maximum(bands, 0), offset


# ── Field interfaces ────────────────────────────────────────────────────


class FrozenField:
    """Prescribed force field E(x, t), independent of the particles."""

    frozen = True

    def __init__(self, func: Callable[[np.ndarray, float], np.ndarray]):
        self.func = func

    def accel(self, ensemble: ParticleEnsemble) -> np.ndarray:
        active = ensemble.active_mask()
        x = ensemble.x[active]
        return np.asarray(self.func(x, ensemble.t), dtype=float).reshape(x.shape)

    @classmethod
    def zero(cls) -> "FrozenField":
        return cls(lambda x, t: np.zeros_like(x))

    @classmethod
    def harmonic(cls, omega: float = 1.0) -> "FrozenField":
        return cls(lambda x, t: -omega * omega * x)


class PicField:
    """Self-consistent field: deposit active particles, solve, gather back."""

    frozen = False

    def __init__(self, solver: FieldSolver):
        self.solver = solver
        self.last_state: Optional[FieldState] = None
        self._outside_count = 0

    def accel(self, ensemble: ParticleEnsemble) -> np.ndarray:
        active = ensemble.active_mask()
        x = ensemble.x[active]
        result = deposit_points(x, ensemble.w[active], self.solver.grid)
        outside = int(np.count_nonzero(~result.inside))
        if outside != self._outside_count:
            log.warning("%s active particles outside the field grid (mass %.6e)",
                        outside, result.outside_mass)
            self._outside_count = outside
        self.last_state = self.solver.state(result.rho)
        return gather(self.last_state.E, x, self.solver.grid)


# ── Stepping ────────────────────────────────────────────────────────────


def _check_dt(dt: float):
    if not (dt > 0.0) or not math.isfinite(dt):
        raise ConfigurationError(f"dt must be positive and finite, got {dt!r}")


def step(ensemble: ParticleEnsemble, field_model, dt: float,
         direction: int = 1) -> ParticleEnsemble:
    """
    One kick-drift-kick step of the active particles; time runs backward for direction=-1.

    The force at the end of a step is cached on the ensemble and reused as the first
    half-kick of the next step. Carried f0 values, bands and weights never change.

    Raises:
        ConfigurationError: If dt <= 0
        NumericalFaultError: If the new state is not finite
    """
    _check_dt(dt)
    if direction not in (1, -1):
        raise ConfigurationError(f"direction must be +1 or -1, got {direction}")
    h = direction * dt
    active = ensemble.active_mask()

    if not np.any(active):
        ensemble.step += 1
        ensemble.t = ensemble.step * h
        return ensemble

    a0 = ensemble.accel_cache
    if a0 is None or a0.shape[0] != int(np.count_nonzero(active)):
        a0 = field_model.accel(ensemble)

    v = ensemble.v[active] + 0.5 * h * a0
    ensemble.x[active] = ensemble.x[active] + h * v
    ensemble.v[active] = v
    ensemble.step += 1
    ensemble.t = ensemble.step * h

    a1 = field_model.accel(ensemble)
    ensemble.v[active] = ensemble.v[active] + 0.5 * h * a1
    ensemble.accel_cache = a1

    if not (np.all(np.isfinite(ensemble.x[active])) and np.all(np.isfinite(ensemble.v[active]))):
        raise NumericalFaultError("Non-finite particle state", step=ensemble.step, t=ensemble.t)
    return ensemble


def detect_escape(ensemble: ParticleEnsemble, r_escape: float, direction: int = 1) -> int:
    """
    Mark active particles with |x| > r_escape or |v| > r_escape as escaped.

    Forward runs record T+ (ESCAPED), backward runs record T- (PRE_BIRTH).

    Returns:
        Number of newly escaped particles
    """
    if not (r_escape > 0):
        raise ConfigurationError(f"Escape radius must be positive, got {r_escape}")
    active = ensemble.active_mask()
    x_norm = np.linalg.norm(ensemble.x, axis=1)
    v_norm = np.linalg.norm(ensemble.v, axis=1)
    newly = active & ((x_norm > r_escape) | (v_norm > r_escape))
    count = int(np.count_nonzero(newly))
    if count:
        if direction > 0:
            ensemble.status[newly] = ParticleStatus.ESCAPED
            ensemble.t_plus[newly] = ensemble.t
        else:
            ensemble.status[newly] = ParticleStatus.PRE_BIRTH
            ensemble.t_minus[newly] = ensemble.t
        ensemble.accel_cache = None
        log.info("%s particles escaped at t=%.6g (mass %.6e)",
                 count, ensemble.t, math.fsum(ensemble.w[newly]))
    return count


def volume_check(field_model, dt: float, point, fd_step: float = 1e-5) -> float:
    """
    Jacobian determinant of the one-step map at a phase-space point (x, v).

    Central differences on 2 * 2d perturbed copies stepped together in a frozen field.
    """
    if not getattr(field_model, "frozen", False):
        raise ConfigurationError("volume_check needs a frozen field")
    z = np.asarray(point, dtype=float).reshape(-1)
    m = z.size
    if m % 2:
        raise InputError("Point must have even length (x, v)")
    d = m // 2

    offsets = np.concatenate([np.eye(m), -np.eye(m)]) * fd_step
    pts = z + offsets
    copies = ParticleEnsemble.from_samples(
        pts[:, :d], pts[:, d:], np.ones(2 * m), np.ones(2 * m), seed=0,
    )
    step(copies, field_model, dt)
    out = np.concatenate([copies.x, copies.v], axis=1)
    jac = (out[:m] - out[m:]).T / (2.0 * fd_step)
    return float(np.linalg.det(jac))


# ── Runs ────────────────────────────────────────────────────────────────


@dataclass
class FlowRun:
    """Outcome of a run: the final ensemble plus recorded series."""

    ensemble: ParticleEnsemble
    records: list = field(default_factory=list)
    certificate: CertificateSeries = field(default_factory=CertificateSeries)
    trajectory: list[tuple[float, np.ndarray, np.ndarray]] = field(default_factory=list)
    steps_taken: int = 0
    escaped: int = 0


def total_steps(dt: float, t_end: float) -> int:
    """Number of fixed steps covering [0, t_end]."""
    _check_dt(dt)
    if not (t_end >= 0.0):
        raise ConfigurationError(f"t_end must be >= 0, got {t_end!r}")
    return int(round(t_end / dt))


def _certificate_sample(ensemble: ParticleEnsemble, field_model) -> float:
    active = ensemble.active_mask()
    if not np.any(active):
        return 0.0
    if ensemble.accel_cache is None or ensemble.accel_cache.shape[0] != int(np.count_nonzero(active)):
        ensemble.accel_cache = field_model.accel(ensemble)
    return certificate_integrand(ensemble.x[active], ensemble.v[active],
                                 ensemble.accel_cache, ensemble.w[active])


def run(ensemble: ParticleEnsemble, field_model, dt: float, t_end: float,
        escape_radius: float = math.inf, cadence: int = 1, direction: int = 1,
        observer: Optional[Callable[[ParticleEnsemble, object], object]] = None,
        track: Optional[np.ndarray] = None,
        on_step: Optional[Callable[[ParticleEnsemble], None]] = None,
        certificate: Optional[CertificateSeries] = None,
        records: Optional[list] = None) -> FlowRun:
    """
    Advance the ensemble from its current step to round(t_end/dt) steps.

    Time is always step * dt, so a run restarted from a checkpoint reproduces the
    uninterrupted run bit for bit.

    Args:
        ensemble: Particles (mutated in place)
        field_model: FrozenField or PicField
        dt: Step size (> 0)
        t_end: Final |time|
        escape_radius: Ball radius for escape detection
        cadence: Observer is called every `cadence` steps and at the last step
        direction: +1 forward, -1 backward
        observer: Called as observer(ensemble, field_model); results collected in records
        track: Particle ids whose positions are recorded at cadence
        on_step: Called after every accepted step (checkpointing hook)
        certificate: Series to continue (a restarted run passes the samples so far)
        records: List the observer results are appended to; it keeps the records
            collected before a fault

    Returns:
        FlowRun with the records and certificate samples
    """
    if cadence < 1:
        raise ConfigurationError(f"cadence must be >= 1, got {cadence}")
    n_total = total_steps(dt, t_end)
    outcome = FlowRun(ensemble=ensemble, records=records if records is not None else [])
    if certificate is not None:
        outcome.certificate = certificate
    tracked = None if track is None else np.isin(ensemble.ids, np.asarray(track))

    def observe():
        if observer is not None:
            outcome.records.append(observer(ensemble, field_model))
        if tracked is not None:
            outcome.trajectory.append(
                (ensemble.t, ensemble.x[tracked].copy(), ensemble.v[tracked].copy())
            )

    log.info("Run: step %s -> %s (dt=%s, direction=%s, %s particles)",
             ensemble.step, n_total, dt, direction, ensemble.size)

    series = outcome.certificate
    if not series.times or series.times[-1] != ensemble.t:
        series.append(ensemble.t, _certificate_sample(ensemble, field_model))
    observe()

    while ensemble.step < n_total:
        step(ensemble, field_model, dt, direction=direction)
        outcome.steps_taken += 1
        outcome.escaped += detect_escape(ensemble, escape_radius, direction=direction)
        outcome.certificate.append(ensemble.t, _certificate_sample(ensemble, field_model))
        if ensemble.step % cadence == 0 or ensemble.step == n_total:
            observe()
        if on_step is not None:
            on_step(ensemble)
        if ensemble.step % 1000 == 0:
            log.debug("step %s t=%.6g active=%s", ensemble.step, ensemble.t,
                      int(np.count_nonzero(ensemble.active_mask())))

    log.info("Run complete: t=%.6g, %s steps, %s escaped", ensemble.t,
             outcome.steps_taken, outcome.escaped)
    return outcome
