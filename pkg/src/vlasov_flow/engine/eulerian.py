"""
VlasovFlow Eulerian
1D-1V semi-Lagrangian reference solver: periodic x, zero-padded v, Strang splitting with
cubic Lagrange shifts and its own field solve (independent of the FFT solver).
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy import integrate

from vlasov_flow.engine.kernels import KernelSpec, mollifier
from vlasov_flow.errors import ConfigurationError, GridRangeError, InputError

log = logging.getLogger("VlasovFlow")


# Outer v nodes that must stay empty
BOUNDARY_BAND = 3
BOUNDARY_MASS_TOL = 1e-10
CLAMP_WARN_FRACTION = 1e-10


@dataclass
class PhaseGridFunction:
    """f on a periodic x grid of nx nodes and a v grid of nv nodes spanning [-vmax, vmax]."""

    f: np.ndarray
    length: float
    vmax: float
    x0: float = 0.0
    t: float = 0.0
    E: Optional[np.ndarray] = None
    spec: Optional[KernelSpec] = None
    clamped_mass: float = 0.0

    def __post_init__(self):
        self.f = np.asarray(self.f, dtype=float)
        if self.f.ndim != 2 or min(self.f.shape) < 4:
            raise ConfigurationError(f"Phase grid needs shape (nx, nv) >= 4, got {self.f.shape}")
        if not (self.length > 0 and self.vmax > 0):
            raise ConfigurationError("Phase grid extents must be positive")

    @classmethod
    def from_function(cls, f0: Callable[[np.ndarray, np.ndarray], np.ndarray], length: float,
                      nx: int, vmax: float, nv: int, x0: float = 0.0,
                      spec: Optional[KernelSpec] = None) -> "PhaseGridFunction":
        """Sample f0(x, v) on the nodes; the v boundary band is zeroed."""
        x = x0 + length / nx * np.arange(nx)
        v = np.linspace(-vmax, vmax, nv)
        X, V = np.meshgrid(x, v, indexing="ij")
        f = np.asarray(f0(X, V), dtype=float)
        if np.any(f < 0.0):
            raise InputError("Initial f must be nonnegative")
        f[:, :BOUNDARY_BAND] = 0.0
        f[:, -BOUNDARY_BAND:] = 0.0
        return cls(f=f, length=length, vmax=vmax, x0=x0, spec=spec)

    @property
    def nx(self) -> int:
        return self.f.shape[0]

    @property
    def nv(self) -> int:
        return self.f.shape[1]

    @property
    def hx(self) -> float:
        return self.length / self.nx

    @property
    def hv(self) -> float:
        return 2.0 * self.vmax / (self.nv - 1)

    @property
    def x(self) -> np.ndarray:
        return self.x0 + self.hx * np.arange(self.nx)

    @property
    def v(self) -> np.ndarray:
        return np.linspace(-self.vmax, self.vmax, self.nv)

    def integrate(self, values: np.ndarray) -> float:
        """Phase-space quadrature: periodic rectangle rule in x, trapezoid in v."""
        per_x = integrate.trapezoid(values, dx=self.hv, axis=1)
        return float(np.sum(per_x) * self.hx)

    def mass(self) -> float:
        return self.integrate(self.f)

    def same_grid(self, other: "PhaseGridFunction") -> bool:
        return (self.f.shape == other.f.shape and self.length == other.length
                and self.vmax == other.vmax and self.x0 == other.x0)

    def to_header(self) -> dict:
        return {
            "x0": self.x0, "length": self.length, "nx": self.nx,
            "vmax": self.vmax, "nv": self.nv, "t": self.t,
            "kernel": None if self.spec is None else self.spec.to_header(),
        }


# ── Field models ────────────────────────────────────────────────────────


class EulerianPoisson:
    """
    E' = sigma (rho_n - rho_b) on the periodic grid, with E of zero mean.

    rho_n is rho smoothed with the discrete psi_n stencil when n is finite. The
    background defaults to the mean density (neutralizing).
    """

    def __init__(self, sigma: int = 1, n: float = math.inf, shape: str = "poly4",
                 background: Optional[np.ndarray] = None):
        self.sigma = sigma
        self.n = n
        self.shape = shape
        self.background = background

    def _smooth(self, rho: np.ndarray, h: float) -> np.ndarray:
        if not math.isfinite(self.n):
            return rho
        reach = int(math.floor(1.0 / (self.n * h)))
        if reach < 1:
            return rho
        offsets = np.arange(-reach, reach + 1)
        weights = mollifier(self.n, (offsets * h)[:, None], 1, self.shape)
        weights = weights / np.sum(weights)
        out = np.zeros_like(rho)
        for k, wk in zip(offsets, weights):
            out += wk * np.roll(rho, -k)
        return out

    def __call__(self, state: PhaseGridFunction) -> np.ndarray:
        rho = self._smooth(marginal_density(state), state.hx)
        if self.background is None:
            net = rho - np.mean(rho)
        else:
            background = np.asarray(self.background, dtype=float)
            if abs(np.sum(background) - np.sum(rho)) > 1e-8 * max(np.sum(rho), 1e-300):
                raise ConfigurationError("Background mass does not match the density mass")
            net = rho - background
        closed = np.append(net, net[0])
        E = self.sigma * integrate.cumulative_trapezoid(closed, dx=state.hx, initial=0.0)[:-1]
        return E - np.mean(E)


class FrozenField1D:
    """Prescribed E(x, t) on the x grid."""

    def __init__(self, func: Callable[[np.ndarray, float], np.ndarray]):
        self.func = func

    def __call__(self, state: PhaseGridFunction) -> np.ndarray:
        return np.asarray(self.func(state.x, state.t), dtype=float) * np.ones(state.nx)

    @classmethod
    def zero(cls) -> "FrozenField1D":
        return cls(lambda x, t: np.zeros_like(x))


# ── Interpolation ───────────────────────────────────────────────────────


def _lagrange_weights(alpha: np.ndarray) -> list[np.ndarray]:
    """Cubic Lagrange weights for nodes -1, 0, 1, 2 at fractional position alpha."""
    return [
        -alpha * (alpha - 1.0) * (alpha - 2.0) / 6.0,
        (alpha + 1.0) * (alpha - 1.0) * (alpha - 2.0) / 2.0,
        -(alpha + 1.0) * alpha * (alpha - 2.0) / 2.0,
        (alpha + 1.0) * alpha * (alpha - 1.0) / 6.0,
    ]


def shift_periodic(f: np.ndarray, shift: np.ndarray) -> np.ndarray:
    """g[i, j] = f(i - shift[j], j) along axis 0 (periodic), cubic Lagrange."""
    n = f.shape[0]
    pos = -np.asarray(shift, dtype=float)
    base = np.floor(pos)
    alpha = pos - base
    base = base.astype(np.int64)
    rows = np.arange(n)[:, None]
    cols = np.arange(f.shape[1])[None, :]
    out = np.zeros_like(f)
    for k, weight in zip((-1, 0, 1, 2), _lagrange_weights(alpha)):
        idx = np.mod(rows + base[None, :] + k, n)
        out += weight[None, :] * f[idx, cols]
    return out


def shift_bounded(f: np.ndarray, shift: np.ndarray) -> np.ndarray:
    """g[i, j] = f(i, j - shift[i]) along axis 1, zero outside the grid, cubic Lagrange."""
    n = f.shape[1]
    pos = -np.asarray(shift, dtype=float)
    base = np.floor(pos)
    alpha = pos - base
    base = base.astype(np.int64)
    rows = np.arange(f.shape[0])[:, None]
    cols = np.arange(n)[None, :]
    out = np.zeros_like(f)
    for k, weight in zip((-1, 0, 1, 2), _lagrange_weights(alpha)):
        idx = cols + base[:, None] + k
        valid = (idx >= 0) & (idx < n)
        vals = np.where(valid, f[rows, np.clip(idx, 0, n - 1)], 0.0)
        out += weight[:, None] * vals
    return out


# ── Stepping ────────────────────────────────────────────────────────────


def marginal_density(state: PhaseGridFunction) -> np.ndarray:
    """rho(x) = trapezoid rule in v at every x node."""
    return integrate.trapezoid(state.f, dx=state.hv, axis=1)


def _boundary_mass(state: PhaseGridFunction, f: np.ndarray) -> float:
    band = np.concatenate([f[:, :BOUNDARY_BAND], f[:, -BOUNDARY_BAND:]], axis=1)
    return float(np.sum(np.abs(band)) * state.hx * state.hv)


def sl_step(state: PhaseGridFunction, field_model: Callable[[PhaseGridFunction], np.ndarray],
            dt: float) -> PhaseGridFunction:
    """
    One Strang step: half x-advection, field solve, full v-advection, half x-advection.

    Negative values are clamped to zero and the mass restored by rescaling.

    Raises:
        ConfigurationError: If dt <= 0
        GridRangeError: If mass reaches the v boundary band
    """
    if not (dt > 0) or not math.isfinite(dt):
        raise ConfigurationError(f"dt must be positive and finite, got {dt!r}")
    mass_before = float(np.sum(state.f))

    x_shift = state.v * (0.5 * dt) / state.hx
    f = shift_periodic(state.f, x_shift)

    half = replace(state, f=f, t=state.t + 0.5 * dt)
    E = np.asarray(field_model(half), dtype=float)
    f = shift_bounded(f, E * dt / state.hv)
    f = shift_periodic(f, x_shift)

    if _boundary_mass(state, f) > BOUNDARY_MASS_TOL * max(mass_before * state.hx * state.hv,
                                                          1e-300):
        raise GridRangeError("Mass reached the v boundary; enlarge the velocity grid (vmax)")

    negative = f < 0.0
    clamped = float(-np.sum(f[negative]))
    if clamped > 0.0:
        f[negative] = 0.0
        total = float(np.sum(f))
        if total > 0.0:
            f *= mass_before / total
        if clamped > CLAMP_WARN_FRACTION * max(mass_before, 1e-300):
            log.debug("Clamped negative mass fraction %.3e at t=%.6g",
                      clamped / mass_before, state.t + dt)

    return replace(state, f=f, t=state.t + dt, E=E,
                   clamped_mass=state.clamped_mass + clamped * state.hx * state.hv)


@dataclass
class EulerianRun:
    """Snapshots of an Eulerian run at uniform cadence."""

    snapshots: list[PhaseGridFunction] = field(default_factory=list)
    records: list = field(default_factory=list)

    @property
    def final(self) -> PhaseGridFunction:
        return self.snapshots[-1]


def run_eulerian(state: PhaseGridFunction, field_model, dt: float, t_end: float,
                 cadence: int = 1,
                 observer: Optional[Callable[[PhaseGridFunction], object]] = None,
                 records: Optional[list] = None) -> EulerianRun:
    """
    Advance with sl_step to round(t_end/dt) steps, keeping snapshots every `cadence` steps.

    Observer results go to `records` when given, so a caller still holds them after a fault.
    """
    if cadence < 1:
        raise ConfigurationError(f"cadence must be >= 1, got {cadence}")
    steps = int(round(t_end / dt)) if t_end > 0 else 0
    if state.E is None:
        state = replace(state, E=np.asarray(field_model(state), dtype=float))
    outcome = EulerianRun(snapshots=[state], records=records if records is not None else [])
    if observer is not None:
        outcome.records.append(observer(state))

    log.info("Eulerian run: %s steps on %sx%s grid", steps, state.nx, state.nv)
    for i in range(1, steps + 1):
        state = sl_step(state, field_model, dt)
        state = replace(state, t=i * dt)
        if i % cadence == 0 or i == steps:
            outcome.snapshots.append(state)
            if observer is not None:
                outcome.records.append(observer(state))
    if state.clamped_mass > CLAMP_WARN_FRACTION * max(outcome.snapshots[0].mass(), 1e-300):
        log.warning("Clamped negative mass %.3e over the run", state.clamped_mass)
    return outcome


# ── Cross-validation ────────────────────────────────────────────────────


def deposit_phase(x: np.ndarray, v: np.ndarray, w: np.ndarray,
                  state: PhaseGridFunction) -> np.ndarray:
    """2D cloud-in-cell of particles onto the phase grid (density per unit dx dv)."""
    x = np.asarray(x, dtype=float).reshape(-1)
    v = np.asarray(v, dtype=float).reshape(-1)
    w = np.asarray(w, dtype=float).reshape(-1)
    nx, nv = state.f.shape
    u = np.mod((x - state.x0) / state.hx, nx)
    s = (v + state.vmax) / state.hv
    inside = (s >= 0.0) & (s <= nv - 1)
    if not np.all(inside):
        log.debug("%s particles outside the v range are not deposited",
                  int(np.count_nonzero(~inside)))
    u, s, w = u[inside], s[inside], w[inside]

    i0 = np.minimum(np.floor(u).astype(np.int64), nx - 1)
    j0 = np.minimum(np.floor(s).astype(np.int64), nv - 2)
    a = u - i0
    b = s - j0
    i1 = np.mod(i0 + 1, nx)
    j1 = j0 + 1

    idx = np.concatenate([i0 * nv + j0, i1 * nv + j0, i0 * nv + j1, i1 * nv + j1])
    wts = np.concatenate([w * (1 - a) * (1 - b), w * a * (1 - b), w * (1 - a) * b, w * a * b])
    grid = np.bincount(idx, weights=wts, minlength=nx * nv).reshape(nx, nv)
    # Trapezoid end nodes carry half a cell
    cell = np.full(nv, state.hv)
    cell[0] = cell[-1] = 0.5 * state.hv
    return grid / (state.hx * cell[None, :])


def cross_validate(ensemble, state: PhaseGridFunction,
                   spec: Optional[KernelSpec] = None, time_tol: float = 1e-9) -> float:
    """
    L1 distance between the deposited particle density and the Eulerian f.

    Raises:
        ConfigurationError: If the kernel specs differ
        InputError: If the ensemble is not 1D or the times differ
    """
    if spec is not None and state.spec is not None and spec != state.spec:
        raise ConfigurationError(
            f"Kernel mismatch: particles {spec.describe()} vs grid {state.spec.describe()}"
        )
    if ensemble.d != 1:
        raise InputError("Cross-validation needs a 1D ensemble")
    if abs(ensemble.t - state.t) > time_tol * max(1.0, abs(state.t)):
        raise InputError(f"Time mismatch: particles at t={ensemble.t}, grid at t={state.t}")

    active = ensemble.active_mask()
    f_particles = deposit_phase(ensemble.x[active, 0], ensemble.v[active, 0],
                                ensemble.w[active], state)
    return state.integrate(np.abs(f_particles - state.f))
