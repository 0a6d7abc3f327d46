"""
VlasovFlow Compactify
Damped diffeomorphism of phase space onto the sphere minus the north pole, integration of
the compactified field, and the no-blow-up certificate.

The radial profile psi0 maps [0, inf) onto [0, pi): a point x goes to
(sin psi0(|x|) x/|x|, -cos psi0(|x|)), so escape to infinity becomes arrival at the
north pole N = (0, ..., 0, 1). psi0 is c0 times the running integral of psi1, a
forward-looking average of the damping profile D1, with c0 fixed so that psi0 -> pi.
"""

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Protocol

import numpy as np
from scipy import integrate, interpolate

from vlasov_flow.errors import ConfigurationError, InputError, StepRejectedError

log = logging.getLogger("VlasovFlow")


# Quadrature orders
SMOOTHING_NODES = 128
INTERVAL_NODES = 5

# Profile table grading
UNIFORM_STEP = 1.0 / 32.0
GEOMETRIC_RATIO = 1.02
TAIL_FACTOR = 1.0e7

# Sphere tolerances
SPHERE_TOL = 1e-8
RENORM_TOL = 1e-3

_GL_S, _GL_W = np.polynomial.legendre.leggauss(SMOOTHING_NODES)
_GL_S = 0.5 * (_GL_S + 1.0)
_GL_W = 0.5 * _GL_W
_INT_S, _INT_W = np.polynomial.legendre.leggauss(INTERVAL_NODES)


def smoothing_kernel(s):
    """One-sided bump 140 s^3 (1-s)^3 on (0, 1), unit integral."""
    s = np.asarray(s, dtype=float)
    inside = (s > 0.0) & (s < 1.0)
    return np.where(inside, 140.0 * s ** 3 * (1.0 - s) ** 3, 0.0)


_SMOOTH_W = _GL_W * smoothing_kernel(_GL_S)


# ── Damping profiles ────────────────────────────────────────────────────


class DampingProfile(Protocol):
    """Nonincreasing radial profile with values in (0, 1]."""

    def __call__(self, r: np.ndarray) -> np.ndarray: ...

    def breakpoints(self) -> np.ndarray: ...


@dataclass(frozen=True)
class ConstantDamping:
    value: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.value <= 1.0):
            raise InputError(f"Damping value must lie in (0, 1], got {self.value}")

    def __call__(self, r):
        return np.full(np.shape(r), self.value, dtype=float)

    def breakpoints(self) -> np.ndarray:
        return np.empty(0)


@dataclass(frozen=True)
class PowerDamping:
    """D(r) = min(1, r^-alpha)."""

    alpha: float = 1.0

    def __post_init__(self):
        if not (self.alpha >= 0.0):
            raise InputError(f"Damping exponent must be >= 0, got {self.alpha}")

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        with np.errstate(divide="ignore"):
            return np.minimum(1.0, np.where(r > 0.0, r, 1.0) ** -self.alpha)

    def breakpoints(self) -> np.ndarray:
        return np.empty(0)


@dataclass(frozen=True)
class TabulatedDamping:
    """Piecewise constant: D(r) = values[i] on [edges[i], edges[i+1]), last value to infinity."""

    edges: tuple[float, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if edges.size == 0 or edges.size != values.size:
            raise InputError("Tabulated damping needs matching, nonempty edges and values")
        if edges[0] != 0.0 or np.any(np.diff(edges) <= 0.0):
            raise InputError("Tabulated damping edges must start at 0 and increase")
        if np.any(values <= 0.0) or np.any(values > 1.0):
            raise InputError("Tabulated damping values must lie in (0, 1]")
        if np.any(np.diff(values) > 0.0):
            raise InputError("Damping profile must be nonincreasing")

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        idx = np.searchsorted(np.asarray(self.edges), r, side="right") - 1
        return np.asarray(self.values)[np.clip(idx, 0, len(self.values) - 1)]

    def breakpoints(self) -> np.ndarray:
        return np.asarray(self.edges[1:], dtype=float)


def damping_from_data(times: np.ndarray, radii: np.ndarray, flux: np.ndarray,
                      levels: int = 40) -> TabulatedDamping:
    """
    Damping profile driven by the running flux of |b| rho through growing balls.

    D = 1 on [0, 1) and (2^k C_k)^-1 on [2^(k-1), 2^k), where
    C_k = 1 + time integral of the flux carried inside the ball of radius 2^k.

    Args:
        times: Sample times, shape (T,)
        radii: Phase-space radius of each sample point, shape (T, N)
        flux: Weighted field magnitude w|b| at each sample point, shape (T, N)
        levels: Number of dyadic shells
    """
    times = np.asarray(times, dtype=float)
    radii = np.atleast_2d(np.asarray(radii, dtype=float))
    flux = np.atleast_2d(np.asarray(flux, dtype=float))
    if radii.shape != flux.shape or radii.shape[0] != times.size:
        raise InputError("times, radii and flux samples have inconsistent shapes")
    if np.any(flux < 0.0):
        raise InputError("Flux samples must be nonnegative")

    edges = [0.0]
    values = [1.0]
    for k in range(1, levels + 1):
        inside = np.where(radii < 2.0 ** k, flux, 0.0).sum(axis=1)
        c_k = 1.0 + (integrate.trapezoid(inside, times) if times.size > 1 else 0.0)
        edges.append(2.0 ** (k - 1))
        values.append(min(values[-1], 1.0 / (2.0 ** k * c_k)))
    return TabulatedDamping(edges=tuple(edges), values=tuple(values))


def check_damping(D: Callable, r_max: float = 1e8) -> None:
    """Sample D on a log grid and reject out-of-range or increasing profiles."""
    r = np.concatenate([[0.0], np.geomspace(1e-3, r_max, 2000)])
    values = np.asarray(D(r), dtype=float)
    if np.any(~np.isfinite(values)) or np.any(values <= 0.0) or np.any(values > 1.0):
        raise InputError("Damping profile values must lie in (0, 1]")
    if np.any(np.diff(values) > 1e-15 * np.maximum(values[:-1], 1.0)):
        raise InputError("Damping profile must be nonincreasing")


# ── Profile table ───────────────────────────────────────────────────────


@dataclass
class DampedDiffeomorphism:
    """Tabulated radial profile psi0 and the sphere maps built on it."""

    damping: Callable
    c0: float
    d00: float          # D0(0) = D(0)/4
    r_lin: float        # psi0 is linear on [0, r_lin)
    r_jump: float
    r0: float           # decay bound holds for |x| >= r0
    r_max: float
    nodes: np.ndarray
    psi0_nodes: np.ndarray
    dpsi0_nodes: np.ndarray
    complement_nodes: np.ndarray
    _backward: interpolate.CubicHermiteSpline = field(repr=False, default=None)
    _tail_const: float = 0.0

    # Radial profile

    def psi0(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        return np.where(r <= self.r_lin, self.c0 * self.d00 * r, math.pi - self.complement(r))

    def complement(self, r) -> np.ndarray:
        """pi - psi0(r), accurate near the north pole."""
        r = np.asarray(r, dtype=float)
        out = np.empty(r.shape)
        lin = r <= self.r_lin
        tail = r >= self.r_max
        mid = ~lin & ~tail
        out[lin] = math.pi - self.c0 * self.d00 * r[lin]
        out[tail] = self._tail_const / r[tail]
        if np.any(mid):
            out[mid] = self._backward(r[mid])
        return out

    def dpsi0(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        out = np.empty(r.shape)
        lin = r <= self.r_lin
        tail = r >= self.r_max
        mid = ~lin & ~tail
        out[lin] = self.c0 * self.d00
        out[tail] = self._tail_const / r[tail] ** 2
        if np.any(mid):
            out[mid] = -self._backward(r[mid], 1)
        return out

    def angles(self, r) -> tuple[np.ndarray, np.ndarray]:
        """(sin psi0, cos psi0) with the upper half taken from the complement."""
        r = np.asarray(r, dtype=float)
        tau = self.complement(r)
        theta = self.psi0(r)
        upper = tau < 0.5 * math.pi
        sin_t = np.where(upper, np.sin(tau), np.sin(theta))
        cos_t = np.where(upper, -np.cos(tau), np.cos(theta))
        return sin_t, cos_t

    def radius_from_angle(self, theta=None, tau=None) -> np.ndarray:
        """
        Invert psi0: given theta = psi0(r) (or tau = pi - theta), return r.

        Uses the analytic linear and tail branches and bisection on the cubic
        interpolant in between.
        """
        if tau is None:
            tau = math.pi - np.asarray(theta, dtype=float)
        tau = np.asarray(tau, dtype=float)
        r = np.empty(tau.shape)

        lin = tau >= math.pi - self.c0 * self.d00 * self.r_lin
        tail = tau <= self.complement_nodes[-1]
        mid = ~lin & ~tail
        r[lin] = (math.pi - tau[lin]) / (self.c0 * self.d00)
        with np.errstate(divide="ignore"):
            r[tail] = self._tail_const / tau[tail]
        if np.any(mid):
            r[mid] = self._bisect(tau[mid])
        return r

    def _bisect(self, tau: np.ndarray) -> np.ndarray:
        # complement_nodes is decreasing; bracket each target between two nodes
        desc = self.complement_nodes[::-1]
        k = np.searchsorted(desc, tau, side="left")
        hi_idx = self.nodes.size - 1 - np.clip(k - 1, 0, self.nodes.size - 1)
        lo_idx = np.clip(hi_idx - 1, 0, self.nodes.size - 1)
        lo = self.nodes[lo_idx].copy()
        hi = self.nodes[hi_idx].copy()
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            above = self._backward(mid) > tau
            lo = np.where(above, mid, lo)
            hi = np.where(above, hi, mid)
            if np.all(hi - lo <= 1e-15 * np.maximum(hi, 1.0)):
                break
        return 0.5 * (lo + hi)

    # Sphere maps

    def to_sphere(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        r = np.linalg.norm(x, axis=-1)
        sin_t, cos_t = self.angles(r)
        with np.errstate(invalid="ignore", divide="ignore"):
            u = np.where(r[..., None] > 0.0, x / r[..., None], 0.0)
        head = sin_t[..., None] * u
        return np.concatenate([head, -cos_t[..., None]], axis=-1)

    def from_sphere(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        check_on_sphere(y)
        head = y[..., :-1]
        s = np.linalg.norm(head, axis=-1)
        tau = np.arctan2(s, y[..., -1])
        if np.any(tau == 0.0):
            raise InputError("The north pole has no preimage")
        r = self.radius_from_angle(tau=tau)
        with np.errstate(invalid="ignore", divide="ignore"):
            u = np.where(s[..., None] > 0.0, head / s[..., None], 0.0)
        return r[..., None] * u

    def jacobian(self, x) -> np.ndarray:
        """Analytic gradient of the sphere map, shape (..., m+1, m)."""
        x = np.asarray(x, dtype=float)
        m = x.shape[-1]
        r = np.linalg.norm(x, axis=-1)
        sin_t, cos_t = self.angles(r)
        dtheta = self.dpsi0(r)
        with np.errstate(invalid="ignore", divide="ignore"):
            u = np.where(r[..., None] > 0.0, x / r[..., None], 0.0)
            sin_over_r = np.where(r > 0.0, sin_t / np.where(r > 0.0, r, 1.0), self.c0 * self.d00)
        uu = u[..., :, None] * u[..., None, :]
        eye = np.broadcast_to(np.eye(m), uu.shape)
        top = (cos_t * dtheta)[..., None, None] * uu + sin_over_r[..., None, None] * (eye - uu)
        bottom = (sin_t * dtheta)[..., None] * u
        return np.concatenate([top, bottom[..., None, :]], axis=-2)

    def gradient_norm(self, x) -> np.ndarray:
        """Operator norm of the analytic gradient: max(psi0', sin psi0 / r)."""
        x = np.asarray(x, dtype=float)
        r = np.linalg.norm(x, axis=-1)
        sin_t, _ = self.angles(r)
        with np.errstate(invalid="ignore", divide="ignore"):
            ratio = np.where(r > 0.0, sin_t / np.where(r > 0.0, r, 1.0), self.c0 * self.d00)
        return np.maximum(self.dpsi0(r), ratio)

    def majorant(self, x) -> np.ndarray:
        """2 psi0' + 2 sin(psi0)/r, an upper bound of the gradient norm."""
        x = np.asarray(x, dtype=float)
        r = np.linalg.norm(x, axis=-1)
        sin_t, _ = self.angles(r)
        with np.errstate(invalid="ignore", divide="ignore"):
            ratio = np.where(r > 0.0, sin_t / np.where(r > 0.0, r, 1.0), self.c0 * self.d00)
        return 2.0 * self.dpsi0(r) + 2.0 * ratio

    def export_csv(self, path: Path) -> Path:
        """Write columns r, psi0, psi0' at the table nodes."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as f:
            f.write(f"# c0={self.c0!r} r0={self.r0!r} r_max={self.r_max!r}\n")
            writer = csv.writer(f)
            writer.writerow(["r", "psi0", "dpsi0"])
            for r, p, dp in zip(self.nodes, self.psi0_nodes, self.dpsi0_nodes):
                writer.writerow([repr(float(r)), repr(float(p)), repr(float(dp))])
        log.info("Profile table written: %s", path)
        return path


def _profile_nodes(r_lin: float, r_jump: float, r_max: float,
                   breakpoints: np.ndarray) -> np.ndarray:
    uniform_end = r_jump + 2.0
    count = int(math.ceil((uniform_end - r_lin) / UNIFORM_STEP))
    uniform = r_lin + UNIFORM_STEP * np.arange(count + 1)
    n_geo = int(math.ceil(math.log(r_max / uniform[-1]) / math.log(GEOMETRIC_RATIO)))
    geometric = uniform[-1] * GEOMETRIC_RATIO ** np.arange(1, n_geo + 1)
    geometric[-1] = r_max

    pieces = [np.array([0.0, r_lin]), uniform, geometric]
    for b in breakpoints:
        if uniform_end < b < r_max:
            pieces.append(np.arange(b - 0.5, b + 1.5, UNIFORM_STEP))
    nodes = np.unique(np.concatenate(pieces))
    return nodes[(nodes >= 0.0) & (nodes <= r_max)]


def build_profile(D: Callable, tail_factor: float = TAIL_FACTOR) -> DampedDiffeomorphism:
    """
    Build the damped diffeomorphism for a damping profile D.

    D0 = min(1/4, r^-2) D, D1 = D0(0) up to 1 + pi/D0(0) and min(D0, r^-2) beyond,
    psi1 = one-sided average of D1, c0 = pi / |psi1|_1, psi0 = c0 * cumulative psi1.

    Raises:
        InputError: If D is out of range or not nonincreasing
    """
    check_damping(D)
    d00 = 0.25 * float(np.asarray(D(np.array([0.0])))[0])
    r_lin = math.pi / d00
    r_jump = 1.0 + r_lin
    r_max = tail_factor * r_jump

    def D0(r):
        r = np.asarray(r, dtype=float)
        with np.errstate(divide="ignore"):
            inv_sq = np.where(r > 0.0, 1.0 / np.where(r > 0.0, r, 1.0) ** 2, np.inf)
        return np.minimum(0.25, inv_sq) * np.asarray(D(r), dtype=float)

    def D1(r):
        r = np.asarray(r, dtype=float)
        far = np.minimum(D0(r), 1.0 / np.maximum(r, 1.0) ** 2)
        return np.where(r <= r_jump, d00, far)

    def psi1(r):
        r = np.asarray(r, dtype=float)
        out = D1(r[..., None] + _GL_S) @ _SMOOTH_W
        return np.where(r <= r_lin, d00, out)

    breakpoints = np.asarray(getattr(D, "breakpoints", lambda: np.empty(0))(), dtype=float)
    nodes = _profile_nodes(r_lin, r_jump, r_max, breakpoints)

    a, b = nodes[:-1], nodes[1:]
    half = 0.5 * (b - a)
    mid = 0.5 * (a + b)
    pts = mid[:, None] + half[:, None] * _INT_S
    pieces = (psi1(pts) @ _INT_W) * half
    pieces[b <= r_lin] = d00 * (b - a)[b <= r_lin]

    psi1_nodes = psi1(nodes)
    tail = float(psi1_nodes[-1] * r_max)
    total = float(np.sum(pieces)) + tail
    c0 = math.pi / total

    backward = (np.concatenate([np.cumsum(pieces[::-1])[::-1], [0.0]]) + tail) * c0
    dpsi0 = c0 * psi1_nodes

    profile = DampedDiffeomorphism(
        damping=D,
        c0=c0,
        d00=d00,
        r_lin=r_lin,
        r_jump=r_jump,
        r0=2.0 * math.pi / d00,
        r_max=r_max,
        nodes=nodes,
        psi0_nodes=math.pi - backward,
        dpsi0_nodes=dpsi0,
        complement_nodes=backward,
        _backward=interpolate.CubicHermiteSpline(nodes, backward, -dpsi0),
        _tail_const=float(backward[-1] * r_max),
    )
    log.debug("Built profile: c0=%.6f r_lin=%.4f r0=%.4f nodes=%s tail=%.3e",
              c0, r_lin, profile.r0, nodes.size, backward[-1])
    return profile


def to_sphere(x, profile: DampedDiffeomorphism) -> np.ndarray:
    """Map phase-space points (..., m) to the unit sphere in R^(m+1)."""
    return profile.to_sphere(x)


def from_sphere(y, profile: DampedDiffeomorphism) -> np.ndarray:
    """Inverse of to_sphere; the north pole has no preimage."""
    return profile.from_sphere(y)


def check_on_sphere(y: np.ndarray, tol: float = SPHERE_TOL):
    norms = np.linalg.norm(np.asarray(y, dtype=float), axis=-1)
    off = np.abs(norms - 1.0) > tol
    if np.any(off):
        raise InputError(f"Point off the unit sphere: |y| = {float(norms[off].flat[0])!r}")


def north_pole(m: int) -> np.ndarray:
    pole = np.zeros(m + 1)
    pole[-1] = 1.0
    return pole


def distance_to_north(y) -> np.ndarray:
    """Geodesic distance of sphere points to N."""
    y = np.asarray(y, dtype=float)
    return np.arctan2(np.linalg.norm(y[..., :-1], axis=-1), y[..., -1])


# ── Gradient bounds ─────────────────────────────────────────────────────


@dataclass
class GradientBoundReport:
    """Finite-difference check of the global and decay gradient bounds."""

    passed: bool
    samples: int
    max_global_ratio: float
    max_decay_ratio: float
    majorant_ok: bool
    epsilon: float
    violations: list[np.ndarray] = field(default_factory=list)


def finite_difference_jacobian(profile: DampedDiffeomorphism, x: np.ndarray) -> np.ndarray:
    """Central-difference gradient of the sphere map at points (K, m)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    k, m = x.shape
    step = 1e-5 * np.maximum(1.0, np.linalg.norm(x, axis=1))
    jac = np.empty((k, m + 1, m))
    for j in range(m):
        e = np.zeros(m)
        e[j] = 1.0
        plus = profile.to_sphere(x + step[:, None] * e)
        minus = profile.to_sphere(x - step[:, None] * e)
        jac[:, :, j] = (plus - minus) / (2.0 * step[:, None])
    return jac


def gradient_bound_check(profile: DampedDiffeomorphism, samples,
                         epsilon: float = 1e-3) -> GradientBoundReport:
    """
    Check |grad psi| <= D(0)(1+eps) everywhere and <= D(|x|)(1+eps) for |x| >= r0.

    Norms come from finite differences; the analytic majorant 2 psi0' + 2 sin(psi0)/r
    is compared against the same norms.
    """
    x = np.atleast_2d(np.asarray(samples, dtype=float))
    jac = finite_difference_jacobian(profile, x)
    norms = np.linalg.svd(jac, compute_uv=False)[:, 0]
    r = np.linalg.norm(x, axis=1)
    D = profile.damping
    d0 = float(np.asarray(D(np.array([0.0])))[0])
    d_r = np.asarray(D(r), dtype=float)

    global_ratio = norms / d0
    far = r >= profile.r0
    decay_ratio = np.where(far, norms / d_r, 0.0)
    bad = (global_ratio > 1.0 + epsilon) | (decay_ratio > 1.0 + epsilon)
    majorant_ok = bool(np.all(profile.majorant(x) * (1.0 + epsilon) >= norms))

    report = GradientBoundReport(
        passed=bool(not np.any(bad)) and majorant_ok,
        samples=x.shape[0],
        max_global_ratio=float(np.max(global_ratio)) if x.size else 0.0,
        max_decay_ratio=float(np.max(decay_ratio)) if x.size else 0.0,
        majorant_ok=majorant_ok,
        epsilon=epsilon,
        violations=[x[i] for i in np.flatnonzero(bad)[:10]],
    )
    if not report.passed:
        log.warning("Gradient bound violated at %s samples", int(np.count_nonzero(bad)))
    return report


# ── Compactified field ──────────────────────────────────────────────────


PhaseField = Callable[[np.ndarray], np.ndarray]


def compactified_field(y, b: PhaseField, profile: DampedDiffeomorphism) -> np.ndarray:
    """
    c(y) = grad psi(phi(y)) b(phi(y)), with c(N) = 0.

    Args:
        y: Sphere points, shape (..., m+1)
        b: Phase-space field, maps (K, m) to (K, m)
        profile: Damped diffeomorphism

    Raises:
        InputError: If a point is off the unit sphere
    """
    y = np.asarray(y, dtype=float)
    check_on_sphere(y)
    return _compactified(y, b, profile)


def _compactified(y: np.ndarray, b: PhaseField, profile: DampedDiffeomorphism) -> np.ndarray:
    flat = y.reshape(-1, y.shape[-1])
    out = np.zeros_like(flat)
    at_pole = distance_to_north(flat) == 0.0
    if np.any(~at_pole):
        pts = flat[~at_pole]
        x = profile.from_sphere(pts / np.linalg.norm(pts, axis=-1, keepdims=True))
        bx = np.asarray(b(x), dtype=float).reshape(x.shape)
        out[~at_pole] = np.einsum("kij,kj->ki", profile.jacobian(x), bx)
    return out.reshape(y.shape)


@dataclass
class SphereTrajectory:
    times: np.ndarray
    points: np.ndarray
    reached_north: bool = False
    arrival_time: Optional[float] = None
    rejections: int = 0

    def projected(self, profile: DampedDiffeomorphism) -> np.ndarray:
        """Phase-space trajectory (points at N are dropped)."""
        keep = distance_to_north(self.points) > 0.0
        return profile.from_sphere(self.points[keep])


def integrate_on_sphere(z0, b: PhaseField, profile: DampedDiffeomorphism, dt: float,
                        t_end: float, arrival_distance: float = 1e-2,
                        max_halvings: int = 12) -> SphereTrajectory:
    """
    RK4 on the sphere with renormalization after every step.

    A step whose renormalization correction exceeds 1e-3 is retried with half the
    step; arrival within arrival_distance of N stops the integration and the arrival
    time is interpolated linearly in the distance to N.

    Raises:
        StepRejectedError: If a step is still rejected after max_halvings halvings
    """
    if not (dt > 0) or not (t_end >= 0):
        raise ConfigurationError("integrate_on_sphere needs dt > 0 and t_end >= 0")
    y = profile.to_sphere(np.asarray(z0, dtype=float))

    def c(point):
        return _compactified(point / np.linalg.norm(point), b, profile)

    times = [0.0]
    points = [y.copy()]
    t = 0.0
    rejections = 0
    tau = float(distance_to_north(y))
    if tau <= arrival_distance:
        return SphereTrajectory(np.array(times), np.array(points), True, 0.0, 0)

    while t < t_end * (1.0 - 1e-14):
        h = min(dt, t_end - t)
        for halving in range(max_halvings + 1):
            k1 = c(y)
            k2 = c(y + 0.5 * h * k1)
            k3 = c(y + 0.5 * h * k2)
            k4 = c(y + h * k3)
            y_new = y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            correction = abs(float(np.linalg.norm(y_new)) - 1.0)
            if correction <= RENORM_TOL:
                break
            rejections += 1
            log.debug("Sphere step rejected at t=%.6g (correction %.3e), halving", t, correction)
            h *= 0.5
        else:
            raise StepRejectedError(
                f"Renormalization correction {correction:.3e} after {max_halvings} halvings",
                t=t,
            )

        y = y_new / np.linalg.norm(y_new)
        tau_new = float(distance_to_north(y))
        if tau_new <= arrival_distance:
            frac = (tau - arrival_distance) / (tau - tau_new) if tau > tau_new else 1.0
            arrival = t + h * frac
            times.append(t + h)
            points.append(y.copy())
            log.info("Trajectory reached the north-pole neighbourhood at t=%.9g", arrival)
            return SphereTrajectory(np.array(times), np.array(points), True, arrival, rejections)
        t += h
        tau = tau_new
        times.append(t)
        points.append(y.copy())

    return SphereTrajectory(np.array(times), np.array(points), False, None, rejections)


def integrate_euclidean(z0, b: PhaseField, dt: float, t_end: float) -> tuple[np.ndarray, np.ndarray]:
    """Fixed-step RK4 in phase space; returns (times, states)."""
    z = np.asarray(z0, dtype=float).copy()

    def f(point):
        return np.asarray(b(point[None, :]), dtype=float)[0]

    steps = int(round(t_end / dt))
    times = np.arange(steps + 1) * dt
    states = np.empty((steps + 1, z.size))
    states[0] = z
    for i in range(steps):
        k1 = f(z)
        k2 = f(z + 0.5 * dt * k1)
        k3 = f(z + 0.5 * dt * k2)
        k4 = f(z + dt * k3)
        z = z + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        states[i + 1] = z
    return times, states


def north_radius(profile: DampedDiffeomorphism, arrival_distance: float) -> float:
    """Phase-space radius whose image lies at the given distance from N."""
    return float(profile.radius_from_angle(tau=np.array([arrival_distance]))[0])


# ── No-blow-up certificate ──────────────────────────────────────────────


@dataclass
class CertificateSeries:
    """Integrand of the no-blow-up certificate sampled along a run."""

    times: list[float] = field(default_factory=list)
    values: list[float] = field(default_factory=list)

    def append(self, t: float, value: float):
        self.times.append(float(t))
        self.values.append(float(value))

    def partial(self) -> float:
        return noblowup_certificate(self)


def certificate_integrand(x: np.ndarray, v: np.ndarray, accel: np.ndarray,
                          w: np.ndarray) -> float:
    """sum w |b| / ((1 + |z|) log(2 + |z|)) with z = (x, v) and b = (v, E)."""
    if w.size == 0:
        return 0.0
    z_norm = np.sqrt(np.sum(x * x, axis=1) + np.sum(v * v, axis=1))
    b_norm = np.sqrt(np.sum(v * v, axis=1) + np.sum(accel * accel, axis=1))
    terms = w * b_norm / ((1.0 + z_norm) * np.log(2.0 + z_norm))
    return math.fsum(terms)


def noblowup_certificate(series: CertificateSeries, method: str = "trapezoid") -> float:
    """
    Time integral of the certificate integrand.

    "trapezoid" uses every sample; "midpoint" uses the odd samples as midpoints of
    double-width intervals (a trailing odd interval falls back to the trapezoid).
    """
    t = np.asarray(series.times, dtype=float)
    f = np.asarray(series.values, dtype=float)
    if t.size < 2:
        return 0.0
    if method == "trapezoid":
        return float(integrate.trapezoid(f, t))
    if method == "midpoint":
        intervals = t.size - 1
        pairs = intervals // 2
        total = 0.0
        if pairs:
            odd = np.arange(1, 2 * pairs, 2)
            total = math.fsum((t[odd + 1] - t[odd - 1]) * f[odd])
        if intervals % 2:
            total += 0.5 * (t[-1] - t[-2]) * (f[-1] + f[-2])
        return float(total)
    raise ConfigurationError(f"Unknown certificate quadrature: {method}")
