"""
VlasovFlow Kernels
Exact and mollified Coulomb/Newton kernels, fundamental solutions and mollifiers.

The mollified kernel K_n = K * psi_n of a radial bump is evaluated through Newton's
theorem: inside the ball of radius 1/n it is c_d n^d q(n|x|) x, where q(rho) is the
bump mass inside radius rho divided by rho^d. q is tabulated once per (d, shape) by
quadrature on [0, 1] and interpolated with a cubic spline.
"""

import csv
import functools
import json
import logging
import math
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy import integrate, interpolate, optimize, special

from vlasov_flow.errors import ConfigurationError, SingularityError

log = logging.getLogger("VlasovFlow")


SUPPORTED_DIMENSIONS = (1, 2, 3)

# Bump shapes psi(y) = C (1 - |y|^2)^k on |y| < 1
MOLLIFIER_SHAPES = {
    "poly4": 4,
    "poly6": 6,
}

# Radial nodes of the unit mass table
TABLE_NODES = 2049


@dataclass(frozen=True)
class KernelSpec:
    """Kernel specification: dimension, sign, mollification level and bump shape."""

    d: int
    sigma: int = 1
    n: float = math.inf  # math.inf means unmollified
    shape: str = "poly4"

    def __post_init__(self):
        if self.d not in SUPPORTED_DIMENSIONS:
            raise ConfigurationError(f"Unsupported dimension d={self.d}")
        if self.sigma not in (-1, 1):
            raise ConfigurationError(f"sigma must be +1 or -1, got {self.sigma}")
        if not (self.n >= 1):
            raise ConfigurationError(f"Mollification level must be >= 1 or inf, got {self.n}")
        if self.shape not in MOLLIFIER_SHAPES:
            raise ConfigurationError(f"Unknown mollifier shape: {self.shape}")

    @property
    def mollified(self) -> bool:
        return math.isfinite(self.n)

    @property
    def radius(self) -> float:
        """Mollification radius 1/n (0 when unmollified)."""
        return 1.0 / self.n if self.mollified else 0.0

    def to_header(self) -> dict:
        """JSON-safe form for output file headers."""
        data = asdict(self)
        data["n"] = self.n if self.mollified else None
        return data

    @classmethod
    def from_header(cls, data: dict) -> "KernelSpec":
        n = data.get("n")
        return cls(
            d=int(data["d"]),
            sigma=int(data.get("sigma", 1)),
            n=math.inf if n is None else float(n),
            shape=data.get("shape", "poly4"),
        )

    def describe(self) -> str:
        return json.dumps(self.to_header(), sort_keys=True)


# ── Constants ───────────────────────────────────────────────────────────


def unit_sphere_area(d: int) -> float:
    """Surface measure of the unit (d-1)-sphere (2 points for d=1)."""
    if d not in SUPPORTED_DIMENSIONS:
        raise ConfigurationError(f"Unsupported dimension d={d}")
    return 2.0 * math.pi ** (d / 2.0) / math.gamma(d / 2.0)


def dimensional_constant(d: int) -> float:
    """
    Normalization c_d with c_d div(x/|x|^d) = delta_0.

    Args:
        d: Spatial dimension (1, 2 or 3)

    Returns:
        1 / |S^{d-1}|, i.e. 1/2, 1/(2 pi), 1/(4 pi)

    Raises:
        ConfigurationError: If d is not supported
    """
    return 1.0 / unit_sphere_area(d)


# ── Exact kernel and fundamental solution ───────────────────────────────


def _as_points(x, d: int) -> np.ndarray:
    pts = np.asarray(x, dtype=float)
    if pts.shape[-1] != d:
        raise ConfigurationError(f"Expected points with last axis {d}, got shape {pts.shape}")
    return pts


def poisson_kernel(x, spec: KernelSpec) -> np.ndarray:
    """
    Exact kernel sigma c_d x / |x|^d, batched over the last axis.

    Raises:
        SingularityError: If any point is the origin
    """
    pts = _as_points(x, spec.d)
    r = np.linalg.norm(pts, axis=-1)
    if np.any(r == 0.0):
        raise SingularityError("poisson_kernel evaluated at x = 0; use the mollified kernel")
    factor = (spec.sigma * dimensional_constant(spec.d)) / r ** spec.d
    return pts * factor[..., None]


def fundamental_solution(x, d: int) -> np.ndarray:
    """
    Fundamental solution H with -Laplace(H) = delta_0.

    d=3: c_3/|x|; d=2: -log|x| / (2 pi); d=1: -|x|/2.

    Raises:
        SingularityError: If any point is the origin
    """
    pts = _as_points(x, d)
    r = np.linalg.norm(pts, axis=-1)
    if np.any(r == 0.0):
        raise SingularityError("fundamental_solution evaluated at x = 0")
    return radial_fundamental_solution(r, d)


def radial_fundamental_solution(r, d: int) -> np.ndarray:
    """H as a function of the radius (no singularity check)."""
    r = np.asarray(r, dtype=float)
    if d == 3:
        return dimensional_constant(3) / r
    if d == 2:
        return -np.log(r) / (2.0 * math.pi)
    if d == 1:
        return -0.5 * r
    raise ConfigurationError(f"Unsupported dimension d={d}")


# ── Mollifier ───────────────────────────────────────────────────────────


@functools.lru_cache(maxsize=None)
def mollifier_constant(d: int, shape: str = "poly4") -> float:
    """C_d such that C_d (1 - |y|^2)^k has unit integral over the unit ball."""
    k = MOLLIFIER_SHAPES[shape]
    radial = 0.5 * special.beta(d / 2.0, k + 1.0)
    return 1.0 / (unit_sphere_area(d) * radial)


def mollifier(n: float, x, d: int, shape: str = "poly4") -> np.ndarray:
    """psi_n(x) = n^d psi(n x), supported in |x| < 1/n with unit integral."""
    if not (n >= 1) or not math.isfinite(n):
        raise ConfigurationError(f"Mollification level must be finite and >= 1, got {n}")
    pts = _as_points(x, d)
    s = np.linalg.norm(pts, axis=-1) * n
    k = MOLLIFIER_SHAPES[shape]
    inside = np.clip(1.0 - s * s, 0.0, None)
    return n ** d * mollifier_constant(d, shape) * inside ** k


def mollifier_radial(rho, d: int, shape: str = "poly4") -> np.ndarray:
    """Unit-scale bump as a function of |y|."""
    rho = np.asarray(rho, dtype=float)
    k = MOLLIFIER_SHAPES[shape]
    return mollifier_constant(d, shape) * np.clip(1.0 - rho * rho, 0.0, None) ** k


# ── Mollified kernel ────────────────────────────────────────────────────


@functools.lru_cache(maxsize=None)
def _mass_ratio_table(d: int, shape: str) -> interpolate.CubicSpline:
    """
    Spline of q(rho) = M(rho) / rho^d on [0, 1], M the unit bump mass in the ball.

    Built once by interval-wise adaptive quadrature; immutable afterwards.
    """
    area = unit_sphere_area(d)

    def shell(s: float) -> float:
        return area * float(mollifier_radial(s, d, shape)) * s ** (d - 1)

    rho = np.linspace(0.0, 1.0, TABLE_NODES)
    mass = np.zeros_like(rho)
    for i in range(1, rho.size):
        piece, _ = integrate.quad(shell, rho[i - 1], rho[i], epsabs=1e-15, epsrel=1e-13)
        mass[i] = mass[i - 1] + piece

    q = np.empty_like(rho)
    q[0] = area * mollifier_constant(d, shape) / d
    q[1:] = mass[1:] / rho[1:] ** d
    log.debug("Built mollified-kernel table d=%s shape=%s (M(1) = %.15f)", d, shape, mass[-1])
    return interpolate.CubicSpline(rho, q)


def enclosed_mass(rho, d: int, shape: str = "poly4") -> np.ndarray:
    """Closed-form unit bump mass inside radius rho (regularized incomplete beta)."""
    rho = np.clip(np.asarray(rho, dtype=float), 0.0, 1.0)
    return special.betainc(d / 2.0, MOLLIFIER_SHAPES[shape] + 1.0, rho * rho)


def mollified_kernel(x, spec: KernelSpec) -> np.ndarray:
    """
    sigma (K * psi_n)(x), batched over the last axis.

    Equals the exact kernel for |x| >= 1/n and vanishes at x = 0.

    Raises:
        ConfigurationError: If spec is unmollified
    """
    if not spec.mollified:
        raise ConfigurationError("mollified_kernel needs a finite mollification level n")
    pts = _as_points(x, spec.d)
    r = np.linalg.norm(pts, axis=-1)
    n, d = spec.n, spec.d
    coeff = spec.sigma * dimensional_constant(d)

    factor = np.empty_like(r)
    inner = r * n < 1.0
    if np.any(inner):
        factor[inner] = coeff * n ** d * _mass_ratio_table(d, spec.shape)(r[inner] * n)
    outer = ~inner
    if np.any(outer):
        factor[outer] = coeff / r[outer] ** d
    return pts * factor[..., None]


def mollified_kernel_radial(r, spec: KernelSpec) -> np.ndarray:
    """|K_n| as a function of the radius."""
    r = np.abs(np.asarray(r, dtype=float))
    pts = np.zeros(r.shape + (spec.d,))
    pts[..., 0] = r
    return np.abs(mollified_kernel(pts, spec)[..., 0])


def kernel_evaluator(spec: KernelSpec) -> Callable[[np.ndarray], np.ndarray]:
    """Mollified kernel when n is finite, exact kernel otherwise."""
    if spec.mollified:
        return functools.partial(mollified_kernel, spec=spec)
    return functools.partial(poisson_kernel, spec=spec)


def kernel_bound(spec: KernelSpec) -> float:
    """
    sup |K_n| by a dense radial scan refined with a bounded scalar search.

    The supremum is c_d n^{d-1} max M(rho)/rho^{d-1}; it is attained inside the ball.
    """
    if not spec.mollified:
        return math.inf
    d = spec.d
    table = _mass_ratio_table(d, spec.shape)

    def profile(rho):
        return table(rho) * rho

    rho = np.linspace(0.0, 1.0, 20001)
    values = profile(rho)
    k = int(np.argmax(values))
    lo, hi = rho[max(k - 1, 0)], rho[min(k + 1, rho.size - 1)]
    best = float(values[k])
    if hi > lo:
        res = optimize.minimize_scalar(
            lambda s: -float(profile(s)), bounds=(lo, hi), method="bounded",
            options={"xatol": 1e-14},
        )
        best = max(best, -float(res.fun))
    return dimensional_constant(d) * spec.n ** (d - 1) * best * (1.0 + 1e-12)


# ── Flux oracle ─────────────────────────────────────────────────────────


def sphere_flux(field: Callable[[np.ndarray], np.ndarray], d: int, radius: float,
                quad_points: int = 64) -> float:
    """
    Outward flux of a vector field through the sphere of the given radius.

    d=1 sums the two endpoints, d=2 uses the periodic trapezoid rule in the angle,
    d=3 uses Gauss-Legendre in cos(theta) times the trapezoid rule in phi.
    """
    if d == 1:
        pts = np.array([[radius], [-radius]])
        normals = np.array([[1.0], [-1.0]])
        return float(np.sum(field(pts) * normals))

    if d == 2:
        theta = np.linspace(0.0, 2.0 * math.pi, quad_points, endpoint=False)
        normals = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
        flux = np.sum(field(radius * normals) * normals, axis=-1)
        return float(np.sum(flux) * (2.0 * math.pi / quad_points) * radius)

    if d == 3:
        mu, mu_w = np.polynomial.legendre.leggauss(quad_points)
        phi = np.linspace(0.0, 2.0 * math.pi, 2 * quad_points, endpoint=False)
        m, p = np.meshgrid(mu, phi, indexing="ij")
        s = np.sqrt(1.0 - m * m)
        normals = np.stack([s * np.cos(p), s * np.sin(p), m], axis=-1)
        flux = np.sum(field(radius * normals) * normals, axis=-1)
        weights = mu_w[:, None] * (2.0 * math.pi / phi.size)
        return float(np.sum(flux * weights) * radius ** 2)

    raise ConfigurationError(f"Unsupported dimension d={d}")


# ── Export ──────────────────────────────────────────────────────────────


def export_table_csv(spec: KernelSpec, path: Path, samples: int = 513,
                     r_max: Optional[float] = None) -> Path:
    """Write columns r, |K_n|(r) with the kernel spec as a comment header."""
    if not spec.mollified:
        raise ConfigurationError("Only mollified kernels have a radial table")
    r_max = 2.0 / spec.n if r_max is None else r_max
    r = np.linspace(0.0, r_max, samples)
    values = mollified_kernel_radial(r, spec)

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        f.write(f"# kernel: {spec.describe()}\n")
        writer = csv.writer(f)
        writer.writerow(["r", "abs_K_n"])
        for ri, ki in zip(r, values):
            writer.writerow([repr(float(ri)), repr(float(ki))])
    log.info("Kernel table written: %s", path)
    return path
