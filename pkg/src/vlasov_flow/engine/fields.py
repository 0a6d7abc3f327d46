"""
VlasovFlow Fields
Cloud-in-cell deposition, the mollified-kernel field solve and the effective-mass ledger.
"""

import functools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import fft, integrate

from vlasov_flow.engine.kernels import (
    KernelSpec,
    dimensional_constant,
    mollified_kernel,
    mollifier,
    poisson_kernel,
    radial_fundamental_solution,
)
from vlasov_flow.errors import ConfigurationError

log = logging.getLogger("VlasovFlow")


# Relative tolerance for the background mass check
BACKGROUND_MASS_RTOL = 1e-8


@dataclass(frozen=True)
class Grid:
    """Uniform spatial grid; node i sits at origin + i*h on every axis."""

    origin: tuple[float, ...]
    spacing: float
    shape: tuple[int, ...]
    periodic: bool = False

    def __post_init__(self):
        if len(self.origin) != len(self.shape):
            raise ConfigurationError("Grid origin and shape disagree on the dimension")
        if not (self.spacing > 0):
            raise ConfigurationError(f"Grid spacing must be positive, got {self.spacing}")
        if min(self.shape) < 2:
            raise ConfigurationError(f"Grid needs at least 2 nodes per axis, got {self.shape}")

    @classmethod
    def centered(cls, d: int, half_width: float, cells: int) -> "Grid":
        """Non-periodic grid of cells+1 nodes per axis covering [-half_width, half_width]^d."""
        h = 2.0 * half_width / cells
        return cls(origin=(-half_width,) * d, spacing=h, shape=(cells + 1,) * d)

    @classmethod
    def torus(cls, length: float, cells: int, d: int = 1) -> "Grid":
        """Periodic grid of `cells` nodes on [0, length)^d."""
        return cls(origin=(0.0,) * d, spacing=length / cells, shape=(cells,) * d,
                   periodic=True)

    @property
    def d(self) -> int:
        return len(self.shape)

    @property
    def cell_volume(self) -> float:
        return self.spacing ** self.d

    @property
    def lengths(self) -> tuple[float, ...]:
        """Periodic box lengths (only meaningful on a torus)."""
        return tuple(n * self.spacing for n in self.shape)

    def axes(self) -> list[np.ndarray]:
        return [o + self.spacing * np.arange(n) for o, n in zip(self.origin, self.shape)]

    def nodes(self) -> np.ndarray:
        """Node coordinates, shape grid.shape + (d,)."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack(mesh, axis=-1)

    def to_header(self) -> dict:
        return {
            "origin": list(self.origin),
            "spacing": self.spacing,
            "shape": list(self.shape),
            "periodic": self.periodic,
        }

    @classmethod
    def from_header(cls, data: dict) -> "Grid":
        return cls(
            origin=tuple(float(o) for o in data["origin"]),
            spacing=float(data["spacing"]),
            shape=tuple(int(n) for n in data["shape"]),
            periodic=bool(data.get("periodic", False)),
        )


@dataclass(frozen=True)
class FieldState:
    """Deposited density, force field and optional potential on a grid."""

    grid: Grid
    rho: np.ndarray
    E: np.ndarray
    spec: KernelSpec
    V: Optional[np.ndarray] = None
    background: Optional[np.ndarray] = None

    @property
    def mass(self) -> float:
        return float(np.sum(self.rho) * self.grid.cell_volume)


@dataclass
class EffectiveMassLedger:
    """Partition of the initial mass into active and escaped buckets."""

    total_initial_mass: float = 0.0
    active_mass: float = 0.0
    escaped_v_mass: float = 0.0
    escaped_x_mass: float = 0.0

    @property
    def effective_mass(self) -> float:
        """Mass still in physical space: active plus escaped-in-velocity."""
        return self.active_mass + self.escaped_v_mass

    def balance_error(self) -> float:
        """Relative mismatch of the bucket sum against the initial mass."""
        parts = math.fsum([self.active_mass, self.escaped_v_mass, self.escaped_x_mass])
        scale = max(abs(self.total_initial_mass), 1e-300)
        return abs(parts - self.total_initial_mass) / scale


@dataclass
class DepositResult:
    """Density plus bookkeeping of particles that fell outside the grid."""

    rho: np.ndarray
    inside: np.ndarray
    outside_mass: float = 0.0
    deposited_mass: float = 0.0


# ── Cloud-in-cell ───────────────────────────────────────────────────────


@dataclass
class _Stencil:
    """Flat node indices and multilinear weights for each of the 2^d corners."""

    indices: list[np.ndarray] = field(default_factory=list)
    weights: list[np.ndarray] = field(default_factory=list)
    inside: Optional[np.ndarray] = None


def _cic_stencil(x: np.ndarray, grid: Grid) -> _Stencil:
    x = np.asarray(x, dtype=float).reshape(-1, grid.d)
    origin = np.asarray(grid.origin)
    shape = np.asarray(grid.shape)
    u = (x - origin) / grid.spacing

    if grid.periodic:
        u = np.mod(u, shape)
        i0 = np.floor(u).astype(np.int64)
        i0 = np.minimum(i0, shape - 1)  # guards u == N after rounding
        frac = u - i0
        i1 = np.mod(i0 + 1, shape)
        inside = np.ones(x.shape[0], dtype=bool)
    else:
        inside = np.all((u >= 0.0) & (u <= shape - 1), axis=1)
        u = u[inside]
        i0 = np.minimum(np.floor(u).astype(np.int64), shape - 2)
        frac = u - i0
        i1 = i0 + 1

    stencil = _Stencil(inside=inside)
    for corner in range(2 ** grid.d):
        bits = [(corner >> a) & 1 for a in range(grid.d)]
        idx = tuple(i1[:, a] if b else i0[:, a] for a, b in enumerate(bits))
        weight = np.ones(frac.shape[0])
        for a, b in enumerate(bits):
            weight = weight * (frac[:, a] if b else 1.0 - frac[:, a])
        stencil.indices.append(np.ravel_multi_index(idx, grid.shape))
        stencil.weights.append(weight)
    return stencil


def deposit_points(x: np.ndarray, w: np.ndarray, grid: Grid) -> DepositResult:
    """
    Cloud-in-cell deposition of weighted points onto grid nodes.

    Accumulation uses a single ordered bincount, so the result does not depend on
    worker counts. Points outside a non-periodic grid are skipped and reported.
    """
    w = np.asarray(w, dtype=float).reshape(-1)
    size = int(np.prod(grid.shape))
    if w.size == 0:
        return DepositResult(rho=np.zeros(grid.shape), inside=np.zeros(0, dtype=bool))

    stencil = _cic_stencil(x, grid)
    w_in = w[stencil.inside]
    flat_idx = np.concatenate(stencil.indices)
    flat_w = np.concatenate([cw * w_in for cw in stencil.weights])
    rho = np.bincount(flat_idx, weights=flat_w, minlength=size).reshape(grid.shape)
    rho /= grid.cell_volume

    outside_mass = math.fsum(w[~stencil.inside])
    if outside_mass > 0.0:
        log.debug("%s particles outside the grid, mass %.3e routed to the ledger",
                  int(np.count_nonzero(~stencil.inside)), outside_mass)
    return DepositResult(
        rho=rho,
        inside=stencil.inside,
        outside_mass=outside_mass,
        deposited_mass=math.fsum(w_in),
    )


def deposit(ensemble, grid: Grid) -> np.ndarray:
    """Deposit the active particles of an ensemble; returns the density grid."""
    active = ensemble.active_mask()
    return deposit_points(ensemble.x[active], ensemble.w[active], grid).rho


def gather(values: np.ndarray, x: np.ndarray, grid: Grid) -> np.ndarray:
    """
    Interpolate node values (grid.shape + (c,)) to points with CIC weights.

    Points outside a non-periodic grid receive zero.
    """
    x = np.asarray(x, dtype=float).reshape(-1, grid.d)
    comps = values.reshape(int(np.prod(grid.shape)), -1)
    out = np.zeros((x.shape[0], comps.shape[1]))
    if x.shape[0] == 0:
        return out

    stencil = _cic_stencil(x, grid)
    acc = np.zeros((int(np.count_nonzero(stencil.inside)), comps.shape[1]))
    for idx, weight in zip(stencil.indices, stencil.weights):
        acc += weight[:, None] * comps[idx]
    out[stencil.inside] = acc
    if not np.all(stencil.inside):
        log.debug("%s points outside the grid receive zero field",
                  int(np.count_nonzero(~stencil.inside)))
    return out


# ── Free-space convolution ──────────────────────────────────────────────


class FreeSpaceConvolver:
    """
    Aperiodic discrete convolution sum_j k(x_i - x_j) u_j h^d on a fixed grid.

    The kernel is sampled at all offsets -(N-1)..(N-1) and wrapped into a box of
    pad_factor * N nodes per axis, so circular FFT convolution has no images.
    """

    def __init__(self, shape: tuple[int, ...], spacing: float,
                 kernel: Callable[[np.ndarray], np.ndarray], components: int,
                 origin_value: Optional[np.ndarray] = None, pad_factor: int = 2,
                 workers: Optional[int] = None):
        if pad_factor < 2:
            raise ConfigurationError(f"pad_factor must be >= 2, got {pad_factor}")
        self.shape = tuple(shape)
        self.spacing = spacing
        self.components = components
        self.workers = workers
        self.padded = tuple(pad_factor * n for n in self.shape)

        signed_axes = []
        valid_axes = []
        for n, p in zip(self.shape, self.padded):
            m = np.arange(p)
            signed = np.where(m < n, m, m - p)
            signed_axes.append(signed.astype(float))
            valid_axes.append(np.abs(signed) <= n - 1)

        mesh = np.meshgrid(*signed_axes, indexing="ij")
        offsets = np.stack(mesh, axis=-1) * spacing
        valid = functools.reduce(np.logical_and, np.meshgrid(*valid_axes, indexing="ij"))
        at_origin = np.all(offsets == 0.0, axis=-1)
        sample = valid & ~at_origin

        samples = np.zeros(self.padded + (components,))
        samples[sample] = np.asarray(kernel(offsets[sample])).reshape(-1, components)
        if origin_value is not None:
            samples[at_origin] = np.asarray(origin_value, dtype=float).reshape(components)

        axes = tuple(range(len(self.shape)))
        self._kernel_hat = [
            fft.rfftn(samples[..., c], s=self.padded, axes=axes, workers=workers)
            for c in range(components)
        ]
        self._scale = spacing ** len(self.shape)

    def __call__(self, values: np.ndarray) -> np.ndarray:
        axes = tuple(range(len(self.shape)))
        values_hat = fft.rfftn(values, s=self.padded, axes=axes, workers=self.workers)
        window = tuple(slice(0, n) for n in self.shape)
        out = np.empty(self.shape + (self.components,))
        for c, k_hat in enumerate(self._kernel_hat):
            conv = fft.irfftn(values_hat * k_hat, s=self.padded, axes=axes, workers=self.workers)
            out[..., c] = conv[window] * self._scale
        return out


# ── Field solver ────────────────────────────────────────────────────────


def check_resolution(spec: KernelSpec, grid: Grid):
    """Require a finite n with mollification radius 1/n covering at least one cell."""
    if not spec.mollified:
        raise ConfigurationError("Grid field solves need a mollified kernel (finite n)")
    if spec.n * grid.spacing > 1.0 + 1e-12:
        raise ConfigurationError(
            f"Mollification radius 1/n = {1.0 / spec.n:.6g} is below the grid spacing "
            f"{grid.spacing:.6g}"
        )
    if spec.d != grid.d:
        raise ConfigurationError(f"Kernel dimension {spec.d} does not match grid dimension {grid.d}")


class FieldSolver:
    """
    E = sigma K_n * (rho - rho_b) on a fixed grid.

    Free-space grids use a zero-padded FFT convolution with the tabulated mollified
    kernel. Periodic grids mollify the net density with a discrete psi_n stencil and
    invert the Laplacian spectrally (the mean is neutralized by the background).

    With track_mass the background keeps its shape but is rescaled on every solve
    to the deposited mass, so particles leaving the grid shrink it with them; the
    missing mass shows up in the effective-mass ledger. Without it a background
    whose mass differs from the density is a configuration error.
    """

    def __init__(self, grid: Grid, spec: KernelSpec, background: Optional[np.ndarray] = None,
                 pad_factor: int = 2, workers: Optional[int] = None,
                 track_mass: bool = False):
        check_resolution(spec, grid)
        self.grid = grid
        self.spec = spec
        self.workers = workers
        self.pad_factor = pad_factor
        self.track_mass = track_mass

        if background is not None:
            background = np.asarray(background, dtype=float)
            if background.shape != grid.shape:
                raise ConfigurationError(
                    f"Background shape {background.shape} does not match grid {grid.shape}"
                )
            if not grid.periodic and grid.d != 2:
                raise ConfigurationError("A background density is supported only for d=2 "
                                         "or periodic grids")
        self.background = background

        if grid.periodic:
            self._setup_periodic()
        else:
            self._convolver = FreeSpaceConvolver(
                grid.shape, grid.spacing, functools.partial(mollified_kernel, spec=spec),
                components=grid.d, pad_factor=pad_factor, workers=workers,
            )
        log.debug("FieldSolver ready: grid=%s periodic=%s kernel=%s",
                  grid.shape, grid.periodic, spec.describe())

    def _setup_periodic(self):
        grid, spec = self.grid, self.spec
        axes = tuple(range(grid.d))

        # Discrete mollifier stencil on the torus, normalized to unit mass
        signed = [np.where(np.arange(n) <= n // 2, np.arange(n), np.arange(n) - n) * grid.spacing
                  for n in grid.shape]
        offsets = np.stack(np.meshgrid(*signed, indexing="ij"), axis=-1)
        stencil = mollifier(spec.n, offsets, grid.d, spec.shape)
        stencil = stencil / np.sum(stencil)
        self._psi_hat = fft.rfftn(stencil, axes=axes, workers=self.workers).real

        k_axes = [2.0 * math.pi * fft.fftfreq(n, d=grid.spacing) for n in grid.shape[:-1]]
        k_axes.append(2.0 * math.pi * fft.rfftfreq(grid.shape[-1], d=grid.spacing))
        self._k = np.meshgrid(*k_axes, indexing="ij")
        k2 = sum(k * k for k in self._k)
        k2[(0,) * grid.d] = 1.0
        self._inv_k2 = 1.0 / k2
        self._inv_k2[(0,) * grid.d] = 0.0

    def background_for(self, rho: np.ndarray) -> Optional[np.ndarray]:
        """Background matched to rho: checked, or rescaled when tracking mass."""
        if self.background is None:
            return None
        mass = float(np.sum(rho))
        mass_b = float(np.sum(self.background))
        if abs(mass - mass_b) <= BACKGROUND_MASS_RTOL * max(abs(mass), abs(mass_b), 1e-300):
            return self.background
        if self.track_mass and mass_b > 0.0:
            log.debug("Background rescaled to deposited mass %.6e (was %.6e)",
                      mass * self.grid.cell_volume, mass_b * self.grid.cell_volume)
            return self.background * (mass / mass_b)
        raise ConfigurationError(
            f"Background mass {mass_b * self.grid.cell_volume:.12g} does not match "
            f"density mass {mass * self.grid.cell_volume:.12g}"
        )

    def _net_density(self, rho: np.ndarray) -> np.ndarray:
        rho = np.asarray(rho, dtype=float)
        background = self.background_for(rho)
        if background is None:
            if self.grid.periodic:
                return rho - np.mean(rho)
            return rho
        return rho - background

    def solve(self, rho: np.ndarray) -> np.ndarray:
        """Force field, shape grid.shape + (d,)."""
        net = self._net_density(rho)
        if not self.grid.periodic:
            return self.spec.sigma * self._convolver(net)

        axes = tuple(range(self.grid.d))
        rho_hat = fft.rfftn(net, axes=axes, workers=self.workers) * self._psi_hat
        E = np.empty(self.grid.shape + (self.grid.d,))
        for a, k in enumerate(self._k):
            E_hat = -1j * self.spec.sigma * k * rho_hat * self._inv_k2
            E[..., a] = fft.irfftn(E_hat, s=self.grid.shape, axes=axes, workers=self.workers)
        return E

    def potential(self, rho: np.ndarray) -> Optional[np.ndarray]:
        """Potential V with E = -grad V (periodic grids only)."""
        if not self.grid.periodic:
            return None
        axes = tuple(range(self.grid.d))
        rho_hat = fft.rfftn(self._net_density(rho), axes=axes, workers=self.workers)
        V_hat = self.spec.sigma * rho_hat * self._psi_hat * self._inv_k2
        return fft.irfftn(V_hat, s=self.grid.shape, axes=axes, workers=self.workers)

    def state(self, rho: np.ndarray) -> FieldState:
        return FieldState(
            grid=self.grid,
            rho=np.asarray(rho, dtype=float),
            E=self.solve(rho),
            spec=self.spec,
            V=self.potential(rho),
            background=self.background_for(rho),
        )


@functools.lru_cache(maxsize=8)
def _cached_solver(grid: Grid, spec: KernelSpec, pad_factor: int) -> FieldSolver:
    return FieldSolver(grid, spec, pad_factor=pad_factor)


def solve_field(rho: np.ndarray, grid: Grid, spec: KernelSpec,
                background: Optional[np.ndarray] = None, pad_factor: int = 2) -> np.ndarray:
    """One-shot E = sigma K_n * (rho - rho_b); see FieldSolver for repeated solves."""
    if background is None:
        return _cached_solver(grid, spec, pad_factor).solve(rho)
    return FieldSolver(grid, spec, background=background, pad_factor=pad_factor).solve(rho)


# ── Potential energy in two forms ───────────────────────────────────────


@functools.lru_cache(maxsize=None)
def _unit_cell_average_h(d: int) -> float:
    """Integral over [-1/2, 1/2]^d of 1/|y| (d=3) or log|y| (d=2)."""
    if d == 3:
        # Divergence theorem on the six faces, each face split into 8 polar wedges
        def wedge(theta):
            r_edge = 0.5 / math.cos(theta)
            return math.sqrt(r_edge * r_edge + 0.25) - 0.5
        value, _ = integrate.quad(wedge, 0.0, math.pi / 4.0, epsabs=1e-14, epsrel=1e-13)
        return 12.0 * value
    if d == 2:
        def wedge(theta):
            r_edge = 0.5 / math.cos(theta)
            return r_edge * r_edge / 2.0 * math.log(r_edge) - r_edge * r_edge / 4.0
        value, _ = integrate.quad(wedge, 0.0, math.pi / 4.0, epsabs=1e-14, epsrel=1e-13)
        return 8.0 * value
    raise ConfigurationError(f"No cell average of H for d={d}")


def cell_average_fundamental_solution(d: int, h: float) -> float:
    """Average of H over the grid cell centered at the origin."""
    if d == 3:
        return dimensional_constant(3) * _unit_cell_average_h(3) / h
    if d == 2:
        return -(math.log(h) + _unit_cell_average_h(2)) / (2.0 * math.pi)
    raise ConfigurationError(f"No cell average of H for d={d}")


def _box_exterior_integral(lower: np.ndarray, upper: np.ndarray, d: int,
                           quad_points: int = 48) -> float:
    """
    Integral of |y|^{2-2d} over the complement of the box [lower, upper] (origin inside).

    Uses div(y |y|^{2-2d}) = (2-d)|y|^{2-2d}, reducing it to face integrals.
    """
    nodes, weights = np.polynomial.legendre.leggauss(quad_points)
    total = 0.0
    for axis in range(d):
        others = [a for a in range(d) if a != axis]
        for bound in (lower[axis], upper[axis]):
            coords = []
            jac = 1.0
            for a in others:
                half = 0.5 * (upper[a] - lower[a])
                mid = 0.5 * (upper[a] + lower[a])
                coords.append(mid + half * nodes)
                jac *= half
            mesh = np.meshgrid(*coords, indexing="ij")
            wmesh = functools.reduce(np.multiply, np.meshgrid(*([weights] * len(others)),
                                                               indexing="ij"))
            r2 = bound * bound + sum(m * m for m in mesh)
            face = np.sum(wmesh * r2 ** (1 - d)) * jac
            total += abs(bound) * face / (d - 2)
    return float(total)


def potential_two_forms(rho: np.ndarray, grid: Grid, spec: KernelSpec,
                        extent_factor: int = 2) -> tuple[float, float]:
    """
    (integral of (H*rho) rho, integral of |grad H * rho|^2) by grid quadrature.

    The H form uses point samples of H off the origin and its cell average at the
    origin. The gradient form evaluates grad H * rho with the exact kernel on a grid
    enlarged extent_factor times; for d=3 the exterior is closed with the monopole
    tail about the centre of mass. For d=2 the gradient form is the enlarged-box
    integral (it diverges for nonzero net mass).

    Raises:
        ConfigurationError: For d=1 or periodic grids (H does not decay)
    """
    d = grid.d
    if d == 1 or spec.d == 1:
        raise ConfigurationError("potential_two_forms needs d >= 2 (H does not decay in 1D)")
    if grid.periodic:
        raise ConfigurationError("potential_two_forms needs a free-space grid")

    rho = np.asarray(rho, dtype=float)
    h = grid.spacing
    vol = grid.cell_volume
    if not np.any(rho):
        return 0.0, 0.0

    h_form_conv = FreeSpaceConvolver(
        grid.shape, h, lambda y: radial_fundamental_solution(np.linalg.norm(y, axis=-1), d),
        components=1, origin_value=np.array([cell_average_fundamental_solution(d, h)]),
    )
    h_rho = h_form_conv(rho)[..., 0]
    first = float(np.sum(h_rho * rho) * vol)

    pad = [(n * (extent_factor - 1)) // 2 for n in grid.shape]
    big_shape = tuple(n + 2 * p for n, p in zip(grid.shape, pad))
    big_rho = np.zeros(big_shape)
    big_rho[tuple(slice(p, p + n) for p, n in zip(pad, grid.shape))] = rho
    exact = KernelSpec(d=d, sigma=1)
    grad_conv = FreeSpaceConvolver(
        big_shape, h, functools.partial(poisson_kernel, spec=exact), components=d,
    )
    E = grad_conv(big_rho)
    second = float(np.sum(E * E) * vol)

    if d == 3:
        mass = float(np.sum(rho) * vol)
        nodes = grid.nodes()
        centre = np.tensordot(rho, nodes, axes=(tuple(range(d)), tuple(range(d)))) * vol / mass
        big_origin = np.asarray(grid.origin) - np.asarray(pad) * h
        lower = big_origin - 0.5 * h - centre
        upper = big_origin + (np.asarray(big_shape) - 0.5) * h - centre
        c_d = dimensional_constant(d)
        second += c_d * c_d * mass * mass * _box_exterior_integral(lower, upper, d)

    return first, second


# ── Effective-mass ledger ───────────────────────────────────────────────


def ledger_update(ensemble, r_x: float, r_v: float,
                  grid: Optional[Grid] = None) -> EffectiveMassLedger:
    """
    Classify every particle's weight into active / escaped-in-v / escaped-in-x.

    |x| >= r_x goes to escaped_x; otherwise |v| >= r_v goes to escaped_v. Particles
    already marked escaped never count as active (inside the spatial ball they are
    counted as velocity escapes). Active particles outside a non-periodic grid are
    counted as spatial escapes.
    """
    if not (r_x > 0 and r_v > 0):
        raise ConfigurationError("Ledger cutoffs must be positive")

    w = np.asarray(ensemble.w, dtype=float)
    x_norm = np.linalg.norm(ensemble.x, axis=1)
    v_norm = np.linalg.norm(ensemble.v, axis=1)
    escaped = ensemble.escaped_mask()

    out_x = x_norm >= r_x
    if grid is not None and not grid.periodic:
        u = (ensemble.x - np.asarray(grid.origin)) / grid.spacing
        off_grid = ~np.all((u >= 0.0) & (u <= np.asarray(grid.shape) - 1), axis=1)
        out_x = out_x | (off_grid & ~escaped)
    out_v = ~out_x & ((v_norm >= r_v) | escaped)
    active = ~out_x & ~out_v

    return EffectiveMassLedger(
        total_initial_mass=math.fsum(w),
        active_mass=math.fsum(w[active]),
        escaped_v_mass=math.fsum(w[out_v]),
        escaped_x_mass=math.fsum(w[out_x]),
    )
