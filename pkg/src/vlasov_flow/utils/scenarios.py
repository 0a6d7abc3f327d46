"""
VlasovFlow Scenarios
Initial-data families, presets from data/scenarios.json, quasi-random sampling and truncation.
"""

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np
from scipy import special
from scipy.stats import qmc

from vlasov_flow.engine.eulerian import PhaseGridFunction
from vlasov_flow.engine.fields import Grid
from vlasov_flow.engine.flow import ParticleEnsemble
from vlasov_flow.engine.kernels import KernelSpec, unit_sphere_area
from vlasov_flow.errors import ConfigurationError, InputError

log = logging.getLogger("VlasovFlow")

# Particles are sampled only where f0 exceeds this value
F0_THRESHOLD = 1e-12

FAMILIES = ("landau", "two_stream", "bump")
FIELD_MODELS = ("self", "zero")

# Evaluator signature: f0(x, v) with x, v of shape (..., d)
Evaluator = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass
class Scenario:
    """A named initial datum with its domain and run defaults."""
    name: str
    family: str
    d: int
    sigma: int
    params: dict[str, float] = field(default_factory=dict)
    domain: dict[str, float] = field(default_factory=dict)
    background: Optional[dict[str, Any]] = None
    field_model: str = "self"
    defaults: dict[str, float] = field(default_factory=dict)
    description: str = ""

    def validate(self) -> "Scenario":
        """
        Raises:
            ConfigurationError: On an unknown family or field model, a bad sign, or a
                background outside d=2 / the periodic 1D proxy
        """
        if self.family not in FAMILIES:
            raise ConfigurationError(f"Unknown scenario family: {self.family}")
        if self.field_model not in FIELD_MODELS:
            raise ConfigurationError(f"Unknown field model: {self.field_model}")
        if self.sigma not in (1, -1):
            raise ConfigurationError(f"sigma must be +1 or -1, got {self.sigma}")
        if self.d not in (1, 2, 3):
            raise ConfigurationError(f"Unsupported dimension d={self.d}")
        if self.periodic and self.d != 1:
            raise ConfigurationError(f"Family {self.family} is one-dimensional")
        if self.background is not None and not (self.d == 2 or self.periodic):
            raise ConfigurationError("A background density needs d=2 or the periodic 1D proxy")
        return self

    @property
    def periodic(self) -> bool:
        return self.family in ("landau", "two_stream")

    @property
    def length(self) -> float:
        """Period of the x domain (1D families)."""
        if "length" in self.domain:
            return float(self.domain["length"])
        return 2.0 * math.pi * float(self.domain.get("periods", 1)) / float(self.params["k"])

    @property
    def vmax(self) -> float:
        return float(self.domain.get("vmax", 8.0))

    def with_params(self, **params: float) -> "Scenario":
        return replace(self, params={**self.params, **params})

    def kernel_spec(self, mollify_n: float = math.inf) -> KernelSpec:
        return KernelSpec(d=self.d, sigma=self.sigma, n=mollify_n)

    def field_grid(self, cells: int = 0) -> Grid:
        """Spatial grid for the field solve (torus for 1D families)."""
        cells = cells or int(self.defaults.get("grid_cells", 64))
        if self.periodic:
            return Grid.torus(self.length, cells)
        return Grid.centered(self.d, float(self.domain["half_width"]), cells)

    def sample_box(self) -> tuple[np.ndarray, np.ndarray]:
        """Lower and upper corners of the (x, v) box that contains the support."""
        d = self.d
        if self.periodic:
            return (np.array([0.0, -self.vmax]), np.array([self.length, self.vmax]))
        rx, rv = float(self.params["rx"]), float(self.params["rv"])
        lower = np.concatenate([np.full(d, -rx), np.full(d, -rv)])
        return lower, -lower

    def to_header(self) -> dict:
        return {"name": self.name, "family": self.family, "d": self.d, "sigma": self.sigma,
                "params": dict(self.params)}


# ── Families ────────────────────────────────────────────────────────────


def _maxwellian(v: np.ndarray) -> np.ndarray:
    return np.exp(-0.5 * np.sum(v * v, axis=-1)) / (2.0 * math.pi) ** (v.shape[-1] / 2.0)


def _landau(params: dict) -> Evaluator:
    alpha, k = float(params["alpha"]), float(params["k"])

    def f0(x, v):
        return (1.0 + alpha * np.cos(k * x[..., 0])) * _maxwellian(v)
    return f0


def _two_stream(params: dict) -> Evaluator:
    alpha, k, v0 = float(params["alpha"]), float(params["k"]), float(params["v0"])

    def f0(x, v):
        beams = 0.5 * (_maxwellian(v - v0) + _maxwellian(v + v0))
        return (1.0 + alpha * np.cos(k * x[..., 0])) * beams
    return f0


def _bump_profile(r2: np.ndarray) -> np.ndarray:
    return np.where(r2 < 1.0, (1.0 - r2) ** 2, 0.0)


def _bump(params: dict) -> Evaluator:
    amplitude = float(params["amplitude"])
    rx, rv = float(params["rx"]), float(params["rv"])

    def f0(x, v):
        sx = np.sum(x * x, axis=-1) / (rx * rx)
        sv = np.sum(v * v, axis=-1) / (rv * rv)
        return amplitude * _bump_profile(sx) * _bump_profile(sv)
    return f0


_FAMILY_BUILDERS: dict[str, Callable[[dict], Evaluator]] = {
    "landau": _landau,
    "two_stream": _two_stream,
    "bump": _bump,
}


def _bump_moment(d: int, radius: float, power: int) -> float:
    """Integral of |y|^power (1 - |y|^2/radius^2)^2 over the ball of the given radius."""
    return (unit_sphere_area(d) * radius ** (d + power)
            * 0.5 * special.beta((d + power) / 2.0, 3.0))


def analytic_mass(scenario: Scenario) -> float:
    """Integral of f0 over phase space."""
    p = scenario.params
    if scenario.periodic:
        return scenario.length
    return float(p["amplitude"]) * _bump_moment(scenario.d, float(p["rx"]), 0) \
        * _bump_moment(scenario.d, float(p["rv"]), 0)


def analytic_kinetic(scenario: Scenario) -> float:
    """Integral of |v|^2 f0 over phase space."""
    p = scenario.params
    if scenario.family == "landau":
        return scenario.length
    if scenario.family == "two_stream":
        return scenario.length * (1.0 + float(p["v0"]) ** 2)
    return float(p["amplitude"]) * _bump_moment(scenario.d, float(p["rx"]), 0) \
        * _bump_moment(scenario.d, float(p["rv"]), 2)


# ── Loading ─────────────────────────────────────────────────────────────


# Module-level cache for loaded scenarios
_scenarios_cache: Optional[dict[str, Scenario]] = None


def _get_bundled_scenarios_path() -> Path:
    """Get path to the bundled scenarios.json."""
    return Path(__file__).resolve().parent.parent / "data" / "scenarios.json"


def _get_custom_scenarios_path() -> Path:
    """Get path to the user's scenario overrides."""
    return Path.home() / ".vlasovflow" / "scenarios.json"


def _scenario_from_entry(key: str, entry: dict) -> Scenario:
    try:
        return Scenario(
            name=key,
            family=entry["family"],
            d=int(entry.get("d", 1)),
            sigma=int(entry.get("sigma", 1)),
            params={k: float(v) for k, v in entry.get("params", {}).items()},
            domain={k: float(v) for k, v in entry.get("domain", {}).items()},
            background=entry.get("background"),
            field_model=entry.get("field", "self"),
            defaults=dict(entry.get("defaults", {})),
            description=entry.get("description", ""),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigurationError(f"Malformed scenario entry {key!r}: {e}") from e


def _read_entries(path: Path) -> dict[str, dict]:
    with open(path, encoding="utf-8") as f:
        data = json.load(f)
    return data.get("scenarios", {})


def load_scenarios(custom_path: Optional[Path] = None) -> dict[str, Scenario]:
    """
    Load scenario presets from the bundled JSON and user overrides.
    Results are cached after the first load without an explicit custom path.

    Returns:
        Dict mapping scenario name → Scenario
    """
    global _scenarios_cache
    if _scenarios_cache is not None and custom_path is None:
        return _scenarios_cache

    scenarios: dict[str, Scenario] = {}
    bundled_path = _get_bundled_scenarios_path()
    try:
        for key, entry in _read_entries(bundled_path).items():
            scenarios[key] = _scenario_from_entry(key, entry)
        log.debug("Loaded %s bundled scenarios", len(scenarios))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"Cannot read bundled scenarios: {e}") from e

    # User scenarios take precedence
    override_path = custom_path if custom_path is not None else _get_custom_scenarios_path()
    if override_path.exists():
        try:
            count = 0
            for key, entry in _read_entries(override_path).items():
                scenarios[key] = _scenario_from_entry(key, entry)
                count += 1
            if count:
                log.debug("Loaded %s custom scenario overrides", count)
        except (OSError, json.JSONDecodeError) as e:
            log.error("Error loading custom scenarios: %s", e)

    if custom_path is None:
        _scenarios_cache = scenarios
    return scenarios


def get_scenario(name: str) -> Scenario:
    """
    Raises:
        ConfigurationError: If no preset has this name
    """
    scenarios = load_scenarios()
    if name not in scenarios:
        raise ConfigurationError(
            f"Unknown scenario {name!r}; available: {', '.join(sorted(scenarios))}"
        )
    return scenarios[name].validate()


# ── Initial data ────────────────────────────────────────────────────────


@dataclass
class InitialData:
    """Particle sampler and pointwise evaluator of f0 for one scenario."""
    scenario: Scenario
    evaluate: Evaluator

    def sample(self, count: int, seed: int) -> ParticleEnsemble:
        """
        Scrambled Halton points over the support box, weighted by f0 * box volume / count.

        Points with f0 <= F0_THRESHOLD carry no mass and are dropped.
        """
        if count < 1:
            raise ConfigurationError(f"Particle count must be positive, got {count}")
        d = self.scenario.d
        lower, upper = self.scenario.sample_box()
        sampler = qmc.Halton(d=2 * d, scramble=True, seed=seed)
        points = qmc.scale(sampler.random(count), lower, upper)
        x, v = points[:, :d], points[:, d:]
        values = self.evaluate(x, v)
        keep = values > F0_THRESHOLD
        box_volume = float(np.prod(upper - lower))
        w = values[keep] * box_volume / count
        log.debug("Sampled %s of %s points (box volume %.6g)",
                  int(np.count_nonzero(keep)), count, box_volume)
        return ParticleEnsemble.from_samples(x[keep], v[keep], w, values[keep], seed=seed)

    def grid_evaluator(self) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
        """f0(X, V) on 1D-1V node arrays."""
        return lambda X, V: self.evaluate(X[..., None], V[..., None])

    def phase_grid(self, nx: int, nv: int,
                   spec: Optional[KernelSpec] = None) -> PhaseGridFunction:
        """Eulerian initial state (1D families only)."""
        if not self.scenario.periodic:
            raise ConfigurationError("The phase-grid solver supports the 1D families only")
        return PhaseGridFunction.from_function(
            self.grid_evaluator(), self.scenario.length, nx, self.scenario.vmax, nv, spec=spec,
        )


def build_initial(scenario: Scenario) -> InitialData:
    """
    Sampler and evaluator for a scenario.

    Raises:
        ConfigurationError: For an unknown family
    """
    if scenario.family not in _FAMILY_BUILDERS:
        raise ConfigurationError(f"Unknown scenario family: {scenario.family}")
    scenario.validate()
    return InitialData(scenario=scenario, evaluate=_FAMILY_BUILDERS[scenario.family](scenario.params))


def background_grid(scenario: Scenario, grid: Grid, mass: float) -> Optional[np.ndarray]:
    """
    Background density on the field grid, normalized to the given mass.

    Only the uniform disc is supported for free-space grids. Periodic grids are
    neutralized by the field solver itself.
    """
    if scenario.background is None or grid.periodic:
        return None
    shape = scenario.background.get("shape", "disc")
    if shape != "disc":
        raise ConfigurationError(f"Unknown background shape: {shape}")
    radius = float(scenario.background["radius"])
    r2 = np.sum(grid.nodes() ** 2, axis=-1)
    inside = (r2 < radius * radius).astype(float)
    total = float(np.sum(inside)) * grid.cell_volume
    if total == 0.0:
        raise ConfigurationError("Background disc does not cover any grid node")
    return inside * (mass / total)


# ── Truncation ──────────────────────────────────────────────────────────


def truncate_initial(f0: Evaluator, n: float) -> Evaluator:
    """min(n, 1_{B_n}(x, v) f0(x, v)) with B_n the phase-space ball of radius n."""
    if not (n >= 1):
        raise InputError(f"Truncation level must be >= 1, got {n}")

    def truncated(x, v):
        r2 = np.sum(x * x, axis=-1) + np.sum(v * v, axis=-1)
        values = np.asarray(f0(x, v), dtype=float)
        return np.minimum(n, np.where(r2 < n * n, values, 0.0))
    return truncated


def truncation_energy_profile(initial: InitialData, levels, samples: int = 1 << 15,
                              seed: int = 0) -> list[tuple[float, float]]:
    """
    Kinetic energy of the truncated data for each level n.

    All levels share one set of quasi-random points, so the sequence is
    nondecreasing in n exactly.

    Returns:
        [(n, integral of |v|^2 f_n)] in the order of `levels`
    """
    d = initial.scenario.d
    lower, upper = initial.scenario.sample_box()
    points = qmc.scale(qmc.Halton(d=2 * d, scramble=True, seed=seed).random(samples),
                       lower, upper)
    x, v = points[:, :d], points[:, d:]
    scale = float(np.prod(upper - lower)) / samples
    v2 = np.sum(v * v, axis=-1)

    profile = []
    for n in levels:
        values = truncate_initial(initial.evaluate, n)(x, v)
        profile.append((float(n), math.fsum(v2 * values) * scale))
    return profile
