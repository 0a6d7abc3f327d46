"""
VlasovFlow Configuration
Run configuration, output paths, config hashing and the flat JSON config file.
"""

import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, asdict, fields
from pathlib import Path
from typing import Any, Optional

from vlasov_flow.errors import ConfigurationError

log = logging.getLogger("VlasovFlow")


# Base output directory when no --out is given
BASE_OUTPUT_DIR = Path("runs")

# Subdirectories created under every run directory
OUTPUT_SUBDIRS = ("checkpoints", "snapshots", "logs")

# Fields that do not change results and stay out of the config hash
HASH_EXCLUDED = ("out", "logging_enabled")


@dataclass
class RunConfig:
    """Configuration for one simulation run."""

    # Scenario preset name (see data/scenarios.json)
    scenario: str = "landau"

    # Time stepping
    dt: float = 0.05
    t_end: float = 10.0
    backward: bool = False

    # Particles and kernel
    particles: int = 20_000
    mollify_n: float = 4.0
    escape_radius: float = 1.0e6

    # Effective-mass ledger cutoffs (spatial and velocity radius)
    ledger_rx: float = 1.0e6
    ledger_rv: float = 1.0e6

    # Diagnostics every `cadence` steps, checkpoint every `checkpoint_every` steps (0 = end only)
    cadence: int = 10
    checkpoint_every: int = 0

    # Reproducibility
    seed: int = 12345

    # Output
    out: str = str(BASE_OUTPUT_DIR / "default")

    # Spatial grid cells per axis (0 = scenario default)
    grid_cells: int = 0

    # Eulerian phase grid (0 = scenario default)
    eulerian_nx: int = 0
    eulerian_nv: int = 0

    # Worker threads for the FFT (0 = from hardware profile)
    workers: int = 0

    # Logging
    logging_enabled: bool = True

    def validate(self, grid_spacing: Optional[float] = None) -> "RunConfig":
        """
        Check value ranges and the kernel-resolution precondition.

        Args:
            grid_spacing: Spatial cell size of the run's field grid, when known

        Returns:
            self, to allow chaining

        Raises:
            ConfigurationError: If any field is out of range
        """
        positive = {
            "dt": self.dt,
            "particles": self.particles,
            "mollify_n": self.mollify_n,
            "escape_radius": self.escape_radius,
            "ledger_rx": self.ledger_rx,
            "ledger_rv": self.ledger_rv,
            "cadence": self.cadence,
        }
        for name, value in positive.items():
            if not (value > 0):
                raise ConfigurationError(f"{name} must be positive, got {value!r}")

        if not math.isfinite(self.dt):
            raise ConfigurationError(f"dt must be finite, got {self.dt!r}")
        if not (self.t_end >= 0) or not math.isfinite(self.t_end):
            raise ConfigurationError(f"t_end must be finite and >= 0, got {self.t_end!r}")

        for name in ("checkpoint_every", "grid_cells", "eulerian_nx", "eulerian_nv", "workers"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0, got {getattr(self, name)!r}")

        if grid_spacing is not None and math.isfinite(self.mollify_n):
            # Mollification radius 1/n must cover at least one cell
            if self.mollify_n * grid_spacing > 1.0 + 1e-12:
                raise ConfigurationError(
                    f"mollification radius 1/n = {1.0 / self.mollify_n:.6g} is smaller than "
                    f"grid spacing h = {grid_spacing:.6g}; lower --mollify-n or refine the grid"
                )

        return self


def config_to_dict(config: RunConfig) -> dict[str, Any]:
    """Serialize a config to a plain dict (JSON-safe)."""
    data = asdict(config)
    if math.isinf(data["mollify_n"]):
        data["mollify_n"] = None
    return data


def config_from_dict(data: dict[str, Any]) -> RunConfig:
    """
    Build a RunConfig from a flat mapping, coercing values to the field types.

    Raises:
        ConfigurationError: On unknown keys or values that cannot be coerced
    """
    known = {f.name: f for f in fields(RunConfig)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigurationError(f"Unknown config keys: {', '.join(unknown)}")

    values: dict[str, Any] = {}
    for key, raw in data.items():
        values[key] = _coerce(key, known[key].type, raw)
    return RunConfig(**values)


def _coerce(key: str, type_name: Any, raw: Any) -> Any:
    """Coerce a raw JSON value to a dataclass field type."""
    type_name = type_name if isinstance(type_name, str) else getattr(type_name, "__name__", "")
    try:
        if type_name == "bool":
            if isinstance(raw, str):
                lowered = raw.strip().lower()
                if lowered in ("true", "1", "yes", "on"):
                    return True
                if lowered in ("false", "0", "no", "off"):
                    return False
                raise ValueError(raw)
            return bool(raw)
        if type_name == "int":
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError(raw)
            return int(raw)
        if type_name == "float":
            if raw is None:
                return math.inf
            return float(raw)
        return str(raw)
    except (TypeError, ValueError) as e:
        raise ConfigurationError(f"Invalid value for {key}: {raw!r}") from e


def config_hash(config: RunConfig) -> str:
    """SHA-256 of the canonical JSON form, first 16 hex characters."""
    data = {k: v for k, v in config_to_dict(config).items() if k not in HASH_EXCLUDED}
    canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def with_overrides(config: RunConfig, **overrides: Any) -> RunConfig:
    """Return a copy with the non-None overrides applied (CLI flags win over file values)."""
    changes = {k: v for k, v in overrides.items() if v is not None}
    return dataclasses.replace(config, **changes)


def get_output_path(config: RunConfig) -> Path:
    """Get the run output directory."""
    return Path(config.out)


def ensure_output_dirs(out: Path) -> Path:
    """Ensure the run directory and its subdirectories exist."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for sub in OUTPUT_SUBDIRS:
        (out / sub).mkdir(parents=True, exist_ok=True)
    log.debug("Output directories ensured at: %s", out)
    return out


def load_config(path: Optional[Path] = None) -> RunConfig:
    """
    Load a run configuration from a flat JSON file.
    Returns the default config if no path is given.

    Raises:
        ConfigurationError: If the file is unreadable, not a JSON object, or has bad keys
    """
    if path is None:
        log.debug("No config file given, using defaults")
        return RunConfig()

    config_path = Path(path)
    try:
        with open(config_path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"Cannot read config {config_path}: {e}") from e

    if not isinstance(data, dict):
        raise ConfigurationError(f"Config {config_path} must hold a JSON object")

    config = config_from_dict(data)
    log.debug("Loaded from: %s", config_path)
    return config


def save_config(config: RunConfig, path: Path) -> bool:
    """Save a run configuration as flat JSON."""
    config_path = Path(path)

    try:
        config_path.parent.mkdir(parents=True, exist_ok=True)

        with open(config_path, "w", encoding="utf-8") as f:
            json.dump(config_to_dict(config), f, indent=2, sort_keys=True)

        log.debug("Saved to: %s", config_path)
        return True

    except OSError as e:
        log.error("Error saving config: %s", e)
        return False
