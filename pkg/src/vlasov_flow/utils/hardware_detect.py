"""
VlasovFlow Hardware Detection
CPU and RAM detection with tier-based FFT worker defaults.
"""

import logging
import platform
from dataclasses import dataclass

import psutil

log = logging.getLogger("VlasovFlow")


@dataclass
class HardwareProfile:
    """Hardware profile with tier-based run defaults."""
    ram_gb: int
    cpu_count: int
    machine: str    # "x86_64", "arm64", ...
    tier: int       # 1, 2, or 3
    workers: int


# Tier thresholds and recommendations
TIER_CONFIG = {
    1: {  # <16GB RAM - Laptop
        "max_workers": 2,
    },
    2: {  # 16-32GB RAM - Workstation
        "max_workers": 4,
    },
    3: {  # >32GB RAM - Server
        "max_workers": 8,
    },
}


def detect_cpu_count() -> int:
    """Detect the number of physical cores (logical as fallback)."""
    try:
        count = psutil.cpu_count(logical=False) or psutil.cpu_count(logical=True)
        return int(count or 1)
    except Exception as e:
        log.error("Error detecting CPU count: %s", e)
        return 1


def detect_ram_gb() -> int:
    """Detect total system RAM in GB."""
    try:
        total_bytes = psutil.virtual_memory().total
        ram_gb = int(total_bytes / (1024 ** 3))
        return ram_gb
    except Exception as e:
        log.error("Error detecting RAM: %s", e)
        return 8  # Conservative default


def calculate_tier(ram_gb: int) -> int:
    """Calculate hardware tier based on RAM."""
    if ram_gb < 16:
        return 1
    elif ram_gb <= 32:
        return 2
    else:
        return 3


def detect_hardware() -> HardwareProfile:
    """
    Detect hardware and return profile with run defaults.

    Returns:
        HardwareProfile with a tier-appropriate worker count
    """
    ram_gb = detect_ram_gb()
    cpu_count = detect_cpu_count()
    tier = calculate_tier(ram_gb)

    config = TIER_CONFIG[tier]

    profile = HardwareProfile(
        ram_gb=ram_gb,
        cpu_count=cpu_count,
        machine=platform.machine() or "Unknown",
        tier=tier,
        workers=max(1, min(cpu_count, config["max_workers"])),
    )

    log.debug("%s, %s cores, %sGB RAM -> Tier %s", profile.machine, cpu_count, ram_gb, tier)
    log.debug("FFT workers: %s", profile.workers)

    return profile


def get_tier_description(tier: int) -> str:
    """Get human-readable tier description."""
    descriptions = {
        1: "Laptop (sized for 8-16GB RAM)",
        2: "Workstation (sized for 16-32GB RAM)",
        3: "Server (sized for 32GB+ RAM)",
    }
    return descriptions.get(tier, "Unknown")
