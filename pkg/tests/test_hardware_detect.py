"""
Tests for hardware detection and tier defaults.
"""

from types import SimpleNamespace
from unittest.mock import patch

import pytest

from vlasov_flow.utils import hardware_detect
from vlasov_flow.utils.hardware_detect import (
    TIER_CONFIG,
    calculate_tier,
    detect_cpu_count,
    detect_hardware,
    detect_ram_gb,
    get_tier_description,
)


class TestCalculateTier:
    """Test RAM thresholds."""

    @pytest.mark.parametrize("ram,tier", [(4, 1), (15, 1), (16, 2), (32, 2), (33, 3), (256, 3)])
    def test_thresholds(self, ram, tier):
        assert calculate_tier(ram) == tier

    def test_descriptions(self):
        for tier in TIER_CONFIG:
            assert get_tier_description(tier) != "Unknown"
        assert get_tier_description(9) == "Unknown"


class TestDetection:
    """Test psutil-backed detection with fallbacks."""

    def test_ram(self):
        memory = SimpleNamespace(total=24 * 1024 ** 3)
        with patch.object(hardware_detect.psutil, "virtual_memory", return_value=memory):
            assert detect_ram_gb() == 24

    def test_ram_failure_defaults(self):
        with patch.object(hardware_detect.psutil, "virtual_memory", side_effect=OSError("no")):
            assert detect_ram_gb() == 8

    def test_physical_cores_preferred(self):
        with patch.object(hardware_detect.psutil, "cpu_count", side_effect=lambda logical: 6):
            assert detect_cpu_count() == 6

    def test_logical_fallback(self):
        with patch.object(hardware_detect.psutil, "cpu_count",
                          side_effect=lambda logical: 12 if logical else None):
            assert detect_cpu_count() == 12

    def test_cpu_failure_defaults(self):
        with patch.object(hardware_detect.psutil, "cpu_count", side_effect=RuntimeError("no")):
            assert detect_cpu_count() == 1


class TestDetectHardware:
    """Test the assembled profile."""

    @pytest.mark.parametrize("ram,cores,tier,workers", [
        (8, 8, 1, 2), (24, 2, 2, 2), (24, 16, 2, 4), (64, 32, 3, 8), (64, 1, 3, 1),
    ])
    def test_profile(self, ram, cores, tier, workers):
        with patch.object(hardware_detect, "detect_ram_gb", return_value=ram), \
                patch.object(hardware_detect, "detect_cpu_count", return_value=cores):
            profile = detect_hardware()
        assert profile.tier == tier
        assert profile.workers == workers
        assert profile.machine
