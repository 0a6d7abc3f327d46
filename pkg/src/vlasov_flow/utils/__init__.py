"""
VlasovFlow Utils Module
Hardware detection, configuration, scenarios, snapshots and logging.
"""

from vlasov_flow.utils.hardware_detect import HardwareProfile, detect_hardware
from vlasov_flow.utils.config import RunConfig, load_config, save_config, ensure_output_dirs
from vlasov_flow.utils.scenarios import Scenario, build_initial, load_scenarios

__all__ = [
    "HardwareProfile",
    "detect_hardware",
    "RunConfig",
    "load_config",
    "save_config",
    "ensure_output_dirs",
    "Scenario",
    "build_initial",
    "load_scenarios",
]
