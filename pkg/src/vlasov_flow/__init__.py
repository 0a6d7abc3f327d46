"""
VlasovFlow - Lagrangian Vlasov-Poisson simulation.

Particle flows with mollified Coulomb/Newton kernels, escape-time bookkeeping,
a semi-Lagrangian phase-grid reference solver and a damped stereographic
compactification for trajectories that blow up.
"""

__version__ = "0.1.0"

# Lazy imports - components are imported when accessed so that the CLI starts
# without building kernel tables.
#
# Direct imports:
#   from vlasov_flow.engine import ParticleEnsemble, FieldSolver
#   from vlasov_flow.utils import load_config
#   from vlasov_flow.run_controller import RunController

__all__ = [
    # Engine
    "KernelSpec",
    "Grid",
    "FieldSolver",
    "ParticleEnsemble",
    "PhaseGridFunction",
    "DampedDiffeomorphism",
    "DiagnosticsRecord",
    # Utils
    "HardwareProfile",
    "detect_hardware",
    "RunConfig",
    "load_config",
    "save_config",
    "Scenario",
    "build_initial",
    # Controller
    "RunController",
]

_LAZY = {
    "KernelSpec": "vlasov_flow.engine.kernels",
    "Grid": "vlasov_flow.engine.fields",
    "FieldSolver": "vlasov_flow.engine.fields",
    "ParticleEnsemble": "vlasov_flow.engine.flow",
    "PhaseGridFunction": "vlasov_flow.engine.eulerian",
    "DampedDiffeomorphism": "vlasov_flow.engine.compactify",
    "DiagnosticsRecord": "vlasov_flow.engine.diagnostics",
    "HardwareProfile": "vlasov_flow.utils.hardware_detect",
    "detect_hardware": "vlasov_flow.utils.hardware_detect",
    "RunConfig": "vlasov_flow.utils.config",
    "load_config": "vlasov_flow.utils.config",
    "save_config": "vlasov_flow.utils.config",
    "Scenario": "vlasov_flow.utils.scenarios",
    "build_initial": "vlasov_flow.utils.scenarios",
    "RunController": "vlasov_flow.run_controller",
}


def __getattr__(name: str):
    if name in _LAZY:
        import importlib
        return getattr(importlib.import_module(_LAZY[name]), name)
    raise AttributeError(f"module 'vlasov_flow' has no attribute {name!r}")
