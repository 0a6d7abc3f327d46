"""
VlasovFlow Engine Module
Kernels, field solves, particle flows, compactification, diagnostics and the phase-grid solver.
"""

from vlasov_flow.engine.kernels import KernelSpec, poisson_kernel, mollified_kernel
from vlasov_flow.engine.fields import Grid, FieldSolver, EffectiveMassLedger, solve_field
from vlasov_flow.engine.flow import ParticleEnsemble, ParticleStatus, FrozenField, PicField
from vlasov_flow.engine.compactify import DampedDiffeomorphism, build_profile
from vlasov_flow.engine.eulerian import PhaseGridFunction, sl_step, cross_validate
from vlasov_flow.engine.diagnostics import DiagnosticsRecord, EnergyReport, energy_report

__all__ = [
    "KernelSpec",
    "poisson_kernel",
    "mollified_kernel",
    "Grid",
    "FieldSolver",
    "EffectiveMassLedger",
    "solve_field",
    "ParticleEnsemble",
    "ParticleStatus",
    "FrozenField",
    "PicField",
    "DampedDiffeomorphism",
    "build_profile",
    "PhaseGridFunction",
    "sl_step",
    "cross_validate",
    "DiagnosticsRecord",
    "EnergyReport",
    "energy_report",
]
