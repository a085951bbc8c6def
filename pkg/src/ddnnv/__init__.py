"""Data-driven verification of neural-network feedback loops around unknown linear plants.

Stability is certified by a data-based LMI, finite-horizon safety and set
invariance by per-facet sum-of-squares programs.  Every solver answer is
re-checked numerically before a verdict is reported.
"""

from .data import OraclePlant, TrajectoryData, check_excitation, collect, recover_system, solve_consistency
from .errors import (
    CompilationError,
    DimensionError,
    EquilibriumError,
    ExcitationError,
    SectorError,
    VerificationError,
)
from .nn import Activation, NeuralNetwork, build_stacked, forward, loop_transform
from .reach import (
    Polytope,
    ReachResult,
    reach_step,
    reach_step_model,
    safety_via_invariance,
    verify_invariance,
    verify_safety,
)
from .sdp import ConicProgram, SolverSettings, export_sdpa, import_sdpa, solve, verify_solution
from .sectors import SectorData, default_sector, sector_quadratic_matrix
from .stability import StabilityCertificate, roa_ellipsoid, verify_stability, verify_stability_model

__version__ = "0.1.0"

__all__ = [
    "Activation",
    "CompilationError",
    "ConicProgram",
    "DimensionError",
    "EquilibriumError",
    "ExcitationError",
    "NeuralNetwork",
    "OraclePlant",
    "Polytope",
    "ReachResult",
    "SectorData",
    "SectorError",
    "SolverSettings",
    "StabilityCertificate",
    "TrajectoryData",
    "VerificationError",
    "build_stacked",
    "check_excitation",
    "collect",
    "default_sector",
    "export_sdpa",
    "forward",
    "import_sdpa",
    "loop_transform",
    "reach_step",
    "reach_step_model",
    "recover_system",
    "roa_ellipsoid",
    "safety_via_invariance",
    "sector_quadratic_matrix",
    "solve",
    "solve_consistency",
    "verify_invariance",
    "verify_safety",
    "verify_solution",
    "verify_stability",
    "verify_stability_model",
]
