"""Approximate abstractions, compositional certificates and aggregation."""

__version__ = "0.1.0"

from .errors import (AbstraktError, ConditionError, DimensionError, GuardError,
                     InfeasibleError, NonFiniteError, RankError)
from .conic import (LmiBlock, LmiProblem, SdpSolution, SdpStatus, SolverOptions,
                    bisect_feasibility, check_psd, solve_least_squares, solve_sdp)
from .linear import (AbstractionCertificate, LinearAbstraction, LinearSystem,
                     error_bound, fit_abstraction, fit_input_map, interface_refine,
                     synth_gain)
from .compose import (ComposedCert, ParamK, SubsystemCert, SupplyRate, assemble_global,
                      check_dissipation_samples, delta_global, exists_Z, fit_coupling,
                      q_matrix, solve_relaxed)
from .aggregation import (Partition, PreAssignment, agent_storage_profile,
                          group_subsystem, is_equitable, optimal_group_coupling,
                          partition_matrix, partition_search)

__all__ = [
    "AbstraktError", "ConditionError", "DimensionError", "GuardError", "InfeasibleError",
    "NonFiniteError", "RankError",
    "LmiBlock", "LmiProblem", "SdpSolution", "SdpStatus", "SolverOptions",
    "bisect_feasibility", "check_psd", "solve_least_squares", "solve_sdp",
    "AbstractionCertificate", "LinearAbstraction", "LinearSystem", "error_bound",
    "fit_abstraction", "fit_input_map", "interface_refine", "synth_gain",
    "ComposedCert", "ParamK", "SubsystemCert", "SupplyRate", "assemble_global",
    "check_dissipation_samples", "delta_global", "exists_Z", "fit_coupling", "q_matrix",
    "solve_relaxed",
    "Partition", "PreAssignment", "agent_storage_profile", "group_subsystem",
    "is_equitable", "optimal_group_coupling", "partition_matrix", "partition_search",
    "__version__",
]
