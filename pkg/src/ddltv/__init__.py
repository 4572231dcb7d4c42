"""Direct data-driven state-feedback design for discrete-time LTV systems."""

__version__ = "0.1.0"

from .data_ensemble import (
    DataEnsemble,
    check_rank,
    fold_periodic,
    load_ensemble,
    run_ensemble,
    run_successive_ensemble,
    save_ensemble,
)
from .ltv_core import ContractViolation, LtvDynamics, NoiseModel, Trajectory, monodromy, simulate, step
from .lqr_design import LqrSolution, LqrWeights, evaluate_cost, lqr_data_finite, lqr_data_periodic, riccati_finite, riccati_periodic
from .robust_design import (
    NoiseBound,
    OutputMaps,
    PerformanceIndex,
    design_robust_bounded,
    design_robust_performance,
    design_robust_performance_periodic,
    design_robust_snr,
    hinf_gamma_search,
    iss_bound,
)
from .sdp_backend import BlockExpr, LmiBuilder, LmiProblem, SdpSolution, SdpStatus, SdpTolerances, solve
from .stability_design import (
    BoundCurve,
    DesignResult,
    GainSchedule,
    design_bounded,
    design_bounded_successive,
    design_periodic_stabilizer,
    extend_gain_sequential,
    trajectory_bound,
)
