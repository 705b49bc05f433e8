"""Registration of neighbouring frames from exchanged multitarget densities."""
from .irf import DEFAULT_N_CAP, IrfMixture, build_irf, instantaneous_cost
from .known import (
    DriftEstimate,
    TotalCostState,
    card_coefficients,
    estimate_drift_known_orientation,
    tc_update,
)
from .unknown import (
    DEFAULT_DELTA_GAMMA,
    DEFAULT_DELTA_THETA,
    DEFAULT_MAX_HYPOTHESES,
    DEFAULT_T_CAP,
    Hypothesis,
    InstantEstimate,
    TripletInit,
    TripletSystem,
    ascend,
    hypothesis_update,
    instantaneous_estimate,
    rank_triplets,
    solve_triplet_system,
    triplet_initial_point,
)

__all__ = [
    "DEFAULT_N_CAP",
    "DEFAULT_T_CAP",
    "DEFAULT_DELTA_THETA",
    "DEFAULT_DELTA_GAMMA",
    "DEFAULT_MAX_HYPOTHESES",
    "IrfMixture",
    "build_irf",
    "instantaneous_cost",
    "TotalCostState",
    "tc_update",
    "card_coefficients",
    "DriftEstimate",
    "estimate_drift_known_orientation",
    "TripletSystem",
    "TripletInit",
    "solve_triplet_system",
    "triplet_initial_point",
    "rank_triplets",
    "InstantEstimate",
    "ascend",
    "instantaneous_estimate",
    "Hypothesis",
    "hypothesis_update",
]
