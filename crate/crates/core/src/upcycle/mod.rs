//! Model-growth operators: expert duplication with router extension,
//! replica allocation, utility scores, canonical lifting, initialization
//! heuristics and dense→MoE conversion.

mod heuristics;
mod lift;
mod operator;
mod plan;
mod sparse;
mod utility;

pub use heuristics::{
    heuristic_expert_init, heuristic_router_init, ExpertInit, HeuristicSpec, ReinitKind, RouterInit, ORTHOGONAL_EPS,
};
pub use lift::{canonical_lift, lift_opt_state, NEVER_SELECTED};
pub use operator::{expand_opt_state, replica_divergence, replica_load_distance, replicas_identical, upcycle};
pub use plan::{allocate_greedy, allocate_uniform, replica_slots, ReplicationPlan, Strategy};
pub use sparse::{sparse_opt_state, sparse_upcycle};
pub use utility::{allocate_utility, utility_scores, utility_value, UtilityKind, UtilityScores, CURVATURE_FLOOR};

/// Default bias-noise half-width for extra copies.
pub const DEFAULT_DELTA: f64 = 1e-2;
