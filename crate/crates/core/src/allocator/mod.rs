//! Fusion of global and pivot importance, layer protection, and budgeted
//! unit selection with per-layer minimum retention.

mod config;
mod pack;
mod plan;

pub use crate::attribution::PivotMode;
pub use config::{
    attn_min_keep, dynamic_gamma, min_keep, mlp_min_keep, Allocation, PruningConfig, Scoring,
};
pub use pack::{
    check_feasible, efficiency, efficiency_order, enforce_safety, greedy_pack, layerwise_select,
    Packing, SafetyOutcome,
};
pub use plan::{
    allocate, build_plan, fuse, protect_profiles, score_units, unit_values, PlanUnit, PruningPlan,
    Retention, UnitRef, UnitScores, PLAN_SCHEMA_VERSION,
};
