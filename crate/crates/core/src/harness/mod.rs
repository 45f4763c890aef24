//! Experiment orchestration: synthetic data, the three-way protocol,
//! sweeps, efficiency and cost metrics, and diagnostics.

mod config;
pub mod data;
mod diagnostics;
mod measures;
mod protocol;
mod sweep;

pub use config::{CostSpec, ExperimentConfig, TrainSpec};
pub use diagnostics::{init_terminal_correlation, symmetry_trace};
pub use measures::{cost, efficiency, CostReport};
pub use protocol::{
    plan_for, run_fixed, run_protocol, run_two_phase, Arm, DivergencePoint, EvalPoint, FamilyPlan, FamilyResult,
    PhasedSource, ProtocolResult, RunMetrics, RunOutput, SeedContext, StepLog, UpcycleVariant, EVAL_BATCH_SEQS,
};
pub use sweep::{summarize, sweep, SweepAxis, SweepResult, SweepRow, SweepSummary};
