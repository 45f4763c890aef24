//! The sparse MoE sequence model and its training loop.

mod config;
mod network;
mod optim;
mod params;
mod routing;
mod schedule;
mod train;

pub use config::{BlockKind, ModelConfig};
pub use network::{backward, count_flops, eval_loss, forward, Batch, FlopCount, ForwardCache};
pub use optim::OptState;
pub use params::{Block, Ffn, FfnWeights, MoEModel, MoeLayer, Params, TensorRole};
pub use routing::{balance_update, route_scores, route_topk, select_topk, Route};
pub use schedule::{LrSchedule, Schedule, Staged};
pub use train::{load_ratio, train_steps, train_steps_with, BatchSource, FixedBatch, StepRecord, DEFAULT_BALANCE_RATE};
