use serde::{Deserialize, Serialize};

use super::network::{backward, forward, Batch};
use super::optim::OptState;
use super::params::MoEModel;
use super::routing::balance_update;
use super::schedule::LrSchedule;
use crate::error::{invalid, Error, Result};

pub const DEFAULT_BALANCE_RATE: f64 = 1e-3;

/// Supplies the training batch for a given global step.
///
/// Implementations are pure functions of the step so that a run can be
/// resumed or replayed without carrying generator state.
pub trait BatchSource {
    fn batch(&self, step: u64) -> Batch;
}

/// The same batch at every step (full-batch gradient descent).
pub struct FixedBatch(pub Batch);

impl BatchSource for FixedBatch {
    fn batch(&self, _step: u64) -> Batch {
        self.0.clone()
    }
}

/// What happened at one training step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    /// Tokens routed to each expert, per MoE block.
    pub loads: Vec<Vec<usize>>,
    pub tokens: usize,
}

impl StepRecord {
    /// Largest per-block max/mean expert load.
    pub fn max_load_ratio(&self) -> f64 {
        self.loads.iter().map(|l| load_ratio(l)).fold(0.0, f64::max)
    }
}

/// Max load over mean load (1 when perfectly balanced).
pub fn load_ratio(loads: &[usize]) -> f64 {
    let total: usize = loads.iter().sum();
    if total == 0 {
        return 1.0;
    }
    let max = *loads.iter().max().unwrap_or(&0) as f64;
    max * loads.len() as f64 / total as f64
}

/// Runs `n` optimizer steps starting at schedule position `opt.step`.
pub fn train_steps(
    model: &mut MoEModel,
    opt: &mut OptState,
    data: &dyn BatchSource,
    schedule: &dyn LrSchedule,
    n: u64,
    balance_rate: f64,
) -> Result<Vec<StepRecord>> {
    let mut out = Vec::with_capacity(n as usize);
    train_steps_with(model, opt, data, schedule, n, balance_rate, |_, r| {
        out.push(r.clone());
        Ok(())
    })?;
    Ok(out)
}

/// Like [`train_steps`], calling `on_step` after every update instead of
/// collecting records.
pub fn train_steps_with(
    model: &mut MoEModel,
    opt: &mut OptState,
    data: &dyn BatchSource,
    schedule: &dyn LrSchedule,
    n: u64,
    balance_rate: f64,
    mut on_step: impl FnMut(&MoEModel, &StepRecord) -> Result<()>,
) -> Result<()> {
    if !(balance_rate >= 0.0) {
        return invalid(format!("balance rate must be non-negative, got {balance_rate}"));
    }
    if opt.step + n > schedule.total_steps() {
        return invalid(format!(
            "{n} steps from step {} exceed the schedule of {}",
            opt.step,
            schedule.total_steps()
        ));
    }
    if !opt.matches(&model.params) {
        return invalid("optimizer state does not match model");
    }
    for _ in 0..n {
        let step = opt.step;
        let lr = schedule.lr_at(step)?;
        let batch = data.batch(step);
        let (loss, cache) = forward(model, &batch)?;
        if !loss.is_finite() {
            return Err(Error::Numeric {
                step: Some(step),
                block: cache.first_non_finite_block(),
                detail: format!("training loss is {loss}"),
            });
        }
        let grads = backward(model, &cache);
        opt.update(&mut model.params, &grads, lr)?;
        let loads = cache.loads();
        if balance_rate > 0.0 {
            for (layer, l) in model.params.moe_layers_mut().zip(&loads) {
                balance_update(layer, l, balance_rate);
            }
        }
        let rec = StepRecord {
            step,
            loss,
            lr,
            loads,
            tokens: batch.len(),
        };
        on_step(model, &rec)?;
    }
    Ok(())
}
