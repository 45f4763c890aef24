use serde::{Deserialize, Serialize};

use super::data::DataSpec;
use crate::error::{invalid, Result};
use crate::model::{LrSchedule, ModelConfig, Schedule, Staged};
use crate::upcycle::{HeuristicSpec, ReplicationPlan, Strategy, DEFAULT_DELTA};

/// Optimization and logging settings shared by every arm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSpec {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub decay_fraction: f64,
    /// Sequences per batch.
    pub batch_seqs: usize,
    pub balance_rate: f64,
    /// Steps between intermediate evaluations (0 disables them).
    pub eval_every: u64,
    /// Token budget of intermediate evaluations; transition and terminal
    /// evaluations always use the whole eval split.
    pub probe_eval_tokens: usize,
    /// Steps between replica-divergence probes after an expansion.
    pub probe_interval: u64,
    /// Also decay the learning rate to zero at the end of phase 1, then
    /// warm up again for phase 2.
    pub anneal_phase1: bool,
    /// Batches whose gradients are summed for utility scores.
    pub utility_batches: usize,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            peak_lr: 3e-3,
            warmup_steps: 100,
            decay_fraction: 0.1,
            batch_seqs: 8,
            balance_rate: 1e-3,
            eval_every: 500,
            probe_eval_tokens: 8192,
            probe_interval: 100,
            anneal_phase1: false,
            utility_batches: 8,
        }
    }
}

/// Modeled wall-clock seconds per optimizer step at each size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostSpec {
    pub s_e: f64,
    pub s_me: f64,
}

impl Default for CostSpec {
    fn default() -> Self {
        Self { s_e: 2.2, s_me: 4.2 }
    }
}

impl CostSpec {
    /// Step time as `a + b · total_params` for both sizes.
    pub fn affine(a: f64, b: f64, params_e: usize, params_me: usize) -> Result<Self> {
        let c = Self {
            s_e: a + b * params_e as f64,
            s_me: a + b * params_me as f64,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s_e > 0.0 && self.s_me > self.s_e && self.s_me.is_finite()) {
            return invalid(format!(
                "step times must satisfy s_mE > s_E > 0, got {} and {}",
                self.s_e, self.s_me
            ));
        }
        Ok(())
    }
}

/// Everything needed to run the Fixed-E / Upcycled / Fixed-mE protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub m: usize,
    pub tau: u64,
    /// Total steps; alternatively derived from `cpt_fraction`.
    pub total_steps: Option<u64>,
    /// Continued-training length as a fraction of `tau`.
    pub cpt_fraction: Option<f64>,
    pub strategy: Strategy,
    /// Replica counts per MoE block for the `manual` strategy.
    pub manual_plan: Option<Vec<Vec<usize>>>,
    pub heuristic: HeuristicSpec,
    pub delta: f64,
    pub seeds: Vec<u64>,
    pub data: DataSpec,
    pub cost: CostSpec,
    pub train: TrainSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::reference()
    }
}

impl ExperimentConfig {
    /// Desk reference: 6 blocks, 8→16 experts, top-2, 3000 + 3000 steps.
    pub fn reference() -> Self {
        Self {
            model: ModelConfig::reference(),
            m: 2,
            tau: 3000,
            total_steps: Some(6000),
            cpt_fraction: None,
            strategy: Strategy::Uniform,
            manual_plan: None,
            heuristic: HeuristicSpec::copy(),
            delta: DEFAULT_DELTA,
            seeds: vec![0, 1, 2],
            data: DataSpec::default(),
            cost: CostSpec::default(),
            train: TrainSpec::default(),
        }
    }

    /// Same task on a model small enough to run every arm in seconds.
    pub fn quick() -> Self {
        let mut cfg = Self::reference();
        cfg.model.dim = 16;
        cfg.model.ffn_dim_dense = 32;
        cfg.model.expert_ffn_dim = 8;
        cfg.model.layout.truncate(2);
        cfg.model.experts = 4;
        cfg.data.corpus_len = 60_000;
        cfg.tau = 300;
        cfg.total_steps = Some(600);
        cfg.seeds = vec![0];
        cfg.train.warmup_steps = 20;
        cfg.train.eval_every = 100;
        cfg.train.probe_interval = 50;
        cfg.train.probe_eval_tokens = 2048;
        cfg
    }

    pub fn total(&self) -> Result<u64> {
        match (self.total_steps, self.cpt_fraction) {
            (Some(_), Some(_)) => invalid("set either total_steps or cpt_fraction, not both"),
            (Some(t), None) => Ok(t),
            (None, Some(f)) if f > 0.0 && f.is_finite() => Ok(self.tau + (f * self.tau as f64).round() as u64),
            (None, Some(f)) => invalid(format!("cpt_fraction must be positive, got {f}")),
            (None, None) => invalid("one of total_steps or cpt_fraction is required"),
        }
    }

    /// Same experiment with continued training of `fraction · tau` steps.
    pub fn with_cpt_fraction(&self, fraction: f64) -> Self {
        Self {
            total_steps: None,
            cpt_fraction: Some(fraction),
            ..self.clone()
        }
    }

    pub fn with_total(&self, total: u64) -> Self {
        Self {
            total_steps: Some(total),
            cpt_fraction: None,
            ..self.clone()
        }
    }

    /// Checks everything except the step budget.
    pub fn validate_base(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        self.cost.validate()?;
        if self.m < 2 {
            return invalid(format!("expansion factor must be at least 2, got {}", self.m));
        }
        if self.seeds.is_empty() {
            return invalid("at least one seed is required");
        }
        if self.data.vocab != self.model.vocab {
            return invalid(format!(
                "data vocab {} != model vocab {}",
                self.data.vocab, self.model.vocab
            ));
        }
        if self.train.batch_seqs == 0 {
            return invalid("batch_seqs must be positive");
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return invalid("delta must be non-negative");
        }
        if self.strategy == Strategy::Manual {
            let counts = self
                .manual_plan
                .clone()
                .ok_or_else(|| crate::Error::InvalidInput("manual strategy requires manual_plan".into()))?;
            ReplicationPlan::manual(counts, self.m)?.validate(self.model.moe_blocks(), self.model.experts)?;
        }
        self.heuristic.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_base()?;
        let total = self.total()?;
        if self.tau >= total {
            return invalid(format!("tau {} must be below total steps {total}", self.tau));
        }
        self.fixed_schedule(total)?;
        self.two_phase_schedule(total)?;
        Ok(())
    }

    /// Plain warmup-stable-decay schedule of a fixed-size arm.
    pub fn fixed_schedule(&self, total: u64) -> Result<Schedule> {
        let t = &self.train;
        Schedule::new(t.warmup_steps, t.peak_lr, total, t.decay_fraction)
    }

    /// Schedule of a two-phase arm expanding at `tau` and stopping at `total`.
    pub fn two_phase_schedule(&self, total: u64) -> Result<Box<dyn LrSchedule>> {
        let t = &self.train;
        if t.anneal_phase1 && self.tau > 0 && self.tau < total {
            let warm = |n: u64| t.warmup_steps.min(n / 2);
            Ok(Box::new(Staged {
                first: Schedule::new(warm(self.tau), t.peak_lr, self.tau, t.decay_fraction)?,
                second: Schedule::new(warm(total - self.tau), t.peak_lr, total - self.tau, t.decay_fraction)?,
            }))
        } else {
            Ok(Box::new(self.fixed_schedule(total)?))
        }
    }

    /// Tokens each arm trains on.
    pub fn tokens_per_step(&self) -> usize {
        self.train.batch_seqs * self.model.seq_len
    }
}
