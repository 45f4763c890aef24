use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::data::{eval_batches, gen_data, Corpus, DataSpec, WindowSampler};
use super::measures::{cost, efficiency, CostReport};
use crate::error::{invalid, Error, Result};
use crate::model::{
    count_flops, eval_loss, forward, train_steps_with, Batch, BatchSource, BlockKind, LrSchedule, MoEModel,
    ModelConfig, OptState,
};
use crate::numerics::{mix_seed, Rng};
use crate::upcycle::{
    allocate_utility, expand_opt_state, replica_divergence, replica_load_distance, sparse_opt_state, sparse_upcycle,
    upcycle, utility_scores, HeuristicSpec, ReplicationPlan, Strategy, UtilityKind, UtilityScores,
};

/// Windows per evaluation batch.
pub const EVAL_BATCH_SEQS: usize = 64;

/// Which protocol arm produced a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// `E` experts from scratch for all steps.
    FixedE,
    /// `E` experts to `tau`, expanded to `mE`, continued.
    Upcycled,
    /// `mE` experts from scratch for all steps.
    FixedMe,
    /// Dense model to `tau`, converted to `mE` experts, continued.
    Sparse,
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::FixedE => "fixed_e",
            Arm::Upcycled => "upcycled",
            Arm::FixedMe => "fixed_me",
            Arm::Sparse => "sparse",
        }
    }
}

/// Step-0 and terminal evaluations use the whole eval split; the rest use a
/// prefix of it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: u64,
    pub loss: f64,
    pub tokens: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub max_load_ratio: f64,
}

/// Replica divergence at one probe step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergencePoint {
    pub step: u64,
    /// Mean pairwise L2 distance of replica parameters.
    pub param_distance: f64,
    /// Mean pairwise L1 distance of replica token counts since the previous
    /// probe.
    pub load_distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub arm: Arm,
    pub label: String,
    pub seed: u64,
    /// Expert count at the end of the run.
    pub experts: usize,
    /// Step at which the data switches to the CPT split (and two-phase arms
    /// expand).
    pub tau: u64,
    pub total_steps: u64,
    pub steps: Vec<StepLog>,
    pub evals: Vec<EvalPoint>,
    /// Tokens per expert per MoE block, accumulated since the last change
    /// of architecture.
    pub loads: Vec<Vec<u64>>,
    pub divergence: Vec<DivergencePoint>,
    /// Full eval loss right before and right after the expansion.
    pub loss_pre: Option<f64>,
    pub loss_post: Option<f64>,
    pub plan: Option<ReplicationPlan>,
    pub utility: Option<UtilityScores>,
    /// Full eval loss at step 0 for fixed arms, after the expansion for
    /// two-phase arms.
    pub init_loss: f64,
    pub terminal_loss: f64,
    pub tokens: u64,
    pub active_flops_per_token: f64,
    /// Modeled seconds for the whole run.
    pub cost_seconds: f64,
    /// Squared L2 distance between the final trainable parameters and those
    /// at step 0 (fixed arms) or right after the expansion (two-phase arms).
    pub travel_sq: f64,
}

impl RunMetrics {
    fn new(arm: Arm, label: &str, seed: u64, experts: usize, tau: u64) -> Self {
        Self {
            arm,
            label: label.to_string(),
            seed,
            experts,
            tau,
            total_steps: 0,
            steps: Vec::new(),
            evals: Vec::new(),
            loads: Vec::new(),
            divergence: Vec::new(),
            loss_pre: None,
            loss_post: None,
            plan: None,
            utility: None,
            init_loss: f64::NAN,
            terminal_loss: f64::NAN,
            tokens: 0,
            active_flops_per_token: 0.0,
            cost_seconds: 0.0,
            travel_sq: 0.0,
        }
    }

    /// `|L(tau+) - L(tau-)|` for two-phase runs.
    pub fn warm_init_gap(&self) -> Option<f64> {
        Some((self.loss_post? - self.loss_pre?).abs())
    }

    /// Data phase of a step.
    pub fn phase_of(&self, step: u64) -> &'static str {
        if step < self.tau {
            "pretrain"
        } else {
            "cpt"
        }
    }

    /// Parameter divergence at the first probe at or after `step`.
    pub fn divergence_at(&self, step: u64) -> Option<f64> {
        self.divergence
            .iter()
            .find(|p| p.step >= step)
            .map(|p| p.param_distance)
    }
}

/// A finished run with its final state.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub metrics: RunMetrics,
    pub model: MoEModel,
    pub opt: OptState,
}

/// How a two-phase arm expands at `tau`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpcycleVariant {
    pub label: String,
    pub strategy: Strategy,
    pub manual_plan: Option<Vec<Vec<usize>>>,
    pub heuristic: HeuristicSpec,
    pub delta: f64,
}

impl UpcycleVariant {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Self {
            label: Arm::Upcycled.name().to_string(),
            strategy: cfg.strategy,
            manual_plan: cfg.manual_plan.clone(),
            heuristic: cfg.heuristic.clone(),
            delta: cfg.delta,
        }
    }

    pub fn named(&self, label: &str) -> Self {
        Self {
            label: label.to_string(),
            ..self.clone()
        }
    }
}

/// Replication plan for `strategy`, scoring utilities on `batches` when the
/// strategy needs them.
pub fn plan_for(
    model: &MoEModel,
    opt: &OptState,
    strategy: Strategy,
    manual: Option<&Vec<Vec<usize>>>,
    m: usize,
    batches: &[Batch],
) -> Result<(ReplicationPlan, Option<UtilityScores>)> {
    let (layers, experts) = (model.config.moe_blocks(), model.config.experts);
    let (plan, scores) = match strategy {
        Strategy::Uniform => (ReplicationPlan::uniform(layers, experts, m)?, None),
        Strategy::Manual => {
            let counts = manual.ok_or_else(|| Error::InvalidInput("manual strategy requires a plan".into()))?;
            (ReplicationPlan::manual(counts.clone(), m)?, None)
        }
        s => {
            let kind = UtilityKind::from_strategy(s)
                .ok_or_else(|| Error::InvalidInput(format!("no utility for strategy {}", s.name())))?;
            let scores = utility_scores(model, batches, kind, opt)?;
            (allocate_utility(&scores, m)?, Some(scores))
        }
    };
    plan.validate(layers, experts)?;
    Ok((plan, scores))
}

/// Pretrain split before `tau`, CPT split from `tau` on.
#[derive(Clone, Debug)]
pub struct PhasedSource {
    pub pretrain: WindowSampler,
    pub cpt: WindowSampler,
    pub tau: u64,
}

impl BatchSource for PhasedSource {
    fn batch(&self, step: u64) -> Batch {
        if step < self.tau {
            self.pretrain.batch(step)
        } else {
            self.cpt.batch(step)
        }
    }
}

/// Data, evaluation sets and seeds shared by every arm of one seed.
pub struct SeedContext {
    pub cfg: ExperimentConfig,
    pub seed: u64,
    pub corpus: Corpus,
    pub data: PhasedSource,
    pub eval_full: Vec<Batch>,
    pub eval_probe: Vec<Batch>,
    /// Held-out CPT-split batches for utility scores.
    pub utility: Vec<Batch>,
}

#[derive(Clone)]
struct RunState {
    model: MoEModel,
    opt: OptState,
    metrics: RunMetrics,
    groups: Option<Vec<Vec<Vec<usize>>>>,
    load_window: Vec<Vec<Vec<usize>>>,
    origin: Vec<f64>,
}

struct Branch<'a> {
    schedule: &'a dyn LrSchedule,
    stop: u64,
}

struct Expanded {
    model: MoEModel,
    opt: OptState,
    groups: Vec<Vec<Vec<usize>>>,
    plan: Option<ReplicationPlan>,
    utility: Option<UtilityScores>,
}

/// Everything one seed produced for a set of budgets.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct FamilyResult {
    pub seed: u64,
    pub fixed_e: BTreeMap<u64, RunMetrics>,
    pub fixed_me: BTreeMap<u64, RunMetrics>,
    /// Per variant label, per total step count.
    pub upcycled: BTreeMap<String, BTreeMap<u64, RunMetrics>>,
    pub sparse: BTreeMap<u64, RunMetrics>,
}

/// Budgets and arms to run for one seed.
#[derive(Clone, Debug, Default)]
pub struct FamilyPlan {
    /// Totals for both fixed-size arms.
    pub fixed_totals: Vec<u64>,
    pub variants: Vec<(UpcycleVariant, Vec<u64>)>,
    pub sparse_totals: Vec<u64>,
}

/// One Fixed-E / Upcycled / Fixed-mE comparison.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProtocolResult {
    pub seed: u64,
    pub tau: u64,
    pub total_steps: u64,
    pub fixed_e: RunMetrics,
    pub upcycled: RunMetrics,
    pub fixed_me: RunMetrics,
    pub sparse: Option<RunMetrics>,
    /// `None` when the two fixed arms tie.
    pub eta: Option<f64>,
    pub cost: CostReport,
}

impl FamilyResult {
    /// Assembles the comparison for one variant and budget.
    pub fn protocol(&self, label: &str, total: u64, cfg: &ExperimentConfig) -> Result<ProtocolResult> {
        let missing = |what: &str| Error::InvalidInput(format!("no {what} run with {total} steps"));
        let fixed_e = self.fixed_e.get(&total).ok_or_else(|| missing("fixed_e"))?.clone();
        let fixed_me = self.fixed_me.get(&total).ok_or_else(|| missing("fixed_me"))?.clone();
        let upcycled = self
            .upcycled
            .get(label)
            .and_then(|m| m.get(&total))
            .ok_or_else(|| missing(label))?
            .clone();
        let sparse = self.sparse.get(&total).cloned();
        if fixed_e.tokens != upcycled.tokens || fixed_me.tokens != upcycled.tokens {
            return Err(Error::InvalidState(format!(
                "token budgets differ: {} / {} / {}",
                fixed_e.tokens, upcycled.tokens, fixed_me.tokens
            )));
        }
        if upcycled.active_flops_per_token != fixed_me.active_flops_per_token {
            return Err(Error::InvalidState(format!(
                "active compute differs: {} vs {} FLOPs per token",
                upcycled.active_flops_per_token, fixed_me.active_flops_per_token
            )));
        }
        let eta = match efficiency(fixed_e.terminal_loss, upcycled.terminal_loss, fixed_me.terminal_loss) {
            Ok(v) => Some(v),
            Err(Error::DegenerateGap(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(ProtocolResult {
            seed: self.seed,
            tau: upcycled.tau,
            total_steps: total,
            fixed_e,
            upcycled,
            fixed_me,
            sparse,
            eta,
            cost: cost(&cfg.cost, cfg.tau, total)?,
        })
    }
}

fn agreement(a: &dyn LrSchedule, b: &dyn LrSchedule, from: u64, stop: u64) -> Result<u64> {
    for t in from..stop {
        if a.lr_at(t)?.to_bits() != b.lr_at(t)?.to_bits() {
            return Ok(t);
        }
    }
    Ok(stop)
}

fn same_state(a: &RunState, b: &RunState) -> bool {
    a.opt.step == b.opt.step
        && a.model.config == b.model.config
        && a.model.params.bitwise_eq(&b.model.params)
        && a.opt.m.bitwise_eq(&b.opt.m)
        && a.opt.v.bitwise_eq(&b.opt.v)
}

/// Groups equal states, returning each group's member indices.
fn group_states(states: &[RunState]) -> Vec<Vec<usize>> {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, s) in states.iter().enumerate() {
        match groups.iter_mut().find(|g| same_state(&states[g[0]], s)) {
            Some(g) => g.push(i),
            None => groups.push(vec![i]),
        }
    }
    groups
}

impl SeedContext {
    pub fn new(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        cfg.validate_base()?;
        let spec = DataSpec {
            seed: cfg.data.seed ^ seed ^ 1,
            ..cfg.data.clone()
        };
        let (seq, bos) = (cfg.model.seq_len, cfg.model.bos());
        let corpus = gen_data(&spec, seq)?;
        let bs = cfg.train.batch_seqs;
        let data = PhasedSource {
            pretrain: WindowSampler::new(corpus.pretrain(), seq, bs, mix_seed(spec.seed, 1), bos)?,
            cpt: WindowSampler::new(corpus.cpt(), seq, bs, mix_seed(spec.seed, 2), bos)?,
            tau: cfg.tau,
        };
        let eval_full = eval_batches(corpus.eval(), seq, EVAL_BATCH_SEQS, bos);
        if eval_full.is_empty() {
            return invalid("eval split holds no complete window");
        }
        let per_batch = EVAL_BATCH_SEQS * seq;
        let probe_batches = cfg
            .train
            .probe_eval_tokens
            .div_ceil(per_batch)
            .clamp(1, eval_full.len());
        let eval_probe = eval_full[..probe_batches].to_vec();
        let utility_src = WindowSampler::new(corpus.cpt(), seq, bs, mix_seed(spec.seed, 3), bos)?;
        let utility = (0..cfg.train.utility_batches as u64)
            .map(|i| utility_src.batch(i))
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            seed,
            corpus,
            data,
            eval_full,
            eval_probe,
            utility,
        })
    }

    /// Model config of the arm with `experts` experts for this seed.
    pub fn model_config(&self, experts: usize) -> ModelConfig {
        ModelConfig {
            seed: self.cfg.model.seed ^ self.seed,
            ..self.cfg.model.with_experts(experts)
        }
    }

    /// Dense counterpart: expert banks become single convertible FFNs.
    pub fn dense_config(&self) -> ModelConfig {
        let mut c = self.model_config(1);
        for k in &mut c.layout {
            if *k == BlockKind::Moe {
                *k = BlockKind::Convertible;
            }
        }
        c
    }

    /// Generator for the expansion operator's noise.
    pub fn operator_rng(&self) -> Rng {
        Rng::new(mix_seed(self.seed ^ 2, 0))
    }

    fn start(&self, config: &ModelConfig, arm: Arm, label: &str) -> Result<RunState> {
        let model = MoEModel::init(config)?;
        let opt = OptState::new(&model.params);
        let mut metrics = RunMetrics::new(arm, label, self.seed, config.experts, self.cfg.tau);
        metrics.init_loss = eval_loss(&model, &self.eval_full)?;
        metrics.evals.push(EvalPoint {
            step: 0,
            loss: metrics.init_loss,
            tokens: self.eval_tokens(&self.eval_full),
        });
        Ok(RunState {
            origin: model.params.trainable_vector(),
            model,
            opt,
            metrics,
            groups: None,
            load_window: Vec::new(),
        })
    }

    fn eval_tokens(&self, batches: &[Batch]) -> usize {
        batches.iter().map(Batch::len).sum()
    }

    fn probe(&self, st: &mut RunState) {
        if let Some(groups) = &st.groups {
            st.metrics.divergence.push(DivergencePoint {
                step: st.opt.step,
                param_distance: replica_divergence(&st.model, groups),
                load_distance: replica_load_distance(&st.load_window, groups),
            });
            st.load_window.clear();
        }
    }

    /// Trains `st` up to global step `to`.
    fn advance(&self, st: &mut RunState, schedule: &dyn LrSchedule, to: u64) -> Result<()> {
        let from = st.opt.step;
        if to < from {
            return invalid(format!("cannot rewind from step {from} to {to}"));
        }
        let train = &self.cfg.train;
        let probe_tokens = self.eval_tokens(&self.eval_probe);
        let RunState {
            model,
            opt,
            metrics,
            groups,
            load_window,
            ..
        } = st;
        train_steps_with(
            model,
            opt,
            &self.data,
            schedule,
            to - from,
            train.balance_rate,
            |m, r| {
                metrics.steps.push(StepLog {
                    step: r.step,
                    loss: r.loss,
                    lr: r.lr,
                    max_load_ratio: r.max_load_ratio(),
                });
                metrics.tokens += r.tokens as u64;
                if metrics.loads.len() != r.loads.len() {
                    metrics.loads = r.loads.iter().map(|l| vec![0; l.len()]).collect();
                }
                for (acc, l) in metrics.loads.iter_mut().zip(&r.loads) {
                    for (a, &x) in acc.iter_mut().zip(l) {
                        *a += x as u64;
                    }
                }
                let done = r.step + 1;
                if train.eval_every > 0 && done % train.eval_every == 0 {
                    metrics.evals.push(EvalPoint {
                        step: done,
                        loss: eval_loss(m, &self.eval_probe)?,
                        tokens: probe_tokens,
                    });
                }
                if let Some(g) = groups {
                    load_window.push(r.loads.clone());
                    let since = done.saturating_sub(metrics.tau);
                    if train.probe_interval > 0 && since % train.probe_interval == 0 {
                        metrics.divergence.push(DivergencePoint {
                            step: done,
                            param_distance: replica_divergence(m, g),
                            load_distance: replica_load_distance(load_window, g),
                        });
                        load_window.clear();
                    }
                }
                Ok(())
            },
        )?;
        Ok(())
    }

    /// Runs every branch from `start`, sharing the longest common prefix of
    /// learning rates with the longest branch.
    fn run_branches(&self, start: RunState, branches: &[Branch]) -> Result<Vec<RunState>> {
        let Some(trunk_i) = (0..branches.len()).max_by_key(|&i| (branches[i].stop, std::cmp::Reverse(i))) else {
            return Ok(Vec::new());
        };
        let from = start.opt.step;
        let trunk = &branches[trunk_i];
        for b in branches {
            if b.stop < from || b.stop > b.schedule.total_steps() {
                return invalid(format!(
                    "branch stop {} outside [{from}, {}]",
                    b.stop,
                    b.schedule.total_steps()
                ));
            }
        }
        let mut order = Vec::new();
        for (i, b) in branches.iter().enumerate() {
            if i != trunk_i {
                order.push((agreement(trunk.schedule, b.schedule, from, b.stop)?, i));
            }
        }
        order.sort();
        let mut out: Vec<Option<RunState>> = vec![None; branches.len()];
        let mut state = start;
        for (p, i) in order {
            self.advance(&mut state, trunk.schedule, p)?;
            let mut b = state.clone();
            self.advance(&mut b, branches[i].schedule, branches[i].stop)?;
            out[i] = Some(b);
        }
        self.advance(&mut state, trunk.schedule, trunk.stop)?;
        out[trunk_i] = Some(state);
        Ok(out.into_iter().map(|s| s.expect("every branch is filled")).collect())
    }

    fn finalize(&self, mut st: RunState, stop: u64, cost_seconds: f64) -> Result<RunOutput> {
        st.metrics.total_steps = stop;
        st.metrics.evals.retain(|e| e.step != stop);
        st.metrics.terminal_loss = eval_loss(&st.model, &self.eval_full)?;
        st.metrics.evals.push(EvalPoint {
            step: stop,
            loss: st.metrics.terminal_loss,
            tokens: self.eval_tokens(&self.eval_full),
        });
        if st.groups.is_some() && st.metrics.divergence.last().map(|p| p.step) != Some(stop) {
            self.probe(&mut st);
        }
        let (_, cache) = forward(&st.model, &self.eval_probe[0])?;
        let flops = count_flops(&st.model, &cache);
        st.metrics.active_flops_per_token = flops.active as f64 / flops.tokens.max(1) as f64;
        st.metrics.cost_seconds = cost_seconds;
        st.metrics.travel_sq = st
            .model
            .params
            .trainable_vector()
            .iter()
            .zip(&st.origin)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(RunOutput {
            metrics: st.metrics,
            model: st.model,
            opt: st.opt,
        })
    }

    /// Trains a fresh model from step 0, returning one finished run per
    /// entry of `totals` and one state at `tau` per entry of
    /// `phase1_totals` (two-phase schedule of that total).
    fn pretrain_family(
        &self,
        config: &ModelConfig,
        arm: Arm,
        totals: &[u64],
        phase1_totals: &[u64],
        step_seconds: f64,
    ) -> Result<(Vec<RunOutput>, Vec<RunState>)> {
        let tau = self.cfg.tau;
        let fixed: Vec<_> = totals
            .iter()
            .map(|&t| self.cfg.fixed_schedule(t))
            .collect::<Result<_>>()?;
        let staged: Vec<_> = phase1_totals
            .iter()
            .map(|&t| {
                if t <= tau {
                    invalid(format!("total {t} must exceed tau {tau}"))
                } else {
                    self.cfg.two_phase_schedule(t)
                }
            })
            .collect::<Result<_>>()?;
        let mut branches: Vec<Branch> = fixed
            .iter()
            .zip(totals)
            .map(|(s, &stop)| Branch {
                schedule: s as &dyn LrSchedule,
                stop,
            })
            .collect();
        branches.extend(staged.iter().map(|s| Branch {
            schedule: s.as_ref(),
            stop: tau,
        }));
        let start = self.start(config, arm, arm.name())?;
        let mut states = self.run_branches(start, &branches)?;
        let phase1 = states.split_off(totals.len());
        let runs = states
            .into_iter()
            .zip(totals)
            .map(|(s, &t)| self.finalize(s, t, t as f64 * step_seconds))
            .collect::<Result<_>>()?;
        Ok((runs, phase1))
    }

    /// Expands each distinct phase-1 state once and continues it to every
    /// total sharing it.
    fn phase_two(
        &self,
        phase1: &[RunState],
        totals: &[u64],
        arm: Arm,
        label: &str,
        expand: &dyn Fn(&RunState) -> Result<Expanded>,
    ) -> Result<Vec<RunOutput>> {
        let tau = self.cfg.tau;
        let cost = &self.cfg.cost;
        let schedules: Vec<_> = totals
            .iter()
            .map(|&t| self.cfg.two_phase_schedule(t))
            .collect::<Result<_>>()?;
        let mut out: Vec<Option<RunOutput>> = vec![None; totals.len()];
        for group in group_states(phase1) {
            let base = &phase1[group[0]];
            let ex = expand(base)?;
            let mut metrics = base.metrics.clone();
            metrics.arm = arm;
            metrics.label = label.to_string();
            metrics.experts = ex.model.config.experts;
            metrics.evals.retain(|e| e.step != tau);
            let pre = eval_loss(&base.model, &self.eval_full)?;
            let post = eval_loss(&ex.model, &self.eval_full)?;
            metrics.loss_pre = Some(pre);
            metrics.loss_post = Some(post);
            metrics.init_loss = post;
            metrics.plan = ex.plan;
            metrics.utility = ex.utility;
            metrics.loads.clear();
            let tokens = self.eval_tokens(&self.eval_full);
            metrics.evals.push(EvalPoint {
                step: tau,
                loss: post,
                tokens,
            });
            let mut st = RunState {
                origin: ex.model.params.trainable_vector(),
                model: ex.model,
                opt: ex.opt,
                metrics,
                groups: Some(ex.groups),
                load_window: Vec::new(),
            };
            self.probe(&mut st);
            let branches: Vec<Branch> = group
                .iter()
                .map(|&i| Branch {
                    schedule: schedules[i].as_ref(),
                    stop: totals[i],
                })
                .collect();
            for (state, &i) in self.run_branches(st, &branches)?.into_iter().zip(&group) {
                let t = totals[i];
                let secs = tau as f64 * cost.s_e + (t - tau) as f64 * cost.s_me;
                out[i] = Some(self.finalize(state, t, secs)?);
            }
        }
        Ok(out.into_iter().map(|o| o.expect("every total is covered")).collect())
    }

    fn expand_upcycle(&self, st: &RunState, variant: &UpcycleVariant) -> Result<Expanded> {
        let (plan, utility) = plan_for(
            &st.model,
            &st.opt,
            variant.strategy,
            variant.manual_plan.as_ref(),
            self.cfg.m,
            &self.utility,
        )?;
        let mut rng = self.operator_rng();
        let model = upcycle(&st.model, &plan, &variant.heuristic, variant.delta, &mut rng)?;
        let opt = expand_opt_state(&st.opt, &plan)?;
        Ok(Expanded {
            model,
            opt,
            groups: plan.groups(),
            plan: Some(plan),
            utility,
        })
    }

    fn expand_sparse(&self, st: &RunState) -> Result<Expanded> {
        let experts = self.cfg.m * self.cfg.model.experts;
        let mut rng = self.operator_rng();
        let model = sparse_upcycle(&st.model, experts, self.cfg.model.top_k, &mut rng)?;
        let opt = sparse_opt_state(&st.opt, &st.model, &model)?;
        let groups = vec![vec![(0..experts).collect()]; model.config.moe_blocks()];
        Ok(Expanded {
            model,
            opt,
            groups,
            plan: None,
            utility: None,
        })
    }

    /// Phase 1 of the configured two-phase arm: `E` experts up to `tau`.
    pub fn phase_one(&self) -> Result<RunOutput> {
        let total = self.cfg.total()?;
        let config = self.model_config(self.cfg.model.experts);
        let (_, mut phase1) = self.pretrain_family(&config, Arm::FixedE, &[], &[total], self.cfg.cost.s_e)?;
        let st = phase1.remove(0);
        let secs = self.cfg.tau as f64 * self.cfg.cost.s_e;
        self.finalize(st, self.cfg.tau, secs)
    }

    /// Continues an existing model from `opt.step` to the configured total
    /// on the two-phase schedule.
    pub fn continue_run(
        &self,
        model: MoEModel,
        opt: OptState,
        arm: Arm,
        label: &str,
        groups: Option<Vec<Vec<Vec<usize>>>>,
    ) -> Result<RunOutput> {
        let total = self.cfg.total()?;
        let from = opt.step;
        let mut metrics = RunMetrics::new(arm, label, self.seed, model.config.experts, self.cfg.tau);
        metrics.init_loss = eval_loss(&model, &self.eval_full)?;
        metrics.evals.push(EvalPoint {
            step: from,
            loss: metrics.init_loss,
            tokens: self.eval_tokens(&self.eval_full),
        });
        let mut st = RunState {
            origin: model.params.trainable_vector(),
            model,
            opt,
            metrics,
            groups,
            load_window: Vec::new(),
        };
        self.probe(&mut st);
        let schedule = self.cfg.two_phase_schedule(total)?;
        let mut out = self.run_branches(
            st,
            &[Branch {
                schedule: schedule.as_ref(),
                stop: total,
            }],
        )?;
        let st = out.remove(0);
        let per_step = if st.model.config.experts > self.cfg.model.experts {
            self.cfg.cost.s_me
        } else {
            self.cfg.cost.s_e
        };
        self.finalize(st, total, total.saturating_sub(from) as f64 * per_step)
    }

    /// Fixed-size run of `experts` experts for each of `totals`.
    pub fn fixed_family(&self, experts: usize, totals: &[u64]) -> Result<Vec<RunOutput>> {
        let arm = if experts == self.cfg.model.experts {
            Arm::FixedE
        } else {
            Arm::FixedMe
        };
        let secs = if arm == Arm::FixedE {
            self.cfg.cost.s_e
        } else {
            self.cfg.cost.s_me
        };
        Ok(self
            .pretrain_family(&self.model_config(experts), arm, totals, &[], secs)?
            .0)
    }

    /// Two-phase runs of one variant, one per total.
    pub fn upcycled_family(&self, variant: &UpcycleVariant, totals: &[u64]) -> Result<Vec<RunOutput>> {
        let config = self.model_config(self.cfg.model.experts);
        let (_, phase1) = self.pretrain_family(&config, Arm::FixedE, &[], totals, self.cfg.cost.s_e)?;
        self.phase_two(&phase1, totals, Arm::Upcycled, &variant.label, &|s| {
            self.expand_upcycle(s, variant)
        })
    }

    /// Dense-to-sparse runs, one per total.
    pub fn sparse_family(&self, totals: &[u64]) -> Result<Vec<RunOutput>> {
        let (_, phase1) = self.pretrain_family(&self.dense_config(), Arm::Sparse, &[], totals, self.cfg.cost.s_e)?;
        self.phase_two(&phase1, totals, Arm::Sparse, Arm::Sparse.name(), &|s| {
            self.expand_sparse(s)
        })
    }

    /// Runs every arm of `plan`. The E-expert phase 1 of all variants is
    /// shared with the Fixed-E runs whenever their learning rates agree.
    pub fn family(&self, plan: &FamilyPlan) -> Result<FamilyResult> {
        let e = self.cfg.model.experts;
        let me = self.cfg.m * e;
        let mut phase1_totals: Vec<u64> = plan.variants.iter().flat_map(|(_, t)| t.iter().copied()).collect();
        phase1_totals.sort_unstable();
        phase1_totals.dedup();
        let (fixed_e, phase1) = self.pretrain_family(
            &self.model_config(e),
            Arm::FixedE,
            &plan.fixed_totals,
            &phase1_totals,
            self.cfg.cost.s_e,
        )?;
        let mut result = FamilyResult {
            seed: self.seed,
            ..FamilyResult::default()
        };
        for (run, &t) in fixed_e.into_iter().zip(&plan.fixed_totals) {
            result.fixed_e.insert(t, run.metrics);
        }
        for (variant, totals) in &plan.variants {
            let states: Vec<RunState> = totals
                .iter()
                .map(|t| phase1[phase1_totals.binary_search(t).expect("collected above")].clone())
                .collect();
            let runs = self.phase_two(&states, totals, Arm::Upcycled, &variant.label, &|s| {
                self.expand_upcycle(s, variant)
            })?;
            let slot = result.upcycled.entry(variant.label.clone()).or_default();
            for (run, &t) in runs.into_iter().zip(totals) {
                slot.insert(t, run.metrics);
            }
        }
        for (run, &t) in self
            .fixed_family(me, &plan.fixed_totals)?
            .into_iter()
            .zip(&plan.fixed_totals)
        {
            result.fixed_me.insert(t, run.metrics);
        }
        if !plan.sparse_totals.is_empty() {
            for (run, &t) in self
                .sparse_family(&plan.sparse_totals)?
                .into_iter()
                .zip(&plan.sparse_totals)
            {
                result.sparse.insert(t, run.metrics);
            }
        }
        Ok(result)
    }
}

/// Fixed-size run of `experts` experts for the configured budget.
pub fn run_fixed(cfg: &ExperimentConfig, experts: usize, seed: u64) -> Result<RunOutput> {
    let ctx = SeedContext::new(cfg, seed)?;
    let total = cfg.total()?;
    if total == 0 {
        let arm = if experts == cfg.model.experts {
            Arm::FixedE
        } else {
            Arm::FixedMe
        };
        let st = ctx.start(&ctx.model_config(experts), arm, arm.name())?;
        return ctx.finalize(st, 0, 0.0);
    }
    let mut run = ctx.fixed_family(experts, &[total])?;
    Ok(run.remove(0))
}

/// Two-phase run with the configured strategy and heuristic.
pub fn run_two_phase(cfg: &ExperimentConfig, seed: u64) -> Result<RunOutput> {
    cfg.validate()?;
    let ctx = SeedContext::new(cfg, seed)?;
    let mut run = ctx.upcycled_family(&UpcycleVariant::from_config(cfg), &[cfg.total()?])?;
    Ok(run.remove(0))
}

/// The three-way comparison for one seed, optionally with the dense-to-sparse
/// arm.
pub fn run_protocol(cfg: &ExperimentConfig, seed: u64, with_sparse: bool) -> Result<ProtocolResult> {
    cfg.validate()?;
    let ctx = SeedContext::new(cfg, seed)?;
    let total = cfg.total()?;
    let variant = UpcycleVariant::from_config(cfg);
    let label = variant.label.clone();
    let plan = FamilyPlan {
        fixed_totals: vec![total],
        variants: vec![(variant, vec![total])],
        sparse_totals: if with_sparse { vec![total] } else { Vec::new() },
    };
    ctx.family(&plan)?.protocol(&label, total, cfg)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::model::Schedule;

    pub(crate) fn tiny() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::reference();
        cfg.model.dim = 8;
        cfg.model.ffn_dim_dense = 8;
        cfg.model.expert_ffn_dim = 4;
        cfg.model.layout = vec![BlockKind::Moe, BlockKind::Dense];
        cfg.model.experts = 4;
        cfg.model.vocab = 8;
        cfg.model.seq_len = 8;
        cfg.data.vocab = 8;
        cfg.data.corpus_len = 6000;
        cfg.tau = 40;
        cfg.total_steps = Some(80);
        cfg.train.warmup_steps = 5;
        cfg.train.batch_seqs = 2;
        cfg.train.eval_every = 20;
        cfg.train.probe_interval = 10;
        cfg.train.probe_eval_tokens = 64;
        cfg
    }

    fn final_eq(a: &RunOutput, b: &RunOutput) -> bool {
        a.model.params.bitwise_eq(&b.model.params)
            && a.opt.m.bitwise_eq(&b.opt.m)
            && a.opt.v.bitwise_eq(&b.opt.v)
            && a.metrics == b.metrics
    }

    #[test]
    fn branching_matches_direct_runs() {
        let cfg = tiny();
        let ctx = SeedContext::new(&cfg, 0).unwrap();
        let fam = ctx.fixed_family(4, &[60, 80, 100]).unwrap();
        for (run, t) in fam.iter().zip([60, 80, 100]) {
            let direct = run_fixed(&cfg.with_total(t), 4, 0).unwrap();
            assert!(final_eq(run, &direct), "total {t}");
            assert_eq!(run.metrics.steps.len() as u64, t);
        }
    }

    #[test]
    fn shared_phase_one_matches_direct_two_phase() {
        let cfg = tiny();
        let ctx = SeedContext::new(&cfg, 1).unwrap();
        let v = UpcycleVariant::from_config(&cfg);
        let plan = FamilyPlan {
            fixed_totals: vec![80],
            variants: vec![(v.clone(), vec![60, 80])],
            sparse_totals: vec![],
        };
        let fam = ctx.family(&plan).unwrap();
        for t in [60, 80] {
            let direct = run_two_phase(&cfg.with_total(t), 1).unwrap();
            assert_eq!(fam.upcycled[&v.label][&t], direct.metrics, "total {t}");
        }
    }

    #[test]
    fn anneal_flag_separates_phase_one() {
        let mut cfg = tiny();
        cfg.train.anneal_phase1 = true;
        let ctx = SeedContext::new(&cfg, 0).unwrap();
        let v = UpcycleVariant::from_config(&cfg);
        let plan = FamilyPlan {
            fixed_totals: vec![80],
            variants: vec![(v.clone(), vec![80])],
            sparse_totals: vec![],
        };
        let fam = ctx.family(&plan).unwrap();
        let up = &fam.upcycled[&v.label][&80];
        assert!(up.steps[39].lr < fam.fixed_e[&80].steps[39].lr);
        assert_eq!(up.steps[40].lr, 0.0);
        assert_eq!(*up, run_two_phase(&cfg, 0).unwrap().metrics);
    }

    #[test]
    fn protocol_parity_and_bookkeeping() {
        let cfg = tiny();
        let r = run_protocol(&cfg, 0, true).unwrap();
        assert_eq!(r.fixed_e.tokens, 80 * 16);
        assert_eq!(r.fixed_e.tokens, r.upcycled.tokens);
        assert_eq!(r.fixed_me.tokens, r.upcycled.tokens);
        assert_eq!(r.sparse.as_ref().unwrap().tokens, r.upcycled.tokens);
        assert_eq!(r.upcycled.active_flops_per_token, r.fixed_me.active_flops_per_token);
        assert!(r.fixed_e.active_flops_per_token == r.upcycled.active_flops_per_token);
        assert_eq!(r.upcycled.experts, 8);
        assert_eq!(r.sparse.as_ref().unwrap().experts, 8);
        assert_eq!(r.fixed_me.experts, 8);
        let up = &r.upcycled;
        assert!(up.loss_pre.unwrap().is_finite() && up.loss_post.unwrap().is_finite());
        assert_eq!(up.divergence[0].step, cfg.tau);
        assert_eq!(up.divergence[0].param_distance, 0.0);
        assert!(up.divergence.windows(2).all(|w| w[0].step < w[1].step));
        assert!(up.evals.windows(2).all(|w| w[0].step < w[1].step));
        assert_eq!(up.evals.last().unwrap().step, 80);
        assert_eq!(up.steps.len(), 80);
        assert_eq!(up.phase_of(39), "pretrain");
        assert_eq!(up.phase_of(40), "cpt");
        assert_eq!(up.loads[0].len(), 8);
        let c = &cfg.cost;
        assert_eq!(up.cost_seconds, 40.0 * c.s_e + 40.0 * c.s_me);
        assert_eq!(r.fixed_me.cost_seconds, 80.0 * c.s_me);
        if let Some(eta) = r.eta {
            let direct = efficiency(r.fixed_e.terminal_loss, up.terminal_loss, r.fixed_me.terminal_loss).unwrap();
            assert_eq!(eta, direct);
        }
    }

    #[test]
    fn zero_steps_keeps_only_init_loss() {
        let cfg = tiny().with_total(0);
        let run = run_fixed(&cfg, 4, 0).unwrap();
        assert!(run.metrics.steps.is_empty());
        assert_eq!(run.metrics.evals.len(), 1);
        assert_eq!(run.metrics.init_loss, run.metrics.terminal_loss);
        assert_eq!(run.metrics.tokens, 0);
    }

    #[test]
    fn same_seed_is_bitwise_reproducible() {
        let cfg = tiny();
        let a = run_two_phase(&cfg, 3).unwrap();
        let b = run_two_phase(&cfg, 3).unwrap();
        assert!(final_eq(&a, &b));
        let c = run_two_phase(&cfg, 4).unwrap();
        assert!(!a.model.params.bitwise_eq(&c.model.params));
    }

    #[test]
    fn phased_source_switches_split() {
        let cfg = tiny();
        let ctx = SeedContext::new(&cfg, 0).unwrap();
        assert_eq!(ctx.data.batch(39), ctx.data.pretrain.batch(39));
        assert_eq!(ctx.data.batch(40), ctx.data.cpt.batch(40));
        assert_eq!(ctx.utility.len(), cfg.train.utility_batches);
    }

    #[test]
    fn utility_variant_records_scores_and_plan() {
        let mut cfg = tiny();
        cfg.strategy = Strategy::Gradient;
        let run = run_two_phase(&cfg, 0).unwrap();
        let plan = run.metrics.plan.unwrap();
        assert_eq!(plan.counts[0].iter().sum::<usize>(), 8);
        assert_eq!(run.metrics.utility.unwrap().step, cfg.tau);
    }

    #[test]
    fn agreement_finds_first_difference() {
        let a = Schedule::new(5, 0.1, 100, 0.1).unwrap();
        let b = Schedule::new(5, 0.1, 60, 0.1).unwrap();
        assert_eq!(agreement(&a, &b, 0, 60).unwrap(), 54);
        assert_eq!(agreement(&a, &a, 10, 60).unwrap(), 60);
    }
}
