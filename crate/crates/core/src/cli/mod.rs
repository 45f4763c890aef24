//! Command-line front end.
//!
//! Every subcommand reads a JSON config (`--config`, defaulting to the
//! reference experiment), applies `--set key=value` overrides, and writes
//! its artifacts under `--out`. Exit codes: 0 success, 1 invalid input or
//! usage, 2 numeric failure.

mod output;
mod overrides;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

pub use output::{metrics_csv, metrics_rows, read_metrics_csv, write_json, write_metrics, MetricsRow, METRICS_COLUMNS};
pub use overrides::{apply_override, load_config, load_json};

use crate::bound::{bound, term1, term2, weighted_avg_loss, BoundInputs};
use crate::checkpoint::{load_checkpoint, save_checkpoint, write_atomic, Checkpoint, CheckpointMeta};
use crate::error::{Error, Result};
use crate::harness::{
    cost, plan_for, run_fixed, run_protocol, sweep, Arm, CostReport, ExperimentConfig, ProtocolResult, RunMetrics,
    SeedContext, SweepAxis,
};
use crate::model::eval_loss;
use crate::numerics::{mean, std_dev};
use crate::upcycle::{expand_opt_state, upcycle, utility_scores, Strategy, UtilityKind};

#[derive(Parser, Debug)]
#[command(
    name = "moe-upcycle",
    version,
    about = "Grow the expert count of a mixture-of-experts model mid-training"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON config file; the reference experiment when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config field, e.g. `--set model.experts=4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Run only this seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic corpus and its splits.
    GenData(Common),
    /// Train the E-expert model up to tau.
    Pretrain(Common),
    /// Expand a checkpoint to m·E experts.
    Upcycle {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Continue a checkpoint to the total step count on the CPT split.
    Cpt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Fixed-size runs from scratch (E and m·E unless --experts is given).
    Baseline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        experts: Option<usize>,
    },
    /// Three-way comparison with efficiency, cost and bound report.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Also run the dense-to-sparse arm.
        #[arg(long)]
        sparse: bool,
    },
    /// Protocol sweep over one axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// tau, cpt_fraction, strategy or activation_ratio.
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Evaluate the loss-gap bound from a JSON file of bound inputs.
    Bound(Common),
    /// Dump expert utility scores of a checkpoint.
    Utility {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// u_G, u_SAL, u_WN or u_CN; defaults to the config strategy.
        #[arg(long)]
        kind: Option<String>,
    },
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numeric { .. } | Error::DegenerateGap(_) => 2,
        _ => 1,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn experiment(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg: ExperimentConfig = load_config(c.config.as_deref(), &ExperimentConfig::reference(), &c.set)?;
    if let Some(s) = c.seed {
        cfg.seeds = vec![s];
    }
    Ok(cfg)
}

fn first_seed(cfg: &ExperimentConfig) -> u64 {
    cfg.seeds[0]
}

fn out_dir(c: &Common) -> Result<&Path> {
    fs::create_dir_all(&c.out)?;
    Ok(&c.out)
}

fn say(line: impl AsRef<str>) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{}", line.as_ref());
}

pub fn execute(cmd: &Command) -> Result<()> {
    match cmd {
        Command::GenData(c) => gen_data_cmd(c),
        Command::Pretrain(c) => pretrain_cmd(c),
        Command::Upcycle { common, checkpoint } => upcycle_cmd(common, checkpoint),
        Command::Cpt { common, checkpoint } => cpt_cmd(common, checkpoint),
        Command::Baseline { common, experts } => baseline_cmd(common, *experts),
        Command::Compare { common, sparse } => compare_cmd(common, *sparse),
        Command::Sweep { common, axis, values } => sweep_cmd(common, axis, values),
        Command::Bound(c) => bound_cmd(c),
        Command::Utility {
            common,
            checkpoint,
            kind,
        } => utility_cmd(common, checkpoint, kind.as_deref()),
    }
}

#[derive(Serialize)]
struct SplitInfo {
    start: usize,
    end: usize,
    entropy_rate: f64,
}

fn gen_data_cmd(c: &Common) -> Result<()> {
    let cfg = experiment(c)?;
    cfg.validate_base()?;
    let seed = first_seed(&cfg);
    let ctx = SeedContext::new(&cfg, seed)?;
    let dir = out_dir(c)?;
    let corpus = &ctx.corpus;
    let bytes: Vec<u8> = corpus.tokens.iter().flat_map(|t| t.to_le_bytes()).collect();
    write_atomic(&dir.join("corpus.bin"), &bytes)?;
    let split = |r: &std::ops::Range<usize>| SplitInfo {
        start: r.start,
        end: r.end,
        entropy_rate: corpus.transitions.entropy_rate(&corpus.tokens[r.clone()]),
    };
    let info = serde_json::json!({
        "seed": seed,
        "data": cfg.data,
        "data_seed": cfg.data.seed ^ seed ^ 1,
        "tokens": corpus.tokens.len(),
        "token_encoding": "u32 little-endian",
        "pretrain": split(&corpus.pretrain),
        "cpt": split(&corpus.cpt),
        "eval": split(&corpus.eval),
    });
    write_json(&dir.join("corpus.json"), &info)?;
    say(serde_json::to_string(&info)?);
    Ok(())
}

fn meta_for(cfg: &ExperimentConfig, ctx: &SeedContext, model: &crate::model::ModelConfig) -> Result<CheckpointMeta> {
    let mut meta = CheckpointMeta::new(model, ctx.seed);
    meta.data_seed = cfg.data.seed ^ ctx.seed ^ 1;
    meta.experiment = serde_json::to_value(cfg)?;
    Ok(meta)
}

fn pretrain_cmd(c: &Common) -> Result<()> {
    let cfg = experiment(c)?;
    cfg.validate()?;
    let ctx = SeedContext::new(&cfg, first_seed(&cfg))?;
    let run = ctx.phase_one()?;
    let dir = out_dir(c)?;
    let meta = meta_for(&cfg, &ctx, &run.model.config)?;
    save_checkpoint(
        &dir.join("pretrain.ckpt"),
        &Checkpoint {
            meta,
            model: run.model,
            opt: run.opt,
        },
    )?;
    write_metrics(&dir.join("metrics.csv"), [&run.metrics])?;
    say(format!("step {} eval_loss {}", cfg.tau, run.metrics.terminal_loss));
    Ok(())
}

fn upcycle_cmd(c: &Common, path: &Path) -> Result<()> {
    let ckpt = load_checkpoint(path)?;
    let mut cfg = experiment(c)?;
    if c.seed.is_none() {
        cfg.seeds = vec![ckpt.meta.seed];
    }
    cfg.validate_base()?;
    let ctx = SeedContext::new(&cfg, first_seed(&cfg))?;
    let (plan, scores) = plan_for(
        &ckpt.model,
        &ckpt.opt,
        cfg.strategy,
        cfg.manual_plan.as_ref(),
        cfg.m,
        &ctx.utility,
    )?;
    let mut rng = ctx.operator_rng();
    let model = upcycle(&ckpt.model, &plan, &cfg.heuristic, cfg.delta, &mut rng)?;
    let opt = expand_opt_state(&ckpt.opt, &plan)?;
    let pre = eval_loss(&ckpt.model, &ctx.eval_full)?;
    let post = eval_loss(&model, &ctx.eval_full)?;
    let mut meta = meta_for(&cfg, &ctx, &model.config)?;
    meta.plan = Some(plan.clone());
    let dir = out_dir(c)?;
    save_checkpoint(&dir.join("upcycled.ckpt"), &Checkpoint { meta, model, opt })?;
    let report = serde_json::json!({
        "step": ckpt.opt.step,
        "experts": plan.m * ckpt.model.config.experts,
        "plan": plan,
        "utility": scores,
        "loss_pre": pre,
        "loss_post": post,
        "warm_init_gap": (post - pre).abs(),
    });
    write_json(&dir.join("upcycle.json"), &report)?;
    say(serde_json::to_string(&report)?);
    Ok(())
}

fn cpt_cmd(c: &Common, path: &Path) -> Result<()> {
    let ckpt = load_checkpoint(path)?;
    let mut cfg = experiment(c)?;
    if c.seed.is_none() {
        cfg.seeds = vec![ckpt.meta.seed];
    }
    cfg.validate()?;
    let ctx = SeedContext::new(&cfg, first_seed(&cfg))?;
    let groups = ckpt
        .meta
        .plan
        .as_ref()
        .filter(|p| p.m * cfg.model.experts == ckpt.model.config.experts)
        .map(|p| p.groups());
    let arm = if groups.is_some() { Arm::Upcycled } else { Arm::FixedE };
    let run = ctx.continue_run(ckpt.model, ckpt.opt, arm, arm.name(), groups)?;
    let dir = out_dir(c)?;
    let mut meta = meta_for(&cfg, &ctx, &run.model.config)?;
    meta.plan = ckpt.meta.plan;
    save_checkpoint(
        &dir.join("final.ckpt"),
        &Checkpoint {
            meta,
            model: run.model,
            opt: run.opt,
        },
    )?;
    write_metrics(&dir.join("metrics.csv"), [&run.metrics])?;
    say(format!(
        "step {} eval_loss {}",
        run.metrics.total_steps, run.metrics.terminal_loss
    ));
    Ok(())
}

fn baseline_cmd(c: &Common, experts: Option<usize>) -> Result<()> {
    let cfg = experiment(c)?;
    cfg.validate()?;
    let sizes = match experts {
        Some(e) => vec![e],
        None => vec![cfg.model.experts, cfg.m * cfg.model.experts],
    };
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        for &e in &sizes {
            runs.push(run_fixed(&cfg, e, seed)?.metrics);
        }
    }
    let dir = out_dir(c)?;
    write_metrics(&dir.join("metrics.csv"), &runs)?;
    let summary: Vec<_> = runs
        .iter()
        .map(|r| serde_json::json!({"seed": r.seed, "experts": r.experts, "terminal_loss": r.terminal_loss, "cost_seconds": r.cost_seconds}))
        .collect();
    write_json(&dir.join("report.json"), &summary)?;
    for s in &summary {
        say(s.to_string());
    }
    Ok(())
}

#[derive(Serialize)]
struct SeedReport {
    seed: u64,
    fixed_e: f64,
    upcycled: f64,
    fixed_me: f64,
    sparse: Option<f64>,
    eta: Option<f64>,
    loss_pre: Option<f64>,
    loss_post: Option<f64>,
    warm_init_gap: Option<f64>,
}

#[derive(Serialize)]
struct MeanReport {
    fixed_e: f64,
    upcycled: f64,
    fixed_me: f64,
    sparse: Option<f64>,
    /// Efficiency of the seed-mean losses.
    eta: Option<f64>,
    eta_seed_mean: f64,
    eta_seed_std: f64,
}

#[derive(Serialize)]
struct BoundReport {
    /// Optimal losses estimated by the fixed arms' terminal losses, distances
    /// by how far each arm's parameters travelled during its last phase.
    inputs: Option<BoundInputs>,
    term1: Option<f64>,
    term2: Option<f64>,
    bound: Option<f64>,
    /// Learning-rate weighted mean training loss, Upcycled minus Fixed-mE.
    observed_gap: f64,
    error: Option<String>,
}

/// JSON report of a set of protocol results sharing one budget.
pub fn compare_report(cfg: &ExperimentConfig, results: &[ProtocolResult]) -> Result<serde_json::Value> {
    let total = cfg.total()?;
    let per_seed: Vec<SeedReport> = results
        .iter()
        .map(|p| SeedReport {
            seed: p.seed,
            fixed_e: p.fixed_e.terminal_loss,
            upcycled: p.upcycled.terminal_loss,
            fixed_me: p.fixed_me.terminal_loss,
            sparse: p.sparse.as_ref().map(|s| s.terminal_loss),
            eta: p.eta,
            loss_pre: p.upcycled.loss_pre,
            loss_post: p.upcycled.loss_post,
            warm_init_gap: p.upcycled.warm_init_gap(),
        })
        .collect();
    let col = |f: &dyn Fn(&SeedReport) -> f64| mean(&per_seed.iter().map(f).collect::<Vec<_>>());
    let (fe, up, fme) = (col(&|s| s.fixed_e), col(&|s| s.upcycled), col(&|s| s.fixed_me));
    let etas: Vec<f64> = per_seed.iter().filter_map(|s| s.eta).collect();
    let sparse: Vec<f64> = per_seed.iter().filter_map(|s| s.sparse).collect();
    let means = MeanReport {
        fixed_e: fe,
        upcycled: up,
        fixed_me: fme,
        sparse: (!sparse.is_empty()).then(|| mean(&sparse)),
        eta: crate::harness::efficiency(fe, up, fme).ok(),
        eta_seed_mean: mean(&etas),
        eta_seed_std: std_dev(&etas),
    };
    let schedule = cfg.fixed_schedule(total)?;
    let weighted = |m: &RunMetrics| -> Result<f64> {
        let losses: Vec<f64> = m.steps.iter().map(|s| s.loss).collect();
        weighted_avg_loss(&losses, &schedule, 0..total)
    };
    let mut gaps = Vec::new();
    for p in results {
        gaps.push(weighted(&p.upcycled)? - weighted(&p.fixed_me)?);
    }
    let inputs = BoundInputs {
        schedule,
        tau: cfg.tau,
        loss_opt_e: fe,
        loss_opt_me: fme,
        dist_up_sq: mean(&results.iter().map(|p| p.upcycled.travel_sq).collect::<Vec<_>>()),
        dist_rand_sq: mean(&results.iter().map(|p| p.fixed_me.travel_sq).collect::<Vec<_>>()),
    };
    let bound_report = match (term1(&inputs), term2(&inputs), bound(&inputs)) {
        (Ok(a), Ok(b), Ok(c)) => BoundReport {
            inputs: Some(inputs),
            term1: Some(a),
            term2: Some(b),
            bound: Some(c),
            observed_gap: mean(&gaps),
            error: None,
        },
        (Err(e), _, _) | (_, Err(e), _) | (_, _, Err(e)) => BoundReport {
            inputs: Some(inputs),
            term1: None,
            term2: None,
            bound: None,
            observed_gap: mean(&gaps),
            error: Some(e.to_string()),
        },
    };
    let cost_report: CostReport = cost(&cfg.cost, cfg.tau, total)?;
    Ok(serde_json::json!({
        "config": cfg,
        "tau": cfg.tau,
        "total_steps": total,
        "seeds": per_seed,
        "mean": means,
        "cost": cost_report,
        "bound": bound_report,
    }))
}

fn compare_cmd(c: &Common, with_sparse: bool) -> Result<()> {
    let cfg = experiment(c)?;
    cfg.validate()?;
    let mut results = Vec::new();
    for &seed in &cfg.seeds {
        results.push(run_protocol(&cfg, seed, with_sparse)?);
    }
    let dir = out_dir(c)?;
    let runs: Vec<&RunMetrics> = results
        .iter()
        .flat_map(|p| {
            [
                Some(&p.fixed_e),
                Some(&p.upcycled),
                Some(&p.fixed_me),
                p.sparse.as_ref(),
            ]
        })
        .flatten()
        .collect();
    write_metrics(&dir.join("metrics.csv"), runs)?;
    let report = compare_report(&cfg, &results)?;
    write_json(&dir.join("report.json"), &report)?;
    say(serde_json::to_string_pretty(&report["mean"])?);
    Ok(())
}

fn sweep_cmd(c: &Common, axis: &str, values: &[String]) -> Result<()> {
    let cfg = experiment(c)?;
    let axis = SweepAxis::parse(axis)?;
    let result = sweep(&cfg, axis, values)?;
    let dir = out_dir(c)?;
    let runs: Vec<&RunMetrics> = result
        .protocols
        .iter()
        .flat_map(|p| {
            [
                Some(&p.fixed_e),
                Some(&p.upcycled),
                Some(&p.fixed_me),
                p.sparse.as_ref(),
            ]
        })
        .flatten()
        .collect();
    write_metrics(&dir.join("metrics.csv"), runs)?;
    let report = serde_json::json!({"axis": result.axis, "rows": result.rows, "summary": result.summary});
    write_json(&dir.join("sweep.json"), &report)?;
    for s in &result.summary {
        say(serde_json::to_string(s)?);
    }
    Ok(())
}

fn bound_cmd(c: &Common) -> Result<()> {
    let path = c
        .config
        .as_deref()
        .ok_or_else(|| Error::InvalidInput("bound needs --config with bound inputs".into()))?;
    let inputs: BoundInputs = load_json(path, &c.set)?;
    let report = serde_json::json!({
        "term1": term1(&inputs)?,
        "term2": term2(&inputs)?,
        "bound": bound(&inputs)?,
    });
    let dir = out_dir(c)?;
    write_json(&dir.join("bound.json"), &report)?;
    say(report.to_string());
    Ok(())
}

fn utility_cmd(c: &Common, path: &Path, kind: Option<&str>) -> Result<()> {
    let ckpt = load_checkpoint(path)?;
    let mut cfg = experiment(c)?;
    if c.seed.is_none() {
        cfg.seeds = vec![ckpt.meta.seed];
    }
    cfg.validate_base()?;
    let strategy = match kind {
        Some(k) => Strategy::parse(k)?,
        None => cfg.strategy,
    };
    let kind = UtilityKind::from_strategy(strategy)
        .ok_or_else(|| Error::InvalidInput(format!("{} is not a utility score", strategy.name())))?;
    let ctx = SeedContext::new(&cfg, first_seed(&cfg))?;
    let scores = utility_scores(&ckpt.model, &ctx.utility, kind, &ckpt.opt)?;
    let dir = out_dir(c)?;
    write_json(&dir.join("utility.json"), &scores)?;
    say(serde_json::to_string(&scores)?);
    Ok(())
}
