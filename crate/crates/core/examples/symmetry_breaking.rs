//! Replica divergence under stochastic batches versus a full-batch control
//! with no bias noise and no balancing.

use expert_upcycling::harness::{symmetry_trace, ExperimentConfig, SeedContext};
use expert_upcycling::model::FixedBatch;
use expert_upcycling::upcycle::{expand_opt_state, upcycle, HeuristicSpec, ReplicationPlan};

fn main() -> expert_upcycling::Result<()> {
    let cfg = ExperimentConfig::quick();
    let ctx = SeedContext::new(&cfg, 0)?;
    let base = ctx.phase_one()?;
    let plan = ReplicationPlan::uniform(cfg.model.moe_blocks(), cfg.model.experts, cfg.m)?;
    let total = cfg.total()?;
    let schedule = cfg.two_phase_schedule(total)?;
    let steps = total - cfg.tau;

    let mut model = upcycle(&base.model, &plan, &cfg.heuristic, cfg.delta, &mut ctx.operator_rng())?;
    let mut opt = expand_opt_state(&base.opt, &plan)?;
    let noisy = symmetry_trace(
        &mut model,
        &mut opt,
        &plan.groups(),
        &ctx.data,
        schedule.as_ref(),
        steps,
        50,
        1e-3,
    )?;

    let mut model = upcycle(&base.model, &plan, &HeuristicSpec::copy(), 0.0, &mut ctx.operator_rng())?;
    let mut opt = expand_opt_state(&base.opt, &plan)?;
    let fixed = FixedBatch(ctx.eval_probe[0].clone());
    let still = symmetry_trace(
        &mut model,
        &mut opt,
        &plan.groups(),
        &fixed,
        schedule.as_ref(),
        steps,
        50,
        0.0,
    )?;

    println!("{:>6} {:>12} {:>12}", "step", "stochastic", "control");
    for (a, b) in noisy.iter().zip(&still) {
        println!(
            "{:>6} {:>12.5} {:>12.5}",
            a.step - cfg.tau,
            a.param_distance,
            b.param_distance
        );
    }
    Ok(())
}
