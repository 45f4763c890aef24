//! Pretrains to tau, doubles the experts by copying, and checks that the
//! expanded model survives a checkpoint round trip.

use expert_upcycling::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
use expert_upcycling::harness::{ExperimentConfig, SeedContext};
use expert_upcycling::model::eval_loss;
use expert_upcycling::upcycle::{expand_opt_state, upcycle, ReplicationPlan};

fn main() -> expert_upcycling::Result<()> {
    let cfg = ExperimentConfig::quick();
    let ctx = SeedContext::new(&cfg, 0)?;
    let base = ctx.phase_one()?;
    let plan = ReplicationPlan::uniform(cfg.model.moe_blocks(), cfg.model.experts, cfg.m)?;
    let model = upcycle(&base.model, &plan, &cfg.heuristic, cfg.delta, &mut ctx.operator_rng())?;
    let opt = expand_opt_state(&base.opt, &plan)?;

    let before = eval_loss(&base.model, &ctx.eval_full)?;
    let after = eval_loss(&model, &ctx.eval_full)?;
    println!("experts {} -> {}", base.model.config.experts, model.config.experts);
    println!(
        "eval before {before:.4}, after {after:.4}, gap {:.4}",
        (after - before).abs()
    );

    let path = std::env::temp_dir().join("upcycled-example.ckpt");
    let mut meta = CheckpointMeta::new(&model.config, 0);
    meta.plan = Some(plan);
    save_checkpoint(
        &path,
        &Checkpoint {
            meta,
            model: model.clone(),
            opt,
        },
    )?;
    let back = load_checkpoint(&path)?;
    println!("round trip bitwise: {}", back.model.params.bitwise_eq(&model.params));
    std::fs::remove_file(&path)?;
    Ok(())
}
