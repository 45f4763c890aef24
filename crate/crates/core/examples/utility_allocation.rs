//! Scores experts at tau with each utility and prints the replica counts
//! the greedy allocation gives them.

use expert_upcycling::harness::{ExperimentConfig, SeedContext};
use expert_upcycling::upcycle::{allocate_utility, utility_scores, UtilityKind};

fn main() -> expert_upcycling::Result<()> {
    let cfg = ExperimentConfig::quick();
    let ctx = SeedContext::new(&cfg, 0)?;
    let base = ctx.phase_one()?;
    for kind in [
        UtilityKind::Gradient,
        UtilityKind::Saliency,
        UtilityKind::WeightNorm,
        UtilityKind::Curvature,
    ] {
        let scores = utility_scores(&base.model, &ctx.utility, kind, &base.opt)?;
        let plan = allocate_utility(&scores, cfg.m)?;
        let shown: Vec<String> = scores.scores[0].iter().map(|x| format!("{x:.3e}")).collect();
        println!("{:<5} scores [{}]", kind.strategy().name(), shown.join(", "));
        println!("      counts {:?}", plan.counts[0]);
    }
    Ok(())
}
