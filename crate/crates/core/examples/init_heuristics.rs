//! Loss right after expansion for several initializers of the new experts.

use expert_upcycling::harness::{ExperimentConfig, SeedContext};
use expert_upcycling::model::eval_loss;
use expert_upcycling::upcycle::{upcycle, ExpertInit, HeuristicSpec, ReinitKind, ReplicationPlan, RouterInit};

fn main() -> expert_upcycling::Result<()> {
    let cfg = ExperimentConfig::quick();
    let ctx = SeedContext::new(&cfg, 0)?;
    let base = ctx.phase_one()?;
    let plan = ReplicationPlan::uniform(cfg.model.moe_blocks(), cfg.model.experts, cfg.m)?;
    println!("before expansion {:.4}", eval_loss(&base.model, &ctx.eval_full)?);
    let specs = [
        ("copy", HeuristicSpec::copy()),
        ("noise 0.05", HeuristicSpec::expert(ExpertInit::Noise { lambda: 0.05 })),
        ("scaled 0.9", HeuristicSpec::expert(ExpertInit::Scaled { s: 0.9 })),
        (
            "interpolate 0.5",
            HeuristicSpec::expert(ExpertInit::Interpolate { alpha: 0.5 }),
        ),
        (
            "drop 0.5",
            HeuristicSpec::expert(ExpertInit::Drop {
                fraction: 0.5,
                init: ReinitKind::Kaiming,
            }),
        ),
        (
            "orthogonal",
            HeuristicSpec::expert(ExpertInit::Orthogonal { eps: 1e-6 }),
        ),
        ("random", HeuristicSpec::expert(ExpertInit::Random)),
        (
            "router temperature 2",
            HeuristicSpec {
                expert: ExpertInit::Copy,
                router: RouterInit::Temperature { temp: 2.0 },
            },
        ),
    ];
    for (name, spec) in specs {
        let model = upcycle(&base.model, &plan, &spec, cfg.delta, &mut ctx.operator_rng())?;
        println!("{name:<22} {:.4}", eval_loss(&model, &ctx.eval_full)?);
    }
    Ok(())
}
