//! Trains the E- and mE-expert models from scratch and prints their eval
//! curves.

use expert_upcycling::harness::{run_fixed, ExperimentConfig};

fn main() -> expert_upcycling::Result<()> {
    let cfg = ExperimentConfig::quick();
    for experts in [cfg.model.experts, cfg.m * cfg.model.experts] {
        let run = run_fixed(&cfg, experts, 0)?;
        println!("{experts} experts");
        for e in &run.metrics.evals {
            println!("  step {:>4}  eval {:.4}", e.step, e.loss);
        }
    }
    Ok(())
}
