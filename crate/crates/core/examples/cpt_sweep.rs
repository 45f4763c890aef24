//! Efficiency as the continued-training budget grows.

use expert_upcycling::harness::{sweep, ExperimentConfig, SweepAxis};

fn main() -> expert_upcycling::Result<()> {
    let cfg = ExperimentConfig::quick();
    let values: Vec<String> = ["0.25", "0.5", "1.0"].iter().map(|s| s.to_string()).collect();
    let result = sweep(&cfg, SweepAxis::CptFraction, &values)?;
    for s in &result.summary {
        println!(
            "cpt {:>4}: fixed E {:.4}  upcycled {:.4}  fixed mE {:.4}  eta {:.3}",
            s.value, s.fixed_e, s.upcycled, s.fixed_me, s.eta_mean
        );
    }
    Ok(())
}
