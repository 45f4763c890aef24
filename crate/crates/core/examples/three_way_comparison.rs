//! Fixed-E vs upcycled vs Fixed-mE (plus dense-to-sparse) on one budget.

use expert_upcycling::harness::{run_protocol, ExperimentConfig};

fn main() -> expert_upcycling::Result<()> {
    let cfg = ExperimentConfig::quick();
    let p = run_protocol(&cfg, 0, true)?;
    println!("tau {} of {} steps", p.tau, p.total_steps);
    println!("fixed E   {:.4}", p.fixed_e.terminal_loss);
    println!("upcycled  {:.4}", p.upcycled.terminal_loss);
    println!("fixed mE  {:.4}", p.fixed_me.terminal_loss);
    if let Some(s) = &p.sparse {
        println!("sparse    {:.4}", s.terminal_loss);
    }
    match p.eta {
        Some(eta) => println!("efficiency {eta:.3}"),
        None => println!("efficiency undefined (fixed arms tie)"),
    }
    println!(
        "modeled saving {:.1}% of the fixed-mE cost",
        100.0 * p.cost.saving_fraction
    );
    Ok(())
}
