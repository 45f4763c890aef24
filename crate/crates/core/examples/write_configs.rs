//! Writes the example JSON configs shipped under `configs/`.

use expert_upcycling::bound::BoundInputs;
use expert_upcycling::harness::ExperimentConfig;
use expert_upcycling::model::Schedule;
use expert_upcycling::upcycle::{ExpertInit, HeuristicSpec, Strategy};

fn main() -> expert_upcycling::Result<()> {
    let dir = std::path::PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "configs".into()));
    std::fs::create_dir_all(&dir)?;
    let write = |name: &str, value: serde_json::Value| -> expert_upcycling::Result<()> {
        std::fs::write(dir.join(name), serde_json::to_string_pretty(&value)? + "\n")?;
        Ok(())
    };
    write("reference.json", serde_json::to_value(ExperimentConfig::reference())?)?;
    let quick = ExperimentConfig::quick();
    write("quick.json", serde_json::to_value(&quick)?)?;

    let mut utility = ExperimentConfig::reference().with_cpt_fraction(0.25);
    utility.strategy = Strategy::Gradient;
    write("utility_gradient.json", serde_json::to_value(&utility)?)?;

    let mut noise = quick.clone();
    noise.heuristic = HeuristicSpec::expert(ExpertInit::Noise { lambda: 0.05 });
    write("quick_noise.json", serde_json::to_value(&noise)?)?;

    let bound = BoundInputs {
        schedule: Schedule::new(100, 3e-3, 6000, 0.1)?,
        tau: 3000,
        loss_opt_e: 2.06,
        loss_opt_me: 2.03,
        dist_up_sq: 40.0,
        dist_rand_sq: 60.0,
    };
    write("bound.json", serde_json::to_value(&bound)?)?;
    println!("wrote configs to {}", dir.display());
    Ok(())
}
