//! Embeds an E-expert model into mE experts whose extras are never routed
//! to, and shows the loss is bit-identical.

use expert_upcycling::model::{eval_loss, Batch, MoEModel, ModelConfig};
use expert_upcycling::numerics::Rng;
use expert_upcycling::upcycle::canonical_lift;

fn main() -> expert_upcycling::Result<()> {
    let cfg = ModelConfig::reference();
    let model = MoEModel::init(&cfg)?;
    let mut rng = Rng::new(1);
    let windows: Vec<Vec<u32>> = (0..8)
        .map(|_| (0..=cfg.seq_len).map(|_| rng.below(cfg.vocab) as u32).collect())
        .collect();
    let batch = Batch::from_windows(windows.iter().map(|w| w.as_slice()), cfg.bos());
    for m in [2, 3, 4] {
        let lifted = canonical_lift(&model, m)?;
        let a = eval_loss(&model, std::slice::from_ref(&batch))?;
        let b = eval_loss(&lifted, std::slice::from_ref(&batch))?;
        println!(
            "m = {m}: {} experts, loss {a:.6} vs {b:.6}, bitwise equal {}",
            lifted.config.experts,
            a.to_bits() == b.to_bits()
        );
    }
    Ok(())
}
