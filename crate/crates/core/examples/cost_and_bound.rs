//! Closed-form cost model, efficiency arithmetic and the loss-gap bound.

use expert_upcycling::bound::{bound, term1, term2, BoundInputs};
use expert_upcycling::harness::{cost, efficiency, CostSpec};
use expert_upcycling::model::Schedule;

fn main() -> expert_upcycling::Result<()> {
    let spec = CostSpec { s_e: 2.2, s_me: 4.2 };
    for tau in [0, 1500, 3000, 4500] {
        let r = cost(&spec, tau, 6000)?;
        println!(
            "tau {tau:>4}: upcycled {:>7.0} s vs fixed {:>7.0} s, saving {:.1}%",
            r.c_upcycled,
            r.c_fixed,
            100.0 * r.saving_fraction
        );
    }
    let sunk = cost(&CostSpec { s_e: 1.0, s_me: 1.9 }, 2000, 3000)?;
    println!(
        "existing checkpoint: pay {:.1}% of a fresh run",
        100.0 * sunk.sunk_fraction
    );

    println!("efficiency of (3.10, 3.02, 3.00): {:.3}", efficiency(3.10, 3.02, 3.00)?);

    let inputs = BoundInputs {
        schedule: Schedule::new(100, 3e-3, 6000, 0.1)?,
        tau: 3000,
        loss_opt_e: 2.06,
        loss_opt_me: 2.03,
        dist_up_sq: 40.0,
        dist_rand_sq: 60.0,
    };
    println!(
        "bound {:.4} = capacity {:.4} + init {:.4}",
        bound(&inputs)?,
        term1(&inputs)?,
        term2(&inputs)?
    );
    Ok(())
}
