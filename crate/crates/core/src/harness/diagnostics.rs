use super::protocol::{DivergencePoint, RunMetrics};
use crate::error::{invalid, Result};
use crate::model::{train_steps_with, BatchSource, LrSchedule, MoEModel, OptState};
use crate::numerics::spearman;
use crate::upcycle::{replica_divergence, replica_load_distance};

/// Trains `steps` steps, probing replica divergence at the start and every
/// `probe_interval` steps.
#[allow(clippy::too_many_arguments)]
pub fn symmetry_trace(
    model: &mut MoEModel,
    opt: &mut OptState,
    groups: &[Vec<Vec<usize>>],
    data: &dyn BatchSource,
    schedule: &dyn LrSchedule,
    steps: u64,
    probe_interval: u64,
    balance_rate: f64,
) -> Result<Vec<DivergencePoint>> {
    if probe_interval == 0 {
        return invalid("probe interval must be positive");
    }
    let start = opt.step;
    let mut trace = vec![DivergencePoint {
        step: start,
        param_distance: replica_divergence(model, groups),
        load_distance: 0.0,
    }];
    let mut window = Vec::new();
    train_steps_with(model, opt, data, schedule, steps, balance_rate, |m, r| {
        window.push(r.loads.clone());
        let done = r.step + 1;
        if (done - start).is_multiple_of(probe_interval) || done == start + steps {
            trace.push(DivergencePoint {
                step: done,
                param_distance: replica_divergence(m, groups),
                load_distance: replica_load_distance(&window, groups),
            });
            window.clear();
        }
        Ok(())
    })?;
    Ok(trace)
}

/// Spearman correlation between post-expansion and terminal eval losses.
pub fn init_terminal_correlation(runs: &[RunMetrics]) -> Result<f64> {
    if runs.len() < 5 {
        return invalid(format!("need at least 5 runs, got {}", runs.len()));
    }
    let init: Vec<f64> = runs.iter().map(|r| r.init_loss).collect();
    let terminal: Vec<f64> = runs.iter().map(|r| r.terminal_loss).collect();
    spearman(&init, &terminal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::protocol::Arm;
    use crate::model::{Batch, FixedBatch, ModelConfig, Schedule};
    use crate::numerics::Rng;
    use crate::upcycle::{expand_opt_state, upcycle, HeuristicSpec, ReplicationPlan};

    fn metrics(init: f64, terminal: f64) -> RunMetrics {
        let mut m: RunMetrics = serde_json::from_value(serde_json::json!({
            "arm": "upcycled", "label": "x", "seed": 0, "experts": 2, "tau": 0, "total_steps": 0,
            "steps": [], "evals": [], "loads": [], "divergence": [], "loss_pre": null, "loss_post": null,
            "plan": null, "utility": null, "init_loss": 0.0, "terminal_loss": 0.0, "tokens": 0,
            "active_flops_per_token": 0.0, "cost_seconds": 0.0, "travel_sq": 0.0
        }))
        .unwrap();
        assert_eq!(m.arm, Arm::Upcycled);
        m.init_loss = init;
        m.terminal_loss = terminal;
        m
    }

    #[test]
    fn correlation_hand_values() {
        let runs: Vec<_> = [(1.0, 2.0), (2.0, 1.0), (3.0, 4.0), (4.0, 3.0), (5.0, 5.0)]
            .iter()
            .map(|&(a, b)| metrics(a, b))
            .collect();
        // d = (1, 1, 1, 1, 0): 1 - 6·4 / (5·24) = 0.8
        assert!((init_terminal_correlation(&runs).unwrap() - 0.8).abs() < 1e-12);
        assert!(init_terminal_correlation(&runs[..4]).is_err());
    }

    #[test]
    fn duplicated_runs_use_average_ranks() {
        let runs: Vec<_> = [(1.0, 1.0), (1.0, 1.0), (2.0, 2.0), (2.0, 2.0), (3.0, 3.0)]
            .iter()
            .map(|&(a, b)| metrics(a, b))
            .collect();
        assert!((init_terminal_correlation(&runs).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn control_stays_symmetric() {
        let mut cfg = ModelConfig::reference();
        cfg.dim = 8;
        cfg.expert_ffn_dim = 4;
        cfg.ffn_dim_dense = 8;
        cfg.experts = 4;
        let model = MoEModel::init(&cfg).unwrap();
        let opt = OptState::new(&model.params);
        let plan = ReplicationPlan::uniform(cfg.moe_blocks(), 4, 2).unwrap();
        let mut up = upcycle(&model, &plan, &HeuristicSpec::copy(), 0.0, &mut Rng::new(0)).unwrap();
        let mut opt = expand_opt_state(&opt, &plan).unwrap();
        let mut rng = Rng::new(5);
        let windows: Vec<Vec<u32>> = (0..4)
            .map(|_| (0..33).map(|_| rng.below(32) as u32).collect())
            .collect();
        let batch = Batch::from_windows(windows.iter().map(|w| w.as_slice()), cfg.bos());
        let sched = Schedule::new(2, 1e-2, 40, 0.1).unwrap();
        let trace = symmetry_trace(
            &mut up,
            &mut opt,
            &plan.groups(),
            &FixedBatch(batch),
            &sched,
            40,
            10,
            0.0,
        )
        .unwrap();
        assert_eq!(trace.len(), 5);
        assert!(trace.iter().all(|p| p.param_distance == 0.0 && p.load_distance == 0.0));
    }
}
