use serde::{Deserialize, Serialize};

use super::plan::{allocate_greedy, ReplicationPlan, Strategy};
use crate::error::{invalid, Error, Result};
use crate::model::{backward, forward, Batch, MoEModel, OptState};

/// Floor applied to the curvature proxy before dividing by it.
pub const CURVATURE_FLOOR: f64 = 1e-12;

/// Per-expert importance measures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum UtilityKind {
    /// ‖g‖²
    #[serde(rename = "u_G")]
    Gradient,
    /// ‖w‖·‖g‖
    #[serde(rename = "u_SAL")]
    Saliency,
    /// ‖w‖²
    #[serde(rename = "u_WN")]
    WeightNorm,
    /// ‖g‖² / H, H from Adam second moments
    #[serde(rename = "u_CN")]
    Curvature,
}

impl UtilityKind {
    pub fn strategy(self) -> Strategy {
        match self {
            UtilityKind::Gradient => Strategy::Gradient,
            UtilityKind::Saliency => Strategy::Saliency,
            UtilityKind::WeightNorm => Strategy::WeightNorm,
            UtilityKind::Curvature => Strategy::Curvature,
        }
    }

    pub fn from_strategy(s: Strategy) -> Option<Self> {
        match s {
            Strategy::Gradient => Some(UtilityKind::Gradient),
            Strategy::Saliency => Some(UtilityKind::Saliency),
            Strategy::WeightNorm => Some(UtilityKind::WeightNorm),
            Strategy::Curvature => Some(UtilityKind::Curvature),
            Strategy::Uniform | Strategy::Manual => None,
        }
    }
}

/// Scores for every expert of every MoE block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilityScores {
    pub kind: UtilityKind,
    pub scores: Vec<Vec<f64>>,
    /// Optimizer step at which the gradients were taken.
    pub step: u64,
    pub batches: usize,
}

/// The utility formula from squared weight norm, squared gradient norm and
/// summed second moment.
pub fn utility_value(kind: UtilityKind, w_sq: f64, g_sq: f64, h: f64) -> f64 {
    match kind {
        UtilityKind::Gradient => g_sq,
        UtilityKind::Saliency => libm::sqrt(w_sq) * libm::sqrt(g_sq),
        UtilityKind::WeightNorm => w_sq,
        UtilityKind::Curvature => g_sq / h.max(CURVATURE_FLOOR),
    }
}

/// Scores experts from gradients summed over `batches`.
pub fn utility_scores(model: &MoEModel, batches: &[Batch], kind: UtilityKind, opt: &OptState) -> Result<UtilityScores> {
    if kind == UtilityKind::Curvature && opt.step == 0 {
        return Err(Error::InvalidState(
            "curvature utility needs an optimizer with at least one recorded step".into(),
        ));
    }
    if kind != UtilityKind::WeightNorm && batches.is_empty() {
        return invalid("gradient utilities need at least one batch");
    }
    let mut grad_sum: Option<crate::model::Params> = None;
    if kind != UtilityKind::WeightNorm {
        for b in batches {
            let (_, cache) = forward(model, b)?;
            let g = backward(model, &cache);
            match &mut grad_sum {
                None => grad_sum = Some(g),
                Some(acc) => {
                    for (a, x) in acc.tensors_mut().into_iter().zip(g.tensors()) {
                        a.add_scaled(x, 1.0);
                    }
                }
            }
        }
    }
    let mut scores = Vec::new();
    let grads: Vec<_> = grad_sum.as_ref().map(|g| g.moe_layers().collect()).unwrap_or_default();
    let moments: Vec<_> = opt.v.moe_layers().collect();
    for (l, layer) in model.params.moe_layers().enumerate() {
        let row = (0..layer.num_experts())
            .map(|e| {
                let w_sq = layer.experts[e].sum_sq();
                let g_sq = grads.get(l).map_or(0.0, |g| g.experts[e].sum_sq());
                let h = moments
                    .get(l)
                    .filter(|v| v.num_experts() == layer.num_experts())
                    .map_or(0.0, |v| {
                        let ex = &v.experts[e];
                        ex.w1.as_slice().iter().chain(ex.w2.as_slice()).sum()
                    });
                utility_value(kind, w_sq, g_sq, h)
            })
            .collect();
        scores.push(row);
    }
    Ok(UtilityScores {
        kind,
        scores,
        step: opt.step,
        batches: batches.len(),
    })
}

/// Per-layer greedy allocation from utility scores.
pub fn allocate_utility(scores: &UtilityScores, m: usize) -> Result<ReplicationPlan> {
    let counts = scores
        .scores
        .iter()
        .map(|s| allocate_greedy(s, m))
        .collect::<Result<Vec<_>>>()?;
    Ok(ReplicationPlan {
        counts,
        m,
        strategy: scores.kind.strategy(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Ffn, ModelConfig};
    use crate::numerics::Rng;

    #[test]
    fn toy_formulas() {
        // w = [2], g = [3], H = 4.5
        let (w_sq, g_sq, h) = (4.0, 9.0, 4.5);
        assert_eq!(utility_value(UtilityKind::Gradient, w_sq, g_sq, h), 9.0);
        assert_eq!(utility_value(UtilityKind::Saliency, w_sq, g_sq, h), 6.0);
        assert_eq!(utility_value(UtilityKind::WeightNorm, w_sq, g_sq, h), 4.0);
        assert_eq!(utility_value(UtilityKind::Curvature, w_sq, g_sq, h), 2.0);
        assert_eq!(utility_value(UtilityKind::Saliency, 0.0, g_sq, h), 0.0);
        assert_eq!(utility_value(UtilityKind::Curvature, 0.0, 1.0, 0.0), 1e12);
    }

    fn setup() -> (MoEModel, Vec<Batch>) {
        let mut cfg = ModelConfig::reference();
        cfg.layout.truncate(2);
        let mut model = MoEModel::init(&cfg).unwrap();
        if let Ffn::Moe(l) = &mut model.params.blocks[1].ffn {
            l.select_bias.set(0, 5, -1e9);
            l.experts[6] = crate::model::FfnWeights::zeros(cfg.dim, cfg.expert_ffn_dim);
        }
        let mut rng = Rng::new(3);
        let w: Vec<Vec<u32>> = (0..4)
            .map(|_| (0..=cfg.seq_len).map(|_| rng.below(cfg.vocab) as u32).collect())
            .collect();
        let b = Batch::from_windows(w.iter().map(|x| x.as_slice()), cfg.bos());
        (model, vec![b])
    }

    #[test]
    fn unrouted_and_zero_experts() {
        let (model, batches) = setup();
        let opt = OptState::new(&model.params);
        let g = utility_scores(&model, &batches, UtilityKind::Gradient, &opt).unwrap();
        let s = utility_scores(&model, &batches, UtilityKind::Saliency, &opt).unwrap();
        let w = utility_scores(&model, &batches, UtilityKind::WeightNorm, &opt).unwrap();
        assert_eq!(g.scores[0][5], 0.0);
        assert_eq!(s.scores[0][5], 0.0);
        assert_eq!(w.scores[0][6], 0.0);
        assert_eq!(s.scores[0][6], 0.0);
        assert!(g.scores[0].iter().filter(|&&x| x > 0.0).count() >= 5);
        assert!(g.scores[0].iter().chain(&s.scores[0]).all(|&x| x >= 0.0));
    }

    #[test]
    fn curvature_needs_optimizer_history() {
        let (model, batches) = setup();
        let opt = OptState::new(&model.params);
        assert!(matches!(
            utility_scores(&model, &batches, UtilityKind::Curvature, &opt),
            Err(Error::InvalidState(_))
        ));
    }

    #[test]
    fn summing_batches_sums_gradients() {
        let (model, batches) = setup();
        let opt = OptState::new(&model.params);
        let one = utility_scores(&model, &batches, UtilityKind::Gradient, &opt).unwrap();
        let two = utility_scores(
            &model,
            &[batches[0].clone(), batches[0].clone()],
            UtilityKind::Gradient,
            &opt,
        )
        .unwrap();
        for (a, b) in one.scores[0].iter().zip(&two.scores[0]) {
            assert!((4.0 * a - b).abs() <= 1e-12 * b.abs().max(1e-300));
        }
        let plan = allocate_utility(&one, 2).unwrap();
        assert_eq!(plan.strategy, Strategy::Gradient);
        plan.validate(1, 8).unwrap();
    }
}
