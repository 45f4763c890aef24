use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// How a replication plan was produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "uniform")]
    Uniform,
    #[serde(rename = "u_G")]
    Gradient,
    #[serde(rename = "u_SAL")]
    Saliency,
    #[serde(rename = "u_WN")]
    WeightNorm,
    #[serde(rename = "u_CN")]
    Curvature,
    #[serde(rename = "manual")]
    Manual,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Uniform => "uniform",
            Strategy::Gradient => "u_G",
            Strategy::Saliency => "u_SAL",
            Strategy::WeightNorm => "u_WN",
            Strategy::Curvature => "u_CN",
            Strategy::Manual => "manual",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "uniform" => Strategy::Uniform,
            "u_G" | "u_GN" => Strategy::Gradient,
            "u_SAL" => Strategy::Saliency,
            "u_WN" => Strategy::WeightNorm,
            "u_CN" => Strategy::Curvature,
            "manual" => Strategy::Manual,
            other => return invalid(format!("unknown strategy {other:?}")),
        })
    }
}

/// Replica counts per source expert, one list per MoE block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplicationPlan {
    pub counts: Vec<Vec<usize>>,
    pub m: usize,
    pub strategy: Strategy,
}

impl ReplicationPlan {
    /// Every expert of every one of `layers` MoE blocks copied `m` times.
    pub fn uniform(layers: usize, experts: usize, m: usize) -> Result<Self> {
        let row = allocate_uniform(experts, m)?;
        Ok(Self {
            counts: vec![row; layers],
            m,
            strategy: Strategy::Uniform,
        })
    }

    pub fn manual(counts: Vec<Vec<usize>>, m: usize) -> Result<Self> {
        let p = Self {
            counts,
            m,
            strategy: Strategy::Manual,
        };
        let e = p.counts.first().map_or(0, |c| c.len());
        p.validate(p.counts.len(), e)?;
        Ok(p)
    }

    pub fn validate(&self, layers: usize, experts: usize) -> Result<()> {
        if self.m < 2 {
            return invalid(format!("expansion factor must be at least 2, got {}", self.m));
        }
        if self.counts.len() != layers {
            return invalid(format!("plan has {} layers, model has {layers}", self.counts.len()));
        }
        for (l, c) in self.counts.iter().enumerate() {
            if c.len() != experts {
                return invalid(format!(
                    "layer {l}: plan covers {} experts, model has {experts}",
                    c.len()
                ));
            }
            if c.contains(&0) {
                return invalid(format!("layer {l}: every expert needs at least one copy"));
            }
            if c.iter().sum::<usize>() != self.m * experts {
                return invalid(format!(
                    "layer {l}: counts sum to {}, expected {}",
                    c.iter().sum::<usize>(),
                    self.m * experts
                ));
            }
        }
        Ok(())
    }

    /// Slot ids of each source expert's replicas after expansion, original
    /// first. Extras follow the originals in source-expert order.
    pub fn groups(&self) -> Vec<Vec<Vec<usize>>> {
        self.counts.iter().map(|c| replica_slots(c)).collect()
    }
}

/// Slot layout for one layer: expert `e` keeps slot `e`, its extra copies
/// are appended after all originals.
pub fn replica_slots(counts: &[usize]) -> Vec<Vec<usize>> {
    let mut next = counts.len();
    counts
        .iter()
        .enumerate()
        .map(|(e, &r)| {
            let mut g = vec![e];
            for _ in 1..r {
                g.push(next);
                next += 1;
            }
            g
        })
        .collect()
}

pub fn allocate_uniform(experts: usize, m: usize) -> Result<Vec<usize>> {
    if m < 2 {
        return invalid(format!("expansion factor must be at least 2, got {m}"));
    }
    Ok(vec![m; experts])
}

/// Greedy allocation with diminishing returns: start at one copy each, then
/// hand out the `(m-1)·E` extra copies one at a time to the expert with the
/// highest `score / copies`, ties to the lower id.
pub fn allocate_greedy(scores: &[f64], m: usize) -> Result<Vec<usize>> {
    if m < 2 {
        return invalid(format!("expansion factor must be at least 2, got {m}"));
    }
    if scores.is_empty() {
        return invalid("no experts to allocate");
    }
    if let Some(s) = scores.iter().find(|s| !(**s >= 0.0) || !s.is_finite()) {
        return invalid(format!("utility scores must be finite and non-negative, got {s}"));
    }
    let mut r = vec![1usize; scores.len()];
    for _ in 0..(m - 1) * scores.len() {
        let mut best = 0;
        let mut best_eff = f64::NEG_INFINITY;
        for (e, (&s, &c)) in scores.iter().zip(&r).enumerate() {
            let eff = s / c as f64;
            if eff > best_eff {
                best = e;
                best_eff = eff;
            }
        }
        r[best] += 1;
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::Strategy;
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_examples() {
        assert_eq!(allocate_uniform(4, 2).unwrap(), vec![2, 2, 2, 2]);
        let r = allocate_uniform(32, 2).unwrap();
        assert_eq!(r.len(), 32);
        assert_eq!(r.iter().sum::<usize>(), 64);
        assert_eq!(allocate_uniform(3, 3).unwrap(), vec![3, 3, 3]);
        assert!(allocate_uniform(4, 1).is_err());
    }

    #[test]
    fn greedy_examples() {
        assert_eq!(allocate_greedy(&[5.0, 1.0, 3.0, 2.0], 2).unwrap(), vec![3, 1, 2, 2]);
        assert_eq!(allocate_greedy(&[1.0, 1.0], 2).unwrap(), vec![2, 2]);
        assert_eq!(allocate_greedy(&[0.4], 3).unwrap(), vec![3]);
        assert!(allocate_greedy(&[1.0, -0.1], 2).is_err());
    }

    #[test]
    fn slots_follow_originals() {
        assert_eq!(replica_slots(&[3, 1, 2]), vec![vec![0, 3, 4], vec![1], vec![2, 5]]);
        let p = ReplicationPlan::manual(vec![vec![3, 1, 2]], 2).unwrap();
        assert_eq!(p.groups()[0][2], vec![2, 5]);
        assert!(ReplicationPlan::manual(vec![vec![4, 0, 2]], 2).is_err());
        assert!(ReplicationPlan::manual(vec![vec![3, 1, 1]], 2).is_err());
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in [
            Strategy::Uniform,
            Strategy::Gradient,
            Strategy::Saliency,
            Strategy::WeightNorm,
            Strategy::Curvature,
            Strategy::Manual,
        ] {
            assert_eq!(Strategy::parse(s.name()).unwrap(), s);
            let j = serde_json::to_string(&s).unwrap();
            assert_eq!(j, format!("\"{}\"", s.name()));
        }
    }

    proptest! {
        #[test]
        fn greedy_conserves_copies(scores in prop::collection::vec(0.0f64..10.0, 1..12), m in 2usize..5) {
            let r = allocate_greedy(&scores, m).unwrap();
            prop_assert_eq!(r.iter().sum::<usize>(), m * scores.len());
            prop_assert!(r.iter().all(|&c| c >= 1));
        }

        #[test]
        fn higher_score_never_gets_fewer_copies(scores in prop::collection::vec(0.01f64..10.0, 2..10)) {
            let r = allocate_greedy(&scores, 2).unwrap();
            for i in 0..scores.len() {
                for j in 0..scores.len() {
                    if scores[i] > scores[j] {
                        prop_assert!(r[i] >= r[j]);
                    }
                }
            }
        }
    }
}
