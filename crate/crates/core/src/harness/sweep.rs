use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::protocol::{FamilyPlan, ProtocolResult, SeedContext, UpcycleVariant};
use crate::error::{invalid, Error, Result};
use crate::numerics::{mean, std_dev};
use crate::upcycle::Strategy;

/// Quantity varied by a sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Expansion step; values below 1 are fractions of the total.
    Tau,
    /// Continued-training length as a fraction of `tau`.
    CptFraction,
    /// Replica allocation strategy name.
    Strategy,
    /// `K / (m·E)`; also runs the dense-to-sparse arm.
    ActivationRatio,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tau" => Ok(Self::Tau),
            "cpt_fraction" => Ok(Self::CptFraction),
            "strategy" => Ok(Self::Strategy),
            "activation_ratio" => Ok(Self::ActivationRatio),
            _ => invalid(format!("unknown sweep axis {s:?}")),
        }
    }
}

/// One protocol outcome in a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub seed: u64,
    pub fixed_e: f64,
    pub upcycled: f64,
    pub fixed_me: f64,
    pub sparse: Option<f64>,
    pub eta: Option<f64>,
    pub warm_init_gap: Option<f64>,
}

/// Seed means for one value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub value: String,
    pub seeds: usize,
    pub fixed_e: f64,
    pub upcycled: f64,
    pub fixed_me: f64,
    pub sparse: Option<f64>,
    /// Mean and sample standard deviation of eta over seeds with a
    /// non-degenerate gap.
    pub eta_mean: f64,
    pub eta_std: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SweepSummary>,
    pub protocols: Vec<ProtocolResult>,
}

fn parse_f64(v: &str) -> Result<f64> {
    v.trim()
        .parse()
        .map_err(|_| Error::InvalidInput(format!("sweep value {v:?} is not a number")))
}

/// Config for one value of an axis that changes the experiment itself.
fn config_for(cfg: &ExperimentConfig, axis: SweepAxis, value: &str) -> Result<ExperimentConfig> {
    let mut c = cfg.clone();
    match axis {
        SweepAxis::Tau => {
            let total = cfg.total()?;
            let x = parse_f64(value)?;
            c.tau = if x < 1.0 {
                (x * total as f64).round() as u64
            } else {
                x as u64
            };
            c = c.with_total(total);
        }
        SweepAxis::ActivationRatio => {
            let r = parse_f64(value)?;
            if !(r > 0.0 && r <= 1.0) {
                return invalid(format!("activation ratio must be in (0, 1], got {r}"));
            }
            let target = (cfg.model.top_k as f64 / r).round() as usize;
            if !target.is_multiple_of(cfg.m) || target / cfg.m < cfg.model.top_k {
                return invalid(format!(
                    "ratio {r} gives {target} experts, not a multiple of m = {} with E >= K",
                    cfg.m
                ));
            }
            c.model.experts = target / cfg.m;
        }
        SweepAxis::CptFraction | SweepAxis::Strategy => {}
    }
    c.validate()?;
    Ok(c)
}

fn row(value: &str, p: &ProtocolResult) -> SweepRow {
    SweepRow {
        value: value.to_string(),
        seed: p.seed,
        fixed_e: p.fixed_e.terminal_loss,
        upcycled: p.upcycled.terminal_loss,
        fixed_me: p.fixed_me.terminal_loss,
        sparse: p.sparse.as_ref().map(|s| s.terminal_loss),
        eta: p.eta,
        warm_init_gap: p.upcycled.warm_init_gap(),
    }
}

/// Seed means per value, in the order the values were given.
pub fn summarize(values: &[String], rows: &[SweepRow]) -> Vec<SweepSummary> {
    values
        .iter()
        .map(|v| {
            let rs: Vec<&SweepRow> = rows.iter().filter(|r| &r.value == v).collect();
            let col = |f: &dyn Fn(&SweepRow) -> f64| mean(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
            let etas: Vec<f64> = rs.iter().filter_map(|r| r.eta).collect();
            let sparse: Vec<f64> = rs.iter().filter_map(|r| r.sparse).collect();
            SweepSummary {
                value: v.clone(),
                seeds: rs.len(),
                fixed_e: col(&|r| r.fixed_e),
                upcycled: col(&|r| r.upcycled),
                fixed_me: col(&|r| r.fixed_me),
                sparse: (!sparse.is_empty()).then(|| mean(&sparse)),
                eta_mean: mean(&etas),
                eta_std: std_dev(&etas),
            }
        })
        .collect()
}

/// Runs the three-way protocol for every value and seed.
pub fn sweep(cfg: &ExperimentConfig, axis: SweepAxis, values: &[String]) -> Result<SweepResult> {
    if values.is_empty() {
        return invalid("sweep needs at least one value");
    }
    cfg.validate_base()?;
    let mut protocols: Vec<(String, ProtocolResult)> = Vec::new();
    match axis {
        SweepAxis::CptFraction | SweepAxis::Strategy => {
            let base = UpcycleVariant::from_config(cfg);
            let mut configs = Vec::new();
            let mut variants = Vec::new();
            for v in values {
                let (c, variant) = if axis == SweepAxis::CptFraction {
                    (cfg.with_cpt_fraction(parse_f64(v)?), base.clone())
                } else {
                    let mut variant = base.named(v);
                    variant.strategy = Strategy::parse(v)?;
                    let mut c = cfg.clone();
                    c.strategy = variant.strategy;
                    (c, variant)
                };
                c.validate()?;
                configs.push((c.total()?, c));
                variants.push(variant);
            }
            let mut totals: Vec<u64> = configs.iter().map(|(t, _)| *t).collect();
            totals.sort_unstable();
            totals.dedup();
            let mut plan = FamilyPlan {
                fixed_totals: totals,
                ..FamilyPlan::default()
            };
            for (variant, (t, _)) in variants.iter().zip(&configs) {
                match plan.variants.iter_mut().find(|(v, _)| v.label == variant.label) {
                    Some((_, ts)) => ts.push(*t),
                    None => plan.variants.push((variant.clone(), vec![*t])),
                }
            }
            for &seed in &cfg.seeds {
                let fam = SeedContext::new(cfg, seed)?.family(&plan)?;
                for ((v, variant), (t, c)) in values.iter().zip(&variants).zip(&configs) {
                    protocols.push((v.clone(), fam.protocol(&variant.label, *t, c)?));
                }
            }
        }
        SweepAxis::Tau | SweepAxis::ActivationRatio => {
            let with_sparse = axis == SweepAxis::ActivationRatio;
            let configs: Vec<ExperimentConfig> =
                values.iter().map(|v| config_for(cfg, axis, v)).collect::<Result<_>>()?;
            for &seed in &cfg.seeds {
                for (v, c) in values.iter().zip(&configs) {
                    let total = c.total()?;
                    let variant = UpcycleVariant::from_config(c);
                    let plan = FamilyPlan {
                        fixed_totals: vec![total],
                        variants: vec![(variant.clone(), vec![total])],
                        sparse_totals: if with_sparse { vec![total] } else { Vec::new() },
                    };
                    let fam = SeedContext::new(c, seed)?.family(&plan)?;
                    protocols.push((v.clone(), fam.protocol(&variant.label, total, c)?));
                }
            }
        }
    }
    let rows: Vec<SweepRow> = protocols.iter().map(|(v, p)| row(v, p)).collect();
    Ok(SweepResult {
        axis,
        summary: summarize(values, &rows),
        rows,
        protocols: protocols.into_iter().map(|(_, p)| p).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::protocol::run_protocol;
    use crate::harness::protocol::tests::tiny;

    #[test]
    fn single_value_equals_direct_run() {
        let mut cfg = tiny();
        cfg.seeds = vec![2];
        let s = sweep(&cfg, SweepAxis::CptFraction, &["1.0".into()]).unwrap();
        assert_eq!(s.rows.len(), 1);
        let direct = run_protocol(&cfg.with_cpt_fraction(1.0), 2, false).unwrap();
        assert_eq!(s.rows[0], row("1.0", &direct));
        assert_eq!(s.protocols[0].upcycled, direct.upcycled);
    }

    #[test]
    fn shared_family_rows_match_direct_runs() {
        let mut cfg = tiny();
        cfg.seeds = vec![0];
        let values: Vec<String> = vec!["0.5".into(), "1.0".into()];
        let s = sweep(&cfg, SweepAxis::CptFraction, &values).unwrap();
        for (v, r) in values.iter().zip(&s.rows) {
            let direct = run_protocol(&cfg.with_cpt_fraction(parse_f64(v).unwrap()), 0, false).unwrap();
            assert_eq!(*r, row(v, &direct));
        }
        assert_eq!(s.summary.len(), 2);
    }

    #[test]
    fn strategy_and_ratio_axes() {
        let mut cfg = tiny();
        cfg.seeds = vec![0];
        let s = sweep(&cfg, SweepAxis::Strategy, &["uniform".into(), "u_G".into()]).unwrap();
        assert_eq!(s.rows[0].fixed_e, s.rows[1].fixed_e);
        assert!(s.protocols[1].upcycled.utility.is_some());
        let r = sweep(&cfg, SweepAxis::ActivationRatio, &["0.25".into()]).unwrap();
        assert!(r.rows[0].sparse.is_some());
        assert_eq!(r.protocols[0].fixed_me.experts, 8);
        assert!(config_for(&cfg, SweepAxis::ActivationRatio, "0.3").is_err());
        assert!(sweep(&cfg, SweepAxis::Tau, &[]).is_err());
        assert_eq!(config_for(&cfg, SweepAxis::Tau, "0.25").unwrap().tau, 20);
        assert!(SweepAxis::parse("width").is_err());
    }
}
