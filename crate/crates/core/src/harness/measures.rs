use serde::{Deserialize, Serialize};

use super::config::CostSpec;
use crate::error::{invalid, Error, Result};

/// Normalized gap closure `(L_E - L_up) / (L_E - L_mE)`.
pub fn efficiency(l_fixed_e: f64, l_up: f64, l_fixed_me: f64) -> Result<f64> {
    if ![l_fixed_e, l_up, l_fixed_me].iter().all(|x| x.is_finite()) {
        return invalid("losses must be finite");
    }
    let gap = l_fixed_e - l_fixed_me;
    if gap == 0.0 {
        return Err(Error::DegenerateGap(gap));
    }
    Ok((l_fixed_e - l_up) / gap)
}

/// Modeled cost of full-size training against expanding at `tau`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub tau: u64,
    pub total_steps: u64,
    /// `T · s_mE`.
    pub c_fixed: f64,
    /// `tau · s_E + (T - tau) · s_mE`.
    pub c_upcycled: f64,
    pub saving: f64,
    pub saving_fraction: f64,
    /// `(T - tau) · s_mE`, when the E-expert checkpoint already exists.
    pub c_sunk: f64,
    pub sunk_fraction: f64,
}

pub fn cost(spec: &CostSpec, tau: u64, total: u64) -> Result<CostReport> {
    spec.validate()?;
    if tau > total {
        return invalid(format!("tau {tau} exceeds total {total}"));
    }
    let (tau_f, t) = (tau as f64, total as f64);
    let c_fixed = t * spec.s_me;
    let c_upcycled = tau_f * spec.s_e + (t - tau_f) * spec.s_me;
    let saving = tau_f * (spec.s_me - spec.s_e);
    let c_sunk = (t - tau_f) * spec.s_me;
    let frac = |x: f64| if c_fixed > 0.0 { x / c_fixed } else { 0.0 };
    Ok(CostReport {
        tau,
        total_steps: total,
        c_fixed,
        c_upcycled,
        saving,
        saving_fraction: frac(saving),
        c_sunk,
        sunk_fraction: frac(c_sunk),
    })
}
