//! Initializers applied to the extra copies made by the upcycling operator.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::FfnWeights;
use crate::numerics::{gram_schmidt, norm, Matrix, Rng, GRAM_SCHMIDT_EPS};

/// Distribution used to re-initialize dropped columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReinitKind {
    /// U(±sqrt(6 / (fan_in + fan_out)))
    Xavier,
    /// N(0, 2 / fan_in)
    Kaiming,
    /// N(0, 0.02²)
    Normal,
}

/// Expert-weight initializer for extra copies.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExpertInit {
    #[default]
    Copy,
    /// `W += N(0, (lambda · rms(W))²)` per matrix.
    Noise { lambda: f64 },
    /// `W ← s · W`
    Scaled { s: f64 },
    /// `W ← α·W_e + (1-α)·W_{e+1}` with the cyclically next source expert.
    Interpolate { alpha: f64 },
    /// Re-initialize `ceil(fraction · cols)` random columns of each matrix.
    Drop { fraction: f64, init: ReinitKind },
    /// Rows orthogonalized against the same rows of the original and of
    /// earlier copies, keeping each row's norm.
    Orthogonal { eps: f64 },
    /// Independent seeded column permutation of each matrix.
    ShuffleCols,
    /// Fresh Kaiming weights (no transfer).
    Random,
}

/// Router-column initializer for extra copies.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RouterInit {
    #[default]
    Copy,
    /// column += N(0, sigma²)
    Noise { sigma: f64 },
    /// column ← α·c_e + (1-α)·c_{e+1}
    Interpolate { alpha: f64 },
    /// column ← column / temp
    Temperature { temp: f64 },
    /// column ← (1 - 2β)·column
    Adversarial { beta: f64 },
    /// Column copied; only the selection-bias noise differs.
    BiasOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeuristicSpec {
    pub expert: ExpertInit,
    pub router: RouterInit,
}

impl Default for HeuristicSpec {
    fn default() -> Self {
        Self::copy()
    }
}

impl HeuristicSpec {
    pub fn copy() -> Self {
        Self {
            expert: ExpertInit::Copy,
            router: RouterInit::Copy,
        }
    }

    pub fn expert(expert: ExpertInit) -> Self {
        Self {
            expert,
            router: RouterInit::Copy,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |x: f64| (0.0..=1.0).contains(&x);
        match &self.expert {
            ExpertInit::Noise { lambda } if !(*lambda >= 0.0 && lambda.is_finite()) => {
                return invalid(format!("noise lambda must be non-negative, got {lambda}"))
            }
            ExpertInit::Scaled { s } if !s.is_finite() => return invalid("scale must be finite"),
            ExpertInit::Interpolate { alpha } if !in_unit(*alpha) => {
                return invalid(format!("alpha must be in [0, 1], got {alpha}"))
            }
            ExpertInit::Drop { fraction, .. } if !(*fraction > 0.0 && *fraction < 1.0) => {
                return invalid(format!("drop fraction must be in (0, 1), got {fraction}"))
            }
            ExpertInit::Orthogonal { eps } if !(*eps > 0.0) => {
                return invalid("orthogonalization eps must be positive")
            }
            _ => {}
        }
        match &self.router {
            RouterInit::Noise { sigma } if !(*sigma >= 0.0 && sigma.is_finite()) => {
                invalid(format!("router noise sigma must be non-negative, got {sigma}"))
            }
            RouterInit::Interpolate { alpha } if !in_unit(*alpha) => {
                invalid(format!("alpha must be in [0, 1], got {alpha}"))
            }
            RouterInit::Temperature { temp } if !(*temp > 0.0 && temp.is_finite()) => {
                invalid(format!("temperature must be positive, got {temp}"))
            }
            RouterInit::Adversarial { beta } if !in_unit(*beta) => {
                invalid(format!("beta must be in [0, 1], got {beta}"))
            }
            _ => Ok(()),
        }
    }

    pub fn is_pure_copy(&self) -> bool {
        matches!(self.expert, ExpertInit::Copy) && matches!(self.router, RouterInit::Copy | RouterInit::BiasOnly)
    }
}

fn reinit_column(m: &mut Matrix, c: usize, kind: ReinitKind, rng: &mut Rng) {
    let (fan_in, fan_out) = m.shape();
    for r in 0..fan_in {
        let v = match kind {
            ReinitKind::Xavier => {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                rng.uniform_range(-a, a)
            }
            ReinitKind::Kaiming => rng.normal() * (2.0 / fan_in as f64).sqrt(),
            ReinitKind::Normal => rng.normal() * 0.02,
        };
        m.set(r, c, v);
    }
}

fn orthogonalize(m: &mut Matrix, basis_sources: &[&Matrix], eps: f64, rng: &mut Rng) -> Result<()> {
    for r in 0..m.rows() {
        let row = m.row(r).to_vec();
        let target = norm(&row);
        let basis: Vec<Vec<f64>> = basis_sources.iter().map(|b| b.row(r).to_vec()).collect();
        // a second pass projects out the basis from a resampled direction
        let v = gram_schmidt(&row, &basis, eps, rng)?;
        let mut v = gram_schmidt(&v, &basis, eps, rng)?;
        let n = norm(&v);
        if n > 0.0 {
            v.iter_mut().for_each(|x| *x *= target / n);
        }
        m.row_mut(r).copy_from_slice(&v);
    }
    Ok(())
}

/// Produces the weights of one extra copy of `source`.
///
/// `neighbor` is the cyclically next source expert, `siblings` the copies of
/// `source` made so far (original first).
pub fn heuristic_expert_init(
    source: &FfnWeights,
    init: &ExpertInit,
    rng: &mut Rng,
    neighbor: &FfnWeights,
    siblings: &[&FfnWeights],
) -> Result<FfnWeights> {
    let mut w = source.clone();
    match init {
        ExpertInit::Copy => {}
        ExpertInit::Noise { lambda } => {
            for m in [&mut w.w1, &mut w.w2] {
                let sigma = lambda * m.rms();
                for x in m.as_mut_slice() {
                    *x += sigma * rng.normal();
                }
            }
        }
        ExpertInit::Scaled { s } => {
            w.w1.scale(*s);
            w.w2.scale(*s);
        }
        ExpertInit::Interpolate { alpha } => {
            if neighbor.w1.shape() != w.w1.shape() || neighbor.w2.shape() != w.w2.shape() {
                return invalid("neighbor expert has a different shape");
            }
            w.w1.scale(*alpha);
            w.w1.add_scaled(&neighbor.w1, 1.0 - alpha);
            w.w2.scale(*alpha);
            w.w2.add_scaled(&neighbor.w2, 1.0 - alpha);
        }
        ExpertInit::Drop { fraction, init } => {
            for m in [&mut w.w1, &mut w.w2] {
                let cols = m.cols();
                let k = ((fraction * cols as f64).ceil() as usize).min(cols);
                for c in rng.sample_indices(cols, k) {
                    reinit_column(m, c, *init, rng);
                }
            }
        }
        ExpertInit::Orthogonal { eps } => {
            let b1: Vec<&Matrix> = siblings.iter().map(|s| &s.w1).collect();
            let b2: Vec<&Matrix> = siblings.iter().map(|s| &s.w2).collect();
            orthogonalize(&mut w.w1, &b1, *eps, rng)?;
            orthogonalize(&mut w.w2, &b2, *eps, rng)?;
        }
        ExpertInit::ShuffleCols => {
            for m in [&mut w.w1, &mut w.w2] {
                let mut perm: Vec<usize> = (0..m.cols()).collect();
                rng.shuffle(&mut perm);
                *m = m.permute_cols(&perm);
            }
        }
        ExpertInit::Random => {
            let (d, h) = w.w1.shape();
            w = FfnWeights::kaiming(d, h, rng);
        }
    }
    Ok(w)
}

/// Produces the router column of one extra copy.
pub fn heuristic_router_init(column: &[f64], init: &RouterInit, rng: &mut Rng, neighbor: &[f64]) -> Result<Vec<f64>> {
    let mut c = column.to_vec();
    match init {
        RouterInit::Copy | RouterInit::BiasOnly => {}
        RouterInit::Noise { sigma } => c.iter_mut().for_each(|x| *x += sigma * rng.normal()),
        RouterInit::Interpolate { alpha } => {
            if neighbor.len() != c.len() {
                return invalid("neighbor router column has a different length");
            }
            for (x, &n) in c.iter_mut().zip(neighbor) {
                *x = alpha * *x + (1.0 - alpha) * n;
            }
        }
        RouterInit::Temperature { temp } => {
            if !(*temp > 0.0) {
                return invalid(format!("temperature must be positive, got {temp}"));
            }
            c.iter_mut().for_each(|x| *x /= temp);
        }
        RouterInit::Adversarial { beta } => c.iter_mut().for_each(|x| *x *= 1.0 - 2.0 * beta),
    }
    Ok(c)
}

/// Default eps for [`ExpertInit::Orthogonal`].
pub const ORTHOGONAL_EPS: f64 = GRAM_SCHMIDT_EPS;
