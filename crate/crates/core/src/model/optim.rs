use serde::{Deserialize, Serialize};

use super::params::{Params, TensorRole};
use crate::error::{invalid, Result};

/// Adam moments for every tensor of a [`Params`]. Selection-bias entries are
/// never updated and their moments stay zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptState {
    pub m: Params,
    pub v: Params,
    /// Number of updates applied so far; also the schedule position.
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// beta1^step and beta2^step as running products.
    pub beta1_pow: f64,
    pub beta2_pow: f64,
}

impl OptState {
    pub fn new(params: &Params) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            beta1_pow: 1.0,
            beta2_pow: 1.0,
        }
    }

    /// One bias-corrected Adam update with learning rate `lr`.
    pub fn update(&mut self, params: &mut Params, grads: &Params, lr: f64) -> Result<()> {
        let roles = params.tensor_roles();
        let p = params.tensors_mut();
        let g = grads.tensors();
        if p.len() != g.len() || self.m.tensors().len() != p.len() {
            return invalid("optimizer state does not match parameters");
        }
        self.beta1_pow *= self.beta1;
        self.beta2_pow *= self.beta2;
        let c1 = 1.0 - self.beta1_pow;
        let c2 = 1.0 - self.beta2_pow;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let m = self.m.tensors_mut();
        let v = self.v.tensors_mut();
        for ((((pt, gt), mt), vt), role) in p.into_iter().zip(g).zip(m).zip(v).zip(roles) {
            if role == TensorRole::SelectBias {
                continue;
            }
            if pt.shape() != gt.shape() || pt.shape() != mt.shape() {
                return invalid("gradient shape does not match parameter");
            }
            let pw = pt.as_mut_slice();
            let mw = mt.as_mut_slice();
            let vw = vt.as_mut_slice();
            for (i, &gi) in gt.as_slice().iter().enumerate() {
                mw[i] = b1 * mw[i] + (1.0 - b1) * gi;
                vw[i] = b2 * vw[i] + (1.0 - b2) * gi * gi;
                let mhat = mw[i] / c1;
                let vhat = vw[i] / c2;
                pw[i] -= lr * mhat / (libm::sqrt(vhat) + eps);
            }
        }
        self.step += 1;
        Ok(())
    }

    pub fn matches(&self, params: &Params) -> bool {
        let shapes = |p: &Params| p.tensors().iter().map(|t| t.shape()).collect::<Vec<_>>();
        shapes(&self.m) == shapes(params) && shapes(&self.v) == shapes(params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{MoEModel, ModelConfig};

    #[test]
    fn zero_lr_is_identity() {
        let model = MoEModel::init(&ModelConfig::reference()).unwrap();
        let mut p = model.params.clone();
        let mut g = p.zeros_like();
        for t in g.tensors_mut() {
            t.fill(0.37);
        }
        let mut opt = OptState::new(&p);
        opt.update(&mut p, &g, 0.0).unwrap();
        assert!(p.bitwise_eq(&model.params));
        assert_eq!(opt.step, 1);
        assert!(opt.v.tensors().iter().all(|t| t.as_slice().iter().all(|&x| x >= 0.0)));
    }

    #[test]
    fn first_step_moves_by_lr() {
        let model = MoEModel::init(&ModelConfig::reference()).unwrap();
        let mut p = model.params.clone();
        let mut g = p.zeros_like();
        g.out.fill(-2.0);
        let mut opt = OptState::new(&p);
        opt.update(&mut p, &g, 0.01).unwrap();
        let delta = p.out.get(0, 0) - model.params.out.get(0, 0);
        assert!((delta - 0.01).abs() < 1e-9);
        assert!(p.tok_emb.bitwise_eq(&model.params.tok_emb));
    }
}
