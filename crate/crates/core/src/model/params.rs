use serde::{Deserialize, Serialize};

use super::config::{BlockKind, ModelConfig};
use crate::error::{invalid, Result};
use crate::numerics::{Matrix, Rng};

/// Two-layer ReLU FFN: `relu(x · w1) · w2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FfnWeights {
    /// d × hidden
    pub w1: Matrix,
    /// hidden × d
    pub w2: Matrix,
}

impl FfnWeights {
    pub fn init(dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            w1: Matrix::randn(dim, hidden, (2.0 / dim as f64).sqrt(), rng),
            w2: Matrix::randn(hidden, dim, 0.5 / (hidden as f64).sqrt(), rng),
        }
    }

    /// He-normal on both matrices.
    pub fn kaiming(dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            w1: Matrix::randn(dim, hidden, (2.0 / dim as f64).sqrt(), rng),
            w2: Matrix::randn(hidden, dim, (2.0 / hidden as f64).sqrt(), rng),
        }
    }

    pub fn zeros(dim: usize, hidden: usize) -> Self {
        Self {
            w1: Matrix::zeros(dim, hidden),
            w2: Matrix::zeros(hidden, dim),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }

    pub fn sum_sq(&self) -> f64 {
        self.w1.sum_sq() + self.w2.sum_sq()
    }

    /// Flattened `w1 ‖ w2`.
    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.w1.as_slice().to_vec();
        v.extend_from_slice(self.w2.as_slice());
        v
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.w1.bitwise_eq(&other.w1) && self.w2.bitwise_eq(&other.w2)
    }
}

/// Expert bank with its router.
///
/// `select_bias` only shifts which experts are selected; gate weights and
/// gradients never see it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoeLayer {
    /// d × E
    pub router: Matrix,
    /// 1 × E
    pub select_bias: Matrix,
    pub experts: Vec<FfnWeights>,
}

impl MoeLayer {
    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn router_column(&self, e: usize) -> Vec<f64> {
        self.router.col(e)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Ffn {
    Dense(FfnWeights),
    Moe(MoeLayer),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    /// RMS-norm gain, 1 × d
    pub norm: Matrix,
    pub ffn: Ffn,
}

/// Whether a tensor is updated by the optimizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorRole {
    Trainable,
    /// Load-balancing selection bias; changed only by the balancer.
    SelectBias,
}

/// Every tensor of the network. Gradients and optimizer moments reuse this
/// shape; their `select_bias` entries stay zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Params {
    /// V × d
    pub tok_emb: Matrix,
    /// (V + 1) × d, last row is the start-of-sequence context
    pub prev_emb: Matrix,
    pub blocks: Vec<Block>,
    /// d × V
    pub out: Matrix,
}

impl Params {
    pub fn zeros_like(&self) -> Params {
        let mut p = self.clone();
        for t in p.tensors_mut() {
            t.fill(0.0);
        }
        p
    }

    /// Tensors in canonical order (see [`Params::tensor_names`]).
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut v = vec![&self.tok_emb, &self.prev_emb];
        for b in &self.blocks {
            v.push(&b.norm);
            match &b.ffn {
                Ffn::Dense(w) => {
                    v.push(&w.w1);
                    v.push(&w.w2);
                }
                Ffn::Moe(l) => {
                    v.push(&l.router);
                    v.push(&l.select_bias);
                    for e in &l.experts {
                        v.push(&e.w1);
                        v.push(&e.w2);
                    }
                }
            }
        }
        v.push(&self.out);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = vec![&mut self.tok_emb, &mut self.prev_emb];
        for b in &mut self.blocks {
            v.push(&mut b.norm);
            match &mut b.ffn {
                Ffn::Dense(w) => {
                    v.push(&mut w.w1);
                    v.push(&mut w.w2);
                }
                Ffn::Moe(l) => {
                    v.push(&mut l.router);
                    v.push(&mut l.select_bias);
                    for e in &mut l.experts {
                        v.push(&mut e.w1);
                        v.push(&mut e.w2);
                    }
                }
            }
        }
        v.push(&mut self.out);
        v
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut v = vec!["tok_emb".to_string(), "prev_emb".to_string()];
        for (i, b) in self.blocks.iter().enumerate() {
            v.push(format!("blocks.{i}.norm"));
            match &b.ffn {
                Ffn::Dense(_) => {
                    v.push(format!("blocks.{i}.ffn.w1"));
                    v.push(format!("blocks.{i}.ffn.w2"));
                }
                Ffn::Moe(l) => {
                    v.push(format!("blocks.{i}.router"));
                    v.push(format!("blocks.{i}.select_bias"));
                    for e in 0..l.experts.len() {
                        v.push(format!("blocks.{i}.experts.{e}.w1"));
                        v.push(format!("blocks.{i}.experts.{e}.w2"));
                    }
                }
            }
        }
        v.push("out".to_string());
        v
    }

    pub fn tensor_roles(&self) -> Vec<TensorRole> {
        let mut v = vec![TensorRole::Trainable; 2];
        for b in &self.blocks {
            v.push(TensorRole::Trainable);
            match &b.ffn {
                Ffn::Dense(_) => v.extend([TensorRole::Trainable; 2]),
                Ffn::Moe(l) => {
                    v.push(TensorRole::Trainable);
                    v.push(TensorRole::SelectBias);
                    v.extend(std::iter::repeat_n(TensorRole::Trainable, 2 * l.experts.len()));
                }
            }
        }
        v.push(TensorRole::Trainable);
        v
    }

    /// Concatenation of all trainable tensors (select biases excluded).
    pub fn trainable_vector(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for (t, role) in self.tensors().into_iter().zip(self.tensor_roles()) {
            if role == TensorRole::Trainable {
                v.extend_from_slice(t.as_slice());
            }
        }
        v
    }

    /// Inverse of [`Params::trainable_vector`].
    pub fn set_trainable_vector(&mut self, flat: &[f64]) -> Result<()> {
        let roles = self.tensor_roles();
        let total: usize = self
            .tensors()
            .iter()
            .zip(&roles)
            .filter(|(_, r)| **r == TensorRole::Trainable)
            .map(|(t, _)| t.len())
            .sum();
        if total != flat.len() {
            return invalid(format!("flat vector has {} entries, model has {total}", flat.len()));
        }
        let mut off = 0;
        for (t, role) in self.tensors_mut().into_iter().zip(roles) {
            if role == TensorRole::Trainable {
                let n = t.len();
                t.as_mut_slice().copy_from_slice(&flat[off..off + n]);
                off += n;
            }
        }
        Ok(())
    }

    pub fn num_trainable(&self) -> usize {
        self.tensors()
            .iter()
            .zip(self.tensor_roles())
            .filter(|(_, r)| *r == TensorRole::Trainable)
            .map(|(t, _)| t.len())
            .sum()
    }

    pub fn bitwise_eq(&self, other: &Params) -> bool {
        let a = self.tensors();
        let b = other.tensors();
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.bitwise_eq(y))
    }

    pub fn moe_layers(&self) -> impl Iterator<Item = &MoeLayer> {
        self.blocks.iter().filter_map(|b| match &b.ffn {
            Ffn::Moe(l) => Some(l),
            Ffn::Dense(_) => None,
        })
    }

    pub fn moe_layers_mut(&mut self) -> impl Iterator<Item = &mut MoeLayer> {
        self.blocks.iter_mut().filter_map(|b| match &mut b.ffn {
            Ffn::Moe(l) => Some(l),
            Ffn::Dense(_) => None,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

/// A configured network with its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoEModel {
    pub config: ModelConfig,
    pub params: Params,
}

impl MoEModel {
    /// Random initialization seeded from `config.seed`.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.seed);
        let (v, d) = (config.vocab, config.dim);
        let tok_emb = Matrix::randn(v, d, 1.0, &mut rng);
        let prev_emb = Matrix::randn(v + 1, d, 1.0, &mut rng);
        let mut blocks = Vec::with_capacity(config.blocks());
        for kind in &config.layout {
            let norm = Matrix::filled(1, d, 1.0);
            let ffn = match kind {
                BlockKind::Dense => Ffn::Dense(FfnWeights::init(d, config.ffn_dim_dense, &mut rng)),
                BlockKind::Convertible => Ffn::Dense(FfnWeights::init(d, config.expert_ffn_dim, &mut rng)),
                BlockKind::Moe => {
                    let router = Matrix::randn(d, config.experts, 1.0 / (d as f64).sqrt(), &mut rng);
                    let experts = (0..config.experts)
                        .map(|_| FfnWeights::init(d, config.expert_ffn_dim, &mut rng))
                        .collect();
                    Ffn::Moe(MoeLayer {
                        router,
                        select_bias: Matrix::zeros(1, config.experts),
                        experts,
                    })
                }
            };
            blocks.push(Block { norm, ffn });
        }
        let out = Matrix::randn(d, v, 0.02, &mut rng);
        Ok(Self {
            config: config.clone(),
            params: Params {
                tok_emb,
                prev_emb,
                blocks,
                out,
            },
        })
    }

    /// Checks that parameter shapes agree with the configuration.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let p = &self.params;
        let (v, d) = (c.vocab, c.dim);
        if p.tok_emb.shape() != (v, d) || p.prev_emb.shape() != (v + 1, d) || p.out.shape() != (d, v) {
            return invalid("embedding or output shape does not match config");
        }
        if p.blocks.len() != c.blocks() {
            return invalid("block count does not match layout");
        }
        for (i, (b, kind)) in p.blocks.iter().zip(&c.layout).enumerate() {
            if b.norm.shape() != (1, d) {
                return invalid(format!("block {i} norm shape"));
            }
            let ffn_ok = |w: &FfnWeights, h: usize| w.w1.shape() == (d, h) && w.w2.shape() == (h, d);
            let ok = match (kind, &b.ffn) {
                (BlockKind::Dense, Ffn::Dense(w)) => ffn_ok(w, c.ffn_dim_dense),
                (BlockKind::Convertible, Ffn::Dense(w)) => ffn_ok(w, c.expert_ffn_dim),
                (BlockKind::Moe, Ffn::Moe(l)) => {
                    l.router.shape() == (d, c.experts)
                        && l.select_bias.shape() == (1, c.experts)
                        && l.experts.len() == c.experts
                        && l.experts.iter().all(|w| ffn_ok(w, c.expert_ffn_dim))
                }
                _ => false,
            };
            if !ok {
                return invalid(format!("block {i} does not match its {kind:?} layout entry"));
            }
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.params.num_trainable()
    }
}
