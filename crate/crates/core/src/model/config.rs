use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// What the FFN of a residual block is.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// Dense ReLU FFN of width `ffn_dim_dense`.
    Dense,
    /// Top-K routed expert bank, experts of width `expert_ffn_dim`.
    Moe,
    /// Dense FFN shaped like a single expert (`expert_ffn_dim`), marked for
    /// conversion into an expert bank by sparse upcycling.
    Convertible,
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: usize,
    pub dim: usize,
    pub ffn_dim_dense: usize,
    pub expert_ffn_dim: usize,
    pub layout: Vec<BlockKind>,
    pub experts: usize,
    pub top_k: usize,
    pub seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// The desk reference: 6 blocks alternating dense/MoE, 8 experts, top-2.
    pub fn reference() -> Self {
        Self {
            vocab: 32,
            dim: 32,
            ffn_dim_dense: 64,
            expert_ffn_dim: 32,
            layout: [BlockKind::Dense, BlockKind::Moe].repeat(3),
            experts: 8,
            top_k: 2,
            seq_len: 32,
            seed: 0,
        }
    }

    pub fn blocks(&self) -> usize {
        self.layout.len()
    }

    pub fn moe_blocks(&self) -> usize {
        self.layout.iter().filter(|k| **k == BlockKind::Moe).count()
    }

    /// Token id used as the "previous token" of the first position.
    pub fn bos(&self) -> u32 {
        self.vocab as u32
    }

    pub fn with_experts(&self, experts: usize) -> Self {
        Self {
            experts,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab", self.vocab),
            ("dim", self.dim),
            ("ffn_dim_dense", self.ffn_dim_dense),
            ("expert_ffn_dim", self.expert_ffn_dim),
            ("seq_len", self.seq_len),
        ];
        for (name, v) in counts {
            if v == 0 {
                return invalid(format!("{name} must be at least 1"));
            }
        }
        if self.layout.is_empty() {
            return invalid("layout must contain at least one block");
        }
        if self.vocab >= u32::MAX as usize {
            return invalid("vocab too large");
        }
        if self.moe_blocks() > 0 && !(1..=self.experts).contains(&self.top_k) {
            return invalid(format!(
                "top_k {} must satisfy 1 <= K <= E = {}",
                self.top_k, self.experts
            ));
        }
        Ok(())
    }

    /// Parameters touched per token: dense FFNs, K experts per MoE block,
    /// embeddings rows, norms and the output projection.
    pub fn active_params(&self) -> usize {
        let d = self.dim;
        let mut n = 2 * d + d * self.vocab;
        for kind in &self.layout {
            n += d;
            n += match kind {
                BlockKind::Dense => 2 * d * self.ffn_dim_dense,
                BlockKind::Convertible => 2 * d * self.expert_ffn_dim,
                BlockKind::Moe => self.top_k * 2 * d * self.expert_ffn_dim,
            };
        }
        n
    }

    /// Total number of expert FFN weights over all MoE blocks.
    pub fn expert_params(&self) -> usize {
        self.moe_blocks() * self.experts * 2 * self.dim * self.expert_ffn_dim
    }
}
