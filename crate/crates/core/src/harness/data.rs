//! Seeded Markov-chain corpora and batch samplers over their splits.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::{Batch, BatchSource};
use crate::numerics::{mix_seed, Rng};

/// How to generate a synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub vocab: usize,
    pub markov_order: usize,
    pub corpus_len: usize,
    /// Fractions of the corpus for the pretrain, CPT and eval splits, carved
    /// contiguously in that order.
    pub splits: [f64; 3],
    /// Exponent applied to the exponential draws of each transition row;
    /// 1 gives a flat Dirichlet, larger values give peakier rows.
    pub sharpness: f64,
    pub seed: u64,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            vocab: 32,
            markov_order: 2,
            corpus_len: 600_000,
            splits: [0.45, 0.45, 0.1],
            sharpness: 3.0,
            seed: 0,
        }
    }
}

impl DataSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return invalid("vocab must be at least 2");
        }
        if self.markov_order == 0
            || self
                .vocab
                .checked_pow(self.markov_order as u32 + 1)
                .is_none_or(|n| n > 1 << 26)
        {
            return invalid(format!(
                "markov order {} is unsupported for vocab {}",
                self.markov_order, self.vocab
            ));
        }
        if self.splits.iter().any(|f| !(*f >= 0.0)) || self.splits.iter().sum::<f64>() > 1.0 + 1e-12 {
            return invalid("split fractions must be non-negative and sum to at most 1");
        }
        if !(self.sharpness > 0.0 && self.sharpness.is_finite()) {
            return invalid("sharpness must be positive");
        }
        Ok(())
    }

    pub fn contexts(&self) -> usize {
        self.vocab.pow(self.markov_order as u32)
    }
}

/// Row-stochastic transition table indexed by the last `order` tokens
/// (oldest most significant).
#[derive(Clone, Debug, PartialEq)]
pub struct Transitions {
    pub vocab: usize,
    pub order: usize,
    /// contexts × vocab
    pub probs: Vec<f64>,
}

impl Transitions {
    /// Rows of normalized `Exp(1)^sharpness` draws.
    pub fn sample(spec: &DataSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = Rng::new(mix_seed(spec.seed, 0x7472_616e));
        let v = spec.vocab;
        let mut probs = Vec::with_capacity(spec.contexts() * v);
        for _ in 0..spec.contexts() {
            let row: Vec<f64> = (0..v).map(|_| libm::pow(rng.exponential(), spec.sharpness)).collect();
            let z: f64 = row.iter().sum();
            probs.extend(row.iter().map(|p| p / z));
        }
        Ok(Self {
            vocab: v,
            order: spec.markov_order,
            probs,
        })
    }

    pub fn from_probs(vocab: usize, order: usize, probs: Vec<f64>) -> Result<Self> {
        let contexts = vocab.pow(order as u32);
        if probs.len() != contexts * vocab {
            return invalid(format!(
                "expected {} probabilities, got {}",
                contexts * vocab,
                probs.len()
            ));
        }
        for row in probs.chunks(vocab) {
            if row.iter().any(|p| !(*p >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return invalid("transition rows must be probability vectors");
            }
        }
        Ok(Self { vocab, order, probs })
    }

    pub fn row(&self, context: usize) -> &[f64] {
        &self.probs[context * self.vocab..(context + 1) * self.vocab]
    }

    pub fn context_of(&self, history: &[u32]) -> usize {
        history[history.len() - self.order..]
            .iter()
            .fold(0, |c, &t| c * self.vocab + t as usize)
    }

    /// Mean conditional entropy under the chain's empirical context mix.
    pub fn entropy_rate(&self, corpus: &[u32]) -> f64 {
        let mut h = 0.0;
        let n = corpus.len().saturating_sub(self.order);
        for t in self.order..corpus.len() {
            let row = self.row(self.context_of(&corpus[..t]));
            h -= libm::log(row[corpus[t] as usize]);
        }
        h / n.max(1) as f64
    }
}

/// A generated corpus carved into three disjoint contiguous splits.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub tokens: Vec<u32>,
    pub transitions: Transitions,
    pub pretrain: std::ops::Range<usize>,
    pub cpt: std::ops::Range<usize>,
    pub eval: std::ops::Range<usize>,
}

impl Corpus {
    pub fn pretrain(&self) -> &[u32] {
        &self.tokens[self.pretrain.clone()]
    }

    pub fn cpt(&self) -> &[u32] {
        &self.tokens[self.cpt.clone()]
    }

    pub fn eval(&self) -> &[u32] {
        &self.tokens[self.eval.clone()]
    }
}

/// Generates a corpus from a freshly sampled transition table.
pub fn gen_data(spec: &DataSpec, seq_len: usize) -> Result<Corpus> {
    let tr = Transitions::sample(spec)?;
    gen_data_with(spec, tr, seq_len)
}

/// Generates a corpus from an explicit transition table.
pub fn gen_data_with(spec: &DataSpec, transitions: Transitions, seq_len: usize) -> Result<Corpus> {
    spec.validate()?;
    if transitions.vocab != spec.vocab || transitions.order != spec.markov_order {
        return invalid("transition table does not match the data spec");
    }
    if spec.corpus_len <= seq_len {
        return invalid(format!(
            "corpus of {} tokens is not longer than seq_len {seq_len}",
            spec.corpus_len
        ));
    }
    let mut rng = Rng::new(mix_seed(spec.seed, 0x636f_7270));
    let mut tokens: Vec<u32> = Vec::with_capacity(spec.corpus_len);
    for _ in 0..spec.markov_order.min(spec.corpus_len) {
        tokens.push(rng.below(spec.vocab) as u32);
    }
    while tokens.len() < spec.corpus_len {
        let row = transitions.row(transitions.context_of(&tokens));
        let u = rng.uniform();
        let mut acc = 0.0;
        let mut next = spec.vocab - 1;
        for (i, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                next = i;
                break;
            }
        }
        // never land on a zero-probability tail through rounding
        while row[next] == 0.0 && next > 0 {
            next -= 1;
        }
        tokens.push(next as u32);
    }
    let n = spec.corpus_len;
    let a = (spec.splits[0] * n as f64) as usize;
    let b = a + (spec.splits[1] * n as f64) as usize;
    let c = (b + (spec.splits[2] * n as f64) as usize).min(n);
    Ok(Corpus {
        tokens,
        transitions,
        pretrain: 0..a,
        cpt: a..b,
        eval: b..c,
    })
}

/// Random windows of one split; the batch for a step depends only on
/// `(seed, step)`.
#[derive(Clone, Debug)]
pub struct WindowSampler {
    tokens: Vec<u32>,
    seq_len: usize,
    batch_seqs: usize,
    seed: u64,
    bos: u32,
}

impl WindowSampler {
    pub fn new(tokens: &[u32], seq_len: usize, batch_seqs: usize, seed: u64, bos: u32) -> Result<Self> {
        if tokens.len() <= seq_len {
            return invalid(format!(
                "split of {} tokens is too short for seq_len {seq_len}",
                tokens.len()
            ));
        }
        if batch_seqs == 0 {
            return invalid("batch must contain at least one sequence");
        }
        Ok(Self {
            tokens: tokens.to_vec(),
            seq_len,
            batch_seqs,
            seed,
            bos,
        })
    }
}

impl BatchSource for WindowSampler {
    fn batch(&self, step: u64) -> Batch {
        let mut rng = Rng::new(mix_seed(self.seed, step));
        let starts = self.tokens.len() - self.seq_len;
        let windows: Vec<&[u32]> = (0..self.batch_seqs)
            .map(|_| {
                let s = rng.below(starts);
                &self.tokens[s..s + self.seq_len + 1]
            })
            .collect();
        Batch::from_windows(windows, self.bos)
    }
}

/// Cuts a split into non-overlapping windows, `per_batch` windows per batch.
pub fn eval_batches(tokens: &[u32], seq_len: usize, per_batch: usize, bos: u32) -> Vec<Batch> {
    let windows: Vec<&[u32]> = tokens.chunks_exact(seq_len + 1).collect();
    windows
        .chunks(per_batch.max(1))
        .map(|c| Batch::from_windows(c.iter().copied(), bos))
        .collect()
}
