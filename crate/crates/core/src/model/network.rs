//! Forward pass with cached activations and exact reverse-mode gradients.
//!
//! Architecture: `tok_emb[x_t] + prev_emb[x_{t-1}]` → B × (RMS-norm → dense
//! or MoE FFN → residual add) → output projection → softmax cross-entropy.
//! Positions are independent given their (previous, current) token pair.

use super::config::ModelConfig;
use super::params::{Ffn, FfnWeights, MoEModel, MoeLayer, Params};
use super::routing::select_topk;
use crate::error::{invalid, Result};
use crate::numerics::{axpy, dot, matmul, matmul_at_b_acc};

const RMS_EPS: f64 = 1e-6;

/// A flat set of next-token prediction positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub cur: Vec<u32>,
    /// Previous token, `vocab` (BOS) at the start of a window.
    pub prev: Vec<u32>,
    pub target: Vec<u32>,
}

impl Batch {
    /// Each window of `L + 1` tokens yields `L` predictions.
    pub fn from_windows<'a>(windows: impl IntoIterator<Item = &'a [u32]>, bos: u32) -> Self {
        let mut b = Batch {
            cur: Vec::new(),
            prev: Vec::new(),
            target: Vec::new(),
        };
        for w in windows {
            for t in 0..w.len().saturating_sub(1) {
                b.cur.push(w[t]);
                b.prev.push(if t == 0 { bos } else { w[t - 1] });
                b.target.push(w[t + 1]);
            }
        }
        b
    }

    pub fn len(&self) -> usize {
        self.cur.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cur.is_empty()
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.is_empty() {
            return invalid("batch is empty");
        }
        if self.prev.len() != self.len() || self.target.len() != self.len() {
            return invalid("batch columns have different lengths");
        }
        let v = config.vocab as u32;
        if let Some(t) = self.cur.iter().chain(&self.target).find(|&&t| t >= v) {
            return invalid(format!("token {t} out of range for vocab {v}"));
        }
        if let Some(t) = self.prev.iter().find(|&&t| t > v) {
            return invalid(format!("context token {t} out of range for vocab {v}"));
        }
        Ok(())
    }
}

struct FfnCache {
    x: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
    out: Vec<f64>,
}

struct ExpertCache {
    /// (token, slot within the token's top-K)
    tokens: Vec<(u32, u8)>,
    ffn: FfnCache,
}

enum BlockFfnCache {
    Dense {
        pre: Vec<f64>,
        act: Vec<f64>,
    },
    Moe {
        /// token-major, K entries per token
        selected: Vec<usize>,
        gates: Vec<f64>,
        /// row of the token inside its expert's gathered batch, per slot
        rows: Vec<u32>,
        experts: Vec<ExpertCache>,
    },
}

struct BlockCache {
    unit: Vec<f64>,
    inv_rms: Vec<f64>,
    xn: Vec<f64>,
    out: Vec<f64>,
    ffn: BlockFfnCache,
}

/// Activations retained by [`forward`] for [`backward`].
pub struct ForwardCache {
    n: usize,
    blocks: Vec<BlockCache>,
    final_h: Vec<f64>,
    probs: Vec<f64>,
    cur: Vec<u32>,
    prev: Vec<u32>,
    target: Vec<u32>,
}

impl ForwardCache {
    pub fn tokens(&self) -> usize {
        self.n
    }

    /// Tokens routed to each expert, per MoE block.
    pub fn loads(&self) -> Vec<Vec<usize>> {
        self.blocks
            .iter()
            .filter_map(|b| match &b.ffn {
                BlockFfnCache::Moe { experts, .. } => Some(experts.iter().map(|e| e.tokens.len()).collect()),
                BlockFfnCache::Dense { .. } => None,
            })
            .collect()
    }

    /// Expert activations (token × selected expert) per MoE block.
    pub fn expert_activations(&self) -> Vec<usize> {
        self.loads().iter().map(|l| l.iter().sum()).collect()
    }

    /// Selected experts per token for each MoE block.
    pub fn selections(&self) -> Vec<Vec<usize>> {
        self.blocks
            .iter()
            .filter_map(|b| match &b.ffn {
                BlockFfnCache::Moe { selected, .. } => Some(selected.clone()),
                BlockFfnCache::Dense { .. } => None,
            })
            .collect()
    }

    /// Gate weights per token (token-major, K per token) for each MoE block.
    pub fn gates(&self) -> Vec<Vec<f64>> {
        self.blocks
            .iter()
            .filter_map(|b| match &b.ffn {
                BlockFfnCache::Moe { gates, .. } => Some(gates.clone()),
                BlockFfnCache::Dense { .. } => None,
            })
            .collect()
    }

    /// First block whose output contains a non-finite value.
    pub fn first_non_finite_block(&self) -> Option<usize> {
        self.blocks.iter().position(|b| b.out.iter().any(|x| !x.is_finite()))
    }
}

/// Counted floating-point work for one forward pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlopCount {
    /// Dense FFNs, selected experts and output projection.
    pub active: u64,
    /// Router score computation, which scales with the expert count.
    pub router: u64,
    pub tokens: u64,
}

fn ffn_forward(w: &FfnWeights, x: Vec<f64>, n: usize, d: usize) -> FfnCache {
    let h = w.hidden();
    let mut pre = vec![0.0; n * h];
    matmul(&x, w.w1.as_slice(), &mut pre, n, d, h);
    let act: Vec<f64> = pre.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    let mut out = vec![0.0; n * d];
    matmul(&act, w.w2.as_slice(), &mut out, n, h, d);
    FfnCache { x, pre, act, out }
}

/// Accumulates parameter gradients into `g` and returns d(loss)/d(x).
fn ffn_backward(w: &FfnWeights, c: &FfnCache, dout: &[f64], g: &mut FfnWeights, n: usize, d: usize) -> Vec<f64> {
    let h = w.hidden();
    matmul_at_b_acc(&c.act, dout, g.w2.as_mut_slice(), n, h, d);
    let w2t = w.w2.transpose();
    let mut dact = vec![0.0; n * h];
    matmul(dout, w2t.as_slice(), &mut dact, n, d, h);
    for (da, &p) in dact.iter_mut().zip(&c.pre) {
        if p <= 0.0 {
            *da = 0.0;
        }
    }
    matmul_at_b_acc(&c.x, &dact, g.w1.as_mut_slice(), n, d, h);
    let w1t = w.w1.transpose();
    let mut dx = vec![0.0; n * d];
    matmul(&dact, w1t.as_slice(), &mut dx, n, h, d);
    dx
}

fn moe_forward(layer: &MoeLayer, k: usize, xn: &[f64], n: usize, d: usize) -> (Vec<f64>, BlockFfnCache) {
    let e_count = layer.num_experts();
    let mut scores = vec![0.0; n * e_count];
    matmul(xn, layer.router.as_slice(), &mut scores, n, d, e_count);
    let bias = layer.select_bias.as_slice();
    let mut selected = vec![0usize; n * k];
    let mut gates = vec![0.0; n * k];
    let mut rows = vec![0u32; n * k];
    let mut tokens: Vec<Vec<(u32, u8)>> = vec![Vec::new(); e_count];
    for t in 0..n {
        let sel = &mut selected[t * k..(t + 1) * k];
        select_topk(
            &scores[t * e_count..(t + 1) * e_count],
            bias,
            sel,
            &mut gates[t * k..(t + 1) * k],
        );
        for (slot, &e) in sel.iter().enumerate() {
            rows[t * k + slot] = tokens[e].len() as u32;
            tokens[e].push((t as u32, slot as u8));
        }
    }
    let experts: Vec<ExpertCache> = tokens
        .into_iter()
        .zip(&layer.experts)
        .map(|(toks, w)| {
            let mut x = Vec::with_capacity(toks.len() * d);
            for &(t, _) in &toks {
                let t = t as usize;
                x.extend_from_slice(&xn[t * d..(t + 1) * d]);
            }
            let ffn = ffn_forward(w, x, toks.len(), d);
            ExpertCache { tokens: toks, ffn }
        })
        .collect();
    let mut y = vec![0.0; n * d];
    for t in 0..n {
        let yt = &mut y[t * d..(t + 1) * d];
        for slot in 0..k {
            let e = selected[t * k + slot];
            let r = rows[t * k + slot] as usize;
            axpy(gates[t * k + slot], &experts[e].ffn.out[r * d..(r + 1) * d], yt);
        }
    }
    (
        y,
        BlockFfnCache::Moe {
            selected,
            gates,
            rows,
            experts,
        },
    )
}

/// Mean next-token cross-entropy over the batch, plus cached activations.
pub fn forward(model: &MoEModel, batch: &Batch) -> Result<(f64, ForwardCache)> {
    batch.validate(&model.config)?;
    Ok(forward_unchecked(model, batch))
}

fn forward_unchecked(model: &MoEModel, batch: &Batch) -> (f64, ForwardCache) {
    let cfg = &model.config;
    let p = &model.params;
    let (n, d, v) = (batch.len(), cfg.dim, cfg.vocab);
    let mut h = vec![0.0; n * d];
    for t in 0..n {
        let ht = &mut h[t * d..(t + 1) * d];
        ht.copy_from_slice(p.tok_emb.row(batch.cur[t] as usize));
        axpy(1.0, p.prev_emb.row(batch.prev[t] as usize), ht);
    }
    let mut blocks = Vec::with_capacity(p.blocks.len());
    for block in &p.blocks {
        let gain = block.norm.as_slice();
        let mut unit = vec![0.0; n * d];
        let mut inv_rms = vec![0.0; n];
        let mut xn = vec![0.0; n * d];
        for t in 0..n {
            let ht = &h[t * d..(t + 1) * d];
            let ms = dot(ht, ht) / d as f64;
            let inv = 1.0 / libm::sqrt(ms + RMS_EPS);
            inv_rms[t] = inv;
            for j in 0..d {
                let u = ht[j] * inv;
                unit[t * d + j] = u;
                xn[t * d + j] = u * gain[j];
            }
        }
        let (y, ffn) = match &block.ffn {
            Ffn::Dense(w) => {
                let c = ffn_forward(w, xn.clone(), n, d);
                (c.out, BlockFfnCache::Dense { pre: c.pre, act: c.act })
            }
            Ffn::Moe(layer) => moe_forward(layer, cfg.top_k, &xn, n, d),
        };
        for (hv, yv) in h.iter_mut().zip(&y) {
            *hv += yv;
        }
        blocks.push(BlockCache {
            unit,
            inv_rms,
            xn,
            out: h.clone(),
            ffn,
        });
    }
    let mut logits = vec![0.0; n * v];
    matmul(&h, p.out.as_slice(), &mut logits, n, d, v);
    let mut loss_sum = 0.0;
    for t in 0..n {
        let row = &mut logits[t * v..(t + 1) * v];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for x in row.iter_mut() {
            *x = libm::exp(*x - max);
            z += *x;
        }
        let tgt = batch.target[t] as usize;
        loss_sum += libm::log(z) - libm::log(row[tgt]);
        row.iter_mut().for_each(|x| *x /= z);
    }
    let loss = loss_sum / n as f64;
    (
        loss,
        ForwardCache {
            n,
            blocks,
            final_h: h,
            probs: logits,
            cur: batch.cur.clone(),
            prev: batch.prev.clone(),
            target: batch.target.clone(),
        },
    )
}

/// Exact gradients of the mean loss. The select-bias entries of the result
/// are zero: selection is not differentiated, only the gate softmax is.
pub fn backward(model: &MoEModel, cache: &ForwardCache) -> Params {
    let cfg = &model.config;
    let p = &model.params;
    let (n, d, v, k) = (cache.n, cfg.dim, cfg.vocab, cfg.top_k);
    let mut g = p.zeros_like();

    let mut dlogits = cache.probs.clone();
    let inv_n = 1.0 / n as f64;
    for t in 0..n {
        dlogits[t * v + cache.target[t] as usize] -= 1.0;
    }
    dlogits.iter_mut().for_each(|x| *x *= inv_n);
    matmul_at_b_acc(&cache.final_h, &dlogits, g.out.as_mut_slice(), n, d, v);
    let out_t = p.out.transpose();
    let mut dh = vec![0.0; n * d];
    matmul(&dlogits, out_t.as_slice(), &mut dh, n, v, d);

    for (bi, (block, bc)) in p.blocks.iter().zip(&cache.blocks).enumerate().rev() {
        let gblock = &mut g.blocks[bi];
        let dxn = match (&block.ffn, &bc.ffn, &mut gblock.ffn) {
            (Ffn::Dense(w), BlockFfnCache::Dense { pre, act }, Ffn::Dense(gw)) => {
                let c = FfnCache {
                    x: bc.xn.clone(),
                    pre: pre.clone(),
                    act: act.clone(),
                    out: Vec::new(),
                };
                ffn_backward(w, &c, &dh, gw, n, d)
            }
            (
                Ffn::Moe(layer),
                BlockFfnCache::Moe {
                    selected,
                    gates,
                    rows,
                    experts,
                },
                Ffn::Moe(glayer),
            ) => moe_backward(layer, glayer, &bc.xn, &dh, selected, gates, rows, experts, n, d, k),
            _ => unreachable!("cache does not match model"),
        };
        let gain = block.norm.as_slice();
        let dgain = gblock.norm.as_mut_slice();
        let mut du = vec![0.0; d];
        for t in 0..n {
            let u = &bc.unit[t * d..(t + 1) * d];
            let dx = &dxn[t * d..(t + 1) * d];
            for j in 0..d {
                dgain[j] += dx[j] * u[j];
                du[j] = dx[j] * gain[j];
            }
            let proj = dot(&du, u) / d as f64;
            let inv = bc.inv_rms[t];
            let dht = &mut dh[t * d..(t + 1) * d];
            for j in 0..d {
                dht[j] += (du[j] - u[j] * proj) * inv;
            }
        }
    }

    for t in 0..n {
        let dht = &dh[t * d..(t + 1) * d];
        axpy(1.0, dht, g.tok_emb.row_mut(cache.cur[t] as usize));
        axpy(1.0, dht, g.prev_emb.row_mut(cache.prev[t] as usize));
    }
    g
}

#[allow(clippy::too_many_arguments)]
fn moe_backward(
    layer: &MoeLayer,
    glayer: &mut MoeLayer,
    xn: &[f64],
    dy: &[f64],
    selected: &[usize],
    gates: &[f64],
    rows: &[u32],
    experts: &[ExpertCache],
    n: usize,
    d: usize,
    k: usize,
) -> Vec<f64> {
    let e_count = layer.num_experts();
    let mut dxn = vec![0.0; n * d];
    // d(loss)/d(gate) per token slot
    let mut dgate = vec![0.0; n * k];
    for t in 0..n {
        let dyt = &dy[t * d..(t + 1) * d];
        for slot in 0..k {
            let e = selected[t * k + slot];
            let r = rows[t * k + slot] as usize;
            dgate[t * k + slot] = dot(dyt, &experts[e].ffn.out[r * d..(r + 1) * d]);
        }
    }
    for (e, ec) in experts.iter().enumerate() {
        let m = ec.tokens.len();
        if m == 0 {
            continue;
        }
        let mut dout = vec![0.0; m * d];
        for (r, &(t, slot)) in ec.tokens.iter().enumerate() {
            let t = t as usize;
            let gate = gates[t * k + slot as usize];
            let dst = &mut dout[r * d..(r + 1) * d];
            for (o, &v) in dst.iter_mut().zip(&dy[t * d..(t + 1) * d]) {
                *o = gate * v;
            }
        }
        let dx = ffn_backward(&layer.experts[e], &ec.ffn, &dout, &mut glayer.experts[e], m, d);
        for (r, &(t, _)) in ec.tokens.iter().enumerate() {
            let t = t as usize;
            axpy(1.0, &dx[r * d..(r + 1) * d], &mut dxn[t * d..(t + 1) * d]);
        }
    }
    let router_t = layer.router.transpose();
    let grouter = glayer.router.as_mut_slice();
    for t in 0..n {
        let g = &gates[t * k..(t + 1) * k];
        let dg = &dgate[t * k..(t + 1) * k];
        let mean: f64 = g.iter().zip(dg).map(|(a, b)| a * b).sum();
        let xt = &xn[t * d..(t + 1) * d];
        for slot in 0..k {
            let ds = g[slot] * (dg[slot] - mean);
            if ds == 0.0 {
                continue;
            }
            let e = selected[t * k + slot];
            for i in 0..d {
                grouter[i * e_count + e] += xt[i] * ds;
            }
            axpy(ds, router_t.row(e), &mut dxn[t * d..(t + 1) * d]);
        }
    }
    dxn
}

/// Mean cross-entropy over all batches; parameters and biases are untouched.
pub fn eval_loss(model: &MoEModel, batches: &[Batch]) -> Result<f64> {
    if batches.iter().all(|b| b.is_empty()) {
        return invalid("evaluation set is empty");
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for b in batches.iter().filter(|b| !b.is_empty()) {
        let (loss, _) = forward(model, b)?;
        sum += loss * b.len() as f64;
        count += b.len();
    }
    Ok(sum / count as f64)
}

/// Counts the multiply-adds (×2) of a forward pass from the routing it made.
pub fn count_flops(model: &MoEModel, cache: &ForwardCache) -> FlopCount {
    let cfg = &model.config;
    let (n, d) = (cache.n as u64, cfg.dim as u64);
    let mut active = 2 * n * d * cfg.vocab as u64;
    let mut router = 0;
    for (block, bc) in model.params.blocks.iter().zip(&cache.blocks) {
        match (&block.ffn, &bc.ffn) {
            (Ffn::Dense(w), _) => active += 4 * n * d * w.hidden() as u64,
            (Ffn::Moe(l), BlockFfnCache::Moe { experts, .. }) => {
                router += 2 * n * d * l.num_experts() as u64;
                for (w, ec) in l.experts.iter().zip(experts) {
                    active += 4 * ec.tokens.len() as u64 * d * w.hidden() as u64;
                }
            }
            _ => unreachable!(),
        }
    }
    FlopCount {
        active,
        router,
        tokens: n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BlockKind, ModelConfig};
    use crate::numerics::{grad_check, Rng};

    fn small_config(seed: u64) -> ModelConfig {
        ModelConfig {
            vocab: 11,
            dim: 8,
            ffn_dim_dense: 12,
            expert_ffn_dim: 6,
            layout: vec![BlockKind::Dense, BlockKind::Moe, BlockKind::Moe],
            experts: 4,
            top_k: 2,
            seq_len: 6,
            seed,
        }
    }

    fn random_batch(cfg: &ModelConfig, seqs: usize, seed: u64) -> Batch {
        let mut rng = Rng::new(seed);
        let windows: Vec<Vec<u32>> = (0..seqs)
            .map(|_| (0..=cfg.seq_len).map(|_| rng.below(cfg.vocab) as u32).collect())
            .collect();
        Batch::from_windows(windows.iter().map(|w| w.as_slice()), cfg.bos())
    }

    fn perturbed(model: &MoEModel, seed: u64) -> MoEModel {
        // non-trivial gains so their gradient paths are exercised
        let mut m = model.clone();
        let mut rng = Rng::new(seed);
        for b in &mut m.params.blocks {
            for g in b.norm.as_mut_slice() {
                *g = 1.0 + 0.3 * rng.normal();
            }
        }
        m.params.out = crate::numerics::Matrix::randn(m.config.dim, m.config.vocab, 0.3, &mut rng);
        m
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = small_config(3);
        let model = perturbed(&MoEModel::init(&cfg).unwrap(), 4);
        let batch = random_batch(&cfg, 2, 5);
        let (_, cache) = forward(&model, &batch).unwrap();
        let grads = backward(&model, &cache);
        let theta = model.params.trainable_vector();
        let analytic = grads.trainable_vector();
        let mut probe = model.clone();
        let mut rng = Rng::new(6);
        let err = grad_check(
            |t| {
                probe.params.set_trainable_vector(t).unwrap();
                forward(&probe, &batch).unwrap().0
            },
            &theta,
            &analytic,
            1e-5,
            &mut rng,
        )
        .unwrap();
        assert!(err < 1e-5, "max relative error {err}");
    }

    #[test]
    fn select_bias_gradient_is_zero() {
        let cfg = small_config(1);
        let model = MoEModel::init(&cfg).unwrap();
        let batch = random_batch(&cfg, 3, 2);
        let (_, cache) = forward(&model, &batch).unwrap();
        let g = backward(&model, &cache);
        for l in g.moe_layers() {
            assert!(l.select_bias.as_slice().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn unselected_expert_has_zero_gradient() {
        let cfg = small_config(2);
        let mut model = MoEModel::init(&cfg).unwrap();
        // expert 3 of the first MoE block can never be selected
        if let Ffn::Moe(l) = &mut model.params.blocks[1].ffn {
            l.select_bias.set(0, 3, -1e9);
        }
        let batch = random_batch(&cfg, 3, 2);
        let (_, cache) = forward(&model, &batch).unwrap();
        assert_eq!(cache.loads()[0][3], 0);
        let g = backward(&model, &cache);
        if let Ffn::Moe(l) = &g.blocks[1].ffn {
            assert_eq!(l.experts[3].sum_sq(), 0.0);
            assert!(l.router.col(3).iter().all(|&x| x == 0.0));
            assert!(l.experts[0].sum_sq() + l.experts[1].sum_sq() > 0.0);
        } else {
            unreachable!()
        }
    }

    #[test]
    fn init_loss_near_uniform() {
        let mut cfg = ModelConfig::reference();
        let mut total = 0.0;
        for s in 0..8 {
            cfg.seed = s;
            let model = MoEModel::init(&cfg).unwrap();
            let batch = random_batch(&cfg, 4, 100 + s);
            total += forward(&model, &batch).unwrap().0;
        }
        let mean = total / 8.0;
        assert!((mean - (32f64).ln()).abs() < 0.15, "{mean}");
    }

    #[test]
    fn single_token_vocab_has_zero_loss() {
        let mut cfg = small_config(0);
        cfg.vocab = 1;
        let model = MoEModel::init(&cfg).unwrap();
        let batch = Batch::from_windows([&[0u32, 0, 0, 0][..]], cfg.bos());
        assert_eq!(forward(&model, &batch).unwrap().0, 0.0);
    }

    #[test]
    fn rejects_out_of_range_tokens() {
        let cfg = small_config(0);
        let model = MoEModel::init(&cfg).unwrap();
        let batch = Batch::from_windows([&[0u32, 11, 2][..]], cfg.bos());
        assert!(forward(&model, &batch).is_err());
        assert!(forward(&model, &Batch::from_windows([], cfg.bos())).is_err());
    }

    #[test]
    fn small_bias_change_keeps_loss_bitwise() {
        let cfg = small_config(7);
        let model = MoEModel::init(&cfg).unwrap();
        let batch = random_batch(&cfg, 3, 8);
        let (base, cache) = forward(&model, &batch).unwrap();
        let mut nudged = model.clone();
        for l in nudged.params.moe_layers_mut() {
            for b in l.select_bias.as_mut_slice() {
                *b += 1e-13;
            }
        }
        let (after, cache2) = forward(&nudged, &batch).unwrap();
        assert_eq!(cache.selections(), cache2.selections());
        assert_eq!(base.to_bits(), after.to_bits());
    }

    #[test]
    fn gates_sum_to_one_per_token() {
        let cfg = small_config(9);
        let model = MoEModel::init(&cfg).unwrap();
        let batch = random_batch(&cfg, 4, 1);
        let (_, cache) = forward(&model, &batch).unwrap();
        for b in &cache.blocks {
            if let BlockFfnCache::Moe { gates, .. } = &b.ffn {
                for g in gates.chunks(cfg.top_k) {
                    assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    assert!(g.iter().all(|x| *x > 0.0 && *x <= 1.0));
                }
            }
        }
    }

    #[test]
    fn eval_is_pure() {
        let cfg = small_config(2);
        let model = MoEModel::init(&cfg).unwrap();
        let batches = vec![random_batch(&cfg, 2, 1), random_batch(&cfg, 3, 2)];
        let a = eval_loss(&model, &batches).unwrap();
        let b = eval_loss(&model, &batches).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert!(a.is_finite() && a > 0.0);
        assert!(eval_loss(&model, &[]).is_err());
    }

    #[test]
    fn flops_scale_with_k_not_e() {
        let cfg = small_config(2);
        let model = MoEModel::init(&cfg).unwrap();
        let batch = random_batch(&cfg, 2, 1);
        let (_, cache) = forward(&model, &batch).unwrap();
        let f = count_flops(&model, &cache);
        let n = batch.len() as u64;
        let expect = 2 * n * 8 * 11 + 4 * n * 8 * 12 + 2 * (4 * n * 2 * 8 * 6);
        assert_eq!(f.active, expect);
        assert_eq!(cache.expert_activations(), vec![batch.len() * 2; 2]);
    }
}
