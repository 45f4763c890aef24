use crate::error::{invalid, Result};
use crate::model::{BlockKind, Ffn, MoEModel, MoeLayer, OptState};
use crate::numerics::{Matrix, Rng};

/// Converts every `Convertible` dense block into an `experts`-way expert
/// bank of identical copies of its FFN, with a fresh Kaiming router and
/// zero selection bias.
pub fn sparse_upcycle(dense: &MoEModel, experts: usize, top_k: usize, rng: &mut Rng) -> Result<MoEModel> {
    let cfg = &dense.config;
    if !cfg.layout.contains(&BlockKind::Convertible) {
        return invalid("model has no block marked for conversion");
    }
    if cfg.moe_blocks() > 0 && cfg.experts != experts {
        return invalid("existing expert banks have a different expert count");
    }
    let mut out = dense.clone();
    out.config.experts = experts;
    out.config.top_k = top_k;
    let d = cfg.dim;
    for (kind, block) in out.config.layout.iter_mut().zip(out.params.blocks.iter_mut()) {
        if *kind != BlockKind::Convertible {
            continue;
        }
        let w = match &block.ffn {
            Ffn::Dense(w) => w.clone(),
            Ffn::Moe(_) => return invalid("block marked for conversion is already sparse"),
        };
        if w.hidden() != cfg.expert_ffn_dim || w.w1.rows() != d {
            return invalid(format!(
                "dense FFN is {}x{}, experts must be {}x{}",
                w.w1.rows(),
                w.hidden(),
                d,
                cfg.expert_ffn_dim
            ));
        }
        block.ffn = Ffn::Moe(MoeLayer {
            router: Matrix::randn(d, experts, (2.0 / d as f64).sqrt(), rng),
            select_bias: Matrix::zeros(1, experts),
            experts: vec![w; experts],
        });
        *kind = BlockKind::Moe;
    }
    out.validate()?;
    Ok(out)
}

/// Optimizer state for [`sparse_upcycle`]: each expert inherits the dense
/// FFN's moments, router moments start at zero.
pub fn sparse_opt_state(opt: &OptState, dense: &MoEModel, converted: &MoEModel) -> Result<OptState> {
    let convert = |p: &crate::model::Params| -> Result<crate::model::Params> {
        let mut out = converted.params.zeros_like();
        for ((src, dst), kind) in p.blocks.iter().zip(out.blocks.iter_mut()).zip(&dense.config.layout) {
            dst.norm = src.norm.clone();
            match (&src.ffn, &mut dst.ffn, kind) {
                (Ffn::Dense(w), Ffn::Moe(l), BlockKind::Convertible) => {
                    l.experts.iter_mut().for_each(|e| *e = w.clone());
                }
                (a, b, _) => *b = a.clone(),
            }
        }
        out.tok_emb = p.tok_emb.clone();
        out.prev_emb = p.prev_emb.clone();
        out.out = p.out.clone();
        Ok(out)
    };
    let mut out = opt.clone();
    out.m = convert(&opt.m)?;
    out.v = convert(&opt.v)?;
    if !out.matches(&converted.params) {
        return invalid("optimizer state does not match the dense model");
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::data::{eval_batches, gen_data, DataSpec};
    use crate::model::{eval_loss, ModelConfig};

    fn dense() -> (MoEModel, Vec<crate::model::Batch>) {
        let mut cfg = ModelConfig::reference();
        cfg.layout = [BlockKind::Dense, BlockKind::Convertible].repeat(3);
        cfg.experts = 1;
        cfg.top_k = 1;
        let m = MoEModel::init(&cfg).unwrap();
        let c = gen_data(
            &DataSpec {
                corpus_len: 20_000,
                ..DataSpec::default()
            },
            cfg.seq_len,
        )
        .unwrap();
        (m, eval_batches(c.eval(), cfg.seq_len, 16, cfg.bos()))
    }

    #[test]
    fn conversion_with_top1_is_exact() {
        let (model, ev) = dense();
        let base = eval_loss(&model, &ev).unwrap();
        for e in [1, 8] {
            let moe = sparse_upcycle(&model, e, 1, &mut Rng::new(3)).unwrap();
            assert_eq!(moe.config.moe_blocks(), 3);
            assert_eq!(eval_loss(&moe, &ev).unwrap().to_bits(), base.to_bits());
        }
        let moe = sparse_upcycle(&model, 8, 2, &mut Rng::new(3)).unwrap();
        assert!((eval_loss(&moe, &ev).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn rejects_shape_mismatch() {
        let (mut model, _) = dense();
        model.config.expert_ffn_dim = 16;
        assert!(sparse_upcycle(&model, 4, 2, &mut Rng::new(0)).is_err());
        let moe = MoEModel::init(&ModelConfig::reference()).unwrap();
        assert!(sparse_upcycle(&moe, 8, 2, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn optimizer_state_converts() {
        let (model, _) = dense();
        let mut opt = OptState::new(&model.params);
        if let Ffn::Dense(w) = &mut opt.v.blocks[1].ffn {
            w.w1.fill(0.125);
        }
        let moe = sparse_upcycle(&model, 4, 2, &mut Rng::new(0)).unwrap();
        let o = sparse_opt_state(&opt, &model, &moe).unwrap();
        let l = o.v.moe_layers().next().unwrap();
        assert!(l.experts.iter().all(|e| e.w1.as_slice().iter().all(|&x| x == 0.125)));
        assert!(l.router.as_slice().iter().all(|&x| x == 0.0));
    }
}
