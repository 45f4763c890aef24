use super::heuristics::{heuristic_expert_init, heuristic_router_init, HeuristicSpec};
use super::plan::ReplicationPlan;
use crate::error::{invalid, Result};
use crate::model::{FfnWeights, MoEModel, MoeLayer, OptState, Params};
use crate::numerics::{Matrix, Rng};

/// Grows every MoE block from `E` to `m·E` experts.
///
/// Originals keep their slots and parameters. Extra copies of expert `e`
/// are appended after the originals, pass through the expert and router
/// initializers of `spec`, and get the original's selection bias plus
/// independent `U(-delta, delta)` noise. Non-expert parameters are copied
/// unchanged.
pub fn upcycle(
    model: &MoEModel,
    plan: &ReplicationPlan,
    spec: &HeuristicSpec,
    delta: f64,
    rng: &mut Rng,
) -> Result<MoEModel> {
    let e = model.config.experts;
    plan.validate(model.config.moe_blocks(), e)?;
    spec.validate()?;
    if !(delta >= 0.0 && delta.is_finite()) {
        return invalid(format!("bias noise delta must be non-negative, got {delta}"));
    }
    let mut out = model.clone();
    out.config.experts = plan.m * e;
    for (layer, counts) in out.params.moe_layers_mut().zip(&plan.counts) {
        *layer = grow_layer(layer, counts, spec, delta, rng)?;
    }
    out.validate()?;
    Ok(out)
}

fn grow_layer(src: &MoeLayer, counts: &[usize], spec: &HeuristicSpec, delta: f64, rng: &mut Rng) -> Result<MoeLayer> {
    let e = src.num_experts();
    let total: usize = counts.iter().sum();
    let d = src.router.rows();
    let mut experts: Vec<FfnWeights> = src.experts.clone();
    let mut router = Matrix::zeros(d, total);
    let mut bias = Matrix::zeros(1, total);
    for s in 0..e {
        router.set_col(s, &src.router.col(s));
        bias.set(0, s, src.select_bias.get(0, s));
    }
    let mut slot = e;
    for s in 0..e {
        let next = (s + 1) % e;
        let column = src.router.col(s);
        let neighbor_col = src.router.col(next);
        let mut copies: Vec<FfnWeights> = vec![src.experts[s].clone()];
        for _ in 1..counts[s] {
            let siblings: Vec<&FfnWeights> = copies.iter().collect();
            let w = heuristic_expert_init(&src.experts[s], &spec.expert, rng, &src.experts[next], &siblings)?;
            let col = heuristic_router_init(&column, &spec.router, rng, &neighbor_col)?;
            let noise = if delta > 0.0 {
                rng.uniform_range(-delta, delta)
            } else {
                0.0
            };
            router.set_col(slot, &col);
            bias.set(0, slot, src.select_bias.get(0, s) + noise);
            copies.push(w.clone());
            experts.push(w);
            slot += 1;
        }
    }
    Ok(MoeLayer {
        router,
        select_bias: bias,
        experts,
    })
}

/// Copies a layer's per-expert tensors into the expanded slot layout.
pub(crate) fn replicate_layer(src: &MoeLayer, counts: &[usize]) -> MoeLayer {
    let e = src.num_experts();
    let total: usize = counts.iter().sum();
    let mut router = Matrix::zeros(src.router.rows(), total);
    let mut bias = Matrix::zeros(1, total);
    let mut experts = src.experts.clone();
    for s in 0..e {
        router.set_col(s, &src.router.col(s));
        bias.set(0, s, src.select_bias.get(0, s));
    }
    let mut slot = e;
    for s in 0..e {
        for _ in 1..counts[s] {
            router.set_col(slot, &src.router.col(s));
            bias.set(0, slot, src.select_bias.get(0, s));
            experts.push(src.experts[s].clone());
            slot += 1;
        }
    }
    MoeLayer {
        router,
        select_bias: bias,
        experts,
    }
}

fn replicate_params(p: &Params, plan: &ReplicationPlan) -> Params {
    let mut out = p.clone();
    for (layer, counts) in out.moe_layers_mut().zip(&plan.counts) {
        *layer = replicate_layer(layer, counts);
    }
    out
}

/// Optimizer state for an upcycled model: every replica inherits the
/// moments of its source expert and router column; the step is kept.
pub fn expand_opt_state(opt: &OptState, plan: &ReplicationPlan) -> Result<OptState> {
    let layers = opt.m.moe_layers().count();
    let e = opt.m.moe_layers().next().map_or(0, |l| l.num_experts());
    plan.validate(layers, e)?;
    let mut out = opt.clone();
    out.m = replicate_params(&opt.m, plan);
    out.v = replicate_params(&opt.v, plan);
    Ok(out)
}

/// Mean pairwise L2 distance between replicas of the same source expert,
/// over expert weights and router columns, pooled across layers.
pub fn replica_divergence(model: &MoEModel, groups: &[Vec<Vec<usize>>]) -> f64 {
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for (layer, layer_groups) in model.params.moe_layers().zip(groups) {
        for g in layer_groups {
            for (i, &a) in g.iter().enumerate() {
                for &b in &g[i + 1..] {
                    sum += libm::sqrt(replica_distance_sq(layer, a, b));
                    pairs += 1;
                }
            }
        }
    }
    if pairs == 0 {
        0.0
    } else {
        sum / pairs as f64
    }
}

fn replica_distance_sq(layer: &MoeLayer, a: usize, b: usize) -> f64 {
    let (x, y) = (&layer.experts[a], &layer.experts[b]);
    let mut s = 0.0;
    for (p, q) in
        x.w1.as_slice()
            .iter()
            .chain(x.w2.as_slice())
            .zip(y.w1.as_slice().iter().chain(y.w2.as_slice()))
    {
        s += (p - q) * (p - q);
    }
    for r in 0..layer.router.rows() {
        let diff = layer.router.get(r, a) - layer.router.get(r, b);
        s += diff * diff;
    }
    s
}

/// Mean pairwise L1 distance between the routing-load vectors of replicas,
/// where a replica's load vector is its per-step token counts.
pub fn replica_load_distance(load_history: &[Vec<Vec<usize>>], groups: &[Vec<Vec<usize>>]) -> f64 {
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for (l, layer_groups) in groups.iter().enumerate() {
        for g in layer_groups {
            for (i, &a) in g.iter().enumerate() {
                for &b in &g[i + 1..] {
                    let d: usize = load_history.iter().map(|step| step[l][a].abs_diff(step[l][b])).sum();
                    sum += d as f64;
                    pairs += 1;
                }
            }
        }
    }
    if pairs == 0 {
        0.0
    } else {
        sum / pairs as f64
    }
}

/// Whether every replica group is bitwise identical in weights, router
/// column and selection bias.
pub fn replicas_identical(model: &MoEModel, groups: &[Vec<Vec<usize>>]) -> bool {
    model.params.moe_layers().zip(groups).all(|(layer, gs)| {
        gs.iter().all(|g| {
            g.iter().all(|&s| {
                layer.experts[s].bitwise_eq(&layer.experts[g[0]])
                    && layer.select_bias.get(0, s).to_bits() == layer.select_bias.get(0, g[0]).to_bits()
                    && (0..layer.router.rows())
                        .all(|r| layer.router.get(r, s).to_bits() == layer.router.get(r, g[0]).to_bits())
            })
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::data::{eval_batches, gen_data, DataSpec};
    use crate::model::{count_flops, eval_loss, forward, ModelConfig};
    use crate::upcycle::{ExpertInit, RouterInit};

    fn model_and_eval() -> (MoEModel, Vec<crate::model::Batch>) {
        model_with_k(2)
    }

    fn model_with_k(k: usize) -> (MoEModel, Vec<crate::model::Batch>) {
        let mut cfg = ModelConfig::reference();
        cfg.experts = 4;
        cfg.top_k = k;
        cfg.seed = 5;
        let model = MoEModel::init(&cfg).unwrap();
        let spec = DataSpec {
            corpus_len: 20_000,
            ..DataSpec::default()
        };
        let c = gen_data(&spec, cfg.seq_len).unwrap();
        (model, eval_batches(c.eval(), cfg.seq_len, 16, cfg.bos()))
    }

    #[test]
    fn pure_copy_without_noise_is_exact_for_top1() {
        let (model, ev) = model_with_k(1);
        let plan = ReplicationPlan::uniform(3, 4, 2).unwrap();
        let up = upcycle(&model, &plan, &HeuristicSpec::copy(), 0.0, &mut Rng::new(1)).unwrap();
        assert_eq!(up.config.experts, 8);
        assert!(replicas_identical(&up, &plan.groups()));
        let a = eval_loss(&model, &ev).unwrap();
        let b = eval_loss(&up, &ev).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn pure_copy_top2_coselects_twins() {
        // both copies of the best expert tie for the top two slots
        let (model, ev) = model_and_eval();
        let plan = ReplicationPlan::uniform(3, 4, 2).unwrap();
        let up = upcycle(&model, &plan, &HeuristicSpec::copy(), 0.0, &mut Rng::new(1)).unwrap();
        let (_, cache) = forward(&up, &ev[0]).unwrap();
        for sel in cache.selections() {
            for pair in sel.chunks(2) {
                assert_eq!(pair[1], pair[0] + 4);
            }
        }
    }

    #[test]
    fn originals_and_dense_parts_untouched() {
        let (model, _) = model_and_eval();
        let plan = ReplicationPlan::manual(vec![vec![3, 1, 2, 2]; 3], 2).unwrap();
        let spec = HeuristicSpec {
            expert: ExpertInit::Noise { lambda: 0.05 },
            router: RouterInit::Noise { sigma: 0.1 },
        };
        let up = upcycle(&model, &plan, &spec, 0.01, &mut Rng::new(2)).unwrap();
        assert!(up.params.tok_emb.bitwise_eq(&model.params.tok_emb));
        assert!(up.params.out.bitwise_eq(&model.params.out));
        for (a, b) in model.params.moe_layers().zip(up.params.moe_layers()) {
            for e in 0..4 {
                assert!(a.experts[e].bitwise_eq(&b.experts[e]));
                assert_eq!(a.router.col(e), b.router.col(e));
                assert_eq!(a.select_bias.get(0, e), b.select_bias.get(0, e));
            }
            // extras of expert 0 sit in slots 4 and 5
            for s in [4, 5] {
                let noise = b.select_bias.get(0, s) - a.select_bias.get(0, 0);
                assert!(noise.abs() < 0.01 && noise != 0.0);
            }
            let total: usize = b.experts.iter().map(|w| w.w1.len() + w.w2.len()).sum();
            let before: usize = a.experts.iter().map(|w| w.w1.len() + w.w2.len()).sum();
            assert_eq!(total, 2 * before);
        }
    }

    #[test]
    fn active_compute_is_unchanged() {
        let (model, ev) = model_and_eval();
        let plan = ReplicationPlan::uniform(3, 4, 2).unwrap();
        let up = upcycle(&model, &plan, &HeuristicSpec::copy(), 0.01, &mut Rng::new(3)).unwrap();
        let (_, c0) = forward(&model, &ev[0]).unwrap();
        let (_, c1) = forward(&up, &ev[0]).unwrap();
        assert_eq!(count_flops(&model, &c0).active, count_flops(&up, &c1).active);
        assert_eq!(c0.expert_activations(), c1.expert_activations());
        assert_eq!(model.config.active_params(), up.config.active_params());
        assert_eq!(2 * model.config.expert_params(), up.config.expert_params());
    }

    #[test]
    fn heuristic_identities_match_copy_bitwise() {
        let (model, ev) = model_and_eval();
        let plan = ReplicationPlan::uniform(3, 4, 2).unwrap();
        let base = upcycle(&model, &plan, &HeuristicSpec::copy(), 0.01, &mut Rng::new(4)).unwrap();
        let l0 = eval_loss(&base, &ev).unwrap();
        for spec in [
            HeuristicSpec::expert(ExpertInit::Scaled { s: 1.0 }),
            HeuristicSpec {
                expert: ExpertInit::Copy,
                router: RouterInit::Temperature { temp: 1.0 },
            },
            HeuristicSpec {
                expert: ExpertInit::Copy,
                router: RouterInit::BiasOnly,
            },
        ] {
            let m = upcycle(&model, &plan, &spec, 0.01, &mut Rng::new(4)).unwrap();
            assert_eq!(eval_loss(&m, &ev).unwrap().to_bits(), l0.to_bits(), "{spec:?}");
        }
        // interpolation between identical neighbors is a fixed point
        let mut twins = model.clone();
        for l in twins.params.moe_layers_mut() {
            let w = l.experts[0].clone();
            l.experts.iter_mut().for_each(|x| *x = w.clone());
        }
        let a = upcycle(&twins, &plan, &HeuristicSpec::copy(), 0.01, &mut Rng::new(4)).unwrap();
        let b = upcycle(
            &twins,
            &plan,
            &HeuristicSpec::expert(ExpertInit::Interpolate { alpha: 0.5 }),
            0.01,
            &mut Rng::new(4),
        )
        .unwrap();
        assert_eq!(
            eval_loss(&a, &ev).unwrap().to_bits(),
            eval_loss(&b, &ev).unwrap().to_bits()
        );
    }

    #[test]
    fn rejects_mismatched_plan() {
        let (model, _) = model_and_eval();
        let plan = ReplicationPlan::uniform(3, 5, 2).unwrap();
        assert!(upcycle(&model, &plan, &HeuristicSpec::copy(), 0.01, &mut Rng::new(0)).is_err());
        let plan = ReplicationPlan::uniform(2, 4, 2).unwrap();
        assert!(upcycle(&model, &plan, &HeuristicSpec::copy(), 0.01, &mut Rng::new(0)).is_err());
        let plan = ReplicationPlan::uniform(3, 4, 2).unwrap();
        assert!(upcycle(&model, &plan, &HeuristicSpec::copy(), -1.0, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn optimizer_moments_follow_replicas() {
        let (model, _) = model_and_eval();
        let mut opt = OptState::new(&model.params);
        for l in opt.v.moe_layers_mut() {
            l.experts[1].w1.fill(0.5);
            l.router.set_col(1, &vec![0.25; l.router.rows()]);
        }
        opt.step = 17;
        let plan = ReplicationPlan::manual(vec![vec![1, 3, 2, 2]; 3], 2).unwrap();
        let up = upcycle(&model, &plan, &HeuristicSpec::copy(), 0.0, &mut Rng::new(0)).unwrap();
        let o2 = expand_opt_state(&opt, &plan).unwrap();
        assert!(o2.matches(&up.params));
        assert_eq!(o2.step, 17);
        let l = o2.v.moe_layers().next().unwrap();
        for s in [1, 4, 5] {
            assert!(l.experts[s].w1.as_slice().iter().all(|&x| x == 0.5));
            assert!(l.router.col(s).iter().all(|&x| x == 0.25));
        }
    }
}
