use expert_upcycling::harness::data::{gen_data, DataSpec, WindowSampler};
use expert_upcycling::harness::{run_fixed, ExperimentConfig};
use expert_upcycling::model::{forward, train_steps, Batch, MoEModel, ModelConfig, OptState, Schedule};
use expert_upcycling::numerics::Rng;

/// Frozen loss of one fixed batch through a fixed-seed model.
const GOLDEN_LOSS_BITS: u64 = 0x400b_c598_f114_1429;

fn golden_setup() -> (MoEModel, Batch) {
    let mut cfg = ModelConfig::reference();
    cfg.dim = 16;
    cfg.experts = 4;
    cfg.top_k = 2;
    cfg.seed = 1234;
    let model = MoEModel::init(&cfg).unwrap();
    let mut rng = Rng::new(99);
    let windows: Vec<Vec<u32>> = (0..4)
        .map(|_| (0..=cfg.seq_len).map(|_| rng.below(cfg.vocab) as u32).collect())
        .collect();
    (
        model,
        Batch::from_windows(windows.iter().map(|w| w.as_slice()), cfg.bos()),
    )
}

#[test]
fn golden_loss_is_pinned() {
    let (model, batch) = golden_setup();
    let (loss, _) = forward(&model, &batch).unwrap();
    println!("golden loss {loss:e} bits {:#x}", loss.to_bits());
    assert_eq!(loss.to_bits(), GOLDEN_LOSS_BITS, "loss {loss}");
}

#[test]
fn markov_frequencies_match_the_transition_tensor() {
    let spec = DataSpec {
        corpus_len: 1_000_000,
        ..DataSpec::default()
    };
    let corpus = gen_data(&spec, 32).unwrap();
    let t = &corpus.transitions;
    let v = t.vocab;
    let mut counts = vec![0u64; spec.contexts() * v];
    for w in corpus.tokens.windows(t.order + 1) {
        counts[t.context_of(&w[..t.order]) * v + w[t.order] as usize] += 1;
    }
    // total variation per context, weighted by how often the context occurs
    let mut weighted = 0.0;
    let mut seen = 0u64;
    for c in 0..spec.contexts() {
        let row = &counts[c * v..(c + 1) * v];
        let n: u64 = row.iter().sum();
        if n == 0 {
            continue;
        }
        let tv: f64 = row
            .iter()
            .zip(t.row(c))
            .map(|(&k, &p)| (k as f64 / n as f64 - p).abs())
            .sum::<f64>()
            / 2.0;
        weighted += tv * n as f64;
        seen += n;
    }
    let tv = weighted / seen as f64;
    assert!(tv < 0.05, "mean total variation {tv}");
}

#[test]
fn reference_training_drops_loss_by_half_a_nat() {
    let mut cfg = ExperimentConfig::reference().with_total(2000);
    cfg.tau = 1000;
    let run = run_fixed(&cfg, cfg.model.experts, 0).unwrap();
    let drop = run.metrics.init_loss - run.metrics.terminal_loss;
    assert!(drop >= 0.5, "loss dropped by {drop}");
}

/// Max/min expert load over the last 500 steps of an 800-step run.
fn window_load_spread(seed: u64, balance_rate: f64) -> f64 {
    let cfg = ExperimentConfig::reference();
    let mut model_cfg = cfg.model.clone();
    model_cfg.seed = seed;
    let corpus = gen_data(&cfg.data, model_cfg.seq_len).unwrap();
    let data = WindowSampler::new(
        corpus.pretrain(),
        model_cfg.seq_len,
        cfg.train.batch_seqs,
        seed,
        model_cfg.bos(),
    )
    .unwrap();
    let mut model = MoEModel::init(&model_cfg).unwrap();
    let mut opt = OptState::new(&model.params);
    let schedule = Schedule::new(cfg.train.warmup_steps, cfg.train.peak_lr, 800, 0.1).unwrap();
    let records = train_steps(&mut model, &mut opt, &data, &schedule, 800, balance_rate).unwrap();
    let mut worst = 1.0f64;
    for block in 0..model_cfg.moe_blocks() {
        let mut total = vec![0usize; model_cfg.experts];
        for r in &records[300..] {
            for (t, l) in total.iter_mut().zip(&r.loads[block]) {
                *t += l;
            }
        }
        let max = *total.iter().max().unwrap() as f64;
        let min = (*total.iter().min().unwrap()).max(1) as f64;
        worst = worst.max(max / min);
    }
    worst
}

#[test]
fn loss_free_balancing_evens_out_loads() {
    let seeds = [0, 1, 2];
    let with: f64 = seeds.iter().map(|&s| window_load_spread(s, 1e-3)).sum::<f64>() / 3.0;
    let without: f64 = seeds.iter().map(|&s| window_load_spread(s, 0.0)).sum::<f64>() / 3.0;
    println!("max/min load: balanced {with:.3}, unbalanced {without:.3}");
    assert!(with < without, "balanced {with} vs unbalanced {without}");
}
