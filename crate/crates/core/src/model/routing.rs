//! Top-K expert selection and loss-free load balancing.

use super::params::MoeLayer;
use crate::numerics::matrix::dot_col;

/// Experts chosen for one token, best first, with their gate weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Route {
    pub experts: Vec<usize>,
    pub gates: Vec<f64>,
}

/// Selects the top `k` experts by `raw + bias` into `idx`, then writes the
/// softmax of the selected *raw* scores into `gates`.
///
/// Ties go to the lower expert id.
pub fn select_topk(raw: &[f64], bias: &[f64], idx: &mut [usize], gates: &mut [f64]) {
    let k = idx.len();
    debug_assert!(k >= 1 && k <= raw.len());
    let mut best = [f64::NEG_INFINITY; 64];
    let best = &mut best[..k.min(64)];
    let mut filled = 0;
    if k > 64 {
        // wide selections fall back to a full sort
        let mut order: Vec<usize> = (0..raw.len()).collect();
        order.sort_by(|&a, &b| (raw[b] + bias[b]).total_cmp(&(raw[a] + bias[a])).then(a.cmp(&b)));
        idx.copy_from_slice(&order[..k]);
    } else {
        for e in 0..raw.len() {
            let s = raw[e] + bias[e];
            let mut pos = filled;
            while pos > 0 && s > best[pos - 1] {
                pos -= 1;
            }
            if pos >= k {
                continue;
            }
            let end = filled.min(k - 1);
            for j in (pos..end).rev() {
                best[j + 1] = best[j];
                idx[j + 1] = idx[j];
            }
            best[pos] = s;
            idx[pos] = e;
            filled = (filled + 1).min(k);
        }
    }
    let max = idx.iter().map(|&e| raw[e]).fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (g, &e) in gates.iter_mut().zip(idx.iter()) {
        *g = libm::exp(raw[e] - max);
        sum += *g;
    }
    gates.iter_mut().for_each(|g| *g /= sum);
}

/// Routes a normalized hidden state `h` through `layer`'s router.
pub fn route_topk(h: &[f64], layer: &MoeLayer, k: usize) -> Route {
    let e_count = layer.num_experts();
    let raw: Vec<f64> = (0..e_count).map(|e| dot_col(h, &layer.router, e)).collect();
    route_scores(&raw, layer.select_bias.as_slice(), k)
}

pub fn route_scores(raw: &[f64], bias: &[f64], k: usize) -> Route {
    let mut experts = vec![0; k];
    let mut gates = vec![0.0; k];
    select_topk(raw, bias, &mut experts, &mut gates);
    Route { experts, gates }
}

/// Loss-free balancing: `bias_e += u · sign(mean_load − load_e)`.
pub fn balance_update(layer: &mut MoeLayer, loads: &[usize], rate: f64) {
    debug_assert_eq!(loads.len(), layer.num_experts());
    if rate == 0.0 || loads.is_empty() {
        return;
    }
    let mean = loads.iter().sum::<usize>() as f64 / loads.len() as f64;
    for (b, &l) in layer.select_bias.as_mut_slice().iter_mut().zip(loads) {
        let diff = mean - l as f64;
        if diff > 0.0 {
            *b += rate;
        } else if diff < 0.0 {
            *b -= rate;
        }
    }
}
