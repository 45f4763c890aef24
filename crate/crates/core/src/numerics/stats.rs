use crate::error::{invalid, Result};

/// Ranks starting at 1, ties resolved to the average of the tied positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]).then(a.cmp(&b)));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        // positions i..=j (0-based) share rank mean(i+1..=j+1)
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return invalid(format!("length mismatch: {} vs {}", xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return invalid("need at least two observations");
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return invalid("correlation undefined for a constant sequence");
    }
    Ok((sxy / libm::sqrt(sxx * syy)).clamp(-1.0, 1.0))
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return invalid(format!("length mismatch: {} vs {}", xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return invalid("spearman needs at least two observations");
    }
    pearson(&average_ranks(xs), &average_ranks(ys))
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n − 1 denominator); 0 for fewer than two values.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    libm::sqrt(ss / (xs.len() - 1) as f64)
}

/// One-sided paired sign-flip permutation p-value for `mean(a - b) > 0`.
///
/// Enumerates all 2^n sign assignments for n ≤ 16.
pub fn paired_permutation_p(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return invalid("paired test needs equal non-empty samples");
    }
    if a.len() > 16 {
        return invalid("exact permutation test limited to 16 pairs");
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let observed: f64 = diffs.iter().sum();
    let n = diffs.len();
    let mut at_least = 0u64;
    for mask in 0u64..(1 << n) {
        let s: f64 = diffs
            .iter()
            .enumerate()
            .map(|(i, d)| if mask >> i & 1 == 1 { -d } else { *d })
            .sum();
        if s >= observed - 1e-12 {
            at_least += 1;
        }
    }
    Ok(at_least as f64 / (1u64 << n) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1., 2., 3.], &[10., 20., 30.]).unwrap(), 1.0);
        assert_eq!(spearman(&[1., 2., 3.], &[30., 20., 10.]).unwrap(), -1.0);
        let rho = spearman(&[1., 2., 3., 4.], &[2., 1., 4., 3.]).unwrap();
        assert!((rho - 0.6).abs() < 1e-12, "{rho}");
    }

    #[test]
    fn spearman_errors() {
        assert!(spearman(&[1.0], &[1.0]).is_err());
        assert!(spearman(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn ties_get_average_ranks() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        // duplicated observations keep the correlation defined
        let x = [1.0, 1.0, 2.0, 2.0, 3.0, 3.0];
        let y = [5.0, 5.0, 6.0, 6.0, 9.0, 9.0];
        assert!((spearman(&x, &y).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn permutation_p_value() {
        // all differences positive: only the identity assignment reaches the observed sum
        let p = paired_permutation_p(&[2.0, 3.0, 4.0], &[1.0, 1.0, 1.0]).unwrap();
        assert!((p - 1.0 / 8.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn invariant_under_monotone_transform(
            xs in prop::collection::vec(-100.0f64..100.0, 2..30),
            seed in any::<u64>(),
        ) {
            let mut r = Rng::new(seed);
            let ys: Vec<f64> = xs.iter().map(|_| r.uniform()).collect();
            if let Ok(base) = spearman(&xs, &ys) {
                let tx: Vec<f64> = xs.iter().map(|x| x * x * x + 3.0 * x).collect();
                let ty: Vec<f64> = ys.iter().map(|y| libm::exp(*y)).collect();
                let t = spearman(&tx, &ty).unwrap();
                prop_assert!((base - t).abs() < 1e-12);
                prop_assert!((-1.0..=1.0).contains(&t));
            }
        }
    }
}
