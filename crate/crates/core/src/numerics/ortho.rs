use super::matrix::{axpy, dot, norm};
use super::rng::Rng;
use crate::error::{invalid, Result};

/// Default residual threshold below which the output is resampled.
pub const GRAM_SCHMIDT_EPS: f64 = 1e-6;

/// Removes from `v` its projection onto each basis vector, in order.
///
/// The basis is orthonormalized on the fly (linearly dependent members are
/// skipped), so the result is orthogonal to the span of `basis`. When the residual norm drops below `eps` the result would be degenerate,
/// so a fresh random unit vector drawn from `rng` is returned instead.
pub fn gram_schmidt(v: &[f64], basis: &[Vec<f64>], eps: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    if eps <= 0.0 {
        return invalid("gram_schmidt eps must be positive");
    }
    if let Some(b) = basis.iter().find(|b| b.len() != v.len()) {
        return invalid(format!("basis vector length {} != vector length {}", b.len(), v.len()));
    }
    let mut ortho: Vec<Vec<f64>> = Vec::with_capacity(basis.len());
    for b in basis {
        let mut q = b.clone();
        for o in &ortho {
            let c = dot(&q, o);
            axpy(-c, o, &mut q);
        }
        let nq = norm(&q);
        if nq > 1e-12 * norm(b).max(1.0) {
            q.iter_mut().for_each(|x| *x /= nq);
            ortho.push(q);
        }
    }
    let mut r = v.to_vec();
    for q in &ortho {
        let c = dot(&r, q);
        axpy(-c, q, &mut r);
    }
    if norm(&r) < eps {
        return Ok(random_unit(v.len(), rng));
    }
    Ok(r)
}

pub fn random_unit(n: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let mut u: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let nu = norm(&u);
        if nu > 0.0 {
            u.iter_mut().for_each(|x| *x /= nu);
            return u;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        let mut rng = Rng::new(0);
        let out = gram_schmidt(&[1.0, 1.0], &[vec![1.0, 0.0]], 1e-6, &mut rng).unwrap();
        assert_eq!(out, vec![0.0, 1.0]);

        let out = gram_schmidt(
            &[1.0, 2.0, 3.0],
            &[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]],
            1e-6,
            &mut rng,
        )
        .unwrap();
        assert_eq!(out, vec![0.0, 0.0, 3.0]);
    }

    #[test]
    fn degenerate_gives_seeded_unit_vector() {
        let mut a = Rng::new(5);
        let mut b = Rng::new(5);
        let out = gram_schmidt(&[2.0, 0.0], &[vec![1.0, 0.0]], 1e-6, &mut a).unwrap();
        assert!((norm(&out) - 1.0).abs() < 1e-12);
        assert_eq!(out, random_unit(2, &mut b));
    }

    #[test]
    fn dimension_mismatch() {
        let mut rng = Rng::new(0);
        assert!(gram_schmidt(&[1.0, 2.0], &[vec![1.0]], 1e-6, &mut rng).is_err());
    }

    proptest! {
        #[test]
        fn output_is_orthogonal(
            v in prop::collection::vec(-5.0f64..5.0, 6),
            b1 in prop::collection::vec(-5.0f64..5.0, 6),
            b2 in prop::collection::vec(-5.0f64..5.0, 6),
        ) {
            let mut rng = Rng::new(1);
            let basis = vec![b1, b2];
            let out = gram_schmidt(&v, &basis, 1e-6, &mut rng).unwrap();
            prop_assume!(norm(&out) >= 1e-6 && norm(&v) > 1e-3);
            for b in &basis {
                let tol = 1e-6 * norm(&out) * norm(b) + 1e-9;
                prop_assert!(dot(&out, b).abs() < tol);
            }
        }
    }
}
