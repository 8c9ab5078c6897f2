//! Norm estimates used by the robustness checks.

use crate::rng::Rng;
use crate::tensor::Tensor;

pub const DEFAULT_POWER_ITERS: usize = 30;
pub const POWER_TOL: f64 = 1e-9;

/// Largest singular value of `w` by power iteration on `WᵀW`.
///
/// Runs at most `iters` rounds and stops early once successive estimates
/// agree to [`POWER_TOL`] (relative). The running estimate is the maximum
/// seen so far, so it never decreases with more iterations.
pub fn spectral_norm(w: &Tensor, iters: usize, rng: &mut Rng) -> f64 {
    let (m, n) = (w.rows(), w.cols());
    let a = w.data();
    let mut v = rng.normal_vec(n);
    normalize(&mut v);
    let mut u = vec![0.0; m];
    let mut best = 0.0f64;
    for _ in 0..iters.max(1) {
        for (i, ui) in u.iter_mut().enumerate() {
            *ui = a[i * n..(i + 1) * n].iter().zip(&v).map(|(x, y)| x * y).sum();
        }
        let sigma = l2(&u);
        let prev = best;
        best = best.max(sigma);
        if sigma == 0.0 {
            break;
        }
        v.fill(0.0);
        for (i, &ui) in u.iter().enumerate() {
            for (vj, &aij) in v.iter_mut().zip(&a[i * n..(i + 1) * n]) {
                *vj += aij * ui;
            }
        }
        normalize(&mut v);
        if prev > 0.0 && (best - prev).abs() <= POWER_TOL * best {
            break;
        }
    }
    best
}

pub fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn normalize(v: &mut [f64]) -> f64 {
    let n = l2(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_matrix() {
        let w = Tensor::diag(&[3.0, 1.0, 0.5]);
        let s = spectral_norm(&w, 200, &mut Rng::new(0, 0));
        assert!((s - 3.0).abs() < 1e-6, "{s}");
    }

    #[test]
    fn identity_matrix() {
        let s = spectral_norm(&Tensor::identity(10), 30, &mut Rng::new(1, 0));
        assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_matrix() {
        assert_eq!(spectral_norm(&Tensor::zeros(&[4, 4]), 5, &mut Rng::new(1, 0)), 0.0);
    }

    #[test]
    fn more_iterations_never_lower() {
        let mut r = Rng::new(9, 0);
        let w = Tensor::matrix(6, 6, r.normal_vec(36)).unwrap();
        let mut last = 0.0;
        for iters in 1..40 {
            let s = spectral_norm(&w, iters, &mut Rng::new(4, 4));
            assert!(s + 1e-9 * s >= last);
            last = s;
        }
    }
}
