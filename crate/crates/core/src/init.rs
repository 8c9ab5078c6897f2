//! Weight initialization.

use crate::error::{invalid, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// He/Kaiming normal initialization: i.i.d. `N(0, 2 / cols)` entries, with
/// `cols` as the fan-in.
pub fn kaiming_init(rows: usize, cols: usize, rng: &mut Rng) -> Result<Tensor> {
    if rows == 0 || cols == 0 {
        return Err(invalid(format!("kaiming_init needs nonzero dims, got {rows}x{cols}")));
    }
    let std = (2.0 / cols as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.normal() * std).collect();
    Tensor::matrix(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_var(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var)
    }

    #[test]
    fn zero_dimension_rejected() {
        let mut rng = Rng::new(0, 0);
        assert!(kaiming_init(0, 3, &mut rng).is_err());
        assert!(kaiming_init(3, 0, &mut rng).is_err());
    }

    #[test]
    fn single_draw_reproducible() {
        let a = kaiming_init(1, 1, &mut Rng::new(5, 1)).unwrap();
        let b = kaiming_init(1, 1, &mut Rng::new(5, 1)).unwrap();
        assert!(a.item().is_finite());
        assert_eq!(a.item().to_bits(), b.item().to_bits());
    }

    #[test]
    fn variance_tall_matrix() {
        let w = kaiming_init(4096, 128, &mut Rng::new(17, 0)).unwrap();
        let (_, var) = mean_var(w.data());
        let target = 2.0 / 128.0;
        assert!((var - target).abs() / target < 0.05, "var {var}");
    }

    #[test]
    fn mean_square_matrix() {
        let w = kaiming_init(1000, 1000, &mut Rng::new(23, 0)).unwrap();
        let (mean, _) = mean_var(w.data());
        // 4 standard errors of the mean of 10⁶ draws with variance 2/1000
        let bound = 4.0 * (2.0f64 / 1000.0).sqrt() / 1000.0;
        assert!(mean.abs() < bound, "mean {mean} bound {bound}");
    }
}
