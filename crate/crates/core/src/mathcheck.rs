//! Closed forms and Monte-Carlo checks for the distributional facts behind
//! the bounds: scaled-chi moments, Gamma-ratio limits, chi-square
//! expectations and norm concentration of Gaussian matrices.

use std::fmt::Write as _;

use serde::Serialize;
use statrs::function::gamma::ln_gamma;

use crate::error::{invalid, Result};
use crate::rng::Rng;
use crate::stats::{mean, median, quantile_sorted, std_dev};
use crate::tensor::Tensor;

pub const COHERENCE_PAIRS: usize = 100;

/// Below this both arguments go through `ln_gamma` directly.
const STIRLING_MIN: f64 = 10.0;

/// Stirling correction `lnΓ(z) − [(z−½)ln z − z + ½ln 2π]`.
fn stirling_tail(z: f64) -> f64 {
    let z2 = z * z;
    (1.0 / 12.0 - (1.0 / 360.0 - (1.0 / 1260.0 - 1.0 / (1680.0 * z2)) / z2) / z2) / z
}

/// `lnΓ(a) − lnΓ(b)`, accurate even when both are huge and close.
pub fn ln_gamma_ratio(a: f64, b: f64) -> f64 {
    if a.min(b) < STIRLING_MIN {
        return ln_gamma(a) - ln_gamma(b);
    }
    let d = a - b;
    (a - 0.5) * (d / b).ln_1p() + d * b.ln() - d + stirling_tail(a) - stirling_tail(b)
}

fn check_chi_args(k: usize, sigma: f64) -> Result<()> {
    if k == 0 {
        return Err(invalid("degrees of freedom k must be >= 1"));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(invalid(format!("sigma must be positive, got {sigma}")));
    }
    Ok(())
}

/// `E‖X‖^j` for `X ~ N(0, σ²I_k)`: `2^{j/2}σ^j Γ((k+j)/2)/Γ(k/2)`.
pub fn scaled_chi_moment(k: usize, sigma: f64, j: usize) -> Result<f64> {
    check_chi_args(k, sigma)?;
    if j == 0 {
        return Err(invalid("moment order j must be >= 1"));
    }
    let (k, j) = (k as f64, j as f64);
    Ok((0.5 * j * std::f64::consts::LN_2 + j * sigma.ln() + ln_gamma_ratio((k + j) / 2.0, k / 2.0)).exp())
}

/// `Var‖X‖ = 2σ²[Γ(k/2+1)/Γ(k/2) − (Γ((k+1)/2)/Γ(k/2))²]`.
pub fn scaled_chi_variance(k: usize, sigma: f64) -> Result<f64> {
    check_chi_args(k, sigma)?;
    let kf = k as f64;
    let r = ln_gamma_ratio((kf + 1.0) / 2.0, kf / 2.0).exp();
    // Γ(k/2 + 1)/Γ(k/2) = k/2 exactly.
    Ok(2.0 * sigma * sigma * (kf / 2.0 - r * r))
}

/// `([Γ((x+1)/2)/Γ(x/2)]²/x, Γ(x/2+1)/Γ(x/2) − [Γ((x+1)/2)/Γ(x/2)]²)`;
/// the limits are `(1/2, 1/4)`.
pub fn gamma_ratio_limits(x: f64) -> Result<(f64, f64)> {
    if !(x >= 4.0 && x.is_finite()) {
        return Err(invalid(format!("gamma_ratio_limits needs x >= 4, got {x}")));
    }
    let r2 = (2.0 * ln_gamma_ratio((x + 1.0) / 2.0, x / 2.0)).exp();
    Ok((r2 / x, x / 2.0 - r2))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MomentCheck {
    pub name: String,
    pub analytic: f64,
    pub empirical: f64,
    pub samples: usize,
    pub rel_err: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl MomentCheck {
    pub fn new(name: impl Into<String>, analytic: f64, empirical: f64, samples: usize, tolerance: f64, seed: u64) -> Self {
        Self {
            name: name.into(),
            analytic,
            empirical,
            samples,
            rel_err: (empirical - analytic).abs() / analytic.abs().max(1e-30),
            tolerance,
            seed,
        }
    }

    pub fn passed(&self) -> bool {
        self.rel_err <= self.tolerance
    }
}

pub fn moment_checks_csv(checks: &[MomentCheck]) -> String {
    let mut s = String::from("name,analytic,empirical,samples,rel_err,pass\n");
    for c in checks {
        let _ = writeln!(
            s,
            "{},{:e},{:e},{},{:e},{}",
            c.name,
            c.analytic,
            c.empirical,
            c.samples,
            c.rel_err,
            c.passed()
        );
    }
    s
}

fn check_samples(samples: usize) -> Result<()> {
    if samples < 1000 {
        return Err(invalid("Monte-Carlo checks need samples >= 1000"));
    }
    Ok(())
}

fn chi_draws(k: usize, sigma: f64, samples: usize, rng: &mut Rng) -> Vec<f64> {
    (0..samples)
        .map(|_| (0..k).map(|_| (sigma * rng.normal()).powi(2)).sum::<f64>().sqrt())
        .collect()
}

/// Monte-Carlo mean of `‖N(0, σ²I_k)‖` against the closed form.
pub fn scaled_chi_mean_check(k: usize, sigma: f64, samples: usize, tolerance: f64, rng: &mut Rng) -> Result<MomentCheck> {
    check_samples(samples)?;
    let analytic = scaled_chi_moment(k, sigma, 1)?;
    let seed = rng.seed();
    let draws = chi_draws(k, sigma, samples, rng);
    Ok(MomentCheck::new(format!("scaled_chi_mean_k{k}"), analytic, mean(&draws), samples, tolerance, seed))
}

/// Monte-Carlo variance of `‖N(0, σ²I_k)‖` against the closed form.
pub fn scaled_chi_variance_check(
    k: usize,
    sigma: f64,
    samples: usize,
    tolerance: f64,
    rng: &mut Rng,
) -> Result<MomentCheck> {
    check_samples(samples)?;
    let analytic = scaled_chi_variance(k, sigma)?;
    let seed = rng.seed();
    let draws = chi_draws(k, sigma, samples, rng);
    let n = samples as f64;
    let var = std_dev(&draws).powi(2) * n / (n - 1.0);
    Ok(MomentCheck::new(format!("scaled_chi_variance_k{k}"), analytic, var, samples, tolerance, seed))
}

/// Empirical `E Σx_i²` for `x_i ~ N(μ, σ²)` against `σ²N + μ²N`.
pub fn chi_square_expectation_check(
    n: usize,
    mu: f64,
    sigma: f64,
    samples: usize,
    rng: &mut Rng,
) -> Result<MomentCheck> {
    check_samples(samples)?;
    if n == 0 || !(sigma >= 0.0) {
        return Err(invalid("need N >= 1 and sigma >= 0"));
    }
    let analytic = sigma * sigma * n as f64 + mu * mu * n as f64;
    let seed = rng.seed();
    let draws: Vec<f64> = (0..samples)
        .map(|_| (0..n).map(|_| (mu + sigma * rng.normal()).powi(2)).sum())
        .collect();
    Ok(MomentCheck::new(
        format!("chi_square_N{n}"),
        analytic,
        mean(&draws),
        samples,
        0.01,
        seed,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MatrixNormReport {
    pub m: usize,
    pub c: f64,
    /// Coefficient of variation (std/mean) of the column norms.
    pub column_norm_spread: f64,
    /// Max `|⟨v_i, v_j⟩|/(‖v_i‖‖v_j‖)` over sampled column pairs.
    pub max_offdiag_coherence: f64,
    pub ratio_median: f64,
    pub ratio_q03: f64,
    pub ratio_q97: f64,
    pub probes: usize,
}

impl MatrixNormReport {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{}\n",
            self.m,
            self.c,
            self.column_norm_spread,
            self.max_offdiag_coherence,
            self.ratio_median,
            self.ratio_q03,
            self.ratio_q97,
            self.probes
        )
    }

    pub const CSV_HEADER: &'static str =
        "m,c,column_norm_spread,max_offdiag_coherence,ratio_median,ratio_q03,ratio_q97,probes\n";
}

/// Draws `W` with i.i.d. `N(0, c²)` entries and measures column-norm spread,
/// column coherence over [`COHERENCE_PAIRS`] random pairs, and the spread of
/// `‖Ws‖/‖s‖` over Gaussian probes `s`.
pub fn random_matrix_norm_check(m: usize, c: f64, probes: usize, rng: &mut Rng) -> Result<MatrixNormReport> {
    if m < 16 {
        return Err(invalid("random_matrix_norm_check needs m >= 16"));
    }
    if probes == 0 || !(c >= 0.0 && c.is_finite()) {
        return Err(invalid("need probes >= 1 and finite c >= 0"));
    }
    let w = Tensor::matrix(m, m, (0..m * m).map(|_| c * rng.normal()).collect())?;
    let wt = w.transpose();
    let cols: Vec<&[f64]> = (0..m).map(|j| &wt.data()[j * m..(j + 1) * m]).collect();
    let norms: Vec<f64> = cols.iter().map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mu = mean(&norms);
    let spread = if mu > 0.0 { std_dev(&norms) / mu } else { 0.0 };

    let mut coherence = 0.0f64;
    for _ in 0..COHERENCE_PAIRS {
        let i = rng.int_inclusive(0, m - 1);
        let mut j = rng.int_inclusive(0, m - 2);
        if j >= i {
            j += 1;
        }
        let denom = norms[i] * norms[j];
        if denom > 0.0 {
            let dot: f64 = cols[i].iter().zip(cols[j]).map(|(a, b)| a * b).sum();
            coherence = coherence.max(dot.abs() / denom);
        }
    }

    let mut ratios: Vec<f64> = (0..probes)
        .map(|_| {
            let s = Tensor::vector(rng.normal_vec(m));
            let ws = w.matmul(&s).expect("square");
            ws.norm() / s.norm()
        })
        .collect();
    ratios.sort_by(f64::total_cmp);
    Ok(MatrixNormReport {
        m,
        c,
        column_norm_spread: spread,
        max_offdiag_coherence: coherence,
        ratio_median: median(&ratios),
        ratio_q03: quantile_sorted(&ratios, 0.03),
        ratio_q97: quantile_sorted(&ratios, 0.97),
        probes,
    })
}

/// [`random_matrix_norm_check`] at `c = 1/√m` for each size, showing the
/// decay of spread and coherence with `m`.
pub fn coherence_decay(sizes: &[usize], probes: usize, rng: &mut Rng) -> Result<Vec<MatrixNormReport>> {
    sizes
        .iter()
        .map(|&m| random_matrix_norm_check(m, 1.0 / (m as f64).sqrt(), probes, rng))
        .collect()
}
