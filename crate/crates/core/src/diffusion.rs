//! DDPM forward process, noise-prediction loss and synthetic data.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Noise schedule. Index `t - 1` holds the values for step `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    mean_alpha_bar: f64,
}

impl DiffusionSchedule {
    /// Linear β from `beta_start` to `beta_end`, endpoints inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(invalid("schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(invalid(format!(
                "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let beta = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(beta)
    }

    pub fn ddpm() -> Self {
        Self::linear(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule is valid")
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(invalid("empty beta sequence"));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(invalid(format!("beta {b} outside (0, 1)")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        Ok(Self::from_parts(beta, alpha))
    }

    /// Schedule with an explicit ᾱ sequence, bypassing the β ∈ (0, 1)
    /// contract. Used to express the zero-noise (ᾱ ≡ 1) and pure-noise
    /// (ᾱ ≡ 0) limits.
    pub fn degenerate(alpha_bar: f64, steps: usize) -> Self {
        let alpha_bar_seq = vec![alpha_bar; steps.max(1)];
        let mean_alpha_bar = alpha_bar;
        Self {
            beta: vec![1.0 - alpha_bar; steps.max(1)],
            alpha: vec![alpha_bar; steps.max(1)],
            alpha_bar: alpha_bar_seq,
            mean_alpha_bar,
        }
    }

    fn from_parts(beta: Vec<f64>, alpha: Vec<f64>) -> Self {
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let mean_alpha_bar = alpha_bar.iter().sum::<f64>() / alpha_bar.len() as f64;
        Self {
            beta,
            alpha,
            alpha_bar,
            mean_alpha_bar,
        }
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// ᾱ at step `t` (1-based).
    pub fn alpha_bar_at(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.alpha_bar[t - 1])
    }

    /// E_t ᾱ_t under uniform t.
    pub fn mean_alpha_bar(&self) -> f64 {
        self.mean_alpha_bar
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(invalid(format!("step {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    /// Uniform draw from `1..=T`.
    pub fn sample_step(&self, rng: &mut Rng) -> usize {
        rng.int_inclusive(1, self.steps())
    }

    /// Whitespace-separated table with columns `t beta alpha alpha_bar`.
    /// Values are printed in shortest round-trip form, so [`Self::from_table`]
    /// recovers them bit-exactly.
    pub fn to_table(&self) -> String {
        let mut out = String::from("# t beta alpha alpha_bar\n");
        for i in 0..self.steps() {
            let _ = writeln!(
                out,
                "{} {:?} {:?} {:?}",
                i + 1,
                self.beta[i],
                self.alpha[i],
                self.alpha_bar[i]
            );
        }
        out
    }

    pub fn from_table(text: &str) -> Result<Self> {
        let mut beta = Vec::new();
        let mut alpha = Vec::new();
        let mut alpha_bar = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split_whitespace().collect();
            if cols.len() != 4 {
                return Err(Error::Format(format!("line {}: expected 4 columns", lineno + 1)));
            }
            let t: usize = cols[0]
                .parse()
                .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
            if t != beta.len() + 1 {
                return Err(Error::Format(format!("line {}: step {t} out of order", lineno + 1)));
            }
            let parse = |s: &str| -> Result<f64> {
                s.parse()
                    .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))
            };
            beta.push(parse(cols[1])?);
            alpha.push(parse(cols[2])?);
            alpha_bar.push(parse(cols[3])?);
        }
        if beta.is_empty() {
            return Err(Error::Format("empty schedule table".into()));
        }
        let mean_alpha_bar = alpha_bar.iter().sum::<f64>() / alpha_bar.len() as f64;
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
            mean_alpha_bar,
        })
    }
}

/// Source of clean samples x₀.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum DataSource {
    /// i.i.d. U[-1, 1] coordinates.
    UniformHypercube { dim: usize },
    /// Cycles through a fixed list of vectors.
    FixedCorpus { dim: usize, corpus: Vec<Vec<f64>> },
}

impl DataSource {
    pub fn uniform(dim: usize) -> Self {
        DataSource::UniformHypercube { dim }
    }

    pub fn corpus(corpus: Vec<Vec<f64>>) -> Result<Self> {
        let dim = corpus.first().map(Vec::len).ok_or_else(|| invalid("empty corpus"))?;
        if corpus.iter().any(|v| v.len() != dim) {
            return Err(invalid("corpus vectors differ in length"));
        }
        Ok(DataSource::FixedCorpus { dim, corpus })
    }

    pub fn dim(&self) -> usize {
        match self {
            DataSource::UniformHypercube { dim } | DataSource::FixedCorpus { dim, .. } => *dim,
        }
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        match self {
            DataSource::UniformHypercube { dim } => (0..*dim).map(|_| rng.uniform(-1.0, 1.0)).collect(),
            DataSource::FixedCorpus { corpus, .. } => {
                corpus[rng.int_inclusive(0, corpus.len() - 1)].clone()
            }
        }
    }
}

/// x_t = √ᾱ_t·x₀ + √(1-ᾱ_t)·ε with ε ~ N(0, I). Returns `(x_t, ε)`.
pub fn forward_diffuse(
    x0: &Tensor,
    t: usize,
    sched: &DiffusionSchedule,
    rng: &mut Rng,
) -> Result<(Tensor, Tensor)> {
    let ab = sched.alpha_bar_at(t)?;
    let eps = Tensor::new(x0.shape().to_vec(), rng.normal_vec(x0.len()))?;
    let xt = diffuse_with(x0, &eps, ab)?;
    Ok((xt, eps))
}

pub(crate) fn diffuse_with(x0: &Tensor, eps: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    let (s, n) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(x, e)| s * x + n * e)
        .collect();
    Tensor::new(x0.shape().to_vec(), data)
}

/// `count` diffused samples as columns: `(x_t, ε)`, both `[dim, count]`.
/// With `t = Some(step)` every sample uses that step, else steps are drawn.
pub fn diffused_batch(
    data: &DataSource,
    sched: &DiffusionSchedule,
    count: usize,
    t: Option<usize>,
    rng: &mut Rng,
) -> Result<(Tensor, Tensor)> {
    if count == 0 {
        return Err(invalid("count must be >= 1"));
    }
    let mut xs = Vec::with_capacity(count);
    let mut es = Vec::with_capacity(count);
    for _ in 0..count {
        let x0 = Tensor::vector(data.sample(rng));
        let step = match t {
            Some(s) => s,
            None => sched.sample_step(rng),
        };
        let (xt, eps) = forward_diffuse(&x0, step, sched, rng)?;
        xs.push(xt.into_data());
        es.push(eps.into_data());
    }
    Ok((Tensor::from_columns(&xs)?, Tensor::from_columns(&es)?))
}

/// ‖ε − ε̂‖², recorded on the tape.
pub fn loss_simple(tape: &mut Tape, eps: Var, eps_hat: Var) -> Result<Var> {
    let d = tape.sub(eps, eps_hat)?;
    Ok(tape.sum_squares(d))
}

/// Untracked ‖ε − ε̂‖².
pub fn loss_value(eps: &Tensor, eps_hat: &Tensor) -> Result<f64> {
    Ok(eps.sub(eps_hat)?.sum_squares())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RatioStats {
    pub samples: usize,
    pub mean: f64,
    pub median: f64,
    pub q97: f64,
}

/// Monte-Carlo statistics of ‖ε_t‖²/‖x_t‖² over draws of (x₀, t, ε).
pub fn noise_ratio_stats(
    data: &DataSource,
    sched: &DiffusionSchedule,
    samples: usize,
    rng: &mut Rng,
) -> Result<RatioStats> {
    if samples == 0 {
        return Err(invalid("samples must be >= 1"));
    }
    let mut ratios = Vec::with_capacity(samples);
    for _ in 0..samples {
        let x0 = Tensor::vector(data.sample(rng));
        let t = sched.sample_step(rng);
        let (xt, eps) = forward_diffuse(&x0, t, sched, rng)?;
        ratios.push(eps.sum_squares() / xt.sum_squares());
    }
    let mean = ratios.iter().sum::<f64>() / samples as f64;
    ratios.sort_by(f64::total_cmp);
    Ok(RatioStats {
        samples,
        mean,
        median: quantile_sorted(&ratios, 0.5),
        q97: quantile_sorted(&ratios, 0.97),
    })
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let w = pos - lo as f64;
    if w == 0.0 || sorted[lo] == sorted[hi] {
        // Avoids 0·∞ when the sample holds infinities.
        return sorted[lo];
    }
    sorted[lo] * (1.0 - w) + sorted[hi] * w
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_schedule() {
        let s = DiffusionSchedule::linear(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bar(), &[0.5]);
        assert_eq!(s.mean_alpha_bar(), 0.5);
    }

    #[test]
    fn endpoint_order_enforced() {
        assert!(DiffusionSchedule::linear(10, 0.02, 1e-4).is_err());
        assert!(DiffusionSchedule::linear(10, 0.0, 0.1).is_err());
        assert!(DiffusionSchedule::linear(10, 0.1, 1.0).is_err());
        assert!(DiffusionSchedule::linear(0, 0.1, 0.2).is_err());
    }

    #[test]
    fn ddpm_endpoints_inclusive() {
        let s = DiffusionSchedule::ddpm();
        assert_eq!(s.beta()[0], 1e-4);
        assert!((s.beta()[999] - 0.02).abs() < 1e-17);
        for (a, b) in s.alpha().iter().zip(s.beta()) {
            assert_eq!(a + b, 1.0);
        }
    }

    #[test]
    fn step_out_of_range() {
        let s = DiffusionSchedule::ddpm();
        let x0 = Tensor::vector(vec![0.0; 3]);
        let mut rng = Rng::new(0, 0);
        assert!(forward_diffuse(&x0, 0, &s, &mut rng).is_err());
        assert!(forward_diffuse(&x0, 1001, &s, &mut rng).is_err());
    }

    #[test]
    fn zero_noise_limit_returns_input() {
        let s = DiffusionSchedule::degenerate(1.0, 4);
        let x0 = Tensor::vector(vec![0.3, -0.7, 1.0]);
        let (xt, _) = forward_diffuse(&x0, 2, &s, &mut Rng::new(1, 1)).unwrap();
        assert_eq!(xt, x0);
    }

    #[test]
    fn diffuse_is_deterministic() {
        let s = DiffusionSchedule::ddpm();
        let x0 = Tensor::vector(vec![0.1; 8]);
        let a = forward_diffuse(&x0, 500, &s, &mut Rng::new(4, 2)).unwrap();
        let b = forward_diffuse(&x0, 500, &s, &mut Rng::new(4, 2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn loss_zero_and_hand_value() {
        let mut tape = Tape::new();
        let e = tape.constant(Tensor::vector(vec![1.0, 0.0]));
        let z = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let same = loss_simple(&mut tape, e, e).unwrap();
        let one = loss_simple(&mut tape, e, z).unwrap();
        assert_eq!(tape.value(same), &[0.0]);
        assert_eq!(tape.value(one), &[1.0]);
        let bad = tape.constant(Tensor::vector(vec![0.0; 3]));
        assert!(loss_simple(&mut tape, e, bad).is_err());
    }

    #[test]
    fn pure_noise_ratio_is_one() {
        let s = DiffusionSchedule::degenerate(0.0, 10);
        let st = noise_ratio_stats(&DataSource::uniform(16), &s, 200, &mut Rng::new(0, 0)).unwrap();
        assert!((st.mean - 1.0).abs() < 1e-12);
        assert!((st.q97 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn table_round_trip_is_exact() {
        let s = DiffusionSchedule::ddpm();
        let back = DiffusionSchedule::from_table(&s.to_table()).unwrap();
        assert_eq!(s, back);
    }

    #[test]
    fn quantile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&v, 0.5), 2.5);
        assert_eq!(quantile_sorted(&v, 1.0), 4.0);
        assert_eq!(quantile_sorted(&v, 0.0), 1.0);
    }

    #[test]
    fn uniform_source_in_bounds() {
        let src = DataSource::uniform(64);
        let mut rng = Rng::new(8, 0);
        for _ in 0..50 {
            assert!(src.sample(&mut rng).iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }
}
