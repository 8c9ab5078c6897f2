//! Empirical checks of the norm-scaling laws and the robustness bound for
//! scaled skip connections, plus the local `M₀`/`L₀` estimators they use.
//!
//! Every check derives its random streams from the `&Rng` it is given, so
//! repeated calls with the same generator return identical reports.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::diffusion::{diffused_batch, DataSource, DiffusionSchedule};
use crate::error::{invalid, Error, Result};
use crate::linalg::{l2, normalize};
use crate::rng::Rng;
use crate::scaling::{int_pow, skip_bound_sum, ScalingPolicy};
use crate::stats::{linear_fit, median, spearman};
use crate::tensor::Tensor;
use crate::unet::{init_unet, Activation, BlockParams, UNetModel};

pub const LIPSCHITZ_METHOD: &str = "empirical-local";
pub const LOCAL_GAP_NOTE: &str =
    "M0 and L0 are local estimates at probe points; the bound assumes global constants";

const MODEL_STREAM: u64 = 0x1000;
const PROBE_STREAM: u64 = 0x2000;

/// Which fixed coefficient family the κ grid parameterizes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoefficientFamily {
    /// κ_i = κ^{i-1}
    #[default]
    Cs,
    /// κ_i = κ
    Universal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundCheckConfig {
    pub m: usize,
    pub l: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub seeds: usize,
    /// Confidence slack; informational only, failure probabilities are
    /// handled by taking medians over seeds.
    pub rho: f64,
    pub probes: usize,
    pub kappa_grid: Vec<f64>,
    pub family: CoefficientFamily,
    /// Multiplies the last matrix of every block after initialization.
    /// `1.0` is plain Kaiming; `1/√2` makes each block norm-preserving.
    pub last_layer_gain: f64,
}

impl Default for BoundCheckConfig {
    fn default() -> Self {
        Self {
            m: 64,
            l: 2,
            n: 12,
            seeds: 20,
            rho: 0.1,
            probes: 32,
            kappa_grid: vec![1.0, 0.9, 0.8, 0.7, 0.6, 0.5],
            family: CoefficientFamily::Cs,
            last_layer_gain: 1.0,
        }
    }
}

impl BoundCheckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.probes < 1 || self.seeds < 1 {
            return Err(invalid("probes, seeds: must be >= 1"));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(invalid(format!("rho: must lie in (0, 1], got {}", self.rho)));
        }
        if self.kappa_grid.len() < 3 {
            return Err(invalid("kappa_grid: needs at least 3 values"));
        }
        let first = self.kappa_grid[0];
        if self.kappa_grid.iter().all(|&k| k == first) {
            return Err(invalid("kappa_grid: degenerate (all values equal)"));
        }
        if !(self.last_layer_gain.is_finite() && self.last_layer_gain > 0.0) {
            return Err(invalid("last_layer_gain: must be positive"));
        }
        for &k in &self.kappa_grid {
            self.policy(k)?;
        }
        Ok(())
    }

    pub fn policy(&self, kappa: f64) -> Result<ScalingPolicy> {
        match self.family {
            CoefficientFamily::Cs => ScalingPolicy::cs(kappa),
            CoefficientFamily::Universal => ScalingPolicy::universal(kappa),
        }
    }

    /// Model for one grid cell. Weights depend only on `seed`, so every κ
    /// sees the same matrices.
    pub fn build_model(&self, kappa: f64, seed: usize, rng: &Rng) -> Result<UNetModel> {
        let mut r = rng.derive(MODEL_STREAM + seed as u64);
        let mut model = init_unet(self.m, self.l, self.n, self.policy(kappa)?, &mut r)?;
        if self.last_layer_gain != 1.0 {
            model.scale_last_layers(self.last_layer_gain);
        }
        Ok(model)
    }

    fn coefficient_square_sum(&self, kappa: f64) -> Result<f64> {
        let ks = self
            .policy(kappa)?
            .fixed_coefficients(self.n)
            .expect("fixed family");
        Ok(ks.iter().map(|k| k * k).sum())
    }
}

/// One (κ, seed) cell.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScalingRow {
    pub kappa: f64,
    pub seed: usize,
    pub sum_sq: f64,
    pub x_norm_sq: f64,
    /// Per-cell fit loss (gradient check only; 0 otherwise).
    pub loss: f64,
    pub predictor: f64,
    pub measured: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScalingLawReport {
    pub name: String,
    pub kappas: Vec<f64>,
    /// Σ_j κ_j² per grid point.
    pub sum_sq: Vec<f64>,
    /// Predictor per grid point (median over seeds).
    pub x_values: Vec<f64>,
    /// Measured norm² per grid point (median over seeds).
    pub y_values: Vec<f64>,
    pub fitted_slope: f64,
    pub fitted_intercept: f64,
    pub r_squared: f64,
    /// Rank correlation between Σκ_j² and the measurement.
    pub spearman: f64,
    /// Measurement nonincreasing as Σκ_j² decreases.
    pub monotone: bool,
    /// Measured ratio between the largest and smallest Σκ_j² grid points.
    pub measured_ratio: f64,
    /// Same ratio for the predictor.
    pub predicted_ratio: f64,
    /// Set for N = 1, where Σκ_j² cannot vary and the predictor only moves
    /// through ‖x_t‖².
    pub weak_power: bool,
    pub rows: Vec<ScalingRow>,
}

impl ScalingLawReport {
    fn assemble(name: &str, cfg: &BoundCheckConfig, rows: Vec<ScalingRow>) -> Self {
        let g = cfg.kappa_grid.len();
        let mut sum_sq = Vec::with_capacity(g);
        let mut xs = Vec::with_capacity(g);
        let mut ys = Vec::with_capacity(g);
        for (k, chunk) in rows.chunks(cfg.seeds).enumerate() {
            debug_assert!(chunk.iter().all(|r| r.kappa == cfg.kappa_grid[k]));
            sum_sq.push(chunk[0].sum_sq);
            xs.push(median(&chunk.iter().map(|r| r.predictor).collect::<Vec<_>>()));
            ys.push(median(&chunk.iter().map(|r| r.measured).collect::<Vec<_>>()));
        }
        let fit = linear_fit(&xs, &ys);
        let mut order: Vec<usize> = (0..g).collect();
        order.sort_by(|&a, &b| sum_sq[a].total_cmp(&sum_sq[b]).then(xs[a].total_cmp(&xs[b])));
        let monotone = order.windows(2).all(|w| ys[w[0]] <= ys[w[1]]);
        let (lo, hi) = (order[0], order[g - 1]);
        Self {
            name: name.to_string(),
            kappas: cfg.kappa_grid.clone(),
            spearman: spearman(&sum_sq, &ys),
            sum_sq,
            measured_ratio: ys[hi] / ys[lo],
            predicted_ratio: xs[hi] / xs[lo],
            x_values: xs,
            y_values: ys,
            fitted_slope: fit.slope,
            fitted_intercept: fit.intercept,
            r_squared: fit.r_squared,
            monotone,
            weak_power: cfg.n == 1,
            rows,
        }
    }

    /// One row per (grid point, seed).
    pub fn to_csv(&self) -> String {
        let mut s = String::from("check,kappa,seed,sum_sq,x_norm_sq,loss,predictor,measured\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{:e},{:e},{:e},{:e},{:e}",
                self.name, r.kappa, r.seed, r.sum_sq, r.x_norm_sq, r.loss, r.predictor, r.measured
            );
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "{}: slope={:.6e} intercept={:.6e} r2={:.4} spearman={:.4} monotone={} ratio measured/predicted={:.4}/{:.4}{}\n",
            self.name,
            self.fitted_slope,
            self.fitted_intercept,
            self.r_squared,
            self.spearman,
            self.monotone,
            self.measured_ratio,
            self.predicted_ratio,
            if self.weak_power { " (weak power: N=1)" } else { "" }
        );
        for ((k, (x, y)), ss) in self.kappas.iter().zip(self.x_values.iter().zip(&self.y_values)).zip(&self.sum_sq) {
            let _ = writeln!(s, "  kappa={k} sum_sq={ss:.6} predictor={x:.6e} measured={y:.6e}");
        }
        s
    }
}

fn cells(cfg: &BoundCheckConfig) -> Vec<(usize, usize)> {
    (0..cfg.kappa_grid.len())
        .flat_map(|k| (0..cfg.seeds).map(move |s| (k, s)))
        .collect()
}

fn probe_step(cfg: &BoundCheckConfig, grid_index: usize, sched: &DiffusionSchedule) -> Option<usize> {
    // With a single connection the predictor varies only through ‖x_t‖², so
    // spread the diffusion step across the grid.
    if cfg.n != 1 {
        return None;
    }
    let g = cfg.kappa_grid.len() - 1;
    let t = sched.steps();
    Some(1 + grid_index * (t - 1) / g.max(1))
}

fn column_sq_norms(t: &Tensor) -> Vec<f64> {
    t.column_norms().iter().map(|n| n * n).collect()
}

/// Median ‖h_0‖² against median ‖x_t‖²·Σκ_j² over the κ grid.
pub fn check_hidden_norm_scaling(
    cfg: &BoundCheckConfig,
    sched: &DiffusionSchedule,
    rng: &Rng,
) -> Result<ScalingLawReport> {
    cfg.validate()?;
    let data = DataSource::uniform(cfg.m);
    let rows = cells(cfg)
        .into_par_iter()
        .map(|(k, seed)| -> Result<ScalingRow> {
            let kappa = cfg.kappa_grid[k];
            let model = cfg.build_model(kappa, seed, rng)?;
            let mut pr = rng.derive(PROBE_STREAM + seed as u64);
            let (xt, _) = diffused_batch(&data, sched, cfg.probes, probe_step(cfg, k, sched), &mut pr)?;
            let trace = model.forward(&xt)?;
            let x_norm_sq = median(&column_sq_norms(&xt));
            let sum_sq = cfg.coefficient_square_sum(kappa)?;
            Ok(ScalingRow {
                kappa,
                seed,
                sum_sq,
                x_norm_sq,
                loss: 0.0,
                predictor: x_norm_sq * sum_sq,
                measured: median(&column_sq_norms(trace.h(0))),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScalingLawReport::assemble("hidden_norm", cfg, rows))
}

/// Max over parameter groups of ‖∇ℓ‖² at initialization against
/// ℓ·‖x_t‖²·Σκ_j².
pub fn check_gradient_norm_scaling(
    cfg: &BoundCheckConfig,
    sched: &DiffusionSchedule,
    rng: &Rng,
) -> Result<ScalingLawReport> {
    cfg.validate()?;
    let data = DataSource::uniform(cfg.m);
    let rows = cells(cfg)
        .into_par_iter()
        .map(|(k, seed)| -> Result<ScalingRow> {
            let kappa = cfg.kappa_grid[k];
            let model = cfg.build_model(kappa, seed, rng)?;
            let mut pr = rng.derive(PROBE_STREAM + seed as u64);
            let (xt, eps) = diffused_batch(&data, sched, cfg.probes, probe_step(cfg, k, sched), &mut pr)?;
            let lg = model.loss_and_grads(&xt, &eps, None)?;
            let max_sq = lg
                .grads
                .iter()
                .flatten()
                .map(Tensor::sum_squares)
                .fold(0.0, f64::max);
            let x_norm_sq = median(&column_sq_norms(&xt));
            let sum_sq = cfg.coefficient_square_sum(kappa)?;
            Ok(ScalingRow {
                kappa,
                seed,
                sum_sq,
                x_norm_sq,
                loss: lg.loss,
                predictor: lg.loss * x_norm_sq * sum_sq,
                measured: max_sq,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScalingLawReport::assemble("gradient_norm", cfg, rows))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LipschitzEstimate {
    /// max_i of `per_block`.
    pub m0: f64,
    /// Local operator norm of the middle block.
    pub l0: f64,
    /// Local operator norm of `b_i∘a_i` for i = 1..N.
    pub per_block: Vec<f64>,
    pub method: String,
    pub probes: usize,
    pub ascent_steps: usize,
}

/// Pre-activation signs along a chain of blocks at `x`; one mask per hidden
/// layer in chain order.
fn relu_masks(blocks: &[&BlockParams], act: Activation, x: &[f64]) -> Result<Vec<Tensor>> {
    let mut h = Tensor::vector(x.to_vec());
    let mut masks = Vec::new();
    for b in blocks {
        let last = b.weights.len() - 1;
        for (j, w) in b.weights.iter().enumerate() {
            h = w.matmul(&h)?;
            if !h.all_finite() {
                return Err(Error::Estimation("non-finite activation".into()));
            }
            if j < last {
                let mask = match act {
                    Activation::Relu => h.map(|v| if v > 0.0 { 1.0 } else { 0.0 }),
                    Activation::Identity => h.map(|_| 1.0),
                };
                h = h.mul(&mask)?;
                masks.push(mask);
            }
        }
    }
    Ok(masks)
}

/// Largest singular value of the Jacobian of a block chain at `x`.
///
/// The chain is piecewise linear, so near `x` it acts as the masked linear
/// map `J`. Each ascent step records `½‖Jv‖²` on a tape and follows its
/// gradient `JᵀJv` (power iteration on `JᵀJ`); the best `‖Jv‖` over the
/// steps is returned.
pub fn local_operator_norm(
    blocks: &[&BlockParams],
    act: Activation,
    x: &[f64],
    ascent_steps: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let masks = relu_masks(blocks, act, x)?;
    let mut v = rng.normal_vec(x.len());
    normalize(&mut v);
    let mut best = 0.0f64;
    for _ in 0..ascent_steps.max(1) {
        let mut tape = Tape::new();
        let vv = tape.param(Tensor::vector(v.clone()));
        let mut h = vv;
        let mut mi = 0;
        for b in blocks {
            let last = b.weights.len() - 1;
            for (j, w) in b.weights.iter().enumerate() {
                let wv = tape.constant(w.clone());
                h = tape.matmul(wv, h)?;
                if j < last {
                    let mv = tape.constant(masks[mi].clone());
                    h = tape.mul(mv, h)?;
                    mi += 1;
                }
            }
        }
        let sq = tape.sum_squares(h);
        let obj = tape.scale(sq, 0.5);
        let gain = tape.value(sq)[0].sqrt();
        if !gain.is_finite() {
            return Err(Error::Estimation("non-finite Jacobian product".into()));
        }
        best = best.max(gain);
        let g = tape.backward(obj)?.get(vv).expect("param leaf").into_data();
        let mut next = g;
        if normalize(&mut next) == 0.0 {
            break;
        }
        v = next;
    }
    Ok(best)
}

/// `M₀`/`L₀` with the same set of base points for every block.
pub fn estimate_m0_l0_with_bases(
    model: &UNetModel,
    bases: &[Vec<f64>],
    ascent_steps: usize,
    rng: &mut Rng,
) -> Result<LipschitzEstimate> {
    let block_bases = vec![bases.to_vec(); model.n + 1];
    estimate_per_block_bases(model, &block_bases, ascent_steps, rng)
}

/// `block_bases[i-1]` are the base points for `b_i∘a_i`; `block_bases[N]`
/// those for the middle block.
fn estimate_per_block_bases(
    model: &UNetModel,
    block_bases: &[Vec<Vec<f64>>],
    ascent_steps: usize,
    rng: &mut Rng,
) -> Result<LipschitzEstimate> {
    let probes = block_bases[0].len();
    let mut per_block = Vec::with_capacity(model.n);
    for i in 0..model.n {
        let chain = [&model.encoders[i], &model.decoders[i]];
        let mut best = 0.0f64;
        for x in &block_bases[i] {
            best = best.max(local_operator_norm(&chain, model.activation, x, ascent_steps, rng)?);
        }
        per_block.push(best);
    }
    let mut l0 = 0.0f64;
    for x in &block_bases[model.n] {
        l0 = l0.max(local_operator_norm(&[&model.middle], model.activation, x, ascent_steps, rng)?);
    }
    Ok(LipschitzEstimate {
        m0: per_block.iter().copied().fold(0.0, f64::max),
        l0,
        per_block,
        method: LIPSCHITZ_METHOD.to_string(),
        probes,
        ascent_steps,
    })
}

/// Local `M₀ = max_i ‖b_i∘a_i‖` and `L₀ = ‖f_N‖` at `probes` standard
/// Gaussian base points.
pub fn estimate_m0_l0(
    model: &UNetModel,
    probes: usize,
    ascent_steps: usize,
    rng: &mut Rng,
) -> Result<LipschitzEstimate> {
    if probes < 8 {
        return Err(invalid("estimate_m0_l0 needs probes >= 8"));
    }
    let bases: Vec<Vec<f64>> = (0..probes).map(|_| rng.normal_vec(model.m)).collect();
    estimate_m0_l0_with_bases(model, &bases, ascent_steps, rng)
}

/// Estimates at the points each block actually sees for the given inputs
/// (`[m, P]`): `s_{i-1}` for `b_i∘a_i` and `s_N` for the middle block.
pub fn estimate_m0_l0_on_inputs(
    model: &UNetModel,
    inputs: &Tensor,
    ascent_steps: usize,
    rng: &mut Rng,
) -> Result<LipschitzEstimate> {
    let trace = model.forward(inputs)?;
    let cols = |t: &Tensor| (0..t.cols()).map(|j| t.column(j)).collect::<Vec<_>>();
    let mut block_bases = vec![cols(inputs)];
    for s in &trace.skip_inputs {
        block_bases.push(cols(s));
    }
    estimate_per_block_bases(model, &block_bases, ascent_steps, rng)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RobustnessRow {
    pub eps: f64,
    pub max_deviation: f64,
    pub bound: f64,
    pub satisfied: usize,
    pub probes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RobustnessReport {
    pub policy: String,
    pub coefficients: Vec<f64>,
    pub m0: f64,
    pub l0: f64,
    /// Σκ_i·M₀^i + M₀^N·L₀; the bound is `eps` times this.
    pub bound_factor: f64,
    pub per_eps: Vec<RobustnessRow>,
    pub fraction_satisfied: f64,
    pub method: String,
    pub note: String,
}

impl RobustnessReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("policy,eps,max_deviation,bound,satisfied,probes\n");
        for r in &self.per_eps {
            let _ = writeln!(
                s,
                "{},{},{:e},{:e},{},{}",
                self.policy, r.eps, r.max_deviation, r.bound, r.satisfied, r.probes
            );
        }
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "robustness[{}]: M0={:.6} L0={:.6} factor={:.6e} satisfied={:.4} ({})\n",
            self.policy, self.m0, self.l0, self.bound_factor, self.fraction_satisfied, self.note
        )
    }
}

/// `Σκ_i·M₀^i + M₀^N·L₀`.
pub fn robustness_bound_factor(kappas: &[f64], m0: f64, l0: f64) -> f64 {
    skip_bound_sum(kappas, m0) + int_pow(m0, kappas.len()) * l0
}

/// Diffused inputs `[m, P]` and unit perturbation directions `[m, P]`.
pub fn robustness_probes(
    m: usize,
    sched: &DiffusionSchedule,
    probes: usize,
    rng: &mut Rng,
) -> Result<(Tensor, Tensor)> {
    let (xt, _) = diffused_batch(&DataSource::uniform(m), sched, probes, None, rng)?;
    let dirs: Vec<Vec<f64>> = (0..probes)
        .map(|_| {
            let mut u = rng.normal_vec(m);
            normalize(&mut u);
            u
        })
        .collect();
    Ok((xt, Tensor::from_columns(&dirs)?))
}

/// Measured `‖UNet(x + ε·u) − UNet(x)‖` against `ε·(Σκ_i M₀^i + M₀^N L₀)`
/// on fixed probes.
pub fn check_robustness_bound_on(
    model: &UNetModel,
    est: &LipschitzEstimate,
    eps_grid: &[f64],
    inputs: &Tensor,
    dirs: &Tensor,
) -> Result<RobustnessReport> {
    if eps_grid.iter().any(|&e| !(e >= 0.0 && e.is_finite())) {
        return Err(invalid("eps grid must be finite and nonnegative"));
    }
    if inputs.shape() != dirs.shape() {
        return Err(Error::Shape {
            op: "check_robustness_bound",
            lhs: inputs.shape().to_vec(),
            rhs: dirs.shape().to_vec(),
        });
    }
    let base = model.forward(inputs)?;
    let kappas = base.coefficients_used.clone();
    let factor = robustness_bound_factor(&kappas, est.m0, est.l0);
    let probes = inputs.cols();
    let mut per_eps = Vec::with_capacity(eps_grid.len());
    let (mut ok, mut total) = (0usize, 0usize);
    for &eps in eps_grid {
        let perturbed = inputs.add(&dirs.scale(eps))?;
        let out = model.forward(&perturbed)?.output;
        let devs = out.sub(&base.output)?.column_norms();
        let bound = eps * factor;
        let satisfied = devs.iter().filter(|&&d| d <= bound).count();
        ok += satisfied;
        total += probes;
        per_eps.push(RobustnessRow {
            eps,
            max_deviation: devs.iter().copied().fold(0.0, f64::max),
            bound,
            satisfied,
            probes,
        });
    }
    Ok(RobustnessReport {
        policy: model.policy.descriptor().to_string(),
        coefficients: kappas,
        m0: est.m0,
        l0: est.l0,
        bound_factor: factor,
        per_eps,
        fraction_satisfied: if total == 0 { 1.0 } else { ok as f64 / total as f64 },
        method: est.method.clone(),
        note: LOCAL_GAP_NOTE.to_string(),
    })
}

/// [`check_robustness_bound_on`] with freshly drawn probes.
pub fn check_robustness_bound(
    model: &UNetModel,
    est: &LipschitzEstimate,
    eps_grid: &[f64],
    probes: usize,
    sched: &DiffusionSchedule,
    rng: &mut Rng,
) -> Result<RobustnessReport> {
    let (xt, dirs) = robustness_probes(model.m, sched, probes.max(1), rng)?;
    check_robustness_bound_on(model, est, eps_grid, &xt, &dirs)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NoiseRow {
    pub sigma: f64,
    pub mean_loss: f64,
    pub inflation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NoiseReport {
    pub policy: String,
    pub per_sigma: Vec<NoiseRow>,
}

impl NoiseReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("policy,sigma,mean_loss,inflation\n");
        for r in &self.per_sigma {
            let _ = writeln!(s, "{},{},{:e},{:e}", self.policy, r.sigma, r.mean_loss, r.inflation);
        }
        s
    }

    pub fn inflation_at(&self, sigma: f64) -> Option<f64> {
        self.per_sigma.iter().find(|r| r.sigma == sigma).map(|r| r.inflation)
    }
}

/// Mean `‖ε − UNet(x_t + σz)‖²` per σ, with one fixed draw of `(x_t, ε, z)`
/// shared by every σ. Inflation is relative to the unperturbed loss.
pub fn noise_injection_probe(
    model: &UNetModel,
    sched: &DiffusionSchedule,
    sigma_grid: &[f64],
    probes: usize,
    rng: &mut Rng,
) -> Result<NoiseReport> {
    if sigma_grid.iter().any(|&s| !(s >= 0.0 && s.is_finite())) {
        return Err(invalid("sigma grid must be finite and nonnegative"));
    }
    let (xt, eps) = diffused_batch(&DataSource::uniform(model.m), sched, probes.max(1), None, rng)?;
    let z = Tensor::new(xt.shape().to_vec(), rng.normal_vec(xt.len()))?;
    let loss_at = |sigma: f64| -> Result<f64> {
        let input = if sigma == 0.0 { xt.clone() } else { xt.add(&z.scale(sigma))? };
        let out = model.forward(&input)?.output;
        let per = eps.sub(&out)?.column_norms();
        Ok(per.iter().map(|n| n * n).sum::<f64>() / per.len() as f64)
    };
    let base = loss_at(0.0)?;
    let per_sigma = sigma_grid
        .iter()
        .map(|&sigma| {
            let mean_loss = loss_at(sigma)?;
            Ok(NoiseRow {
                sigma,
                mean_loss,
                inflation: mean_loss - base,
            })
        })
        .collect::<Result<_>>()?;
    Ok(NoiseReport {
        policy: model.policy.descriptor().to_string(),
        per_sigma,
    })
}

/// `‖x‖` helper exposed for report consumers.
pub fn vector_norm(v: &[f64]) -> f64 {
    l2(v)
}
