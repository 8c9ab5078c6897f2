//! Configurable check suites behind the `theory-check` and `math-check`
//! commands, plus the pass/fail evaluation of experiment reports.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::{noise_ratio_stats, DataSource, DiffusionSchedule};
use crate::error::{invalid, prefixed, Result};
use crate::experiments::{create_unique_dir, hash_config, to_json, ExperimentKind, ExperimentOutput};
use crate::mathcheck::{
    chi_square_expectation_check, gamma_ratio_limits, moment_checks_csv, random_matrix_norm_check,
    scaled_chi_mean_check, scaled_chi_variance_check, MatrixNormReport, MomentCheck,
};
use crate::rng::{Rng, RNG_SCHEME};
use crate::scaling::{PolicyDescriptor, DEFAULT_CHANNELS, DEFAULT_REDUCTION};
use crate::stats::mean;
use crate::tensor::Tensor;
use crate::theory::{
    check_gradient_norm_scaling, check_hidden_norm_scaling, check_robustness_bound_on, estimate_m0_l0_on_inputs,
    noise_injection_probe, robustness_probes, BoundCheckConfig,
};
use crate::unet::init_unet;

/// One named pass/fail verdict.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

/// Verdicts plus named text artifacts (CSV or summaries) to write out.
#[derive(Clone, Debug, Default)]
pub struct SuiteReport {
    pub checks: Vec<CheckOutcome>,
    pub artifacts: Vec<(String, String)>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn checks_csv(&self) -> String {
        let mut s = String::from("name,pass,detail\n");
        for c in &self.checks {
            let _ = writeln!(s, "{},{},{}", c.name, c.passed, c.detail.replace([',', '\n'], ";"));
        }
        s
    }
}

#[derive(Serialize)]
struct SuiteManifest<'a, C: Serialize> {
    suite: &'a str,
    config_hash: String,
    version: &'static str,
    rng_scheme: &'static str,
    passed: bool,
    config: &'a C,
}

/// Writes `manifest.json`, `checks.csv` and every artifact into a fresh
/// directory `base/<suite>` (suffixed if taken).
pub fn write_suite_outputs<C: Serialize>(suite: &str, config: &C, report: &SuiteReport, base: &Path) -> Result<PathBuf> {
    let dir = create_unique_dir(&base.join(suite))?;
    let manifest = SuiteManifest {
        suite,
        config_hash: hash_config(config),
        version: env!("CARGO_PKG_VERSION"),
        rng_scheme: RNG_SCHEME,
        passed: report.passed(),
        config,
    };
    fs::write(dir.join("manifest.json"), to_json(&manifest))?;
    fs::write(dir.join("checks.csv"), report.checks_csv())?;
    for (name, body) in &report.artifacts {
        fs::write(dir.join(name), body)?;
    }
    Ok(dir)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RobustnessSection {
    pub m: usize,
    pub l: usize,
    #[serde(rename = "N")]
    pub n: usize,
    /// Fixed policies compared on identical weights.
    pub policies: Vec<String>,
    pub probes: usize,
    pub eps_grid: Vec<f64>,
    pub ascent_steps: usize,
}

impl Default for RobustnessSection {
    fn default() -> Self {
        Self {
            m: 16,
            l: 2,
            n: 4,
            policies: vec!["unit".into(), "cs:0.7".into()],
            probes: 64,
            eps_grid: vec![0.0, 1e-4, 1e-3, 1e-2],
            ascent_steps: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSection {
    pub policies: Vec<String>,
    pub sigma_grid: Vec<f64>,
    pub probes: usize,
}

impl Default for NoiseSection {
    fn default() -> Self {
        Self {
            policies: vec!["unit".into(), "cs:0.7".into(), "ls".into()],
            sigma_grid: vec![0.0, 0.1, 0.2, 0.4],
            probes: 512,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheoryAcceptance {
    pub min_r_squared: f64,
    pub min_spearman: f64,
    pub min_fraction: f64,
}

impl Default for TheoryAcceptance {
    fn default() -> Self {
        Self {
            min_r_squared: 0.95,
            min_spearman: 0.9,
            min_fraction: 0.99,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheoryCheckConfig {
    pub seed: u64,
    pub scaling: BoundCheckConfig,
    pub robustness: RobustnessSection,
    pub noise: NoiseSection,
    pub acceptance: TheoryAcceptance,
}

impl Default for TheoryCheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scaling: BoundCheckConfig::default(),
            robustness: RobustnessSection::default(),
            noise: NoiseSection::default(),
            acceptance: TheoryAcceptance::default(),
        }
    }
}

fn parse_policies(field: &str, list: &[String]) -> Result<Vec<PolicyDescriptor>> {
    if list.is_empty() {
        return Err(invalid(format!("{field}: need at least one policy")));
    }
    list.iter()
        .map(|p| {
            let d: PolicyDescriptor = p.parse().map_err(|e| prefixed(field, e))?;
            d.validate(false).map_err(|e| prefixed(field, e))?;
            Ok(d)
        })
        .collect()
}

impl TheoryCheckConfig {
    pub fn validate(&self) -> Result<()> {
        self.scaling.validate().map_err(|e| prefixed("scaling", e))?;
        let r = &self.robustness;
        if r.m < 2 || r.l < 2 || r.n < 1 {
            return Err(invalid("robustness: need m >= 2, l >= 2, N >= 1"));
        }
        if r.probes == 0 {
            return Err(invalid("robustness.probes: must be >= 1"));
        }
        if r.eps_grid.is_empty() || r.eps_grid.iter().any(|&e| !(e >= 0.0 && e.is_finite())) {
            return Err(invalid("robustness.eps_grid: need finite nonnegative values"));
        }
        for p in parse_policies("robustness.policies", &r.policies)? {
            if p.kappa().is_none() && p != PolicyDescriptor::Unit {
                return Err(invalid("robustness.policies: fixed policies only"));
            }
        }
        let n = &self.noise;
        for p in parse_policies("noise.policies", &n.policies)? {
            if matches!(p, PolicyDescriptor::Learnable { .. }) && r.m % DEFAULT_CHANNELS.min(r.m) != 0 {
                return Err(invalid(format!("noise.policies: learnable scaling needs robustness.m divisible by {DEFAULT_CHANNELS}")));
            }
        }
        if n.probes == 0 {
            return Err(invalid("noise.probes: must be >= 1"));
        }
        if n.sigma_grid.iter().any(|&s| !(s >= 0.0 && s.is_finite())) {
            return Err(invalid("noise.sigma_grid: need finite nonnegative values"));
        }
        let a = &self.acceptance;
        if !(0.0..=1.0).contains(&a.min_r_squared) || !(-1.0..=1.0).contains(&a.min_spearman) || !(0.0..=1.0).contains(&a.min_fraction) {
            return Err(invalid("acceptance: thresholds out of range"));
        }
        Ok(())
    }
}

pub fn run_theory_checks(cfg: &TheoryCheckConfig) -> Result<SuiteReport> {
    cfg.validate()?;
    let sched = DiffusionSchedule::ddpm();
    let base = Rng::new(cfg.seed, 0);
    let mut rep = SuiteReport::default();
    let acc = &cfg.acceptance;

    let hidden = check_hidden_norm_scaling(&cfg.scaling, &sched, &base)?;
    rep.checks.push(CheckOutcome::new(
        "hidden_norm_scaling_r2",
        hidden.r_squared >= acc.min_r_squared,
        format!("r2={:.4} (min {})", hidden.r_squared, acc.min_r_squared),
    ));
    let grad = check_gradient_norm_scaling(&cfg.scaling, &sched, &base)?;
    rep.checks.push(CheckOutcome::new(
        "gradient_norm_spearman",
        grad.spearman >= acc.min_spearman,
        format!("spearman={:.4} (min {})", grad.spearman, acc.min_spearman),
    ));
    rep.artifacts.push(("hidden_norm_scaling.csv".into(), hidden.to_csv()));
    rep.artifacts.push(("gradient_norm_scaling.csv".into(), grad.to_csv()));
    rep.artifacts.push(("scaling_summary.txt".into(), hidden.summary() + &grad.summary()));

    let r = &cfg.robustness;
    let (inputs, dirs) = robustness_probes(r.m, &sched, r.probes, &mut base.derive(0x11))?;
    let mut csv = String::new();
    let mut factors = Vec::new();
    for p in parse_policies("robustness.policies", &r.policies)? {
        let pol = p.instantiate(r.n, DEFAULT_CHANNELS, DEFAULT_REDUCTION, false, &mut base.derive(0x12))?;
        let model = init_unet(r.m, r.l, r.n, pol, &mut base.derive(0x10))?;
        let est = estimate_m0_l0_on_inputs(&model, &inputs, r.ascent_steps, &mut base.derive(0x13))?;
        let out = check_robustness_bound_on(&model, &est, &r.eps_grid, &inputs, &dirs)?;
        if let Some(z) = out.per_eps.iter().find(|row| row.eps == 0.0) {
            rep.checks.push(CheckOutcome::new(
                format!("robustness_zero_perturbation[{p}]"),
                z.max_deviation == 0.0,
                format!("max deviation {:e}", z.max_deviation),
            ));
        }
        rep.checks.push(CheckOutcome::new(
            format!("robustness_bound[{p}]"),
            out.fraction_satisfied >= acc.min_fraction,
            format!(
                "satisfied {:.4} (min {}), M0={:.4} L0={:.4}",
                out.fraction_satisfied, acc.min_fraction, out.m0, out.l0
            ),
        ));
        csv.push_str(&out.to_csv());
        factors.push((p, out.bound_factor));
    }
    let unit = factors.iter().find(|(p, _)| *p == PolicyDescriptor::Unit).map(|f| f.1);
    if let Some(u) = unit {
        for (p, f) in factors.iter().filter(|(p, _)| matches!(p, PolicyDescriptor::Cs(k) if *k < 1.0)) {
            rep.checks.push(CheckOutcome::new(
                format!("robustness_factor_below_unit[{p}]"),
                *f < u,
                format!("{f:.6e} vs unit {u:.6e}"),
            ));
        }
    }
    rep.artifacts.push(("robustness.csv".into(), csv));

    let nz = &cfg.noise;
    let mut csv = String::new();
    for p in parse_policies("noise.policies", &nz.policies)? {
        let pol = p.instantiate(r.n, DEFAULT_CHANNELS.min(r.m), DEFAULT_REDUCTION, false, &mut base.derive(0x22))?;
        let model = init_unet(r.m, r.l, r.n, pol, &mut base.derive(0x20))?;
        let out = noise_injection_probe(&model, &sched, &nz.sigma_grid, nz.probes, &mut base.derive(0x21))?;
        csv.push_str(&out.to_csv());
    }
    rep.artifacts.push(("noise_injection.csv".into(), csv));
    Ok(rep)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MathCheckConfig {
    pub seed: u64,
    pub samples: usize,
    pub tolerance: f64,
    pub chi_ks: Vec<usize>,
    pub sigma: f64,
    pub gamma_x: f64,
    pub gamma_tolerance: f64,
    pub chi_square_n: usize,
    pub chi_square_mu: f64,
    pub chi_square_sigma: f64,
    pub matrix_m: usize,
    pub matrix_probes: usize,
    pub ratio_range: [f64; 2],
    pub max_column_spread: f64,
    pub max_coherence: f64,
    pub diffusion_m: usize,
    pub diffusion_samples: usize,
    pub diffusion_tolerance: f64,
    pub mean_alpha_bar_range: [f64; 2],
    pub noise_ratio_samples: usize,
    pub noise_ratio_mean_range: [f64; 2],
    pub noise_ratio_q97_max: f64,
}

impl Default for MathCheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            samples: 100_000,
            tolerance: 0.02,
            chi_ks: vec![1, 100, 1000],
            sigma: 1.0,
            gamma_x: 1e6,
            gamma_tolerance: 1e-3,
            chi_square_n: 16,
            chi_square_mu: 0.5,
            chi_square_sigma: 1.0,
            matrix_m: 1024,
            matrix_probes: 200,
            ratio_range: [0.8, 1.2],
            max_column_spread: 0.1,
            max_coherence: 0.15,
            diffusion_m: 128,
            diffusion_samples: 10_000,
            diffusion_tolerance: 0.02,
            mean_alpha_bar_range: [0.25, 0.29],
            noise_ratio_samples: 20_000,
            noise_ratio_mean_range: [1.1, 1.4],
            noise_ratio_q97_max: 5.0,
        }
    }
}

impl MathCheckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples < 1000 || self.diffusion_samples < 1000 || self.noise_ratio_samples < 1000 {
            return Err(invalid("samples: Monte-Carlo checks need >= 1000 samples"));
        }
        if !(self.tolerance > 0.0) || !(self.gamma_tolerance > 0.0) || !(self.diffusion_tolerance > 0.0) {
            return Err(invalid("tolerance: must be positive"));
        }
        if self.chi_ks.is_empty() || self.chi_ks.contains(&0) {
            return Err(invalid("chi_ks: need positive degrees of freedom"));
        }
        if !(self.sigma > 0.0) || !(self.chi_square_sigma >= 0.0) {
            return Err(invalid("sigma: must be positive"));
        }
        if !(self.gamma_x >= 4.0) {
            return Err(invalid("gamma_x: must be >= 4"));
        }
        if self.chi_square_n == 0 {
            return Err(invalid("chi_square_n: must be >= 1"));
        }
        if self.matrix_m < 16 || self.matrix_probes == 0 {
            return Err(invalid("matrix_m/matrix_probes: need m >= 16 and probes >= 1"));
        }
        if self.diffusion_m == 0 {
            return Err(invalid("diffusion_m: must be >= 1"));
        }
        for (name, r) in [
            ("ratio_range", self.ratio_range),
            ("mean_alpha_bar_range", self.mean_alpha_bar_range),
            ("noise_ratio_mean_range", self.noise_ratio_mean_range),
        ] {
            if !(r[0] <= r[1]) {
                return Err(invalid(format!("{name}: lower bound exceeds upper")));
            }
        }
        Ok(())
    }
}

/// Monte-Carlo `E‖x_t‖²` for uniform data against `(1 − 2·mean ᾱ/3)·m`.
pub fn xt_norm_check(m: usize, sched: &DiffusionSchedule, samples: usize, tolerance: f64, rng: &mut Rng) -> Result<MomentCheck> {
    if samples == 0 || m == 0 {
        return Err(invalid("need m >= 1 and samples >= 1"));
    }
    let data = DataSource::uniform(m);
    let seed = rng.seed();
    let norms: Vec<f64> = (0..samples)
        .map(|_| {
            let x0 = Tensor::vector(data.sample(rng));
            let t = sched.sample_step(rng);
            crate::diffusion::forward_diffuse(&x0, t, sched, rng).map(|(xt, _)| xt.sum_squares())
        })
        .collect::<Result<_>>()?;
    let analytic = (1.0 - 2.0 * sched.mean_alpha_bar() / 3.0) * m as f64;
    Ok(MomentCheck::new(format!("xt_norm_sq_m{m}"), analytic, mean(&norms), samples, tolerance, seed))
}

fn in_range(v: f64, r: [f64; 2]) -> bool {
    v >= r[0] && v <= r[1]
}

pub fn run_math_checks(cfg: &MathCheckConfig) -> Result<SuiteReport> {
    cfg.validate()?;
    let base = Rng::new(cfg.seed, 0);
    let mut moments = Vec::new();
    for (i, &k) in cfg.chi_ks.iter().enumerate() {
        moments.push(scaled_chi_mean_check(k, cfg.sigma, cfg.samples, cfg.tolerance, &mut base.derive(2 * i as u64))?);
        moments.push(scaled_chi_variance_check(k, cfg.sigma, cfg.samples, cfg.tolerance, &mut base.derive(2 * i as u64 + 1))?);
    }
    moments.push(chi_square_expectation_check(
        cfg.chi_square_n,
        cfg.chi_square_mu,
        cfg.chi_square_sigma,
        cfg.samples,
        &mut base.derive(0x100),
    )?);
    let sched = DiffusionSchedule::ddpm();
    moments.push(xt_norm_check(
        cfg.diffusion_m,
        &sched,
        cfg.diffusion_samples,
        cfg.diffusion_tolerance,
        &mut base.derive(0x200),
    )?);

    let mut rep = SuiteReport::default();
    for c in &moments {
        rep.checks.push(CheckOutcome::new(
            c.name.clone(),
            c.passed(),
            format!("rel_err={:.3e} (tol {})", c.rel_err, c.tolerance),
        ));
    }

    let (a, b) = gamma_ratio_limits(cfg.gamma_x)?;
    rep.checks.push(CheckOutcome::new(
        "gamma_ratio_limits",
        (a - 0.5).abs() <= cfg.gamma_tolerance && (b - 0.25).abs() <= cfg.gamma_tolerance,
        format!("({a:.6}, {b:.6}) at x={}", cfg.gamma_x),
    ));

    let mab = sched.mean_alpha_bar();
    rep.checks.push(CheckOutcome::new(
        "mean_alpha_bar",
        in_range(mab, cfg.mean_alpha_bar_range),
        format!("{mab:.5}"),
    ));
    let ratio = noise_ratio_stats(&DataSource::uniform(cfg.diffusion_m), &sched, cfg.noise_ratio_samples, &mut base.derive(0x300))?;
    rep.checks.push(CheckOutcome::new(
        "noise_ratio_mean",
        in_range(ratio.mean, cfg.noise_ratio_mean_range),
        format!("{:.4}", ratio.mean),
    ));
    rep.checks.push(CheckOutcome::new(
        "noise_ratio_q97",
        ratio.q97 <= cfg.noise_ratio_q97_max,
        format!("{:.4}", ratio.q97),
    ));

    let c = 1.0 / (cfg.matrix_m as f64).sqrt();
    let mat = random_matrix_norm_check(cfg.matrix_m, c, cfg.matrix_probes, &mut base.derive(0x400))?;
    rep.checks.push(CheckOutcome::new(
        "random_matrix_ratio_median",
        in_range(mat.ratio_median, cfg.ratio_range),
        format!("{:.4}", mat.ratio_median),
    ));
    rep.checks.push(CheckOutcome::new(
        "random_matrix_column_spread",
        mat.column_norm_spread < cfg.max_column_spread,
        format!("{:.4}", mat.column_norm_spread),
    ));
    rep.checks.push(CheckOutcome::new(
        "random_matrix_coherence",
        mat.max_offdiag_coherence < cfg.max_coherence,
        format!("{:.4}", mat.max_offdiag_coherence),
    ));

    rep.artifacts.push(("moments.csv".into(), moment_checks_csv(&moments)));
    rep.artifacts.push((
        "random_matrix.csv".into(),
        format!("{}\n{}\n", MatrixNormReport::CSV_HEADER, mat.to_csv_row()),
    ));
    Ok(rep)
}

/// Thresholds for [`evaluate_experiment`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentAcceptance {
    pub enabled: bool,
    /// Seeds a policy must win out of the seed list, for per-seed orderings.
    pub min_wins: usize,
}

impl Default for ExperimentAcceptance {
    fn default() -> Self {
        Self {
            enabled: false,
            min_wins: 4,
        }
    }
}

/// The qualitative ordering each experiment kind is expected to show.
pub fn evaluate_experiment(out: &ExperimentOutput, acc: &ExperimentAcceptance) -> Vec<CheckOutcome> {
    let rep = &out.report;
    let mut checks = Vec::new();
    match rep.kind {
        ExperimentKind::Oscillation => {
            if let Some(unit) = out.policy_summary("unit") {
                for p in rep.policies.iter().filter(|p| p.policy != "unit") {
                    checks.push(CheckOutcome::new(
                        format!("oscillation_below_unit[{}]", p.policy),
                        p.median_oscillation < unit.median_oscillation,
                        format!("{:.4e} vs unit {:.4e}", p.median_oscillation, unit.median_oscillation),
                    ));
                }
            }
        }
        ExperimentKind::Convergence => {
            if let Some(c) = &rep.convergence {
                let unit_runs = out.runs_of("unit");
                for p in rep.policies.iter().filter(|p| p.policy != "unit") {
                    let wins = out
                        .runs_of(&p.policy)
                        .iter()
                        .filter(|r| {
                            let mine = r.steps_to_threshold(c.threshold).unwrap_or(usize::MAX);
                            let theirs = unit_runs
                                .iter()
                                .find(|u| u.seed == r.seed)
                                .and_then(|u| u.steps_to_threshold(c.threshold))
                                .unwrap_or(usize::MAX);
                            mine < theirs
                        })
                        .count();
                    checks.push(CheckOutcome::new(
                        format!("crosses_before_unit[{}]", p.policy),
                        wins >= acc.min_wins,
                        format!("{wins} seeds (min {})", acc.min_wins),
                    ));
                }
            }
        }
        ExperimentKind::Direction => {
            if let Some(d) = &rep.direction {
                checks.push(CheckOutcome::new(
                    "forward_not_worse_than_reverse",
                    d.forward_wins >= acc.min_wins,
                    format!("{}/{} seeds (min {})", d.forward_wins, d.seeds, acc.min_wins),
                ));
                if let (Some(s), Some(sr), Some(m0)) = (d.s_forward, d.s_reverse, d.m0) {
                    if m0 > 1.0 && d.kappa < 1.0 {
                        checks.push(CheckOutcome::new("bound_sum_forward_below_reverse", s < sr, format!("S={s:.4e} S_r={sr:.4e}")));
                    }
                }
            }
        }
        ExperimentKind::KappaSweep => {
            if let Some(sw) = &rep.sweep {
                for hi in sw.iter().filter(|p| p.kappa > 1.0) {
                    for lo in sw.iter().filter(|p| (0.5..=0.9).contains(&p.kappa)) {
                        let worse = hi.diverged > lo.diverged
                            || hi.median_final_loss_ema.total_cmp(&lo.median_final_loss_ema).is_ge();
                        checks.push(CheckOutcome::new(
                            format!("kappa_{}_not_better_than_{}", hi.kappa, lo.kappa),
                            worse,
                            format!(
                                "loss {:.4e} vs {:.4e}, diverged {} vs {}",
                                hi.median_final_loss_ema, lo.median_final_loss_ema, hi.diverged, lo.diverged
                            ),
                        ));
                    }
                }
            }
        }
        ExperimentKind::M0Tracking => {}
    }
    if let Some(m) = &rep.m0 {
        let ok = m.median_m0.iter().all(|&v| v >= 1.0);
        checks.push(CheckOutcome::new("m0_at_least_one", ok, format!("median M0 per checkpoint {:?}", m.median_m0)));
        if rep.kind == ExperimentKind::M0Tracking {
            if let (Some(first), Some(last)) = (m.median_m0.first(), m.median_m0.last()) {
                checks.push(CheckOutcome::new("m0_final_at_least_initial", last >= first, format!("{first:.4} -> {last:.4}")));
            }
        }
    }
    checks
}
