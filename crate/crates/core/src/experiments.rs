//! Seeded training experiments: feature oscillation, convergence speed,
//! forward vs reverse coefficient order, κ sweeps and `M₀` tracking.
//!
//! Each (policy, seed) cell trains its own model with its own random
//! streams, so results do not depend on how cells are scheduled.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{DataSource, DiffusionSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_STEPS};
use crate::error::{invalid, prefixed, Error, Result};
use crate::optim::OptimizerConfig;
use crate::rng::{Rng, RNG_SCHEME};
use crate::scaling::{skip_bound_sum, PolicyDescriptor, DEFAULT_CHANNELS, DEFAULT_REDUCTION};
use crate::stats::{median, std_dev};
use crate::suites::ExperimentAcceptance;
use crate::theory::estimate_m0_l0;
use crate::unet::{init_unet, train_step, UNetModel};

pub const NORM_NOTE: &str = "h_i is the output of decoder block b_{i+1} (post-block, the output of f_i)";

const INIT_STREAM: u64 = 0;
const DATA_STREAM: u64 = 1;
const POLICY_STREAM: u64 = 2;
const CORPUS_STREAM: u64 = 3;
const M0_STREAM: u64 = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    #[default]
    Oscillation,
    Convergence,
    Direction,
    KappaSweep,
    M0Tracking,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub m: usize,
    pub l: usize,
    #[serde(rename = "N")]
    pub n: usize,
    /// Channel view `channels × (m / channels)` for learnable scaling.
    pub channels: usize,
    pub reduction: usize,
    /// Multiplies the last matrix of every block after initialization;
    /// 1.0 is plain Kaiming.
    pub last_layer_gain: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            m: 64,
            l: 2,
            n: 12,
            channels: DEFAULT_CHANNELS,
            reduction: DEFAULT_REDUCTION,
            last_layer_gain: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: usize,
    pub batch: usize,
    pub log_interval: usize,
    /// Sliding window width, in logged rows, for the oscillation score.
    pub window: usize,
    pub ema_decay: f64,
    /// Write each run's final model as `runs/<run>.ckpt`.
    pub save_checkpoints: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch: 16,
            log_interval: 10,
            window: 50,
            ema_decay: 0.99,
            save_checkpoints: false,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    AdamW,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let OptimizerConfig::AdamW {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = OptimizerConfig::default()
        else {
            unreachable!()
        };
        Self {
            kind: OptimizerKind::AdamW,
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        }
    }
}

impl OptimizerSection {
    pub fn to_config(&self) -> OptimizerConfig {
        match self.kind {
            OptimizerKind::AdamW => OptimizerConfig::AdamW {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
                weight_decay: self.weight_decay,
            },
            OptimizerKind::Sgd => OptimizerConfig::Sgd { lr: self.lr },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    /// Fresh U[-1, 1]^m samples every step.
    #[default]
    Uniform,
    /// A fixed corpus of `size` uniform vectors drawn once from `seed`.
    Corpus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub kind: DataKind,
    pub size: usize,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            kind: DataKind::Uniform,
            size: 256,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct M0Section {
    /// Steps between `M₀` estimates; 0 disables tracking. Step 0 is always
    /// included when enabled.
    pub interval: usize,
    pub probes: usize,
    pub ascent_steps: usize,
}

impl Default for M0Section {
    fn default() -> Self {
        Self {
            interval: 0,
            probes: 8,
            ascent_steps: 20,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvergenceSection {
    /// Absolute smoothed-loss threshold.
    pub threshold: Option<f64>,
    /// Threshold as a multiple of the unit policy's median final smoothed loss.
    pub threshold_factor: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    /// CS base values; values above 1 need `unsafe_kappa`.
    pub kappas: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            kappas: vec![0.5, 0.7, 0.9, 1.0, 1.1, 1.3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    pub kind: ExperimentKind,
    pub seeds: Vec<u64>,
    /// Policy descriptors: `unit`, `universal:K`, `cs:K`, `reverse-cs:K`,
    /// `ls`, `ls-per-connection`. Ignored by the κ sweep.
    pub policies: Vec<String>,
    pub unsafe_kappa: bool,
    pub model: ModelSection,
    pub train: TrainSection,
    pub optimizer: OptimizerSection,
    pub schedule: ScheduleSection,
    pub data: DataSection,
    pub m0: M0Section,
    pub convergence: ConvergenceSection,
    pub sweep: SweepSection,
    pub acceptance: ExperimentAcceptance,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "oscillation".into(),
            kind: ExperimentKind::Oscillation,
            seeds: (0..5).collect(),
            policies: vec!["unit".into(), "cs:0.7".into(), "ls".into()],
            unsafe_kappa: false,
            model: ModelSection::default(),
            train: TrainSection::default(),
            optimizer: OptimizerSection::default(),
            schedule: ScheduleSection::default(),
            data: DataSection::default(),
            m0: M0Section::default(),
            convergence: ConvergenceSection::default(),
            sweep: SweepSection::default(),
            acceptance: ExperimentAcceptance::default(),
        }
    }
}

fn field_err(field: &str, msg: impl std::fmt::Display) -> Error {
    invalid(format!("{field}: {msg}"))
}

impl ExperimentConfig {
    /// Policies actually run: the configured list, or `cs:κ` per sweep value.
    pub fn effective_policies(&self) -> Result<Vec<PolicyDescriptor>> {
        if self.kind == ExperimentKind::KappaSweep {
            return Ok(self.sweep.kappas.iter().map(|&k| PolicyDescriptor::Cs(k)).collect());
        }
        self.policies
            .iter()
            .map(|p| p.parse().map_err(|e| prefixed("policies", e)))
            .collect()
    }

    /// Checks every field; the message names the first offending one.
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.starts_with('.') {
            return Err(field_err("name", "must be a nonempty plain directory name"));
        }
        if self.seeds.is_empty() {
            return Err(field_err("seeds", "need at least one seed"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(field_err("seeds", "duplicate seed"));
        }
        let md = &self.model;
        if md.m < 2 || md.l < 2 || md.n < 1 {
            return Err(field_err("model", format!("need m >= 2, l >= 2, N >= 1; got m={}, l={}, N={}", md.m, md.l, md.n)));
        }
        let tr = &self.train;
        let zero_steps_ok = self.kind == ExperimentKind::M0Tracking;
        if tr.steps == 0 && !zero_steps_ok {
            return Err(field_err("train.steps", "must be >= 1"));
        }
        if tr.batch == 0 {
            return Err(field_err("train.batch", "must be >= 1"));
        }
        if tr.log_interval == 0 {
            return Err(field_err("train.log_interval", "must be >= 1"));
        }
        if tr.window < 2 {
            return Err(field_err("train.window", "must be >= 2"));
        }
        if !(0.0..1.0).contains(&tr.ema_decay) {
            return Err(field_err("train.ema_decay", "must lie in [0, 1)"));
        }
        let op = &self.optimizer;
        if !(op.lr >= 0.0 && op.lr.is_finite()) {
            return Err(field_err("optimizer.lr", "must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&op.beta1) || !(0.0..1.0).contains(&op.beta2) {
            return Err(field_err("optimizer.beta1/beta2", "must lie in [0, 1)"));
        }
        if !(op.eps >= 0.0) || !(op.weight_decay >= 0.0) {
            return Err(field_err("optimizer.eps/weight_decay", "must be >= 0"));
        }
        self.schedule_built()
            .map_err(|e| prefixed("schedule", e))?;
        if self.data.kind == DataKind::Corpus && self.data.size == 0 {
            return Err(field_err("data.size", "must be >= 1"));
        }
        let policies = self.effective_policies()?;
        if policies.is_empty() {
            return Err(field_err(
                if self.kind == ExperimentKind::KappaSweep { "sweep.kappas" } else { "policies" },
                "need at least one policy",
            ));
        }
        for p in &policies {
            p.validate(self.unsafe_kappa).map_err(|e| prefixed("policies", e))?;
            if matches!(p, PolicyDescriptor::Learnable { .. }) && (md.channels == 0 || md.m % md.channels != 0) {
                return Err(field_err("model.channels", format!("must divide m={}", md.m)));
            }
        }
        if !(md.last_layer_gain > 0.0 && md.last_layer_gain.is_finite()) {
            return Err(field_err("model.last_layer_gain", "must be positive"));
        }
        if md.reduction == 0 {
            return Err(field_err("model.reduction", "must be >= 1"));
        }
        let m0 = &self.m0;
        let needs_m0 = matches!(self.kind, ExperimentKind::M0Tracking | ExperimentKind::Direction) || m0.interval > 0;
        if needs_m0 && m0.probes < 8 {
            return Err(field_err("m0.probes", "must be >= 8"));
        }
        match self.kind {
            ExperimentKind::M0Tracking => {
                if m0.interval == 0 {
                    return Err(field_err("m0.interval", "must be >= 1 for m0-tracking"));
                }
                if tr.steps % m0.interval != 0 {
                    return Err(field_err("m0.interval", format!("must divide train.steps={}", tr.steps)));
                }
            }
            ExperimentKind::Convergence => {
                let c = &self.convergence;
                match (c.threshold, c.threshold_factor) {
                    (Some(t), None) if t.is_finite() => {}
                    (None, Some(f)) if f > 0.0 && f.is_finite() => {
                        if !policies.contains(&PolicyDescriptor::Unit) {
                            return Err(field_err("convergence.threshold_factor", "needs the unit policy"));
                        }
                    }
                    _ => {
                        return Err(field_err(
                            "convergence",
                            "set exactly one of threshold or threshold_factor (> 0)",
                        ))
                    }
                }
            }
            ExperimentKind::Direction => {
                direction_kappa(&policies).map_err(|e| prefixed("policies", e))?;
            }
            ExperimentKind::KappaSweep => {
                if self.sweep.kappas.iter().any(|&k| !(k > 0.0 && k.is_finite())) {
                    return Err(field_err("sweep.kappas", "values must be positive"));
                }
            }
            ExperimentKind::Oscillation => {}
        }
        Ok(())
    }

    pub fn schedule_built(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::linear(self.schedule.steps, self.schedule.beta_start, self.schedule.beta_end)
    }

    pub fn data_source(&self) -> Result<DataSource> {
        let m = self.model.m;
        match self.data.kind {
            DataKind::Uniform => Ok(DataSource::uniform(m)),
            DataKind::Corpus => {
                let mut r = Rng::new(self.data.seed, CORPUS_STREAM);
                let base = DataSource::uniform(m);
                DataSource::corpus((0..self.data.size).map(|_| base.sample(&mut r)).collect())
            }
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hash_config(self)
    }
}

/// SHA-256 (hex) of a value's JSON serialization.
pub fn hash_config<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("config serializes");
    hex::encode(Sha256::digest(json.as_bytes()))
}

fn direction_kappa(policies: &[PolicyDescriptor]) -> Result<f64> {
    let fwd = policies.iter().find_map(|p| match p {
        PolicyDescriptor::Cs(k) => Some(*k),
        _ => None,
    });
    let rev = policies.iter().find_map(|p| match p {
        PolicyDescriptor::ReverseCs(k) => Some(*k),
        _ => None,
    });
    match (fwd, rev) {
        (Some(a), Some(b)) if a == b => Ok(a),
        _ => Err(invalid("direction experiment needs cs:K and reverse-cs:K with the same K")),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub loss_ema: f64,
    /// `‖h_i‖` for i = 0..N, batch mean.
    pub h_norms: Vec<f64>,
    pub max_grad_norm: f64,
    pub m0: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct M0Point {
    pub step: usize,
    pub m0: Option<f64>,
    pub l0: Option<f64>,
    pub per_block: Vec<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunRecord {
    pub policy: String,
    pub seed: u64,
    pub config_hash: String,
    pub rows: Vec<LogRow>,
    /// Smoothed loss after every step.
    #[serde(skip)]
    pub ema_trace: Vec<f64>,
    pub m0: Vec<M0Point>,
    pub steps_run: usize,
    pub diverged_at: Option<usize>,
    pub error: Option<String>,
    pub final_loss_ema: f64,
    pub oscillation_score: f64,
    pub layer_scores: Vec<f64>,
    /// `M₀` of the final model, when the experiment needs it.
    pub final_m0: Option<f64>,
    #[serde(skip)]
    pub wall_seconds: f64,
    /// Serialized final model when `train.save_checkpoints` is set.
    #[serde(skip)]
    pub checkpoint: Option<Vec<u8>>,
}

impl RunRecord {
    pub fn label(&self) -> String {
        format!("{}_seed{}", file_safe(&self.policy), self.seed)
    }

    pub fn diverged(&self) -> bool {
        self.diverged_at.is_some()
    }

    /// First step whose smoothed loss is at or below `threshold`.
    pub fn steps_to_threshold(&self, threshold: f64) -> Option<usize> {
        self.ema_trace.iter().position(|&e| e <= threshold).map(|i| i + 1)
    }

    /// Per-step CSV: `step,loss,loss_ema,h_norm_0..h_norm_{N-1},max_grad_norm,m0_if_checkpoint`.
    pub fn to_csv(&self, n: usize) -> String {
        let mut s = String::from("step,loss,loss_ema");
        for i in 0..n {
            let _ = write!(s, ",h_norm_{i}");
        }
        s.push_str(",max_grad_norm,m0_if_checkpoint\n");
        for r in &self.rows {
            let _ = write!(s, "{},{:e},{:e}", r.step, r.loss, r.loss_ema);
            for h in &r.h_norms {
                let _ = write!(s, ",{h:e}");
            }
            let _ = write!(s, ",{:e},", r.max_grad_norm);
            if let Some(m) = r.m0 {
                let _ = write!(s, "{m:e}");
            }
            s.push('\n');
        }
        s
    }

    pub fn m0_csv(&self, n: usize) -> String {
        let mut s = String::from("step,m0,l0");
        for i in 1..=n {
            let _ = write!(s, ",block_{i}");
        }
        s.push_str(",error\n");
        for p in &self.m0 {
            let _ = write!(s, "{},{},{}", p.step, opt_num(p.m0), opt_num(p.l0));
            for i in 0..n {
                let _ = write!(s, ",{}", opt_num(p.per_block.get(i).copied()));
            }
            let _ = writeln!(s, ",{}", p.error.as_deref().unwrap_or(""));
        }
        s
    }
}

fn opt_num(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

pub fn file_safe(policy: &str) -> String {
    policy
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

/// Mean over layers of the mean sliding-window standard deviation of each
/// layer's norm trace. Traces shorter than `window` use one window over the
/// whole trace; fewer than 2 points score 0.
pub fn oscillation_score(traces: &[Vec<f64>], window: usize) -> (f64, Vec<f64>) {
    let per_layer: Vec<f64> = traces
        .iter()
        .map(|t| {
            if t.len() < 2 {
                return 0.0;
            }
            let w = window.min(t.len()).max(2);
            let stds: Vec<f64> = t.windows(w).map(std_dev).collect();
            stds.iter().sum::<f64>() / stds.len() as f64
        })
        .collect();
    let score = if per_layer.is_empty() {
        0.0
    } else {
        per_layer.iter().sum::<f64>() / per_layer.len() as f64
    };
    (score, per_layer)
}

#[derive(Clone, Debug)]
struct Cell {
    policy: PolicyDescriptor,
    seed: u64,
}

fn build_model(cfg: &ExperimentConfig, policy: &PolicyDescriptor, seed: u64) -> Result<UNetModel> {
    let md = &cfg.model;
    let mut prng = Rng::new(seed, POLICY_STREAM);
    let pol = policy.instantiate(md.n, md.channels, md.reduction, cfg.unsafe_kappa, &mut prng)?;
    let mut model = init_unet(md.m, md.l, md.n, pol, &mut Rng::new(seed, INIT_STREAM))?;
    if md.last_layer_gain != 1.0 {
        model.scale_last_layers(md.last_layer_gain);
    }
    Ok(model)
}

fn estimate_point(cfg: &ExperimentConfig, model: &UNetModel, seed: u64, step: usize) -> M0Point {
    let mut r = Rng::new(seed, M0_STREAM).derive(step as u64);
    match estimate_m0_l0(model, cfg.m0.probes, cfg.m0.ascent_steps, &mut r) {
        Ok(e) => M0Point {
            step,
            m0: Some(e.m0),
            l0: Some(e.l0),
            per_block: e.per_block,
            error: None,
        },
        Err(e) => M0Point {
            step,
            m0: None,
            l0: None,
            per_block: Vec::new(),
            error: Some(e.to_string()),
        },
    }
}

fn run_cell(cfg: &ExperimentConfig, cell: &Cell, sched: &DiffusionSchedule, data: &DataSource, hash: &str) -> RunRecord {
    let start = Instant::now();
    let n = cfg.model.n;
    let mut rec = RunRecord {
        policy: cell.policy.to_string(),
        seed: cell.seed,
        config_hash: hash.to_string(),
        rows: Vec::new(),
        ema_trace: Vec::with_capacity(cfg.train.steps),
        m0: Vec::new(),
        steps_run: 0,
        diverged_at: None,
        error: None,
        final_loss_ema: f64::NAN,
        oscillation_score: 0.0,
        layer_scores: Vec::new(),
        final_m0: None,
        wall_seconds: 0.0,
        checkpoint: None,
    };
    let mut model = match build_model(cfg, &cell.policy, cell.seed) {
        Ok(m) => m,
        Err(e) => {
            rec.error = Some(e.to_string());
            return rec;
        }
    };
    let track = cfg.m0.interval > 0;
    if track {
        rec.m0.push(estimate_point(cfg, &model, cell.seed, 0));
    }
    let mut opt = cfg.optimizer.to_config().build();
    let mut rng = Rng::new(cell.seed, DATA_STREAM);
    let mut ema = f64::NAN;
    let d = cfg.train.ema_decay;
    for step in 1..=cfg.train.steps {
        let batch: Vec<Vec<f64>> = (0..cfg.train.batch).map(|_| data.sample(&mut rng)).collect();
        let report = match train_step(&mut model, &batch, sched, &mut opt, &mut rng) {
            Ok(r) => r,
            Err(Error::Divergence(r)) => {
                rec.diverged_at = Some(step);
                rec.rows.push(LogRow {
                    step,
                    loss: r.loss,
                    loss_ema: ema,
                    h_norms: r.feature_norms.clone(),
                    max_grad_norm: r.grad_norms.iter().map(|g| g.1).fold(f64::NAN, f64::max),
                    m0: None,
                });
                break;
            }
            Err(e) => {
                rec.error = Some(e.to_string());
                break;
            }
        };
        rec.steps_run = step;
        ema = if step == 1 { report.loss } else { d * ema + (1.0 - d) * report.loss };
        rec.ema_trace.push(ema);
        let mut m0 = None;
        if track && step % cfg.m0.interval == 0 {
            let p = estimate_point(cfg, &model, cell.seed, step);
            m0 = p.m0;
            rec.m0.push(p);
        }
        if step % cfg.train.log_interval == 0 || step == cfg.train.steps {
            rec.rows.push(LogRow {
                step,
                loss: report.loss,
                loss_ema: ema,
                h_norms: report.feature_norms,
                max_grad_norm: report.grad_norms.iter().map(|g| g.1).fold(0.0, f64::max),
                m0,
            });
        }
    }
    rec.final_loss_ema = ema;
    let traces: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            rec.rows
                .iter()
                .filter(|r| r.h_norms.len() == n && r.h_norms.iter().all(|v| v.is_finite()))
                .map(|r| r.h_norms[i])
                .collect()
        })
        .collect();
    let (score, layers) = oscillation_score(&traces, cfg.train.window);
    rec.oscillation_score = score;
    rec.layer_scores = layers;
    if cfg.kind == ExperimentKind::Direction && rec.error.is_none() && rec.diverged_at.is_none() {
        rec.final_m0 = estimate_point(cfg, &model, cell.seed, usize::MAX >> 1).m0;
    }
    if cfg.train.save_checkpoints {
        rec.checkpoint = Some(crate::checkpoint::to_bytes(&model));
    }
    rec.wall_seconds = start.elapsed().as_secs_f64();
    rec
}

/// Summary statistics for one policy over its seeds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PolicySummary {
    pub policy: String,
    pub runs: usize,
    pub diverged: usize,
    pub failed: usize,
    pub median_final_loss_ema: f64,
    pub median_oscillation: f64,
    pub median_steps_to_threshold: Option<f64>,
    pub median_final_m0: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub threshold: f64,
    /// `(policy, median steps-to-threshold or None for never, unit median / policy median)`.
    pub per_policy: Vec<(String, Option<f64>, Option<f64>)>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DirectionReport {
    pub kappa: f64,
    pub forward_final: f64,
    pub reverse_final: f64,
    /// Seeds where forward ≤ reverse in final smoothed loss.
    pub forward_wins: usize,
    pub seeds: usize,
    /// Median `M₀` of the forward runs' final models.
    pub m0: Option<f64>,
    /// Σ κ^{i-1}·M₀^i and Σ κ^{N-i+1}·M₀^i.
    pub s_forward: Option<f64>,
    pub s_reverse: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepPoint {
    pub kappa: f64,
    pub median_final_loss_ema: f64,
    pub diverged: usize,
    pub runs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct M0Summary {
    /// Median over runs of `M₀` at each checkpoint step.
    pub steps: Vec<usize>,
    pub median_m0: Vec<f64>,
    /// Every estimate at every checkpoint of every run is ≥ 1.
    pub all_at_least_one: bool,
    /// Per checkpoint: median over runs of the minimum per-block estimate.
    pub median_min_block: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub kind: ExperimentKind,
    pub policies: Vec<PolicySummary>,
    pub convergence: Option<ConvergenceReport>,
    pub direction: Option<DirectionReport>,
    pub sweep: Option<Vec<SweepPoint>>,
    pub m0: Option<M0Summary>,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub records: Vec<RunRecord>,
    pub report: ExperimentReport,
}

impl ExperimentOutput {
    /// Records of one policy, in seed order.
    pub fn runs_of(&self, policy: &str) -> Vec<&RunRecord> {
        self.records.iter().filter(|r| r.policy == policy).collect()
    }

    pub fn policy_summary(&self, policy: &str) -> Option<&PolicySummary> {
        self.report.policies.iter().find(|p| p.policy == policy)
    }
}

fn finite_median(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        f64::NAN
    } else {
        // Diverged runs carry NaN/inf; total order puts NaN last.
        let mut s = v;
        s.sort_by(f64::total_cmp);
        crate::stats::quantile_sorted(&s, 0.5)
    }
}

fn summarize(cfg: &ExperimentConfig, policies: &[PolicyDescriptor], records: &[RunRecord]) -> ExperimentReport {
    let mut threshold = None;
    if cfg.kind == ExperimentKind::Convergence {
        threshold = cfg.convergence.threshold.or_else(|| {
            let unit: Vec<f64> = records.iter().filter(|r| r.policy == "unit").map(|r| r.final_loss_ema).collect();
            cfg.convergence.threshold_factor.map(|f| f * finite_median(unit.into_iter()))
        });
    }
    let mut seen = Vec::new();
    let mut summaries = Vec::new();
    for p in policies {
        let name = p.to_string();
        if seen.contains(&name) {
            continue;
        }
        seen.push(name.clone());
        let runs: Vec<&RunRecord> = records.iter().filter(|r| r.policy == name).collect();
        let stt = threshold.map(|t| {
            finite_median(
                runs.iter()
                    .map(|r| r.steps_to_threshold(t).map_or(f64::INFINITY, |s| s as f64)),
            )
        });
        let m0s: Vec<f64> = runs.iter().filter_map(|r| r.final_m0).collect();
        summaries.push(PolicySummary {
            policy: name,
            runs: runs.len(),
            diverged: runs.iter().filter(|r| r.diverged()).count(),
            failed: runs.iter().filter(|r| r.error.is_some()).count(),
            median_final_loss_ema: finite_median(runs.iter().map(|r| r.final_loss_ema)),
            median_oscillation: median(&runs.iter().map(|r| r.oscillation_score).collect::<Vec<_>>()),
            median_steps_to_threshold: stt,
            median_final_m0: (!m0s.is_empty()).then(|| median(&m0s)),
        });
    }

    let convergence = threshold.map(|t| {
        let unit = summaries
            .iter()
            .find(|s| s.policy == "unit")
            .and_then(|s| s.median_steps_to_threshold);
        ConvergenceReport {
            threshold: t,
            per_policy: summaries
                .iter()
                .map(|s| {
                    let m = s.median_steps_to_threshold.filter(|v| v.is_finite());
                    let ratio = match (unit, m) {
                        (Some(u), Some(v)) if u.is_finite() => Some(u / v),
                        _ => None,
                    };
                    (s.policy.clone(), m, ratio)
                })
                .collect(),
        }
    });

    let direction = (cfg.kind == ExperimentKind::Direction).then(|| {
        let kappa = direction_kappa(policies).expect("validated");
        let fwd_name = PolicyDescriptor::Cs(kappa).to_string();
        let rev_name = PolicyDescriptor::ReverseCs(kappa).to_string();
        let get = |name: &str| summaries.iter().find(|s| s.policy == name).cloned().expect("ran");
        let (f, r) = (get(&fwd_name), get(&rev_name));
        let mut wins = 0;
        for &seed in &cfg.seeds {
            let fl = records.iter().find(|x| x.policy == fwd_name && x.seed == seed).map(|x| x.final_loss_ema);
            let rl = records.iter().find(|x| x.policy == rev_name && x.seed == seed).map(|x| x.final_loss_ema);
            if let (Some(a), Some(b)) = (fl, rl) {
                if a <= b || (a.is_finite() && !b.is_finite()) {
                    wins += 1;
                }
            }
        }
        let n = cfg.model.n;
        let m0 = f.median_final_m0;
        let fwd = crate::scaling::cs_coefficients(kappa, n).expect("validated");
        let rev = crate::scaling::reverse_cs_coefficients(kappa, n).expect("validated");
        DirectionReport {
            kappa,
            forward_final: f.median_final_loss_ema,
            reverse_final: r.median_final_loss_ema,
            forward_wins: wins,
            seeds: cfg.seeds.len(),
            m0,
            s_forward: m0.map(|m| skip_bound_sum(&fwd, m)),
            s_reverse: m0.map(|m| skip_bound_sum(&rev, m)),
        }
    });

    let sweep = (cfg.kind == ExperimentKind::KappaSweep).then(|| {
        cfg.sweep
            .kappas
            .iter()
            .zip(&summaries)
            .map(|(&kappa, s)| SweepPoint {
                kappa,
                median_final_loss_ema: s.median_final_loss_ema,
                diverged: s.diverged,
                runs: s.runs,
            })
            .collect()
    });

    let m0 = (cfg.m0.interval > 0).then(|| {
        let mut steps: Vec<usize> = records.iter().flat_map(|r| r.m0.iter().map(|p| p.step)).collect();
        steps.sort_unstable();
        steps.dedup();
        let at = |step: usize, f: &dyn Fn(&M0Point) -> Option<f64>| -> Vec<f64> {
            records
                .iter()
                .filter_map(|r| r.m0.iter().find(|p| p.step == step).and_then(f))
                .collect()
        };
        let median_m0 = steps.iter().map(|&s| finite_median(at(s, &|p| p.m0).into_iter())).collect();
        let median_min_block = steps
            .iter()
            .map(|&s| {
                finite_median(at(s, &|p| p.per_block.iter().copied().reduce(f64::min)).into_iter())
            })
            .collect();
        let all_at_least_one = records.iter().all(|r| {
            r.m0.iter()
                .all(|p| p.m0.is_some() && p.per_block.iter().all(|&b| b >= 1.0))
        });
        M0Summary {
            steps,
            median_m0,
            all_at_least_one,
            median_min_block,
        }
    });

    ExperimentReport {
        kind: cfg.kind,
        policies: summaries,
        convergence,
        direction,
        sweep,
        m0,
    }
}

/// Runs every (policy, seed) cell on up to `jobs` threads. Output does not
/// depend on `jobs`.
pub fn run_experiment(cfg: &ExperimentConfig, jobs: usize) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let policies = cfg.effective_policies()?;
    let sched = cfg.schedule_built()?;
    let data = cfg.data_source()?;
    let hash = cfg.hash();
    let cells: Vec<Cell> = policies
        .iter()
        .flat_map(|p| cfg.seeds.iter().map(move |&seed| Cell { policy: *p, seed }))
        .collect();
    let run = |c: &Cell| run_cell(cfg, c, &sched, &data, &hash);
    let records: Vec<RunRecord> = if jobs <= 1 {
        cells.iter().map(run).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| invalid(format!("thread pool: {e}")))?;
        pool.install(|| cells.par_iter().map(run).collect())
    };
    let report = summarize(cfg, &policies, &records);
    Ok(ExperimentOutput {
        config: cfg.clone(),
        config_hash: hash,
        records,
        report,
    })
}

fn with_kind(cfg: &ExperimentConfig, kind: ExperimentKind) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.kind = kind;
    c
}

pub fn run_oscillation_experiment(cfg: &ExperimentConfig, jobs: usize) -> Result<ExperimentOutput> {
    run_experiment(&with_kind(cfg, ExperimentKind::Oscillation), jobs)
}

pub fn run_convergence_experiment(cfg: &ExperimentConfig, jobs: usize) -> Result<ExperimentOutput> {
    run_experiment(&with_kind(cfg, ExperimentKind::Convergence), jobs)
}

pub fn run_direction_experiment(cfg: &ExperimentConfig, jobs: usize) -> Result<ExperimentOutput> {
    run_experiment(&with_kind(cfg, ExperimentKind::Direction), jobs)
}

pub fn run_kappa_sweep(cfg: &ExperimentConfig, jobs: usize) -> Result<ExperimentOutput> {
    run_experiment(&with_kind(cfg, ExperimentKind::KappaSweep), jobs)
}

pub fn run_m0_tracking(cfg: &ExperimentConfig, jobs: usize) -> Result<ExperimentOutput> {
    run_experiment(&with_kind(cfg, ExperimentKind::M0Tracking), jobs)
}

/// Creates `base`, or `base-1`, `base-2`, ... if it already exists.
pub fn create_unique_dir(base: &Path) -> Result<PathBuf> {
    if let Some(parent) = base.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut candidate = base.to_path_buf();
    let mut k = 0;
    loop {
        match fs::create_dir(&candidate) {
            Ok(()) => return Ok(candidate),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                k += 1;
                let mut name = base.file_name().unwrap_or_default().to_os_string();
                name.push(format!("-{k}"));
                candidate = base.with_file_name(name);
            }
            Err(e) => return Err(e.into()),
        }
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    name: &'a str,
    kind: ExperimentKind,
    config_hash: &'a str,
    version: &'static str,
    rng_scheme: &'static str,
    seeds: &'a [u64],
    policies: Vec<String>,
    norm_definition: &'static str,
    config: &'a ExperimentConfig,
}

pub fn summary_csv(out: &ExperimentOutput) -> String {
    let threshold = out.report.convergence.as_ref().map(|c| c.threshold);
    let mut s = String::from(
        "policy,seed,steps_run,diverged_at,error,final_loss_ema,oscillation_score,steps_to_threshold,final_m0\n",
    );
    for r in &out.records {
        let stt = threshold.map(|t| r.steps_to_threshold(t).map_or("inf".to_string(), |v| v.to_string()));
        let _ = writeln!(
            s,
            "{},{},{},{},{},{:e},{:e},{},{}",
            r.policy,
            r.seed,
            r.steps_run,
            r.diverged_at.map(|v| v.to_string()).unwrap_or_default(),
            r.error.as_deref().unwrap_or("").replace([',', '\n'], ";"),
            r.final_loss_ema,
            r.oscillation_score,
            stt.unwrap_or_default(),
            opt_num(r.final_m0),
        );
    }
    s
}

pub fn policies_csv(out: &ExperimentOutput) -> String {
    let mut s = String::from(
        "policy,runs,diverged,failed,median_final_loss_ema,median_oscillation,median_steps_to_threshold,median_final_m0\n",
    );
    for p in &out.report.policies {
        let _ = writeln!(
            s,
            "{},{},{},{},{:e},{:e},{},{}",
            p.policy,
            p.runs,
            p.diverged,
            p.failed,
            p.median_final_loss_ema,
            p.median_oscillation,
            opt_num(p.median_steps_to_threshold),
            opt_num(p.median_final_m0)
        );
    }
    s
}

pub fn summary_text(out: &ExperimentOutput) -> String {
    let mut s = format!(
        "experiment {} ({:?}) hash {}\n{}\n",
        out.config.name, out.report.kind, out.config_hash, NORM_NOTE
    );
    for p in &out.report.policies {
        let _ = writeln!(
            s,
            "  {:<20} runs={} diverged={} final_loss_ema={:.6e} oscillation={:.6e}",
            p.policy, p.runs, p.diverged, p.median_final_loss_ema, p.median_oscillation
        );
    }
    if let Some(c) = &out.report.convergence {
        let _ = writeln!(s, "threshold {:.6e}", c.threshold);
        for (p, m, r) in &c.per_policy {
            let _ = writeln!(s, "  {p:<20} steps={} speedup_vs_unit={}", opt_num(*m), opt_num(*r));
        }
    }
    if let Some(d) = &out.report.direction {
        let _ = writeln!(
            s,
            "direction kappa={} forward={:.6e} reverse={:.6e} forward_wins={}/{} M0={} S={} S_r={}",
            d.kappa,
            d.forward_final,
            d.reverse_final,
            d.forward_wins,
            d.seeds,
            opt_num(d.m0),
            opt_num(d.s_forward),
            opt_num(d.s_reverse)
        );
    }
    if let Some(sw) = &out.report.sweep {
        for p in sw {
            let _ = writeln!(
                s,
                "  kappa={:<6} final_loss_ema={:.6e} diverged={}/{}",
                p.kappa, p.median_final_loss_ema, p.diverged, p.runs
            );
        }
    }
    if let Some(m) = &out.report.m0 {
        let _ = writeln!(s, "M0 all >= 1: {}", m.all_at_least_one);
        for ((st, v), b) in m.steps.iter().zip(&m.median_m0).zip(&m.median_min_block) {
            let _ = writeln!(s, "  step {st:>6} median M0={v:.6} median min block={b:.6}");
        }
    }
    s
}

/// Writes the run directory under `base/<name>` (suffixed if taken) and
/// returns its path.
pub fn write_outputs(out: &ExperimentOutput, base: &Path) -> Result<PathBuf> {
    let dir = create_unique_dir(&base.join(&out.config.name))?;
    let manifest = Manifest {
        name: &out.config.name,
        kind: out.config.kind,
        config_hash: &out.config_hash,
        version: env!("CARGO_PKG_VERSION"),
        rng_scheme: RNG_SCHEME,
        seeds: &out.config.seeds,
        policies: out.config.effective_policies()?.iter().map(|p| p.to_string()).collect(),
        norm_definition: NORM_NOTE,
        config: &out.config,
    };
    fs::write(dir.join("manifest.json"), to_json(&manifest))?;
    fs::write(dir.join("report.json"), to_json(&out.report))?;
    fs::write(dir.join("summary.csv"), summary_csv(out))?;
    fs::write(dir.join("policies.csv"), policies_csv(out))?;
    fs::write(dir.join("summary.txt"), summary_text(out))?;
    let runs = dir.join("runs");
    fs::create_dir(&runs)?;
    let n = out.config.model.n;
    let mut timing = String::from("policy,seed,wall_seconds\n");
    for r in &out.records {
        fs::write(runs.join(format!("{}.csv", r.label())), r.to_csv(n))?;
        if let Some(bytes) = &r.checkpoint {
            fs::write(runs.join(format!("{}.ckpt", r.label())), bytes)?;
        }
        if !r.m0.is_empty() {
            fs::write(runs.join(format!("{}_m0.csv", r.label())), r.m0_csv(n))?;
        }
        let _ = writeln!(timing, "{},{},{:.3}", r.policy, r.seed, r.wall_seconds);
    }
    // Wall time is kept apart so every CSV above is reproducible byte for byte.
    fs::write(dir.join("timing.txt"), timing)?;
    Ok(dir)
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize + ?Sized>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> ExperimentConfig {
        ExperimentConfig {
            name: "t".into(),
            seeds: vec![0, 1],
            policies: vec!["unit".into(), "cs:0.7".into()],
            model: ModelSection {
                m: 8,
                l: 2,
                n: 2,
                channels: 4,
                reduction: 16,
                last_layer_gain: 1.0,
            },
            train: TrainSection {
                steps: 20,
                batch: 4,
                log_interval: 5,
                window: 3,
                ema_decay: 0.9,
                save_checkpoints: false,
            },
            ..Default::default()
        }
    }

    #[test]
    fn single_step_single_row() {
        let mut c = quick();
        c.train.steps = 1;
        let out = run_experiment(&c, 1).unwrap();
        assert!(out.records.iter().all(|r| r.rows.len() == 1));
    }

    #[test]
    fn jobs_do_not_change_output() {
        let c = quick();
        let a = run_experiment(&c, 1).unwrap();
        let b = run_experiment(&c, 3).unwrap();
        assert_eq!(summary_csv(&a), summary_csv(&b));
        for (x, y) in a.records.iter().zip(&b.records) {
            assert_eq!(x.to_csv(2), y.to_csv(2));
        }
    }

    #[test]
    fn validation_names_field() {
        let mut c = quick();
        c.train.steps = 0;
        let e = c.validate().unwrap_err().to_string();
        assert!(e.contains("train.steps"), "{e}");
        let mut c = quick();
        c.policies = vec!["cs:1.3".into()];
        assert!(c.validate().is_err());
        c.unsafe_kappa = true;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn oscillation_score_basics() {
        let (s, _) = oscillation_score(&[vec![1.0; 10]], 4);
        assert_eq!(s, 0.0);
        let (s, _) = oscillation_score(&[vec![0.0, 2.0, 0.0, 2.0]], 2);
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unique_dirs() {
        let tmp = tempfile::tempdir().unwrap();
        let a = create_unique_dir(&tmp.path().join("x")).unwrap();
        let b = create_unique_dir(&tmp.path().join("x")).unwrap();
        assert_ne!(a, b);
        assert!(b.ends_with("x-1"));
    }
}
