//! Long-skip coefficient policies.
//!
//! A [`ScalingPolicy`] decides the factor κ_i applied to the i-th long skip
//! connection (i = 1 is the outermost). Fixed policies produce one scalar per
//! connection; the learnable policy predicts per-channel factors from the
//! skip feature itself with a small squeeze-and-excitation network.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::diffusion::{noise_ratio_stats, DataSource, DiffusionSchedule, RatioStats};
use crate::error::{invalid, Error, Result};
use crate::init::kaiming_init;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const DEFAULT_REDUCTION: usize = 16;
pub const DEFAULT_CHANNELS: usize = 16;
/// Upper end of the target interval for Σκ_j² in [`estimate_kappa_range`].
pub const RATIO_UPPER_TARGET: f64 = 5.0;
const BISECTION_TOL: f64 = 1e-10;

/// κ_i = κ^{i-1} for i = 1..=N.
pub fn cs_coefficients(kappa: f64, n: usize) -> Result<Vec<f64>> {
    check_kappa(kappa, true)?;
    Ok((0..n).map(|i| int_pow(kappa, i)).collect())
}

/// κ_i = κ^{N-i+1} for i = 1..=N.
pub fn reverse_cs_coefficients(kappa: f64, n: usize) -> Result<Vec<f64>> {
    check_kappa(kappa, true)?;
    Ok((0..n).map(|i| int_pow(kappa, n - i)).collect())
}

/// `base^exp` by repeated multiplication, so every caller gets identical bits.
pub fn int_pow(base: f64, exp: usize) -> f64 {
    (0..exp).fold(1.0, |acc, _| acc * base)
}

fn check_kappa(kappa: f64, allow_above_one: bool) -> Result<()> {
    if !(kappa > 0.0) || !kappa.is_finite() {
        return Err(invalid(format!("kappa must be positive and finite, got {kappa}")));
    }
    if kappa > 1.0 && !allow_above_one {
        return Err(invalid(format!(
            "kappa {kappa} > 1 requires the unsafe-kappa flag"
        )));
    }
    Ok(())
}

/// Σ_i κ_i·M₀^i, the skip part of the robustness bound.
pub fn skip_bound_sum(kappas: &[f64], m0: f64) -> f64 {
    kappas
        .iter()
        .enumerate()
        .map(|(i, k)| k * m0.powi(i as i32 + 1))
        .sum()
}

/// Σ_j κ^{2(j-1)} for j = 1..=N.
pub fn geometric_square_sum(kappa: f64, n: usize) -> f64 {
    (0..n).map(|j| kappa.powi(2 * j as i32)).sum()
}

/// Squeeze-and-excitation pair mapping `dim` channels to `n_min` and back.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapter {
    pub dim: usize,
    pub ratio: usize,
    /// Encoder, `n_min × hidden` then `hidden × dim`.
    pub enc_w1: Tensor,
    pub enc_w2: Tensor,
    /// Decoder, `dim × hidden` then `hidden × n_min`.
    pub dec_w1: Tensor,
    pub dec_w2: Tensor,
}

impl Adapter {
    pub fn hidden(&self) -> usize {
        self.enc_w2.rows()
    }
}

/// Calibration network ζ(x) = W₁·ReLU(W₂·x) over `n_min` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibNet {
    pub n_min: usize,
    pub reduction: usize,
    /// `n_min × hidden`
    pub w1: Tensor,
    /// `hidden × n_min`
    pub w2: Tensor,
    pub adapters: Vec<Adapter>,
}

impl CalibNet {
    /// Hidden width `max(1, n_min / r)`.
    pub fn hidden_width(n_min: usize, reduction: usize) -> usize {
        (n_min / reduction.max(1)).max(1)
    }

    pub fn new(n_min: usize, reduction: usize, rng: &mut Rng) -> Result<Self> {
        if n_min == 0 || reduction == 0 {
            return Err(invalid("calibration net needs n_min >= 1 and r >= 1"));
        }
        let h = Self::hidden_width(n_min, reduction);
        Ok(Self {
            n_min,
            reduction,
            w1: kaiming_init(n_min, h, rng)?.with_requires_grad(true),
            w2: kaiming_init(h, n_min, rng)?.with_requires_grad(true),
            adapters: Vec::new(),
        })
    }

    pub fn zeros(n_min: usize, reduction: usize) -> Self {
        let h = Self::hidden_width(n_min, reduction);
        Self {
            n_min,
            reduction,
            w1: Tensor::zeros(&[n_min, h]).with_requires_grad(true),
            w2: Tensor::zeros(&[h, n_min]).with_requires_grad(true),
            adapters: Vec::new(),
        }
    }

    pub fn adapter_for(&self, dim: usize) -> Option<&Adapter> {
        self.adapters.iter().find(|a| a.dim == dim)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.w1, &self.w2];
        for a in &self.adapters {
            out.extend([&a.enc_w1, &a.enc_w2, &a.dec_w1, &a.dec_w2]);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.w1, &mut self.w2];
        for a in &mut self.adapters {
            out.extend([&mut a.enc_w1, &mut a.enc_w2, &mut a.dec_w1, &mut a.dec_w2]);
        }
        out
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        let mut out = vec![format!("{prefix}.w1"), format!("{prefix}.w2")];
        for a in &self.adapters {
            for part in ["enc_w1", "enc_w2", "dec_w1", "dec_w2"] {
                out.push(format!("{prefix}.adapter{}.{part}", a.dim));
            }
        }
        out
    }

    /// Puts every parameter on the tape, in [`Self::params`] order.
    pub fn register(&self, tape: &mut Tape) -> CalibVars {
        let vars = self.params().into_iter().map(|t| tape.leaf(t)).collect();
        CalibVars {
            vars,
            dims: self.adapters.iter().map(|a| a.dim).collect(),
        }
    }
}

/// Tape handles for a [`CalibNet`]'s parameters.
#[derive(Clone, Debug)]
pub struct CalibVars {
    pub vars: Vec<Var>,
    dims: Vec<usize>,
}

impl CalibVars {
    fn w1(&self) -> Var {
        self.vars[0]
    }

    fn w2(&self) -> Var {
        self.vars[1]
    }

    fn adapter(&self, dim: usize) -> Option<[Var; 4]> {
        let k = self.dims.iter().position(|&d| d == dim)?;
        let base = 2 + 4 * k;
        Some([
            self.vars[base],
            self.vars[base + 1],
            self.vars[base + 2],
            self.vars[base + 3],
        ])
    }
}

/// Adds encoder/decoder pairs for each distinct channel count in `dims`.
///
/// A single distinct count equal to `n_min` needs no adapter. Otherwise every
/// distinct count gets one pair with compression ratio `max(1, ⌊N_i/4⌋)`.
pub fn attach_adapters(calib: &CalibNet, dims: &[usize], rng: &mut Rng) -> Result<CalibNet> {
    if dims.is_empty() {
        return Err(invalid("attach_adapters needs at least one dimension"));
    }
    let mut distinct: Vec<usize> = dims.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct[0] == 0 {
        return Err(invalid("channel count must be >= 1"));
    }
    if distinct[0] != calib.n_min {
        return Err(Error::Shape {
            op: "attach_adapters",
            lhs: vec![calib.n_min],
            rhs: vec![distinct[0]],
        });
    }
    let mut out = calib.clone();
    out.adapters.clear();
    if distinct.len() == 1 {
        return Ok(out);
    }
    for &dim in &distinct {
        let ratio = (dim / 4).max(1);
        let h = (dim / ratio).max(1);
        out.adapters.push(Adapter {
            dim,
            ratio,
            enc_w1: kaiming_init(calib.n_min, h, rng)?.with_requires_grad(true),
            enc_w2: kaiming_init(h, dim, rng)?.with_requires_grad(true),
            dec_w1: kaiming_init(dim, h, rng)?.with_requires_grad(true),
            dec_w2: kaiming_init(h, calib.n_min, rng)?.with_requires_grad(true),
        });
    }
    Ok(out)
}

fn se_pair(tape: &mut Tape, outer: Var, inner: Var, x: Var) -> Result<Var> {
    let h = tape.matmul(inner, x)?;
    let h = tape.relu(h);
    tape.matmul(outer, h)
}

/// Recorded version of [`ls_coefficients`]: `x` has shape `[B, C, D]` and the
/// result `[B, C, 1]`.
pub fn ls_coefficients_on_tape(
    tape: &mut Tape,
    calib: &CalibNet,
    vars: &CalibVars,
    x: Var,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(Error::Shape {
            op: "ls_coefficients",
            lhs: shape,
            rhs: vec![0, calib.n_min, 0],
        });
    }
    let (b, c, d) = (shape[0], shape[1], shape[2]);
    let adapter = if c == calib.n_min && calib.adapter_for(c).is_none() {
        None
    } else {
        match vars.adapter(c) {
            Some(a) => Some(a),
            None => {
                return Err(Error::Shape {
                    op: "ls_coefficients",
                    lhs: shape,
                    rhs: vec![b, calib.n_min, d],
                })
            }
        }
    };

    // GAP over the last axis, laid out as channels × batch.
    let flat = tape.reshape(x, &[b * c, d])?;
    let pool = tape.constant(Tensor::filled(&[d, 1], 1.0 / d as f64));
    let pooled = tape.matmul(flat, pool)?;
    let pooled = tape.reshape(pooled, &[b, c])?;
    let mut g = tape.transpose(pooled)?;

    if let Some([e1, e2, _, _]) = adapter {
        g = se_pair(tape, e1, e2, g)?;
    }
    let mut z = se_pair(tape, vars.w1(), vars.w2(), g)?;
    if let Some([_, _, d1, d2]) = adapter {
        z = se_pair(tape, d1, d2, z)?;
    }
    let k = tape.sigmoid(z);
    let k = tape.transpose(k)?;
    tape.reshape(k, &[b, c, 1])
}

/// κ = σ(ζ(GAP(x))) for a feature `x` of shape `[B, C, D]`.
pub fn ls_coefficients(calib: &CalibNet, skip_input: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = calib.register(&mut tape);
    let x = tape.leaf(skip_input);
    let k = ls_coefficients_on_tape(&mut tape, calib, &vars, x)?;
    Ok(tape.tensor(k))
}

/// Learnable scaling state: shared or per-connection calibration nets, and
/// the channel view used to fold an `m`-vector into `channels × (m/channels)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Learnable {
    pub channels: usize,
    pub per_connection: bool,
    pub nets: Vec<CalibNet>,
}

impl Learnable {
    pub fn net_for(&self, level: usize) -> &CalibNet {
        if self.per_connection {
            &self.nets[level - 1]
        } else {
            &self.nets[0]
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ScalingPolicy {
    Unit,
    Universal { kappa: f64 },
    ExponentialCS { kappa: f64 },
    ReverseCS { kappa: f64 },
    Learnable(Learnable),
}

impl ScalingPolicy {
    pub fn universal(kappa: f64) -> Result<Self> {
        check_kappa(kappa, false)?;
        Ok(Self::Universal { kappa })
    }

    pub fn cs(kappa: f64) -> Result<Self> {
        check_kappa(kappa, false)?;
        Ok(Self::ExponentialCS { kappa })
    }

    pub fn reverse_cs(kappa: f64) -> Result<Self> {
        check_kappa(kappa, false)?;
        Ok(Self::ReverseCS { kappa })
    }

    /// CS with κ > 1 allowed.
    pub fn cs_unsafe(kappa: f64) -> Result<Self> {
        check_kappa(kappa, true)?;
        Ok(Self::ExponentialCS { kappa })
    }

    pub fn learnable(
        channels: usize,
        reduction: usize,
        per_connection: bool,
        n_levels: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let count = if per_connection { n_levels } else { 1 };
        let nets = (0..count)
            .map(|_| CalibNet::new(channels, reduction, rng))
            .collect::<Result<_>>()?;
        Ok(Self::Learnable(Learnable {
            channels,
            per_connection,
            nets,
        }))
    }

    pub fn kappa(&self) -> Option<f64> {
        match self {
            Self::Universal { kappa } | Self::ExponentialCS { kappa } | Self::ReverseCS { kappa } => {
                Some(*kappa)
            }
            _ => None,
        }
    }

    pub fn is_learnable(&self) -> bool {
        matches!(self, Self::Learnable(_))
    }

    /// κ_i for `level` in `1..=n`, or `None` for the learnable policy.
    pub fn fixed_coefficient(&self, level: usize, n: usize) -> Option<f64> {
        match self {
            Self::Unit => Some(1.0),
            Self::Universal { kappa } => Some(*kappa),
            Self::ExponentialCS { kappa } => Some(int_pow(*kappa, level - 1)),
            Self::ReverseCS { kappa } => Some(int_pow(*kappa, n - level + 1)),
            Self::Learnable(_) => None,
        }
    }

    pub fn fixed_coefficients(&self, n: usize) -> Option<Vec<f64>> {
        (1..=n).map(|i| self.fixed_coefficient(i, n)).collect()
    }

    pub fn descriptor(&self) -> PolicyDescriptor {
        match self {
            Self::Unit => PolicyDescriptor::Unit,
            Self::Universal { kappa } => PolicyDescriptor::Universal(*kappa),
            Self::ExponentialCS { kappa } => PolicyDescriptor::Cs(*kappa),
            Self::ReverseCS { kappa } => PolicyDescriptor::ReverseCs(*kappa),
            Self::Learnable(l) => PolicyDescriptor::Learnable {
                per_connection: l.per_connection,
            },
        }
    }
}

/// Weight-free description of a policy, as written in config files.
///
/// Text forms: `unit`, `universal:K`, `cs:K`, `reverse-cs:K`, `ls`,
/// `ls-per-connection`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum PolicyDescriptor {
    Unit,
    Universal(f64),
    Cs(f64),
    ReverseCs(f64),
    Learnable { per_connection: bool },
}

impl PolicyDescriptor {
    pub fn kappa(&self) -> Option<f64> {
        match self {
            Self::Universal(k) | Self::Cs(k) | Self::ReverseCs(k) => Some(*k),
            _ => None,
        }
    }

    pub fn validate(&self, unsafe_kappa: bool) -> Result<()> {
        match self.kappa() {
            Some(k) => check_kappa(k, unsafe_kappa),
            None => Ok(()),
        }
    }

    /// Builds the policy; learnable variants draw fresh calibration weights.
    pub fn instantiate(
        &self,
        n_levels: usize,
        channels: usize,
        reduction: usize,
        unsafe_kappa: bool,
        rng: &mut Rng,
    ) -> Result<ScalingPolicy> {
        self.validate(unsafe_kappa)?;
        Ok(match *self {
            Self::Unit => ScalingPolicy::Unit,
            Self::Universal(kappa) => ScalingPolicy::Universal { kappa },
            Self::Cs(kappa) => ScalingPolicy::ExponentialCS { kappa },
            Self::ReverseCs(kappa) => ScalingPolicy::ReverseCS { kappa },
            Self::Learnable { per_connection } => {
                ScalingPolicy::learnable(channels, reduction, per_connection, n_levels, rng)?
            }
        })
    }
}

impl fmt::Display for PolicyDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Unit => write!(f, "unit"),
            Self::Universal(k) => write!(f, "universal:{k}"),
            Self::Cs(k) => write!(f, "cs:{k}"),
            Self::ReverseCs(k) => write!(f, "reverse-cs:{k}"),
            Self::Learnable {
                per_connection: false,
            } => write!(f, "ls"),
            Self::Learnable {
                per_connection: true,
            } => write!(f, "ls-per-connection"),
        }
    }
}

impl FromStr for PolicyDescriptor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let kappa = || -> Result<f64> {
            let a = arg.ok_or_else(|| invalid(format!("policy '{s}' needs a kappa, e.g. {name}:0.7")))?;
            a.trim()
                .parse::<f64>()
                .map_err(|e| invalid(format!("policy '{s}': {e}")))
        };
        let d = match name {
            "unit" => Self::Unit,
            "universal" => Self::Universal(kappa()?),
            "cs" => Self::Cs(kappa()?),
            "reverse-cs" => Self::ReverseCs(kappa()?),
            "ls" => Self::Learnable {
                per_connection: false,
            },
            "ls-per-connection" => Self::Learnable {
                per_connection: true,
            },
            _ => return Err(invalid(format!("unknown policy '{s}'"))),
        };
        if arg.is_some() && d.kappa().is_none() {
            return Err(invalid(format!("policy '{name}' takes no argument")));
        }
        if let Some(k) = d.kappa() {
            check_kappa(k, true)?;
        }
        Ok(d)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KappaSolution {
    pub kappa: f64,
    /// Target at or below 1: only the leading term survives, κ → 0⁺.
    pub degenerate: bool,
}

/// Solves Σ_{j=1}^N κ^{2(j-1)} = target for κ ∈ (0, 1] by bisection.
pub fn solve_geometric_kappa(target: f64, n: usize) -> Result<KappaSolution> {
    if n == 0 {
        return Err(invalid("N must be >= 1"));
    }
    if target <= 1.0 {
        return Ok(KappaSolution {
            kappa: 0.0,
            degenerate: true,
        });
    }
    if target >= n as f64 {
        return Ok(KappaSolution {
            kappa: 1.0,
            degenerate: false,
        });
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while hi - lo > BISECTION_TOL {
        let mid = 0.5 * (lo + hi);
        if geometric_square_sum(mid, n) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(KappaSolution {
        kappa: 0.5 * (lo + hi),
        degenerate: false,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KappaRange {
    pub lo: f64,
    pub hi: f64,
    pub target_interval: (f64, f64),
    pub degenerate: bool,
    pub ratio: RatioStats,
}

/// κ range whose Σκ_j² covers `[mean ‖ε‖²/‖x_t‖², 5]`.
pub fn estimate_kappa_range(
    data: &DataSource,
    sched: &DiffusionSchedule,
    n: usize,
    samples: usize,
    rng: &mut Rng,
) -> Result<KappaRange> {
    if n < 2 {
        return Err(invalid("estimate_kappa_range needs N >= 2"));
    }
    if samples < 1000 {
        return Err(invalid("estimate_kappa_range needs samples >= 1000"));
    }
    let ratio = noise_ratio_stats(data, sched, samples, rng)?;
    kappa_range_for_targets(ratio.mean, RATIO_UPPER_TARGET, n).map(|(lo, hi, degenerate)| {
        KappaRange {
            lo,
            hi,
            target_interval: (ratio.mean, RATIO_UPPER_TARGET),
            degenerate,
            ratio,
        }
    })
}

/// Solves both ends of a target interval; returns `(lo, hi, degenerate)`.
pub fn kappa_range_for_targets(lower: f64, upper: f64, n: usize) -> Result<(f64, f64, bool)> {
    let lo = solve_geometric_kappa(lower, n)?;
    let hi = solve_geometric_kappa(upper, n)?;
    Ok((lo.kappa, hi.kappa, lo.degenerate))
}
