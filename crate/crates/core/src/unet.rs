//! The analytical UNet: `N` encoder blocks, `N` decoder blocks and a middle
//! block, each a stack of `l` square matrices with ReLU between them, joined
//! by scaled long skip connections.
//!
//! ```text
//! s_0 = x,  s_i = a_i(s_{i-1})
//! d_N = f_N(s_N),  d_{i-1} = b_i(κ_i·s_i + d_i),  output = d_0
//! ```
//!
//! `h_i = d_i` is the output of the sub-network `f_i`.

use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::diffusion::{forward_diffuse, loss_simple, DiffusionSchedule};
use crate::error::{invalid, Error, Result};
use crate::init::kaiming_init;
use crate::optim::OptimizerState;
use crate::rng::Rng;
use crate::scaling::{CalibVars, Learnable, ScalingPolicy};
use crate::tensor::Tensor;

/// Nonlinearity between layers of a block. `Identity` gives the linearized
/// model used by some diagnostics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

/// `W_l φ(W_{l-1} ... φ(W_1 x))`; no activation after the last layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub weights: Vec<Tensor>,
}

impl BlockParams {
    pub fn kaiming(m: usize, l: usize, rng: &mut Rng) -> Result<Self> {
        let weights = (0..l)
            .map(|_| kaiming_init(m, m, rng).map(|w| w.with_requires_grad(true)))
            .collect::<Result<_>>()?;
        Ok(Self { weights })
    }

    pub fn zeros(m: usize, l: usize) -> Self {
        Self {
            weights: (0..l).map(|_| Tensor::zeros(&[m, m]).with_requires_grad(true)).collect(),
        }
    }

    pub fn validate(&self, m: usize, l: usize) -> Result<()> {
        if self.weights.len() != l {
            return Err(invalid(format!("block has {} matrices, expected {l}", self.weights.len())));
        }
        for w in &self.weights {
            if w.shape() != [m, m] {
                return Err(Error::Shape {
                    op: "block",
                    lhs: w.shape().to_vec(),
                    rhs: vec![m, m],
                });
            }
            if !w.all_finite() {
                return Err(invalid("block weights must be finite"));
            }
        }
        Ok(())
    }

    /// Untracked application to `x` (`[m]` or `[m, B]`).
    pub fn apply(&self, x: &Tensor, act: Activation) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.weights.len() - 1;
        for (j, w) in self.weights.iter().enumerate() {
            h = w.matmul(&h)?;
            if j < last && act == Activation::Relu {
                h = h.map(|v| v.max(0.0));
            }
        }
        Ok(h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UNetModel {
    pub m: usize,
    pub l: usize,
    pub n: usize,
    pub encoders: Vec<BlockParams>,
    pub decoders: Vec<BlockParams>,
    pub middle: BlockParams,
    pub policy: ScalingPolicy,
    pub activation: Activation,
}

/// Kaiming-initialized model. Matrices are drawn in the order
/// `a_1..a_N`, `b_1..b_N`, `f_N`, each block `W_1..W_l`.
pub fn init_unet(m: usize, l: usize, n: usize, policy: ScalingPolicy, rng: &mut Rng) -> Result<UNetModel> {
    check_sizes(m, l, n)?;
    check_policy(&policy, m, n)?;
    let encoders = (0..n).map(|_| BlockParams::kaiming(m, l, rng)).collect::<Result<_>>()?;
    let decoders = (0..n).map(|_| BlockParams::kaiming(m, l, rng)).collect::<Result<_>>()?;
    let middle = BlockParams::kaiming(m, l, rng)?;
    Ok(UNetModel {
        m,
        l,
        n,
        encoders,
        decoders,
        middle,
        policy,
        activation: Activation::Relu,
    })
}

fn check_sizes(m: usize, l: usize, n: usize) -> Result<()> {
    if m < 2 || l < 2 || n < 1 {
        return Err(invalid(format!("need m >= 2, l >= 2, N >= 1; got m={m}, l={l}, N={n}")));
    }
    Ok(())
}

fn check_policy(policy: &ScalingPolicy, m: usize, n: usize) -> Result<()> {
    if let ScalingPolicy::Learnable(lrn) = policy {
        if lrn.channels == 0 || m % lrn.channels != 0 {
            return Err(invalid(format!(
                "learnable scaling needs channels dividing m; got {} and m={m}",
                lrn.channels
            )));
        }
        let want = if lrn.per_connection { n } else { 1 };
        if lrn.nets.len() != want {
            return Err(invalid(format!(
                "learnable scaling has {} calibration nets, expected {want}",
                lrn.nets.len()
            )));
        }
        for net in &lrn.nets {
            if net.n_min != lrn.channels {
                return Err(Error::Shape {
                    op: "calibration net",
                    lhs: vec![net.n_min],
                    rhs: vec![lrn.channels],
                });
            }
        }
    }
    Ok(())
}

/// Tape handles for every model parameter.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub encoders: Vec<Vec<Var>>,
    pub decoders: Vec<Vec<Var>>,
    pub middle: Vec<Var>,
    pub calib: Vec<CalibVars>,
}

impl ModelVars {
    /// Flattened in [`UNetModel::params`] order.
    pub fn all(&self) -> Vec<Var> {
        let mut out: Vec<Var> = Vec::new();
        for b in self.encoders.iter().chain(&self.decoders) {
            out.extend(b);
        }
        out.extend(&self.middle);
        for c in &self.calib {
            out.extend(&c.vars);
        }
        out
    }
}

/// Recorded forward pass. `hidden[k]` is `h_{N-1-k}`; `skips[i-1]` is `s_i`.
#[derive(Clone, Debug)]
pub struct TapeTrace {
    pub output: Var,
    pub hidden: Vec<Var>,
    pub skips: Vec<Var>,
    pub coefficients: Vec<f64>,
}

/// Result of an untracked forward pass, with the same rank as the input.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub output: Tensor,
    /// `h_{N-1}, ..., h_0`.
    pub hidden: Vec<Tensor>,
    /// `s_1, ..., s_N`.
    pub skip_inputs: Vec<Tensor>,
    /// `κ_1, ..., κ_N`; for learnable scaling the mean over channels and batch.
    pub coefficients_used: Vec<f64>,
}

impl ForwardTrace {
    /// `h_i` for `i` in `0..N`.
    pub fn h(&self, i: usize) -> &Tensor {
        &self.hidden[self.hidden.len() - 1 - i]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepReport {
    pub loss: f64,
    /// `(name, ‖∇‖)` for every parameter that takes gradients.
    pub grad_norms: Vec<(String, f64)>,
    /// Batch-mean `‖h_i‖` for `i = 0..N`.
    pub feature_norms: Vec<f64>,
    pub coefficients: Vec<f64>,
}

impl StepReport {
    pub fn grad_norm(&self, name: &str) -> Option<f64> {
        self.grad_norms.iter().find(|(n, _)| n == name).map(|(_, g)| *g)
    }
}

/// Loss, gradients and diagnostics for one batch, without any update.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub loss: f64,
    /// Indexed like [`UNetModel::params`]; `None` for frozen parameters.
    pub grads: Vec<Option<Tensor>>,
    pub feature_norms: Vec<f64>,
    pub coefficients: Vec<f64>,
}

impl UNetModel {
    pub fn validate(&self) -> Result<()> {
        check_sizes(self.m, self.l, self.n)?;
        if self.encoders.len() != self.n || self.decoders.len() != self.n {
            return Err(invalid("encoders and decoders must each have N blocks"));
        }
        for b in self.encoders.iter().chain(&self.decoders).chain([&self.middle]) {
            b.validate(self.m, self.l)?;
        }
        check_policy(&self.policy, self.m, self.n)
    }

    pub fn matrix_count(&self) -> usize {
        (2 * self.n + 1) * self.l
    }

    fn calib_prefixes(&self) -> Vec<String> {
        match &self.policy {
            ScalingPolicy::Learnable(lrn) if lrn.per_connection => {
                (1..=lrn.nets.len()).map(|i| format!("ls{i}")).collect()
            }
            ScalingPolicy::Learnable(_) => vec!["ls".into()],
            _ => Vec::new(),
        }
    }

    /// Every parameter (trainable unless frozen): `a_1..a_N`, `b_1..b_N`, `f_N`, then calibration nets.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = Vec::new();
        for b in self.encoders.iter().chain(&self.decoders).chain([&self.middle]) {
            out.extend(&b.weights);
        }
        if let ScalingPolicy::Learnable(lrn) = &self.policy {
            for net in &lrn.nets {
                out.extend(net.params());
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for b in self.encoders.iter_mut().chain(self.decoders.iter_mut()) {
            out.extend(b.weights.iter_mut());
        }
        out.extend(self.middle.weights.iter_mut());
        if let ScalingPolicy::Learnable(lrn) = &mut self.policy {
            for net in &mut lrn.nets {
                out.extend(net.params_mut());
            }
        }
        out
    }

    /// Names aligned with [`Self::params`]: `a{i}.W{j}`, `b{i}.W{j}`,
    /// `f.W{j}`, `ls.w1`, ... (1-based).
    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (tag, blocks) in [("a", &self.encoders), ("b", &self.decoders)] {
            for (i, _) in blocks.iter().enumerate() {
                for j in 1..=self.l {
                    out.push(format!("{tag}{}.W{j}", i + 1));
                }
            }
        }
        for j in 1..=self.l {
            out.push(format!("f.W{j}"));
        }
        if let ScalingPolicy::Learnable(lrn) = &self.policy {
            for (net, prefix) in lrn.nets.iter().zip(self.calib_prefixes()) {
                out.extend(net.param_names(&prefix));
            }
        }
        out
    }

    /// Multiplies the last matrix of every block by `gain`. With `1/√2`
    /// each Kaiming-initialized block preserves the expected squared norm.
    pub fn scale_last_layers(&mut self, gain: f64) {
        for b in self
            .encoders
            .iter_mut()
            .chain(self.decoders.iter_mut())
            .chain([&mut self.middle])
        {
            if let Some(w) = b.weights.last_mut() {
                w.data_mut().iter_mut().for_each(|v| *v *= gain);
            }
        }
    }

    /// Sets `requires_grad = !frozen` on every parameter whose name starts
    /// with `prefix`. Returns how many matched.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) -> usize {
        let names = self.param_names();
        let mut count = 0;
        for (p, name) in self.params_mut().into_iter().zip(names) {
            if name.starts_with(prefix) {
                p.requires_grad = !frozen;
                count += 1;
            }
        }
        count
    }

    pub fn register(&self, tape: &mut Tape) -> ModelVars {
        let mut block = |b: &BlockParams| b.weights.iter().map(|w| tape.leaf(w)).collect::<Vec<_>>();
        let encoders = self.encoders.iter().map(&mut block).collect();
        let decoders = self.decoders.iter().map(&mut block).collect();
        let middle = block(&self.middle);
        let calib = match &self.policy {
            ScalingPolicy::Learnable(lrn) => lrn.nets.iter().map(|n| n.register(tape)).collect(),
            _ => Vec::new(),
        };
        ModelVars {
            encoders,
            decoders,
            middle,
            calib,
        }
    }

    fn block_on_tape(&self, tape: &mut Tape, ws: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        for (j, &w) in ws.iter().enumerate() {
            h = tape.matmul(w, h)?;
            if j + 1 < ws.len() && self.activation == Activation::Relu {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Recorded forward pass over `x` of shape `[m, B]`.
    ///
    /// `kappas` overrides the policy with fixed coefficients `κ_1..κ_N`
    /// (any finite values, including zero).
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        x: Var,
        kappas: Option<&[f64]>,
    ) -> Result<TapeTrace> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 2 || shape[0] != self.m {
            return Err(Error::Shape {
                op: "unet_forward",
                lhs: shape,
                rhs: vec![self.m, 0],
            });
        }
        if let Some(k) = kappas {
            if k.len() != self.n {
                return Err(invalid(format!("expected {} coefficients, got {}", self.n, k.len())));
            }
        }
        let batch = shape[1];

        let mut skips = Vec::with_capacity(self.n);
        let mut s = x;
        for ws in &vars.encoders {
            s = self.block_on_tape(tape, ws, s)?;
            skips.push(s);
        }
        let mut d = self.block_on_tape(tape, &vars.middle, s)?;

        let mut hidden = Vec::with_capacity(self.n);
        let mut coefficients = vec![0.0; self.n];
        for i in (1..=self.n).rev() {
            let s_i = skips[i - 1];
            let fixed = match kappas {
                Some(k) => Some(k[i - 1]),
                None => self.policy.fixed_coefficient(i, self.n),
            };
            let scaled = match (fixed, &self.policy) {
                (Some(k), _) => {
                    coefficients[i - 1] = k;
                    tape.scale(s_i, k)
                }
                (None, ScalingPolicy::Learnable(lrn)) => {
                    let cv = if lrn.per_connection { &vars.calib[i - 1] } else { &vars.calib[0] };
                    let (v, mean) = ls_scale(tape, lrn, i, cv, s_i, self.m, batch)?;
                    coefficients[i - 1] = mean;
                    v
                }
                (None, _) => unreachable!("non-learnable policies have fixed coefficients"),
            };
            let u = tape.add(scaled, d)?;
            d = self.block_on_tape(tape, &vars.decoders[i - 1], u)?;
            hidden.push(d);
        }
        Ok(TapeTrace {
            output: d,
            hidden,
            skips,
            coefficients,
        })
    }

    /// Untracked forward pass; `x` is `[m]` or `[m, B]`.
    pub fn forward(&self, x: &Tensor) -> Result<ForwardTrace> {
        self.forward_impl(x, None)
    }

    /// Forward pass with the policy replaced by fixed `κ_1..κ_N`.
    pub fn forward_with_coefficients(&self, x: &Tensor, kappas: &[f64]) -> Result<ForwardTrace> {
        self.forward_impl(x, Some(kappas))
    }

    fn forward_impl(&self, x: &Tensor, kappas: Option<&[f64]>) -> Result<ForwardTrace> {
        let vector = x.shape().len() == 1;
        if x.shape().first() != Some(&self.m) || x.shape().len() > 2 {
            return Err(Error::Shape {
                op: "unet_forward",
                lhs: x.shape().to_vec(),
                rhs: vec![self.m],
            });
        }
        let cols = if vector { 1 } else { x.cols() };
        let mut tape = Tape::new();
        let vars = self.register_constants(&mut tape);
        let xv = tape.constant(x.clone().reshape(vec![self.m, cols])?);
        let tr = self.forward_on_tape(&mut tape, &vars, xv, kappas)?;
        let fetch = |v: Var| -> Result<Tensor> {
            let t = tape.tensor(v);
            if vector {
                t.reshape(vec![self.m])
            } else {
                Ok(t)
            }
        };
        Ok(ForwardTrace {
            output: fetch(tr.output)?,
            hidden: tr.hidden.iter().map(|&v| fetch(v)).collect::<Result<_>>()?,
            skip_inputs: tr.skips.iter().map(|&v| fetch(v)).collect::<Result<_>>()?,
            coefficients_used: tr.coefficients,
        })
    }

    fn register_constants(&self, tape: &mut Tape) -> ModelVars {
        let mut block = |b: &BlockParams| b.weights.iter().map(|w| tape.constant(w.clone())).collect::<Vec<_>>();
        let encoders = self.encoders.iter().map(&mut block).collect();
        let decoders = self.decoders.iter().map(&mut block).collect();
        let middle = block(&self.middle);
        let calib = match &self.policy {
            ScalingPolicy::Learnable(lrn) => lrn.nets.iter().map(|n| n.register(tape)).collect(),
            _ => Vec::new(),
        };
        ModelVars {
            encoders,
            decoders,
            middle,
            calib,
        }
    }

    /// Mean `‖ε − ε̂(x_t)‖²` over the columns of `xt`/`eps` (`[m, B]`) and its
    /// gradient with respect to every trainable parameter.
    pub fn loss_and_grads(&self, xt: &Tensor, eps: &Tensor, kappas: Option<&[f64]>) -> Result<LossGrad> {
        if xt.shape() != eps.shape() || xt.shape().len() != 2 {
            return Err(Error::Shape {
                op: "loss_and_grads",
                lhs: xt.shape().to_vec(),
                rhs: eps.shape().to_vec(),
            });
        }
        let batch = xt.cols();
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let xv = tape.constant(xt.clone());
        let tr = self.forward_on_tape(&mut tape, &vars, xv, kappas)?;
        let ev = tape.constant(eps.clone());
        let total = loss_simple(&mut tape, ev, tr.output)?;
        let loss = tape.scale(total, 1.0 / batch as f64);
        let loss_value = tape.value(loss)[0];
        let mut feature_norms = vec![0.0; self.n];
        for (k, &h) in tr.hidden.iter().enumerate() {
            let i = self.n - 1 - k;
            feature_norms[i] = mean_column_norm(tape.value(h), self.m, batch);
        }
        let params = vars.all();
        let grads = tape.backward(loss)?;
        let grads = params.iter().map(|&v| grads.get(v)).collect();
        Ok(LossGrad {
            loss: loss_value,
            grads,
            feature_norms,
            coefficients: tr.coefficients,
        })
    }
}

fn mean_column_norm(data: &[f64], rows: usize, cols: usize) -> f64 {
    let mut sq = vec![0.0; cols];
    for r in 0..rows {
        for (c, s) in sq.iter_mut().enumerate() {
            let v = data[r * cols + c];
            *s += v * v;
        }
    }
    sq.iter().map(|s| s.sqrt()).sum::<f64>() / cols as f64
}

/// Scales `s` (`[m, B]`) channel-wise by κ from the calibration net, viewing
/// each column as `channels × (m / channels)`. Returns the scaled feature and
/// the mean coefficient.
fn ls_scale(
    tape: &mut Tape,
    lrn: &Learnable,
    level: usize,
    cv: &CalibVars,
    s: Var,
    m: usize,
    batch: usize,
) -> Result<(Var, f64)> {
    let c = lrn.channels;
    let d = m / c;
    let st = tape.transpose(s)?;
    let x3 = tape.reshape(st, &[batch, c, d])?;
    let k = crate::scaling::ls_coefficients_on_tape(tape, lrn.net_for(level), cv, x3)?;
    let kv = tape.value(k);
    let mean = kv.iter().sum::<f64>() / kv.len() as f64;
    let k2 = tape.reshape(k, &[batch * c, 1])?;
    let ones = tape.constant(Tensor::filled(&[1, d], 1.0));
    let kd = tape.matmul(k2, ones)?;
    let kd = tape.reshape(kd, &[batch, m])?;
    let kd = tape.transpose(kd)?;
    Ok((tape.mul(kd, s)?, mean))
}

/// One optimization step on `batch` (each item an `m`-vector `x_0`).
///
/// Per item a step `t` and noise `ε` are drawn; the loss is the batch mean of
/// `‖ε − ε̂(x_t)‖²`. A non-finite loss or gradient aborts before the update.
pub fn train_step(
    model: &mut UNetModel,
    batch: &[Vec<f64>],
    sched: &DiffusionSchedule,
    optimizer: &mut OptimizerState,
    rng: &mut Rng,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(invalid("batch must be nonempty"));
    }
    let mut xt_cols = Vec::with_capacity(batch.len());
    let mut eps_cols = Vec::with_capacity(batch.len());
    for x0 in batch {
        if x0.len() != model.m {
            return Err(Error::Shape {
                op: "train_step",
                lhs: vec![x0.len()],
                rhs: vec![model.m],
            });
        }
        let t = sched.sample_step(rng);
        let (xt, eps) = forward_diffuse(&Tensor::vector(x0.clone()), t, sched, rng)?;
        xt_cols.push(xt.into_data());
        eps_cols.push(eps.into_data());
    }
    let xt = Tensor::from_columns(&xt_cols)?;
    let eps = Tensor::from_columns(&eps_cols)?;
    let lg = model.loss_and_grads(&xt, &eps, None)?;

    let names = model.param_names();
    let mut grad_norms = Vec::new();
    let mut finite = lg.loss.is_finite();
    for (name, g) in names.iter().zip(&lg.grads) {
        if let Some(g) = g {
            let n = g.norm();
            finite &= n.is_finite();
            grad_norms.push((name.clone(), n));
        }
    }
    let report = StepReport {
        loss: lg.loss,
        grad_norms,
        feature_norms: lg.feature_norms,
        coefficients: lg.coefficients,
    };
    if !finite {
        return Err(Error::Divergence(Box::new(report)));
    }
    let mut params = model.params_mut();
    for (p, g) in params.iter_mut().zip(lg.grads) {
        p.grad = g.map(Tensor::into_data);
    }
    optimizer.step(&mut params);
    for p in params {
        p.grad = None;
    }
    Ok(report)
}
