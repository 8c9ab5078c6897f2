#![allow(dead_code)]

use skipscale::diffusion::loss_value;
use skipscale::tensor::Tensor;
use skipscale::unet::UNetModel;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor) -> Mat {
    let (r, c) = (t.rows(), t.cols());
    (0..r).map(|i| (0..c).map(|j| t.get2(i, j)).collect()).collect()
}

pub fn matvec(w: &Mat, x: &[f64]) -> Vec<f64> {
    w.iter()
        .map(|row| {
            let mut s = 0.0;
            for (a, b) in row.iter().zip(x) {
                s += a * b;
            }
            s
        })
        .collect()
}

/// `W_l φ(... φ(W_1 x))`, literally.
pub fn block(ws: &[Mat], x: &[f64], relu: bool) -> Vec<f64> {
    let mut h = x.to_vec();
    for (j, w) in ws.iter().enumerate() {
        h = matvec(w, &h);
        if relu && j + 1 < ws.len() {
            h = h.into_iter().map(|v| v.max(0.0)).collect();
        }
    }
    h
}

pub struct Oracle {
    pub a: Vec<Vec<Mat>>,
    pub b: Vec<Vec<Mat>>,
    pub f: Vec<Mat>,
    pub kappa: Vec<f64>,
}

impl Oracle {
    pub fn from_model(model: &UNetModel, kappa: Vec<f64>) -> Self {
        let conv = |bp: &skipscale::unet::BlockParams| bp.weights.iter().map(to_mat).collect::<Vec<_>>();
        Self {
            a: model.encoders.iter().map(conv).collect(),
            b: model.decoders.iter().map(conv).collect(),
            f: conv(&model.middle),
            kappa,
        }
    }

    /// `f_i(x) = b_{i+1}(κ_{i+1}·a_{i+1}(x) + f_{i+1}(a_{i+1}(x)))`, `f_N` the middle block.
    pub fn f(&self, i: usize, x: &[f64]) -> Vec<f64> {
        let n = self.a.len();
        if i == n {
            return block(&self.f, x, true);
        }
        let ax = block(&self.a[i], x, true);
        let inner = self.f(i + 1, &ax);
        let k = self.kappa[i];
        let sum: Vec<f64> = ax.iter().zip(&inner).map(|(s, d)| k * s + d).collect();
        block(&self.b[i], &sum, true)
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.f(0, x)
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn model_loss(model: &UNetModel, xt: &Tensor, eps: &Tensor) -> f64 {
    let out = model.forward(xt).unwrap().output;
    loss_value(eps, &out).unwrap() / xt.cols() as f64
}

pub struct GradCheck {
    pub rel_err: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
}

/// Central differences on every parameter entry against the autodiff
/// gradient. Entries where the step-`h` and step-`h/2` estimates disagree
/// straddle a ReLU kink and are skipped.
pub fn grad_check(model: &UNetModel, xt: &Tensor, eps: &Tensor, h: f64) -> GradCheck {
    let lg = model.loss_and_grads(xt, eps, None).unwrap();
    let mut work = model.clone();
    let (mut ad, mut fd) = (Vec::new(), Vec::new());
    let mut skipped = 0;
    let n_params = work.params().len();
    for p in 0..n_params {
        let Some(g) = &lg.grads[p] else { continue };
        for k in 0..g.len() {
            let orig = work.params()[p].data()[k];
            let mut eval = |delta: f64| {
                work.params_mut()[p].data_mut()[k] = orig + delta;
                let v = model_loss(&work, xt, eps);
                work.params_mut()[p].data_mut()[k] = orig;
                v
            };
            let d1 = (eval(h) - eval(-h)) / (2.0 * h);
            let d2 = (eval(h / 2.0) - eval(-h / 2.0)) / h;
            if (d1 - d2).abs() > 1e-4 * d1.abs().max(d2.abs()).max(1e-8) {
                skipped += 1;
                continue;
            }
            ad.push(g.data()[k]);
            fd.push(d1);
        }
    }
    let diff: f64 = ad.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let na: f64 = ad.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nf: f64 = fd.iter().map(|a| a * a).sum::<f64>().sqrt();
    GradCheck {
        rel_err: diff / na.max(nf).max(1e-300),
        checked: ad.len(),
        skipped_kinks: skipped,
    }
}

/// Singular values by one-sided Jacobi rotations, descending.
pub fn jacobi_singular_values(a: &Mat) -> Vec<f64> {
    let m = a.len();
    let n = a[0].len();
    // Columns of A.
    let mut u: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a[i][j]).collect()).collect();
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                let alpha: f64 = u[p].iter().map(|v| v * v).sum();
                let beta: f64 = u[q].iter().map(|v| v * v).sum();
                let gamma: f64 = u[p].iter().zip(&u[q]).map(|(x, y)| x * y).sum();
                if gamma.abs() <= 1e-300 {
                    continue;
                }
                off = off.max(gamma.abs() / (alpha * beta).sqrt());
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let (x, y) = (u[p][i], u[q][i]);
                    u[p][i] = c * x - s * y;
                    u[q][i] = s * x + c * y;
                }
            }
        }
        if off < 1e-15 {
            break;
        }
    }
    let mut sv: Vec<f64> = u.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}
