//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] is built fresh for every forward pass. Each operation appends a
//! node holding its value and parent indices, so nodes are always in
//! topological order. [`Tape::backward`] consumes the tape and returns the
//! gradient of a scalar node with respect to every leaf that requires grad.

use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, shape_dims, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Mul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Mean(Var),
    SumSquares(Var),
    Transpose(Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; it is differentiable iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), t.requires_grad)
    }

    /// Records a non-differentiable leaf, taking ownership of the data.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(Op::Leaf, shape, t.into_data(), false)
    }

    /// Records a differentiable leaf, taking ownership of the data.
    pub fn param(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(Op::Leaf, shape, t.into_data(), true)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape node has consistent shape")
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            op,
            shape,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (&self.node(a).shape, &self.node(b).shape);
        if sa != sb {
            return Err(Error::Shape {
                op,
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        Ok(())
    }

    fn dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        shape_dims(&self.node(v).shape, op)
    }

    /// Matrix product. A rank-1 right operand is treated as a column and the
    /// result is rank-1.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a, "matmul")?;
        let (k2, n) = self.dims(b, "matmul")?;
        if self.node(a).shape.len() != 2 || k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.node(a).shape.clone(),
                rhs: self.node(b).shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(&self.node(a).value, &self.node(b).value, &mut out, m, k, n);
        let shape = if self.node(b).shape.len() == 1 {
            vec![m]
        } else {
            vec![m, n]
        };
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok(self.push(Op::Matmul(a, b), shape, out, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = zip(&self.node(a).value, &self.node(b).value, |x, y| x + y);
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok(self.push(Op::Add(a, b), self.node(a).shape.clone(), v, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = zip(&self.node(a).value, &self.node(b).value, |x, y| x - y);
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok(self.push(Op::Sub(a, b), self.node(a).shape.clone(), v, rg))
    }

    /// Multiplication by a fixed scalar.
    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.node(a).value.iter().map(|x| x * s).collect();
        let rg = self.node(a).requires_grad;
        self.push(Op::Scale(a, s), self.node(a).shape.clone(), v, rg)
    }

    /// Elementwise product of equal-shape operands.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = zip(&self.node(a).value, &self.node(b).value, |x, y| x * y);
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok(self.push(Op::Mul(a, b), self.node(a).shape.clone(), v, rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.node(a).value.iter().map(|&x| x.max(0.0)).collect();
        let rg = self.node(a).requires_grad;
        self.push(Op::Relu(a), self.node(a).shape.clone(), v, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.node(a).value.iter().map(|&x| sigmoid(x)).collect();
        let rg = self.node(a).requires_grad;
        self.push(Op::Sigmoid(a), self.node(a).shape.clone(), v, rg)
    }

    /// Mean of all entries, as a scalar.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = &self.node(a).value;
        let v = n.iter().sum::<f64>() / n.len() as f64;
        let rg = self.node(a).requires_grad;
        self.push(Op::Mean(a), vec![1], vec![v], rg)
    }

    /// Sum of squared entries, as a scalar.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let v = self.node(a).value.iter().map(|x| x * x).sum();
        let rg = self.node(a).requires_grad;
        self.push(Op::SumSquares(a), vec![1], vec![v], rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a, "transpose")?;
        let src = &self.node(a).value;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.node(a).requires_grad;
        Ok(self.push(Op::Transpose(a), vec![c, r], out, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.node(a).value.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.node(a).shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let v = self.node(a).value.clone();
        let rg = self.node(a).requires_grad;
        Ok(self.push(Op::Reshape(a), shape.to_vec(), v, rg))
    }

    /// Reverse sweep from a scalar node. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let loss_node = self.node(loss);
        if loss_node.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Matmul(a, b) => {
                    let (m, k) = self.dims(a, "matmul")?;
                    let (_, n) = self.dims(b, "matmul")?;
                    if self.node(a).requires_grad {
                        let mut da = vec![0.0; m * k];
                        gemm_nt(&g, &self.node(b).value, &mut da, m, n, k);
                        accumulate(&mut grads, a, da);
                    }
                    if self.node(b).requires_grad {
                        let mut db = vec![0.0; k * n];
                        gemm_tn(&self.node(a).value, &g, &mut db, m, k, n);
                        accumulate(&mut grads, b, db);
                    }
                }
                Op::Add(a, b) => {
                    if self.node(b).requires_grad {
                        accumulate(&mut grads, b, g.clone());
                    }
                    if self.node(a).requires_grad {
                        accumulate(&mut grads, a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.node(b).requires_grad {
                        accumulate(&mut grads, b, g.iter().map(|v| -v).collect());
                    }
                    if self.node(a).requires_grad {
                        accumulate(&mut grads, a, g);
                    }
                }
                Op::Scale(a, s) => {
                    accumulate(&mut grads, a, g.iter().map(|v| v * s).collect());
                }
                Op::Mul(a, b) => {
                    if self.node(a).requires_grad {
                        accumulate(&mut grads, a, zip(&g, &self.node(b).value, |x, y| x * y));
                    }
                    if self.node(b).requires_grad {
                        accumulate(&mut grads, b, zip(&g, &self.node(a).value, |x, y| x * y));
                    }
                }
                Op::Relu(a) => {
                    let src = &self.node(a).value;
                    let d = g
                        .iter()
                        .zip(src)
                        .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, a, d);
                }
                Op::Sigmoid(a) => {
                    let d = g
                        .iter()
                        .zip(&node.value)
                        .map(|(&gv, &s)| gv * s * (1.0 - s))
                        .collect();
                    accumulate(&mut grads, a, d);
                }
                Op::Mean(a) => {
                    let n = self.node(a).value.len();
                    accumulate(&mut grads, a, vec![g[0] / n as f64; n]);
                }
                Op::SumSquares(a) => {
                    let d = self.node(a).value.iter().map(|x| 2.0 * x * g[0]).collect();
                    accumulate(&mut grads, a, d);
                }
                Op::Transpose(a) => {
                    let (r, c) = self.dims(a, "transpose")?;
                    let mut d = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] = g[j * r + i];
                        }
                    }
                    accumulate(&mut grads, a, d);
                }
                Op::Reshape(a) => accumulate(&mut grads, a, g),
            }
        }

        let shapes = self.nodes.iter().map(|n| n.shape.clone()).collect();
        let is_leaf = self
            .nodes
            .iter()
            .map(|n| matches!(n.op, Op::Leaf) && n.requires_grad)
            .collect();
        Ok(Gradients {
            grads,
            shapes,
            is_leaf,
        })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, d: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(d).for_each(|(a, x)| *a += x),
        slot @ None => *slot = Some(d),
    }
}

fn zip(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    is_leaf: Vec<bool>,
}

impl Gradients {
    /// Gradient for a differentiable leaf. Leaves the loss does not depend on
    /// get an all-zero gradient; non-leaves and frozen leaves get `None`.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        if !self.is_leaf.get(v.0).copied().unwrap_or(false) {
            return None;
        }
        let shape = self.shapes[v.0].clone();
        let data = match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => vec![0.0; shape.iter().product()],
        };
        Tensor::new(shape, data).ok()
    }

    /// Stores the gradient of `v` in `target.grad`.
    pub fn write_into(&self, v: Var, target: &mut Tensor) -> Result<()> {
        match self.get(v) {
            Some(g) if g.shape() == target.shape() => {
                target.grad = Some(g.into_data());
                Ok(())
            }
            Some(g) => Err(Error::Shape {
                op: "write_into",
                lhs: g.shape().to_vec(),
                rhs: target.shape().to_vec(),
            }),
            None => {
                target.grad = None;
                Ok(())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), rng.normal_vec(n)).unwrap()
    }

    #[test]
    fn relu_values_and_mask() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::vector(vec![-1.0, 0.0, 2.0]).with_requires_grad(true));
        let y = tape.relu(x);
        assert_eq!(tape.value(y), &[0.0, 0.0, 2.0]);
        let l = tape.sum_squares(y);
        let g = tape.backward(l).unwrap().get(x).unwrap();
        // subgradient at exactly zero is zero
        assert_eq!(g.data(), &[0.0, 0.0, 4.0]);
    }

    #[test]
    fn all_negative_relu_has_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::vector(vec![-3.0, -0.5]).with_requires_grad(true));
        let y = tape.relu(x);
        assert_eq!(tape.value(y), &[0.0, 0.0]);
        let l = tape.sum_squares(y);
        assert_eq!(tape.backward(l).unwrap().get(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::vector(vec![1.0, 2.0]).with_requires_grad(true));
        let y = tape.relu(x);
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn unused_leaf_gets_exact_zero() {
        let mut rng = Rng::new(1, 0);
        let mut tape = Tape::new();
        let w = tape.leaf(&random(&[3, 3], &mut rng).with_requires_grad(true));
        let unused = tape.leaf(&random(&[3], &mut rng).with_requires_grad(true));
        let x = tape.constant(random(&[3], &mut rng));
        let y = tape.matmul(w, x).unwrap();
        let l = tape.sum_squares(y);
        let g = tape.backward(l).unwrap();
        assert!(g.get(unused).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(g.get(x).is_none());
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(-800.0) < 1e-300);
        assert_eq!(sigmoid(800.0), 1.0);
    }

    #[test]
    fn transpose_and_reshape_gradients() {
        let mut rng = Rng::new(2, 0);
        let a = random(&[2, 3], &mut rng).with_requires_grad(true);
        let c = random(&[3, 2], &mut rng);
        let mut tape = Tape::new();
        let av = tape.leaf(&a);
        let t = tape.transpose(av).unwrap();
        let r = tape.reshape(t, &[6]).unwrap();
        let cv = tape.constant(c.clone().reshape(vec![6]).unwrap());
        let p = tape.mul(r, cv).unwrap();
        let l = tape.mean(p);
        let g = tape.backward(l).unwrap().get(av).unwrap();
        // d/dA mean(Aᵀ ⊙ C) = Cᵀ / 6
        let expect = c.transpose().scale(1.0 / 6.0);
        for (x, y) in g.data().iter().zip(expect.data()) {
            assert!((x - y).abs() < 1e-15);
        }
    }
}
