//! Reverse-mode differentiation over a flat tape of rank-2 primitives.
//!
//! Every op appends one node whose inputs are already on the tape, so the
//! node order is a valid topological order and `backward` is a single reverse sweep.

use crate::error::{Error, Result};
use crate::tensor::{logsumexp_row, sigmoid, softmax_row, Tensor};

/// Absolute floor in the relative error of [`finite_diff_check`].
pub const FD_EPS_ABS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sentinel for logits of inadmissible entries; `f64::MIN` is accepted too.
pub const MASKED: f64 = f64::NEG_INFINITY;

pub fn is_masked(x: f64) -> bool {
    x == f64::NEG_INFINITY || x == f64::MIN
}

/// Elementwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Act {
    Tanh,
    Relu,
    Sigmoid,
    Exp,
    Log,
    /// `x ln x` with the convention `0 ln 0 = 0`.
    XLogX,
    /// `ln(1 + e^{beta x})`.
    Softplus(f64),
    Square,
    /// `√x`, with derivative 0 at the origin.
    Sqrt,
}

impl Act {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Act::Tanh => x.tanh(),
            Act::Relu => x.max(0.0),
            Act::Sigmoid => sigmoid(x),
            Act::Exp => x.exp(),
            Act::Log => x.ln(),
            Act::XLogX => {
                if x == 0.0 {
                    0.0
                } else {
                    x * x.ln()
                }
            }
            Act::Softplus(b) => crate::tensor::softplus(b * x),
            Act::Square => x * x,
            Act::Sqrt => x.sqrt(),
        }
    }

    pub fn deriv(self, x: f64, y: f64) -> f64 {
        match self {
            Act::Tanh => 1.0 - y * y,
            Act::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Act::Sigmoid => y * (1.0 - y),
            Act::Exp => y,
            Act::Log => 1.0 / x,
            Act::XLogX => {
                if x > 0.0 {
                    x.ln() + 1.0
                } else {
                    0.0
                }
            }
            Act::Softplus(b) => b * sigmoid(b * x),
            Act::Square => 2.0 * x,
            Act::Sqrt => {
                if y > 0.0 {
                    0.5 / y
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Const,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Act(Var, Act),
    Softmax(Var),
    LogSumExp(Var),
    LayerNorm(Var, f64),
    RmsNorm(Var, f64),
    CrossEntropy(Var, Vec<usize>),
    Concat(Vec<Var>),
    Slice(Var, usize),
    SumRows(Var),
    SumAll(Var),
    MeanAll(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by tape variable.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss wrt `v`; zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let s = &self.shapes[v.0];
                Tensor::new(s.clone(), vec![0.0; s.iter().product()]).expect("recorded shape")
            }
        }
    }
}

fn two_d(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Leaf => true,
            Op::Const => false,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, &[])
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Const, &[])
    }

    /// Copy of `v` with the gradient path cut.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.val(a).shape(), self.val(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).matmul(self.val(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.val(a).transpose();
        self.push(out, Op::Transpose(a), &[a])
    }

    /// `x · wᵀ`: applies a `[out, in]` weight to each row of `x`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let wt = self.transpose(w);
        self.matmul(x, wt)
            .map_err(|_| self.linear_err(x, w))
    }

    fn linear_err(&self, x: Var, w: Var) -> Error {
        Error::shape(
            "linear",
            format!(
                "input {:?} vs weight {:?}",
                self.val(x).shape(),
                self.val(w).shape()
            ),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.val(a).add(self.val(b))?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.val(a).sub(self.val(b))?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.val(a).zip_map(self.val(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a `[1, d]` row to every row of `[n, d]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast("add_row", a, row, |x, r| x + r)?;
        Ok(self.push(out, Op::AddRow(a, row), &[a, row]))
    }

    /// Multiplies every row of `[n, d]` by a `[1, d]` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast("mul_row", a, row, |x, r| x * r)?;
        Ok(self.push(out, Op::MulRow(a, row), &[a, row]))
    }

    fn row_broadcast(
        &self,
        op: &'static str,
        a: Var,
        row: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tr) = (self.val(a), self.val(row));
        let (n, d) = two_d(ta);
        if tr.rows() != 1 || tr.cols() != d {
            return Err(Error::shape(op, format!("[{n}, {d}] with row {:?}", tr.shape())));
        }
        let r = tr.data();
        let data = ta
            .data()
            .chunks(d)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>())
            .collect();
        Tensor::matrix(n, d, data)
    }

    /// Scales row `i` of `[n, d]` by entry `i` of a `[n, 1]` column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (ta, tc) = (self.val(a), self.val(col));
        let (n, d) = two_d(ta);
        if tc.rows() != n || tc.cols() != 1 {
            return Err(Error::shape(
                "mul_col",
                format!("[{n}, {d}] with column {:?}", tc.shape()),
            ));
        }
        let c = tc.data();
        let data = ta
            .data()
            .chunks(d)
            .zip(c)
            .flat_map(|(chunk, &s)| chunk.iter().map(move |&x| x * s))
            .collect();
        let out = Tensor::matrix(n, d, data)?;
        Ok(self.push(out, Op::MulCol(a, col), &[a, col]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.val(a).scale(c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.val(a).map(|x| x + c);
        self.push(out, Op::AddScalar(a), &[a])
    }

    pub fn act(&mut self, a: Var, f: Act) -> Var {
        let out = self.val(a).map(|x| f.eval(x));
        self.push(out, Op::Act(a, f), &[a])
    }

    /// Row softmax, max-shifted. Masked logits (see [`is_masked`]) come out exactly 0.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.val(a);
        let d = t.cols();
        let mut data = Vec::with_capacity(t.len());
        for row in t.data().chunks(d) {
            let mask: Vec<bool> = row.iter().map(|&x| !is_masked(x)).collect();
            let any = mask.iter().any(|&m| m);
            if any {
                data.extend(softmax_row(row, Some(&mask)));
            } else {
                data.extend(std::iter::repeat_n(0.0, d));
            }
        }
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Softmax(a), &[a])
    }

    /// Row log-sum-exp, `[n, d] -> [n, 1]`.
    pub fn logsumexp(&mut self, a: Var) -> Var {
        let t = self.val(a);
        let d = t.cols();
        let data: Vec<f64> = t.data().chunks(d).map(logsumexp_row).collect();
        let out = Tensor::matrix(data.len(), 1, data).expect("rows");
        self.push(out, Op::LogSumExp(a), &[a])
    }

    /// Row standardization `(x - mean) / sqrt(var + eps)`, no affine part.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let t = self.val(a);
        let d = t.cols();
        let mut data = Vec::with_capacity(t.len());
        for row in t.data().chunks(d) {
            let (mu, sd) = ln_stats(row, eps);
            data.extend(row.iter().map(|&x| (x - mu) / sd));
        }
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::LayerNorm(a, eps), &[a])
    }

    /// Row scaling `x / sqrt(mean(x^2) + eps)`.
    pub fn rms_norm(&mut self, a: Var, eps: f64) -> Var {
        let t = self.val(a);
        let d = t.cols();
        let mut data = Vec::with_capacity(t.len());
        for row in t.data().chunks(d) {
            let r = rms(row, eps);
            data.extend(row.iter().map(|&x| x / r));
        }
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::RmsNorm(a, eps), &[a])
    }

    /// Per-row cross-entropy with logits, `[n, C] -> [n, 1]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.val(logits);
        let (n, c) = two_d(t);
        if targets.len() != n {
            return Err(Error::shape(
                "cross_entropy",
                format!("{n} rows vs {} targets", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= c) {
            return Err(Error::shape(
                "cross_entropy",
                format!("target {bad} outside {c} classes"),
            ));
        }
        let data: Vec<f64> = t
            .data()
            .chunks(c)
            .zip(targets)
            .map(|(row, &y)| logsumexp_row(row) - row[y])
            .collect();
        let out = Tensor::matrix(n, 1, data)?;
        Ok(self.push(out, Op::CrossEntropy(logits, targets.to_vec()), &[logits]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let ts: Vec<&Tensor> = parts.iter().map(|&v| self.val(v)).collect();
        let out = Tensor::concat_cols(&ts)?;
        Ok(self.push(out, Op::Concat(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.val(a).slice_cols(start, len)?;
        Ok(self.push(out, Op::Slice(a, start), &[a]))
    }

    /// `[n, d] -> [n, 1]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.val(a);
        let d = t.cols();
        let data: Vec<f64> = t.data().chunks(d).map(|r| r.iter().sum()).collect();
        let out = Tensor::matrix(data.len(), 1, data).expect("rows");
        self.push(out, Op::SumRows(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.val(a).sum());
        self.push(out, Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.val(a);
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(out, Op::MeanAll(a), &[a])
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.val(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![1.0]).expect("scalar"));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Const => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                if self.nodes[a.0].needs_grad {
                    let ga = g.matmul(&tb.transpose()).expect("conformal");
                    self.accumulate(grads, *a, ga);
                }
                if self.nodes[b.0].needs_grad {
                    let gb = ta.transpose().matmul(g).expect("conformal");
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                self.accumulate(grads, *a, g.zip_map(tb, |x, y| x * y).expect("shape"));
                self.accumulate(grads, *b, g.zip_map(ta, |x, y| x * y).expect("shape"));
            }
            Op::AddRow(a, r) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *r, col_sums(g, None));
            }
            Op::MulRow(a, r) => {
                let (ta, tr) = (self.val(*a), self.val(*r));
                let d = tr.cols();
                let ga: Vec<f64> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(k, &x)| x * tr.data()[k % d])
                    .collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), ga).expect("shape"));
                self.accumulate(grads, *r, col_sums(g, Some(ta)));
            }
            Op::MulCol(a, c) => {
                let (ta, tc) = (self.val(*a), self.val(*c));
                let d = ta.cols();
                let ga: Vec<f64> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(k, &x)| x * tc.data()[k / d])
                    .collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), ga).expect("shape"));
                let gc: Vec<f64> = g
                    .data()
                    .chunks(d)
                    .zip(ta.data().chunks(d))
                    .map(|(gr, ar)| gr.iter().zip(ar).map(|(x, y)| x * y).sum())
                    .collect();
                self.accumulate(grads, *c, Tensor::matrix(gc.len(), 1, gc).expect("rows"));
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.scale(*c)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Act(a, f) => {
                let x = self.val(*a);
                let data: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(x.data().iter().zip(y.data()))
                    .map(|(&gi, (&xi, &yi))| gi * f.deriv(xi, yi))
                    .collect();
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), data).expect("shape"));
            }
            Op::Softmax(a) => {
                let d = y.cols();
                let mut data = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks(d).zip(g.data().chunks(d)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    data.extend(yr.iter().zip(gr).map(|(p, q)| p * (q - dot)));
                }
                self.accumulate(grads, *a, Tensor::new(y.shape().to_vec(), data).expect("shape"));
            }
            Op::LogSumExp(a) => {
                let x = self.val(*a);
                let d = x.cols();
                let mut data = Vec::with_capacity(x.len());
                for (xr, &gi) in x.data().chunks(d).zip(g.data()) {
                    data.extend(softmax_row(xr, None).into_iter().map(|p| gi * p));
                }
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), data).expect("shape"));
            }
            Op::LayerNorm(a, eps) => {
                let x = self.val(*a);
                let d = x.cols();
                let mut data = Vec::with_capacity(x.len());
                for ((xr, yr), gr) in x.data().chunks(d).zip(y.data().chunks(d)).zip(g.data().chunks(d)) {
                    let (_, sd) = ln_stats(xr, *eps);
                    let gm = gr.iter().sum::<f64>() / d as f64;
                    let gy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / d as f64;
                    data.extend(gr.iter().zip(yr).map(|(&gi, &yi)| (gi - gm - yi * gy) / sd));
                }
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), data).expect("shape"));
            }
            Op::RmsNorm(a, eps) => {
                let x = self.val(*a);
                let d = x.cols();
                let mut data = Vec::with_capacity(x.len());
                for (xr, gr) in x.data().chunks(d).zip(g.data().chunks(d)) {
                    let r = rms(xr, *eps);
                    let gx: f64 = gr.iter().zip(xr).map(|(p, q)| p * q).sum();
                    let k = gx / (d as f64 * r * r * r);
                    data.extend(gr.iter().zip(xr).map(|(&gi, &xi)| gi / r - xi * k));
                }
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), data).expect("shape"));
            }
            Op::CrossEntropy(a, targets) => {
                let x = self.val(*a);
                let c = x.cols();
                let mut data = Vec::with_capacity(x.len());
                for ((xr, &gi), &t) in x.data().chunks(c).zip(g.data()).zip(targets) {
                    let p = softmax_row(xr, None);
                    data.extend(
                        p.into_iter()
                            .enumerate()
                            .map(|(j, pj)| gi * (pj - if j == t { 1.0 } else { 0.0 })),
                    );
                }
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), data).expect("shape"));
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.val(p).cols();
                    let gp = g.slice_cols(start, w).expect("concat layout");
                    self.accumulate(grads, p, gp);
                    start += w;
                }
            }
            Op::Slice(a, start) => {
                let x = self.val(*a);
                let (n, d) = two_d(x);
                let w = g.cols();
                let mut data = vec![0.0; n * d];
                for i in 0..n {
                    data[i * d + start..i * d + start + w].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), data).expect("shape"));
            }
            Op::SumRows(a) => {
                let x = self.val(*a);
                let d = x.cols();
                let data: Vec<f64> = g
                    .data()
                    .iter()
                    .flat_map(|&gi| std::iter::repeat_n(gi, d))
                    .collect();
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), data).expect("shape"));
            }
            Op::SumAll(a) => {
                let x = self.val(*a);
                self.accumulate(grads, *a, x.map(|_| g.item()));
            }
            Op::MeanAll(a) => {
                let x = self.val(*a);
                let k = g.item() / x.len() as f64;
                self.accumulate(grads, *a, x.map(|_| k));
            }
        }
    }
}

fn ln_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mu = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / d;
    (mu, (var + eps).sqrt())
}

fn rms(row: &[f64], eps: f64) -> f64 {
    let d = row.len() as f64;
    (row.iter().map(|x| x * x).sum::<f64>() / d + eps).sqrt()
}

/// Column sums of `g`, optionally of `g ⊙ weight`, as a `[1, d]` row.
fn col_sums(g: &Tensor, weight: Option<&Tensor>) -> Tensor {
    let d = g.cols();
    let mut out = vec![0.0; d];
    for (k, &x) in g.data().iter().enumerate() {
        let w = weight.map_or(1.0, |t| t.data()[k]);
        out[k % d] += x * w;
    }
    Tensor::matrix(1, d, out).expect("row")
}

/// Central differences of `f` at `theta`, one coordinate at a time.
pub fn central_difference(mut f: impl FnMut(&Tensor) -> f64, theta: &Tensor, h: f64) -> Tensor {
    let mut probe = theta.clone();
    let mut out = theta.map(|_| 0.0);
    for k in 0..theta.len() {
        let x0 = theta.data()[k];
        probe.data_mut()[k] = x0 + h;
        let fp = f(&probe);
        probe.data_mut()[k] = x0 - h;
        let fm = f(&probe);
        probe.data_mut()[k] = x0;
        out.data_mut()[k] = (fp - fm) / (2.0 * h);
    }
    out
}

/// `max_k |a_k - n_k| / (|a_k| + eps_abs)`.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor, eps_abs: f64) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / (a.abs() + eps_abs))
        .fold(0.0, f64::max)
}

/// Compares the tape gradient of a scalar function against central differences.
///
/// `f` records its computation on the given tape starting from the leaf for `theta`.
pub fn finite_diff_check<F>(f: F, theta: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(theta.clone());
    let loss = f(&mut tape, x)?;
    let analytic = tape.backward(loss)?.wrt(x);

    let mut failure = None;
    let numeric = central_difference(
        |t| {
            let mut tp = Tape::new();
            let x = tp.leaf(t.clone());
            match f(&mut tp, x) {
                Ok(l) => tp.scalar(l),
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        theta,
        h,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(max_relative_error(&analytic, &numeric, FD_EPS_ABS))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn half_squared_norm_gradient_is_x() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row_vector(&[1.0, -2.0, 3.0]));
        let sq = t.act(x, Act::Square);
        let s = t.sum(sq);
        let l = t.scale(s, 0.5);
        let g = t.backward(l).unwrap().wrt(x);
        assert_eq!(g.data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn constant_loss_gives_zero_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row_vector(&[1.0, 2.0]));
        let c = t.constant(Tensor::scalar(3.0));
        let l = t.scale(c, 2.0);
        let g = t.backward(l).unwrap().wrt(x);
        assert_eq!(g.data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row_vector(&[1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn uniform_cross_entropy_is_log_c() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::zeros(1, 7));
        for y in 0..7 {
            let ce = t.cross_entropy(z, &[y]).unwrap();
            assert!((t.scalar(ce) - 7f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn masked_softmax_is_exactly_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row_vector(&[0.3, f64::MIN, -1.0, f64::MIN]));
        let p = t.softmax(x);
        let v = t.value(p).data().to_vec();
        assert_eq!(v[1], 0.0);
        assert_eq!(v[3], 0.0);
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        let w = t.constant(Tensor::row_vector(&[1.0, 2.0, 3.0, 4.0]));
        let m = t.mul(p, w).unwrap();
        let l = t.sum(m);
        let g = t.backward(l).unwrap().wrt(x);
        assert_eq!(g.data()[1], 0.0);
        assert!(g.is_finite());
    }

    #[test]
    fn cross_entropy_gradient_matches_closed_form() {
        // d/dz CE(Wz, y) = Wᵀ(softmax(Wz) − e_y)
        let mut r = rng();
        let w = Tensor::randn(5, 3, 1.0, &mut r);
        let z = Tensor::randn(1, 3, 1.0, &mut r);
        let y = 2;
        let mut t = Tape::new();
        let zv = t.leaf(z.clone());
        let wv = t.constant(w.clone());
        let logits = t.linear(zv, wv).unwrap();
        let ce = t.cross_entropy(logits, &[y]).unwrap();
        let l = t.sum(ce);
        let g = t.backward(l).unwrap().wrt(zv);

        let eta = w.matmul(&z.transpose()).unwrap();
        let mut p = softmax_row(eta.data(), None);
        p[y] -= 1.0;
        let resid = Tensor::matrix(5, 1, p).unwrap();
        let expect = w.transpose().matmul(&resid).unwrap().transpose();
        assert!(g.max_abs_diff(&expect) < 1e-14);
    }

    #[test]
    fn quadratic_fd_error_is_tiny() {
        let theta = Tensor::row_vector(&[0.5, -1.5, 2.0]);
        let err = finite_diff_check(
            |t, x| {
                let sq = t.act(x, Act::Square);
                let s = t.sum(sq);
                Ok(t.scale(s, 1.5))
            },
            &theta,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn constant_function_fd_error_is_zero() {
        let theta = Tensor::row_vector(&[0.5, -1.5]);
        let err = finite_diff_check(
            |t, _| Ok(t.constant(Tensor::scalar(4.0))),
            &theta,
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn shared_input_accumulates() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row_vector(&[2.0]));
        let y = t.mul(x, x).unwrap();
        let z = t.add(y, x).unwrap();
        let l = t.sum(z);
        assert_eq!(t.backward(l).unwrap().wrt(x).data(), &[5.0]);
    }
}
