//! Reverse-mode differentiation over a flat tape.
//!
//! A [`Graph`] records every operation applied during a forward pass.
//! Parameters enter as leaves; [`Graph::backward`] walks the tape in reverse
//! and returns gradients for every node that depends on a leaf created with
//! `requires_grad`. Graphs are built per training step and thrown away.

use super::tensor::{dot, gemm_acc, gemm_at_acc, gemm_bt_acc, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv1d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    ReplaceRows {
        input: Var,
        fill: Var,
        rows: Vec<bool>,
    },
    SelectRows {
        input: Var,
        rows: Vec<usize>,
    },
    SliceCols {
        input: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros of `shape` if nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var, shape: &[usize]) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn require_rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::Dimension {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![0, 0],
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, deps: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric {
                op: name.to_string(),
            });
        }
        let requires_grad = deps.iter().any(|d| self.nodes[d.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = require_rank2("matmul", av)?;
        let (k2, n) = require_rank2("matmul", bv)?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(av.data(), bv.data(), &mut out, m, k, n);
        let value = Tensor::matrix(m, n, out)?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = require_rank2("transpose", av)?;
        let src = av.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let value = Tensor::matrix(n, m, out)?;
        self.push("transpose", value, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("add", av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        let (_, n) = require_rank2("add_bias", av)?;
        if bv.len() != n || bv.rank() != 1 {
            return Err(Error::Dimension {
                op: "add_bias",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let b = bv.data();
        let data = av
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push("add_bias", value, Op::AddBias(a, bias), &[a, bias])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("mul", av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let av = self.value(a);
        let data = av.data().iter().map(|x| x * factor).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push("scale", value, Op::Scale(a, factor), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let data = av.data().iter().map(|x| x.tanh()).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push("tanh", value, Op::Tanh(a), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push("gelu", value, Op::Gelu(a), &[a])
    }

    /// Softmax along the last axis of a rank-2 tensor.
    ///
    /// When `valid` is given it flags which columns take part; the others get
    /// probability exactly zero and receive no gradient.
    pub fn softmax_rows(&mut self, a: Var, valid: Option<&[bool]>) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = require_rank2("softmax", av)?;
        if let Some(mask) = valid {
            if mask.len() != n {
                return Err(Error::Dimension {
                    op: "softmax",
                    lhs: av.shape().to_vec(),
                    rhs: vec![mask.len()],
                });
            }
            if !mask.iter().any(|&v| v) {
                return Err(Error::Input("softmax over zero valid entries".into()));
            }
        }
        let keep = |j: usize| valid.is_none_or(|mask| mask[j]);
        let mut out = vec![0.0; m * n];
        for (row, dst) in av.data().chunks(n).zip(out.chunks_mut(n)) {
            let max = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| keep(j))
                .map(|(_, &v)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (j, (d, &v)) in dst.iter_mut().zip(row).enumerate() {
                if keep(j) {
                    *d = (v - max).exp();
                    total += *d;
                }
            }
            for d in dst.iter_mut() {
                *d /= total;
            }
        }
        let value = Tensor::matrix(m, n, out)?;
        self.push("softmax", value, Op::Softmax(a), &[a])
    }

    /// Layer normalisation over the last axis with learned gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = require_rank2("layer_norm", xv)?;
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.len() != n || bv.len() != n {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: xv.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let mut normed = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let nh = (row[j] - mean) * is;
                normed[i * n + j] = nh;
                out[i * n + j] = nh * gv.data()[j] + bv.data()[j];
            }
        }
        let value = Tensor::matrix(m, n, out)?;
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                input: x,
                gamma,
                beta,
                normed,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Strided 1-D convolution over a time-major `T_in × C_in` input.
    ///
    /// `weight` is `C_out × (kernel · C_in)` with the kernel offset as the
    /// outer index, so each output frame is a dot product with a contiguous
    /// window of the input. Output is `T_out × C_out` with
    /// `T_out = (T_in − kernel) / stride + 1`.
    pub fn conv1d(&mut self, input: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
        let (xv, wv, bv) = (self.value(input), self.value(weight), self.value(bias));
        let (t_in, c_in) = require_rank2("conv1d", xv)?;
        let (c_out, window) = require_rank2("conv1d", wv)?;
        if stride == 0 || c_in == 0 || window % c_in != 0 || bv.len() != c_out {
            return Err(Error::Dimension {
                op: "conv1d",
                lhs: xv.shape().to_vec(),
                rhs: wv.shape().to_vec(),
            });
        }
        let kernel = window / c_in;
        if t_in < kernel {
            return Err(Error::Length(format!(
                "conv1d input has {t_in} frames, kernel needs {kernel}"
            )));
        }
        let t_out = (t_in - kernel) / stride + 1;
        let x = xv.data();
        let mut out = vec![0.0; t_out * c_out];
        for t in 0..t_out {
            let start = t * stride * c_in;
            let win = &x[start..start + window];
            for o in 0..c_out {
                out[t * c_out + o] = bv.data()[o] + dot(wv.row(o), win);
            }
        }
        let value = Tensor::matrix(t_out, c_out, out)?;
        self.push(
            "conv1d",
            value,
            Op::Conv1d {
                input,
                weight,
                bias,
                stride,
            },
            &[input, weight, bias],
        )
    }

    /// Gathers rows of `table` by index.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (vocab, d) = require_rank2("embedding", tv)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Dimension {
                op: "embedding",
                lhs: tv.shape().to_vec(),
                rhs: vec![bad],
            });
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(tv.row(i));
        }
        let value = Tensor::matrix(ids.len(), d, out)?;
        self.push(
            "embedding",
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Per-row cross-entropy `logsumexp(z) − z[target]`, returned as a length-N vector.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (m, n) = require_rank2("cross_entropy", lv)?;
        if targets.len() != m {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::Label(format!(
                "target class {bad} out of range for {n} classes"
            )));
        }
        let mut probs = vec![0.0; m * n];
        let mut losses = Vec::with_capacity(m);
        for (i, row) in lv.data().chunks(n).enumerate() {
            let lse = log_sum_exp(row);
            for (p, &z) in probs[i * n..(i + 1) * n].iter_mut().zip(row) {
                *p = (z - lse).exp();
            }
            losses.push(lse - row[targets[i]]);
        }
        let value = Tensor::vector(losses);
        self.push(
            "cross_entropy",
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Replaces every row flagged in `rows` with the vector `fill`.
    pub fn replace_rows(&mut self, input: Var, fill: Var, rows: &[bool]) -> Result<Var> {
        let (xv, fv) = (self.value(input), self.value(fill));
        let (m, n) = require_rank2("replace_rows", xv)?;
        if fv.len() != n || rows.len() != m {
            return Err(Error::Dimension {
                op: "replace_rows",
                lhs: xv.shape().to_vec(),
                rhs: vec![rows.len(), fv.len()],
            });
        }
        let mut out = xv.clone();
        for (i, &r) in rows.iter().enumerate() {
            if r {
                out.row_mut(i).copy_from_slice(fv.data());
            }
        }
        self.push(
            "replace_rows",
            out,
            Op::ReplaceRows {
                input,
                fill,
                rows: rows.to_vec(),
            },
            &[input, fill],
        )
    }

    /// Gathers leading-axis slices (rows of a matrix, elements of a vector).
    pub fn select_rows(&mut self, input: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(input);
        if xv.rank() == 0 {
            return Err(Error::Dimension {
                op: "select_rows",
                lhs: vec![],
                rhs: vec![rows.len()],
            });
        }
        let n_rows = xv.rows();
        if let Some(&bad) = rows.iter().find(|&&r| r >= n_rows) {
            return Err(Error::Dimension {
                op: "select_rows",
                lhs: xv.shape().to_vec(),
                rhs: vec![bad],
            });
        }
        let mut data = Vec::with_capacity(rows.len() * xv.row_width());
        for &r in rows {
            data.extend_from_slice(xv.row(r));
        }
        let mut shape = xv.shape().to_vec();
        shape[0] = rows.len();
        let value = Tensor::new(shape, data)?;
        self.push(
            "select_rows",
            value,
            Op::SelectRows {
                input,
                rows: rows.to_vec(),
            },
            &[input],
        )
    }

    pub fn slice_cols(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(input);
        let (m, n) = require_rank2("slice_cols", xv)?;
        if start + len > n {
            return Err(Error::Dimension {
                op: "slice_cols",
                lhs: xv.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let mut out = Vec::with_capacity(m * len);
        for row in xv.iter_rows() {
            out.extend_from_slice(&row[start..start + len]);
        }
        let value = Tensor::matrix(m, len, out)?;
        self.push("slice_cols", value, Op::SliceCols { input, start }, &[input])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Input("concat_cols of nothing".into()))?;
        let m = self.value(*first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let pv = self.value(p);
            let (pm, pn) = require_rank2("concat_cols", pv)?;
            if pm != m {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: self.value(*first).shape().to_vec(),
                    rhs: pv.shape().to_vec(),
                });
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::matrix(m, total, out)?;
        self.push("concat_cols", value, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.is_empty() {
            return Err(Error::Input("mean of an empty tensor".into()));
        }
        let s = av.data().iter().sum::<f64>() / av.len() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Back-propagates from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Dimension {
                op: "backward",
                lhs: lv.shape().to_vec(),
                rhs: vec![],
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, delta: Tensor) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_bt_acc(g.data(), bv.data(), &mut da, m, n, k);
                    self.accumulate(grads, *a, Tensor::matrix(m, k, da)?);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm_at_acc(av.data(), g.data(), &mut db, m, k, n);
                    self.accumulate(grads, *b, Tensor::matrix(k, n, db)?);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (g.shape()[0], g.shape()[1]);
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[j * m + i] = g.data()[i * n + j];
                    }
                }
                self.accumulate(grads, *a, Tensor::matrix(n, m, da)?);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddBias(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.requires_grad(*b) {
                    let n = g.cols();
                    let mut db = vec![0.0; n];
                    for row in g.iter_rows() {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::vector(db));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let shape = g.shape().to_vec();
                if self.requires_grad(*a) {
                    let da = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::new(shape.clone(), da)?);
                }
                if self.requires_grad(*b) {
                    let db = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::new(shape, db)?);
                }
            }
            Op::Scale(a, factor) => {
                let da = g.data().iter().map(|x| x * factor).collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), da)?);
            }
            Op::Tanh(a) => {
                let da = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(gi, y)| gi * (1.0 - y * y))
                    .collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), da)?);
            }
            Op::Gelu(a) => {
                let xv = self.value(*a);
                let da = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(gi, &x)| {
                        let u = GELU_C * (x + GELU_A * x * x * x);
                        let th = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        gi * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du)
                    })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), da)?);
            }
            Op::Softmax(a) => {
                let n = out.cols();
                let mut da = vec![0.0; out.len()];
                for ((y, gr), d) in out
                    .data()
                    .chunks(n)
                    .zip(g.data().chunks(n))
                    .zip(da.chunks_mut(n))
                {
                    let inner = dot(y, gr);
                    for j in 0..n {
                        d[j] = y[j] * (gr[j] - inner);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(out.shape().to_vec(), da)?);
            }
            Op::LayerNorm {
                input,
                gamma,
                beta,
                normed,
                inv_std,
            } => {
                let n = out.cols();
                let m = out.rows();
                let gv = self.value(*gamma);
                if self.requires_grad(*input) {
                    let mut dx = vec![0.0; m * n];
                    for i in 0..m {
                        let gr = &g.data()[i * n..(i + 1) * n];
                        let nh = &normed[i * n..(i + 1) * n];
                        let scaled: Vec<f64> =
                            gr.iter().zip(gv.data()).map(|(a, b)| a * b).collect();
                        let mean_s = scaled.iter().sum::<f64>() / n as f64;
                        let mean_sn = dot(&scaled, nh) / n as f64;
                        for j in 0..n {
                            dx[i * n + j] = inv_std[i] * (scaled[j] - mean_s - nh[j] * mean_sn);
                        }
                    }
                    self.accumulate(grads, *input, Tensor::matrix(m, n, dx)?);
                }
                if self.requires_grad(*gamma) || self.requires_grad(*beta) {
                    let mut dg = vec![0.0; n];
                    let mut db = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g.data()[i * n + j];
                            dg[j] += gij * normed[i * n + j];
                            db[j] += gij;
                        }
                    }
                    let gshape = gv.shape().to_vec();
                    let bshape = self.value(*beta).shape().to_vec();
                    self.accumulate(grads, *gamma, Tensor::new(gshape, dg)?);
                    self.accumulate(grads, *beta, Tensor::new(bshape, db)?);
                }
            }
            Op::Conv1d {
                input,
                weight,
                bias,
                stride,
            } => {
                let (xv, wv) = (self.value(*input), self.value(*weight));
                let c_in = xv.cols();
                let (c_out, window) = (wv.shape()[0], wv.shape()[1]);
                let t_out = out.rows();
                let mut dx = vec![0.0; xv.len()];
                let mut dw = vec![0.0; wv.len()];
                let mut db = vec![0.0; c_out];
                for t in 0..t_out {
                    let start = t * stride * c_in;
                    let win = &xv.data()[start..start + window];
                    for o in 0..c_out {
                        let go = g.data()[t * c_out + o];
                        if go == 0.0 {
                            continue;
                        }
                        db[o] += go;
                        let w_row = wv.row(o);
                        for p in 0..window {
                            dw[o * window + p] += go * win[p];
                            dx[start + p] += go * w_row[p];
                        }
                    }
                }
                self.accumulate(grads, *input, Tensor::new(xv.shape().to_vec(), dx)?);
                self.accumulate(grads, *weight, Tensor::new(wv.shape().to_vec(), dw)?);
                let bshape = self.value(*bias).shape().to_vec();
                self.accumulate(grads, *bias, Tensor::new(bshape, db)?);
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let mut dt = Tensor::zeros(tv.shape());
                for (r, &id) in ids.iter().enumerate() {
                    for (d, v) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                self.accumulate(grads, *table, dt);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let lv = self.value(*logits);
                let n = lv.cols();
                let mut dl = vec![0.0; lv.len()];
                for (i, &t) in targets.iter().enumerate() {
                    let gi = g.data()[i];
                    for j in 0..n {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        dl[i * n + j] = gi * (probs[i * n + j] - onehot);
                    }
                }
                self.accumulate(grads, *logits, Tensor::new(lv.shape().to_vec(), dl)?);
            }
            Op::ReplaceRows { input, fill, rows } => {
                let n = g.cols();
                if self.requires_grad(*input) {
                    let mut dx = g.clone();
                    for (i, &r) in rows.iter().enumerate() {
                        if r {
                            dx.row_mut(i).fill(0.0);
                        }
                    }
                    self.accumulate(grads, *input, dx);
                }
                if self.requires_grad(*fill) {
                    let mut df = vec![0.0; n];
                    for (i, &r) in rows.iter().enumerate() {
                        if r {
                            for (d, v) in df.iter_mut().zip(g.row(i)) {
                                *d += v;
                            }
                        }
                    }
                    let fshape = self.value(*fill).shape().to_vec();
                    self.accumulate(grads, *fill, Tensor::new(fshape, df)?);
                }
            }
            Op::SelectRows { input, rows } => {
                let xv = self.value(*input);
                let mut dx = Tensor::zeros(xv.shape());
                for (j, &r) in rows.iter().enumerate() {
                    for (d, v) in dx.row_mut(r).iter_mut().zip(g.row(j)) {
                        *d += v;
                    }
                }
                self.accumulate(grads, *input, dx);
            }
            Op::SliceCols { input, start } => {
                let xv = self.value(*input);
                let len = g.cols();
                let mut dx = Tensor::zeros(xv.shape());
                for i in 0..g.rows() {
                    dx.row_mut(i)[*start..start + len].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *input, dx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let w = pv.cols();
                    if self.requires_grad(p) {
                        let mut dp = Vec::with_capacity(pv.len());
                        for row in g.iter_rows() {
                            dp.extend_from_slice(&row[offset..offset + w]);
                        }
                        self.accumulate(grads, p, Tensor::new(pv.shape().to_vec(), dp)?);
                    }
                    offset += w;
                }
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::full(&shape, g.item()));
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                let shape = av.shape().to_vec();
                let v = g.item() / av.len() as f64;
                self.accumulate(grads, *a, Tensor::full(&shape, v));
            }
        }
        Ok(())
    }
}
