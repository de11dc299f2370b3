//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! A [`Tape`] records every operation of one forward pass. Nodes are
//! appended in evaluation order, so walking the tape backwards visits each
//! node after all of its consumers. A backward pass may be seeded at several
//! nodes at once, which lets batch-level losses computed outside the tape
//! feed their gradients back into per-sample graphs.

use std::collections::HashMap;

use super::{Matrix, ParamId, ParamStore};
use crate::error::{Error, Result};

/// Handle to a differentiable node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Combine(Vec<(NodeId, f64)>),
    Hadamard(NodeId, NodeId),
    ScaleByEntry {
        x: NodeId,
        m: NodeId,
        index: usize,
    },
    SoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    L2Normalize {
        x: NodeId,
        eps: f64,
        norm: f64,
    },
    SumPool {
        x: NodeId,
        stride: usize,
    },
    MeanRows(NodeId),
    StackRows(Vec<NodeId>),
    Sum(NodeId),
    External {
        inputs: Vec<NodeId>,
        local_grads: Vec<Matrix>,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        probs: Matrix,
        target: usize,
    },
    SigmoidCrossEntropy {
        logits: NodeId,
        targets: Matrix,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(ParamId, NodeId)>,
    param_index: HashMap<ParamId, NodeId>,
}

/// Gradients produced by one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, node: NodeId) -> Option<&Matrix> {
        self.grads.get(node.0).and_then(|g| g.as_ref())
    }
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

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    /// Scalar value of a `1×1` node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.shape(), (1, 1));
        v[(0, 0)]
    }

    fn push(&mut self, value: Matrix, op: Op, name: &'static str) -> Result<NodeId> {
        value.ensure_finite(name)?;
        self.nodes.push(Node { value, op });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// A leaf not tied to any parameter (inputs, constants).
    pub fn leaf(&mut self, value: Matrix) -> Result<NodeId> {
        self.push(value, Op::Leaf, "leaf")
    }

    /// The leaf for parameter `id`, created on first use.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<NodeId> {
        if let Some(&node) = self.param_index.get(&id) {
            return Ok(node);
        }
        let node = self.push(store.value(id).clone(), Op::Leaf, "param")?;
        self.params.push((id, node));
        self.param_index.insert(id, node);
        Ok(node)
    }

    /// Parameters that entered this tape, in first-use order.
    pub fn param_nodes(&self) -> &[(ParamId, NodeId)] {
        &self.params
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push(v, Op::MatMul(a, b), "matmul")
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul_t(self.value(b))?;
        self.push(v, Op::MatMulT(a, b), "matmul_t")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        self.push(v, Op::Add(a, b), "add")
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(Error::shape("add_row", av.shape(), rv.shape()));
        }
        let mut v = av.clone();
        for r in 0..v.rows() {
            for (o, b) in v.row_mut(r).iter_mut().zip(rv.as_slice()) {
                *o += b;
            }
        }
        self.push(v, Op::AddRow(a, row), "add_row")
    }

    /// `Σ c_k · x_k` over equally shaped nodes.
    pub fn combine(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId> {
        let (first, _) = *terms
            .first()
            .ok_or_else(|| Error::Contract("combine needs at least one term".into()))?;
        let (r, c) = self.shape(first);
        let mut v = Matrix::zeros(r, c);
        for &(x, coef) in terms {
            v.axpy(coef, self.value(x))?;
        }
        self.push(v, Op::Combine(terms.to_vec()), "combine")
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.combine(&[(x, c)])
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).hadamard(self.value(b))?;
        self.push(v, Op::Hadamard(a, b), "hadamard")
    }

    /// `x · m[0, index]` for a row-vector node `m`.
    pub fn scale_by_entry(&mut self, x: NodeId, m: NodeId, index: usize) -> Result<NodeId> {
        let mv = self.value(m);
        if mv.rows() != 1 || index >= mv.cols() {
            return Err(Error::shape("scale_by_entry", mv.shape(), (1, index + 1)));
        }
        let c = mv[(0, index)];
        let v = self.value(x).scale(c);
        self.push(v, Op::ScaleByEntry { x, m, index }, "scale_by_entry")
    }

    /// Row-wise softmax, stabilised by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let v = softmax_rows(self.value(x));
        self.push(v, Op::SoftmaxRows(x), "softmax_rows")
    }

    /// Per-row layer normalisation with population variance.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        if !(eps > 0.0) {
            return Err(Error::Contract(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let xv = self.value(x);
        let n = xv.cols();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.shape() != (1, n) || bv.shape() != (1, n) || n == 0 {
            return Err(Error::shape("layer_norm", xv.shape(), gv.shape()));
        }
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.rows());
        let mut out = Matrix::zeros(xv.rows(), n);
        for r in 0..xv.rows() {
            let row = xhat.row_mut(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let s = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * s);
            inv_std.push(s);
            for (j, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = xhat[(r, j)] * gv[(0, j)] + bv[(0, j)];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            "layer_norm",
        )
    }

    /// `x / max(‖x‖₂, eps)` over all entries of `x`.
    pub fn l2_normalize(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        if !(eps > 0.0) {
            return Err(Error::Contract(format!("l2_normalize eps must be > 0, got {eps}")));
        }
        let xv = self.value(x);
        let norm = xv.frobenius_norm();
        let v = xv.scale(1.0 / norm.max(eps));
        self.push(v, Op::L2Normalize { x, eps, norm }, "l2_normalize")
    }

    /// Sums consecutive blocks of `stride` entries of a row vector.
    pub fn sum_pool_stride(&mut self, x: NodeId, stride: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rows() != 1 || stride == 0 || xv.cols() % stride != 0 {
            return Err(Error::Shape {
                op: "sum_pool_stride",
                left: format!("{}x{}", xv.rows(), xv.cols()),
                right: format!("stride {stride}"),
            });
        }
        let out: Vec<f64> = xv
            .as_slice()
            .chunks(stride)
            .map(|c| c.iter().sum())
            .collect();
        self.push(Matrix::row_vector(&out), Op::SumPool { x, stride }, "sum_pool_stride")
    }

    pub fn mean_pool_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rows() == 0 {
            return Err(Error::Contract("mean_pool_rows needs at least one row".into()));
        }
        let v = xv.column_means();
        self.push(v, Op::MeanRows(x), "mean_pool_rows")
    }

    /// Stacks equally wide nodes vertically.
    pub fn stack_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let values: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::vstack(&values)?;
        self.push(v, Op::StackRows(parts.to_vec()), "stack_rows")
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).sum();
        self.push(Matrix::filled(1, 1, s), Op::Sum(x), "sum")
    }

    /// Scalar node whose value and local gradients come from outside the
    /// tape. Backward scales each `local_grads[k]` by the upstream gradient
    /// and accumulates it into `inputs[k]`.
    pub fn external_scalar(
        &mut self,
        value: f64,
        inputs: &[NodeId],
        local_grads: Vec<Matrix>,
    ) -> Result<NodeId> {
        if inputs.len() != local_grads.len() {
            return Err(Error::Contract("external_scalar: one gradient per input".into()));
        }
        for (&i, g) in inputs.iter().zip(&local_grads) {
            if self.shape(i) != g.shape() {
                return Err(Error::shape("external_scalar", self.shape(i), g.shape()));
            }
            g.ensure_finite("external_scalar")?;
        }
        self.push(
            Matrix::filled(1, 1, value),
            Op::External {
                inputs: inputs.to_vec(),
                local_grads,
            },
            "external_scalar",
        )
    }

    /// `−ln softmax(logits)[target]` for a `1×C` logit row.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, target: usize) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.rows() != 1 || target >= lv.cols() {
            return Err(Error::Contract(format!(
                "label {target} invalid for {} classes",
                lv.cols()
            )));
        }
        let max = lv.as_slice().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + lv.as_slice().iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        let loss = lse - lv[(0, target)];
        let probs = softmax_rows(lv);
        self.push(
            Matrix::filled(1, 1, loss),
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                target,
            },
            "softmax_cross_entropy",
        )
    }

    /// Mean per-class binary cross-entropy on sigmoid outputs.
    pub fn sigmoid_cross_entropy(&mut self, logits: NodeId, targets: &[bool]) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.rows() != 1 || targets.len() != lv.cols() {
            return Err(Error::Contract(format!(
                "label vector of length {} invalid for {} classes",
                targets.len(),
                lv.cols()
            )));
        }
        let c = lv.cols() as f64;
        let loss = lv
            .as_slice()
            .iter()
            .zip(targets)
            .map(|(&z, &y)| softplus(z) - if y { z } else { 0.0 })
            .sum::<f64>()
            / c;
        let targets = Matrix::row_vector(&targets.iter().map(|&y| y as u8 as f64).collect::<Vec<_>>());
        self.push(
            Matrix::filled(1, 1, loss),
            Op::SigmoidCrossEntropy { logits, targets },
            "sigmoid_cross_entropy",
        )
    }

    /// Backward pass from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Contract("backward needs a scalar (1x1) root".into()));
        }
        self.backward_seeded(&[(loss, Matrix::filled(1, 1, 1.0))])
    }

    /// Backward pass seeded with upstream gradients at arbitrary nodes.
    pub fn backward_seeded(&self, seeds: &[(NodeId, Matrix)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        let mut start = 0;
        for (node, g) in seeds {
            if g.shape() != self.shape(*node) {
                return Err(Error::shape("backward seed", self.shape(*node), g.shape()));
            }
            accumulate(&mut grads, *node, g);
            start = start.max(node.0);
        }

        for idx in (0..=start.min(self.nodes.len().saturating_sub(1))).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        for g in grads.iter().flatten() {
            g.ensure_finite("backward")?;
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ga = g.matmul_t(self.value(*b))?;
                let gb = self.value(*a).t_matmul(g)?;
                accumulate(grads, *a, &ga);
                accumulate(grads, *b, &gb);
            }
            Op::MatMulT(a, b) => {
                let ga = g.matmul(self.value(*b))?;
                let gb = g.t_matmul(self.value(*a))?;
                accumulate(grads, *a, &ga);
                accumulate(grads, *b, &gb);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g);
                accumulate(grads, *b, g);
            }
            Op::AddRow(a, row) => {
                accumulate(grads, *a, g);
                let mut gr = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, v) in gr.as_mut_slice().iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                accumulate(grads, *row, &gr);
            }
            Op::Combine(terms) => {
                for &(x, c) in terms {
                    accumulate(grads, x, &g.scale(c));
                }
            }
            Op::Hadamard(a, b) => {
                let ga = g.hadamard(self.value(*b))?;
                let gb = g.hadamard(self.value(*a))?;
                accumulate(grads, *a, &ga);
                accumulate(grads, *b, &gb);
            }
            Op::ScaleByEntry { x, m, index } => {
                let c = self.value(*m)[(0, *index)];
                accumulate(grads, *x, &g.scale(c));
                let dm: f64 = g.hadamard(self.value(*x))?.sum();
                let mut gm = Matrix::zeros(1, self.value(*m).cols());
                gm[(0, *index)] = dm;
                accumulate(grads, *m, &gm);
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let mut gx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                    for (j, o) in gx.row_mut(r).iter_mut().enumerate() {
                        *o = y[(r, j)] * (g[(r, j)] - dot);
                    }
                }
                accumulate(grads, *x, &gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gamma);
                let (rows, n) = xhat.shape();
                let mut ggamma = Matrix::zeros(1, n);
                let mut gbeta = Matrix::zeros(1, n);
                let mut gx = Matrix::zeros(rows, n);
                for r in 0..rows {
                    let mut sum_gh = 0.0;
                    let mut sum_gh_xh = 0.0;
                    for j in 0..n {
                        let gh = g[(r, j)] * gv[(0, j)];
                        sum_gh += gh;
                        sum_gh_xh += gh * xhat[(r, j)];
                        ggamma[(0, j)] += g[(r, j)] * xhat[(r, j)];
                        gbeta[(0, j)] += g[(r, j)];
                    }
                    let k = inv_std[r] / n as f64;
                    for j in 0..n {
                        let gh = g[(r, j)] * gv[(0, j)];
                        gx[(r, j)] = k * (n as f64 * gh - sum_gh - xhat[(r, j)] * sum_gh_xh);
                    }
                }
                accumulate(grads, *x, &gx);
                accumulate(grads, *gamma, &ggamma);
                accumulate(grads, *beta, &gbeta);
            }
            Op::L2Normalize { x, eps, norm } => {
                let gx = if *norm >= *eps {
                    let y = &node.value;
                    let dot: f64 = y.as_slice().iter().zip(g.as_slice()).map(|(a, b)| a * b).sum();
                    let mut gx = g.clone();
                    gx.axpy(-dot, y)?;
                    gx.scale(1.0 / norm)
                } else {
                    g.scale(1.0 / eps)
                };
                accumulate(grads, *x, &gx);
            }
            Op::SumPool { x, stride } => {
                let n = self.value(*x).cols();
                let gx: Vec<f64> = (0..n).map(|k| g[(0, k / stride)]).collect();
                accumulate(grads, *x, &Matrix::row_vector(&gx));
            }
            Op::MeanRows(x) => {
                let m = self.value(*x).rows();
                let mut gx = Matrix::zeros(m, g.cols());
                let inv = 1.0 / m as f64;
                for r in 0..m {
                    for (o, v) in gx.row_mut(r).iter_mut().zip(g.as_slice()) {
                        *o = v * inv;
                    }
                }
                accumulate(grads, *x, &gx);
            }
            Op::StackRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    let slice = g.as_slice()[offset * c..(offset + r) * c].to_vec();
                    accumulate(grads, p, &Matrix::from_vec(r, c, slice)?);
                    offset += r;
                }
            }
            Op::Sum(x) => {
                let (r, c) = self.shape(*x);
                accumulate(grads, *x, &Matrix::filled(r, c, g[(0, 0)]));
            }
            Op::External {
                inputs,
                local_grads,
            } => {
                for (&i, lg) in inputs.iter().zip(local_grads) {
                    accumulate(grads, i, &lg.scale(g[(0, 0)]));
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                target,
            } => {
                let mut gl = probs.clone();
                gl[(0, *target)] -= 1.0;
                accumulate(grads, *logits, &gl.scale(g[(0, 0)]));
            }
            Op::SigmoidCrossEntropy { logits, targets } => {
                let z = self.value(*logits);
                let c = z.cols() as f64;
                let gl: Vec<f64> = z
                    .as_slice()
                    .iter()
                    .zip(targets.as_slice())
                    .map(|(&z, &y)| g[(0, 0)] * (sigmoid(z) - y) / c)
                    .collect();
                accumulate(grads, *logits, &Matrix::row_vector(&gl));
            }
        }
        Ok(())
    }

    /// Gradients of every parameter that entered the tape, in first-use order.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Matrix)> {
        self.params
            .iter()
            .map(|&(pid, node)| {
                let g = grads
                    .get(node)
                    .cloned()
                    .unwrap_or_else(|| Matrix::zeros(self.shape(node).0, self.shape(node).1));
                (pid, g)
            })
            .collect()
    }
}

fn accumulate(grads: &mut [Option<Matrix>], node: NodeId, g: &Matrix) {
    match &mut grads[node.0] {
        Some(existing) => {
            existing.add_assign(g).expect("gradient shape matches node");
        }
        slot @ None => *slot = Some(g.clone()),
    }
}

pub(crate) fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    out
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}
