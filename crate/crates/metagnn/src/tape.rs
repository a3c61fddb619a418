//! Reverse-mode automatic differentiation on a dynamic tape.
//!
//! Every operation appends a node with an eagerly computed value; gradients
//! are built by walking the tape backwards. When `create_graph` is set, the
//! backward pass records its vector-Jacobian products as ordinary tape nodes,
//! so a later `gradient` call differentiates *through* the first one. That is
//! what makes an inner gradient-descent step itself differentiable with
//! respect to the starting parameters, second-order terms included.
//!
//! The sparse operand of `Spmm` is a constant: adjacency is data, never a
//! parameter, so no gradient flows into it.

use std::sync::Arc;

use crate::dense::Dense;
use crate::error::{Error, Result};
use crate::graph::SparseMatrix;

pub type NodeId = usize;

/// Operation kinds. Payload-carrying variants hold the constants the op needs
/// beyond its parent values.
#[derive(Clone)]
pub enum Op {
    /// Leaf holding a fixed value; no gradient flows into it.
    Constant,
    /// Leaf registered as a differentiation target.
    Parameter,
    Add,
    Sub,
    /// Multiply by a constant scalar payload.
    ScalarMul(f64),
    MatMul,
    /// Sparse constant × dense parent.
    Spmm(Arc<SparseMatrix>),
    Relu,
    /// Row-wise log-softmax, computed with row-max subtraction.
    LogSoftmax,
    /// Mean over rows of the negative log-likelihood at the given label per
    /// row. Parent must hold row-wise log-probabilities.
    NllMean(Arc<Vec<usize>>),
    /// Elementwise product.
    Hadamard,
    Transpose,
    /// `aᵀ · b` without materializing the transpose.
    MatMulTransA,
    /// `a · bᵀ` without materializing the transpose.
    MatMulTransB,
    Exp,
    /// Sum of all entries, producing a 1×1 scalar.
    SumAll,
    /// Broadcast-multiply a 1×1 scalar parent over a matrix parent.
    ScaleBy,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Parameter => "parameter",
            Op::Add => "add",
            Op::Sub => "subtract",
            Op::ScalarMul(_) => "scalar_multiply",
            Op::MatMul => "matmul",
            Op::Spmm(_) => "spmm",
            Op::Relu => "relu",
            Op::LogSoftmax => "log_softmax",
            Op::NllMean(_) => "nll_mean",
            Op::Hadamard => "elementwise_multiply",
            Op::Transpose => "transpose",
            Op::MatMulTransA => "matmul_ta",
            Op::MatMulTransB => "matmul_tb",
            Op::Exp => "exp",
            Op::SumAll => "sum_all",
            Op::ScaleBy => "scale_by",
        }
    }
}

/// One tape entry: the op, its parents and the cached value.
pub struct Node {
    pub op: Op,
    pub parents: Vec<NodeId>,
    pub value: Dense,
    /// True iff a Parameter is reachable through the parents; backward skips
    /// adjoint work for anything else.
    pub needs_grad: bool,
}

/// Single-writer differentiation tape. Concurrent episodes each own a tape.
///
/// The `*_memo` maps cache backward-pass helper nodes (relu masks, softmax
/// values, loss coefficient matrices, ones matrices) so revisiting a node in
/// a later gradient call reuses them instead of re-materializing.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    relu_mask_memo: std::collections::HashMap<NodeId, NodeId>,
    softmax_memo: std::collections::HashMap<NodeId, NodeId>,
    nll_coeff_memo: std::collections::HashMap<NodeId, NodeId>,
    ones_memo: std::collections::HashMap<(usize, usize), NodeId>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn value(&self, id: NodeId) -> &Dense {
        &self.nodes[id].value
    }

    fn push(&mut self, op: Op, parents: Vec<NodeId>, value: Dense, needs_grad: bool) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        debug_assert!(parents.iter().all(|&p| p < self.nodes.len()));
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            parents,
            value,
            needs_grad,
        });
        Ok(id)
    }

    pub fn constant(&mut self, value: Dense) -> Result<NodeId> {
        self.push(Op::Constant, vec![], value, false)
    }

    pub fn parameter(&mut self, value: Dense) -> Result<NodeId> {
        self.push(Op::Parameter, vec![], value, true)
    }

    /// Append an operation node, eagerly computing its value.
    pub fn apply(&mut self, op: Op, parents: &[NodeId]) -> Result<NodeId> {
        for &p in parents {
            if p >= self.nodes.len() {
                return Err(Error::Index {
                    what: "tape parent",
                    index: p,
                    bound: self.nodes.len(),
                });
            }
        }
        let value = self.eval(&op, parents)?;
        let needs_grad = parents.iter().any(|&p| self.nodes[p].needs_grad);
        self.push(op, parents.to_vec(), value, needs_grad)
    }

    fn eval(&self, op: &Op, parents: &[NodeId]) -> Result<Dense> {
        let arity_err = |expected: usize| {
            Error::Contract(format!(
                "{}: expected {} parent(s), got {}",
                op.name(),
                expected,
                parents.len()
            ))
        };
        let unary = || -> Result<&Dense> {
            if parents.len() != 1 {
                return Err(arity_err(1));
            }
            Ok(&self.nodes[parents[0]].value)
        };
        let binary = || -> Result<(&Dense, &Dense)> {
            if parents.len() != 2 {
                return Err(arity_err(2));
            }
            Ok((&self.nodes[parents[0]].value, &self.nodes[parents[1]].value))
        };
        match op {
            Op::Constant | Op::Parameter => Err(Error::Contract(
                "leaf nodes are created via constant()/parameter()".into(),
            )),
            Op::Add => {
                let (a, b) = binary()?;
                a.zip_with(b, "add", |x, y| x + y)
            }
            Op::Sub => {
                let (a, b) = binary()?;
                a.zip_with(b, "subtract", |x, y| x - y)
            }
            Op::ScalarMul(s) => Ok(unary()?.scale(*s)),
            Op::MatMul => {
                let (a, b) = binary()?;
                a.matmul(b)
            }
            Op::Spmm(m) => m.spmm(unary()?),
            Op::Relu => Ok(unary()?.map(|v| v.max(0.0))),
            Op::LogSoftmax => Ok(log_softmax(unary()?)),
            Op::NllMean(labels) => {
                let y = unary()?;
                if labels.len() != y.rows() {
                    return Err(Error::Contract(format!(
                        "nll_mean: {} labels for {} rows",
                        labels.len(),
                        y.rows()
                    )));
                }
                let mut total = 0.0;
                for (r, &label) in labels.iter().enumerate() {
                    if label >= y.cols() {
                        return Err(Error::Contract(format!(
                            "nll_mean: label {} out of range for {} classes",
                            label,
                            y.cols()
                        )));
                    }
                    total -= y.get(r, label);
                }
                Ok(Dense::scalar(total / labels.len() as f64))
            }
            Op::Hadamard => {
                let (a, b) = binary()?;
                a.zip_with(b, "elementwise_multiply", |x, y| x * y)
            }
            Op::Transpose => Ok(unary()?.transpose()),
            Op::MatMulTransA => {
                let (a, b) = binary()?;
                a.matmul_ta(b)
            }
            Op::MatMulTransB => {
                let (a, b) = binary()?;
                a.matmul_tb(b)
            }
            Op::Exp => Ok(unary()?.map(f64::exp)),
            Op::SumAll => Ok(Dense::scalar(unary()?.sum())),
            Op::ScaleBy => {
                let (s, m) = binary()?;
                if !s.is_scalar() {
                    return Err(Error::Dim {
                        op: "scale_by",
                        lhs: s.shape(),
                        rhs: m.shape(),
                    });
                }
                Ok(m.scale(s.scalar_value()))
            }
        }
    }

    // convenience wrappers

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Sub, &[a, b])
    }

    pub fn scalar_mul(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        self.apply(Op::ScalarMul(s), &[a])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::MatMul, &[a, b])
    }

    pub fn spmm(&mut self, m: Arc<SparseMatrix>, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Spmm(m), &[x])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Relu, &[a])
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::LogSoftmax, &[a])
    }

    pub fn nll_mean(&mut self, a: NodeId, labels: Arc<Vec<usize>>) -> Result<NodeId> {
        self.apply(Op::NllMean(labels), &[a])
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Hadamard, &[a, b])
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Transpose, &[a])
    }

    pub fn matmul_ta(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::MatMulTransA, &[a, b])
    }

    pub fn matmul_tb(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::MatMulTransB, &[a, b])
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Exp, &[a])
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::SumAll, &[a])
    }

    pub fn scale_by(&mut self, scalar: NodeId, m: NodeId) -> Result<NodeId> {
        self.apply(Op::ScaleBy, &[scalar, m])
    }

    /// Gradients of a scalar `loss` with respect to each node in `wrt`.
    ///
    /// With `create_graph` the returned ids are live tape nodes a later
    /// `gradient` call can backpropagate through; without it they are
    /// detached constants. Nodes unreachable from the loss yield zeros.
    pub fn gradient(
        &mut self,
        loss: NodeId,
        wrt: &[NodeId],
        create_graph: bool,
    ) -> Result<Vec<NodeId>> {
        if loss >= self.nodes.len() {
            return Err(Error::Index {
                what: "loss node",
                index: loss,
                bound: self.nodes.len(),
            });
        }
        if !self.nodes[loss].value.is_scalar() {
            return Err(Error::Contract(format!(
                "gradient: loss must be scalar, got {:?}",
                self.nodes[loss].value.shape()
            )));
        }
        // adjoint[i] = node holding d loss / d node_i; only nodes that existed
        // before this call can receive one
        let mut adjoint: Vec<Option<NodeId>> = vec![None; self.nodes.len()];
        adjoint[loss] = Some(self.constant(Dense::scalar(1.0))?);

        for id in (0..=loss).rev() {
            let Some(d) = adjoint[id] else { continue };
            if !self.nodes[id].needs_grad {
                continue;
            }
            let (op, parents) = {
                let n = &self.nodes[id];
                (n.op.clone(), n.parents.clone())
            };
            let wants = |tape: &Tape, p: NodeId| tape.nodes[p].needs_grad;
            match op {
                Op::Constant | Op::Parameter => {}
                Op::Add => {
                    if wants(self, parents[0]) {
                        self.accumulate(&mut adjoint, parents[0], d)?;
                    }
                    if wants(self, parents[1]) {
                        self.accumulate(&mut adjoint, parents[1], d)?;
                    }
                }
                Op::Sub => {
                    if wants(self, parents[0]) {
                        self.accumulate(&mut adjoint, parents[0], d)?;
                    }
                    if wants(self, parents[1]) {
                        let neg = self.scalar_mul(d, -1.0)?;
                        self.accumulate(&mut adjoint, parents[1], neg)?;
                    }
                }
                Op::ScalarMul(s) => {
                    let g = self.scalar_mul(d, s)?;
                    self.accumulate(&mut adjoint, parents[0], g)?;
                }
                Op::MatMul => {
                    let (a, b) = (parents[0], parents[1]);
                    if wants(self, a) {
                        let da = self.matmul_tb(d, b)?;
                        self.accumulate(&mut adjoint, a, da)?;
                    }
                    if wants(self, b) {
                        let db = self.matmul_ta(a, d)?;
                        self.accumulate(&mut adjoint, b, db)?;
                    }
                }
                Op::MatMulTransA => {
                    // value = aᵀ·b
                    let (a, b) = (parents[0], parents[1]);
                    if wants(self, a) {
                        let da = self.matmul_tb(b, d)?;
                        self.accumulate(&mut adjoint, a, da)?;
                    }
                    if wants(self, b) {
                        let db = self.matmul(a, d)?;
                        self.accumulate(&mut adjoint, b, db)?;
                    }
                }
                Op::MatMulTransB => {
                    // value = a·bᵀ
                    let (a, b) = (parents[0], parents[1]);
                    if wants(self, a) {
                        let da = self.matmul(d, b)?;
                        self.accumulate(&mut adjoint, a, da)?;
                    }
                    if wants(self, b) {
                        let db = self.matmul_ta(d, a)?;
                        self.accumulate(&mut adjoint, b, db)?;
                    }
                }
                Op::Spmm(m) => {
                    let g = self.spmm(Arc::new(m.transpose()), d)?;
                    self.accumulate(&mut adjoint, parents[0], g)?;
                }
                Op::Relu => {
                    // mask is locally constant; zero subgradient at the kink
                    let mask = match self.relu_mask_memo.get(&id) {
                        Some(&m) => m,
                        None => {
                            let mask = self.nodes[parents[0]]
                                .value
                                .map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                            let m = self.constant(mask)?;
                            self.relu_mask_memo.insert(id, m);
                            m
                        }
                    };
                    let g = self.hadamard(d, mask)?;
                    self.accumulate(&mut adjoint, parents[0], g)?;
                }
                Op::LogSoftmax => {
                    // dx = d - softmax(x) ⊙ rowsum(d), with softmax(x) = exp(y)
                    let cols = self.nodes[id].value.cols();
                    let ones = self.ones_const(cols, cols)?;
                    let row_sums = self.matmul(d, ones)?;
                    let softmax = match self.softmax_memo.get(&id) {
                        Some(&s) => s,
                        None => {
                            let s = self.exp(id)?;
                            self.softmax_memo.insert(id, s);
                            s
                        }
                    };
                    let correction = self.hadamard(softmax, row_sums)?;
                    let g = self.sub(d, correction)?;
                    self.accumulate(&mut adjoint, parents[0], g)?;
                }
                Op::NllMean(labels) => {
                    // linear in the log-probs: constant coefficient matrix
                    let coeff = match self.nll_coeff_memo.get(&id) {
                        Some(&c) => c,
                        None => {
                            let y = &self.nodes[parents[0]].value;
                            let mut coeff = Dense::zeros(y.rows(), y.cols());
                            let scale = -1.0 / labels.len() as f64;
                            for (r, &label) in labels.iter().enumerate() {
                                coeff.set(r, label, scale);
                            }
                            let c = self.constant(coeff)?;
                            self.nll_coeff_memo.insert(id, c);
                            c
                        }
                    };
                    let g = self.scale_by(d, coeff)?;
                    self.accumulate(&mut adjoint, parents[0], g)?;
                }
                Op::Hadamard => {
                    let (a, b) = (parents[0], parents[1]);
                    if wants(self, a) {
                        let da = self.hadamard(d, b)?;
                        self.accumulate(&mut adjoint, a, da)?;
                    }
                    if wants(self, b) {
                        let db = self.hadamard(d, a)?;
                        self.accumulate(&mut adjoint, b, db)?;
                    }
                }
                Op::Transpose => {
                    let g = self.transpose(d)?;
                    self.accumulate(&mut adjoint, parents[0], g)?;
                }
                Op::Exp => {
                    let g = self.hadamard(d, id)?;
                    self.accumulate(&mut adjoint, parents[0], g)?;
                }
                Op::SumAll => {
                    let shape = self.nodes[parents[0]].value.shape();
                    let ones = self.ones_const(shape.0, shape.1)?;
                    let g = self.scale_by(d, ones)?;
                    self.accumulate(&mut adjoint, parents[0], g)?;
                }
                Op::ScaleBy => {
                    let (s, m) = (parents[0], parents[1]);
                    if wants(self, s) {
                        let dm_times_m = self.hadamard(d, m)?;
                        let ds = self.sum_all(dm_times_m)?;
                        self.accumulate(&mut adjoint, s, ds)?;
                    }
                    if wants(self, m) {
                        let dm = self.scale_by(s, d)?;
                        self.accumulate(&mut adjoint, m, dm)?;
                    }
                }
            }
        }

        wrt.iter()
            .map(|&w| match adjoint.get(w).copied().flatten() {
                Some(g) => {
                    if create_graph {
                        Ok(g)
                    } else {
                        let v = self.nodes[g].value.clone();
                        self.constant(v)
                    }
                }
                None => {
                    let shape = self.nodes[w].value.shape();
                    self.constant(Dense::zeros(shape.0, shape.1))
                }
            })
            .collect()
    }

    fn accumulate(
        &mut self,
        adjoint: &mut [Option<NodeId>],
        target: NodeId,
        contribution: NodeId,
    ) -> Result<()> {
        adjoint[target] = Some(match adjoint[target] {
            Some(existing) => self.add(existing, contribution)?,
            None => contribution,
        });
        Ok(())
    }

    fn ones_const(&mut self, rows: usize, cols: usize) -> Result<NodeId> {
        if let Some(&id) = self.ones_memo.get(&(rows, cols)) {
            return Ok(id);
        }
        let id = self.constant(Dense::ones(rows, cols))?;
        self.ones_memo.insert((rows, cols), id);
        Ok(id)
    }
}

/// Row-wise log-softmax with row-max subtraction.
fn log_softmax(x: &Dense) -> Dense {
    let mut out = Dense::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let row = x.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        for (c, &v) in row.iter().enumerate() {
            out.set(r, c, v - max - log_sum);
        }
    }
    out
}

/// Max relative error between the tape gradient and a central-difference
/// probe of `build`, which must deterministically record a scalar loss from
/// the given parameter matrices.
///
/// The relative error denominator is `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_difference_check<F>(build: F, weights: &[Dense], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    assert!(eps > 0.0, "eps must be positive");
    let analytic: Vec<Dense> = {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = weights
            .iter()
            .map(|w| tape.parameter(w.clone()))
            .collect::<Result<_>>()?;
        let loss = build(&mut tape, &ids)?;
        let grads = tape.gradient(loss, &ids, false)?;
        grads.into_iter().map(|g| tape.value(g).clone()).collect()
    };

    let eval = |ws: &[Dense]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = ws
            .iter()
            .map(|w| tape.parameter(w.clone()))
            .collect::<Result<_>>()?;
        let loss = build(&mut tape, &ids)?;
        Ok(tape.value(loss).scalar_value())
    };

    let mut max_rel = 0.0f64;
    for wi in 0..weights.len() {
        for idx in 0..weights[wi].numel() {
            let mut plus = weights.to_vec();
            plus[wi].data_mut()[idx] += eps;
            let mut minus = weights.to_vec();
            minus[wi].data_mut()[idx] -= eps;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
            let a = analytic[wi].data()[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}
