//! Append-only reverse-mode tape over matrix-valued nodes.
//!
//! Every operation evaluates eagerly and records its inputs; nodes are only
//! ever appended, so a node's inputs always precede it. [`Tape::backward`]
//! sweeps the records once in reverse and returns one adjoint per node.

use std::f64::consts::{LN_2, PI};

use super::matrix::{gemm, Matrix};
use crate::consensus::{precision_weights, precision_weights_adjoint};
use crate::error::{arg_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    Offset(NodeId),
    Relu(NodeId),
    Softplus(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    Recip(NodeId),
    Sum(NodeId),
    RowSum(NodeId),
    BlockMean { input: NodeId, blocks: usize },
    Transpose(NodeId),
    ColSlice { input: NodeId, start: usize },
    ConcatRows(Vec<NodeId>),
    LogSoftmax(NodeId),
    GaussianLogDensity { mean: NodeId, target: Matrix },
    LaplaceLogDensity { mean: NodeId, target: Matrix },
    CategoricalLogDensity { logits: NodeId, target: Vec<usize> },
    ConsensusWeights { stds: Vec<NodeId>, rho: f64 },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Relu(..) => "relu",
            Op::Softplus(..) => "softplus",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Square(..) => "square",
            Op::Sqrt(..) => "sqrt",
            Op::Recip(..) => "recip",
            Op::Sum(..) => "sum",
            Op::RowSum(..) => "row_sum",
            Op::BlockMean { .. } => "block_mean",
            Op::Transpose(..) => "transpose",
            Op::ColSlice { .. } => "col_slice",
            Op::ConcatRows(..) => "concat_rows",
            Op::LogSoftmax(..) => "log_softmax",
            Op::GaussianLogDensity { .. } => "gaussian_log_density",
            Op::LaplaceLogDensity { .. } => "laplace_log_density",
            Op::CategoricalLogDensity { .. } => "categorical_log_density",
            Op::ConsensusWeights { .. } => "consensus_weights",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Matrix,
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    adjoints: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Adjoint of `id`, or `None` when the output does not depend on it.
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.adjoints.get(id.0).and_then(Option::as_ref)
    }

    /// Adjoint of `id`, zero-filled to `shape` when absent.
    pub fn get_or_zeros(&self, id: NodeId, shape: (usize, usize)) -> Matrix {
        self.get(id).cloned().unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
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

    /// Names of the recorded operations, in order.
    pub fn op_kinds(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.kind()).collect()
    }

    fn push(&mut self, op: Op, value: Matrix) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf node: a parameter or an input.
    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Leaf, value)
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return arg_err(format!("{what}: shapes {:?} and {:?} differ", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Matrix {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.as_slice().iter().zip(y.as_slice()).map(|(p, q)| f(*p, *q)).collect();
        Matrix::from_vec(x.rows(), x.cols(), data).expect("same shape")
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    /// `a + bias` with a `1 x cols` bias broadcast over the rows of `a`.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (x, b) = (self.value(a), self.value(bias));
        if b.rows() != 1 || b.cols() != x.cols() {
            return arg_err(format!("bias of shape {:?} does not fit {:?}", b.shape(), x.shape()));
        }
        let mut value = x.clone();
        for r in 0..value.rows() {
            for (v, bb) in value.row_mut(r).iter_mut().zip(b.as_slice()) {
                *v += bb;
            }
        }
        Ok(self.push(Op::AddBias(a, bias), value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let value = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        let value = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), value))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let value = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), value))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "div")?;
        let value = self.zip_map(a, b, |x, y| x / y);
        Ok(self.push(Op::Div(a, b), value))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let value = self.value(a).map(|x| x * factor);
        self.push(Op::Scale(a, factor), value)
    }

    /// `a + constant`, elementwise.
    pub fn offset(&mut self, a: NodeId, constant: f64) -> NodeId {
        let value = self.value(a).map(|x| x + constant);
        self.push(Op::Offset(a), value)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), value)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(softplus);
        self.push(Op::Softplus(a), value)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), value)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::ln);
        self.push(Op::Ln(a), value)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|x| x * x);
        self.push(Op::Square(a), value)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::sqrt);
        self.push(Op::Sqrt(a), value)
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|x| 1.0 / x);
        self.push(Op::Recip(a), value)
    }

    /// Sum of all entries, as a `1 x 1` node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = Matrix::scalar(self.value(a).as_slice().iter().sum());
        self.push(Op::Sum(a), value)
    }

    /// Per-row sums, as a `rows x 1` node.
    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let data = (0..x.rows()).map(|r| x.row(r).iter().sum()).collect();
        let value = Matrix::from_vec(x.rows(), 1, data).expect("shape");
        self.push(Op::RowSum(a), value)
    }

    /// Splits the rows into `blocks` equal consecutive blocks and averages
    /// each, giving a `blocks x cols` node.
    pub fn block_mean(&mut self, a: NodeId, blocks: usize) -> Result<NodeId> {
        let x = self.value(a);
        if blocks == 0 || !x.rows().is_multiple_of(blocks) || x.rows() == 0 {
            return arg_err(format!("{} rows do not split into {blocks} blocks", x.rows()));
        }
        let per = x.rows() / blocks;
        let mut value = Matrix::zeros(blocks, x.cols());
        for r in 0..x.rows() {
            let k = r / per;
            for c in 0..x.cols() {
                let v = value.get(k, c) + x.get(r, c) / per as f64;
                value.set(k, c, v);
            }
        }
        Ok(self.push(Op::BlockMean { input: a, blocks }, value))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).transpose();
        self.push(Op::Transpose(a), value)
    }

    /// Columns `start..start + len` of `a`.
    pub fn col_slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let x = self.value(a);
        if start + len > x.cols() || len == 0 {
            return arg_err(format!("column slice {start}..{} out of {} columns", start + len, x.cols()));
        }
        let mut value = Matrix::zeros(x.rows(), len);
        for r in 0..x.rows() {
            value.row_mut(r).copy_from_slice(&x.row(r)[start..start + len]);
        }
        Ok(self.push(Op::ColSlice { input: a, start }, value))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some(first) = parts.first() else {
            return arg_err("concat_rows needs at least one input");
        };
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = self.value(*p);
            if v.cols() != cols {
                return arg_err(format!("concat_rows: {} columns vs {cols}", v.cols()));
            }
            rows += v.rows();
            data.extend_from_slice(v.as_slice());
        }
        let value = Matrix::from_vec(rows, cols, data)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), value))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let value = log_softmax_rows(self.value(a));
        self.push(Op::LogSoftmax(a), value)
    }

    /// Row-wise softmax, recorded as `exp(log_softmax(a))`.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let ls = self.log_softmax(a);
        self.exp(ls)
    }

    /// Per-row log density of `target` under unit-variance Gaussians centred
    /// at `mean`; a `rows x 1` node.
    pub fn gaussian_log_density(&mut self, mean: NodeId, target: &Matrix) -> Result<NodeId> {
        self.check_target(mean, target)?;
        let half_ln_2pi = 0.5 * (2.0 * PI).ln();
        let m = self.value(mean);
        let data = (0..m.rows())
            .map(|r| m.row(r).iter().zip(target.row(r)).map(|(mu, x)| -0.5 * (x - mu) * (x - mu) - half_ln_2pi).sum())
            .collect();
        let value = Matrix::from_vec(m.rows(), 1, data)?;
        Ok(self.push(Op::GaussianLogDensity { mean, target: target.clone() }, value))
    }

    /// Per-row log density of `target` under unit-scale Laplace distributions
    /// centred at `mean`; a `rows x 1` node.
    pub fn laplace_log_density(&mut self, mean: NodeId, target: &Matrix) -> Result<NodeId> {
        self.check_target(mean, target)?;
        let m = self.value(mean);
        let data = (0..m.rows())
            .map(|r| m.row(r).iter().zip(target.row(r)).map(|(mu, x)| -(x - mu).abs() - LN_2).sum())
            .collect();
        let value = Matrix::from_vec(m.rows(), 1, data)?;
        Ok(self.push(Op::LaplaceLogDensity { mean, target: target.clone() }, value))
    }

    /// Per-row log probability of class `target[r]` under `softmax(logits[r])`.
    pub fn categorical_log_density(&mut self, logits: NodeId, target: &[usize]) -> Result<NodeId> {
        let x = self.value(logits);
        if target.len() != x.rows() {
            return arg_err(format!("{} targets for {} rows of logits", target.len(), x.rows()));
        }
        if let Some(t) = target.iter().find(|t| **t >= x.cols()) {
            return arg_err(format!("class {t} out of range for {} logits", x.cols()));
        }
        let ls = log_softmax_rows(x);
        let data = target.iter().enumerate().map(|(r, t)| ls.get(r, *t)).collect();
        let value = Matrix::from_vec(x.rows(), 1, data)?;
        Ok(self.push(Op::CategoricalLogDensity { logits, target: target.to_vec() }, value))
    }

    fn check_target(&self, mean: NodeId, target: &Matrix) -> Result<()> {
        if self.shape(mean) != target.shape() {
            return arg_err(format!(
                "decoded shape {:?} does not match observed {:?}",
                self.shape(mean),
                target.shape()
            ));
        }
        Ok(())
    }

    /// Consensus weights for `M′` experts given their std nodes (each
    /// `rows x D`). The result is `rows x (M′·D)`; block `i` holds the column
    /// sums of `(Σ^d)⁻¹` belonging to expert `i`, elementwise over rows and
    /// latent dimensions.
    pub fn consensus_weights(&mut self, stds: &[NodeId], rho: f64) -> Result<NodeId> {
        let Some(first) = stds.first() else {
            return arg_err("consensus needs at least one expert");
        };
        let (rows, dim) = self.shape(*first);
        for s in stds {
            if self.shape(*s) != (rows, dim) {
                return arg_err("expert std nodes differ in shape");
            }
        }
        let n = stds.len();
        let mut value = Matrix::zeros(rows, n * dim);
        let mut local = vec![0.0; n];
        for r in 0..rows {
            for d in 0..dim {
                for (i, s) in stds.iter().enumerate() {
                    local[i] = self.value(*s).get(r, d);
                }
                let c = precision_weights(&local, rho).ok_or(Error::NotPositiveDefinite { dim: d })?;
                for (i, ci) in c.iter().enumerate() {
                    value.set(r, i * dim + d, *ci);
                }
            }
        }
        Ok(self.push(Op::ConsensusWeights { stds: stds.to_vec(), rho }, value))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        if self.shape(output) != (1, 1) {
            return arg_err(format!("backward needs a scalar output, got {:?}", self.shape(output)));
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; output.0 + 1];
        adj[output.0] = Some(Matrix::scalar(1.0));

        fn acc(adj: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
            match &mut adj[id.0] {
                Some(a) => a.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            let y = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    // dA = G Bᵀ, dB = Aᵀ G
                    let mut da = Matrix::zeros(m, k);
                    gemm(m, n, k, g.as_slice(), (n, 1), bv.as_slice(), (1, n), da.as_mut_slice(), false);
                    let mut db = Matrix::zeros(k, n);
                    gemm(k, m, n, av.as_slice(), (1, k), g.as_slice(), (n, 1), db.as_mut_slice(), false);
                    acc(&mut adj, *a, da);
                    acc(&mut adj, *b, db);
                }
                Op::AddBias(a, bias) => {
                    let mut db = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (s, v) in db.as_mut_slice().iter_mut().zip(g.row(r)) {
                            *s += v;
                        }
                    }
                    acc(&mut adj, *bias, db);
                    acc(&mut adj, *a, g.clone());
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *b, g.clone());
                    acc(&mut adj, *a, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, *b, g.map(|v| -v));
                    acc(&mut adj, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    let ga = elementwise(&g, self.value(*b), |g, y| g * y);
                    let gb = elementwise(&g, self.value(*a), |g, x| g * x);
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b);
                    let ga = elementwise(&g, bv, |g, d| g / d);
                    // d(a/b)/db = -y/b
                    let gy = elementwise(&g, y, |g, y| g * y);
                    let gb = elementwise(&gy, bv, |gy, d| -gy / d);
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::Scale(a, f) => acc(&mut adj, *a, g.map(|v| v * f)),
                Op::Offset(a) => acc(&mut adj, *a, g.clone()),
                Op::Relu(a) => {
                    let ga = elementwise(&g, self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 });
                    acc(&mut adj, *a, ga);
                }
                Op::Softplus(a) => {
                    let ga = elementwise(&g, self.value(*a), |g, x| g * sigmoid(x));
                    acc(&mut adj, *a, ga);
                }
                Op::Exp(a) => acc(&mut adj, *a, elementwise(&g, y, |g, y| g * y)),
                Op::Ln(a) => acc(&mut adj, *a, elementwise(&g, self.value(*a), |g, x| g / x)),
                Op::Square(a) => acc(&mut adj, *a, elementwise(&g, self.value(*a), |g, x| 2.0 * g * x)),
                Op::Sqrt(a) => acc(&mut adj, *a, elementwise(&g, y, |g, y| 0.5 * g / y)),
                Op::Recip(a) => acc(&mut adj, *a, elementwise(&g, y, |g, y| -g * y * y)),
                Op::Sum(a) => {
                    let (r, c) = self.shape(*a);
                    acc(&mut adj, *a, Matrix::filled(r, c, g.get(0, 0)));
                }
                Op::RowSum(a) => {
                    let (r, c) = self.shape(*a);
                    let mut ga = Matrix::zeros(r, c);
                    for i in 0..r {
                        ga.row_mut(i).fill(g.get(i, 0));
                    }
                    acc(&mut adj, *a, ga);
                }
                Op::BlockMean { input, blocks } => {
                    let (r, c) = self.shape(*input);
                    let per = r / blocks;
                    let mut ga = Matrix::zeros(r, c);
                    for i in 0..r {
                        let k = i / per;
                        for j in 0..c {
                            ga.set(i, j, g.get(k, j) / per as f64);
                        }
                    }
                    acc(&mut adj, *input, ga);
                }
                Op::Transpose(a) => acc(&mut adj, *a, g.transpose()),
                Op::ColSlice { input, start } => {
                    let (r, c) = self.shape(*input);
                    let mut ga = Matrix::zeros(r, c);
                    for i in 0..r {
                        ga.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                    }
                    acc(&mut adj, *input, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let rows = self.value(*p).rows();
                        acc(&mut adj, *p, g.slice_rows(offset, rows));
                        offset += rows;
                    }
                }
                Op::LogSoftmax(a) => {
                    let mut ga = g.clone();
                    for r in 0..g.rows() {
                        let total: f64 = g.row(r).iter().sum();
                        for (c, v) in ga.row_mut(r).iter_mut().enumerate() {
                            *v -= y.get(r, c).exp() * total;
                        }
                    }
                    acc(&mut adj, *a, ga);
                }
                Op::GaussianLogDensity { mean, target } => {
                    let m = self.value(*mean);
                    let mut gm = Matrix::zeros(m.rows(), m.cols());
                    for r in 0..m.rows() {
                        let gr = g.get(r, 0);
                        for c in 0..m.cols() {
                            gm.set(r, c, gr * (target.get(r, c) - m.get(r, c)));
                        }
                    }
                    acc(&mut adj, *mean, gm);
                }
                Op::LaplaceLogDensity { mean, target } => {
                    let m = self.value(*mean);
                    let mut gm = Matrix::zeros(m.rows(), m.cols());
                    for r in 0..m.rows() {
                        let gr = g.get(r, 0);
                        for c in 0..m.cols() {
                            let diff = target.get(r, c) - m.get(r, c);
                            // subgradient 0 at the kink
                            let s = if diff > 0.0 {
                                1.0
                            } else if diff < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                            gm.set(r, c, gr * s);
                        }
                    }
                    acc(&mut adj, *mean, gm);
                }
                Op::CategoricalLogDensity { logits, target } => {
                    let ls = log_softmax_rows(self.value(*logits));
                    let mut gl = Matrix::zeros(ls.rows(), ls.cols());
                    for (r, t) in target.iter().enumerate() {
                        let gr = g.get(r, 0);
                        for c in 0..ls.cols() {
                            let onehot = if c == *t { 1.0 } else { 0.0 };
                            gl.set(r, c, gr * (onehot - ls.get(r, c).exp()));
                        }
                    }
                    acc(&mut adj, *logits, gl);
                }
                Op::ConsensusWeights { stds, rho } => {
                    let n = stds.len();
                    let (rows, dim) = self.shape(stds[0]);
                    let mut grads: Vec<Matrix> = (0..n).map(|_| Matrix::zeros(rows, dim)).collect();
                    let (mut s, mut c, mut up, mut gs) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
                    for r in 0..rows {
                        for d in 0..dim {
                            for i in 0..n {
                                s[i] = self.value(stds[i]).get(r, d);
                                c[i] = y.get(r, i * dim + d);
                                up[i] = g.get(r, i * dim + d);
                                gs[i] = 0.0;
                            }
                            precision_weights_adjoint(&s, *rho, &c, &up, &mut gs);
                            for i in 0..n {
                                grads[i].set(r, d, gs[i]);
                            }
                        }
                    }
                    for (id, gm) in stds.iter().zip(grads) {
                        acc(&mut adj, *id, gm);
                    }
                }
            }
            adj[idx] = Some(g);
        }
        adj.resize(self.nodes.len(), None);
        Ok(Gradients { adjoints: adj })
    }
}

fn elementwise(g: &Matrix, x: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = g.as_slice().iter().zip(x.as_slice()).map(|(a, b)| f(*a, *b)).collect();
    Matrix::from_vec(g.rows(), g.cols(), data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::scalar(3.0));
        let y = t.square(x);
        let g = t.backward(y).unwrap();
        assert_eq!(t.value(y).get(0, 0), 9.0);
        assert_eq!(g.get(x).unwrap().get(0, 0), 6.0);
        assert_eq!(g.get(y).unwrap().get(0, 0), 1.0);
    }

    #[test]
    fn product_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::scalar(2.0));
        let y = t.leaf(Matrix::scalar(5.0));
        let p = t.mul(x, y).unwrap();
        let g = t.backward(p).unwrap();
        assert_eq!(g.get(x).unwrap().get(0, 0), 5.0);
        assert_eq!(g.get(y).unwrap().get(0, 0), 2.0);
    }

    #[test]
    fn non_scalar_output_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::zeros(2, 1));
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn unused_leaf_has_no_adjoint() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::scalar(1.0));
        let y = t.leaf(Matrix::scalar(2.0));
        let s = t.square(x);
        let g = t.backward(s).unwrap();
        assert!(g.get(y).is_none());
        assert_eq!(g.get_or_zeros(y, (1, 1)).get(0, 0), 0.0);
    }

    #[test]
    fn shape_errors() {
        let mut t = Tape::new();
        let a = t.leaf(Matrix::zeros(2, 3));
        let b = t.leaf(Matrix::zeros(2, 2));
        assert!(t.add(a, b).is_err());
        assert!(t.matmul(a, b).is_err());
        assert!(t.col_slice(a, 2, 2).is_err());
        assert!(t.block_mean(a, 3).is_err());
        assert!(t.gaussian_log_density(a, &Matrix::zeros(3, 2)).is_err());
        assert!(t.categorical_log_density(a, &[0, 5]).is_err());
    }

    #[test]
    fn log_density_values() {
        let mut t = Tape::new();
        let m = t.leaf(Matrix::scalar(1.5));
        let gl = t.gaussian_log_density(m, &Matrix::scalar(1.5)).unwrap();
        assert!((t.value(gl).get(0, 0) + 0.918_938_533_204_672_7).abs() < 1e-12);
        let m0 = t.leaf(Matrix::scalar(0.0));
        let ll = t.laplace_log_density(m0, &Matrix::scalar(1.0)).unwrap();
        assert!((t.value(ll).get(0, 0) - (-LN_2 - 1.0)).abs() < 1e-12);
        let logits = t.leaf(Matrix::zeros(1, 4));
        let cl = t.categorical_log_density(logits, &[2]).unwrap();
        assert!((t.value(cl).get(0, 0) + 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
        assert!((softplus(0.0) - LN_2).abs() < 1e-15);
    }
}
