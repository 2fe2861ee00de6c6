//! Minimal reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Graph`] is an eager tape: every op computes its value immediately and
//! records parents for the backward sweep. Graphs are single-threaded and
//! built fresh per training step; model parameters enter as trainable leaves
//! and collect gradients after [`Graph::backward`]. The op set is exactly
//! what the network needs — no general broadcasting engine.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{arr0, Array1, Array2, ArrayD, Axis, Ix1, Ix2, IxDyn};

use crate::error::{Error, Result};

/// Which binarization a [`ste node`](Var::ste_binarize) applies in the forward
/// pass; the backward pass is the straight-through clip either way.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BinarizeMode {
    /// ±1 via sign (x ≥ 0 → +1)
    Signed,
    /// {1,0} via threshold (x ≥ t → 1); inputs must be non-negative
    NonNeg { threshold: f64 },
}

enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddScalar(usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    Linear { x: usize, w: usize, b: Option<usize> },
    Relu(usize),
    Softmax(usize),
    LogSoftmax(usize),
    BatchNormTrain { x: usize, gamma: usize, beta: usize, xhat: Array2<f64>, inv_std: Array1<f64> },
    BatchNormEval { x: usize, gamma: usize, beta: usize, xhat: Array2<f64>, inv_std: Array1<f64> },
    MaxAxis { x: usize, axis: usize, argmax: Vec<usize> },
    MeanAxis { x: usize, axis: usize },
    SumAll(usize),
    Concat { xs: Vec<usize>, axis: usize },
    Transpose2(usize),
    SteBinarize { x: usize },
    CenterRows(usize),
    RowAbsMean(usize),
    AbsMeanAll(usize),
    MulFeatureScale { x: usize, v: usize },
    MulScalarNode { x: usize, s: usize },
    L1NormalizeAxis { x: usize, axis: usize, sums: ArrayD<f64> },
    OuterSub { a: usize, b: usize },
    L2NormalizeVec { x: usize, norm: f64 },
    GatherRows { x: usize, indices: Vec<usize> },
    Reshape { x: usize, parent_shape: Vec<usize> },
}

struct Node {
    value: ArrayD<f64>,
    grad: Option<ArrayD<f64>>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
struct GraphInner {
    nodes: Vec<Node>,
}

/// An eager reverse-mode tape.
#[derive(Clone, Default)]
pub struct Graph {
    inner: Rc<RefCell<GraphInner>>,
}

/// Handle to a tensor recorded on a [`Graph`].
#[derive(Clone)]
pub struct Var {
    graph: Graph,
    idx: usize,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable leaf: collects a gradient during backward.
    pub fn leaf(&self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable input: backward does not propagate into it.
    pub fn constant(&self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn scalar(&self, v: f64) -> Var {
        self.constant(arr0(v).into_dyn())
    }

    fn push(&self, value: ArrayD<f64>, op: Op, requires_grad: bool) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { value, grad: None, op, requires_grad });
        Var { graph: self.clone(), idx: inner.nodes.len() - 1 }
    }

    fn requires(&self, idx: usize) -> bool {
        self.inner.borrow().nodes[idx].requires_grad
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        let views: Vec<ArrayD<f64>> = xs.iter().map(|v| v.value()).collect();
        let view_refs: Vec<_> = views.iter().map(|v| v.view()).collect();
        let value = ndarray::concatenate(Axis(axis), &view_refs)
            .map_err(|e| Error::DimMismatch(format!("concat: {e}")))?;
        let requires = xs.iter().any(|v| self.requires(v.idx));
        Ok(self.push(value, Op::Concat { xs: xs.iter().map(|v| v.idx).collect(), axis }, requires))
    }

    /// Reverse sweep from a scalar loss; gradients accumulate additively at
    /// fan-out points and land on every reachable node with `requires_grad`.
    pub fn backward(&self, loss: &Var) -> Result<()> {
        {
            let inner = self.inner.borrow();
            let node = &inner.nodes[loss.idx];
            if node.value.ndim() != 0 {
                return Err(Error::Contract(format!(
                    "backward requires a scalar loss, got shape {:?}",
                    node.value.shape()
                )));
            }
        }
        let mut inner = self.inner.borrow_mut();
        inner.nodes[loss.idx].grad = Some(arr0(1.0).into_dyn());
        for idx in (0..=loss.idx).rev() {
            if inner.nodes[idx].grad.is_none() || !inner.nodes[idx].requires_grad {
                continue;
            }
            let g = inner.nodes[idx].grad.clone().expect("checked above");
            let contribs = backward_op(&inner, idx, &g);
            for (p, c) in contribs {
                if !inner.nodes[p].requires_grad {
                    continue;
                }
                match &mut inner.nodes[p].grad {
                    Some(acc) => *acc += &c,
                    slot @ None => *slot = Some(c),
                }
            }
        }
        Ok(())
    }
}

impl Var {
    pub fn value(&self) -> ArrayD<f64> {
        self.graph.inner.borrow().nodes[self.idx].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.inner.borrow().nodes[self.idx].value.shape().to_vec()
    }

    /// Scalar value of a rank-0 tensor.
    pub fn scalar_value(&self) -> f64 {
        let inner = self.graph.inner.borrow();
        let v = &inner.nodes[self.idx].value;
        assert_eq!(v.ndim(), 0, "scalar_value on non-scalar");
        v[IxDyn(&[])]
    }

    /// Gradient collected by the last backward pass, if any.
    pub fn grad(&self) -> Option<ArrayD<f64>> {
        self.graph.inner.borrow().nodes[self.idx].grad.clone()
    }

    fn unary(&self, value: ArrayD<f64>, op: Op) -> Var {
        self.graph.push(value, op, self.graph.requires(self.idx))
    }

    fn binary(&self, other: &Var, value: ArrayD<f64>, op: Op) -> Var {
        let req = self.graph.requires(self.idx) || self.graph.requires(other.idx);
        self.graph.push(value, op, req)
    }

    fn same_shape(&self, other: &Var, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::DimMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.same_shape(other, "add")?;
        let v = self.value() + &other.value();
        Ok(self.binary(other, v, Op::Add(self.idx, other.idx)))
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.same_shape(other, "sub")?;
        let v = self.value() - &other.value();
        Ok(self.binary(other, v, Op::Sub(self.idx, other.idx)))
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.same_shape(other, "mul")?;
        let v = self.value() * &other.value();
        Ok(self.binary(other, v, Op::Mul(self.idx, other.idx)))
    }

    pub fn square(&self) -> Result<Var> {
        self.mul(self)
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        let v = self.value() + c;
        self.unary(v, Op::AddScalar(self.idx))
    }

    pub fn scale(&self, c: f64) -> Var {
        let v = self.value() * c;
        self.unary(v, Op::Scale(self.idx, c))
    }

    /// Rank-2 matrix product.
    pub fn matmul(&self, other: &Var) -> Result<Var> {
        let a = to2(&self.value(), "matmul lhs")?;
        let b = to2(&other.value(), "matmul rhs")?;
        if a.ncols() != b.nrows() {
            return Err(Error::DimMismatch(format!(
                "matmul {}×{} by {}×{}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols()
            )));
        }
        let v = a.dot(&b).into_dyn();
        Ok(self.binary(other, v, Op::MatMul(self.idx, other.idx)))
    }

    /// `y = x · wᵀ (+ b)` with `x: [n × in]`, `w: [out × in]`.
    pub fn linear(&self, w: &Var, b: Option<&Var>) -> Result<Var> {
        let x = to2(&self.value(), "linear input")?;
        let wv = to2(&w.value(), "linear weight")?;
        if x.ncols() != wv.ncols() {
            return Err(Error::DimMismatch(format!(
                "linear input width {} vs weight input width {}",
                x.ncols(),
                wv.ncols()
            )));
        }
        let mut y = x.dot(&wv.t());
        if let Some(bias) = b {
            let bv = bias.value().into_dimensionality::<Ix1>().map_err(|_| {
                Error::DimMismatch("linear bias must be rank 1".into())
            })?;
            if bv.len() != y.ncols() {
                return Err(Error::DimMismatch("bias length vs output width".into()));
            }
            y += &bv;
        }
        let req = self.graph.requires(self.idx)
            || self.graph.requires(w.idx)
            || b.map(|b| self.graph.requires(b.idx)).unwrap_or(false);
        Ok(self.graph.push(
            y.into_dyn(),
            Op::Linear { x: self.idx, w: w.idx, b: b.map(|b| b.idx) },
            req,
        ))
    }

    pub fn relu(&self) -> Var {
        let v = self.value().mapv(|v| v.max(0.0));
        self.unary(v, Op::Relu(self.idx))
    }

    /// Numerically-stable softmax over the last axis.
    pub fn softmax(&self) -> Result<Var> {
        let mut v = self.value();
        if v.ndim() == 0 || v.shape()[v.ndim() - 1] == 0 {
            return Err(Error::Contract("softmax over empty axis".into()));
        }
        softmax_lanes(&mut v);
        Ok(self.unary(v, Op::Softmax(self.idx)))
    }

    /// Log-softmax over the last axis (for cross-entropy losses).
    pub fn log_softmax(&self) -> Result<Var> {
        let mut v = self.value();
        if v.ndim() == 0 || v.shape()[v.ndim() - 1] == 0 {
            return Err(Error::Contract("log_softmax over empty axis".into()));
        }
        let last = Axis(v.ndim() - 1);
        for mut lane in v.lanes_mut(last) {
            let m = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + lane.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            lane.mapv_inplace(|x| x - lse);
        }
        Ok(self.unary(v, Op::LogSoftmax(self.idx)))
    }

    /// Max-reduce along `axis` (the axis is removed). Ties route the gradient
    /// to the lowest index.
    pub fn max_axis(&self, axis: usize) -> Result<Var> {
        let v = self.value();
        if axis >= v.ndim() || v.shape()[axis] == 0 {
            return Err(Error::Contract(format!("max over invalid axis {axis}")));
        }
        let mut out = Vec::new();
        let mut argmax = Vec::new();
        for lane in v.lanes(Axis(axis)) {
            let mut best = 0usize;
            for (i, &x) in lane.iter().enumerate() {
                if x > lane[best] {
                    best = i;
                }
            }
            argmax.push(best);
            out.push(lane[best]);
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        let value = ArrayD::from_shape_vec(IxDyn(&shape), out).expect("reduced shape");
        Ok(self.unary(value, Op::MaxAxis { x: self.idx, axis, argmax }))
    }

    /// Mean-reduce along `axis` (the axis is removed).
    pub fn mean_axis(&self, axis: usize) -> Result<Var> {
        let v = self.value();
        if axis >= v.ndim() || v.shape()[axis] == 0 {
            return Err(Error::Contract(format!("mean over invalid axis {axis}")));
        }
        let value = v.mean_axis(Axis(axis)).expect("non-empty axis");
        Ok(self.unary(value, Op::MeanAxis { x: self.idx, axis }))
    }

    pub fn sum_all(&self) -> Var {
        let v = arr0(self.value().sum()).into_dyn();
        self.unary(v, Op::SumAll(self.idx))
    }

    pub fn transpose2(&self) -> Result<Var> {
        let v = to2(&self.value(), "transpose")?;
        Ok(self.unary(v.t().to_owned().into_dyn(), Op::Transpose2(self.idx)))
    }

    /// Binarize in the forward pass; straight-through clip (`|x| ≤ 1`) in the
    /// backward pass.
    pub fn ste_binarize(&self, mode: BinarizeMode) -> Result<Var> {
        let v = self.value();
        let value = match mode {
            BinarizeMode::Signed => v.mapv(|x| if x >= 0.0 { 1.0 } else { -1.0 }),
            BinarizeMode::NonNeg { threshold } => {
                debug_assert!(
                    v.iter().all(|&x| x >= 0.0),
                    "non-negative binarization on signed input"
                );
                v.mapv(|x| if x >= threshold { 1.0 } else { 0.0 })
            }
        };
        Ok(self.unary(value, Op::SteBinarize { x: self.idx }))
    }

    /// Binarize a rank-2 tensor with one threshold per row ({1,0} output);
    /// backward is the straight-through clip. Used by the configurable
    /// attention-threshold extension.
    pub fn ste_binarize_row_thresholds(&self, thresholds: &[f64]) -> Result<Var> {
        let v = to2(&self.value(), "ste_binarize_row_thresholds")?;
        if thresholds.len() != v.nrows() {
            return Err(Error::DimMismatch("one threshold per row required".into()));
        }
        let out = Array2::from_shape_fn(v.raw_dim(), |(i, j)| {
            if v[(i, j)] >= thresholds[i] {
                1.0
            } else {
                0.0
            }
        });
        Ok(self.unary(out.into_dyn(), Op::SteBinarize { x: self.idx }))
    }

    /// Subtract each row's mean (rank-2).
    pub fn center_rows(&self) -> Result<Var> {
        let v = to2(&self.value(), "center_rows")?;
        let means = v.mean_axis(Axis(1)).expect("has columns");
        let mut out = v.clone();
        for (mut row, &m) in out.rows_mut().into_iter().zip(means.iter()) {
            row.mapv_inplace(|x| x - m);
        }
        Ok(self.unary(out.into_dyn(), Op::CenterRows(self.idx)))
    }

    /// Per-row mean absolute value (rank-2 → rank-1): the α scale vector.
    pub fn row_abs_mean(&self) -> Result<Var> {
        let v = to2(&self.value(), "row_abs_mean")?;
        let n = v.ncols() as f64;
        let out: Array1<f64> =
            v.rows().into_iter().map(|r| r.iter().map(|x| x.abs()).sum::<f64>() / n).collect();
        Ok(self.unary(out.into_dyn(), Op::RowAbsMean(self.idx)))
    }

    /// Mean absolute value of the whole tensor (rank-0): the β scale.
    pub fn abs_mean_all(&self) -> Var {
        let v = self.value();
        let n = v.len() as f64;
        let m = if n == 0.0 { 0.0 } else { v.iter().map(|x| x.abs()).sum::<f64>() / n };
        self.unary(arr0(m).into_dyn(), Op::AbsMeanAll(self.idx))
    }

    /// Multiply by a rank-1 vector broadcast along the last axis.
    pub fn mul_feature_scale(&self, v: &Var) -> Result<Var> {
        let x = self.value();
        let s = v.value().into_dimensionality::<Ix1>().map_err(|_| {
            Error::DimMismatch("feature scale must be rank 1".into())
        })?;
        let last = x.ndim() - 1;
        if x.shape()[last] != s.len() {
            return Err(Error::DimMismatch("feature scale length vs last axis".into()));
        }
        let mut out = x.clone();
        for mut lane in out.lanes_mut(Axis(last)) {
            for (o, &f) in lane.iter_mut().zip(s.iter()) {
                *o *= f;
            }
        }
        Ok(self.binary(v, out, Op::MulFeatureScale { x: self.idx, v: v.idx }))
    }

    /// Multiply by a rank-0 scalar node.
    pub fn mul_scalar_node(&self, s: &Var) -> Result<Var> {
        if s.shape() != Vec::<usize>::new() {
            return Err(Error::DimMismatch("scalar factor must be rank 0".into()));
        }
        let out = self.value() * s.scalar_value();
        Ok(self.binary(s, out, Op::MulScalarNode { x: self.idx, s: s.idx }))
    }

    /// Divide by the sum over `axis` (entries assumed non-negative; a small
    /// epsilon guards empty columns).
    pub fn l1_normalize_axis(&self, axis: usize, eps: f64) -> Result<Var> {
        let x = self.value();
        if axis >= x.ndim() {
            return Err(Error::Contract(format!("l1_normalize over invalid axis {axis}")));
        }
        let sums = x.sum_axis(Axis(axis)).mapv(|s| s + eps).insert_axis(Axis(axis));
        let out = &x / &sums.broadcast(x.raw_dim()).expect("sum broadcast");
        Ok(self.unary(out, Op::L1NormalizeAxis { x: self.idx, axis, sums: sums.into_dyn() }))
    }

    /// `H[i][j] = a[i] − b[j]` from two rank-1 tensors.
    pub fn outer_sub(&self, other: &Var) -> Result<Var> {
        let a = self.value().into_dimensionality::<Ix1>().map_err(|_| {
            Error::DimMismatch("outer_sub lhs must be rank 1".into())
        })?;
        let b = other.value().into_dimensionality::<Ix1>().map_err(|_| {
            Error::DimMismatch("outer_sub rhs must be rank 1".into())
        })?;
        let out = Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] - b[j]);
        Ok(self.binary(other, out.into_dyn(), Op::OuterSub { a: self.idx, b: other.idx }))
    }

    /// L2-normalize a rank-1 tensor (guarded against the zero vector).
    pub fn l2_normalize(&self) -> Result<Var> {
        let x = self.value().into_dimensionality::<Ix1>().map_err(|_| {
            Error::DimMismatch("l2_normalize expects rank 1".into())
        })?;
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        let out = x.mapv(|v| v / norm);
        Ok(self.unary(out.into_dyn(), Op::L2NormalizeVec { x: self.idx, norm }))
    }

    /// Gather rows of a rank-2 tensor; `indices` is flattened row-major over
    /// `prefix_shape`, output shape is `prefix_shape + [cols]`.
    pub fn gather_rows(&self, indices: &[usize], prefix_shape: &[usize]) -> Result<Var> {
        let x = to2(&self.value(), "gather_rows")?;
        let expect: usize = prefix_shape.iter().product();
        if indices.len() != expect {
            return Err(Error::DimMismatch("gather indices vs prefix shape".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.nrows()) {
            return Err(Error::DimMismatch(format!("gather index {bad} out of range")));
        }
        let cols = x.ncols();
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            out.extend(x.row(i).iter().cloned());
        }
        let mut shape = prefix_shape.to_vec();
        shape.push(cols);
        let value = ArrayD::from_shape_vec(IxDyn(&shape), out).expect("gather shape");
        Ok(self.unary(value, Op::GatherRows { x: self.idx, indices: indices.to_vec() }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let v = self.value();
        let parent_shape = v.shape().to_vec();
        let value = v
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .map_err(|e| Error::DimMismatch(format!("reshape: {e}")))?;
        Ok(self.unary(value, Op::Reshape { x: self.idx, parent_shape }))
    }

    /// Batch normalization over rows of `[n × C]`. Train mode normalizes with
    /// batch statistics and returns them for the running-stat update; eval
    /// mode normalizes with the provided running statistics.
    pub fn batchnorm(
        &self,
        gamma: &Var,
        beta: &Var,
        running: Option<(&Array1<f64>, &Array1<f64>)>,
        eps: f64,
    ) -> Result<(Var, Option<(Array1<f64>, Array1<f64>)>)> {
        let x = to2(&self.value(), "batchnorm input")?;
        let c = x.ncols();
        let g = gamma.value().into_dimensionality::<Ix1>().map_err(|_| {
            Error::DimMismatch("batchnorm gamma must be rank 1".into())
        })?;
        if g.len() != c || beta.shape() != vec![c] {
            return Err(Error::DimMismatch("batchnorm parameter width".into()));
        }
        let b = beta.value().into_dimensionality::<Ix1>().expect("checked rank");
        let req = self.graph.requires(self.idx)
            || self.graph.requires(gamma.idx)
            || self.graph.requires(beta.idx);
        match running {
            None => {
                let n = x.nrows() as f64;
                if n == 0.0 {
                    return Err(Error::Contract("batchnorm over empty batch".into()));
                }
                let mean = x.mean_axis(Axis(0)).expect("non-empty");
                let var = x.map_axis(Axis(0), |col| {
                    let m = col.mean().expect("non-empty");
                    col.iter().map(|&v| (v - m) * (v - m)).sum::<f64>() / n
                });
                let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
                let xhat = normalize_cols(&x, &mean, &inv_std);
                let y = affine_cols(&xhat, &g, &b);
                let node = self.graph.push(
                    y.into_dyn(),
                    Op::BatchNormTrain {
                        x: self.idx,
                        gamma: gamma.idx,
                        beta: beta.idx,
                        xhat,
                        inv_std,
                    },
                    req,
                );
                Ok((node, Some((mean, var))))
            }
            Some((mean, var)) => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::DimMismatch("running stats width".into()));
                }
                let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
                let xhat = normalize_cols(&x, mean, &inv_std);
                let y = affine_cols(&xhat, &g, &b);
                let node = self.graph.push(
                    y.into_dyn(),
                    Op::BatchNormEval {
                        x: self.idx,
                        gamma: gamma.idx,
                        beta: beta.idx,
                        xhat,
                        inv_std,
                    },
                    req,
                );
                Ok((node, None))
            }
        }
    }
}

fn to2(v: &ArrayD<f64>, what: &str) -> Result<Array2<f64>> {
    v.clone()
        .into_dimensionality::<Ix2>()
        .map_err(|_| Error::DimMismatch(format!("{what} must be rank 2, got {:?}", v.shape())))
}

fn softmax_lanes(v: &mut ArrayD<f64>) {
    let last = Axis(v.ndim() - 1);
    for mut lane in v.lanes_mut(last) {
        let m = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in lane.iter_mut() {
            *x = (*x - m).exp();
            sum += *x;
        }
        lane.mapv_inplace(|x| x / sum);
    }
}

fn normalize_cols(x: &Array2<f64>, mean: &Array1<f64>, inv_std: &Array1<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean[j]) * inv_std[j];
        }
    }
    out
}

fn affine_cols(xhat: &Array2<f64>, gamma: &Array1<f64>, beta: &Array1<f64>) -> Array2<f64> {
    let mut out = xhat.clone();
    for mut row in out.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = *v * gamma[j] + beta[j];
        }
    }
    out
}

/// Gradient contributions of one node to its parents.
fn backward_op(inner: &GraphInner, idx: usize, g: &ArrayD<f64>) -> Vec<(usize, ArrayD<f64>)> {
    let node = &inner.nodes[idx];
    let val = |i: usize| &inner.nodes[i].value;
    match &node.op {
        Op::Leaf | Op::Constant => vec![],
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Sub(a, b) => vec![(*a, g.clone()), (*b, -g.clone())],
        Op::Mul(a, b) => vec![(*a, g * val(*b)), (*b, g * val(*a))],
        Op::AddScalar(x) => vec![(*x, g.clone())],
        Op::Scale(x, c) => vec![(*x, g * *c)],
        Op::MatMul(a, b) => {
            let ga = to2(g, "grad").unwrap();
            let av = to2(val(*a), "a").unwrap();
            let bv = to2(val(*b), "b").unwrap();
            vec![(*a, ga.dot(&bv.t()).into_dyn()), (*b, av.t().dot(&ga).into_dyn())]
        }
        Op::Linear { x, w, b } => {
            let gy = to2(g, "grad").unwrap();
            let xv = to2(val(*x), "x").unwrap();
            let wv = to2(val(*w), "w").unwrap();
            let mut out = vec![
                (*x, gy.dot(&wv).into_dyn()),
                (*w, gy.t().dot(&xv).into_dyn()),
            ];
            if let Some(b) = b {
                out.push((*b, gy.sum_axis(Axis(0)).into_dyn()));
            }
            out
        }
        Op::Relu(x) => {
            let mut gx = g.clone();
            gx.zip_mut_with(val(*x), |gv, &xv| {
                if xv <= 0.0 {
                    *gv = 0.0;
                }
            });
            vec![(*x, gx)]
        }
        Op::Softmax(x) => {
            let y = &node.value;
            let mut gx = g * y;
            let last = Axis(y.ndim() - 1);
            let dots = gx.sum_axis(last).insert_axis(last);
            gx -= &(&dots.broadcast(y.raw_dim()).expect("softmax bcast") * y);
            vec![(*x, gx)]
        }
        Op::LogSoftmax(x) => {
            let y = &node.value; // log-probabilities
            let last = Axis(y.ndim() - 1);
            let gsum = g.sum_axis(last).insert_axis(last);
            let probs = y.mapv(f64::exp);
            let gx = g - &(&gsum.broadcast(y.raw_dim()).expect("bcast") * &probs);
            vec![(*x, gx)]
        }
        Op::BatchNormTrain { x, gamma, beta, xhat, inv_std } => {
            let gy = to2(g, "grad").unwrap();
            let n = gy.nrows() as f64;
            let gamma_v = inner.nodes[*gamma]
                .value
                .clone()
                .into_dimensionality::<Ix1>()
                .expect("gamma rank");
            let dgamma = (&gy * xhat).sum_axis(Axis(0));
            let dbeta = gy.sum_axis(Axis(0));
            let sum_g = gy.sum_axis(Axis(0));
            let sum_gx = (&gy * xhat).sum_axis(Axis(0));
            let mut dx = Array2::<f64>::zeros(gy.raw_dim());
            for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = gamma_v[j] * inv_std[j] / n
                        * (n * gy[(i, j)] - sum_g[j] - xhat[(i, j)] * sum_gx[j]);
                }
            }
            vec![
                (*x, dx.into_dyn()),
                (*gamma, dgamma.into_dyn()),
                (*beta, dbeta.into_dyn()),
            ]
        }
        Op::BatchNormEval { x, gamma, beta, xhat, inv_std } => {
            let gy = to2(g, "grad").unwrap();
            let gamma_v = inner.nodes[*gamma]
                .value
                .clone()
                .into_dimensionality::<Ix1>()
                .expect("gamma rank");
            let dgamma = (&gy * xhat).sum_axis(Axis(0));
            let dbeta = gy.sum_axis(Axis(0));
            let mut dx = gy.clone();
            for mut row in dx.rows_mut() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v *= gamma_v[j] * inv_std[j];
                }
            }
            vec![
                (*x, dx.into_dyn()),
                (*gamma, dgamma.into_dyn()),
                (*beta, dbeta.into_dyn()),
            ]
        }
        Op::MaxAxis { x, axis, argmax } => {
            let xv = val(*x);
            let mut gx = ArrayD::<f64>::zeros(xv.raw_dim());
            for ((mut lane, &am), &gv) in
                gx.lanes_mut(Axis(*axis)).into_iter().zip(argmax.iter()).zip(g.iter())
            {
                lane[am] += gv;
            }
            vec![(*x, gx)]
        }
        Op::MeanAxis { x, axis } => {
            let xv = val(*x);
            let n = xv.shape()[*axis] as f64;
            let mut gx = ArrayD::<f64>::zeros(xv.raw_dim());
            for (mut lane, &gv) in gx.lanes_mut(Axis(*axis)).into_iter().zip(g.iter()) {
                lane.fill(gv / n);
            }
            vec![(*x, gx)]
        }
        Op::SumAll(x) => {
            let s = g[IxDyn(&[])];
            vec![(*x, ArrayD::from_elem(val(*x).raw_dim(), s))]
        }
        Op::Concat { xs, axis } => {
            let mut out = Vec::with_capacity(xs.len());
            let mut offset = 0;
            for &p in xs {
                let len = inner.nodes[p].value.shape()[*axis];
                let piece = g
                    .slice_axis(Axis(*axis), ndarray::Slice::from(offset..offset + len))
                    .to_owned();
                out.push((p, piece));
                offset += len;
            }
            out
        }
        Op::Transpose2(x) => {
            let gt = to2(g, "grad").unwrap().t().to_owned().into_dyn();
            vec![(*x, gt)]
        }
        Op::SteBinarize { x } => {
            let mut gx = g.clone();
            gx.zip_mut_with(val(*x), |gv, &xv| {
                if xv.abs() > 1.0 {
                    *gv = 0.0;
                }
            });
            vec![(*x, gx)]
        }
        Op::CenterRows(x) => {
            let gy = to2(g, "grad").unwrap();
            let means = gy.mean_axis(Axis(1)).expect("has columns");
            let mut gx = gy.clone();
            for (mut row, &m) in gx.rows_mut().into_iter().zip(means.iter()) {
                row.mapv_inplace(|v| v - m);
            }
            vec![(*x, gx.into_dyn())]
        }
        Op::RowAbsMean(x) => {
            let xv = to2(val(*x), "x").unwrap();
            let n = xv.ncols() as f64;
            let gv = g.clone().into_dimensionality::<Ix1>().expect("rank 1 grad");
            let mut gx = Array2::<f64>::zeros(xv.raw_dim());
            for (i, mut row) in gx.rows_mut().into_iter().enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = gv[i] * xv[(i, j)].signum_or_zero() / n;
                }
            }
            vec![(*x, gx.into_dyn())]
        }
        Op::AbsMeanAll(x) => {
            let xv = val(*x);
            let n = xv.len() as f64;
            let s = g[IxDyn(&[])];
            let gx = xv.mapv(|v| s * v.signum_or_zero() / n);
            vec![(*x, gx)]
        }
        Op::MulFeatureScale { x, v } => {
            let xv = val(*x);
            let sv = inner.nodes[*v].value.clone().into_dimensionality::<Ix1>().expect("rank 1");
            let last = Axis(xv.ndim() - 1);
            let mut gx = g.clone();
            for mut lane in gx.lanes_mut(last) {
                for (o, &f) in lane.iter_mut().zip(sv.iter()) {
                    *o *= f;
                }
            }
            let mut gv = Array1::<f64>::zeros(sv.len());
            for (glane, xlane) in g.lanes(last).into_iter().zip(xv.lanes(last)) {
                for (j, (&gg, &xx)) in glane.iter().zip(xlane.iter()).enumerate() {
                    gv[j] += gg * xx;
                }
            }
            vec![(*x, gx), (*v, gv.into_dyn())]
        }
        Op::MulScalarNode { x, s } => {
            let sv = inner.nodes[*s].value[IxDyn(&[])];
            let xv = val(*x);
            let ds = (g * xv).sum();
            vec![(*x, g * sv), (*s, arr0(ds).into_dyn())]
        }
        Op::L1NormalizeAxis { x, axis, sums } => {
            let y = &node.value;
            let s_b = sums.broadcast(y.raw_dim()).expect("sum bcast").to_owned();
            let dots = (g * y).sum_axis(Axis(*axis)).insert_axis(Axis(*axis));
            let dots_b = dots.broadcast(y.raw_dim()).expect("dot bcast").to_owned();
            let gx = (g - &dots_b) / &s_b;
            vec![(*x, gx)]
        }
        Op::OuterSub { a, b } => {
            let gm = to2(g, "grad").unwrap();
            vec![
                (*a, gm.sum_axis(Axis(1)).into_dyn()),
                (*b, (-gm.sum_axis(Axis(0))).into_dyn()),
            ]
        }
        Op::L2NormalizeVec { x, norm } => {
            let y = node.value.clone().into_dimensionality::<Ix1>().expect("rank 1");
            let gv = g.clone().into_dimensionality::<Ix1>().expect("rank 1");
            let dot = gv.dot(&y);
            let gx = Array1::from_shape_fn(y.len(), |i| (gv[i] - y[i] * dot) / norm);
            vec![(*x, gx.into_dyn())]
        }
        Op::GatherRows { x, indices } => {
            let xv = to2(val(*x), "x").unwrap();
            let cols = xv.ncols();
            let flat: Vec<f64> = g.iter().cloned().collect();
            let mut gx = Array2::<f64>::zeros(xv.raw_dim());
            for (pos, &row) in indices.iter().enumerate() {
                for j in 0..cols {
                    gx[(row, j)] += flat[pos * cols + j];
                }
            }
            vec![(*x, gx.into_dyn())]
        }
        Op::Reshape { x, parent_shape } => {
            let gx = g
                .as_standard_layout()
                .into_owned()
                .into_shape_with_order(IxDyn(parent_shape))
                .expect("reshape grad");
            vec![(*x, gx)]
        }
    }
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f64;
}

impl SignumOrZero for f64 {
    fn signum_or_zero(self) -> f64 {
        if self > 0.0 {
            1.0
        } else if self < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn dyn2(a: Array2<f64>) -> ArrayD<f64> {
        a.into_dyn()
    }

    #[test]
    fn relu_and_fanout_accumulation() {
        let g = Graph::new();
        let x = g.leaf(dyn2(arr2(&[[-1.0, 2.0]])));
        let loss = x.relu().sum_all();
        g.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), dyn2(arr2(&[[0.0, 1.0]])));

        let g = Graph::new();
        let x = g.leaf(dyn2(arr2(&[[1.5, -2.0]])));
        let loss = x.add(&x).unwrap().sum_all();
        g.backward(&loss).unwrap();
        assert_eq!(loss.scalar_value(), -1.0);
        assert_eq!(x.grad().unwrap(), dyn2(arr2(&[[2.0, 2.0]])));
    }

    #[test]
    fn softmax_uniform_and_maxpool_columns() {
        let g = Graph::new();
        let x = g.constant(dyn2(arr2(&[[0.0, 0.0, 0.0]])));
        let y = x.softmax().unwrap();
        for &v in y.value().iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        assert!((y.value().sum() - 1.0).abs() < 1e-12);

        let x = g.constant(dyn2(arr2(&[[1.0, 5.0], [3.0, 2.0]])));
        let m = x.max_axis(0).unwrap();
        assert_eq!(m.value(), ndarray::arr1(&[3.0, 5.0]).into_dyn());
    }

    #[test]
    fn softmax_empty_axis_errors() {
        let g = Graph::new();
        let x = g.constant(ArrayD::zeros(IxDyn(&[2, 0])));
        assert!(matches!(x.softmax(), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_requires_scalar() {
        let g = Graph::new();
        let x = g.leaf(dyn2(arr2(&[[1.0, 2.0]])));
        let y = x.relu();
        assert!(matches!(g.backward(&y), Err(Error::Contract(_))));
    }

    #[test]
    fn ste_node_forward_and_clip() {
        let g = Graph::new();
        let x = g.leaf(dyn2(arr2(&[[0.7, -3.0, 1.0]])));
        let y = x.ste_binarize(BinarizeMode::Signed).unwrap();
        assert_eq!(y.value(), dyn2(arr2(&[[1.0, -1.0, 1.0]])));
        let loss = y.sum_all().scale(2.0);
        g.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), dyn2(arr2(&[[2.0, 0.0, 2.0]])));
    }

    #[test]
    fn constants_are_pruned() {
        let g = Graph::new();
        let x = g.leaf(dyn2(arr2(&[[1.0]])));
        let c = g.constant(dyn2(arr2(&[[5.0]])));
        let loss = x.mul(&c).unwrap().sum_all();
        g.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), dyn2(arr2(&[[5.0]])));
        assert!(c.grad().is_none());
    }

    #[test]
    fn batchnorm_eval_is_affine_in_running_stats() {
        let g = Graph::new();
        let x = g.leaf(dyn2(arr2(&[[1.0, 2.0], [3.0, 4.0]])));
        let gamma = g.leaf(ndarray::arr1(&[2.0, 1.0]).into_dyn());
        let beta = g.leaf(ndarray::arr1(&[0.5, -0.5]).into_dyn());
        let mean = ndarray::arr1(&[1.0, 1.0]);
        let var = ndarray::arr1(&[4.0, 1.0]);
        let (y, stats) = x.batchnorm(&gamma, &beta, Some((&mean, &var)), 0.0).unwrap();
        assert!(stats.is_none());
        let yv = y.value();
        assert!((yv[[0, 0]] - 0.5).abs() < 1e-12); // (1-1)/2*2+0.5
        assert!((yv[[1, 0]] - 2.5).abs() < 1e-12); // (3-1)/2*2+0.5
    }

    #[test]
    fn gather_rows_scatter_adds() {
        let g = Graph::new();
        let x = g.leaf(dyn2(arr2(&[[1.0, 2.0], [3.0, 4.0]])));
        let y = x.gather_rows(&[0, 0, 1], &[3]).unwrap();
        assert_eq!(y.shape(), vec![3, 2]);
        let loss = y.sum_all();
        g.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), dyn2(arr2(&[[2.0, 2.0], [1.0, 1.0]])));
    }
}
