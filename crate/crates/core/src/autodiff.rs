//! A small reverse-mode tape over dense matrices.
//!
//! Each [`Tape`] records operations in creation order, which is already a
//! topological order, so `backward` is a single reverse sweep. Leaf
//! gradients accumulate across `backward` calls until [`Tape::zero_grad`];
//! interior gradients are overwritten by every call.
//!
//! `sign_ste`/`bool_ste` use the clipped straight-through estimator from
//! [`crate::binarize`].

use std::cell::{Ref, RefCell};

use crate::binarize::{self, SteWindow};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{self, Matrix};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Hadamard(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Transpose(usize),
    SliceCols {
        src: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SelectRows {
        src: usize,
        idx: Vec<usize>,
    },
    MaskCols {
        src: usize,
        mask: Vec<bool>,
    },
    Softmax(usize),
    Relu(usize),
    Gelu(usize),
    Tanh(usize),
    LayerNorm {
        src: usize,
        normalized: Matrix,
        inv_std: Vec<f64>,
    },
    Sum(usize),
    Mse(usize, usize),
    Sce {
        logits: usize,
        target: Matrix,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
    },
    FrobNorm(usize),
    Normalize {
        src: usize,
        norm: f64,
    },
    SignSte {
        src: usize,
        window: SteWindow,
    },
    ThresholdBool {
        src: usize,
        thresholds: Vec<f64>,
        window: SteWindow,
    },
    WeightSign {
        src: usize,
        window: SteWindow,
    },
    RowBinarize {
        src: usize,
        window: SteWindow,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    grad: Option<Matrix>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
struct Inner {
    nodes: Vec<Node>,
    backward_runs: usize,
}

/// Records operations for one forward/backward pass. Single-threaded.
#[derive(Debug, Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

/// Handle to a value recorded on a [`Tape`]; its gradient buffer lives on
/// the tape.
#[derive(Debug, Clone, Copy)]
pub struct DualTensor<'t> {
    tape: &'t Tape,
    id: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Matrix, op: Op, requires_grad: bool) -> DualTensor<'_> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        DualTensor { tape: self, id }
    }

    /// Trainable input.
    pub fn leaf(&self, value: Matrix) -> DualTensor<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Matrix) -> DualTensor<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn value_ref(&self, id: usize) -> Ref<'_, Matrix> {
        Ref::map(self.inner.borrow(), |i| &i.nodes[id].value)
    }

    pub fn zero_grad(&self) {
        let mut inner = self.inner.borrow_mut();
        for n in &mut inner.nodes {
            n.grad = None;
        }
    }

    /// Accumulates `∂loss/∂leaf` into every trainable leaf and records the
    /// gradient of every interior node upstream of `loss`.
    pub fn backward(&self, loss: DualTensor<'_>) -> Result<()> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::State("loss belongs to another tape".into()));
        }
        let mut inner = self.inner.borrow_mut();
        let shape = inner.nodes[loss.id].value.shape();
        if shape != (1, 1) {
            return Err(Error::Domain(format!(
                "backward needs a scalar loss, got {shape:?}"
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Matrix::scalar(1.0));
        let mut leaf_grads = Vec::new();
        let mut interior = Vec::new();
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &inner.nodes[id];
            if !matches!(node.op, Op::Leaf) {
                interior.push((id, g.clone()));
            }
            let val = |i: usize| &inner.nodes[i].value;
            match &node.op {
                Op::Leaf => {
                    if node.requires_grad {
                        leaf_grads.push((id, g));
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.scale(-1.0));
                    accumulate(&mut grads, *a, g);
                }
                Op::Hadamard(a, b) => {
                    accumulate(&mut grads, *a, g.hadamard(val(*b))?);
                    accumulate(&mut grads, *b, g.hadamard(val(*a))?);
                }
                Op::AddRow(a, row) => {
                    accumulate(&mut grads, *row, column_sums(&g));
                    accumulate(&mut grads, *a, g);
                }
                Op::MulRow(a, row) => {
                    accumulate(&mut grads, *row, column_sums(&g.hadamard(val(*a))?));
                    accumulate(&mut grads, *a, g.mul_row(val(*row))?);
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scale(*s)),
                Op::MatMul(a, b) => {
                    // C = A·B: dA = dC·Bᵀ, dB = Aᵀ·dC
                    accumulate(&mut grads, *a, g.matmul_t(val(*b))?);
                    accumulate(&mut grads, *b, val(*a).t_matmul(&g)?);
                }
                Op::MatMulT(a, b) => {
                    // C = A·Bᵀ: dA = dC·B, dB = dCᵀ·A
                    accumulate(&mut grads, *a, g.matmul(val(*b))?);
                    accumulate(&mut grads, *b, g.t_matmul(val(*a))?);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()),
                Op::SliceCols { src, start } => {
                    let (r, c) = val(*src).shape();
                    let mut full = Matrix::zeros(r, c);
                    for i in 0..r {
                        full.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                    }
                    accumulate(&mut grads, *src, full);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = val(p).cols();
                        accumulate(&mut grads, p, g.slice_cols(start, start + w)?);
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let h = val(p).rows();
                        let idx: Vec<usize> = (start..start + h).collect();
                        accumulate(&mut grads, p, g.select_rows(&idx)?);
                        start += h;
                    }
                }
                Op::SelectRows { src, idx } => {
                    let (r, c) = val(*src).shape();
                    let mut full = Matrix::zeros(r, c);
                    for (k, &i) in idx.iter().enumerate() {
                        for (f, v) in full.row_mut(i).iter_mut().zip(g.row(k)) {
                            *f += v;
                        }
                    }
                    accumulate(&mut grads, *src, full);
                }
                Op::MaskCols { src, mask } => {
                    let mut d = g;
                    for i in 0..d.rows() {
                        for (v, &keep) in d.row_mut(i).iter_mut().zip(mask) {
                            if !keep {
                                *v = 0.0;
                            }
                        }
                    }
                    accumulate(&mut grads, *src, d);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut d = Matrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let dot = tensor::dot(y.row(i), g.row(i));
                        for ((o, &yv), &gv) in d.row_mut(i).iter_mut().zip(y.row(i)).zip(g.row(i)) {
                            *o = yv * (gv - dot);
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Relu(a) => {
                    let d = val(*a).zip_map(&g, |x, gv| if x > 0.0 { gv } else { 0.0 })?;
                    accumulate(&mut grads, *a, d);
                }
                Op::Gelu(a) => {
                    let d = val(*a).zip_map(&g, |x, gv| gv * tensor::gelu_grad(x))?;
                    accumulate(&mut grads, *a, d);
                }
                Op::Tanh(a) => {
                    let d = node.value.zip_map(&g, |y, gv| gv * (1.0 - y * y))?;
                    accumulate(&mut grads, *a, d);
                }
                Op::LayerNorm {
                    src,
                    normalized,
                    inv_std,
                } => {
                    let n = normalized.cols() as f64;
                    let mut d = Matrix::zeros(normalized.rows(), normalized.cols());
                    for (i, &is) in inv_std.iter().enumerate() {
                        let xh = normalized.row(i);
                        let gr = g.row(i);
                        let mean_g = gr.iter().sum::<f64>() / n;
                        let mean_gx = tensor::dot(gr, xh) / n;
                        for ((o, &gv), &xv) in d.row_mut(i).iter_mut().zip(gr).zip(xh) {
                            *o = is * (gv - mean_g - xv * mean_gx);
                        }
                    }
                    accumulate(&mut grads, *src, d);
                }
                Op::Sum(a) => {
                    let (r, c) = val(*a).shape();
                    accumulate(&mut grads, *a, Matrix::filled(r, c, g.item()));
                }
                Op::Mse(a, b) => {
                    let diff = val(*a).sub(val(*b))?;
                    let d = diff.scale(2.0 * g.item() / diff.len() as f64);
                    accumulate(&mut grads, *b, d.scale(-1.0));
                    accumulate(&mut grads, *a, d);
                }
                Op::Sce { logits, target } => {
                    let p = tensor::softmax_rows(val(*logits));
                    let rows = p.rows() as f64;
                    let d = p.sub(target)?.scale(g.item() / rows);
                    accumulate(&mut grads, *logits, d);
                }
                Op::CrossEntropy { logits, labels } => {
                    let mut p = tensor::softmax_rows(val(*logits));
                    let rows = p.rows() as f64;
                    for (i, &l) in labels.iter().enumerate() {
                        let v = p.get(i, l);
                        p.set(i, l, v - 1.0);
                    }
                    accumulate(&mut grads, *logits, p.scale(g.item() / rows));
                }
                Op::FrobNorm(a) => {
                    let s = node.value.item();
                    let d = if s > 0.0 {
                        val(*a).scale(g.item() / s)
                    } else {
                        Matrix::zeros(val(*a).rows(), val(*a).cols())
                    };
                    accumulate(&mut grads, *a, d);
                }
                Op::Normalize { src, norm } => {
                    let y = &node.value;
                    let yg = tensor::dot(y.data(), g.data());
                    let d = g.zip_map(y, |gv, yv| (gv - yv * yg) / norm)?;
                    accumulate(&mut grads, *src, d);
                }
                Op::SignSte { src, window } => {
                    accumulate(
                        &mut grads,
                        *src,
                        binarize::sign_bwd(val(*src), &g, *window)?,
                    );
                }
                Op::ThresholdBool {
                    src,
                    thresholds,
                    window,
                } => {
                    let x = val(*src);
                    let mut shifted = x.clone();
                    for (i, t) in thresholds.iter().enumerate() {
                        for v in shifted.row_mut(i) {
                            *v -= t;
                        }
                    }
                    accumulate(&mut grads, *src, binarize::bool_bwd(&shifted, &g, *window)?);
                }
                Op::WeightSign { src, window } => {
                    let w = val(*src);
                    let mu = w.mean();
                    let centered = w.map(|v| v - mu);
                    accumulate(
                        &mut grads,
                        *src,
                        binarize::sign_bwd(&centered, &g, *window)?,
                    );
                }
                Op::RowBinarize { src, window } => {
                    let w = val(*src);
                    let mut centered = w.clone();
                    for i in 0..centered.rows() {
                        let row = centered.row_mut(i);
                        let mu = row.iter().sum::<f64>() / row.len() as f64;
                        for v in row.iter_mut() {
                            *v -= mu;
                        }
                    }
                    accumulate(
                        &mut grads,
                        *src,
                        binarize::sign_bwd(&centered, &g, *window)?,
                    );
                }
            }
        }
        for n in inner.nodes.iter_mut().filter(|n| !matches!(n.op, Op::Leaf)) {
            n.grad = None;
        }
        for (id, g) in interior {
            inner.nodes[id].grad = Some(g);
        }
        for (id, g) in leaf_grads {
            match &mut inner.nodes[id].grad {
                Some(acc) => acc.add_assign(&g),
                slot => *slot = Some(g),
            }
        }
        inner.backward_runs += 1;
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Matrix>], id: usize, g: Matrix) {
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for i in 0..g.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(g.row(i)) {
            *o += v;
        }
    }
    out
}

impl<'t> DualTensor<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Matrix {
        self.tape.value_ref(self.id).clone()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.value_ref(self.id).shape()
    }

    /// Value of a `1×1` tensor.
    pub fn item(&self) -> f64 {
        self.tape.value_ref(self.id).item()
    }

    /// Gradient of the last `backward` loss with respect to this value
    /// (accumulated across calls for leaves; zeros when not upstream of the
    /// loss). Fails before any `backward` on this tape.
    pub fn grad(&self) -> Result<Matrix> {
        let inner = self.tape.inner.borrow();
        if inner.backward_runs == 0 {
            return Err(Error::State("gradient requested before backward".into()));
        }
        let node = &inner.nodes[self.id];
        Ok(node
            .grad
            .clone()
            .unwrap_or_else(|| Matrix::zeros(node.value.rows(), node.value.cols())))
    }

    fn same_tape(&self, other: &DualTensor<'_>) -> Result<()> {
        if !std::ptr::eq(self.tape, other.tape) {
            return Err(Error::State("operands recorded on different tapes".into()));
        }
        Ok(())
    }

    fn unary(&self, value: Matrix, op: Op) -> DualTensor<'t> {
        self.tape.push(value, op, true)
    }

    fn binary(
        &self,
        other: &DualTensor<'t>,
        f: impl FnOnce(&Matrix, &Matrix) -> Result<Matrix>,
        op: Op,
    ) -> Result<DualTensor<'t>> {
        self.same_tape(other)?;
        let value = {
            let a = self.tape.value_ref(self.id);
            let b = self.tape.value_ref(other.id);
            f(&a, &b)?
        };
        Ok(self.tape.push(value, op, true))
    }

    pub fn add(&self, other: &DualTensor<'t>) -> Result<DualTensor<'t>> {
        self.binary(other, Matrix::add, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &DualTensor<'t>) -> Result<DualTensor<'t>> {
        self.binary(other, Matrix::sub, Op::Sub(self.id, other.id))
    }

    pub fn hadamard(&self, other: &DualTensor<'t>) -> Result<DualTensor<'t>> {
        self.binary(other, Matrix::hadamard, Op::Hadamard(self.id, other.id))
    }

    /// Broadcast-add a `1×cols` row (bias).
    pub fn add_row(&self, row: &DualTensor<'t>) -> Result<DualTensor<'t>> {
        self.binary(row, Matrix::add_row, Op::AddRow(self.id, row.id))
    }

    /// Broadcast-multiply by a `1×cols` row (layer-norm gain).
    pub fn mul_row(&self, row: &DualTensor<'t>) -> Result<DualTensor<'t>> {
        self.binary(row, Matrix::mul_row, Op::MulRow(self.id, row.id))
    }

    pub fn scale(&self, s: f64) -> DualTensor<'t> {
        let v = self.tape.value_ref(self.id).scale(s);
        self.unary(v, Op::Scale(self.id, s))
    }

    pub fn matmul(&self, other: &DualTensor<'t>) -> Result<DualTensor<'t>> {
        self.binary(other, Matrix::matmul, Op::MatMul(self.id, other.id))
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &DualTensor<'t>) -> Result<DualTensor<'t>> {
        self.binary(other, Matrix::matmul_t, Op::MatMulT(self.id, other.id))
    }

    pub fn transpose(&self) -> DualTensor<'t> {
        let v = self.tape.value_ref(self.id).transpose();
        self.unary(v, Op::Transpose(self.id))
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<DualTensor<'t>> {
        let v = self.tape.value_ref(self.id).slice_cols(start, end)?;
        Ok(self.unary(
            v,
            Op::SliceCols {
                src: self.id,
                start,
            },
        ))
    }

    pub fn concat_cols(parts: &[DualTensor<'t>]) -> Result<DualTensor<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        for p in parts {
            first.same_tape(p)?;
        }
        let v = {
            let refs: Vec<Ref<'_, Matrix>> =
                parts.iter().map(|p| first.tape.value_ref(p.id)).collect();
            let mats: Vec<&Matrix> = refs.iter().map(|r| &**r).collect();
            Matrix::concat_cols(&mats)?
        };
        Ok(first.unary(v, Op::ConcatCols(parts.iter().map(|p| p.id).collect())))
    }

    pub fn concat_rows(parts: &[DualTensor<'t>]) -> Result<DualTensor<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        for p in parts {
            first.same_tape(p)?;
        }
        let v = {
            let refs: Vec<Ref<'_, Matrix>> =
                parts.iter().map(|p| first.tape.value_ref(p.id)).collect();
            let mats: Vec<&Matrix> = refs.iter().map(|r| &**r).collect();
            Matrix::concat_rows(&mats)?
        };
        Ok(first.unary(v, Op::ConcatRows(parts.iter().map(|p| p.id).collect())))
    }

    /// Gathers rows by index (embedding lookup); repeated indices accumulate.
    pub fn select_rows(&self, idx: &[usize]) -> Result<DualTensor<'t>> {
        let v = self.tape.value_ref(self.id).select_rows(idx)?;
        Ok(self.unary(
            v,
            Op::SelectRows {
                src: self.id,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Replaces columns where `mask` is false with `fill`; no gradient flows
    /// into replaced entries.
    pub fn mask_cols(&self, mask: &[bool], fill: f64) -> Result<DualTensor<'t>> {
        let mut v = self.value();
        if mask.len() != v.cols() {
            return shape_err(format!("mask of {} for {} columns", mask.len(), v.cols()));
        }
        for i in 0..v.rows() {
            for (x, &keep) in v.row_mut(i).iter_mut().zip(mask) {
                if !keep {
                    *x = fill;
                }
            }
        }
        Ok(self.unary(
            v,
            Op::MaskCols {
                src: self.id,
                mask: mask.to_vec(),
            },
        ))
    }

    pub fn softmax_rows(&self) -> DualTensor<'t> {
        let v = tensor::softmax_rows(&self.tape.value_ref(self.id));
        self.unary(v, Op::Softmax(self.id))
    }

    pub fn relu(&self) -> DualTensor<'t> {
        let v = self.tape.value_ref(self.id).map(|x| x.max(0.0));
        self.unary(v, Op::Relu(self.id))
    }

    pub fn gelu(&self) -> DualTensor<'t> {
        let v = self.tape.value_ref(self.id).map(tensor::gelu);
        self.unary(v, Op::Gelu(self.id))
    }

    pub fn tanh(&self) -> DualTensor<'t> {
        let v = self.tape.value_ref(self.id).map(f64::tanh);
        self.unary(v, Op::Tanh(self.id))
    }

    /// Row-wise normalization without gain/bias.
    pub fn layer_norm(&self, eps: f64) -> DualTensor<'t> {
        let (normalized, inv_std) = tensor::layer_norm_rows(&self.tape.value_ref(self.id), eps);
        self.unary(
            normalized.clone(),
            Op::LayerNorm {
                src: self.id,
                normalized,
                inv_std,
            },
        )
    }

    pub fn sum(&self) -> DualTensor<'t> {
        let v = Matrix::scalar(self.tape.value_ref(self.id).sum());
        self.unary(v, Op::Sum(self.id))
    }

    /// Mean squared error against `target`.
    pub fn mse(&self, target: &DualTensor<'t>) -> Result<DualTensor<'t>> {
        self.binary(
            target,
            |a, b| {
                Ok(Matrix::scalar(
                    a.sub(b)?.data().iter().map(|d| d * d).sum::<f64>() / a.len() as f64,
                ))
            },
            Op::Mse(self.id, target.id),
        )
    }

    /// Soft cross-entropy `−Σ softmax(teacher)·log softmax(self)`, averaged
    /// over rows. The teacher side is a constant.
    pub fn soft_cross_entropy(&self, teacher_logits: &Matrix) -> Result<DualTensor<'t>> {
        let logits = self.value();
        logits.expect_same_shape(teacher_logits)?;
        let target = tensor::softmax_rows(teacher_logits);
        let logp = tensor::log_softmax_rows(&logits);
        let v = -target.hadamard(&logp)?.sum() / logits.rows() as f64;
        Ok(self.unary(
            Matrix::scalar(v),
            Op::Sce {
                logits: self.id,
                target,
            },
        ))
    }

    /// Mean cross-entropy against hard labels, one per row.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<DualTensor<'t>> {
        let logits = self.value();
        if labels.len() != logits.rows() || labels.iter().any(|&l| l >= logits.cols()) {
            return shape_err(format!(
                "{} labels for logits {:?}",
                labels.len(),
                logits.shape()
            ));
        }
        let logp = tensor::log_softmax_rows(&logits);
        let v = -labels
            .iter()
            .enumerate()
            .map(|(i, &l)| logp.get(i, l))
            .sum::<f64>()
            / logits.rows() as f64;
        Ok(self.unary(
            Matrix::scalar(v),
            Op::CrossEntropy {
                logits: self.id,
                labels: labels.to_vec(),
            },
        ))
    }

    pub fn frobenius_norm(&self) -> DualTensor<'t> {
        let v = Matrix::scalar(self.tape.value_ref(self.id).frobenius_norm());
        self.unary(v, Op::FrobNorm(self.id))
    }

    /// `self / ||self||_F`. Fails on an all-zero tensor.
    pub fn l2_normalize(&self) -> Result<DualTensor<'t>> {
        let x = self.value();
        let norm = x.frobenius_norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::Degenerate(
                "cannot normalize a zero-norm tensor".into(),
            ));
        }
        Ok(self.unary(x.scale(1.0 / norm), Op::Normalize { src: self.id, norm }))
    }

    /// `sign` forward, clipped straight-through backward.
    pub fn sign_ste(&self, window: SteWindow) -> Result<DualTensor<'t>> {
        let v = binarize::sign_fwd(&self.tape.value_ref(self.id))?;
        Ok(self.unary(
            v,
            Op::SignSte {
                src: self.id,
                window,
            },
        ))
    }

    /// `bool` forward, clipped straight-through backward.
    pub fn bool_ste(&self, window: SteWindow) -> Result<DualTensor<'t>> {
        self.threshold_bool_ste(&vec![0.0; self.shape().0], window)
    }

    /// `bool(x − t_i)` per row `i` with the threshold treated as a constant.
    pub fn threshold_bool_ste(
        &self,
        thresholds: &[f64],
        window: SteWindow,
    ) -> Result<DualTensor<'t>> {
        let x = self.value();
        if thresholds.len() != x.rows() {
            return shape_err(format!(
                "{} thresholds for {} rows",
                thresholds.len(),
                x.rows()
            ));
        }
        if x.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Domain("NaN input to bool".into()));
        }
        let mut out = x;
        for (i, &t) in thresholds.iter().enumerate() {
            for v in out.row_mut(i) {
                *v = binarize::bool01(*v - t);
            }
        }
        Ok(self.unary(
            out,
            Op::ThresholdBool {
                src: self.id,
                thresholds: thresholds.to_vec(),
                window,
            },
        ))
    }

    /// `sign(W − μ(W))` with the mean held constant in the backward pass.
    pub fn weight_sign_ste(&self, window: SteWindow) -> Result<DualTensor<'t>> {
        let w = self.value();
        if w.is_empty() {
            return Err(Error::Domain("cannot binarize an empty weight".into()));
        }
        let v = binarize::zero_mean_signs(&w);
        Ok(self.unary(
            v,
            Op::WeightSign {
                src: self.id,
                window,
            },
        ))
    }

    /// Per-row `α_r · sign(w_r − μ_r)`; gradient passes where `|w_r − μ_r| <= clip`.
    pub fn row_binarize_ste(&self, window: SteWindow) -> DualTensor<'t> {
        let v = binarize::binarize_rows(&self.tape.value_ref(self.id));
        self.unary(
            v,
            Op::RowBinarize {
                src: self.id,
                window,
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Central differences of `f` at `x`.
    fn numeric_grad(x: &Matrix, f: &dyn Fn(&Matrix) -> f64, h: f64) -> Matrix {
        let mut g = Matrix::zeros(x.rows(), x.cols());
        for k in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[k] += h;
            let mut m = x.clone();
            m.data_mut()[k] -= h;
            g.data_mut()[k] = (f(&p) - f(&m)) / (2.0 * h);
        }
        g
    }

    fn max_rel_err(a: &Matrix, b: &Matrix) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| {
                let scale = x.abs().max(y.abs());
                if scale < 1e-7 {
                    (x - y).abs()
                } else {
                    (x - y).abs() / scale
                }
            })
            .fold(0.0, f64::max)
    }

    fn check<F>(x: Matrix, build: F)
    where
        F: for<'t> Fn(DualTensor<'t>) -> DualTensor<'t>,
    {
        let tape = Tape::new();
        let leaf = tape.leaf(x.clone());
        let loss = build(leaf);
        tape.backward(loss).unwrap();
        let analytic = leaf.grad().unwrap();
        let f = |m: &Matrix| {
            let t = Tape::new();
            build(t.leaf(m.clone())).item()
        };
        let numeric = numeric_grad(&x, &f, 1e-5);
        let err = max_rel_err(&analytic, &numeric);
        assert!(
            err < 1e-4,
            "relative error {err}\n{analytic:?}\n{numeric:?}"
        );
    }

    #[test]
    fn mse_at_target_has_zero_grad() {
        let tape = Tape::new();
        let t = Matrix::from_fn(2, 3, |i, j| (i + j) as f64);
        let x = tape.leaf(t.clone());
        let c = tape.constant(t);
        let loss = x.mse(&c).unwrap();
        tape.backward(loss).unwrap();
        assert!(x.grad().unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn sum_gives_ones_and_accumulates() {
        let tape = Tape::new();
        let x = tape.leaf(Matrix::from_fn(2, 2, |i, j| (i * 2 + j) as f64));
        let loss = x.sum();
        tape.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap(), Matrix::filled(2, 2, 1.0));
        tape.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap(), Matrix::filled(2, 2, 2.0));
        tape.zero_grad();
        assert_eq!(x.grad().unwrap(), Matrix::zeros(2, 2));
    }

    #[test]
    fn interior_gradients_are_kept() {
        let tape = Tape::new();
        let x = tape.leaf(Matrix::row_vector(vec![1.0, 2.0]));
        let y = x.scale(3.0);
        let loss = y.hadamard(&y).unwrap().sum();
        tape.backward(loss).unwrap();
        assert_eq!(y.grad().unwrap().data(), &[6.0, 12.0]);
        tape.backward(loss).unwrap();
        assert_eq!(y.grad().unwrap().data(), &[6.0, 12.0]);
        assert_eq!(x.grad().unwrap().data(), &[36.0, 72.0]);
    }

    #[test]
    fn grad_before_backward_is_state_error() {
        let tape = Tape::new();
        let x = tape.leaf(Matrix::scalar(1.0));
        assert!(matches!(x.grad(), Err(Error::State(_))));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(Matrix::zeros(2, 2));
        assert!(matches!(tape.backward(x), Err(Error::Domain(_))));
    }

    #[test]
    fn shape_mismatch_is_shape_error() {
        let tape = Tape::new();
        let a = tape.leaf(Matrix::zeros(2, 3));
        let b = tape.leaf(Matrix::zeros(2, 2));
        assert!(matches!(a.matmul(&b), Err(Error::Shape(_))));
        assert!(matches!(a.add(&b), Err(Error::Shape(_))));
    }

    #[test]
    fn sign_ste_outside_window_is_zero() {
        let tape = Tape::new();
        let x = tape.leaf(Matrix::row_vector(vec![2.0, 0.5, -3.0]));
        let w = tape.constant(Matrix::row_vector(vec![5.0, -4.0, 9.0]));
        let loss = x
            .sign_ste(SteWindow::default())
            .unwrap()
            .hadamard(&w)
            .unwrap()
            .sum();
        tape.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[0.0, -4.0, 0.0]);
    }

    #[test]
    fn softmax_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random(&mut rng, 3, 4);
        check(random(&mut rng, 3, 4), move |x| {
            let c = x.tape().constant(w.clone());
            x.softmax_rows().hadamard(&c).unwrap().sum()
        });
    }

    #[test]
    fn smooth_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = random(&mut rng, 4, 3);
        let row = random(&mut rng, 1, 3);
        let target = random(&mut rng, 2, 3);
        check(random(&mut rng, 2, 4), move |x| {
            let t = x.tape();
            let h = x
                .matmul(&t.constant(b.clone()))
                .unwrap()
                .add_row(&t.constant(row.clone()))
                .unwrap();
            let h = h
                .layer_norm(1e-12)
                .mul_row(&t.constant(row.clone()))
                .unwrap()
                .gelu()
                .tanh();
            h.mse(&t.constant(target.clone())).unwrap()
        });
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random(&mut rng, 5, 4);
        check(random(&mut rng, 3, 4), move |x| {
            let t = x.tape();
            let a = x.slice_cols(0, 2).unwrap();
            let b = x.slice_cols(2, 4).unwrap();
            let c = DualTensor::concat_cols(&[b, a]).unwrap();
            let r = DualTensor::concat_rows(&[c, x.select_rows(&[0, 0]).unwrap()]).unwrap();
            let r = r.matmul_t(&t.constant(w.clone())).unwrap().relu();
            r.mask_cols(&[true, false, true, true, true], -3.0)
                .unwrap()
                .transpose()
                .scale(0.3)
                .sum()
        });
    }

    #[test]
    fn losses_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let teacher = random(&mut rng, 2, 3);
        check(random(&mut rng, 2, 3), move |x| {
            let sce = x.soft_cross_entropy(&teacher).unwrap();
            let ce = x.cross_entropy(&[2, 0]).unwrap();
            let n = x.l2_normalize().unwrap().hadamard(&x).unwrap().sum();
            sce.add(&ce)
                .unwrap()
                .add(&n)
                .unwrap()
                .add(&x.frobenius_norm())
                .unwrap()
        });
    }

    #[test]
    fn similarity_norm_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let target = random(&mut rng, 3, 3);
        check(random(&mut rng, 3, 4), move |x| {
            let p = x.matmul_t(&x).unwrap().l2_normalize().unwrap();
            p.sub(&x.tape().constant(target.clone()))
                .unwrap()
                .frobenius_norm()
        });
    }

    #[test]
    fn ste_gradient_equals_smooth_gradient_times_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x0 = Matrix::from_fn(3, 5, |_, _| rng.random_range(-2.0..2.0));
        let w = random(&mut rng, 5, 2);
        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let wc = tape.constant(w.clone());
        let loss = x
            .sign_ste(SteWindow::default())
            .unwrap()
            .matmul(&wc)
            .unwrap()
            .tanh()
            .sum();
        tape.backward(loss).unwrap();

        // Independent construction: d/dS of sum(tanh(S·W)) then mask.
        let s = binarize::sign_fwd(&x0).unwrap();
        let y = s.matmul(&w).unwrap().map(f64::tanh);
        let up = y.map(|v| 1.0 - v * v).matmul_t(&w).unwrap();
        let expect = x0
            .zip_map(&up, |xv, g| if xv.abs() <= 1.0 { g } else { 0.0 })
            .unwrap();
        assert!(x.grad().unwrap().max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn weight_sign_grad_masks_centered_weights() {
        let tape = Tape::new();
        let w = tape.leaf(Matrix::row_vector(vec![3.0, 0.0, -0.5, 1.5]));
        // mean 1.0 → centered [2, -1, -1.5, 0.5]
        let loss = w.weight_sign_ste(SteWindow::default()).unwrap().sum();
        tape.backward(loss).unwrap();
        assert_eq!(w.grad().unwrap().data(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn zero_tensor_cannot_be_normalized() {
        let tape = Tape::new();
        let x = tape.leaf(Matrix::zeros(2, 2));
        assert!(matches!(x.l2_normalize(), Err(Error::Degenerate(_))));
    }

    #[test]
    fn identical_runs_give_identical_gradients() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let tape = Tape::new();
            let x = tape.leaf(random(&mut rng, 4, 4));
            let loss = x
                .matmul_t(&x)
                .unwrap()
                .softmax_rows()
                .sign_ste(SteWindow::default())
                .unwrap()
                .sum();
            tape.backward(loss).unwrap();
            x.grad().unwrap()
        };
        assert_eq!(run(), run());
    }
}
