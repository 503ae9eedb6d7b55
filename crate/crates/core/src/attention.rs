//! Attention-weight binarization schemes and the binary-entropy measure.
//!
//! Every scheme is written once against the tape ([`weights_on_tape`]); the
//! plain-value entry point [`binary_weight`] replays it on a throwaway tape so
//! training and inference see identical numbers.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{DualTensor, Tape};
use crate::binarize::{SteWindow, ThresholdVariant};
use crate::bitcore::{self, Encoding};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Matrix;

/// Stand-in for `−∞` on masked score columns.
pub const MASK_SENTINEL: f64 = -1e30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum WeightFn {
    /// `sign(softmax(A))`, the baseline; always all ones.
    SoftmaxSign,
    /// `bool(softmax(A))`; also all ones.
    SoftmaxBool,
    /// `sign(softmax(A) − τ)`
    SoftmaxShift(f64),
    /// `bool(A)`
    BiAttentionBool,
    /// `sign(A)`
    HardSign,
    /// `bool(softmax(A) − mean)` over the unmasked row.
    MeanShift,
    /// `bool(softmax(A) − quantile_p)` over the unmasked row.
    Quantile(f64),
    /// `bool(softmax(A) − (max + min)/2)` over the unmasked row.
    Asym,
}

impl WeightFn {
    pub fn validate(&self) -> Result<()> {
        match *self {
            WeightFn::SoftmaxShift(t) if !t.is_finite() => Err(Error::Config(format!(
                "softmax shift needs a finite τ, got {t}"
            ))),
            WeightFn::Quantile(p) if !(p > 0.0 && p < 1.0) => Err(Error::Config(format!(
                "quantile must lie in (0, 1), got {p}"
            ))),
            _ => Ok(()),
        }
    }

    /// Whether the weights live in `{0,1}` (as opposed to `{−1,1}`).
    pub fn is_bool(&self) -> bool {
        !matches!(
            self,
            WeightFn::SoftmaxSign | WeightFn::SoftmaxShift(_) | WeightFn::HardSign
        )
    }

    /// Thresholding the raw score at its symmetric center (or at the row
    /// median) balances the two symbols.
    pub fn maximizes_entropy(&self) -> bool {
        match *self {
            WeightFn::BiAttentionBool | WeightFn::HardSign => true,
            WeightFn::Quantile(p) => p == 0.5,
            _ => false,
        }
    }

    fn threshold_rule(&self) -> Option<ThresholdVariant> {
        match *self {
            WeightFn::MeanShift => Some(ThresholdVariant::MeanShift),
            WeightFn::Quantile(p) => Some(ThresholdVariant::Quantile(p)),
            WeightFn::Asym => Some(ThresholdVariant::Asym),
            _ => None,
        }
    }
}

impl fmt::Display for WeightFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WeightFn::SoftmaxSign => write!(f, "softmax-sign"),
            WeightFn::SoftmaxBool => write!(f, "softmax-bool"),
            WeightFn::SoftmaxShift(t) => write!(f, "softmax-shift:{t}"),
            WeightFn::BiAttentionBool => write!(f, "bool"),
            WeightFn::HardSign => write!(f, "hard-sign"),
            WeightFn::MeanShift => write!(f, "mean-shift"),
            WeightFn::Quantile(p) => write!(f, "quantile:{p}"),
            WeightFn::Asym => write!(f, "asym"),
        }
    }
}

impl FromStr for WeightFn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let number = |what: &str| -> Result<f64> {
            let a =
                arg.ok_or_else(|| Error::Config(format!("{name} needs {what}, e.g. {name}:0.5")))?;
            a.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad {what} {a:?}")))
        };
        let wf = match name.trim() {
            "softmax-sign" => WeightFn::SoftmaxSign,
            "softmax-bool" => WeightFn::SoftmaxBool,
            "softmax-shift" => WeightFn::SoftmaxShift(number("τ")?),
            "bool" | "bi-attention" => WeightFn::BiAttentionBool,
            "hard-sign" => WeightFn::HardSign,
            "mean-shift" => WeightFn::MeanShift,
            "quantile" => WeightFn::Quantile(number("p")?),
            "asym" => WeightFn::Asym,
            other => {
                return Err(Error::Config(format!(
                    "unknown attention weight function {other:?}"
                )))
            }
        };
        wf.validate()?;
        Ok(wf)
    }
}

/// Where the clip window of the attention STE is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum StePlacement {
    /// On the scaled score `A`.
    #[default]
    PostScale,
    /// On the unscaled product `B_Q·B_Kᵀ`.
    PreScale,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionVariant {
    pub weight_fn: WeightFn,
    #[serde(default)]
    pub placement: StePlacement,
}

impl AttentionVariant {
    pub fn new(weight_fn: WeightFn) -> Self {
        Self {
            weight_fn,
            placement: StePlacement::default(),
        }
    }

    pub fn maximize_entropy(&self) -> bool {
        self.weight_fn.maximizes_entropy()
    }

    fn window(&self, clip: SteWindow, head_dim: usize) -> Result<SteWindow> {
        match self.placement {
            StePlacement::PostScale => Ok(clip),
            StePlacement::PreScale => SteWindow::new(clip.clip() / (head_dim as f64).sqrt()),
        }
    }
}

fn check_mask(mask: &[bool], keys: usize) -> Result<()> {
    if mask.len() != keys {
        return shape_err(format!("mask of length {} for {keys} keys", mask.len()));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::Domain("every position is masked".into()));
    }
    Ok(())
}

/// `(1/√D)·B_Q·B_Kᵀ` with masked key columns set to [`MASK_SENTINEL`].
pub fn attention_score(b_q: &Matrix, b_k: &Matrix, mask: &[bool]) -> Result<Matrix> {
    if b_q.cols() != b_k.cols() {
        return shape_err(format!(
            "query dim {} vs key dim {}",
            b_q.cols(),
            b_k.cols()
        ));
    }
    if b_q.cols() == 0 {
        return Err(Error::Domain("attention over a zero-width head".into()));
    }
    check_mask(mask, b_k.rows())?;
    let mut a = b_q.matmul_t(b_k)?.scale(1.0 / (b_q.cols() as f64).sqrt());
    apply_mask(&mut a, mask, MASK_SENTINEL);
    Ok(a)
}

fn apply_mask(a: &mut Matrix, mask: &[bool], fill: f64) {
    for i in 0..a.rows() {
        for (v, &keep) in a.row_mut(i).iter_mut().zip(mask) {
            if !keep {
                *v = fill;
            }
        }
    }
}

/// Per-row thresholds computed over unmasked entries only.
fn row_thresholds(x: &Matrix, mask: &[bool], rule: ThresholdVariant) -> Vec<f64> {
    (0..x.rows())
        .map(|i| {
            let kept: Vec<f64> = x
                .row(i)
                .iter()
                .zip(mask)
                .filter(|(_, &m)| m)
                .map(|(&v, _)| v)
                .collect();
            rule.threshold(&kept)
        })
        .collect()
}

/// Records the binarized attention weights of a masked score matrix. Masked
/// positions come out as 0 for every scheme, with no gradient.
pub fn weights_on_tape<'t>(
    a: DualTensor<'t>,
    mask: &[bool],
    wf: WeightFn,
    window: SteWindow,
) -> Result<DualTensor<'t>> {
    wf.validate()?;
    check_mask(mask, a.shape().1)?;
    let w = match wf {
        WeightFn::SoftmaxSign => a.softmax_rows().sign_ste(window)?,
        WeightFn::SoftmaxBool => a.softmax_rows().bool_ste(window)?,
        WeightFn::SoftmaxShift(tau) => {
            let s = a.softmax_rows();
            let (r, c) = s.shape();
            s.sub(&a.tape().constant(Matrix::filled(r, c, tau)))?
                .sign_ste(window)?
        }
        WeightFn::BiAttentionBool => a.bool_ste(window)?,
        WeightFn::HardSign => a.sign_ste(window)?,
        WeightFn::MeanShift | WeightFn::Quantile(_) | WeightFn::Asym => {
            let s = a.softmax_rows();
            let rule = wf.threshold_rule().expect("threshold scheme");
            let t = row_thresholds(&s.value(), mask, rule);
            s.threshold_bool_ste(&t, window)?
        }
    };
    w.mask_cols(mask, 0.0)
}

/// Binarized attention weights for a masked score matrix.
pub fn binary_weight(a: &Matrix, mask: &[bool], variant: &AttentionVariant) -> Result<Matrix> {
    let tape = Tape::new();
    Ok(weights_on_tape(
        tape.constant(a.clone()),
        mask,
        variant.weight_fn,
        SteWindow::default(),
    )?
    .value())
}

/// Binary entropy `−p log₂ p − (1−p) log₂(1−p)`.
pub fn entropy_of_fraction(p: f64) -> f64 {
    let h = |q: f64| if q <= 0.0 { 0.0 } else { -q * q.log2() };
    h(p) + h(1.0 - p)
}

/// Entropy in bits of a `{0,1}` or `{−1,1}` tensor, with `p` the fraction of
/// the positive symbol.
pub fn binary_entropy(b: &[f64]) -> Result<f64> {
    if b.is_empty() {
        return Err(Error::Domain("entropy of an empty tensor".into()));
    }
    let zero_one = b.iter().all(|&v| v == 0.0 || v == 1.0);
    let pm_one = b.iter().all(|&v| v == -1.0 || v == 1.0);
    if !zero_one && !pm_one {
        return Err(Error::Domain("entropy of a non-binary tensor".into()));
    }
    let ones = b.iter().filter(|&&v| v == 1.0).count();
    let n = b.len() as f64;
    let h = |c: usize| {
        if c == 0 {
            0.0
        } else {
            -(c as f64 / n) * (c as f64 / n).log2()
        }
    };
    Ok(h(ones) + h(b.len() - ones))
}

/// Entropy of attention weights over unmasked columns.
pub fn masked_entropy(weights: &Matrix, mask: &[bool]) -> Result<f64> {
    check_mask(mask, weights.cols())?;
    let kept: Vec<f64> = (0..weights.rows())
        .flat_map(|i| {
            weights
                .row(i)
                .iter()
                .zip(mask)
                .filter(|(_, &m)| m)
                .map(|(&v, _)| v)
                .collect::<Vec<_>>()
        })
        .collect();
    binary_entropy(&kept)
}

/// Single-head Bi-Attention inputs.
#[derive(Debug, Clone)]
pub struct AttentionInputs<'t> {
    pub q: DualTensor<'t>,
    pub k: DualTensor<'t>,
    pub v: DualTensor<'t>,
    pub mask: Vec<bool>,
}

/// `bool(A) · sign(V)` with `A = (1/√D)·sign(Q)·sign(K)ᵀ`, recorded with STE
/// nodes.
pub fn bi_attention<'t>(inputs: &AttentionInputs<'t>, window: SteWindow) -> Result<DualTensor<'t>> {
    let variant = AttentionVariant::new(WeightFn::BiAttentionBool);
    let out = multi_head_attention(
        inputs.q,
        inputs.k,
        inputs.v,
        &inputs.mask,
        1,
        AttentionMode::Binarized(variant),
        window,
    )?;
    Ok(out.context)
}

/// Bi-Attention on packed operands: `xnor` scores and a BAMM product.
pub fn bi_attention_packed(q: &Matrix, k: &Matrix, v: &Matrix, mask: &[bool]) -> Result<Matrix> {
    let variant = AttentionVariant::new(WeightFn::BiAttentionBool);
    Ok(attention_packed(q, k, v, mask, 1, &variant)?.context)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AttentionMode {
    /// `softmax(A)·V` on real-valued `Q`, `K`, `V`.
    FullPrecision,
    /// Binarized `Q`, `K`, `V` and binarized weights.
    Binarized(AttentionVariant),
}

pub struct AttentionOutput<'t> {
    /// Concatenated head outputs `[N×D]`.
    pub context: DualTensor<'t>,
    /// Scaled scores per head, before masking.
    pub scores: Vec<DualTensor<'t>>,
    /// Attention weights per head.
    pub weights: Vec<Matrix>,
    /// Entropy of the binarized weights per head; empty at full precision.
    pub head_entropy: Vec<f64>,
}

/// Multi-head attention over `[N×D]` projections split into `heads` slices.
pub fn multi_head_attention<'t>(
    q: DualTensor<'t>,
    k: DualTensor<'t>,
    v: DualTensor<'t>,
    mask: &[bool],
    heads: usize,
    mode: AttentionMode,
    window: SteWindow,
) -> Result<AttentionOutput<'t>> {
    let (n, d) = q.shape();
    if k.shape() != v.shape() || k.shape().1 != d {
        return shape_err(format!(
            "q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        ));
    }
    if heads == 0 || d % heads != 0 || d == 0 {
        return Err(Error::Domain(format!(
            "hidden size {d} does not split into {heads} heads"
        )));
    }
    check_mask(mask, k.shape().0)?;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (q, k, v) = match mode {
        AttentionMode::FullPrecision => (q, k, v),
        AttentionMode::Binarized(_) => (
            q.sign_ste(window)?,
            k.sign_ste(window)?,
            v.sign_ste(window)?,
        ),
    };
    let mut contexts = Vec::with_capacity(heads);
    let mut scores = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    let mut head_entropy = Vec::new();
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = q.slice_cols(lo, hi)?;
        let kh = k.slice_cols(lo, hi)?;
        let vh = v.slice_cols(lo, hi)?;
        let a = qh.matmul_t(&kh)?.scale(scale);
        let masked = a.mask_cols(mask, MASK_SENTINEL)?;
        let w = match mode {
            AttentionMode::FullPrecision => masked.softmax_rows(),
            AttentionMode::Binarized(variant) => {
                let w =
                    weights_on_tape(masked, mask, variant.weight_fn, variant.window(window, dh)?)?;
                head_entropy.push(masked_entropy(&w.value(), mask)?);
                w
            }
        };
        contexts.push(w.matmul(&vh)?);
        scores.push(a);
        weights.push(w.value());
    }
    debug_assert_eq!(contexts[0].shape(), (n, dh));
    let context = if heads == 1 {
        contexts[0]
    } else {
        DualTensor::concat_cols(&contexts)?
    };
    Ok(AttentionOutput {
        context,
        scores,
        weights,
        head_entropy,
    })
}

/// Packed-path result of [`attention_packed`].
#[derive(Debug, Clone)]
pub struct PackedAttention {
    pub context: Matrix,
    /// Weights per head over unmasked keys only.
    pub weights: Vec<Matrix>,
}

/// Binarized multi-head attention on bit-packed operands. Scores come from
/// `xnor_matmul`; `{0,1}` weights use BAMM, `±1` weights another xnor
/// product. Masked keys are dropped rather than carried as sentinels.
pub fn attention_packed(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    mask: &[bool],
    heads: usize,
    variant: &AttentionVariant,
) -> Result<PackedAttention> {
    let d = q.cols();
    if k.shape() != v.shape() || k.cols() != d {
        return shape_err(format!(
            "q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        ));
    }
    if heads == 0 || !d.is_multiple_of(heads) || d == 0 {
        return Err(Error::Domain(format!(
            "hidden size {d} does not split into {heads} heads"
        )));
    }
    check_mask(mask, k.rows())?;
    let keep: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    let all = vec![true; keep.len()];
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut parts = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let b_q = bitcore::pack(&q.slice_cols(lo, hi)?, Encoding::PlusMinusOne)?;
        let b_k = bitcore::pack(
            &k.slice_cols(lo, hi)?.select_rows(&keep)?,
            Encoding::PlusMinusOne,
        )?;
        let b_v_t = bitcore::pack(
            &v.slice_cols(lo, hi)?.select_rows(&keep)?,
            Encoding::PlusMinusOne,
        )?
        .transpose();
        let a = bitcore::xnor_matmul(&b_q, &b_k)?.scaled(scale);
        let w = binary_weight(&a, &all, variant)?;
        let ctx = if variant.weight_fn.is_bool() {
            bitcore::bamm_transposed(&bitcore::pack(&w, Encoding::ZeroOne)?, &b_v_t)?
        } else {
            bitcore::xnor_matmul(&bitcore::pack(&w, Encoding::PlusMinusOne)?, &b_v_t)?
        };
        parts.push(ctx.to_matrix());
        weights.push(w);
    }
    let refs: Vec<&Matrix> = parts.iter().collect();
    Ok(PackedAttention {
        context: Matrix::concat_cols(&refs)?,
        weights,
    })
}
