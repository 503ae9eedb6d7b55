//! Scalar and tensor quantizers: `sign`/`bool` with straight-through
//! backward, zero-mean weight binarization with an ℓ1 scaling factor, the
//! Q-bit symmetric quantizer, and threshold rules for attention weights.

use crate::bitcore::{pack, Encoding, PackedBitMatrix};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Matrix;
use serde::{Deserialize, Serialize};

/// Half-width of the interval where the straight-through estimator passes
/// gradients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteWindow {
    clip: f64,
}

impl SteWindow {
    pub fn new(clip: f64) -> Result<Self> {
        if !(clip > 0.0 && clip.is_finite()) {
            return Err(Error::Config(format!(
                "STE clip must be positive, got {clip}"
            )));
        }
        Ok(Self { clip })
    }

    pub fn clip(&self) -> f64 {
        self.clip
    }

    #[inline]
    pub fn passes(&self, x: f64) -> bool {
        x.abs() <= self.clip
    }
}

impl Default for SteWindow {
    fn default() -> Self {
        Self { clip: 1.0 }
    }
}

#[inline]
pub fn sign(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

#[inline]
pub fn bool01(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        0.0
    }
}

fn reject_nan(x: &Matrix) -> Result<()> {
    if x.data().iter().any(|v| v.is_nan()) {
        return Err(Error::Domain("NaN input to binarizer".into()));
    }
    Ok(())
}

pub fn sign_fwd(x: &Matrix) -> Result<Matrix> {
    reject_nan(x)?;
    Ok(x.map(sign))
}

pub fn bool_fwd(x: &Matrix) -> Result<Matrix> {
    reject_nan(x)?;
    Ok(x.map(bool01))
}

/// Straight-through backward: `upstream` where `|x| <= clip`, else 0.
pub fn sign_bwd(x: &Matrix, upstream: &Matrix, window: SteWindow) -> Result<Matrix> {
    if x.shape() != upstream.shape() {
        return shape_err(format!(
            "STE input {:?} vs upstream {:?}",
            x.shape(),
            upstream.shape()
        ));
    }
    x.zip_map(upstream, |v, g| if window.passes(v) { g } else { 0.0 })
}

/// `bool` shares the `sign` surrogate: derivative 1 inside the window.
pub fn bool_bwd(x: &Matrix, upstream: &Matrix, window: SteWindow) -> Result<Matrix> {
    sign_bwd(x, upstream, window)
}

/// ℓ1 mean `||W||₁ / n`.
pub fn weight_scale(w: &Matrix) -> f64 {
    w.l1_norm() / w.len() as f64
}

/// `sign(W − μ(W))` as `±1` floats.
pub fn zero_mean_signs(w: &Matrix) -> Matrix {
    let mu = w.mean();
    w.map(|v| sign(v - mu))
}

/// Zero-mean binarization of a weight matrix: bits of `sign(W − μ(W))` and
/// the scaling factor `α = ||W||₁ / n`.
pub fn binarize_weight(w: &Matrix) -> Result<(PackedBitMatrix, f64)> {
    if w.is_empty() {
        return Err(Error::Domain("cannot binarize an empty weight".into()));
    }
    if !w.all_finite() {
        return Err(Error::Domain("non-finite weight".into()));
    }
    Ok((
        pack(&zero_mean_signs(w), Encoding::PlusMinusOne)?,
        weight_scale(w),
    ))
}

/// Per-row zero-mean binarization, used for embedding tables: row `t`
/// becomes `α_t · sign(e_t − μ(e_t))`.
pub fn binarize_rows(w: &Matrix) -> Matrix {
    let mut out = w.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let n = row.len() as f64;
        let mu = row.iter().sum::<f64>() / n;
        let alpha = row.iter().map(|v| v.abs()).sum::<f64>() / n;
        for v in row.iter_mut() {
            *v = alpha * sign(*v - mu);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantizerSpec {
    bits: u32,
    range: f64,
}

impl QuantizerSpec {
    pub fn new(bits: u32, range: f64) -> Result<Self> {
        if !(1..=8).contains(&bits) {
            return Err(Error::Domain(format!(
                "quantizer bits must be in [1, 8], got {bits}"
            )));
        }
        if !(range > 0.0 && range.is_finite()) {
            return Err(Error::Domain(format!(
                "quantizer range must be positive, got {range}"
            )));
        }
        Ok(Self { bits, range })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn range(&self) -> f64 {
        self.range
    }

    /// Symmetric Q-bit quantization of one value. `Q = 1` is `L·sign(x)`;
    /// otherwise `[−L, L]` is cut into `2^Q − 1` intervals with
    /// round-half-up, and values outside are clamped.
    pub fn quantize(&self, x: f64) -> f64 {
        let l = self.range;
        if self.bits == 1 {
            return l * sign(x);
        }
        if x > l {
            return l;
        }
        if x < -l {
            return -l;
        }
        let steps = f64::from((1u32 << self.bits) - 1);
        let q = ((steps * x / (2.0 * l)) + 0.5).floor() * (2.0 * l / steps);
        q.clamp(-l, l)
    }
}

pub fn quantize_q(x: &Matrix, spec: QuantizerSpec) -> Matrix {
    x.map(|v| spec.quantize(v))
}

/// Threshold rules that turn a real row into `{0,1}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ThresholdVariant {
    /// `bool(x)`
    FixedZero,
    /// Degenerate asymmetric 1-bit quantizer: threshold at the max/min midpoint.
    Asym,
    /// `bool(x − mean)`
    MeanShift,
    /// `bool(x − quantile_p)`
    Quantile(f64),
}

impl ThresholdVariant {
    pub fn validate(&self) -> Result<()> {
        if let ThresholdVariant::Quantile(p) = *self {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::Domain(format!(
                    "quantile must lie in (0, 1), got {p}"
                )));
            }
        }
        Ok(())
    }

    /// Threshold for one row; `values` must be non-empty.
    pub fn threshold(&self, values: &[f64]) -> f64 {
        match *self {
            ThresholdVariant::FixedZero => 0.0,
            ThresholdVariant::Asym => {
                let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let min = values.iter().copied().fold(f64::INFINITY, f64::min);
                0.5 * (max + min)
            }
            ThresholdVariant::MeanShift => values.iter().sum::<f64>() / values.len() as f64,
            ThresholdVariant::Quantile(p) => quantile(values, p),
        }
    }
}

/// Linearly interpolated quantile (position `(k − 1)·p` in sorted order).
pub fn quantile(values: &[f64], p: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = (sorted.len() - 1) as f64 * p;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Applies a threshold rule to every row of `x`.
pub fn threshold_variants(x: &Matrix, variant: ThresholdVariant) -> Result<Matrix> {
    variant.validate()?;
    if x.is_empty() {
        return Err(Error::Domain("threshold of an empty tensor".into()));
    }
    reject_nan(x)?;
    let mut out = x.clone();
    for i in 0..x.rows() {
        let t = variant.threshold(x.row(i));
        for v in out.row_mut(i).iter_mut() {
            *v = bool01(*v - t);
        }
    }
    Ok(out)
}
