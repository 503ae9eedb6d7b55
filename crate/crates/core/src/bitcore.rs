//! Packed 1-bit matrices and the two bitwise products used by binarized
//! attention: the xnor/popcount GEMM (`⊗`) and the bitwise-affine product
//! (BAMM, `⊠`) between a `{0,1}` matrix and a `±1` matrix.
//!
//! Rows are packed little-endian into 64-bit words: logical column `j` of a
//! row lives in word `j / 64`, bit `j % 64`. Bits past `cols` in the final
//! word of every row are always zero.

use crate::error::{shape_err, Error, Result};
use crate::tensor::Matrix;
use rayon::prelude::*;

pub const WORD_BITS: usize = 64;

/// Largest inner dimension the 32-bit accumulators support.
pub const MAX_INNER_DIM: usize = 1 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Encoding {
    /// `+1` is stored as bit 1 and `-1` as bit 0.
    PlusMinusOne,
    /// The literal bit.
    ZeroOne,
}

impl Encoding {
    fn logical(self, bit: bool) -> f64 {
        match (self, bit) {
            (_, true) => 1.0,
            (Encoding::PlusMinusOne, false) => -1.0,
            (Encoding::ZeroOne, false) => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedBitMatrix {
    rows: usize,
    cols: usize,
    encoding: Encoding,
    words_per_row: usize,
    words: Vec<u64>,
}

#[inline]
fn words_for(cols: usize) -> usize {
    cols.div_ceil(WORD_BITS)
}

/// Mask of meaningful bits in the last word of a row.
#[inline]
fn tail_mask(cols: usize) -> u64 {
    match cols % WORD_BITS {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

impl PackedBitMatrix {
    /// All-zero-bit matrix (`-1` everywhere for `PlusMinusOne`, `0` for `ZeroOne`).
    pub fn zeros(rows: usize, cols: usize, encoding: Encoding) -> Self {
        let words_per_row = words_for(cols);
        Self {
            rows,
            cols,
            encoding,
            words_per_row,
            words: vec![0; rows * words_per_row],
        }
    }

    /// Builds a matrix from a bit predicate over `(row, col)`.
    pub fn from_fn(
        rows: usize,
        cols: usize,
        encoding: Encoding,
        mut bit: impl FnMut(usize, usize) -> bool,
    ) -> Self {
        let mut m = Self::zeros(rows, cols, encoding);
        for i in 0..rows {
            for j in 0..cols {
                if bit(i, j) {
                    m.words[i * m.words_per_row + j / WORD_BITS] |= 1u64 << (j % WORD_BITS);
                }
            }
        }
        m
    }

    /// Builds a matrix from raw row words. Padding bits are cleared.
    pub fn from_words(
        rows: usize,
        cols: usize,
        encoding: Encoding,
        mut words: Vec<u64>,
    ) -> Result<Self> {
        let words_per_row = words_for(cols);
        if words.len() != rows * words_per_row {
            return shape_err(format!(
                "{rows}x{cols} needs {} words, got {}",
                rows * words_per_row,
                words.len()
            ));
        }
        if words_per_row > 0 {
            let mask = tail_mask(cols);
            for r in 0..rows {
                words[r * words_per_row + words_per_row - 1] &= mask;
            }
        }
        Ok(Self {
            rows,
            cols,
            encoding,
            words_per_row,
            words,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn encoding(&self) -> Encoding {
        self.encoding
    }

    pub fn words_per_row(&self) -> usize {
        self.words_per_row
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn row_words(&self, i: usize) -> &[u64] {
        &self.words[i * self.words_per_row..(i + 1) * self.words_per_row]
    }

    #[inline]
    pub fn bit(&self, i: usize, j: usize) -> bool {
        (self.words[i * self.words_per_row + j / WORD_BITS] >> (j % WORD_BITS)) & 1 == 1
    }

    /// Logical value at `(i, j)` under the matrix's encoding.
    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.encoding.logical(self.bit(i, j))
    }

    pub fn count_ones(&self) -> u64 {
        self.words.iter().map(|w| u64::from(w.count_ones())).sum()
    }

    /// Same bits read under another encoding. Reading a `{0,1}` matrix as
    /// `±1` gives the hardware form where 0 becomes -1.
    pub fn reinterpret(&self, encoding: Encoding) -> Self {
        Self {
            encoding,
            ..self.clone()
        }
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, self.encoding, |i, j| self.bit(j, i))
    }

    /// True when every padding bit is zero.
    pub fn padding_is_clear(&self) -> bool {
        if self.words_per_row == 0 {
            return true;
        }
        let mask = tail_mask(self.cols);
        (0..self.rows)
            .all(|r| self.words[r * self.words_per_row + self.words_per_row - 1] & !mask == 0)
    }
}

/// Packs a float matrix. `PlusMinusOne` sets a bit iff the value is `>= 0`;
/// `ZeroOne` requires every value to be exactly 0 or 1.
pub fn pack(values: &Matrix, encoding: Encoding) -> Result<PackedBitMatrix> {
    if let Some(bad) = values.data().iter().find(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("cannot pack non-finite value {bad}")));
    }
    if encoding == Encoding::ZeroOne {
        if let Some(bad) = values.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::Domain(format!("ZeroOne encoding got {bad}")));
        }
    }
    let bit = |v: f64| match encoding {
        Encoding::PlusMinusOne => v >= 0.0,
        Encoding::ZeroOne => v == 1.0,
    };
    Ok(PackedBitMatrix::from_fn(
        values.rows(),
        values.cols(),
        encoding,
        |i, j| bit(values.get(i, j)),
    ))
}

/// Logical values as a float matrix.
pub fn unpack(m: &PackedBitMatrix) -> Matrix {
    Matrix::from_fn(m.rows, m.cols, |i, j| m.value(i, j))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntMatrix {
    rows: usize,
    cols: usize,
    values: Vec<i32>,
}

impl IntMatrix {
    pub fn from_vec(rows: usize, cols: usize, values: Vec<i32>) -> Result<Self> {
        if values.len() != rows * cols {
            return shape_err(format!(
                "{rows}x{cols} needs {} values, got {}",
                rows * cols,
                values.len()
            ));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[i32] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> i32 {
        self.values[i * self.cols + j]
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |i, j| f64::from(self.get(i, j)))
    }

    /// `scale * self` as floats; a single rounding per entry.
    pub fn scaled(&self, scale: f64) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |i, j| {
            scale * f64::from(self.get(i, j))
        })
    }
}

fn check_inner(k: usize) -> Result<()> {
    if k > MAX_INNER_DIM {
        return Err(Error::Domain(format!(
            "inner dimension {k} exceeds {MAX_INNER_DIM}"
        )));
    }
    Ok(())
}

/// `±1` dot product of two packed rows of logical length `k`.
#[inline]
fn xnor_dot(a: &[u64], b: &[u64], k: usize, mask: u64) -> i32 {
    let last = a.len().saturating_sub(1);
    let mut agree = 0u32;
    for (w, (x, y)) in a.iter().zip(b).enumerate() {
        let mut same = !(x ^ y);
        if w == last {
            same &= mask;
        }
        agree += same.count_ones();
    }
    2 * agree as i32 - k as i32
}

/// `a ⊗ b_tᵀ` for `±1` operands: entry `(i, j)` is the dot product of row `i`
/// of `a` with row `j` of `b_t`, computed as `2·popcount(xnor) − k`.
pub fn xnor_matmul(a: &PackedBitMatrix, b_t: &PackedBitMatrix) -> Result<IntMatrix> {
    if a.encoding != Encoding::PlusMinusOne || b_t.encoding != Encoding::PlusMinusOne {
        return Err(Error::Domain(
            "xnor_matmul needs PlusMinusOne operands".into(),
        ));
    }
    if a.cols != b_t.cols {
        return shape_err(format!("xnor_matmul inner dims {} vs {}", a.cols, b_t.cols));
    }
    let k = a.cols;
    check_inner(k)?;
    let (m, n) = (a.rows, b_t.rows);
    let mask = tail_mask(k);
    let mut values = vec![0i32; m * n];
    let fill_row = |(i, out): (usize, &mut [i32])| {
        let ra = a.row_words(i);
        for (j, o) in out.iter_mut().enumerate() {
            *o = xnor_dot(ra, b_t.row_words(j), k, mask);
        }
    };
    if n > 0 {
        // Rows are independent; small products are not worth the thread hop.
        if m * n * a.words_per_row >= 1 << 14 {
            values.par_chunks_mut(n).enumerate().for_each(fill_row);
        } else {
            values.chunks_mut(n).enumerate().for_each(fill_row);
        }
    }
    Ok(IntMatrix {
        rows: m,
        cols: n,
        values,
    })
}

/// Column sums of a `±1` matrix given in transposed (row) form.
fn signed_row_sums(m_t: &PackedBitMatrix) -> Vec<i32> {
    (0..m_t.rows)
        .map(|j| {
            let ones: u32 = m_t.row_words(j).iter().map(|w| w.count_ones()).sum();
            2 * ones as i32 - m_t.cols as i32
        })
        .collect()
}

fn check_bamm_operands(b_a: &PackedBitMatrix, b_v_t: &PackedBitMatrix) -> Result<()> {
    if b_a.encoding != Encoding::ZeroOne {
        return Err(Error::Domain(
            "BAMM attention weights must be ZeroOne".into(),
        ));
    }
    if b_v_t.encoding != Encoding::PlusMinusOne {
        return Err(Error::Domain("BAMM values must be PlusMinusOne".into()));
    }
    if b_a.cols != b_v_t.cols {
        return shape_err(format!("bamm inner dims {} vs {}", b_a.cols, b_v_t.cols));
    }
    Ok(())
}

/// Pre-shift BAMM sum `B_A′ ⊗ B_V + colsum(B_V)`, with `b_v_t` the values in
/// transposed form `[n×k]`. Every entry is even.
pub fn bamm_affine_sum(b_a: &PackedBitMatrix, b_v_t: &PackedBitMatrix) -> Result<IntMatrix> {
    check_bamm_operands(b_a, b_v_t)?;
    let hardware = b_a.reinterpret(Encoding::PlusMinusOne);
    let mut prod = xnor_matmul(&hardware, b_v_t)?;
    let col_sums = signed_row_sums(b_v_t);
    let n = prod.cols;
    for row in prod.values.chunks_mut(n.max(1)) {
        for (v, c) in row.iter_mut().zip(&col_sums) {
            *v += c;
        }
    }
    Ok(prod)
}

/// BAMM with values already transposed to `[n×k]`.
pub fn bamm_transposed(b_a: &PackedBitMatrix, b_v_t: &PackedBitMatrix) -> Result<IntMatrix> {
    let mut sum = bamm_affine_sum(b_a, b_v_t)?;
    for v in &mut sum.values {
        debug_assert_eq!(*v & 1, 0, "BAMM affine sum must be even");
        *v >>= 1;
    }
    Ok(sum)
}

/// `bool(A) ⊠ B_V`: product of a `{0,1}` matrix `[m×k]` with a `±1` matrix
/// `[k×n]`, equal to the ordinary product of the logical values.
///
/// With `B_A′` the `±1` reading of the same bits, `bool(A) = (B_A′ + 1)/2`,
/// so the product is `(B_A′ ⊗ B_V + colsum(B_V)) ≫ 1`.
pub fn bamm(b_a: &PackedBitMatrix, b_v: &PackedBitMatrix) -> Result<IntMatrix> {
    if b_a.cols != b_v.rows {
        return shape_err(format!("bamm inner dims {} vs {}", b_a.cols, b_v.rows));
    }
    bamm_transposed(b_a, &b_v.transpose())
}

/// The affine correction written with `B_A′ ⊗ 1` (row sums of `B_A′`) in
/// place of the value column sums. This computes `B_A′ · (B_V + 1) / 2`,
/// which is *not* `bool(A) · B_V`; kept only to demonstrate the difference.
pub fn bamm_row_corrected(b_a: &PackedBitMatrix, b_v: &PackedBitMatrix) -> Result<IntMatrix> {
    if b_a.cols != b_v.rows {
        return shape_err(format!("bamm inner dims {} vs {}", b_a.cols, b_v.rows));
    }
    let b_v_t = b_v.transpose();
    check_bamm_operands(b_a, &b_v_t)?;
    let hardware = b_a.reinterpret(Encoding::PlusMinusOne);
    let mut prod = xnor_matmul(&hardware, &b_v_t)?;
    let row_sums = signed_row_sums(&hardware);
    let n = prod.cols;
    for (row, r) in prod.values.chunks_mut(n.max(1)).zip(&row_sums) {
        for v in row.iter_mut() {
            *v = (*v + r) >> 1;
        }
    }
    Ok(prod)
}
