//! Numerical experiments behind the binarization analysis, plus the
//! FLOPs/size estimator.
//!
//! Monte Carlo runs split their samples over a fixed number of shards, each
//! with its own ChaCha stream, and merge shard results in shard order; the
//! output depends only on the seed and sample count.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, ChiSquared, ContinuousCDF, Discrete};

use crate::attention::{binary_weight, entropy_of_fraction, AttentionVariant, WeightFn};
use crate::binarize::{quantile, zero_mean_signs, QuantizerSpec};
use crate::error::{Error, Result};
use crate::model::{BinarizationPolicy, TransformerConfig};
use crate::report::{Cell, Table};
use crate::tensor::Matrix;

const SHARDS: u64 = 64;

fn shard_rng(seed: u64, shard: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(shard);
    rng
}

fn shard_sizes(samples: usize) -> Vec<usize> {
    let s = SHARDS as usize;
    (0..s)
        .map(|i| samples / s + usize::from(i < samples % s))
        .collect()
}

/// Runs `f(rng, n)` once per shard in parallel, results in shard order.
fn sharded<T: Send>(
    seed: u64,
    samples: usize,
    f: impl Fn(&mut ChaCha8Rng, usize) -> T + Sync,
) -> Vec<T> {
    shard_sizes(samples)
        .into_par_iter()
        .enumerate()
        .map(|(i, n)| f(&mut shard_rng(seed, i as u64), n))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MismatchSimConfig {
    pub samples: usize,
    pub bits: Vec<u32>,
    /// Quantizer range `L`.
    pub range: f64,
    pub sigma_student: f64,
    pub sigma_teacher: f64,
    pub seed: u64,
}

impl Default for MismatchSimConfig {
    fn default() -> Self {
        Self {
            samples: 1_000_000,
            bits: (1..=8).collect(),
            range: 1.0,
            sigma_student: 1.0,
            sigma_teacher: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MismatchRow {
    pub bits: u32,
    pub rate: f64,
}

/// Fraction of samples where `sign(X − X_T) ≠ sign(quantize_Q(X) − X_T)`
/// with `X ~ N(0, σ₁)`, `X_T ~ N(0, σ₂)`. A zero on either side counts as a
/// match.
pub fn simulate_mismatch(cfg: &MismatchSimConfig) -> Result<Vec<MismatchRow>> {
    if cfg.samples < 10_000 {
        return Err(Error::Config(format!(
            "mismatch simulation needs at least 10^4 samples, got {}",
            cfg.samples
        )));
    }
    if cfg.bits.is_empty() {
        return Err(Error::Config("no bit widths to simulate".into()));
    }
    let specs = cfg
        .bits
        .iter()
        .map(|&q| QuantizerSpec::new(q, cfg.range))
        .collect::<Result<Vec<_>>>()?;
    let student = Normal::new(0.0, cfg.sigma_student).map_err(|e| Error::Config(e.to_string()))?;
    let teacher = Normal::new(0.0, cfg.sigma_teacher).map_err(|e| Error::Config(e.to_string()))?;
    let counts = sharded(cfg.seed, cfg.samples, |rng, n| {
        let mut c = vec![0usize; specs.len()];
        for _ in 0..n {
            let x: f64 = student.sample(rng);
            let xt: f64 = teacher.sample(rng);
            let d = x - xt;
            for (slot, spec) in c.iter_mut().zip(&specs) {
                let dq = spec.quantize(x) - xt;
                if d != 0.0 && dq != 0.0 && (d > 0.0) != (dq > 0.0) {
                    *slot += 1;
                }
            }
        }
        c
    });
    Ok(cfg
        .bits
        .iter()
        .enumerate()
        .map(|(j, &bits)| MismatchRow {
            bits,
            rate: counts.iter().map(|c| c[j]).sum::<usize>() as f64 / cfg.samples as f64,
        })
        .collect())
}

/// Columns `bits, rate`.
pub fn mismatch_table(rows: &[MismatchRow]) -> Result<Table> {
    let mut t = Table::new(["bits", "rate"]);
    for r in rows {
        t.push(vec![r.bits.into(), r.rate.into()])?;
    }
    Ok(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub k: usize,
    pub tau: f64,
}

/// Median of the first softmax output over `k` iid standard normal scores.
pub fn threshold_curve(ks: &[usize], samples: usize, seed: u64) -> Result<Vec<ThresholdRow>> {
    if samples == 0 {
        return Err(Error::Config("threshold curve needs samples".into()));
    }
    ks.iter()
        .enumerate()
        .map(|(j, &k)| {
            if k < 2 {
                return Err(Error::Domain(format!(
                    "threshold curve needs k ≥ 2, got {k}"
                )));
            }
            let firsts: Vec<f64> = sharded(seed.wrapping_add(j as u64), samples, |rng, n| {
                let mut out = Vec::with_capacity(n);
                let mut a = vec![0.0; k];
                for _ in 0..n {
                    a.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
                    let max = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = a.iter().map(|v| (v - max).exp()).sum();
                    out.push((a[0] - max).exp() / z);
                }
                out
            })
            .concat();
            Ok(ThresholdRow {
                k,
                tau: quantile(&firsts, 0.5),
            })
        })
        .collect()
}

/// Columns `k, tau`.
pub fn threshold_table(rows: &[ThresholdRow]) -> Result<Table> {
    let mut t = Table::new(["k", "tau"]);
    for r in rows {
        t.push(vec![r.k.into(), r.tau.into()])?;
    }
    Ok(t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreDistribution {
    pub dim: usize,
    pub samples: usize,
    /// `(score, empirical probability, exact probability)` for each score `2i − D`.
    pub pmf: Vec<(i64, f64, f64)>,
    pub chi_square: f64,
    pub dof: usize,
    pub p_value: f64,
    pub mean: f64,
    pub std: f64,
}

impl ScoreDistribution {
    /// Columns `score, empirical, exact`.
    pub fn table(&self) -> Result<Table> {
        let mut t = Table::new(["score", "empirical", "exact"]);
        for &(s, e, x) in &self.pmf {
            t.push(vec![s.into(), e.into(), x.into()])?;
        }
        Ok(t)
    }
}

/// Samples `A = b_q · b_k` for balanced random `±1` rows of length `D` and
/// compares the histogram with the binomial pmf `0.5^D·C(D, i)`. Tail bins
/// are merged until each expects at least 5 counts before the chi-square
/// test.
pub fn score_distribution_check(
    dim: usize,
    samples: usize,
    seed: u64,
) -> Result<ScoreDistribution> {
    if dim == 0 || samples == 0 {
        return Err(Error::Domain(
            "score distribution needs D ≥ 1 and samples".into(),
        ));
    }
    let words = dim.div_ceil(64);
    let tail = dim % 64;
    let last_mask = if tail == 0 {
        u64::MAX
    } else {
        (1u64 << tail) - 1
    };
    let shards = sharded(seed, samples, |rng, n| {
        let mut hist = vec![0usize; dim + 1];
        for _ in 0..n {
            let mut agree = 0u32;
            for w in 0..words {
                let mask = if w + 1 == words { last_mask } else { u64::MAX };
                let (q, k): (u64, u64) = (rng.random(), rng.random());
                agree += (!(q ^ k) & mask).count_ones();
            }
            hist[agree as usize] += 1;
        }
        hist
    });
    let mut hist = vec![0usize; dim + 1];
    for h in &shards {
        for (a, b) in hist.iter_mut().zip(h) {
            *a += b;
        }
    }
    let binom = Binomial::new(0.5, dim as u64).map_err(|e| Error::Domain(e.to_string()))?;
    let exact: Vec<f64> = (0..=dim).map(|i| binom.pmf(i as u64)).collect();
    let n = samples as f64;
    let pmf: Vec<(i64, f64, f64)> = (0..=dim)
        .map(|i| (2 * i as i64 - dim as i64, hist[i] as f64 / n, exact[i]))
        .collect();
    let mean = pmf.iter().map(|&(s, p, _)| s as f64 * p).sum::<f64>();
    let var = pmf
        .iter()
        .map(|&(s, p, _)| (s as f64 - mean).powi(2) * p)
        .sum::<f64>();

    let bins = merged_bins(&hist, &exact, n);
    let chi_square: f64 = bins.iter().map(|&(o, e)| (o - e).powi(2) / e).sum();
    let dof = bins.len().saturating_sub(1).max(1);
    let p_value = ChiSquared::new(dof as f64)
        .map_err(|e| Error::Domain(e.to_string()))?
        .sf(chi_square);
    Ok(ScoreDistribution {
        dim,
        samples,
        pmf,
        chi_square,
        dof,
        p_value,
        mean,
        std: var.sqrt(),
    })
}

/// `(observed, expected)` counts with sparse tails folded inward.
fn merged_bins(hist: &[usize], exact: &[f64], n: f64) -> Vec<(f64, f64)> {
    let mut bins: Vec<(f64, f64)> = hist
        .iter()
        .zip(exact)
        .map(|(&o, &p)| (o as f64, p * n))
        .collect();
    while bins.len() > 2 && bins[0].1 < 5.0 {
        let (o, e) = bins.remove(0);
        bins[0].0 += o;
        bins[0].1 += e;
    }
    while bins.len() > 2 && bins[bins.len() - 1].1 < 5.0 {
        let (o, e) = bins.pop().expect("non-empty");
        let last = bins.len() - 1;
        bins[last].0 += o;
        bins[last].1 += e;
    }
    bins
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BalanceCheck {
    pub samples: usize,
    pub shift: f64,
    /// Fraction of `+1` in `sign(W)`.
    pub before: f64,
    /// Fraction of `+1` in `sign(W − mean(W))`.
    pub after: f64,
    pub entropy_after: f64,
}

/// Draws `W ~ N(shift, 1)` and measures sign balance with and without mean
/// subtraction.
pub fn balance_check(samples: usize, shift: f64, seed: u64) -> Result<BalanceCheck> {
    if samples < 10_000 {
        return Err(Error::Domain(format!(
            "balance check needs at least 10^4 weights, got {samples}"
        )));
    }
    let dist = Normal::new(shift, 1.0).map_err(|e| Error::Domain(e.to_string()))?;
    let values = sharded(seed, samples, |rng, n| {
        (0..n).map(|_| dist.sample(rng)).collect::<Vec<f64>>()
    })
    .concat();
    let w = Matrix::row_vector(values);
    let positive =
        |m: &Matrix| m.data().iter().filter(|&&v| v >= 0.0).count() as f64 / samples as f64;
    let before = positive(&w);
    let after = positive(&zero_mean_signs(&w));
    Ok(BalanceCheck {
        samples,
        shift,
        before,
        after,
        entropy_after: entropy_of_fraction(after),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyRow {
    pub zero_fraction: f64,
    pub entropy: f64,
}

const ABLATION_SIZE: usize = 10_000;

/// Entropy of a `{0,1}` weight tensor in which exactly a fraction `p` of the
/// entries is zero.
pub fn entropy_ablation(zero_fractions: &[f64]) -> Result<Vec<EntropyRow>> {
    zero_fractions
        .iter()
        .map(|&p| {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::Domain(format!(
                    "zero fraction must lie in (0, 1), got {p}"
                )));
            }
            let zeros = (p * ABLATION_SIZE as f64).round() as usize;
            let tensor: Vec<f64> = (0..ABLATION_SIZE)
                .map(|i| if i < zeros { 0.0 } else { 1.0 })
                .collect();
            Ok(EntropyRow {
                zero_fraction: p,
                entropy: crate::attention::binary_entropy(&tensor)?,
            })
        })
        .collect()
}

/// Columns `zero_fraction, entropy`.
pub fn entropy_table(rows: &[EntropyRow]) -> Result<Table> {
    let mut t = Table::new(["zero_fraction", "entropy"]);
    for r in rows {
        t.push(vec![r.zero_fraction.into(), r.entropy.into()])?;
    }
    Ok(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrderCheck {
    pub rows: usize,
    /// Rows whose selected set is not a top set of the scores.
    pub violations: usize,
}

/// Checks that `sign(softmax(A) − τ)` selects the top-n entries of each
/// random score row.
pub fn order_preservation_check(rows: usize, k: usize, tau: f64, seed: u64) -> Result<OrderCheck> {
    let variant = AttentionVariant::new(WeightFn::SoftmaxShift(tau));
    variant.weight_fn.validate()?;
    let mask = vec![true; k];
    let violations = sharded(seed, rows, |rng, n| -> Result<usize> {
        let mut bad = 0;
        for _ in 0..n {
            let a = Matrix::from_fn(1, k, |_, _| 2.0 * rng.sample::<f64, _>(StandardNormal));
            let w = binary_weight(&a, &mask, &variant)?;
            let picked = |sel: bool| {
                a.row(0)
                    .iter()
                    .zip(w.row(0))
                    .filter(move |(_, &b)| (b > 0.0) == sel)
                    .map(|(&v, _)| v)
            };
            let min_in = picked(true).fold(f64::INFINITY, f64::min);
            let max_out = picked(false).fold(f64::NEG_INFINITY, f64::max);
            if min_in <= max_out {
                bad += 1;
            }
        }
        Ok(bad)
    })
    .into_iter()
    .sum::<Result<usize>>()?;
    Ok(OrderCheck { rows, violations })
}

/// Bit widths of weights, embeddings and activations (`W-E-A`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitAssignment {
    pub weight: u32,
    pub embedding: u32,
    pub activation: u32,
}

impl BitAssignment {
    pub const FULL: Self = Self {
        weight: 32,
        embedding: 32,
        activation: 32,
    };
    pub const BINARY: Self = Self {
        weight: 1,
        embedding: 1,
        activation: 1,
    };

    pub fn new(weight: u32, embedding: u32, activation: u32) -> Result<Self> {
        for b in [weight, embedding, activation] {
            if ![1, 2, 4, 8, 16, 32].contains(&b) {
                return Err(Error::Config(format!("unsupported bit width {b}")));
            }
        }
        Ok(Self {
            weight,
            embedding,
            activation,
        })
    }
}

impl fmt::Display for BitAssignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}-{}", self.weight, self.embedding, self.activation)
    }
}

impl FromStr for BitAssignment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split('-').collect();
        let bad = || Error::Config(format!("bit assignment must look like W-E-A, got {s:?}"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let b = parts
            .iter()
            .map(|p| p.parse::<u32>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(b[0], b[1], b[2])
    }
}

/// Architecture presets for the estimator. Classification heads have two
/// classes.
pub fn arch_preset(name: &str) -> Result<TransformerConfig> {
    let base = TransformerConfig {
        classes: 2,
        type_vocab: 2,
        policy: BinarizationPolicy::BINARIZED,
        ..TransformerConfig::default()
    };
    let cfg = match name {
        "bert-base" => TransformerConfig {
            layers: 12,
            hidden: 768,
            heads: 12,
            ffn_dim: 3072,
            vocab: 30522,
            max_seq: 512,
            ..base
        },
        "tinybert-6l" => TransformerConfig {
            layers: 6,
            hidden: 768,
            heads: 12,
            ffn_dim: 3072,
            vocab: 30522,
            max_seq: 512,
            ..base
        },
        "tinybert-4l" => TransformerConfig {
            layers: 4,
            hidden: 312,
            heads: 12,
            ffn_dim: 1200,
            vocab: 30522,
            max_seq: 512,
            ..base
        },
        "toy" => base,
        other => return Err(Error::Config(format!("unknown architecture {other:?}"))),
    };
    Ok(cfg)
}

pub const ARCH_PRESETS: [&str; 4] = ["bert-base", "tinybert-6l", "tinybert-4l", "toy"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub seq_len: usize,
    pub bits: BitAssignment,
    pub embedding_flops: f64,
    /// All transformer blocks together.
    pub block_flops: f64,
    pub classifier_flops: f64,
    pub flops: f64,
    pub size_bytes: u64,
}

impl CostEstimate {
    pub fn gflops(&self) -> f64 {
        self.flops / 1e9
    }

    pub fn size_mb(&self) -> f64 {
        self.size_bytes as f64 / (1024.0 * 1024.0)
    }
}

/// FLOPs of one multiply of an `m`-bit by an `n`-bit operand on a 64-bit
/// machine. Anything involving a full-precision operand costs one FLOP.
pub fn mul_cost(m: u32, n: u32) -> f64 {
    if m >= 32 || n >= 32 {
        1.0
    } else {
        f64::from(m * n) / 64.0
    }
}

fn packed_bytes(count: usize, bits: u32) -> u64 {
    if bits >= 32 {
        4 * count as u64
    } else {
        (count as u64 * u64::from(bits)).div_ceil(64) * 8
    }
}

/// Inference cost of one sequence of length `seq_len`.
///
/// Per block: the six projections cost `N(4D² + 2DF)` weight×activation
/// multiplies, the score and context products `2N²D` activation×activation
/// multiplies; biases, residual adds and (for quantized weights) the `α`
/// rescale are one FLOP per output. Embedding sums and the classifier stay at
/// full precision. Size counts linear weights and the word table at their bit
/// widths and everything else (positions for `seq_len` rows, token types,
/// norms, biases, classifier) at 4 bytes.
pub fn estimate_cost(
    cfg: &TransformerConfig,
    bits: BitAssignment,
    seq_len: usize,
) -> Result<CostEstimate> {
    BitAssignment::new(bits.weight, bits.embedding, bits.activation)?;
    if seq_len == 0 || cfg.hidden == 0 || cfg.layers == 0 {
        return Err(Error::Config("cost estimate needs positive sizes".into()));
    }
    let (n, d, f, l) = (
        seq_len as f64,
        cfg.hidden as f64,
        cfg.ffn_dim as f64,
        cfg.layers as f64,
    );
    let outputs = n * (4.0 * d + f + d);
    let linear = n * (4.0 * d * d + 2.0 * d * f) * mul_cost(bits.weight, bits.activation);
    let attention = 2.0 * n * n * d * mul_cost(bits.activation, bits.activation);
    let rescale = if bits.weight < 32 { outputs } else { 0.0 };
    let block = linear + attention + outputs + 2.0 * n * d + rescale;
    let embedding_flops = 2.0 * n * d;
    let classifier_flops = d * cfg.classes as f64;

    let (di, fi) = (cfg.hidden, cfg.ffn_dim);
    let linear_weights = cfg.layers * (4 * di * di + 2 * di * fi);
    let block_fp = cfg.layers * ((4 * di + fi + di) + 4 * di);
    let embed_fp = seq_len * di + cfg.type_vocab * di + 2 * di;
    let classifier = di * cfg.classes + cfg.classes;
    let size_bytes = packed_bytes(linear_weights, bits.weight)
        + packed_bytes(cfg.vocab * di, bits.embedding)
        + packed_bytes(block_fp + embed_fp + classifier, 32);

    let block_flops = l * block;
    Ok(CostEstimate {
        seq_len,
        bits,
        embedding_flops,
        block_flops,
        classifier_flops,
        flops: embedding_flops + block_flops + classifier_flops,
        size_bytes,
    })
}

/// Sequence length whose full-precision FLOPs come closest to `target_flops`.
pub fn calibrate_seq_len(cfg: &TransformerConfig, target_flops: f64) -> Result<usize> {
    let flops = |n: usize| estimate_cost(cfg, BitAssignment::FULL, n).map(|c| c.flops);
    let (mut lo, mut hi) = (1usize, 1usize << 20);
    if flops(hi)? < target_flops {
        return Err(Error::Domain(format!(
            "target {target_flops} FLOPs is out of reach"
        )));
    }
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if flops(mid)? < target_flops {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(
        if (flops(lo)? - target_flops).abs() <= (flops(hi)? - target_flops).abs() {
            lo
        } else {
            hi
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostComparison {
    pub full: CostEstimate,
    pub quantized: CostEstimate,
    pub flops_ratio: f64,
    pub size_ratio: f64,
}

pub fn compare_cost(
    cfg: &TransformerConfig,
    bits: BitAssignment,
    seq_len: usize,
) -> Result<CostComparison> {
    let full = estimate_cost(cfg, BitAssignment::FULL, seq_len)?;
    let quantized = estimate_cost(cfg, bits, seq_len)?;
    Ok(CostComparison {
        full,
        quantized,
        flops_ratio: full.flops / quantized.flops,
        size_ratio: full.size_bytes as f64 / quantized.size_bytes as f64,
    })
}

/// Columns `bits, seq_len, gflops, size_mb, embedding_flops, block_flops,
/// classifier_flops`.
pub fn cost_table(rows: &[CostEstimate]) -> Result<Table> {
    let mut t = Table::new([
        "bits",
        "seq_len",
        "gflops",
        "size_mb",
        "embedding_flops",
        "block_flops",
        "classifier_flops",
    ]);
    for r in rows {
        t.push(vec![
            Cell::from(r.bits.to_string()),
            r.seq_len.into(),
            r.gflops().into(),
            r.size_mb().into(),
            r.embedding_flops.into(),
            r.block_flops.into(),
            r.classifier_flops.into(),
        ])?;
    }
    Ok(t)
}
