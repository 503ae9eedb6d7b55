//! Toy BERT-style encoders in full-precision and binarized form.
//!
//! Parameters live in a [`Params`] tree that is generic over the leaf type:
//! `Params<Matrix>` is the stored model, `Params<DualTensor>` the same tree
//! bound to a tape. The tape path is used for training; [`Encoder::infer_packed`]
//! is the bit-packed inference path and reproduces the tape logits exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::OnceLock;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{self, AttentionMode, AttentionVariant, WeightFn};
use crate::autodiff::{DualTensor, Tape};
use crate::binarize::{self, SteWindow};
use crate::bitcore::{self, Encoding, PackedBitMatrix};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{self, Matrix, LAYER_NORM_EPS};

/// Which layer families run binarized. Classifier, position and token-type
/// embeddings, layer norms and biases always stay full precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinarizationPolicy {
    pub embedding: bool,
    pub mha: bool,
    pub ffn: bool,
}

impl BinarizationPolicy {
    pub const FULL_PRECISION: Self = Self {
        embedding: false,
        mha: false,
        ffn: false,
    };
    pub const BINARIZED: Self = Self {
        embedding: true,
        mha: true,
        ffn: true,
    };
}

impl Default for BinarizationPolicy {
    fn default() -> Self {
        Self::BINARIZED
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub classes: usize,
    pub type_vocab: usize,
    pub policy: BinarizationPolicy,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            hidden: 32,
            heads: 4,
            ffn_dim: 64,
            vocab: 128,
            max_seq: 16,
            classes: 2,
            type_vocab: 2,
            policy: BinarizationPolicy::BINARIZED,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("vocab", self.vocab),
            ("max_seq", self.max_seq),
            ("classes", self.classes),
            ("type_vocab", self.type_vocab),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden {} is not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn with_policy(mut self, policy: BinarizationPolicy) -> Self {
        self.policy = policy;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear<T> {
    /// `[out×in]`
    pub weight: T,
    /// `[1×out]`
    pub bias: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Norm<T> {
    pub gain: T,
    pub bias: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer<T> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
    pub ln1: Norm<T>,
    pub ffn1: Linear<T>,
    pub ffn2: Linear<T>,
    pub ln2: Norm<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params<T> {
    pub word: T,
    pub position: T,
    pub token_type: T,
    pub emb_ln: Norm<T>,
    pub layers: Vec<Layer<T>>,
    pub classifier: Linear<T>,
}

impl<T> Linear<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Linear<U> {
        Linear {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }
}

impl<T> Norm<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Norm<U> {
        Norm {
            gain: f(&self.gain),
            bias: f(&self.bias),
        }
    }
}

impl<T> Layer<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Layer<U> {
        Layer {
            q: self.q.map(f),
            k: self.k.map(f),
            v: self.v.map(f),
            o: self.o.map(f),
            ln1: self.ln1.map(f),
            ffn1: self.ffn1.map(f),
            ffn2: self.ffn2.map(f),
            ln2: self.ln2.map(f),
        }
    }

    fn linears(&self) -> [(&'static str, &Linear<T>); 6] {
        [
            ("q", &self.q),
            ("k", &self.k),
            ("v", &self.v),
            ("o", &self.o),
            ("ffn1", &self.ffn1),
            ("ffn2", &self.ffn2),
        ]
    }
}

impl<T> Params<T> {
    /// Same tree with every leaf transformed, visiting leaves in
    /// [`Params::named`] order.
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Params<U> {
        let word = f(&self.word);
        let position = f(&self.position);
        let token_type = f(&self.token_type);
        let emb_ln = self.emb_ln.map(&mut f);
        let layers = self.layers.iter().map(|l| l.map(&mut f)).collect();
        let classifier = self.classifier.map(&mut f);
        Params {
            word,
            position,
            token_type,
            emb_ln,
            layers,
            classifier,
        }
    }

    /// Leaves with stable dotted names.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out: Vec<(String, &T)> = vec![
            ("embeddings.word".into(), &self.word),
            ("embeddings.position".into(), &self.position),
            ("embeddings.token_type".into(), &self.token_type),
            ("embeddings.ln.gain".into(), &self.emb_ln.gain),
            ("embeddings.ln.bias".into(), &self.emb_ln.bias),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, x) in [("q", &l.q), ("k", &l.k), ("v", &l.v), ("o", &l.o)] {
                out.push((format!("layer{i}.{name}.weight"), &x.weight));
                out.push((format!("layer{i}.{name}.bias"), &x.bias));
            }
            out.push((format!("layer{i}.ln1.gain"), &l.ln1.gain));
            out.push((format!("layer{i}.ln1.bias"), &l.ln1.bias));
            for (name, x) in [("ffn1", &l.ffn1), ("ffn2", &l.ffn2)] {
                out.push((format!("layer{i}.{name}.weight"), &x.weight));
                out.push((format!("layer{i}.{name}.bias"), &x.bias));
            }
            out.push((format!("layer{i}.ln2.gain"), &l.ln2.gain));
            out.push((format!("layer{i}.ln2.bias"), &l.ln2.bias));
        }
        out.push(("classifier.weight".into(), &self.classifier.weight));
        out.push(("classifier.bias".into(), &self.classifier.bias));
        out
    }

    /// Mutable leaves in [`Params::named`] order.
    pub fn leaves_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![
            &mut self.word,
            &mut self.position,
            &mut self.token_type,
            &mut self.emb_ln.gain,
            &mut self.emb_ln.bias,
        ];
        for l in &mut self.layers {
            for x in [&mut l.q, &mut l.k, &mut l.v, &mut l.o] {
                out.push(&mut x.weight);
                out.push(&mut x.bias);
            }
            out.push(&mut l.ln1.gain);
            out.push(&mut l.ln1.bias);
            for x in [&mut l.ffn1, &mut l.ffn2] {
                out.push(&mut x.weight);
                out.push(&mut x.bias);
            }
            out.push(&mut l.ln2.gain);
            out.push(&mut l.ln2.bias);
        }
        out.push(&mut self.classifier.weight);
        out.push(&mut self.classifier.bias);
        out
    }

    pub fn leaves(&self) -> Vec<&T> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }
}

impl Params<Matrix> {
    pub fn zeros_like(&self) -> Self {
        self.map(|m| Matrix::zeros(m.rows(), m.cols()))
    }

    pub fn param_count(&self) -> usize {
        self.leaves().iter().map(|m| m.len()).sum()
    }
}

/// A linear layer whose weight is binarized on use. The packed weight and
/// its scale are cached and dropped whenever the weight changes.
#[derive(Debug, Clone)]
pub struct BinaryLinearParams {
    weight: Matrix,
    bias: Matrix,
    cache: OnceLock<(PackedBitMatrix, f64)>,
}

impl BinaryLinearParams {
    pub fn new(weight: Matrix, bias: Matrix) -> Result<Self> {
        if bias.shape() != (1, weight.rows()) {
            return shape_err(format!(
                "bias {:?} for weight {:?}",
                bias.shape(),
                weight.shape()
            ));
        }
        Ok(Self {
            weight,
            bias,
            cache: OnceLock::new(),
        })
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn bias(&self) -> &Matrix {
        &self.bias
    }

    pub fn weight_mut(&mut self) -> &mut Matrix {
        self.cache = OnceLock::new();
        &mut self.weight
    }

    pub fn is_cached(&self) -> bool {
        self.cache.get().is_some()
    }

    /// `(sign(W − μ(W)), ||W||₁/n)`
    pub fn binarized(&self) -> Result<&(PackedBitMatrix, f64)> {
        if let Some(c) = self.cache.get() {
            return Ok(c);
        }
        let computed = binarize::binarize_weight(&self.weight)?;
        Ok(self.cache.get_or_init(|| computed))
    }

    /// Packed inference: `α·(sign(x) ⊗ B_W) + b`.
    pub fn forward_packed(&self, x: &Matrix) -> Result<Matrix> {
        let (bits, alpha) = self.binarized()?;
        bi_linear_packed(x, bits, *alpha, &self.bias)
    }

    /// Training path on a tape, with the weight as a fresh leaf.
    pub fn forward_tape<'t>(
        &self,
        x: DualTensor<'t>,
        window: SteWindow,
    ) -> Result<(DualTensor<'t>, DualTensor<'t>)> {
        let tape = x.tape();
        let w = tape.leaf(self.weight.clone());
        let b = tape.leaf(self.bias.clone());
        Ok((bi_linear(x, w, b, window)?, w))
    }
}

/// `α·(sign(x)·sign(W − μ(W))ᵀ) + b` with STE through both signs. The scale
/// `α = ||W||₁/n` is held constant in the backward pass.
pub fn bi_linear<'t>(
    x: DualTensor<'t>,
    w: DualTensor<'t>,
    b: DualTensor<'t>,
    window: SteWindow,
) -> Result<DualTensor<'t>> {
    let (_, inputs) = x.shape();
    if w.shape().1 != inputs {
        return shape_err(format!("input width {inputs} for weight {:?}", w.shape()));
    }
    let alpha = binarize::weight_scale(&w.value());
    let xs = x.sign_ste(window)?;
    let ws = w.weight_sign_ste(window)?;
    xs.matmul_t(&ws)?.scale(alpha).add_row(&b)
}

/// Packed counterpart of [`bi_linear`].
pub fn bi_linear_packed(
    x: &Matrix,
    bits: &PackedBitMatrix,
    alpha: f64,
    bias: &Matrix,
) -> Result<Matrix> {
    let xb = bitcore::pack(x, Encoding::PlusMinusOne)?;
    bitcore::xnor_matmul(&xb, bits)?.scaled(alpha).add_row(bias)
}

fn linear<'t>(
    x: DualTensor<'t>,
    p: &Linear<DualTensor<'t>>,
    binarized: bool,
    window: SteWindow,
) -> Result<DualTensor<'t>> {
    if binarized {
        bi_linear(x, p.weight, p.bias, window)
    } else {
        x.matmul_t(&p.weight)?.add_row(&p.bias)
    }
}

fn norm<'t>(x: DualTensor<'t>, p: &Norm<DualTensor<'t>>) -> Result<DualTensor<'t>> {
    x.layer_norm(LAYER_NORM_EPS)
        .mul_row(&p.gain)?
        .add_row(&p.bias)
}

fn norm_values(x: &Matrix, p: &Norm<Matrix>) -> Result<Matrix> {
    tensor::layer_norm_rows(x, LAYER_NORM_EPS)
        .0
        .mul_row(&p.gain)?
        .add_row(&p.bias)
}

/// Activations recorded per layer on the tape.
pub struct LayerProbes<'t> {
    pub q: DualTensor<'t>,
    pub k: DualTensor<'t>,
    pub v: DualTensor<'t>,
    /// Scaled attention scores, heads stacked by rows `[heads·N × N]`.
    pub scores: DualTensor<'t>,
    /// The same scores, one node per head.
    pub head_scores: Vec<DualTensor<'t>>,
    /// Output of the attention output projection.
    pub mha: DualTensor<'t>,
    /// Layer output.
    pub hidden: DualTensor<'t>,
    /// Attention weights per head.
    pub weights: Vec<Matrix>,
    pub head_entropy: Vec<f64>,
}

/// Plain values of [`LayerProbes`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeValues {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub scores: Matrix,
    pub mha: Matrix,
    pub hidden: Matrix,
    pub weights: Vec<Matrix>,
    pub head_entropy: Vec<f64>,
}

impl LayerProbes<'_> {
    pub fn values(&self) -> ProbeValues {
        ProbeValues {
            q: self.q.value(),
            k: self.k.value(),
            v: self.v.value(),
            scores: self.scores.value(),
            mha: self.mha.value(),
            hidden: self.hidden.value(),
            weights: self.weights.clone(),
            head_entropy: self.head_entropy.clone(),
        }
    }
}

pub struct ForwardOutput<'t> {
    /// `[1×classes]`
    pub logits: DualTensor<'t>,
    pub layers: Vec<LayerProbes<'t>>,
}

/// Forward options that do not belong to the stored model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardOptions {
    pub variant: AttentionVariant,
    pub window: SteWindow,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            variant: AttentionVariant::new(WeightFn::BiAttentionBool),
            window: SteWindow::default(),
        }
    }
}

impl ForwardOptions {
    pub fn new(variant: AttentionVariant) -> Self {
        Self {
            variant,
            ..Self::default()
        }
    }
}

#[derive(Debug)]
struct PackedModel {
    layers: Vec<[Option<(PackedBitMatrix, f64)>; 6]>,
}

#[derive(Debug)]
pub struct Encoder {
    cfg: TransformerConfig,
    params: Params<Matrix>,
    packed: OnceLock<PackedModel>,
}

impl Clone for Encoder {
    fn clone(&self) -> Self {
        Self {
            cfg: self.cfg,
            params: self.params.clone(),
            packed: OnceLock::new(),
        }
    }
}

impl Encoder {
    /// Random initialization: embeddings `N(0, 1)`, linear weights
    /// `N(0, 1/fan_in)`, zero biases, unit norm gains.
    pub fn new(cfg: TransformerConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let (d, f) = (cfg.hidden, cfg.ffn_dim);
        let mut normal = |r: usize, c: usize, std: f64| {
            let dist = Normal::new(0.0, std).expect("positive std");
            Matrix::from_fn(r, c, |_, _| dist.sample(&mut *rng))
        };
        let mut lin = |out: usize, inp: usize| Linear {
            weight: normal(out, inp, 1.0 / (inp as f64).sqrt()),
            bias: Matrix::zeros(1, out),
        };
        let unit_norm = || Norm {
            gain: Matrix::filled(1, d, 1.0),
            bias: Matrix::zeros(1, d),
        };
        let mut layers = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            layers.push(Layer {
                q: lin(d, d),
                k: lin(d, d),
                v: lin(d, d),
                o: lin(d, d),
                ln1: unit_norm(),
                ffn1: lin(f, d),
                ffn2: lin(d, f),
                ln2: unit_norm(),
            });
        }
        let classifier = lin(cfg.classes, d);
        let mut normal = |r: usize, c: usize, std: f64| {
            let dist = Normal::new(0.0, std).expect("positive std");
            Matrix::from_fn(r, c, |_, _| dist.sample(&mut *rng))
        };
        let word = normal(cfg.vocab, d, 1.0);
        let position = normal(cfg.max_seq, d, 1.0);
        let token_type = normal(cfg.type_vocab, d, 0.1);
        let params = Params {
            word,
            position,
            token_type,
            emb_ln: unit_norm(),
            layers,
            classifier,
        };
        Ok(Self {
            cfg,
            params,
            packed: OnceLock::new(),
        })
    }

    pub fn from_params(cfg: TransformerConfig, params: Params<Matrix>) -> Result<Self> {
        cfg.validate()?;
        let expected = Self::shapes(&cfg);
        let got: Vec<(usize, usize)> = params.leaves().iter().map(|m| m.shape()).collect();
        if expected != got {
            return shape_err("parameter shapes do not match the configuration");
        }
        Ok(Self {
            cfg,
            params,
            packed: OnceLock::new(),
        })
    }

    fn shapes(cfg: &TransformerConfig) -> Vec<(usize, usize)> {
        let (d, f) = (cfg.hidden, cfg.ffn_dim);
        let mut s = vec![
            (cfg.vocab, d),
            (cfg.max_seq, d),
            (cfg.type_vocab, d),
            (1, d),
            (1, d),
        ];
        for _ in 0..cfg.layers {
            for _ in 0..4 {
                s.extend([(d, d), (1, d)]);
            }
            s.extend([
                (1, d),
                (1, d),
                (f, d),
                (1, f),
                (d, f),
                (1, d),
                (1, d),
                (1, d),
            ]);
        }
        s.extend([(cfg.classes, d), (1, cfg.classes)]);
        s
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.cfg
    }

    pub fn params(&self) -> &Params<Matrix> {
        &self.params
    }

    /// Mutable access; drops every cached binarized weight.
    pub fn params_mut(&mut self) -> &mut Params<Matrix> {
        self.packed = OnceLock::new();
        &mut self.params
    }

    /// Same parameters under a different binarization policy.
    pub fn with_policy(&self, policy: BinarizationPolicy) -> Self {
        Self {
            cfg: self.cfg.with_policy(policy),
            params: self.params.clone(),
            packed: OnceLock::new(),
        }
    }

    /// Binds every parameter as a trainable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Params<DualTensor<'t>> {
        self.params.map(|m| tape.leaf(m.clone()))
    }

    /// Binds every parameter as a constant.
    pub fn bind_constant<'t>(&self, tape: &'t Tape) -> Params<DualTensor<'t>> {
        self.params.map(|m| tape.constant(m.clone()))
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() || tokens.len() > self.cfg.max_seq {
            return Err(Error::Domain(format!(
                "sequence length {} outside 1..={}",
                tokens.len(),
                self.cfg.max_seq
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.cfg.vocab) {
            return Err(Error::Domain(format!(
                "token id {t} outside vocabulary of {}",
                self.cfg.vocab
            )));
        }
        Ok(())
    }

    fn attention_mode(&self, opts: &ForwardOptions) -> AttentionMode {
        if self.cfg.policy.mha {
            AttentionMode::Binarized(opts.variant)
        } else {
            AttentionMode::FullPrecision
        }
    }

    /// Embedding sum and norm: `LN(word + position + token_type)`, with the
    /// word rows binarized per row when the policy says so.
    pub fn embed<'t>(
        &self,
        p: &Params<DualTensor<'t>>,
        tokens: &[usize],
        window: SteWindow,
    ) -> Result<DualTensor<'t>> {
        self.check_tokens(tokens)?;
        let n = tokens.len();
        let mut word = p.word.select_rows(tokens)?;
        if self.cfg.policy.embedding {
            word = word.row_binarize_ste(window);
        }
        let positions: Vec<usize> = (0..n).collect();
        let e = word
            .add(&p.position.select_rows(&positions)?)?
            .add(&p.token_type.select_rows(&vec![0; n])?)?;
        norm(e, &p.emb_ln)
    }

    /// One attention block: projections, attention, output projection.
    pub fn mha_forward<'t>(
        &self,
        layer: &Layer<DualTensor<'t>>,
        h: DualTensor<'t>,
        mask: &[bool],
        opts: &ForwardOptions,
    ) -> Result<(DualTensor<'t>, LayerProbes<'t>)> {
        let bin = self.cfg.policy.mha;
        let q = linear(h, &layer.q, bin, opts.window)?;
        let k = linear(h, &layer.k, bin, opts.window)?;
        let v = linear(h, &layer.v, bin, opts.window)?;
        let att = attention::multi_head_attention(
            q,
            k,
            v,
            mask,
            self.cfg.heads,
            self.attention_mode(opts),
            opts.window,
        )?;
        let m = linear(att.context, &layer.o, bin, opts.window)?;
        let scores = if att.scores.len() == 1 {
            att.scores[0]
        } else {
            DualTensor::concat_rows(&att.scores)?
        };
        let probes = LayerProbes {
            q,
            k,
            v,
            scores,
            head_scores: att.scores.clone(),
            mha: m,
            hidden: m,
            weights: att.weights,
            head_entropy: att.head_entropy,
        };
        Ok((m, probes))
    }

    /// Training-path forward on a tape.
    pub fn forward_tape<'t>(
        &self,
        p: &Params<DualTensor<'t>>,
        tokens: &[usize],
        opts: &ForwardOptions,
    ) -> Result<ForwardOutput<'t>> {
        let mask = vec![true; tokens.len()];
        let mut h = self.embed(p, tokens, opts.window)?;
        let mut layers = Vec::with_capacity(self.cfg.layers);
        for layer in &p.layers {
            let (m, mut probes) = self.mha_forward(layer, h, &mask, opts)?;
            let h1 = norm(h.add(&m)?, &layer.ln1)?;
            let mut f = linear(h1, &layer.ffn1, self.cfg.policy.ffn, opts.window)?;
            if !self.cfg.policy.ffn {
                f = f.gelu();
            }
            let f2 = linear(f, &layer.ffn2, self.cfg.policy.ffn, opts.window)?;
            h = norm(h1.add(&f2)?, &layer.ln2)?;
            probes.hidden = h;
            layers.push(probes);
        }
        let cls = h.select_rows(&[0])?;
        let logits = linear(cls, &p.classifier, false, opts.window)?;
        Ok(ForwardOutput { logits, layers })
    }

    /// Forward without gradients: logits `[1×classes]` and per-layer probes.
    pub fn forward(
        &self,
        tokens: &[usize],
        opts: &ForwardOptions,
    ) -> Result<(Matrix, Vec<ProbeValues>)> {
        let tape = Tape::new();
        let p = self.bind_constant(&tape);
        let out = self.forward_tape(&p, tokens, opts)?;
        Ok((
            out.logits.value(),
            out.layers.iter().map(LayerProbes::values).collect(),
        ))
    }

    fn packed(&self) -> Result<&PackedModel> {
        if let Some(p) = self.packed.get() {
            return Ok(p);
        }
        let pol = self.cfg.policy;
        let mut layers = Vec::with_capacity(self.cfg.layers);
        for l in &self.params.layers {
            let mut slots: [Option<(PackedBitMatrix, f64)>; 6] = Default::default();
            for (slot, (name, lin)) in slots.iter_mut().zip(l.linears()) {
                let binarized = if name.starts_with("ffn") {
                    pol.ffn
                } else {
                    pol.mha
                };
                if binarized {
                    *slot = Some(binarize::binarize_weight(&lin.weight)?);
                }
            }
            layers.push(slots);
        }
        Ok(self.packed.get_or_init(|| PackedModel { layers }))
    }

    /// Number of cached packed layers; zero until the first packed forward.
    pub fn packed_cache_len(&self) -> usize {
        self.packed.get().map_or(0, |p| p.layers.len())
    }

    /// Bit-packed inference path: xnor/popcount for every binarized linear,
    /// packed scores and BAMM inside attention. Returns logits `[1×classes]`.
    pub fn infer_packed(&self, tokens: &[usize], variant: &AttentionVariant) -> Result<Matrix> {
        self.check_tokens(tokens)?;
        let packed = self.packed()?;
        let p = &self.params;
        let n = tokens.len();
        let mut word = p.word.select_rows(tokens)?;
        if self.cfg.policy.embedding {
            word = binarize::binarize_rows(&word);
        }
        let positions: Vec<usize> = (0..n).collect();
        let e = word
            .add(&p.position.select_rows(&positions)?)?
            .add(&p.token_type.select_rows(&vec![0; n])?)?;
        let mut h = norm_values(&e, &p.emb_ln)?;
        let mask = vec![true; n];
        for (l, slots) in p.layers.iter().zip(&packed.layers) {
            let apply = |x: &Matrix,
                         lin: &Linear<Matrix>,
                         slot: &Option<(PackedBitMatrix, f64)>| match slot {
                Some((bits, alpha)) => bi_linear_packed(x, bits, *alpha, &lin.bias),
                None => x.matmul_t(&lin.weight)?.add_row(&lin.bias),
            };
            let q = apply(&h, &l.q, &slots[0])?;
            let k = apply(&h, &l.k, &slots[1])?;
            let v = apply(&h, &l.v, &slots[2])?;
            let ctx = if self.cfg.policy.mha {
                attention::attention_packed(&q, &k, &v, &mask, self.cfg.heads, variant)?.context
            } else {
                let tape = Tape::new();
                let out = attention::multi_head_attention(
                    tape.constant(q),
                    tape.constant(k),
                    tape.constant(v),
                    &mask,
                    self.cfg.heads,
                    AttentionMode::FullPrecision,
                    SteWindow::default(),
                )?;
                out.context.value()
            };
            let m = apply(&ctx, &l.o, &slots[3])?;
            let h1 = norm_values(&h.add(&m)?, &l.ln1)?;
            let mut f = apply(&h1, &l.ffn1, &slots[4])?;
            if !self.cfg.policy.ffn {
                f = f.map(tensor::gelu);
            }
            let f2 = apply(&f, &l.ffn2, &slots[5])?;
            h = norm_values(&h1.add(&f2)?, &l.ln2)?;
        }
        h.select_rows(&[0])?
            .matmul_t(&p.classifier.weight)?
            .add_row(&p.classifier.bias)
    }

    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        save_checkpoint(path, &self.cfg, &self.params, meta)
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let (cfg, params, meta) = load_checkpoint(path)?;
        Ok((Self::from_params(cfg, params)?, meta))
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"BIBITCK1";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    /// Offset in values (not bytes) from the start of the data section.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: TransformerConfig,
    tensors: Vec<TensorEntry>,
    meta: serde_json::Value,
}

/// Layout: 8-byte magic `BIBITCK1`, header length as `u64` little-endian,
/// the JSON header, then every tensor as row-major `f64` little-endian.
pub fn save_checkpoint(
    path: &Path,
    cfg: &TransformerConfig,
    params: &Params<Matrix>,
    meta: serde_json::Value,
) -> Result<()> {
    let mut offset = 0;
    let mut tensors = Vec::new();
    for (name, m) in params.named() {
        tensors.push(TensorEntry {
            name,
            rows: m.rows(),
            cols: m.cols(),
            offset,
        });
        offset += m.len();
    }
    let header = serde_json::to_vec(&CheckpointHeader {
        config: *cfg,
        tensors,
        meta,
    })?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    for m in params.leaves() {
        for v in m.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(
    path: &Path,
) -> Result<(TransformerConfig, Params<Matrix>, serde_json::Value)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a bibit checkpoint".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = usize::try_from(u64::from_le_bytes(len))
        .map_err(|_| Error::Checkpoint("header too large".into()))?;
    let mut header = vec![0u8; len];
    r.read_exact(&mut header)?;
    let header: CheckpointHeader = serde_json::from_slice(&header)?;
    header.config.validate()?;
    let mut data = Vec::new();
    r.read_to_end(&mut data)?;
    if data.len() % 8 != 0 {
        return Err(Error::Checkpoint("truncated tensor data".into()));
    }
    let values: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();

    let shapes = Encoder::shapes(&header.config);
    if shapes.len() != header.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {}",
            shapes.len(),
            header.tensors.len()
        )));
    }
    let template = skeleton(&header.config);
    let names: Vec<String> = template.named().into_iter().map(|(n, _)| n).collect();
    let mut params = template;
    for ((slot, entry), (name, shape)) in params
        .leaves_mut()
        .into_iter()
        .zip(&header.tensors)
        .zip(names.iter().zip(&shapes))
    {
        if &entry.name != name || (entry.rows, entry.cols) != *shape {
            return Err(Error::Checkpoint(format!(
                "tensor {} {:?} where {name} {shape:?} was expected",
                entry.name,
                (entry.rows, entry.cols)
            )));
        }
        let end = entry.offset + entry.rows * entry.cols;
        let chunk = values
            .get(entry.offset..end)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name} runs past the data")))?;
        *slot = Matrix::from_vec(entry.rows, entry.cols, chunk.to_vec())?;
    }
    Ok((header.config, params, header.meta))
}

/// Zero-filled parameter tree of the right shapes.
fn skeleton(cfg: &TransformerConfig) -> Params<Matrix> {
    let (d, f) = (cfg.hidden, cfg.ffn_dim);
    let lin = |o: usize, i: usize| Linear {
        weight: Matrix::zeros(o, i),
        bias: Matrix::zeros(1, o),
    };
    let nrm = || Norm {
        gain: Matrix::zeros(1, d),
        bias: Matrix::zeros(1, d),
    };
    Params {
        word: Matrix::zeros(cfg.vocab, d),
        position: Matrix::zeros(cfg.max_seq, d),
        token_type: Matrix::zeros(cfg.type_vocab, d),
        emb_ln: nrm(),
        layers: (0..cfg.layers)
            .map(|_| Layer {
                q: lin(d, d),
                k: lin(d, d),
                v: lin(d, d),
                o: lin(d, d),
                ln1: nrm(),
                ffn1: lin(f, d),
                ffn2: lin(d, f),
                ln2: nrm(),
            })
            .collect(),
        classifier: lin(cfg.classes, d),
    }
}
