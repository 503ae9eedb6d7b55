//! Datasets, synthetic tasks and the seeded teacher/student training loops.
//!
//! A step runs one tape per example in parallel, collects the per-example
//! gradients in batch order and reduces them sequentially, so results do not
//! depend on the thread count.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{binary_entropy, AttentionVariant, WeightFn};
use crate::autodiff::Tape;
use crate::binarize::SteWindow;
use crate::distill::{self, DistillSpec, MismatchProbe, MismatchTally, Scheme};
use crate::error::{Error, Result};
use crate::model::{BinarizationPolicy, Encoder, ForwardOptions, ProbeValues, TransformerConfig};
use crate::report::{Cell, Table};
use crate::tensor::Matrix;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
const SPECIALS: [&str; 3] = ["<pad>", "<unk>", "<cls>"];

/// Word ↔ id map. Ids 0..3 are `<pad>`, `<unk>`, `<cls>`; the rest follow
/// descending corpus frequency, ties broken lexicographically.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens(words: Vec<String>) -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(
            words
                .into_iter()
                .filter(|w| !SPECIALS.contains(&w.as_str())),
        );
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }

    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for t in texts {
            for w in t.split_whitespace() {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut words: Vec<(&str, usize)> = counts.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Self::from_tokens(words.into_iter().map(|(w, _)| w.to_string()).collect())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// `<cls>` followed by the whitespace tokens, truncated to `max_seq`.
    pub fn encode(&self, text: &str, max_seq: usize) -> Vec<usize> {
        std::iter::once(CLS)
            .chain(text.split_whitespace().map(|w| self.id(w)))
            .take(max_seq)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub vocab: Vocab,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.examples
            .iter()
            .map(|e| e.tokens.len())
            .max()
            .unwrap_or(0)
    }

    /// Seeded shuffle, then the first `1 − eval_fraction` for training.
    pub fn split(&self, eval_fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_eval = ((self.len() as f64) * eval_fraction).round() as usize;
        let part = |ids: &[usize]| Dataset {
            examples: ids.iter().map(|&i| self.examples[i].clone()).collect(),
            vocab: self.vocab.clone(),
            classes: self.classes,
        };
        (part(&idx[n_eval..]), part(&idx[..n_eval]))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for e in &self.examples {
            c[e.label] += 1;
        }
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FileFormat {
    Csv,
    Tsv,
}

impl FileFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("tsv") => FileFormat::Tsv,
            _ => FileFormat::Csv,
        }
    }
}

/// Reads `text,label` rows (an optional `text,label` header is skipped).
/// Labels are non-negative integers; the class count is `max label + 1`.
pub fn load_dataset(path: &Path, format: FileFormat, max_seq: usize) -> Result<Dataset> {
    let delimiter = match format {
        FileFormat::Csv => b',',
        FileFormat::Tsv => b'\t',
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .delimiter(delimiter)
        .from_path(path)?;
    let mut rows: Vec<(String, usize)> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let line = record.position().map_or(i + 1, |p| p.line() as usize);
        if record.len() != 2 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 2 fields, found {}", record.len()),
            });
        }
        let label = record[1].trim();
        match label.parse::<usize>() {
            Ok(l) => rows.push((record[0].to_string(), l)),
            Err(_) if i == 0 && label.eq_ignore_ascii_case("label") => continue,
            Err(_) => {
                return Err(Error::Parse {
                    line,
                    msg: format!("label {label:?} is not a non-negative integer"),
                })
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::Domain(format!("{} has no examples", path.display())));
    }
    let vocab = Vocab::build(rows.iter().map(|(t, _)| t.as_str()));
    let classes = rows.iter().map(|r| r.1).max().unwrap_or(0) + 1;
    let examples = rows
        .iter()
        .map(|(t, l)| Example {
            tokens: vocab.encode(t, max_seq),
            label: *l,
        })
        .collect();
    Ok(Dataset {
        examples,
        vocab,
        classes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SynthRule {
    /// Two symbols; the label is the more frequent one.
    MajorityToken,
    /// Label 1 iff symbol 0 is immediately followed by symbol 1.
    ContainsPattern,
}

impl fmt::Display for SynthRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SynthRule::MajorityToken => "majority",
            SynthRule::ContainsPattern => "pattern",
        })
    }
}

impl FromStr for SynthRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "majority" => Ok(SynthRule::MajorityToken),
            "pattern" => Ok(SynthRule::ContainsPattern),
            other => Err(Error::Config(format!("unknown synthetic rule {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub rule: SynthRule,
    pub examples: usize,
    /// Content tokens per sequence, excluding `<cls>`.
    pub length: usize,
    pub symbols: usize,
}

impl SynthSpec {
    pub fn new(rule: SynthRule, examples: usize) -> Self {
        match rule {
            SynthRule::MajorityToken => Self {
                rule,
                examples,
                length: 11,
                symbols: 2,
            },
            SynthRule::ContainsPattern => Self {
                rule,
                examples,
                length: 6,
                symbols: 3,
            },
        }
    }
}

/// Synthetic task with the default shape for its rule.
pub fn synth_task(seed: u64, n_examples: usize, rule: SynthRule) -> Result<Dataset> {
    synth_task_with(seed, &SynthSpec::new(rule, n_examples))
}

/// Labels alternate so the classes differ in size by at most one.
pub fn synth_task_with(seed: u64, spec: &SynthSpec) -> Result<Dataset> {
    if spec.examples == 0 || spec.length < 2 || spec.symbols < 2 {
        return Err(Error::Config(format!("degenerate synthetic task {spec:?}")));
    }
    if spec.rule == SynthRule::MajorityToken && spec.length.is_multiple_of(2) {
        return Err(Error::Config("majority task needs an odd length".into()));
    }
    let vocab = Vocab::from_tokens((0..spec.symbols).map(|i| format!("s{i}")).collect());
    let sym = |i: usize| i + SPECIALS.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = Vec::with_capacity(spec.examples);
    for n in 0..spec.examples {
        let label = n % 2;
        let content: Vec<usize> = match spec.rule {
            SynthRule::MajorityToken => {
                let m = spec.length;
                let majority = rng.random_range(m / 2 + 1..=m);
                let mut s: Vec<usize> = (0..m)
                    .map(|i| if i < majority { label } else { 1 - label })
                    .collect();
                s.shuffle(&mut rng);
                s
            }
            SynthRule::ContainsPattern => loop {
                let mut s: Vec<usize> = (0..spec.length)
                    .map(|_| rng.random_range(0..spec.symbols))
                    .collect();
                if label == 1 {
                    let at = rng.random_range(0..spec.length - 1);
                    s[at] = 0;
                    s[at + 1] = 1;
                }
                if contains_pattern(&s) == (label == 1) {
                    break s;
                }
            },
        };
        let tokens = std::iter::once(CLS)
            .chain(content.into_iter().map(sym))
            .collect();
        examples.push(Example { tokens, label });
    }
    examples.shuffle(&mut rng);
    Ok(Dataset {
        examples,
        vocab,
        classes: 2,
    })
}

fn contains_pattern(s: &[usize]) -> bool {
    s.windows(2).any(|w| w[0] == 0 && w[1] == 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling.
    pub grad_clip: f64,
    /// STE pass-through half-width.
    pub ste_clip: f64,
    pub distill: DistillSpec,
    pub variant: AttentionVariant,
    /// Student architecture; the teacher uses the same shape at full precision.
    pub model: TransformerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 20,
            batch_size: 16,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 5.0,
            ste_clip: 1.0,
            distill: DistillSpec::new(Scheme::Dmd),
            variant: AttentionVariant::new(WeightFn::BiAttentionBool),
            model: TransformerConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.variant.weight_fn.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch_size must be positive".into(),
            ));
        }
        let positive = [
            ("learning_rate", self.learning_rate),
            ("eps", self.eps),
            ("grad_clip", self.grad_clip),
            ("ste_clip", self.ste_clip),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    fn forward_options(&self) -> Result<ForwardOptions> {
        Ok(ForwardOptions {
            variant: self.variant,
            window: SteWindow::new(self.ste_clip)?,
        })
    }

    /// Model shape fitted to a dataset's vocabulary, classes and length.
    pub fn fit_to(&mut self, data: &Dataset) {
        self.model.vocab = data.vocab.len();
        self.model.classes = data.classes;
        self.model.max_seq = self.model.max_seq.max(data.max_len());
    }
}

/// Adam over a flat list of parameter matrices.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, params: &[&Matrix]) -> Self {
        let zeros: Vec<Matrix> = params
            .iter()
            .map(|p| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: Vec<&mut Matrix>, grads: &[Matrix]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mh = *mv / c1;
                let vh = *vv / c2;
                *pv -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Scales `grads` in place so their joint norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            *g = g.scale(s);
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_acc: f64,
    pub eval_acc: f64,
    /// Mean per-example objective over the epoch's steps.
    pub loss: f64,
    /// Mean per-example value of each loss term.
    pub terms: Vec<(String, f64)>,
    /// Entropy of each layer's binarized attention weights (all heads
    /// pooled), averaged over examples; empty at full precision.
    pub layer_entropy: Vec<f64>,
    /// Per-head entropies averaged within each layer.
    pub head_entropy: Vec<f64>,
    pub mismatch_att: MismatchProbe,
    pub mismatch_q: MismatchProbe,
    /// Mean gradient norm before clipping.
    pub grad_norm: f64,
}

impl EpochMetrics {
    pub fn mean_entropy(&self) -> Option<f64> {
        if self.layer_entropy.is_empty() {
            None
        } else {
            Some(self.layer_entropy.iter().sum::<f64>() / self.layer_entropy.len() as f64)
        }
    }
}

/// One row per epoch. Columns: `epoch, train_acc, eval_acc, loss`, one
/// `loss_<term>` per term; for binarized attention `entropy_l<i>` per layer,
/// `entropy_mean` and `head_entropy_l<i>`; then the layer-0 attention-score
/// and query mismatch probes and `grad_norm`.
pub fn metrics_table(metrics: &[EpochMetrics]) -> Result<Table> {
    let first = metrics.first();
    let term_names: Vec<String> = first
        .map(|m| m.terms.iter().map(|(t, _)| t.clone()).collect())
        .unwrap_or_default();
    let layers = first.map_or(0, |m| m.layer_entropy.len());
    let mut cols: Vec<String> = ["epoch", "train_acc", "eval_acc", "loss"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    cols.extend(term_names.iter().map(|t| format!("loss_{t}")));
    if layers > 0 {
        cols.extend((0..layers).map(|l| format!("entropy_l{l}")));
        cols.push("entropy_mean".into());
        cols.extend((0..layers).map(|l| format!("head_entropy_l{l}")));
    }
    for p in ["att", "q"] {
        cols.extend([
            format!("mismatch_{p}_rate"),
            format!("mismatch_{p}_match_mag"),
            format!("mismatch_{p}_mismatch_mag"),
        ]);
    }
    cols.push("grad_norm".into());
    let mut table = Table::new(cols);
    for m in metrics {
        let mut row: Vec<Cell> = vec![
            m.epoch.into(),
            m.train_acc.into(),
            m.eval_acc.into(),
            m.loss.into(),
        ];
        row.extend(m.terms.iter().map(|(_, v)| Cell::from(*v)));
        if layers > 0 {
            row.extend(m.layer_entropy.iter().map(|&v| Cell::from(v)));
            row.push(m.mean_entropy().unwrap_or(0.0).into());
            row.extend(m.head_entropy.iter().map(|&v| Cell::from(v)));
        }
        for p in [m.mismatch_att, m.mismatch_q] {
            row.extend([p.rate.into(), p.match_mag.into(), p.mismatch_mag.into()]);
        }
        row.push(m.grad_norm.into());
        table.push(row)?;
    }
    Ok(table)
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub model: Encoder,
    pub metrics: Vec<EpochMetrics>,
}

struct StepOut {
    loss: f64,
    terms: Vec<f64>,
    grads: Vec<Matrix>,
    layer_entropy: Vec<f64>,
    head_entropy: Vec<f64>,
    att: MismatchTally,
    q: MismatchTally,
}

/// Cached teacher outputs for distillation targets.
struct TeacherOut {
    logits: Matrix,
    probes: Vec<ProbeValues>,
}

enum Objective<'a> {
    Labels,
    Distill {
        spec: &'a DistillSpec,
        teacher: &'a [TeacherOut],
    },
}

impl Objective<'_> {
    fn term_names(&self) -> Vec<String> {
        match self {
            Objective::Labels => vec!["ce".into()],
            Objective::Distill { spec, .. } => spec
                .scheme
                .terms()
                .iter()
                .map(|t| t.name().to_string())
                .collect(),
        }
    }
}

fn example_step(
    model: &Encoder,
    opts: &ForwardOptions,
    objective: &Objective<'_>,
    idx: usize,
    ex: &Example,
) -> Result<StepOut> {
    let tape = Tape::new();
    let bound = model.bind(&tape);
    let out = model.forward_tape(&bound, &ex.tokens, opts)?;
    let (total, terms) = match objective {
        Objective::Labels => {
            let ce = out.logits.cross_entropy(&[ex.label])?;
            (ce, vec![ce.item()])
        }
        Objective::Distill { spec, teacher } => {
            let t = &teacher[idx];
            let loss = distill::distill_loss(spec, &out.layers, &t.probes, out.logits, &t.logits)?;
            (loss.total, loss.terms.iter().map(|(_, v)| *v).collect())
        }
    };
    tape.backward(total)?;
    let grads = bound
        .leaves()
        .iter()
        .map(|d| d.grad())
        .collect::<Result<Vec<_>>>()?;
    let layer_entropy = out
        .layers
        .iter()
        .filter(|l| !l.head_entropy.is_empty())
        .map(|l| {
            binary_entropy(
                &l.weights
                    .iter()
                    .flat_map(|w| w.data().iter().copied())
                    .collect::<Vec<_>>(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let head_entropy = out
        .layers
        .iter()
        .filter(|l| !l.head_entropy.is_empty())
        .map(|l| l.head_entropy.iter().sum::<f64>() / l.head_entropy.len() as f64)
        .collect();
    let mut att = MismatchTally::default();
    let mut q = MismatchTally::default();
    if let (Objective::Distill { teacher, .. }, Some(l0)) = (objective, out.layers.first()) {
        let t0 = &teacher[idx].probes[0];
        let n = ex.tokens.len();
        for (h, s) in l0.head_scores.iter().enumerate() {
            let target = t0
                .scores
                .select_rows(&(h * n..(h + 1) * n).collect::<Vec<_>>())?;
            att.add(&s.value(), &target, &s.grad()?)?;
        }
        q.add(&l0.q.value(), &t0.q, &l0.q.grad()?)?;
    }
    Ok(StepOut {
        loss: total.item(),
        terms,
        grads,
        layer_entropy,
        head_entropy,
        att,
        q,
    })
}

/// Accuracy of the packed inference path.
pub fn accuracy(model: &Encoder, data: &Dataset, variant: &AttentionVariant) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let hits = data
        .examples
        .par_iter()
        .map(|ex| -> Result<usize> {
            let logits = model.infer_packed(&ex.tokens, variant)?;
            Ok(usize::from(argmax(logits.row(0)) == ex.label))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / data.len() as f64)
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| {
            if x > best.1 {
                (i, x)
            } else {
                best
            }
        })
        .0
}

fn run(
    cfg: &TrainConfig,
    mut model: Encoder,
    train: &Dataset,
    eval: &Dataset,
    objective: Objective<'_>,
) -> Result<RunResult> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Domain("empty training set".into()));
    }
    let opts = cfg.forward_options()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut adam = Adam::new(cfg, &model.params().leaves());
    let names = objective.term_names();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut term_sums = vec![0.0; names.len()];
        let mut entropy_sums: Vec<f64> = Vec::new();
        let mut head_sums: Vec<f64> = Vec::new();
        let mut att = MismatchTally::default();
        let mut q = MismatchTally::default();
        let mut norm_sum = 0.0;
        let mut steps = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let outs = batch
                .par_iter()
                .map(|&i| example_step(&model, &opts, &objective, i, &train.examples[i]))
                .collect::<Result<Vec<_>>>()?;
            let mut grads: Vec<Matrix> = model
                .params()
                .leaves()
                .iter()
                .map(|p| Matrix::zeros(p.rows(), p.cols()))
                .collect();
            for o in &outs {
                if !o.loss.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        msg: format!("loss became {}", o.loss),
                    });
                }
                loss_sum += o.loss;
                for (s, v) in term_sums.iter_mut().zip(&o.terms) {
                    *s += v;
                }
                if entropy_sums.is_empty() {
                    entropy_sums = vec![0.0; o.layer_entropy.len()];
                }
                head_sums.resize(o.head_entropy.len(), 0.0);
                for (s, v) in entropy_sums.iter_mut().zip(&o.layer_entropy) {
                    *s += v;
                }
                for (s, v) in head_sums.iter_mut().zip(&o.head_entropy) {
                    *s += v;
                }
                att.merge(&o.att);
                q.merge(&o.q);
                for (g, og) in grads.iter_mut().zip(&o.grads) {
                    g.add_assign(og);
                }
            }
            let inv = 1.0 / outs.len() as f64;
            for g in &mut grads {
                *g = g.scale(inv);
            }
            let norm = clip_global_norm(&mut grads, cfg.grad_clip);
            if !norm.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    msg: "gradient norm is not finite".into(),
                });
            }
            norm_sum += norm;
            steps += 1;
            adam.step(model.params_mut().leaves_mut(), &grads);
        }
        let n = train.len() as f64;
        metrics.push(EpochMetrics {
            epoch,
            train_acc: accuracy(&model, train, &cfg.variant)?,
            eval_acc: accuracy(&model, eval, &cfg.variant)?,
            loss: loss_sum / n,
            terms: names
                .iter()
                .cloned()
                .zip(term_sums.iter().map(|s| s / n))
                .collect(),
            layer_entropy: entropy_sums.iter().map(|s| s / n).collect(),
            head_entropy: head_sums.iter().map(|s| s / n).collect(),
            mismatch_att: att.finish(),
            mismatch_q: q.finish(),
            grad_norm: norm_sum / steps as f64,
        });
    }
    Ok(RunResult { model, metrics })
}

/// Trains a full-precision twin on hard labels with cross-entropy.
pub fn train_teacher(cfg: &TrainConfig, train: &Dataset, eval: &Dataset) -> Result<RunResult> {
    let shape = cfg.model.with_policy(BinarizationPolicy::FULL_PRECISION);
    let model = Encoder::new(shape, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    run(cfg, model, train, eval, Objective::Labels)
}

/// Distills `teacher` into a student initialized from the teacher's weights
/// under `cfg.model.policy`.
pub fn train_student(
    cfg: &TrainConfig,
    teacher: &Encoder,
    train: &Dataset,
    eval: &Dataset,
) -> Result<RunResult> {
    let t_cfg = teacher.config();
    let s_cfg = cfg.model;
    if (
        t_cfg.layers,
        t_cfg.hidden,
        t_cfg.heads,
        t_cfg.ffn_dim,
        t_cfg.vocab,
        t_cfg.max_seq,
        t_cfg.classes,
    ) != (
        s_cfg.layers,
        s_cfg.hidden,
        s_cfg.heads,
        s_cfg.ffn_dim,
        s_cfg.vocab,
        s_cfg.max_seq,
        s_cfg.classes,
    ) {
        return Err(Error::Config(
            "student shape differs from the teacher checkpoint".into(),
        ));
    }
    let t_opts = ForwardOptions {
        variant: cfg.variant,
        window: SteWindow::new(cfg.ste_clip)?,
    };
    let cached = train
        .examples
        .par_iter()
        .map(|ex| {
            teacher
                .forward(&ex.tokens, &t_opts)
                .map(|(logits, probes)| TeacherOut { logits, probes })
        })
        .collect::<Result<Vec<_>>>()?;
    let student = teacher.with_policy(s_cfg.policy);
    run(
        cfg,
        student,
        train,
        eval,
        Objective::Distill {
            spec: &cfg.distill,
            teacher: &cached,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_order_and_oov() {
        let v = Vocab::build(["b a a", "c b a"]);
        assert_eq!(v.token(3), Some("a"));
        assert_eq!(v.token(4), Some("b"));
        assert_eq!(v.token(5), Some("c"));
        assert_eq!(v.encode("a zzz", 8), vec![CLS, 3, UNK]);
        assert_eq!(v.encode("a b c a", 3), vec![CLS, 3, 4]);
    }

    #[test]
    fn synthetic_tasks_are_balanced_and_deterministic() {
        for rule in [SynthRule::MajorityToken, SynthRule::ContainsPattern] {
            let d = synth_task(3, 201, rule).unwrap();
            let c = d.class_counts();
            assert!(c[0].abs_diff(c[1]) <= 1);
            assert_eq!(d, synth_task(3, 201, rule).unwrap());
            assert_ne!(d, synth_task(4, 201, rule).unwrap());
        }
    }

    #[test]
    fn synthetic_labels_follow_rules() {
        let d = synth_task(5, 100, SynthRule::MajorityToken).unwrap();
        for e in &d.examples {
            let ones = e.tokens[1..].iter().filter(|&&t| t == 4).count();
            assert_eq!(e.label, usize::from(2 * ones > e.tokens.len() - 1));
        }
        let d = synth_task(5, 100, SynthRule::ContainsPattern).unwrap();
        for e in &d.examples {
            let s: Vec<usize> = e.tokens[1..].iter().map(|t| t - 3).collect();
            assert_eq!(e.label == 1, contains_pattern(&s));
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let cfg = TrainConfig::default();
        let mut p = Matrix::row_vector(vec![1.0, -1.0]);
        let mut adam = Adam::new(&cfg, &[&p]);
        adam.step(vec![&mut p], &[Matrix::row_vector(vec![0.5, -2.0])]);
        assert!((p.get(0, 0) - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((p.get(0, 1) - (-1.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![Matrix::row_vector(vec![3.0, 4.0])];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].frobenius_norm() - 1.0).abs() < 1e-12);
    }
}
