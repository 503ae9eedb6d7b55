//! Distillation objectives: layerwise MSE + soft cross-entropy, and
//! direction-matching distillation over unit-norm similarity matrices.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{DualTensor, Tape};
use crate::error::{shape_err, Error, Result};
use crate::model::{LayerProbes, ProbeValues};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scheme {
    BaselineMse,
    Dmd,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::BaselineMse => "baseline",
            Scheme::Dmd => "dmd",
        })
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "baseline" | "mse" => Ok(Scheme::BaselineMse),
            "dmd" => Ok(Scheme::Dmd),
            other => Err(Error::Config(format!(
                "unknown distillation scheme {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Term {
    Att,
    Mha,
    Hid,
    Pred,
    Q,
    K,
    V,
}

impl Term {
    pub const ALL: [Term; 7] = [
        Term::Att,
        Term::Mha,
        Term::Hid,
        Term::Pred,
        Term::Q,
        Term::K,
        Term::V,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Term::Att => "att",
            Term::Mha => "mha",
            Term::Hid => "hid",
            Term::Pred => "pred",
            Term::Q => "q",
            Term::K => "k",
            Term::V => "v",
        }
    }
}

impl FromStr for Term {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Term::ALL
            .into_iter()
            .find(|t| t.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown distillation term {s:?}")))
    }
}

impl Scheme {
    /// Terms that make up the objective, in reporting order.
    pub fn terms(&self) -> &'static [Term] {
        match self {
            Scheme::BaselineMse => &[Term::Att, Term::Mha, Term::Hid, Term::Pred],
            Scheme::Dmd => &[Term::Q, Term::K, Term::V, Term::Hid, Term::Pred],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistillSpec {
    pub scheme: Scheme,
    #[serde(default)]
    pub excluded: BTreeSet<Term>,
}

impl DistillSpec {
    pub fn new(scheme: Scheme) -> Self {
        Self {
            scheme,
            excluded: BTreeSet::new(),
        }
    }

    pub fn without(mut self, term: Term) -> Self {
        self.excluded.insert(term);
        self
    }

    pub fn enabled(&self, term: Term) -> bool {
        !self.excluded.contains(&term)
    }
}

/// Total objective on the tape plus the value of every scheme term, enabled
/// or not. Disabled terms are evaluated for reporting but left out of `total`.
pub struct DistillLoss<'t> {
    pub total: DualTensor<'t>,
    pub terms: Vec<(Term, f64)>,
}

impl DistillLoss<'_> {
    pub fn term(&self, t: Term) -> Option<f64> {
        self.terms.iter().find(|(k, _)| *k == t).map(|(_, v)| *v)
    }
}

/// `XXᵀ / ||XXᵀ||_F` on the tape.
pub fn similarity<'t>(x: DualTensor<'t>) -> Result<DualTensor<'t>> {
    if x.shape().0 == 0 || x.shape().1 == 0 {
        return Err(Error::Degenerate(
            "similarity of an empty activation".into(),
        ));
    }
    x.matmul_t(&x)?.l2_normalize()
}

/// Plain-value [`similarity`].
pub fn similarity_matrix(x: &Matrix) -> Result<Matrix> {
    let tape = Tape::new();
    Ok(similarity(tape.constant(x.clone()))?.value())
}

fn check_layers(student: usize, teacher: usize) -> Result<()> {
    if student != teacher {
        return shape_err(format!(
            "{student} student layers vs {teacher} teacher layers"
        ));
    }
    Ok(())
}

fn sum_terms<'t>(tape: &'t Tape, parts: Vec<DualTensor<'t>>) -> Result<DualTensor<'t>> {
    let mut it = parts.into_iter();
    match it.next() {
        None => Ok(tape.constant(Matrix::scalar(0.0))),
        Some(first) => it.try_fold(first, |acc, p| acc.add(&p)),
    }
}

fn assemble<'t>(
    tape: &'t Tape,
    spec: &DistillSpec,
    values: Vec<(Term, DualTensor<'t>)>,
) -> Result<DistillLoss<'t>> {
    let terms = values.iter().map(|(t, v)| (*t, v.item())).collect();
    let enabled = values
        .into_iter()
        .filter(|(t, _)| spec.enabled(*t))
        .map(|(_, v)| v)
        .collect();
    Ok(DistillLoss {
        total: sum_terms(tape, enabled)?,
        terms,
    })
}

/// Layerwise MSE on attention scores, attention outputs and hidden states,
/// plus soft cross-entropy on the logits.
pub fn baseline_loss<'t>(
    student: &[LayerProbes<'t>],
    teacher: &[ProbeValues],
    logits: DualTensor<'t>,
    teacher_logits: &Matrix,
    spec: &DistillSpec,
) -> Result<DistillLoss<'t>> {
    check_layers(student.len(), teacher.len())?;
    let tape = logits.tape();
    let mut att = Vec::new();
    let mut mha = Vec::new();
    let mut hid = Vec::new();
    for (s, t) in student.iter().zip(teacher) {
        att.push(s.scores.mse(&tape.constant(t.scores.clone()))?);
        mha.push(s.mha.mse(&tape.constant(t.mha.clone()))?);
        hid.push(s.hidden.mse(&tape.constant(t.hidden.clone()))?);
    }
    let values = vec![
        (Term::Att, sum_terms(tape, att)?),
        (Term::Mha, sum_terms(tape, mha)?),
        (Term::Hid, sum_terms(tape, hid)?),
        (Term::Pred, logits.soft_cross_entropy(teacher_logits)?),
    ];
    assemble(tape, spec, values)
}

/// `Σ_l Σ_{F∈{Q,K,V}} ||P_F − P_FT||_F + Σ_l ||H/||H|| − H_T/||H_T|| ||_F + SCE`.
pub fn dmd_loss<'t>(
    student: &[LayerProbes<'t>],
    teacher: &[ProbeValues],
    logits: DualTensor<'t>,
    teacher_logits: &Matrix,
    spec: &DistillSpec,
) -> Result<DistillLoss<'t>> {
    check_layers(student.len(), teacher.len())?;
    let tape = logits.tape();
    let mut q = Vec::new();
    let mut k = Vec::new();
    let mut v = Vec::new();
    let mut hid = Vec::new();
    let pattern = |s: DualTensor<'t>, t: &Matrix| -> Result<DualTensor<'t>> {
        let target = tape.constant(similarity_matrix(t)?);
        similarity(s)?.sub(&target).map(|d| d.frobenius_norm())
    };
    for (s, t) in student.iter().zip(teacher) {
        q.push(pattern(s.q, &t.q)?);
        k.push(pattern(s.k, &t.k)?);
        v.push(pattern(s.v, &t.v)?);
        let th = t.hidden.frobenius_norm();
        if th == 0.0 {
            return Err(Error::Degenerate(
                "teacher hidden state has zero norm".into(),
            ));
        }
        let target = tape.constant(t.hidden.scale(1.0 / th));
        hid.push(s.hidden.l2_normalize()?.sub(&target)?.frobenius_norm());
    }
    let values = vec![
        (Term::Q, sum_terms(tape, q)?),
        (Term::K, sum_terms(tape, k)?),
        (Term::V, sum_terms(tape, v)?),
        (Term::Hid, sum_terms(tape, hid)?),
        (Term::Pred, logits.soft_cross_entropy(teacher_logits)?),
    ];
    assemble(tape, spec, values)
}

pub fn distill_loss<'t>(
    spec: &DistillSpec,
    student: &[LayerProbes<'t>],
    teacher: &[ProbeValues],
    logits: DualTensor<'t>,
    teacher_logits: &Matrix,
) -> Result<DistillLoss<'t>> {
    match spec.scheme {
        Scheme::BaselineMse => baseline_loss(student, teacher, logits, teacher_logits, spec),
        Scheme::Dmd => dmd_loss(student, teacher, logits, teacher_logits, spec),
    }
}

/// How often the realized update on an activation points away from the
/// teacher, and how large the gradient is in each case.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MismatchProbe {
    pub rate: f64,
    /// Mean `|grad|` where the direction matches.
    pub match_mag: f64,
    /// Mean `|grad|` where it does not.
    pub mismatch_mag: f64,
}

/// Running counts behind a [`MismatchProbe`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MismatchTally {
    matched: usize,
    mismatched: usize,
    match_sum: f64,
    mismatch_sum: f64,
}

impl MismatchTally {
    /// Gradient descent moves `X` along `−grad`; it heads toward `X_T` when
    /// `sign(grad) == sign(X − X_T)`. Positions where either side is zero
    /// count as matches.
    pub fn add(&mut self, x: &Matrix, x_t: &Matrix, grad: &Matrix) -> Result<()> {
        x.expect_same_shape(x_t)?;
        x.expect_same_shape(grad)?;
        for ((&a, &b), &g) in x.data().iter().zip(x_t.data()).zip(grad.data()) {
            let d = a - b;
            if d != 0.0 && g != 0.0 && (d > 0.0) != (g > 0.0) {
                self.mismatched += 1;
                self.mismatch_sum += g.abs();
            } else {
                self.matched += 1;
                self.match_sum += g.abs();
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) {
        self.matched += other.matched;
        self.mismatched += other.mismatched;
        self.match_sum += other.match_sum;
        self.mismatch_sum += other.mismatch_sum;
    }

    pub fn finish(&self) -> MismatchProbe {
        let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
        let total = self.matched + self.mismatched;
        MismatchProbe {
            rate: if total == 0 {
                0.0
            } else {
                self.mismatched as f64 / total as f64
            },
            match_mag: mean(self.match_sum, self.matched),
            mismatch_mag: mean(self.mismatch_sum, self.mismatched),
        }
    }
}

pub fn direction_mismatch_probe(x: &Matrix, x_t: &Matrix, grad: &Matrix) -> Result<MismatchProbe> {
    let mut tally = MismatchTally::default();
    tally.add(x, x_t, grad)?;
    Ok(tally.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{AttentionVariant, WeightFn};
    use crate::model::{BinarizationPolicy, Encoder, ForwardOptions, TransformerConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
    }

    fn encoder(seed: u64, policy: BinarizationPolicy) -> Encoder {
        let cfg = TransformerConfig {
            policy,
            ..TransformerConfig::default()
        };
        Encoder::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn identity_similarity() {
        let p = similarity_matrix(&Matrix::identity(2)).unwrap();
        let r = 1.0 / 2f64.sqrt();
        assert!(p.max_abs_diff(&Matrix::identity(2).scale(r)) < 1e-15);
    }

    #[test]
    fn similarity_is_scale_free_symmetric_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = gaussian(&mut rng, 5, 7);
        let p = similarity_matrix(&x).unwrap();
        assert!(p.max_abs_diff(&similarity_matrix(&x.scale(3.7)).unwrap()) < 1e-14);
        assert!(p.max_abs_diff(&p.transpose()) < 1e-15);
        assert!((p.frobenius_norm() - 1.0).abs() < 1e-12);
        assert!(matches!(
            similarity_matrix(&Matrix::zeros(3, 3)),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn uniform_logits_give_ln2() {
        let tape = Tape::new();
        let y = tape.leaf(Matrix::zeros(1, 2));
        let v = y.soft_cross_entropy(&Matrix::zeros(1, 2)).unwrap().item();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
    }

    fn student_teacher_losses(scheme: Scheme, same: bool) -> (f64, Vec<(Term, f64)>, f64) {
        let teacher = encoder(3, BinarizationPolicy::FULL_PRECISION);
        let student = if same {
            teacher.clone()
        } else {
            encoder(4, BinarizationPolicy::FULL_PRECISION)
        };
        let tokens = [2, 5, 9, 11, 4];
        let opts = ForwardOptions::new(AttentionVariant::new(WeightFn::BiAttentionBool));
        let (t_logits, t_probes) = teacher.forward(&tokens, &opts).unwrap();
        let tape = Tape::new();
        let p = student.bind(&tape);
        let out = student.forward_tape(&p, &tokens, &opts).unwrap();
        let loss = distill_loss(
            &DistillSpec::new(scheme),
            &out.layers,
            &t_probes,
            out.logits,
            &t_logits,
        )
        .unwrap();
        let probs = crate::tensor::softmax_rows(&t_logits);
        let entropy = -probs.data().iter().map(|p| p * p.ln()).sum::<f64>();
        (loss.total.item(), loss.terms, entropy)
    }

    #[test]
    fn identical_student_leaves_only_entropy() {
        for scheme in [Scheme::BaselineMse, Scheme::Dmd] {
            let (total, terms, entropy) = student_teacher_losses(scheme, true);
            assert!((total - entropy).abs() < 1e-12, "{scheme}");
            for (t, v) in terms {
                if t != Term::Pred {
                    assert!(v.abs() < 1e-12, "{t:?} {v}");
                }
            }
        }
    }

    #[test]
    fn total_is_sum_of_enabled_terms() {
        for scheme in [Scheme::BaselineMse, Scheme::Dmd] {
            let (total, terms, _) = student_teacher_losses(scheme, false);
            let sum: f64 = terms.iter().map(|(_, v)| v).sum();
            assert!((total - sum).abs() < 1e-12);
            assert!(terms.iter().all(|(_, v)| *v >= 0.0));
        }
    }

    #[test]
    fn excluding_a_term_removes_exactly_it() {
        let teacher = encoder(5, BinarizationPolicy::FULL_PRECISION);
        let student = encoder(6, BinarizationPolicy::BINARIZED);
        let tokens = [2, 7, 7, 1];
        let opts = ForwardOptions::default();
        let (t_logits, t_probes) = teacher.forward(&tokens, &opts).unwrap();
        let tape = Tape::new();
        let p = student.bind(&tape);
        let out = student.forward_tape(&p, &tokens, &opts).unwrap();
        let full = baseline_loss(
            &out.layers,
            &t_probes,
            out.logits,
            &t_logits,
            &DistillSpec::new(Scheme::BaselineMse),
        )
        .unwrap();
        let no_att = baseline_loss(
            &out.layers,
            &t_probes,
            out.logits,
            &t_logits,
            &DistillSpec::new(Scheme::BaselineMse).without(Term::Att),
        )
        .unwrap();
        let att_mse: f64 = out
            .layers
            .iter()
            .zip(&t_probes)
            .map(|(s, t)| {
                let d = s.scores.value().sub(&t.scores).unwrap();
                d.data().iter().map(|v| v * v).sum::<f64>() / d.len() as f64
            })
            .sum();
        assert!((full.total.item() - no_att.total.item() - att_mse).abs() < 1e-9);
        assert_eq!(full.terms, no_att.terms);
    }

    #[test]
    fn scaled_query_costs_nothing_under_dmd() {
        let teacher = encoder(7, BinarizationPolicy::FULL_PRECISION);
        let tokens = [2, 3, 4, 5];
        let (t_logits, t_probes) = teacher
            .forward(&tokens, &ForwardOptions::default())
            .unwrap();
        let tape = Tape::new();
        let mut student_probes = Vec::new();
        for t in &t_probes {
            student_probes.push(crate::model::LayerProbes {
                q: tape.leaf(t.q.scale(2.5)),
                k: tape.leaf(t.k.clone()),
                v: tape.leaf(t.v.clone()),
                scores: tape.leaf(t.scores.clone()),
                mha: tape.leaf(t.mha.clone()),
                hidden: tape.leaf(t.hidden.clone()),
                head_scores: vec![],
                weights: vec![],
                head_entropy: vec![],
            });
        }
        let logits = tape.leaf(t_logits.clone());
        let loss = dmd_loss(
            &student_probes,
            &t_probes,
            logits,
            &t_logits,
            &DistillSpec::new(Scheme::Dmd),
        )
        .unwrap();
        assert!(loss.term(Term::Q).unwrap() < 1e-12);
    }

    /// Straight-line evaluation written without the tape.
    fn reference_dmd(sq: &Matrix, tq: &Matrix, sh: &Matrix, th: &Matrix) -> f64 {
        let sim = |x: &Matrix| {
            let n = x.rows();
            let mut g = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    g[i * n + j] = (0..x.cols()).map(|c| x.get(i, c) * x.get(j, c)).sum();
                }
            }
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            g.into_iter().map(|v| v / norm).collect::<Vec<_>>()
        };
        let (ps, pt) = (sim(sq), sim(tq));
        let q_term = ps
            .iter()
            .zip(&pt)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let ns = sh.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let nt = th.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let h_term = sh
            .data()
            .iter()
            .zip(th.data())
            .map(|(a, b)| (a / ns - b / nt).powi(2))
            .sum::<f64>()
            .sqrt();
        q_term + h_term
    }

    #[test]
    fn dmd_matches_reference_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t = ProbeValues {
            q: gaussian(&mut rng, 4, 6),
            k: gaussian(&mut rng, 4, 6),
            v: gaussian(&mut rng, 4, 6),
            scores: Matrix::zeros(4, 4),
            mha: Matrix::zeros(4, 6),
            hidden: gaussian(&mut rng, 4, 6),
            weights: vec![],
            head_entropy: vec![],
        };
        let (sq, sh) = (gaussian(&mut rng, 4, 6), gaussian(&mut rng, 4, 6));
        let tape = Tape::new();
        let s = crate::model::LayerProbes {
            q: tape.leaf(sq.clone()),
            k: tape.leaf(t.k.clone()),
            v: tape.leaf(t.v.clone()),
            scores: tape.leaf(Matrix::zeros(4, 4)),
            mha: tape.leaf(Matrix::zeros(4, 6)),
            hidden: tape.leaf(sh.clone()),
            head_scores: vec![],
            weights: vec![],
            head_entropy: vec![],
        };
        let logits = Matrix::row_vector(vec![0.3, -0.2]);
        let spec = DistillSpec::new(Scheme::Dmd).without(Term::Pred);
        let loss = dmd_loss(
            &[s],
            std::slice::from_ref(&t),
            tape.leaf(logits.clone()),
            &logits,
            &spec,
        )
        .unwrap();
        let expect = reference_dmd(&sq, &t.q, &sh, &t.hidden);
        assert!((loss.total.item() - expect).abs() < 1e-12);
    }

    #[test]
    fn layer_count_mismatch_is_shape_error() {
        let tape = Tape::new();
        let logits = tape.leaf(Matrix::zeros(1, 2));
        let t = ProbeValues {
            q: Matrix::zeros(1, 1),
            k: Matrix::zeros(1, 1),
            v: Matrix::zeros(1, 1),
            scores: Matrix::zeros(1, 1),
            mha: Matrix::zeros(1, 1),
            hidden: Matrix::zeros(1, 1),
            weights: vec![],
            head_entropy: vec![],
        };
        assert!(matches!(
            baseline_loss(
                &[],
                &[t],
                logits,
                &Matrix::zeros(1, 2),
                &DistillSpec::new(Scheme::BaselineMse)
            ),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn mismatch_probe_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = gaussian(&mut rng, 10, 10);
        let p = direction_mismatch_probe(&x, &x, &gaussian(&mut rng, 10, 10)).unwrap();
        assert_eq!(p.rate, 0.0);

        let t = gaussian(&mut rng, 30, 30);
        let g = gaussian(&mut rng, 30, 30);
        let a = direction_mismatch_probe(
            &x.select_rows(&[0; 30]).unwrap().slice_cols(0, 10).unwrap(),
            &t.slice_cols(0, 10).unwrap(),
            &g.slice_cols(0, 10).unwrap(),
        )
        .unwrap();
        let b = direction_mismatch_probe(
            &x.select_rows(&[0; 30]).unwrap().slice_cols(0, 10).unwrap(),
            &t.slice_cols(0, 10).unwrap(),
            &g.slice_cols(0, 10).unwrap().scale(2.0),
        )
        .unwrap();
        assert_eq!(a.rate, b.rate);
        assert!((b.match_mag - 2.0 * a.match_mag).abs() < 1e-12);
        assert!((b.mismatch_mag - 2.0 * a.mismatch_mag).abs() < 1e-12);
        assert!(matches!(
            direction_mismatch_probe(&x, &t, &g),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn sign_quantized_mse_mismatch_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = gaussian(&mut rng, 400, 500);
        let t = gaussian(&mut rng, 400, 500);
        let tape = Tape::new();
        let leaf = tape.leaf(x.clone());
        let loss = leaf
            .sign_ste(crate::binarize::SteWindow::new(1e9).unwrap())
            .unwrap()
            .mse(&tape.constant(t.clone()))
            .unwrap();
        tape.backward(loss).unwrap();
        let p = direction_mismatch_probe(&x, &t, &leaf.grad().unwrap()).unwrap();
        assert!((p.rate - 0.1417).abs() < 0.005, "{}", p.rate);
    }
}
