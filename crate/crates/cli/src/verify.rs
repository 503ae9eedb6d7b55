//! Invariant suites run by `bibit verify`.

use std::fmt;
use std::str::FromStr;

use bibit::analysis::order_preservation_check;
use bibit::attention::{
    attention_packed, binary_entropy, binary_weight, multi_head_attention, AttentionMode,
    AttentionVariant, WeightFn,
};
use bibit::autodiff::Tape;
use bibit::binarize::{bool_bwd, sign, sign_bwd, SteWindow};
use bibit::bitcore::{bamm, bamm_row_corrected, pack, unpack, xnor_matmul, Encoding};
use bibit::distill::{
    direction_mismatch_probe, distill_loss, similarity_matrix, DistillSpec, Scheme, Term,
};
use bibit::model::{BinarizationPolicy, Encoder, ForwardOptions, TransformerConfig};
use bibit::report::Check;
use bibit::{Matrix, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Bitops,
    Gradients,
    Attention,
    Distill,
    All,
}

impl Suite {
    pub const NAMES: [&'static str; 5] = ["bitops", "gradients", "attention", "distill", "all"];

    fn parts(self) -> Vec<Suite> {
        match self {
            Suite::All => vec![
                Suite::Bitops,
                Suite::Gradients,
                Suite::Attention,
                Suite::Distill,
            ],
            s => vec![s],
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let i = [
            Suite::Bitops,
            Suite::Gradients,
            Suite::Attention,
            Suite::Distill,
            Suite::All,
        ]
        .iter()
        .position(|s| s == self)
        .expect("listed");
        f.write_str(Self::NAMES[i])
    }
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "bitops" => Ok(Suite::Bitops),
            "gradients" => Ok(Suite::Gradients),
            "attention" => Ok(Suite::Attention),
            "distill" => Ok(Suite::Distill),
            "all" => Ok(Suite::All),
            other => Err(format!(
                "unknown suite {other:?}; expected one of {}",
                Self::NAMES.join(", ")
            )),
        }
    }
}

type CheckFn = fn(u64) -> Result<(bool, String)>;

/// Runs every check in `suite`. Errors inside a check are recorded as a
/// failed check rather than aborting the suite.
pub fn run_suite(suite: Suite, seed: u64) -> Vec<Check> {
    let mut checks = Vec::new();
    for part in suite.parts() {
        let list: Vec<(&str, CheckFn)> = match part {
            Suite::Bitops => vec![
                ("bitops.xnor_matches_float_gemm", xnor_matches_float),
                ("bitops.bamm_matches_bool_product", bamm_matches_float),
                ("bitops.pack_round_trip", pack_round_trip),
                ("bitops.row_corrected_form_differs", row_corrected_differs),
            ],
            Suite::Gradients => vec![
                ("gradients.finite_differences", finite_differences),
                ("gradients.sign_ste_mask", sign_mask),
                ("gradients.bool_ste_mask", bool_mask),
            ],
            Suite::Attention => vec![
                ("attention.packed_matches_training", packed_matches_training),
                (
                    "attention.softmax_sign_has_zero_entropy",
                    softmax_sign_degenerates,
                ),
                ("attention.bool_is_scale_invariant", bool_scale_invariant),
                ("attention.softmax_shift_preserves_order", order_preserved),
            ],
            Suite::Distill => vec![
                (
                    "distill.similarity_is_scale_invariant",
                    similarity_scale_invariant,
                ),
                (
                    "distill.identical_student_has_zero_feature_loss",
                    identical_student,
                ),
                (
                    "distill.exclusion_removes_only_that_term",
                    exclusion_is_local,
                ),
                ("distill.sign_mismatch_rate", sign_mismatch_rate),
            ],
            Suite::All => unreachable!("expanded above"),
        };
        for (name, f) in list {
            let (passed, detail) = f(seed).unwrap_or_else(|e| (false, format!("error: {e}")));
            checks.push(Check::new(name, passed, detail));
        }
    }
    checks
}

fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

fn signs(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_fn(r, c, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 })
}

fn xnor_matches_float(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..200 {
        let (m, k, n) = (
            rng.random_range(1..=96),
            rng.random_range(1..=200),
            rng.random_range(1..=96),
        );
        let (a, b) = (signs(&mut rng, m, k), signs(&mut rng, n, k));
        let got = xnor_matmul(
            &pack(&a, Encoding::PlusMinusOne)?,
            &pack(&b, Encoding::PlusMinusOne)?,
        )?
        .to_matrix();
        bad += usize::from(got != a.matmul_t(&b)?);
    }
    Ok((bad == 0, format!("{bad} of 200 shapes differ")))
}

fn bamm_matches_float(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..200 {
        let (m, k, n) = (
            rng.random_range(1..=96),
            rng.random_range(1..=200),
            rng.random_range(1..=96),
        );
        let ba = Matrix::from_fn(m, k, |_, _| f64::from(u8::from(rng.random::<bool>())));
        let bv = signs(&mut rng, k, n);
        let got = bamm(
            &pack(&ba, Encoding::ZeroOne)?,
            &pack(&bv, Encoding::PlusMinusOne)?,
        )?
        .to_matrix();
        bad += usize::from(got != ba.matmul(&bv)?);
    }
    Ok((bad == 0, format!("{bad} of 200 shapes differ")))
}

fn pack_round_trip(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for cols in [1, 63, 64, 65, 130] {
        let x = gaussian(&mut rng, 7, cols);
        let p = pack(&x, Encoding::PlusMinusOne)?;
        bad += usize::from(unpack(&p) != x.map(sign) || !p.padding_is_clear());
    }
    Ok((bad == 0, format!("{bad} of 5 widths failed")))
}

fn row_corrected_differs(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ba = Matrix::from_fn(6, 10, |_, _| f64::from(u8::from(rng.random::<bool>())));
    let bv = signs(&mut rng, 10, 5);
    let literal = bamm_row_corrected(
        &pack(&ba, Encoding::ZeroOne)?,
        &pack(&bv, Encoding::PlusMinusOne)?,
    )?
    .to_matrix();
    let differs = literal != ba.matmul(&bv)?;
    Ok((
        differs,
        "row-sum correction is not the bool(A)·B_V product".into(),
    ))
}

/// Central differences on a two-layer full-precision encoder, sampling
/// entries of every parameter tensor.
pub fn finite_difference_errors(seed: u64, per_tensor: usize) -> Result<Vec<(String, f64)>> {
    let cfg = TransformerConfig {
        layers: 2,
        hidden: 8,
        heads: 2,
        ffn_dim: 16,
        vocab: 12,
        max_seq: 8,
        ..TransformerConfig::default()
    }
    .with_policy(BinarizationPolicy::FULL_PRECISION);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Encoder::new(cfg, &mut rng)?;
    let tokens = [2, 5, 7, 3, 11];
    let opts = ForwardOptions::default();
    let loss_of = |m: &Encoder| -> Result<f64> {
        let tape = Tape::new();
        let p = m.bind_constant(&tape);
        Ok(m.forward_tape(&p, &tokens, &opts)?
            .logits
            .cross_entropy(&[1])?
            .item())
    };
    let tape = Tape::new();
    let bound = model.bind(&tape);
    let loss = model
        .forward_tape(&bound, &tokens, &opts)?
        .logits
        .cross_entropy(&[1])?;
    tape.backward(loss)?;
    let grads = bound
        .leaves()
        .iter()
        .map(|d| d.grad())
        .collect::<Result<Vec<_>>>()?;
    let names: Vec<String> = model.params().named().into_iter().map(|(n, _)| n).collect();
    let h = 1e-5;
    let mut out = Vec::new();
    for (t, name) in names.iter().enumerate() {
        let shape = model.params().leaves()[t].shape();
        let len = shape.0 * shape.1;
        let mut worst: f64 = 0.0;
        for _ in 0..per_tensor.min(len) {
            let idx = rng.random_range(0..len);
            let probe = |delta: f64| -> Result<f64> {
                let mut m = model.clone();
                m.params_mut().leaves_mut()[t].data_mut()[idx] += delta;
                loss_of(&m)
            };
            let numeric = (probe(h)? - probe(-h)?) / (2.0 * h);
            let analytic = grads[t].data()[idx];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        out.push((name.clone(), worst));
    }
    Ok(out)
}

fn finite_differences(seed: u64) -> Result<(bool, String)> {
    let errs = finite_difference_errors(seed, 6)?;
    let (name, worst) =
        errs.iter().fold(
            ("", 0.0),
            |acc, (n, e)| if *e > acc.1 { (n.as_str(), *e) } else { acc },
        );
    Ok((
        worst < 1e-4,
        format!(
            "worst relative error {worst:.2e} at {name} over {} tensors",
            errs.len()
        ),
    ))
}

fn ste_points(seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(1, 100_000, |_, j| match j % 50 {
        0 => 1.0,
        1 => -1.0,
        2 => 0.0,
        _ => rng.random_range(-3.0..3.0),
    })
}

fn mask_check(
    seed: u64,
    bwd: fn(&Matrix, &Matrix, SteWindow) -> Result<Matrix>,
) -> Result<(bool, String)> {
    let x = ste_points(seed);
    let up = Matrix::filled(1, x.cols(), 1.0);
    let g = bwd(&x, &up, SteWindow::default())?;
    let bad = x
        .data()
        .iter()
        .zip(g.data())
        .filter(|(&v, &gv)| gv != if v.abs() <= 1.0 { 1.0 } else { 0.0 })
        .count();
    Ok((
        bad == 0,
        format!("{bad} of {} points off the |x| ≤ 1 mask", x.cols()),
    ))
}

fn sign_mask(seed: u64) -> Result<(bool, String)> {
    mask_check(seed, sign_bwd)
}

fn bool_mask(seed: u64) -> Result<(bool, String)> {
    mask_check(seed, bool_bwd)
}

fn packed_matches_training(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let variants = [
        WeightFn::BiAttentionBool,
        WeightFn::SoftmaxSign,
        WeightFn::HardSign,
        WeightFn::MeanShift,
        WeightFn::Quantile(0.5),
        WeightFn::SoftmaxShift(0.1),
    ];
    let mut bad = 0;
    for wf in variants {
        let (n, d) = (7, 16);
        let (q, k, v) = (
            gaussian(&mut rng, n, d),
            gaussian(&mut rng, n, d),
            gaussian(&mut rng, n, d),
        );
        let mask: Vec<bool> = (0..n).map(|j| j < 5).collect();
        let variant = AttentionVariant::new(wf);
        let tape = Tape::new();
        let out = multi_head_attention(
            tape.leaf(q.clone()),
            tape.leaf(k.clone()),
            tape.leaf(v.clone()),
            &mask,
            2,
            AttentionMode::Binarized(variant),
            SteWindow::default(),
        )?;
        let packed = attention_packed(&q, &k, &v, &mask, 2, &variant)?;
        bad += usize::from(out.context.value() != packed.context);
    }
    Ok((
        bad == 0,
        format!("{bad} of {} variants differ", variants.len()),
    ))
}

fn softmax_sign_degenerates(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = gaussian(&mut rng, 9, 9).scale(3.0);
    let w = binary_weight(
        &a,
        &[true; 9],
        &AttentionVariant::new(WeightFn::SoftmaxSign),
    )?;
    let h = binary_entropy(w.data())?;
    Ok((
        h == 0.0 && w.data().iter().all(|&v| v == 1.0),
        format!("entropy {h}"),
    ))
}

fn bool_scale_invariant(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = gaussian(&mut rng, 12, 12);
    let variant = AttentionVariant::new(WeightFn::BiAttentionBool);
    let base = binary_weight(&a, &[true; 12], &variant)?;
    let same = [0.125, 0.5, 3.0, 1e3]
        .iter()
        .all(|&c| binary_weight(&a.scale(c), &[true; 12], &variant).is_ok_and(|w| w == base));
    Ok((same, "scales 0.125, 0.5, 3, 1000".into()))
}

fn order_preserved(seed: u64) -> Result<(bool, String)> {
    let r = order_preservation_check(5000, 12, 0.1, seed)?;
    Ok((
        r.violations == 0,
        format!("{} violations in {} rows", r.violations, r.rows),
    ))
}

fn similarity_scale_invariant(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = gaussian(&mut rng, 6, 10);
    let diff = similarity_matrix(&x)?.max_abs_diff(&similarity_matrix(&x.scale(7.5))?);
    Ok((diff < 1e-12, format!("max difference {diff:.1e}")))
}

fn student_and_teacher(seed: u64) -> Result<(Encoder, Encoder)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let teacher = Encoder::new(
        TransformerConfig::default().with_policy(BinarizationPolicy::FULL_PRECISION),
        &mut rng,
    )?;
    let student = teacher.with_policy(BinarizationPolicy::BINARIZED);
    Ok((teacher, student))
}

fn identical_student(seed: u64) -> Result<(bool, String)> {
    let (teacher, _) = student_and_teacher(seed)?;
    let tokens = [2, 9, 4, 17, 5];
    let opts = ForwardOptions::default();
    let (t_logits, t_probes) = teacher.forward(&tokens, &opts)?;
    let mut worst: f64 = 0.0;
    for scheme in [Scheme::Dmd, Scheme::BaselineMse] {
        let tape = Tape::new();
        let out = teacher.forward_tape(&teacher.bind(&tape), &tokens, &opts)?;
        let loss = distill_loss(
            &DistillSpec::new(scheme),
            &out.layers,
            &t_probes,
            out.logits,
            &t_logits,
        )?;
        for (t, v) in &loss.terms {
            if *t != Term::Pred {
                worst = worst.max(v.abs());
            }
        }
    }
    Ok((worst < 1e-9, format!("largest feature term {worst:.1e}")))
}

fn exclusion_is_local(seed: u64) -> Result<(bool, String)> {
    let (teacher, student) = student_and_teacher(seed)?;
    let tokens = [2, 9, 4, 17, 5, 30];
    let opts = ForwardOptions::default();
    let (t_logits, t_probes) = teacher.forward(&tokens, &opts)?;
    let total = |spec: &DistillSpec| -> Result<(f64, Vec<(Term, f64)>)> {
        let tape = Tape::new();
        let out = student.forward_tape(&student.bind(&tape), &tokens, &opts)?;
        let l = distill_loss(spec, &out.layers, &t_probes, out.logits, &t_logits)?;
        Ok((l.total.item(), l.terms))
    };
    let mut worst: f64 = 0.0;
    for scheme in [Scheme::Dmd, Scheme::BaselineMse] {
        let (full, terms) = total(&DistillSpec::new(scheme))?;
        for &(t, v) in &terms {
            let (without, _) = total(&DistillSpec::new(scheme).without(t))?;
            worst = worst.max((full - without - v).abs());
        }
    }
    Ok((worst < 1e-9, format!("largest discrepancy {worst:.1e}")))
}

fn sign_mismatch_rate(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = gaussian(&mut rng, 200, 500);
    let xt = gaussian(&mut rng, 200, 500);
    let tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let loss = leaf
        .sign_ste(SteWindow::new(f64::MAX)?)?
        .mse(&tape.constant(xt.clone()))?;
    tape.backward(loss)?;
    let probe = direction_mismatch_probe(&x, &xt, &leaf.grad()?)?;
    Ok((
        (probe.rate - 0.1417).abs() < 0.005,
        format!("rate {:.4}", probe.rate),
    ))
}
