use bibit::attention::{AttentionVariant, WeightFn};
use bibit::distill::{DistillSpec, Scheme};
use bibit::model::{BinarizationPolicy, Encoder};
use bibit::train::{
    accuracy, metrics_table, synth_task, train_student, train_teacher, Dataset, SynthRule,
    TrainConfig,
};
use bibit::Error;

fn setup(rule: SynthRule, n: usize, seed: u64) -> (TrainConfig, Dataset, Dataset) {
    let data = synth_task(seed, n, rule).unwrap();
    let (train, eval) = data.split(0.2, seed);
    let mut cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    cfg.fit_to(&data);
    (cfg, train, eval)
}

#[test]
fn teacher_learns_the_majority_task() {
    let (mut cfg, train, eval) = setup(SynthRule::MajorityToken, 300, 0);
    cfg.epochs = 50;
    let run = train_teacher(&cfg, &train, &eval).unwrap();
    let best = run.metrics.iter().map(|m| m.train_acc).fold(0.0, f64::max);
    assert!(best >= 0.95, "best train accuracy {best}");
    assert!(run.metrics.iter().all(|m| m.layer_entropy.is_empty()));
    assert_eq!(
        run.model.config().policy,
        BinarizationPolicy::FULL_PRECISION
    );
}

#[test]
fn loss_decreases_early() {
    let (mut cfg, train, eval) = setup(SynthRule::ContainsPattern, 200, 1);
    cfg.epochs = 3;
    let run = train_teacher(&cfg, &train, &eval).unwrap();
    let losses: Vec<f64> = run.metrics.iter().map(|m| m.loss).collect();
    assert!(losses[2] < losses[0], "{losses:?}");
}

#[test]
fn training_is_deterministic() {
    let (mut cfg, train, eval) = setup(SynthRule::ContainsPattern, 120, 2);
    cfg.epochs = 2;
    let a = train_teacher(&cfg, &train, &eval).unwrap();
    let b = train_teacher(&cfg, &train, &eval).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.model.params(), b.model.params());
    let s1 = train_student(&cfg, &a.model, &train, &eval).unwrap();
    let s2 = train_student(&cfg, &b.model, &train, &eval).unwrap();
    assert_eq!(
        metrics_table(&s1.metrics).unwrap().to_csv().unwrap(),
        metrics_table(&s2.metrics).unwrap().to_csv().unwrap()
    );
}

#[test]
fn student_reports_distillation_terms_and_entropy() {
    let (mut cfg, train, eval) = setup(SynthRule::ContainsPattern, 120, 3);
    cfg.epochs = 2;
    let teacher = train_teacher(&cfg, &train, &eval).unwrap();
    let s = train_student(&cfg, &teacher.model, &train, &eval).unwrap();
    let table = metrics_table(&s.metrics).unwrap();
    for col in [
        "loss_q",
        "loss_k",
        "loss_v",
        "loss_hid",
        "loss_pred",
        "entropy_l0",
        "entropy_l1",
        "entropy_mean",
        "mismatch_att_rate",
        "grad_norm",
    ] {
        assert!(table.columns.iter().any(|c| c == col), "missing {col}");
    }
    let m = s.metrics.last().unwrap();
    let sum: f64 = m.terms.iter().map(|(_, v)| v).sum();
    assert!((sum - m.loss).abs() < 1e-9 * m.loss.max(1.0));
    assert!((0.0..=1.0).contains(&m.mismatch_att.rate));

    let baseline = TrainConfig {
        distill: DistillSpec::new(Scheme::BaselineMse),
        variant: AttentionVariant::new(WeightFn::SoftmaxSign),
        ..cfg.clone()
    };
    let s = train_student(&baseline, &teacher.model, &train, &eval).unwrap();
    assert!(s
        .metrics
        .iter()
        .all(|m| m.layer_entropy.iter().all(|&e| e == 0.0)));
}

#[test]
fn student_rejects_a_mismatched_teacher() {
    let (cfg, train, eval) = setup(SynthRule::ContainsPattern, 40, 4);
    let mut other = cfg.model.with_policy(BinarizationPolicy::FULL_PRECISION);
    other.hidden = 16;
    other.ffn_dim = 32;
    let teacher = Encoder::new(
        other,
        &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0),
    )
    .unwrap();
    assert!(matches!(
        train_student(&cfg, &teacher, &train, &eval),
        Err(Error::Config(_))
    ));
}

#[test]
fn exploding_updates_are_reported_as_divergence() {
    let (mut cfg, train, eval) = setup(SynthRule::ContainsPattern, 64, 5);
    cfg.epochs = 5;
    cfg.learning_rate = 1e300;
    match train_teacher(&cfg, &train, &eval) {
        Err(Error::Diverged { epoch, .. }) => assert!(epoch >= 1),
        other => panic!("expected divergence, got {:?}", other.map(|r| r.metrics)),
    }
}

#[test]
fn invalid_hyperparameters_are_rejected() {
    let (cfg, train, eval) = setup(SynthRule::ContainsPattern, 40, 6);
    for bad in [
        TrainConfig {
            epochs: 0,
            ..cfg.clone()
        },
        TrainConfig {
            learning_rate: -1.0,
            ..cfg.clone()
        },
        TrainConfig {
            beta2: 1.0,
            ..cfg.clone()
        },
    ] {
        assert!(matches!(
            train_teacher(&bad, &train, &eval),
            Err(Error::Config(_))
        ));
    }
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let (mut cfg, train, eval) = setup(SynthRule::ContainsPattern, 80, 7);
    cfg.epochs = 1;
    let teacher = train_teacher(&cfg, &train, &eval).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.ckpt");
    teacher
        .model
        .save(&path, serde_json::json!({"role": "teacher"}))
        .unwrap();
    let (back, meta) = Encoder::load(&path).unwrap();
    assert_eq!(meta["role"], "teacher");
    assert_eq!(back.params(), teacher.model.params());
    assert_eq!(
        accuracy(&back, &eval, &cfg.variant).unwrap(),
        accuracy(&teacher.model, &eval, &cfg.variant).unwrap()
    );
}
