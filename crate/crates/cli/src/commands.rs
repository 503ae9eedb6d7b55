//! Command execution shared by the binary and `replay`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use bibit::analysis::{
    self, arch_preset, balance_check, calibrate_seq_len, compare_cost, entropy_ablation,
    order_preservation_check, score_distribution_check, simulate_mismatch, threshold_curve,
    BitAssignment, MismatchSimConfig,
};
use bibit::model::Encoder;
use bibit::report::{Cell, ReportRecord, Table};
use bibit::train::{self, Dataset, RunResult};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::config::{Role, TrainFile};
use crate::output::{self, InputFile, RunManifest};
use crate::verify::{self, Suite};

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILED: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_MISSING_TEACHER: u8 = 3;
pub const EXIT_DIVERGED: u8 = 4;

/// Default sequence length for cost estimates: the one at which BERT-base
/// costs 22.5 GFLOPs at full precision.
pub const REFERENCE_GFLOPS: f64 = 22.5;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    MissingTeacher(String),
    Diverged(String),
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::MissingTeacher(_) => EXIT_MISSING_TEACHER,
            CliError::Diverged(_) => EXIT_DIVERGED,
            CliError::Failed(_) => EXIT_FAILED,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::MissingTeacher(m) => write!(f, "missing teacher checkpoint: {m}"),
            CliError::Diverged(m) => write!(f, "{m}"),
            CliError::Failed(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<bibit::Error> for CliError {
    fn from(e: bibit::Error) -> Self {
        match e {
            bibit::Error::Diverged { .. } => CliError::Diverged(e.to_string()),
            bibit::Error::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Failed(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Failed(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Experiment {
    Mismatch,
    Threshold,
    Scores,
    Balance,
    Entropy,
    Order,
}

impl Experiment {
    pub const ALL: [Experiment; 6] = [
        Experiment::Mismatch,
        Experiment::Threshold,
        Experiment::Scores,
        Experiment::Balance,
        Experiment::Entropy,
        Experiment::Order,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Mismatch => "mismatch",
            Experiment::Threshold => "threshold",
            Experiment::Scores => "scores",
            Experiment::Balance => "balance",
            Experiment::Entropy => "entropy",
            Experiment::Order => "order",
        }
    }
}

impl std::str::FromStr for Experiment {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| format!("unknown experiment {s:?}"))
    }
}

/// Fully resolved experiment parameters; unused fields are ignored by
/// experiments that do not need them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeParams {
    pub samples: usize,
    pub seed: u64,
    pub max_bits: u32,
    pub range: f64,
    pub sigma_student: f64,
    pub sigma_teacher: f64,
    pub ks: Vec<usize>,
    pub dims: Vec<usize>,
    pub shifts: Vec<f64>,
    pub fractions: Vec<f64>,
    pub row_len: usize,
    pub taus: Vec<f64>,
}

impl AnalyzeParams {
    pub fn defaults(experiment: Experiment) -> Self {
        let samples = match experiment {
            Experiment::Mismatch | Experiment::Scores => 1_000_000,
            Experiment::Threshold | Experiment::Balance => 100_000,
            Experiment::Order => 10_000,
            Experiment::Entropy => 0,
        };
        Self {
            samples,
            seed: 0,
            max_bits: 8,
            range: 1.0,
            sigma_student: 1.0,
            sigma_teacher: 1.0,
            ks: vec![2, 4, 8, 16, 32],
            dims: vec![2, 16, 64],
            shifts: vec![0.0, 1.0],
            fractions: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            row_len: 12,
            taus: vec![0.05, 0.1, 0.2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "lowercase")]
pub enum Invocation {
    Verify {
        suite: Suite,
        seed: u64,
    },
    Train {
        config: TrainFile,
    },
    Analyze {
        experiment: Experiment,
        params: AnalyzeParams,
    },
    Cost {
        arch: String,
        bits: String,
        seq_len: Option<usize>,
    },
}

impl Invocation {
    pub fn command(&self) -> &'static str {
        match self {
            Invocation::Verify { .. } => "verify",
            Invocation::Train { .. } => "train",
            Invocation::Analyze { .. } => "analyze",
            Invocation::Cost { .. } => "cost",
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            Invocation::Verify { seed, .. } => *seed,
            Invocation::Train { config } => config.seed,
            Invocation::Analyze { params, .. } => params.seed,
            Invocation::Cost { .. } => 0,
        }
    }

    /// Applies `BIBIT_SEED`-style overrides.
    pub fn with_seed(mut self, seed: u64) -> Self {
        match &mut self {
            Invocation::Verify { seed: s, .. } => *s = seed,
            Invocation::Train { config } => config.seed = seed,
            Invocation::Analyze { params, .. } => params.seed = seed,
            Invocation::Cost { .. } => {}
        }
        self
    }

    fn input_paths(&self) -> Vec<PathBuf> {
        match self {
            Invocation::Train { config } => config
                .dataset
                .path
                .iter()
                .chain(config.teacher_checkpoint.iter())
                .cloned()
                .collect(),
            _ => Vec::new(),
        }
    }
}

/// Result of one command.
#[derive(Debug)]
pub struct Outcome {
    pub dir: PathBuf,
    pub record: ReportRecord,
    /// Extra JSON printed to stdout (cost estimates).
    pub stdout_json: Option<serde_json::Value>,
}

impl Outcome {
    pub fn exit_code(&self) -> u8 {
        if self.record.passed() {
            EXIT_OK
        } else {
            EXIT_FAILED
        }
    }
}

/// Files a command writes besides the manifest and summary.
enum Artifact {
    Csv(String, Table),
    Checkpoint(String, Box<Encoder>, serde_json::Value),
}

/// Runs `inv`, writing `<root>/<command>/<timestamp>-<hash>/`.
pub fn execute(inv: &Invocation, root: &Path) -> Result<Outcome, CliError> {
    let mut inputs = Vec::new();
    for p in inv.input_paths() {
        let sha256 = output::sha256_file(&p).map_err(|e| match inv {
            Invocation::Train { config }
                if config.teacher_checkpoint.as_deref() == Some(p.as_path()) =>
            {
                CliError::MissingTeacher(format!("{}: {e}", p.display()))
            }
            _ => CliError::Failed(format!("cannot read {}: {e}", p.display())),
        })?;
        inputs.push(InputFile { path: p, sha256 });
    }
    let (record, artifacts, stdout_json) = match inv {
        Invocation::Verify { suite, seed } => run_verify(*suite, *seed),
        Invocation::Train { config } => run_train(config)?,
        Invocation::Analyze { experiment, params } => run_analyze(*experiment, params)?,
        Invocation::Cost {
            arch,
            bits,
            seq_len,
        } => run_cost(arch, bits, *seq_len)?,
    };
    let hash = output::input_hash(inv, &inputs);
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ").to_string();
    let dir = output::create_run_dir(root, inv.command(), &hash, &stamp)?;
    let mut outputs = Vec::new();
    for a in artifacts {
        match a {
            Artifact::Csv(name, table) => {
                table.write_csv(&dir.join(&name))?;
                outputs.push(name);
            }
            Artifact::Checkpoint(name, model, meta) => {
                model.save(&dir.join(&name), meta)?;
                outputs.push(name);
            }
        }
    }
    let summary = serde_json::to_string_pretty(&record.summary_json()).expect("summary serializes");
    fs::write(dir.join("summary.json"), summary + "\n")?;
    outputs.push("summary.json".into());
    let manifest = RunManifest {
        command: inv.command().into(),
        invocation: inv.clone(),
        seed: inv.seed(),
        input_hash: hash,
        inputs,
        outputs,
        created: chrono::Utc::now().to_rfc3339(),
        version: env!("CARGO_PKG_VERSION").into(),
    };
    output::write_manifest(&dir, &manifest)?;
    Ok(Outcome {
        dir,
        record,
        stdout_json,
    })
}

/// Re-runs the invocation recorded in a manifest, refusing when an input
/// file no longer matches its recorded digest.
pub fn replay(manifest_path: &Path, root: &Path) -> Result<Outcome, CliError> {
    let m = output::read_manifest(manifest_path).map_err(|e| {
        CliError::Usage(format!(
            "cannot read manifest {}: {e}",
            manifest_path.display()
        ))
    })?;
    for input in &m.inputs {
        let now = output::sha256_file(&input.path).map_err(|e| {
            CliError::Failed(format!(
                "input {} is unavailable: {e}",
                input.path.display()
            ))
        })?;
        if now != input.sha256 {
            return Err(CliError::Failed(format!(
                "input {} changed since the recorded run",
                input.path.display()
            )));
        }
    }
    execute(&m.invocation, root)
}

type Produced = (ReportRecord, Vec<Artifact>, Option<serde_json::Value>);

fn checks_table(record: &ReportRecord) -> Table {
    let mut t = Table::new(["check", "passed", "detail"]);
    for c in &record.checks {
        t.push(vec![
            Cell::from(c.name.as_str()),
            c.passed.into(),
            Cell::from(c.detail.as_str()),
        ])
        .expect("three columns");
    }
    t
}

fn run_verify(suite: Suite, seed: u64) -> Produced {
    let mut record = ReportRecord::new(format!("verify-{suite}"));
    record.seed = Some(seed);
    record.config = serde_json::json!({ "suite": suite });
    record.checks = verify::run_suite(suite, seed);
    let table = checks_table(&record);
    (
        record,
        vec![Artifact::Csv("checks.csv".into(), table)],
        None,
    )
}

fn load_data(cfg: &TrainFile, max_seq: usize) -> Result<Dataset, CliError> {
    match &cfg.dataset.path {
        Some(p) => Ok(train::load_dataset(
            p,
            cfg.file_format().expect("path set"),
            max_seq,
        )?),
        None => Ok(train::synth_task(
            cfg.seed,
            cfg.dataset.examples,
            cfg.synth_rule()?,
        )?),
    }
}

fn run_train(file: &TrainFile) -> Result<Produced, CliError> {
    let mut cfg = file.train_config()?;
    let data = load_data(file, cfg.model.max_seq)?;
    let (tr, ev) = data.split(file.dataset.eval_fraction, file.seed);
    let result: RunResult = match file.role {
        Role::Teacher => {
            cfg.fit_to(&data);
            train::train_teacher(&cfg, &tr, &ev)?
        }
        Role::Student => {
            let path = file.teacher_checkpoint.as_ref().ok_or_else(|| {
                CliError::MissingTeacher("student runs need teacher_checkpoint".into())
            })?;
            let (teacher, _) = Encoder::load(path)
                .map_err(|e| CliError::MissingTeacher(format!("{}: {e}", path.display())))?;
            cfg.model = teacher.config().with_policy(file.policy());
            train::train_student(&cfg, &teacher, &tr, &ev)?
        }
    };
    let table = train::metrics_table(&result.metrics)?;
    let mut record = ReportRecord::new(format!(
        "train-{}",
        serde_json::to_value(file.role)
            .expect("role")
            .as_str()
            .unwrap_or("run")
    ));
    record.seed = Some(file.seed);
    record.config = serde_json::to_value(file).expect("config serializes");
    if let Some(last) = result.metrics.last() {
        record.scalar("final_train_acc", last.train_acc);
        record.scalar("final_eval_acc", last.eval_acc);
        record.scalar("final_loss", last.loss);
        if let Some(h) = last.mean_entropy() {
            record.scalar("final_entropy_mean", h);
        }
    }
    record.scalar("grad_clip", cfg.grad_clip);
    record.tables.insert("metrics".into(), table.clone());
    let meta = serde_json::json!({ "role": file.role, "seed": file.seed, "vocab": data.vocab.len(), "classes": data.classes });
    Ok((
        record,
        vec![
            Artifact::Csv("metrics.csv".into(), table),
            Artifact::Checkpoint("model.ckpt".into(), Box::new(result.model), meta),
        ],
        None,
    ))
}

fn within(x: f64, target: f64, tol: f64) -> bool {
    (x - target).abs() <= tol
}

fn run_analyze(experiment: Experiment, p: &AnalyzeParams) -> Result<Produced, CliError> {
    let mut record = ReportRecord::new(format!("analyze-{}", experiment.name()));
    record.seed = Some(p.seed);
    record.config = serde_json::to_value(p).expect("params serialize");
    let table = match experiment {
        Experiment::Mismatch => {
            let cfg = MismatchSimConfig {
                samples: p.samples,
                bits: (1..=p.max_bits).collect(),
                range: p.range,
                sigma_student: p.sigma_student,
                sigma_teacher: p.sigma_teacher,
                seed: p.seed,
            };
            let rows = simulate_mismatch(&cfg)?;
            let monotone = rows.windows(2).all(|w| w[1].rate <= w[0].rate);
            record.check(
                "rates_non_increasing_in_bits",
                monotone,
                format!("{:?}", rows.iter().map(|r| r.rate).collect::<Vec<_>>()),
            );
            let reference = [(1, 0.1436, 0.010), (8, 0.0249, 0.005)];
            for (bits, target, tol) in reference {
                if let Some(r) = rows.iter().find(|r| r.bits == bits) {
                    record.scalar(format!("rate_q{bits}"), r.rate);
                    record.check(
                        format!("q{bits}_near_reference"),
                        within(r.rate, target, tol),
                        format!("{:.4} vs {target} ± {tol}", r.rate),
                    );
                }
            }
            analysis::mismatch_table(&rows)?
        }
        Experiment::Threshold => {
            let rows = threshold_curve(&p.ks, p.samples, p.seed)?;
            let decreasing = rows.windows(2).all(|w| w[1].tau < w[0].tau);
            record.check(
                "strictly_decreasing_in_k",
                decreasing,
                format!("{:?}", rows.iter().map(|r| r.tau).collect::<Vec<_>>()),
            );
            if let Some(r) = rows.iter().find(|r| r.k == 2) {
                record.check(
                    "tau_2_is_half",
                    within(r.tau, 0.5, 0.01),
                    format!("{:.4}", r.tau),
                );
            }
            analysis::threshold_table(&rows)?
        }
        Experiment::Scores => {
            let mut t = Table::new(["dim", "score", "empirical", "exact"]);
            for &d in &p.dims {
                let r = score_distribution_check(d, p.samples, p.seed)?;
                for &(s, e, x) in &r.pmf {
                    t.push(vec![d.into(), s.into(), e.into(), x.into()])?;
                }
                record.scalar(format!("d{d}_chi_square"), r.chi_square);
                record.scalar(format!("d{d}_p_value"), r.p_value);
                record.scalar(format!("d{d}_std"), r.std);
                record.check(
                    format!("d{d}_chi_square"),
                    r.p_value > 0.01,
                    format!(
                        "chi² {:.2} on {} dof, p = {:.3}",
                        r.chi_square, r.dof, r.p_value
                    ),
                );
                let sd = (d as f64).sqrt();
                record.check(
                    format!("d{d}_moments"),
                    r.mean.abs() < 0.1 && within(r.std, sd, 0.05 * sd),
                    format!("mean {:.4}, std {:.4} vs {sd:.4}", r.mean, r.std),
                );
            }
            t
        }
        Experiment::Balance => {
            let mut t = Table::new(["shift", "before", "after", "entropy_after"]);
            let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
            for &s in &p.shifts {
                let r = balance_check(p.samples, s, p.seed)?;
                t.push(vec![
                    s.into(),
                    r.before.into(),
                    r.after.into(),
                    r.entropy_after.into(),
                ])?;
                let expect = std_normal.cdf(s);
                record.check(
                    format!("shift_{s}_before"),
                    within(r.before, expect, 0.01),
                    format!("{:.4} vs Φ({s}) = {expect:.4}", r.before),
                );
                record.check(
                    format!("shift_{s}_after_balanced"),
                    (0.49..=0.51).contains(&r.after) && r.entropy_after >= 0.999,
                    format!("{:.4}, entropy {:.5}", r.after, r.entropy_after),
                );
            }
            t
        }
        Experiment::Entropy => {
            let rows = entropy_ablation(&p.fractions)?;
            let symmetric = rows.iter().all(|a| {
                rows.iter()
                    .filter(|b| (a.zero_fraction + b.zero_fraction - 1.0).abs() < 1e-12)
                    .all(|b| a.entropy == b.entropy)
            });
            record.check("symmetric_in_p", symmetric, String::new());
            analysis::entropy_table(&rows)?
        }
        Experiment::Order => {
            let mut t = Table::new(["tau", "rows", "violations"]);
            for &tau in &p.taus {
                let r = order_preservation_check(p.samples, p.row_len, tau, p.seed)?;
                t.push(vec![tau.into(), r.rows.into(), r.violations.into()])?;
                record.check(
                    format!("tau_{tau}_top_set"),
                    r.violations == 0,
                    format!("{} violations", r.violations),
                );
            }
            t
        }
    };
    record
        .tables
        .insert(experiment.name().into(), table.clone());
    Ok((
        record,
        vec![Artifact::Csv(format!("{}.csv", experiment.name()), table)],
        None,
    ))
}

/// Sequence length used when `cost` is not given one.
pub fn reference_seq_len() -> Result<usize, CliError> {
    Ok(calibrate_seq_len(
        &arch_preset("bert-base")?,
        REFERENCE_GFLOPS * 1e9,
    )?)
}

fn run_cost(arch: &str, bits: &str, seq_len: Option<usize>) -> Result<Produced, CliError> {
    let cfg = arch_preset(arch)?;
    let assignment: BitAssignment = bits.parse()?;
    let n = match seq_len {
        Some(n) => n,
        None => reference_seq_len()?,
    };
    let c = compare_cost(&cfg, assignment, n)?;
    let mut record = ReportRecord::new(format!("cost-{arch}-{assignment}"));
    record.config = serde_json::json!({ "arch": arch, "bits": assignment.to_string(), "seq_len": n, "calibrated": seq_len.is_none() });
    record.scalar("gflops", c.quantized.gflops());
    record.scalar("size_mb", c.quantized.size_mb());
    record.scalar("full_gflops", c.full.gflops());
    record.scalar("full_size_mb", c.full.size_mb());
    record.scalar("flops_ratio", c.flops_ratio);
    record.scalar("size_ratio", c.size_ratio);
    if arch == "bert-base" && assignment == BitAssignment::BINARY && seq_len.is_none() {
        let rel = |x: f64, t: f64| (x / t - 1.0).abs() <= 0.10;
        record.check(
            "gflops_near_0.4",
            rel(c.quantized.gflops(), 0.4),
            format!("{:.4}", c.quantized.gflops()),
        );
        record.check(
            "size_near_13.4mb",
            rel(c.quantized.size_mb(), 13.4),
            format!("{:.2}", c.quantized.size_mb()),
        );
        record.check(
            "flops_ratio_near_56.3",
            rel(c.flops_ratio, 56.3),
            format!("{:.2}", c.flops_ratio),
        );
        record.check(
            "size_ratio_near_31.2",
            rel(c.size_ratio, 31.2),
            format!("{:.2}", c.size_ratio),
        );
    }
    let table = analysis::cost_table(&[c.full, c.quantized])?;
    let json = serde_json::json!({
        "arch": arch,
        "bits": assignment.to_string(),
        "seq_len": n,
        "flops": c.quantized.flops,
        "gflops": c.quantized.gflops(),
        "size_bytes": c.quantized.size_bytes,
        "size_mb": c.quantized.size_mb(),
        "full_precision": { "flops": c.full.flops, "size_bytes": c.full.size_bytes },
        "flops_ratio": c.flops_ratio,
        "size_ratio": c.size_ratio,
    });
    record.tables.insert("cost".into(), table.clone());
    Ok((
        record,
        vec![Artifact::Csv("cost.csv".into(), table)],
        Some(json),
    ))
}
