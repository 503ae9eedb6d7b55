use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bibit_cli::output::read_manifest;

fn bibit(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bibit"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("BIBIT_SEED")
        .output()
        .unwrap()
}

fn run_dirs(out: &Path, command: &str) -> Vec<PathBuf> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(out.join(command))
        .map(|r| r.map(|e| e.unwrap().path()).collect())
        .unwrap_or_default();
    dirs.sort();
    dirs
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

const TEACHER: &str = "role = \"teacher\"\nseed = 3\nepochs = 2\n[dataset]\nexamples = 120\n";
const STUDENT: &str = "role = \"student\"\nseed = 3\nepochs = 2\nteacher_checkpoint = \"teacher.ckpt\"\n[dataset]\nexamples = 120\n";

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    for args in [
        &["verify", "--suite", "nope"][..],
        &["verify"],
        &["frobnicate"],
        &["cost", "--bits", "3-1-1"],
        &["analyze", "mismatch", "--samples", "10"],
    ] {
        let o = bibit(tmp.path(), args);
        assert_eq!(
            code(&o),
            2,
            "{args:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        let err = String::from_utf8_lossy(&o.stderr);
        assert!(!err.is_empty(), "{args:?}");
    }
    let o = bibit(tmp.path(), &["verify", "--suite", "nope"]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage:"));
}

#[test]
fn bad_config_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "learning_rat = 0.1\n").unwrap();
    assert_eq!(
        code(&bibit(
            tmp.path(),
            &["train", "--config", cfg.to_str().unwrap()]
        )),
        2
    );
    assert_eq!(
        code(&bibit(
            tmp.path(),
            &["train", "--config", "/nonexistent/x.toml"]
        )),
        2
    );
}

#[test]
fn print_config_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let o = bibit(tmp.path(), &["train", "--print-config"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(
        bibit_cli::config::TrainFile::parse(&text).unwrap(),
        bibit_cli::config::TrainFile::default()
    );
    assert!(!tmp.path().join("train").exists());
}

#[test]
fn verify_writes_checks_and_a_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let o = bibit(tmp.path(), &["verify", "--suite", "bitops", "--seed", "4"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let dirs = run_dirs(tmp.path(), "verify");
    assert_eq!(dirs.len(), 1);
    let m = read_manifest(&dirs[0]).unwrap();
    assert_eq!(m.command, "verify");
    assert_eq!(m.seed, 4);
    assert!(m.outputs.iter().any(|f| f == "checks.csv"));
    for f in &m.outputs {
        assert!(dirs[0].join(f).exists(), "{f}");
    }
    let csv = fs::read_to_string(dirs[0].join("checks.csv")).unwrap();
    assert!(csv.starts_with("check,passed,detail\n"));
    assert!(csv.lines().skip(1).all(|l| l.contains(",true,")));
}

#[test]
fn env_seed_overrides_the_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_bibit"))
        .arg("--out")
        .arg(tmp.path())
        .args(["analyze", "threshold", "--samples", "100000", "--seed", "1"])
        .env("BIBIT_SEED", "99")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        read_manifest(&run_dirs(tmp.path(), "analyze")[0])
            .unwrap()
            .seed,
        99
    );
    let o = Command::new(env!("CARGO_BIN_EXE_bibit"))
        .arg("--out")
        .arg(tmp.path())
        .args(["verify", "--suite", "bitops"])
        .env("BIBIT_SEED", "x")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn cost_prints_json() {
    let tmp = tempfile::tempdir().unwrap();
    let o = bibit(
        tmp.path(),
        &["cost", "--arch", "bert-base", "--bits", "1-1-1"],
    );
    assert_eq!(code(&o), 0);
    let stdout = String::from_utf8(o.stdout).unwrap();
    let start = stdout.find('{').unwrap();
    let end = stdout.rfind('}').unwrap();
    let json: serde_json::Value = serde_json::from_str(&stdout[start..=end]).unwrap();
    for key in ["flops", "size_bytes", "flops_ratio", "size_ratio"] {
        assert!(json.get(key).is_some(), "missing {key} in {json}");
    }
    assert!(run_dirs(tmp.path(), "cost")[0].join("cost.csv").exists());
}

#[test]
fn student_without_teacher_exits_3_and_with_one_trains() {
    let tmp = tempfile::tempdir().unwrap();
    let student = tmp.path().join("student.toml");
    fs::write(&student, STUDENT).unwrap();
    let o = bibit(
        &tmp.path().join("out"),
        &["train", "--config", student.to_str().unwrap()],
    );
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));

    let teacher = tmp.path().join("teacher.toml");
    fs::write(&teacher, TEACHER).unwrap();
    let o = bibit(
        &tmp.path().join("out"),
        &["train", "--config", teacher.to_str().unwrap()],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let t_dir = run_dirs(&tmp.path().join("out"), "train").pop().unwrap();
    fs::copy(t_dir.join("model.ckpt"), tmp.path().join("teacher.ckpt")).unwrap();

    let o = bibit(
        &tmp.path().join("out"),
        &["train", "--config", student.to_str().unwrap()],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let dirs = run_dirs(&tmp.path().join("out"), "train");
    let s_dir = dirs.iter().find(|d| **d != t_dir).unwrap();
    let m = read_manifest(s_dir).unwrap();
    assert_eq!(m.inputs.len(), 1);
    assert_eq!(
        m.inputs[0].sha256,
        bibit_cli::output::sha256_file(&tmp.path().join("teacher.ckpt")).unwrap()
    );
    let header = fs::read_to_string(s_dir.join("metrics.csv")).unwrap();
    assert!(header.lines().next().unwrap().contains("entropy_mean"));
}

#[test]
fn diverging_training_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("t.toml");
    fs::write(
        &cfg,
        "learning_rate = 1e300\nepochs = 3\n[dataset]\nexamples = 64\n",
    )
    .unwrap();
    let o = bibit(tmp.path(), &["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn replay_refuses_changed_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d.csv");
    fs::write(&data, "a b,0\nb a,1\na a,0\nb b,1\n").unwrap();
    let cfg = tmp.path().join("t.toml");
    fs::write(
        &cfg,
        "epochs = 1\n[dataset]\npath = \"d.csv\"\neval_fraction = 0.25\n",
    )
    .unwrap();
    let out = tmp.path().join("out");
    assert_eq!(
        code(&bibit(&out, &["train", "--config", cfg.to_str().unwrap()])),
        0
    );
    let dir = run_dirs(&out, "train").pop().unwrap();
    fs::write(&data, "a b,1\n").unwrap();
    let o = bibit(&out, &["replay", dir.to_str().unwrap()]);
    assert_ne!(code(&o), 0);
    assert_eq!(run_dirs(&out, "train").len(), 1);
}
