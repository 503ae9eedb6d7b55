use std::path::PathBuf;
use std::process::ExitCode;

use bibit_cli::commands::{AnalyzeParams, Experiment, EXIT_OK, EXIT_USAGE};
use bibit_cli::config::TrainFile;
use bibit_cli::verify::Suite;
use bibit_cli::{execute, replay, CliError, Invocation, Outcome};
use clap::builder::{PossibleValuesParser, TypedValueParser};
use clap::error::ErrorKind;
use clap::{CommandFactory, Parser, Subcommand};

/// Fully binarized transformer toolkit: verification suites, training runs,
/// analysis experiments and cost estimates.
///
/// Exit codes: 0 success, 1 failed checks or runtime error, 2 usage error,
/// 3 missing teacher checkpoint, 4 training diverged. `BIBIT_SEED`
/// overrides the seed of any command.
#[derive(Debug, Parser)]
#[command(name = "bibit", version)]
struct Cli {
    /// Root directory for run outputs.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run invariant suites; exits 0 iff every check passes.
    Verify {
        #[arg(long, value_parser = PossibleValuesParser::new(Suite::NAMES).map(|s| s.parse::<Suite>().expect("listed")))]
        suite: Suite,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a teacher or distill a student from a TOML config.
    Train {
        #[arg(long, required_unless_present = "print_config")]
        config: Option<PathBuf>,
        /// Print the default config and exit.
        #[arg(long)]
        print_config: bool,
    },
    /// Run one numerical experiment.
    Analyze {
        #[arg(value_parser = PossibleValuesParser::new(Experiment::ALL.map(Experiment::name)).map(|s| s.parse::<Experiment>().expect("listed")))]
        experiment: Experiment,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Largest quantizer bit width (mismatch).
        #[arg(long)]
        max_bits: Option<u32>,
        /// Quantizer range L (mismatch).
        #[arg(long)]
        range: Option<f64>,
        #[arg(long)]
        sigma_student: Option<f64>,
        #[arg(long)]
        sigma_teacher: Option<f64>,
        /// Row lengths (threshold).
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
        /// Score dimensions (scores).
        #[arg(long, value_delimiter = ',')]
        dims: Option<Vec<usize>>,
        /// Gaussian mean shifts (balance).
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        shifts: Option<Vec<f64>>,
        /// Zero fractions (entropy).
        #[arg(long, value_delimiter = ',')]
        fractions: Option<Vec<f64>>,
        /// Scores per row (order).
        #[arg(long)]
        row_len: Option<usize>,
        /// Softmax thresholds (order).
        #[arg(long, value_delimiter = ',')]
        taus: Option<Vec<f64>>,
    },
    /// Estimate FLOPs and model size.
    Cost {
        #[arg(long, default_value = "bert-base", value_parser = PossibleValuesParser::new(bibit::analysis::ARCH_PRESETS))]
        arch: String,
        /// Weight-embedding-activation bit widths.
        #[arg(long, default_value = "1-1-1")]
        bits: String,
        /// Sequence length; defaults to the length at which BERT-base costs
        /// 22.5 GFLOPs at full precision.
        #[arg(long)]
        seq_len: Option<usize>,
    },
    /// Re-run the command recorded in a manifest (file or run directory).
    Replay { manifest: PathBuf },
}

fn env_seed() -> Result<Option<u64>, CliError> {
    match std::env::var("BIBIT_SEED") {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| {
            CliError::Usage(format!("BIBIT_SEED must be an unsigned integer, got {v:?}"))
        }),
        Err(_) => Ok(None),
    }
}

fn invocation(command: Command) -> Result<Option<Invocation>, CliError> {
    let inv = match command {
        Command::Verify { suite, seed } => Invocation::Verify { suite, seed },
        Command::Train {
            config,
            print_config,
        } => {
            if print_config {
                print!("{}", TrainFile::default().to_toml());
                return Ok(None);
            }
            let path = config.expect("clap enforces --config");
            Invocation::Train {
                config: TrainFile::load(&path)?,
            }
        }
        Command::Analyze {
            experiment,
            samples,
            seed,
            max_bits,
            range,
            sigma_student,
            sigma_teacher,
            ks,
            dims,
            shifts,
            fractions,
            row_len,
            taus,
        } => {
            let mut p = AnalyzeParams::defaults(experiment);
            p.samples = samples.unwrap_or(p.samples);
            p.seed = seed.unwrap_or(p.seed);
            p.max_bits = max_bits.unwrap_or(p.max_bits);
            p.range = range.unwrap_or(p.range);
            p.sigma_student = sigma_student.unwrap_or(p.sigma_student);
            p.sigma_teacher = sigma_teacher.unwrap_or(p.sigma_teacher);
            p.ks = ks.unwrap_or(p.ks);
            p.dims = dims.unwrap_or(p.dims);
            p.shifts = shifts.unwrap_or(p.shifts);
            p.fractions = fractions.unwrap_or(p.fractions);
            p.row_len = row_len.unwrap_or(p.row_len);
            p.taus = taus.unwrap_or(p.taus);
            Invocation::Analyze {
                experiment,
                params: p,
            }
        }
        Command::Cost {
            arch,
            bits,
            seq_len,
        } => Invocation::Cost {
            arch,
            bits,
            seq_len,
        },
        Command::Replay { .. } => unreachable!("handled by the caller"),
    };
    Ok(Some(match env_seed()? {
        Some(seed) => inv.with_seed(seed),
        None => inv,
    }))
}

fn report(outcome: &Outcome) {
    for c in &outcome.record.checks {
        println!(
            "{} {} {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
    }
    if let Some(json) = &outcome.stdout_json {
        println!("{}", serde_json::to_string_pretty(json).expect("json"));
    }
    println!("wrote {}", outcome.dir.display());
}

fn run(cli: Cli) -> Result<u8, CliError> {
    let outcome = match cli.command {
        Command::Replay { manifest } => replay(&manifest, &cli.out)?,
        command => match invocation(command)? {
            Some(inv) => execute(&inv, &cli.out)?,
            None => return Ok(EXIT_OK),
        },
    };
    report(&outcome);
    Ok(outcome.exit_code())
}

/// Usage line for the subcommand named on the command line, if any.
fn print_usage() {
    let mut cmd = Cli::command();
    cmd.build();
    let names: Vec<String> = cmd
        .get_subcommands()
        .map(|c| c.get_name().to_string())
        .collect();
    let name = std::env::args().skip(1).find(|a| names.contains(a));
    let usage = match name.as_deref().and_then(|n| cmd.find_subcommand_mut(n)) {
        Some(sub) => sub.render_usage(),
        None => cmd.render_usage(),
    };
    eprintln!("\n{usage}");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            if matches!(
                e.kind(),
                ErrorKind::InvalidValue | ErrorKind::ValueValidation
            ) {
                print_usage();
            }
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { EXIT_OK });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("bibit: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
