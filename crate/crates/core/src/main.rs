use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use refquery::cli;
use refquery::config::RunConfig;
use refquery::Result;

/// Referring video object segmentation over precomputed features.
///
/// Any configuration field can be overridden with `--section.key=value`
/// (for example `--train.iterations=50`) or `--seed=N`.
#[derive(Parser)]
#[command(name = "refquery", version)]
struct Args {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic feature clips.
    GenSynthetic {
        #[arg(long)]
        out: PathBuf,
        /// Number of clips (overrides synthetic.clips).
        #[arg(long)]
        clips: Option<usize>,
    },
    /// Train on a clip directory; writes checkpoint.bin and loss.csv.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint up to train.iterations.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Print losses every N iterations (0 silences).
        #[arg(long, default_value_t = 10)]
        log_every: usize,
    },
    /// Predict masks for every clip; one JSON file per clip.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against ground truth (J&F, J, F).
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Directory for metrics.csv and metrics.txt.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Gradient, assignment and metric self-checks.
    Selfcheck {
        /// Corrupt one op's adjoint (negative control).
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
}

const SECTIONS: [&str; 5] = ["model.", "loss.", "train.", "eval.", "synthetic."];

/// Splits configuration overrides from the arguments clap understands.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<String>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        let key = a.strip_prefix("--").unwrap_or("");
        if key.contains('=') && (key.starts_with("seed=") || SECTIONS.iter().any(|s| key.starts_with(s))) {
            overrides.push(key.to_string());
        } else {
            rest.push(a);
        }
    }
    (rest, overrides)
}

fn run(args: Args, overrides: Vec<String>) -> Result<ExitCode> {
    let mut overrides = overrides;
    if let Command::GenSynthetic { clips: Some(n), .. } = &args.command {
        overrides.push(format!("synthetic.clips={n}"));
    }
    let cfg = RunConfig::load(args.config.as_deref(), &overrides)?;
    match args.command {
        Command::GenSynthetic { out, .. } => {
            let paths = cli::gen_synthetic(&cfg, &out)?;
            println!("wrote {} clips to {}", paths.len(), out.display());
        }
        Command::Train {
            data,
            out,
            resume,
            log_every,
        } => {
            let o = cli::train(&cfg, &data, &out, resume.as_deref(), |i, l| {
                if log_every > 0 && (i % log_every == 0 || i == 1) {
                    println!(
                        "iter {i:>6}  L_train {:.6}  L_v {:.6}  L_f {:.6}  L_sim {:.6}",
                        l.total, l.video, l.frame, l.similarity
                    );
                }
            })?;
            println!("wrote {} and {}", o.checkpoint.display(), o.loss_csv.display());
        }
        Command::Infer {
            checkpoint,
            data,
            out,
        } => {
            let written = cli::infer(&cfg, &checkpoint, &data, &out, cli::thread_budget()?)?;
            println!("wrote {} prediction files to {}", written.len(), out.display());
        }
        Command::Eval { pred, data, report } => {
            let r = cli::eval(&pred, &data, report.as_deref(), cli::thread_budget()?)?;
            print!("{}", r.to_table());
        }
        Command::Selfcheck { corrupt } => {
            let r = cli::selfcheck(corrupt.as_deref())?;
            println!("{r}");
            if !r.passed() {
                let failed: Vec<String> = r
                    .failures()
                    .map(|c| format!("{}::{}", c.module, c.op))
                    .collect();
                eprintln!("self-check failed: {}", failed.join(", "));
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let (rest, overrides) = split_overrides(std::env::args().collect());
    let args = match Args::try_parse_from(rest) {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(args, overrides) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
