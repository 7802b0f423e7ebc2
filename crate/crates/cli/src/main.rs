mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

const VERSION: &str = concat!(
    env!("CARGO_PKG_VERSION"),
    " (",
    env!("AQUAFORGE_BUILD_HASH"),
    ")"
);

/// Underwater image synthesis, meta-training, enhancement and evaluation.
#[derive(Debug, Parser)]
#[command(name = "aquaforge", version = VERSION, arg_required_else_help = true)]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Log progress to stderr; repeat for more detail.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArg {
    /// JSON config; absent keys take defaults, unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic underwater dataset from an RGB-D corpus.
    Synth {
        /// Directory of `<id>.png` + `<id>.depth.aqf` pairs.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        draws_per_type: Option<usize>,
        /// Comma-separated water types, e.g. `I,3,7`.
        #[arg(long, value_delimiter = ',')]
        types: Option<Vec<String>>,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Meta-train a model on a synthesized dataset.
    MetaTrain {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Start from this checkpoint instead of a fresh initialisation.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// JSON-lines training log (default: `<out>.log.jsonl`).
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Fine-tune a checkpoint on paired images.
    Finetune {
        #[arg(long)]
        ck: Option<PathBuf>,
        /// Directory of `<id>.png` + `<id>.ref.png` pairs.
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Restore an image, or every PNG in a directory.
    Enhance {
        #[arg(long)]
        ck: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the transmission and background fields as
        /// `<stem>.t.aqf` and `<stem>.b.aqf`.
        #[arg(long)]
        emit_tb: bool,
    },
    /// Score images with full- and no-reference metrics.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        /// References named like the predictions (or `<id>.ref.png`).
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Exit status 1: bad invocation or configuration.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Exit status 2 with a per-item breakdown.
#[derive(Debug)]
pub struct DataErrors {
    pub message: String,
    pub details: Vec<String>,
}

impl std::fmt::Display for DataErrors {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for DataErrors {}

fn report(kind: &str, err: &anyhow::Error, details: &[String]) {
    let chain: Vec<String> = err.chain().map(|e| e.to_string()).collect();
    let doc = json!({
        "error": kind,
        "message": chain.join(": "),
        "details": details,
    });
    eprintln!("{doc}");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    ExitCode::SUCCESS
                }
                kind => {
                    let _ = e.print();
                    let message = match kind {
                        ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                            "missing subcommand".to_owned()
                        }
                        _ => e
                            .to_string()
                            .lines()
                            .next()
                            .unwrap_or_default()
                            .trim_start_matches("error: ")
                            .to_owned(),
                    };
                    report("usage", &anyhow::anyhow!(message), &[]);
                    ExitCode::from(1)
                }
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();
    if let Some(n) = cli.threads {
        if n == 0 {
            report(
                "usage",
                &anyhow::anyhow!("--threads must be at least 1"),
                &[],
            );
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            report("usage", &e.into(), &[]);
            return ExitCode::from(1);
        }
    }
    match commands::run(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            if err.downcast_ref::<UsageError>().is_some() {
                report("usage", &err, &[]);
                ExitCode::from(1)
            } else if let Some(d) = err.downcast_ref::<DataErrors>() {
                report("data", &err, &d.details);
                ExitCode::from(2)
            } else {
                report("data", &err, &[]);
                ExitCode::from(2)
            }
        }
    }
}
