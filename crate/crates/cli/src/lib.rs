//! Command-line driver: synthetic data generation, training, segmentation,
//! evaluation and a small hyperparameter grid.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub mod commands;
pub mod config;

pub use config::RunConfig;

/// Failures raised by the driver itself; core errors pass through as
/// [`tanseg::Error`].
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
}

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;

/// Maps an error chain to the process exit status.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return match e {
                CliError::Usage(_) => EXIT_USAGE,
                CliError::Data(_) => EXIT_DATA,
            };
        }
        if let Some(e) = cause.downcast_ref::<tanseg::Error>() {
            return match e {
                tanseg::Error::Config(_) | tanseg::Error::Invalid(_) => EXIT_USAGE,
                tanseg::Error::Numerical(_) => EXIT_NUMERICAL,
                _ => EXIT_DATA,
            };
        }
        if cause.downcast_ref::<clap::Error>().is_some() {
            return EXIT_USAGE;
        }
    }
    EXIT_DATA
}

#[derive(Debug, Parser)]
#[command(name = "tanseg", version, about = "Weakly supervised temporal anomaly segmentation")]
#[command(after_help = "Any config key can be overridden with `--<key> <value>`, e.g. `--train.seq_len 12`.")]
pub struct Cli {
    /// Flat JSON config with dotted keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset split into train/, valid/ and test/.
    Gen {
        /// Output root; falls back to `io.out`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on <data>/train, select the threshold on <data>/valid.
    Train {
        /// Root holding train/ and valid/; falls back to `io.data`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint path; `.log.csv`, `.threshold.json` and `.state.json` sidecars go next to it.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Continue from the `.state.json` sidecar of an earlier run.
        #[arg(long)]
        resume: bool,
    },
    /// Segment every instance of one split directory.
    Segment {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write soft-DTW R/E matrices for instances predicted anomalous.
        #[arg(long)]
        dump_dtw: bool,
    },
    /// Score `segment` output against point-level ground truth.
    Eval {
        /// Directory written by `segment`; falls back to `io.pred`.
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Report path; defaults to <pred>/report.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Validation F1 for every (L, tau, beta) cell of the grid.
    Grid {
        #[arg(long)]
        data: Option<PathBuf>,
        /// CSV path for the results table.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the effective configuration as flat JSON.
    Config,
}

/// Ordered `(key, value)` overrides taken from the command line.
pub type Overrides = Vec<(String, String)>;

/// Pulls `--<config key> <value>` and `--<config key>=<value>` pairs out of
/// `args`, leaving the rest for clap.
pub fn split_overrides(args: Vec<OsString>) -> Result<(Vec<OsString>, Overrides), CliError> {
    let keys = RunConfig::known_keys();
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut iter = args.into_iter();
    while let Some(arg) = iter.next() {
        let Some(flag) = arg.to_str().and_then(|s| s.strip_prefix("--")) else {
            rest.push(arg);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        // `io.*` keys are set through the subcommand flags
        if !(keys.contains(&name) || name.contains('.')) || name.starts_with("io.") {
            rest.push(arg);
            continue;
        }
        if !keys.contains(&name) {
            return Err(CliError::Usage(format!("unknown config key {name:?}")));
        }
        let value = match inline {
            Some(v) => v,
            None => iter
                .next()
                .and_then(|v| v.into_string().ok())
                .ok_or_else(|| CliError::Usage(format!("--{name} needs a value")))?,
        };
        overrides.push((name, value));
    }
    Ok((rest, overrides))
}

/// Parses `args` (including the program name) and runs the command.
pub fn run(args: Vec<OsString>) -> anyhow::Result<()> {
    let (rest, overrides) = split_overrides(args)?;
    let cli = match Cli::try_parse_from(rest) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(CliError::Usage(e.to_string().trim_end().to_string()).into()),
    };
    let mut cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    match cli.command {
        Command::Gen { out } => {
            set(&mut cfg.io.out, out);
            commands::gen(&cfg)?;
        }
        Command::Train { data, model, resume } => {
            set(&mut cfg.io.data, data);
            set(&mut cfg.io.model, model);
            commands::train(&cfg, resume)?;
        }
        Command::Segment {
            model,
            data,
            out,
            dump_dtw,
        } => {
            set(&mut cfg.io.model, model);
            set(&mut cfg.io.data, data);
            set(&mut cfg.io.pred, out);
            commands::segment(&cfg, dump_dtw)?;
        }
        Command::Eval { pred, data, out } => {
            set(&mut cfg.io.pred, pred);
            set(&mut cfg.io.data, data);
            commands::eval(&cfg, out)?;
        }
        Command::Grid { data, out } => {
            set(&mut cfg.io.data, data);
            set(&mut cfg.io.out, out);
            commands::grid(&cfg)?;
        }
        Command::Config => {
            cfg.validate()?;
            println!("{}", cfg.to_flat_json());
        }
    }
    Ok(())
}

fn set(slot: &mut Option<PathBuf>, flag: Option<PathBuf>) {
    if flag.is_some() {
        *slot = flag;
    }
}
