//! `fedlog` — experiment driver for the subgraph federated learning
//! simulator. One process per command; client-level parallelism lives behind
//! `--workers`.

mod artifacts;
mod commands;
mod config;

use clap::{Parser, Subcommand};
use fedlog_core::federation::EvalSetting;
use std::path::PathBuf;

/// Command outcomes map to process exit codes: 0 success, 2 configuration
/// error, 3 data/artifact error, 4 protocol error.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Protocol(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Protocol(_) => 4,
        }
    }
}

impl From<fedlog_core::federation::ProtocolError> for CliError {
    fn from(e: fedlog_core::federation::ProtocolError) -> Self {
        CliError::Protocol(e.to_string())
    }
}

impl From<fedlog_core::partition::ScenarioError> for CliError {
    fn from(e: fedlog_core::partition::ScenarioError) -> Self {
        CliError::Protocol(e.to_string())
    }
}

impl From<fedlog_core::promptgen::PretrainError> for CliError {
    fn from(e: fedlog_core::promptgen::PretrainError) -> Self {
        CliError::Protocol(e.to_string())
    }
}

impl From<fedlog_core::pca::PcaError> for CliError {
    fn from(e: fedlog_core::pca::PcaError) -> Self {
        CliError::Protocol(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "fedlog",
    version,
    about = "Subgraph federated learning simulator: degree-aware dual-branch training with \
             server-side synthetic data"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Partition the global graph into client subgraphs with splits, missing
    /// classes, and holdouts; prints the per-client class table.
    Partition {
        #[command(flatten)]
        ov: config::Overrides,
        /// Where to write the scenario document.
        #[arg(long, default_value = "scenario.json")]
        out: PathBuf,
    },
    /// Pretrain one prompt generator per client and save the bank.
    PretrainPg {
        #[command(flatten)]
        ov: config::Overrides,
        /// Scenario JSON; built from the config when omitted.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, default_value = "bank.flt")]
        out: PathBuf,
    },
    /// Run the federated protocol for every seed, writing metrics.csv,
    /// checkpoints, and eval.json per run directory.
    Train {
        #[command(flatten)]
        ov: config::Overrides,
        /// Fixed scenario for every seed; per-seed partitions when omitted.
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Pretrained generator bank; pretrained on the fly when omitted.
        #[arg(long)]
        bank: Option<PathBuf>,
        /// Continue from the last round checkpoint if one exists.
        #[arg(long)]
        resume: bool,
    },
    /// Score saved best checkpoints under the evaluation settings and
    /// aggregate mean(std) across runs.
    Eval {
        /// Run directory; repeatable.
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
        /// seen-graph, unseen-node, missing-class, new-client; all when omitted.
        #[arg(long = "setting", value_parser = commands::parse_setting)]
        settings: Vec<EvalSetting>,
        /// Write the results JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Contributor-reliability sweep: how much a receiver learns about its
    /// excised class from contributors with head/tail-degree or imbalanced
    /// training data.
    Reliability {
        #[command(flatten)]
        ov: config::Overrides,
        /// Comma-separated: head-degree, tail-degree, balanced, imbalance.
        #[arg(
            long,
            value_delimiter = ',',
            default_values_t = [
                "head-degree".to_string(),
                "tail-degree".to_string(),
                "balanced".to_string(),
                "imbalance".to_string(),
            ]
        )]
        modes: Vec<String>,
        /// Imbalance ratios swept by the imbalance mode.
        #[arg(
            long,
            value_delimiter = ',',
            allow_hyphen_values = true,
            default_values_t = [-5, -4, -3, -2, -1, 0, 1, 2, 3, 4, 5]
        )]
        rimb: Vec<i32>,
        #[arg(long, default_value = "reliability.csv")]
        out: PathBuf,
    },
    /// Class-rate privacy experiment: no noise vs Gaussian noise vs random
    /// permutation, with generators shared across the arms.
    Privacy {
        #[command(flatten)]
        ov: config::Overrides,
        /// Gaussian noise scale for the middle arm.
        #[arg(long, default_value_t = 0.01)]
        gn_a: f64,
        /// Output JSON; defaults to <out_dir>/privacy.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Project original vs synthetic features of one class onto their joint
    /// top-2 principal components.
    Pca {
        /// A trained run directory (for its synthetic data and data source).
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        class: usize,
        #[arg(long, default_value = "pca.csv")]
        out: PathBuf,
    },
    /// Aggregate all run directories under the output root into one report.
    Report {
        #[command(flatten)]
        ov: config::Overrides,
        /// Write the report JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Partition { ov, out } => commands::cmd_partition(&ov.resolve()?, &out),
        Cmd::PretrainPg { ov, scenario, out } => {
            commands::cmd_pretrain_pg(&ov.resolve()?, scenario.as_deref(), &out)
        }
        Cmd::Train { ov, scenario, bank, resume } => {
            commands::cmd_train(&ov.resolve()?, scenario.as_deref(), bank.as_deref(), resume)
        }
        Cmd::Eval { runs, settings, out } => commands::cmd_eval(&runs, &settings, out.as_deref()),
        Cmd::Reliability { ov, modes, rimb, out } => {
            commands::cmd_reliability(&ov.resolve()?, &modes, &rimb, &out)
        }
        Cmd::Privacy { ov, gn_a, out } => {
            let cfg = ov.resolve()?;
            let out = out.unwrap_or_else(|| cfg.out_dir.join("privacy.json"));
            commands::cmd_privacy(&cfg, gn_a, &out)
        }
        Cmd::Pca { run, class, out } => commands::cmd_pca(&run, class, &out),
        Cmd::Report { ov, out } => {
            let cfg = ov.resolve()?;
            commands::cmd_report(&cfg.out_dir, out.as_deref())
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = dispatch(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(e.code());
    }
}
