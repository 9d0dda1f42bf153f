//! Run configuration: one JSON document with every knob defaulted, so a bare
//! `{}` is a valid config and the manifest written next to each run is enough
//! to reproduce it. Unknown keys are rejected to catch silent typos.

use fedlog_core::federation::{Algorithm, Noise, ProtocolConfig, Variant};
use fedlog_core::graphio::SbmConfig;
use fedlog_core::partition::ScenarioParams;
use fedlog_core::promptgen::PretrainConfig;
use std::path::{Path, PathBuf};

use crate::CliError;

/// Where the global graph comes from: a TSV export on disk or a generated
/// stochastic block model.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataSpec {
    Dataset {
        dir: PathBuf,
        #[serde(default)]
        classes: Option<usize>,
    },
    Sbm(SbmConfig),
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Graph source; commands that need data fail with a config error when
    /// neither this nor `--data-dir` is given.
    pub data: Option<DataSpec>,
    pub algorithm: Algorithm,
    /// Client count K (the partitioner holds out one extra part as the new
    /// client).
    pub clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    /// Synthetic nodes per class in each degree-branch bank.
    pub s: usize,
    /// Degree threshold separating head from tail nodes.
    pub lambda: usize,
    /// Weight of the bank-norm penalty in the fitting loss.
    pub beta: f64,
    /// Per-class validation accuracy a class must exceed before its scaling
    /// factor grows.
    pub tau: f64,
    /// Neighborhood radius for unseen-node expansion and generator targets.
    pub hops: usize,
    /// Random encoder initializations per gradient-matching step (N).
    pub rand_inits: usize,
    pub pg_epochs: usize,
    pub pg_batch: usize,
    pub pg_lr: f64,
    pub lr: f64,
    pub variant: Variant,
    pub noise: Noise,
    pub open_set: bool,
    pub seeds: Vec<u64>,
    pub train_ratio: f64,
    pub valid_ratio: f64,
    /// Excise rarest classes until at least this many nodes are covered.
    pub min_missing_nodes: usize,
    pub workers: usize,
    /// Save run state every this many rounds (the final round always saves).
    pub checkpoint_every: usize,
    /// When set, the ledger records the first round whose mean validation
    /// accuracy reaches this value.
    pub target_accuracy: Option<f64>,
    /// Class excised from the receiver in the reliability experiment.
    pub reliability_target_class: usize,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: None,
            algorithm: Algorithm::FedLog,
            clients: 3,
            rounds: 100,
            local_epochs: 1,
            s: 20,
            lambda: 3,
            beta: 0.1,
            tau: 0.9,
            hops: 2,
            rand_inits: 20,
            pg_epochs: 100,
            pg_batch: 64,
            pg_lr: 1e-2,
            lr: 1e-3,
            variant: Variant::HH,
            noise: Noise::None,
            open_set: false,
            seeds: vec![0],
            train_ratio: 0.4,
            valid_ratio: 0.3,
            min_missing_nodes: 5,
            workers: 1,
            checkpoint_every: 1,
            target_accuracy: None,
            reliability_target_class: 0,
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("bad config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.clients == 0 {
            return Err(CliError::Config("clients must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(CliError::Config("seeds must not be empty".into()));
        }
        if self.s == 0 {
            return Err(CliError::Config("s must be at least 1".into()));
        }
        if self.workers == 0 {
            return Err(CliError::Config("workers must be at least 1".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(CliError::Config("checkpoint_every must be at least 1".into()));
        }
        if !(self.train_ratio > 0.0
            && self.valid_ratio > 0.0
            && self.train_ratio + self.valid_ratio < 1.0)
        {
            return Err(CliError::Config(
                "train_ratio and valid_ratio must be positive with train+valid < 1".into(),
            ));
        }
        Ok(())
    }

    pub fn protocol(&self, seed: u64) -> ProtocolConfig {
        ProtocolConfig {
            algorithm: self.algorithm,
            rounds: self.rounds,
            local_epochs: self.local_epochs,
            s: self.s,
            lambda: self.lambda,
            beta: self.beta,
            tau: self.tau,
            hops: self.hops,
            variant: self.variant,
            noise: self.noise,
            lr: self.lr,
            seed,
            workers: self.workers,
            target_accuracy: self.target_accuracy,
        }
    }

    pub fn scenario_params(&self, seed: u64) -> ScenarioParams {
        ScenarioParams {
            clients: self.clients,
            hops: self.hops,
            open_set: self.open_set,
            train_ratio: self.train_ratio,
            valid_ratio: self.valid_ratio,
            min_missing_nodes: self.min_missing_nodes,
            seed,
        }
    }

    pub fn pretrain(&self, seed: u64, client: u64) -> PretrainConfig {
        PretrainConfig {
            hops: self.hops,
            rand_inits: self.rand_inits,
            epochs: self.pg_epochs,
            batch_size: self.pg_batch,
            lr: self.pg_lr,
            seed,
            client,
        }
    }
}

/// Command-line overrides applied on top of the loaded (or default) config.
/// Every field mirrors a RunConfig field; `--seed` may repeat and replaces
/// the whole seed list.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct Overrides {
    /// JSON config file; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory holding nodes.tsv and edges.tsv (overrides the config's data source).
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Declared class count for the dataset (inferred from labels when omitted).
    #[arg(long)]
    pub classes: Option<usize>,
    /// fedlog, fedavg, or local.
    #[arg(long, value_parser = parse_algorithm)]
    pub algorithm: Option<Algorithm>,
    #[arg(long)]
    pub clients: Option<usize>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub local_epochs: Option<usize>,
    /// Synthetic nodes per class per bank.
    #[arg(long)]
    pub s: Option<usize>,
    /// Degree threshold between head and tail nodes.
    #[arg(long)]
    pub lambda: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub hops: Option<usize>,
    #[arg(long)]
    pub rand_inits: Option<usize>,
    #[arg(long)]
    pub pg_epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// hh, ht, th, or tt: degree-branch source for weights and banks.
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    /// none, rp, or gn:<a> (e.g. gn:0.01).
    #[arg(long, value_parser = parse_noise)]
    pub noise: Option<Noise>,
    #[arg(long)]
    pub open_set: bool,
    /// Repeatable; replaces the config's seed list.
    #[arg(long = "seed")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub target_accuracy: Option<f64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

impl Overrides {
    /// Load the config (or defaults) and fold the flags in.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(dir) = &self.data_dir {
            cfg.data = Some(DataSpec::Dataset { dir: dir.clone(), classes: self.classes });
        }
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = &self.$field { cfg.$field = v.clone(); })*
            };
        }
        set!(
            algorithm,
            clients,
            rounds,
            local_epochs,
            s,
            lambda,
            beta,
            tau,
            hops,
            rand_inits,
            pg_epochs,
            lr,
            variant,
            noise,
            workers,
            out_dir
        );
        if let Some(t) = self.target_accuracy {
            cfg.target_accuracy = Some(t);
        }
        if self.open_set {
            cfg.open_set = true;
        }
        if !self.seeds.is_empty() {
            cfg.seeds = self.seeds.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn parse_algorithm(s: &str) -> Result<Algorithm, String> {
    match s.to_ascii_lowercase().as_str() {
        "fedlog" => Ok(Algorithm::FedLog),
        "fedavg" => Ok(Algorithm::FedAvg),
        "local" => Ok(Algorithm::Local),
        other => Err(format!("unknown algorithm '{other}' (fedlog, fedavg, local)")),
    }
}

pub fn parse_variant(s: &str) -> Result<Variant, String> {
    match s.to_ascii_lowercase().as_str() {
        "hh" => Ok(Variant::HH),
        "ht" => Ok(Variant::HT),
        "th" => Ok(Variant::TH),
        "tt" => Ok(Variant::TT),
        other => Err(format!("unknown variant '{other}' (hh, ht, th, tt)")),
    }
}

pub fn parse_noise(s: &str) -> Result<Noise, String> {
    let lower = s.to_ascii_lowercase();
    if lower == "none" {
        return Ok(Noise::None);
    }
    if lower == "rp" {
        return Ok(Noise::Permute);
    }
    if let Some(a) = lower.strip_prefix("gn:") {
        let a: f64 = a.parse().map_err(|_| format!("bad noise scale in '{s}'"))?;
        if !(a > 0.0) {
            return Err(format!("noise scale must be positive, got {a}"));
        }
        return Ok(Noise::Gaussian { a });
    }
    Err(format!("unknown noise '{s}' (none, rp, gn:<a>)"))
}

/// The manifest written into every run directory: the fully resolved config,
/// the seed this run used, and the build version. Enough to reproduce the run
/// byte for byte.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct Manifest {
    pub version: String,
    pub seed: u64,
    pub config: RunConfig,
}

impl Manifest {
    pub fn new(cfg: &RunConfig, seed: u64) -> Manifest {
        Manifest {
            version: format!("v{}", env!("CARGO_PKG_VERSION")),
            seed,
            config: cfg.clone(),
        }
    }
}
