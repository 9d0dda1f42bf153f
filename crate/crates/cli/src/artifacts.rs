//! Everything a run leaves on disk: the metrics CSV, the state checkpoint
//! (tensor container + JSON sidecar), generator bank files, and scenario
//! documents. All writers are deterministic — same run, same bytes.

use fedlog_core::federation::{
    Algorithm, BestCheckpoint, ClientNet, CommLedger, EvalReport, GlobalSyntheticData, Protocol,
    RoundRecord, Variant,
};
use fedlog_core::graphio::{generate_sbm, load_graph, Graph};
use fedlog_core::partition::FederatedScenario;
use fedlog_core::promptgen::PromptGenerator;
use fedlog_core::serialize::{load_tensors, save_tensors};
use fedlog_core::tensor::Tensor;
use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use crate::config::{DataSpec, RunConfig};
use crate::CliError;

pub const METRICS_FILE: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SCENARIO_FILE: &str = "scenario.json";
pub const BANK_FILE: &str = "bank.flt";
pub const STATE_BIN: &str = "state.bin";
pub const STATE_JSON: &str = "state.json";
pub const CSV_HEADER: &str =
    "round,client,algorithm,setting,split,accuracy,loss,upload_bytes,download_bytes";

pub fn load_data(cfg: &RunConfig) -> Result<Graph, CliError> {
    match &cfg.data {
        None => Err(CliError::Config(
            "no data source: set \"data\" in the config or pass --data-dir".into(),
        )),
        Some(DataSpec::Dataset { dir, classes }) => load_graph(dir, *classes)
            .map_err(|e| CliError::Data(format!("loading {}: {e}", dir.display()))),
        // A bad block-model spec is a configuration mistake, not missing data.
        Some(DataSpec::Sbm(sbm)) => {
            generate_sbm(sbm).map_err(|e| CliError::Config(format!("sbm spec: {e}")))
        }
    }
}

/// Algorithm plus noise tag, the part of a run's identity that is not the
/// seed: `fedlog`, `fedlog-gn0.01`, `local-rp`, ...
pub fn run_group(cfg: &RunConfig) -> String {
    use fedlog_core::federation::Noise;
    let noise = match cfg.noise {
        Noise::None => String::new(),
        Noise::Gaussian { a } => format!("-gn{a}"),
        Noise::Permute => "-rp".to_string(),
    };
    format!("{}{}", cfg.algorithm, noise)
}

/// One directory per (algorithm, noise, seed) triple, e.g. `fedlog-gn0.01-s3`.
pub fn run_dir_name(cfg: &RunConfig, seed: u64) -> String {
    format!("{}-s{}", run_group(cfg), seed)
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Data(format!("encoding {}: {e}", path.display())))?;
    std::fs::write(path, text + "\n")
        .map_err(|e| CliError::Data(format!("writing {}: {e}", path.display())))?;
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("reading {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("parsing {}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// Metrics CSV
// ---------------------------------------------------------------------------

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub struct MetricsWriter {
    file: std::io::BufWriter<std::fs::File>,
}

impl MetricsWriter {
    /// Create the file with its header, truncating anything already there.
    pub fn create(path: &Path) -> Result<MetricsWriter, CliError> {
        let mut file = std::io::BufWriter::new(
            std::fs::File::create(path)
                .map_err(|e| CliError::Data(format!("creating {}: {e}", path.display())))?,
        );
        writeln!(file, "{CSV_HEADER}").map_err(|e| CliError::Data(e.to_string()))?;
        Ok(MetricsWriter { file })
    }

    /// Reopen for appending after a resume truncation; the header is already
    /// in place.
    pub fn append(path: &Path) -> Result<MetricsWriter, CliError> {
        let file = std::fs::OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| CliError::Data(format!("opening {}: {e}", path.display())))?;
        Ok(MetricsWriter { file: std::io::BufWriter::new(file) })
    }

    /// Per-round training rows: validation metrics on the local graph plus
    /// that round's exchange.
    pub fn round_rows(
        &mut self,
        records: &[RoundRecord],
        algorithm: Algorithm,
    ) -> Result<(), CliError> {
        for r in records {
            writeln!(
                self.file,
                "{},{},{algorithm},seen-graph,valid,{},{},{},{}",
                r.round,
                r.client,
                fmt_opt(r.valid_accuracy),
                fmt_opt(r.valid_loss),
                r.upload,
                r.download
            )
            .map_err(|e| CliError::Data(e.to_string()))?;
        }
        self.file.flush().map_err(|e| CliError::Data(e.to_string()))?;
        Ok(())
    }

    /// Final evaluation rows, one per client with a non-empty target set.
    pub fn eval_rows(
        &mut self,
        round: usize,
        report: &EvalReport,
        algorithm: Algorithm,
    ) -> Result<(), CliError> {
        for (client, score) in report.per_client.iter().enumerate() {
            let Some(s) = score else { continue };
            writeln!(
                self.file,
                "{round},{client},{algorithm},{},test,{:.6},{:.6},0,0",
                report.setting, s.accuracy, s.loss
            )
            .map_err(|e| CliError::Data(e.to_string()))?;
        }
        self.file.flush().map_err(|e| CliError::Data(e.to_string()))?;
        Ok(())
    }
}

/// Rewind the CSV to a resumable position: keep training rows up to
/// `last_round` and drop evaluation rows (they are regenerated when the
/// extended run completes).
pub fn truncate_metrics(path: &Path, last_round: usize) -> Result<(), CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("reading {}: {e}", path.display())))?;
    let mut kept = String::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != CSV_HEADER {
                return Err(CliError::Data(format!("{} has an unexpected header", path.display())));
            }
            kept.push_str(line);
            kept.push('\n');
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let round: usize = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| CliError::Data(format!("{} row {i}: bad round field", path.display())))?;
        let split = fields.nth(3).unwrap_or("");
        if split == "valid" && round <= last_round {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    std::fs::write(path, kept).map_err(|e| CliError::Data(e.to_string()))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Generator banks
// ---------------------------------------------------------------------------

/// Canonical per-generator tensor names, in the generator's own order.
const PG_TENSORS: [&str; 6] = ["pg.w1", "pg.b1", "pg.w2", "pg.b2", "pg.w3", "pg.b3"];

pub fn save_bank(path: &Path, generators: &[PromptGenerator]) -> Result<(), CliError> {
    let mut named = Vec::new();
    let mut names = Vec::new();
    for (k, g) in generators.iter().enumerate() {
        for (name, _) in g.tensors() {
            names.push(format!("client{k}.{name}"));
        }
    }
    let mut i = 0;
    for g in generators {
        for (_, t) in g.tensors() {
            named.push((names[i].as_str(), t));
            i += 1;
        }
    }
    save_tensors(path, &named).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn load_bank(path: &Path, clients: usize, dim: usize) -> Result<Vec<PromptGenerator>, CliError> {
    let records = load_tensors(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let by_name: HashMap<String, Tensor> = records.into_iter().collect();
    let mut out = Vec::with_capacity(clients);
    for k in 0..clients {
        let mut g = PromptGenerator::zeros(dim);
        for (slot, name) in g.tensors_mut().into_iter().zip(PG_TENSORS) {
            let full = format!("client{k}.{name}");
            let t = by_name.get(&full).ok_or_else(|| {
                CliError::Data(format!("{}: missing tensor '{full}'", path.display()))
            })?;
            if t.shape() != slot.shape() {
                return Err(CliError::Data(format!(
                    "{}: tensor '{full}' is {:?}, expected {:?} (wrong feature dim?)",
                    path.display(),
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        out.push(g);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Run state
// ---------------------------------------------------------------------------

#[derive(serde::Serialize, serde::Deserialize)]
struct BestMeta {
    round: usize,
    accuracy: f64,
    gamma: Option<Vec<f64>>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct ClientMeta {
    gamma: Option<Vec<f64>>,
    raw_rates: Option<Vec<f64>>,
    opt_t: Vec<u64>,
    best: Option<BestMeta>,
}

/// Sidecar for everything the tensor container cannot hold.
#[derive(serde::Serialize, serde::Deserialize)]
struct StateMeta {
    round: usize,
    seed: u64,
    rates: Vec<Vec<f64>>,
    clients: Vec<ClientMeta>,
    ledger: CommLedger,
    dglobal_labels: Option<Vec<usize>>,
    dglobal_variant: Option<Variant>,
}

fn net_tensors(net: &ClientNet) -> Vec<(String, &Tensor)> {
    match net {
        ClientNet::Fed(m) => m.tensors(),
        ClientNet::Std(m) => m.tensors(),
    }
}

fn net_tensors_mut(net: &mut ClientNet) -> Vec<&mut Tensor> {
    match net {
        ClientNet::Fed(m) => m.tensors_mut(),
        ClientNet::Std(m) => m.tensors_mut(),
    }
}

fn overwrite_net(
    net: &mut ClientNet,
    stored: &HashMap<String, Tensor>,
    prefix: &str,
) -> Result<(), CliError> {
    let names: Vec<String> = net_tensors(net).into_iter().map(|(n, _)| n).collect();
    for (slot, name) in net_tensors_mut(net).into_iter().zip(&names) {
        let full = format!("{prefix}.{name}");
        let t = stored
            .get(&full)
            .ok_or_else(|| CliError::Data(format!("state: missing tensor '{full}'")))?;
        if t.shape() != slot.shape() {
            return Err(CliError::Data(format!(
                "state: tensor '{full}' is {:?}, expected {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t.clone();
    }
    Ok(())
}

/// Checkpoint the protocol: tensors (nets, best nets, optimizer moments,
/// current synthetic data) into the container, everything else into JSON.
/// Both files are written through a temp-and-rename so an interrupt never
/// leaves a half-written checkpoint behind.
pub fn save_state(dir: &Path, p: &Protocol) -> Result<(), CliError> {
    let mut named: Vec<(String, Tensor)> = Vec::new();
    let mut clients = Vec::with_capacity(p.clients.len());
    for (k, st) in p.clients.iter().enumerate() {
        for (name, t) in net_tensors(&st.net) {
            named.push((format!("c{k}.net.{name}"), t.clone()));
        }
        for (i, s) in st.opt.states.iter().enumerate() {
            named.push((format!("c{k}.opt.m{i}"), row_tensor(&s.m)));
            named.push((format!("c{k}.opt.v{i}"), row_tensor(&s.v)));
        }
        if let Some(b) = &st.best {
            for (name, t) in net_tensors(&b.net) {
                named.push((format!("c{k}.best.{name}"), t.clone()));
            }
        }
        clients.push(ClientMeta {
            gamma: st.net.as_fed().map(|m| m.gamma.clone()),
            raw_rates: st.net.as_fed().map(|m| m.rates.clone()),
            opt_t: st.opt.states.iter().map(|s| s.t).collect(),
            best: st.best.as_ref().map(|b| BestMeta {
                round: b.round,
                accuracy: b.accuracy,
                gamma: b.net.as_fed().map(|m| m.gamma.clone()),
            }),
        });
    }
    if let Some(dg) = &p.d_global {
        named.push(("dglobal.features".to_string(), dg.features.clone()));
    }
    let meta = StateMeta {
        round: p.round,
        seed: p.cfg.seed,
        rates: p.rates.clone(),
        clients,
        ledger: p.ledger.clone(),
        dglobal_labels: p.d_global.as_ref().map(|d| d.labels.clone()),
        dglobal_variant: p.d_global.as_ref().map(|d| d.variant),
    };

    let refs: Vec<(&str, &Tensor)> = named.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let tmp_bin = dir.join(format!("{STATE_BIN}.tmp"));
    save_tensors(&tmp_bin, &refs).map_err(|e| CliError::Data(format!("state: {e}")))?;
    std::fs::rename(&tmp_bin, dir.join(STATE_BIN)).map_err(|e| CliError::Data(e.to_string()))?;
    let tmp_json = dir.join(format!("{STATE_JSON}.tmp"));
    write_json(&tmp_json, &meta)?;
    std::fs::rename(&tmp_json, dir.join(STATE_JSON)).map_err(|e| CliError::Data(e.to_string()))?;
    Ok(())
}

fn row_tensor(v: &[f64]) -> Tensor {
    Tensor::from_vec(1, v.len(), v.to_vec()).expect("1 x n tensor")
}

pub fn state_exists(dir: &Path) -> bool {
    dir.join(STATE_BIN).exists() && dir.join(STATE_JSON).exists()
}

/// Restore a checkpoint into a freshly constructed protocol. The protocol
/// must have been built with the same scenario, graph, and config; only the
/// mutable training state is overwritten.
pub fn load_state(dir: &Path, p: &mut Protocol) -> Result<(), CliError> {
    let meta: StateMeta = read_json(&dir.join(STATE_JSON))?;
    if meta.seed != p.cfg.seed {
        return Err(CliError::Data(format!(
            "state seed {} does not match config seed {}",
            meta.seed, p.cfg.seed
        )));
    }
    if meta.clients.len() != p.clients.len() {
        return Err(CliError::Data(format!(
            "state has {} clients, protocol has {}",
            meta.clients.len(),
            p.clients.len()
        )));
    }
    let stored: HashMap<String, Tensor> = load_tensors(&dir.join(STATE_BIN))
        .map_err(|e| CliError::Data(format!("state: {e}")))?
        .into_iter()
        .collect();

    for (k, (st, cm)) in p.clients.iter_mut().zip(&meta.clients).enumerate() {
        overwrite_net(&mut st.net, &stored, &format!("c{k}.net"))?;
        if let (Some(m), Some(g)) = (st.net.as_fed_mut(), &cm.gamma) {
            m.gamma.clone_from(g);
        }
        if let (Some(m), Some(r)) = (st.net.as_fed_mut(), &cm.raw_rates) {
            m.rates.clone_from(r);
        }
        if cm.opt_t.len() != st.opt.states.len() {
            return Err(CliError::Data(format!(
                "state: client {k} has {} optimizer slots, expected {}",
                cm.opt_t.len(),
                st.opt.states.len()
            )));
        }
        for (i, slot) in st.opt.states.iter_mut().enumerate() {
            let m = stored
                .get(&format!("c{k}.opt.m{i}"))
                .ok_or_else(|| CliError::Data(format!("state: missing c{k}.opt.m{i}")))?;
            let v = stored
                .get(&format!("c{k}.opt.v{i}"))
                .ok_or_else(|| CliError::Data(format!("state: missing c{k}.opt.v{i}")))?;
            if slot.m.len() != m.len() || slot.v.len() != v.len() {
                return Err(CliError::Data(format!("state: optimizer slot {i} shape mismatch")));
            }
            slot.m.copy_from_slice(m.data());
            slot.v.copy_from_slice(v.data());
            slot.t = cm.opt_t[i];
        }
        st.best = match &cm.best {
            None => None,
            Some(bm) => {
                let mut net = st.net.clone();
                overwrite_net(&mut net, &stored, &format!("c{k}.best"))?;
                if let (Some(m), Some(g)) = (net.as_fed_mut(), &bm.gamma) {
                    m.gamma.clone_from(g);
                }
                Some(BestCheckpoint { net, accuracy: bm.accuracy, round: bm.round })
            }
        };
    }
    p.rates = meta.rates;
    p.ledger = meta.ledger;
    p.round = meta.round;
    p.d_global = match (meta.dglobal_labels, meta.dglobal_variant) {
        (Some(labels), Some(variant)) => {
            let features = stored
                .get("dglobal.features")
                .ok_or_else(|| CliError::Data("state: missing dglobal.features".into()))?
                .clone();
            Some(GlobalSyntheticData { features, labels, variant })
        }
        _ => None,
    };
    Ok(())
}

/// Best-checkpoint nets for standalone evaluation; a client that never
/// recorded a checkpoint is an explicit error.
pub fn load_best_nets(dir: &Path, p: &Protocol) -> Result<Vec<ClientNet>, CliError> {
    let meta: StateMeta = read_json(&dir.join(STATE_JSON))?;
    let stored: HashMap<String, Tensor> = load_tensors(&dir.join(STATE_BIN))
        .map_err(|e| CliError::Data(format!("state: {e}")))?
        .into_iter()
        .collect();
    let mut out = Vec::with_capacity(p.clients.len());
    for (k, (st, cm)) in p.clients.iter().zip(&meta.clients).enumerate() {
        let bm = cm.best.as_ref().ok_or_else(|| {
            CliError::Data(format!("client {k} has no checkpoint in {}", dir.display()))
        })?;
        let mut net = st.net.clone();
        overwrite_net(&mut net, &stored, &format!("c{k}.best"))?;
        if let (Some(m), Some(g)) = (net.as_fed_mut(), &bm.gamma) {
            m.gamma.clone_from(g);
        }
        out.push(net);
    }
    Ok(out)
}

/// The synthetic data distributed in the last checkpointed round, if any.
pub fn load_dglobal(dir: &Path) -> Result<Option<GlobalSyntheticData>, CliError> {
    let meta: StateMeta = read_json(&dir.join(STATE_JSON))?;
    let (Some(labels), Some(variant)) = (meta.dglobal_labels, meta.dglobal_variant) else {
        return Ok(None);
    };
    let stored = load_tensors(&dir.join(STATE_BIN))
        .map_err(|e| CliError::Data(format!("state: {e}")))?;
    let features = stored
        .into_iter()
        .find(|(n, _)| n == "dglobal.features")
        .map(|(_, t)| t)
        .ok_or_else(|| CliError::Data("state: missing dglobal.features".into()))?;
    Ok(Some(GlobalSyntheticData { features, labels, variant }))
}

/// The slice of the state sidecar that reporting needs; unknown fields are
/// ignored so this stays readable across checkpoint layout extensions.
#[derive(serde::Deserialize)]
pub struct LedgerView {
    pub round: usize,
    pub ledger: CommLedger,
}

pub fn load_ledger(dir: &Path) -> Result<LedgerView, CliError> {
    read_json(&dir.join(STATE_JSON))
}

// ---------------------------------------------------------------------------
// Scenario table
// ---------------------------------------------------------------------------

/// Per-class node counts per client (train/valid/test), with missing classes
/// marked, plus the new-client column — the shape of a dataset statistics
/// table.
pub fn class_table(scenario: &FederatedScenario, g: &Graph) -> String {
    let c = scenario.n_classes;
    let count = |nodes: &[usize], class: usize| nodes.iter().filter(|&&v| g.label(v) == class).count();
    let mut out = String::new();
    out.push_str("class");
    for k in 0..scenario.clients {
        out.push_str(&format!(",client {k} (train/valid/test)"));
    }
    out.push_str(",new client\n");
    for class in 0..c {
        out.push_str(&format!("{class}"));
        for split in &scenario.client_data {
            if split.missing_classes.contains(&class) {
                out.push_str(",missing");
            } else {
                out.push_str(&format!(
                    ",{}/{}/{}",
                    count(&split.train, class),
                    count(&split.valid, class),
                    count(&split.test, class)
                ));
            }
        }
        out.push_str(&format!(",{}\n", count(&scenario.new_client, class)));
    }
    out
}
