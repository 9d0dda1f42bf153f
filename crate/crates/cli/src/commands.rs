//! The experiment commands. Each one is re-runnable: the same config and
//! seeds produce byte-identical artifacts.

use fedlog_core::federation::{
    evaluate, Algorithm, EvalReport, EvalSetting, Noise, Protocol,
};
use fedlog_core::graphio::Graph;
use fedlog_core::partition::{
    build_reliability_scenario, build_scenario, FederatedScenario, ReliabilityMode,
    ReliabilityParams,
};
use fedlog_core::pca::top2_components;
use fedlog_core::promptgen::{pretrain_generator, PretrainReport, PromptGenerator};
use fedlog_core::tensor::Tensor;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::artifacts::{
    class_table, load_bank, load_best_nets, load_data, load_dglobal, load_ledger, load_state,
    read_json, run_dir_name, run_group, save_bank, save_state, state_exists, truncate_metrics,
    write_json, MetricsWriter, BANK_FILE, MANIFEST_FILE, METRICS_FILE, SCENARIO_FILE,
};
use crate::config::{Manifest, RunConfig};
use crate::CliError;

// ---------------------------------------------------------------------------
// partition
// ---------------------------------------------------------------------------

pub fn cmd_partition(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let g = load_data(cfg)?;
    let seed = cfg.seeds[0];
    let scenario = build_scenario(&g, &cfg.scenario_params(seed))?;
    print!("{}", class_table(&scenario, &g));
    write_json(out, &scenario)?;
    log::info!("scenario written to {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// pretrain-pg
// ---------------------------------------------------------------------------

/// Pretrain one generator per client on its local graph. Deterministic in
/// (scenario, generator hyperparameters, seed).
pub fn pretrain_clients(
    g: &Graph,
    scenario: &FederatedScenario,
    cfg: &RunConfig,
    seed: u64,
) -> Result<(Vec<PromptGenerator>, Vec<PretrainReport>), CliError> {
    let mut gens = Vec::with_capacity(scenario.clients);
    let mut reports = Vec::with_capacity(scenario.clients);
    for (k, split) in scenario.client_data.iter().enumerate() {
        let (lg, ids) = g.induced(&split.nodes);
        let train: Vec<usize> = split
            .train
            .iter()
            .map(|v| ids.binary_search(v).expect("train nodes are local nodes"))
            .collect();
        let (gen, report) = pretrain_generator(&lg, &train, &cfg.pretrain(seed, k as u64))?;
        log::info!(
            "client {k}: generator loss {:.4} -> {:.4} over {} epochs ({} nodes skipped)",
            report.epoch_losses.first().copied().unwrap_or(f64::NAN),
            report.epoch_losses.last().copied().unwrap_or(f64::NAN),
            report.epoch_losses.len(),
            report.skipped_nodes
        );
        gens.push(gen);
        reports.push(report);
    }
    Ok((gens, reports))
}

#[derive(serde::Serialize)]
struct PretrainLogEntry<'a> {
    client: usize,
    epoch_losses: &'a [f64],
    skipped_nodes: usize,
}

fn write_pretrain_log(path: &Path, reports: &[PretrainReport]) -> Result<(), CliError> {
    let entries: Vec<PretrainLogEntry> = reports
        .iter()
        .enumerate()
        .map(|(client, r)| PretrainLogEntry {
            client,
            epoch_losses: &r.epoch_losses,
            skipped_nodes: r.skipped_nodes,
        })
        .collect();
    write_json(path, &entries)
}

pub fn cmd_pretrain_pg(
    cfg: &RunConfig,
    scenario_path: Option<&Path>,
    out: &Path,
) -> Result<(), CliError> {
    let g = load_data(cfg)?;
    let seed = cfg.seeds[0];
    let scenario: FederatedScenario = match scenario_path {
        Some(p) => read_json(p)?,
        None => build_scenario(&g, &cfg.scenario_params(seed))?,
    };
    let (gens, reports) = pretrain_clients(&g, &scenario, cfg, seed)?;
    save_bank(out, &gens)?;
    write_pretrain_log(&out.with_extension("log.json"), &reports)?;
    println!("pretrained {} generators -> {}", gens.len(), out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(serde::Serialize, serde::Deserialize)]
pub struct SettingScore {
    /// Mean accuracy over clients with a non-empty target set; absent when no
    /// client has one.
    pub mean: Option<f64>,
    pub per_client: Vec<Option<f64>>,
}

#[derive(serde::Serialize, serde::Deserialize)]
pub struct RunEval {
    pub seed: u64,
    pub round: usize,
    pub settings: BTreeMap<String, SettingScore>,
}

fn setting_score(report: &EvalReport) -> SettingScore {
    SettingScore {
        mean: report.mean_accuracy(),
        per_client: report.per_client.iter().map(|s| s.as_ref().map(|x| x.accuracy)).collect(),
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Train one run to completion (or resume it), leaving metrics.csv, the state
/// checkpoint, and eval.json in the run directory. Returns the final
/// evaluation.
fn train_one(
    cfg: &RunConfig,
    g: &Graph,
    seed: u64,
    scenario_path: Option<&Path>,
    bank_path: Option<&Path>,
    resume: bool,
) -> Result<RunEval, CliError> {
    let dir = cfg.out_dir.join(run_dir_name(cfg, seed));
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    write_json(&dir.join(MANIFEST_FILE), &Manifest::new(cfg, seed))?;

    let scenario_file = dir.join(SCENARIO_FILE);
    let scenario: FederatedScenario = if resume && scenario_file.exists() {
        read_json(&scenario_file)?
    } else if let Some(p) = scenario_path {
        read_json(p)?
    } else {
        build_scenario(g, &cfg.scenario_params(seed))?
    };
    write_json(&scenario_file, &scenario)?;

    let generators = if cfg.algorithm == Algorithm::FedLog {
        let own = dir.join(BANK_FILE);
        let gens = if let Some(p) = bank_path {
            load_bank(p, scenario.clients, g.dim())?
        } else if own.exists() {
            load_bank(&own, scenario.clients, g.dim())?
        } else {
            let (gens, reports) = pretrain_clients(g, &scenario, cfg, seed)?;
            save_bank(&own, &gens)?;
            write_pretrain_log(&own.with_extension("log.json"), &reports)?;
            gens
        };
        Some(gens)
    } else {
        if bank_path.is_some() {
            log::warn!("--bank is ignored for {}", cfg.algorithm);
        }
        None
    };

    let mut p = Protocol::new(cfg.protocol(seed), &scenario, g, generators);
    let metrics_path = dir.join(METRICS_FILE);
    let mut writer = if resume && state_exists(&dir) {
        load_state(&dir, &mut p)?;
        if p.round == 0 || !metrics_path.exists() {
            MetricsWriter::create(&metrics_path)?
        } else {
            truncate_metrics(&metrics_path, p.round - 1)?;
            log::info!("resuming {} from round {}", dir.display(), p.round);
            MetricsWriter::append(&metrics_path)?
        }
    } else {
        MetricsWriter::create(&metrics_path)?
    };

    while p.round < cfg.rounds {
        let records = p.run_round()?;
        writer.round_rows(&records, cfg.algorithm)?;
        if p.round % cfg.checkpoint_every == 0 || p.round == cfg.rounds {
            save_state(&dir, &p)?;
        }
    }
    if p.round > 0 && !state_exists(&dir) {
        save_state(&dir, &p)?;
    }

    let mut settings = BTreeMap::new();
    if p.round > 0 {
        let nets = p.eval_nets();
        for setting in EvalSetting::ALL {
            let report = evaluate(&nets, &scenario, g, setting, cfg.lambda)?;
            writer.eval_rows(p.round - 1, &report, cfg.algorithm)?;
            settings.insert(setting.to_string(), setting_score(&report));
        }
    }
    let eval = RunEval { seed, round: p.round.saturating_sub(1), settings };
    write_json(&dir.join("eval.json"), &eval)?;

    let best: Vec<f64> =
        p.clients.iter().filter_map(|c| c.best.as_ref().map(|b| b.accuracy)).collect();
    let (bm, _) = mean_std(&best);
    let target = p
        .ledger
        .target_round
        .map(|r| r.to_string())
        .unwrap_or_else(|| "-".to_string());
    let line = eval
        .settings
        .iter()
        .map(|(name, s)| match s.mean {
            Some(m) => format!("{name} {m:.4}"),
            None => format!("{name} -"),
        })
        .collect::<Vec<_>>()
        .join("  ");
    println!("seed {seed}: {line}  (best valid {bm:.4}; target round {target})");
    Ok(eval)
}

#[derive(serde::Serialize)]
struct TrainSummary {
    algorithm: String,
    group: String,
    seeds: Vec<u64>,
    per_seed: Vec<RunEval>,
    /// Cross-seed mean and sample standard deviation per setting.
    summary: BTreeMap<String, (f64, f64)>,
}

pub fn cmd_train(
    cfg: &RunConfig,
    scenario_path: Option<&Path>,
    bank_path: Option<&Path>,
    resume: bool,
) -> Result<(), CliError> {
    let g = load_data(cfg)?;
    let mut per_seed = Vec::new();
    for &seed in &cfg.seeds {
        per_seed.push(train_one(cfg, &g, seed, scenario_path, bank_path, resume)?);
    }

    let mut summary = BTreeMap::new();
    for setting in EvalSetting::ALL {
        let vals: Vec<f64> =
            per_seed.iter().filter_map(|e| e.settings.get(&setting.to_string())?.mean).collect();
        if !vals.is_empty() {
            summary.insert(setting.to_string(), mean_std(&vals));
        }
    }
    let line = summary
        .iter()
        .map(|(name, (m, s))| format!("{name} {m:.4} ± {s:.4}"))
        .collect::<Vec<_>>()
        .join("  ");
    println!("summary over {} seed(s): {line}", cfg.seeds.len());
    let doc = TrainSummary {
        algorithm: cfg.algorithm.to_string(),
        group: run_group(cfg),
        seeds: cfg.seeds.clone(),
        per_seed,
        summary,
    };
    write_json(&cfg.out_dir.join(format!("summary-{}.json", run_group(cfg))), &doc)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

pub fn parse_setting(s: &str) -> Result<EvalSetting, String> {
    for setting in EvalSetting::ALL {
        if s.eq_ignore_ascii_case(setting.name()) {
            return Ok(setting);
        }
    }
    Err(format!("unknown setting '{s}' (seen-graph, unseen-node, missing-class, new-client)"))
}

#[derive(serde::Serialize)]
struct EvalRunOut {
    dir: String,
    seed: u64,
    mean: Option<f64>,
    per_client: Vec<Option<f64>>,
}

#[derive(serde::Serialize)]
struct EvalSettingOut {
    mean: f64,
    std: f64,
    runs: Vec<EvalRunOut>,
}

/// Evaluate saved best checkpoints from one or more run directories and
/// aggregate mean(std) per setting across runs.
pub fn cmd_eval(
    runs: &[PathBuf],
    settings: &[EvalSetting],
    out: Option<&Path>,
) -> Result<(), CliError> {
    let settings: Vec<EvalSetting> =
        if settings.is_empty() { EvalSetting::ALL.to_vec() } else { settings.to_vec() };
    // (setting -> per-run results), runs in the order given.
    let mut per_setting: BTreeMap<String, Vec<EvalRunOut>> = BTreeMap::new();
    for dir in runs {
        let manifest: Manifest = read_json(&dir.join(MANIFEST_FILE))?;
        let g = load_data(&manifest.config)?;
        let scenario: FederatedScenario = read_json(&dir.join(SCENARIO_FILE))?;
        let template =
            Protocol::new(manifest.config.protocol(manifest.seed), &scenario, &g, None);
        let nets = load_best_nets(dir, &template)?;
        for &setting in &settings {
            let report = evaluate(&nets, &scenario, &g, setting, manifest.config.lambda)?;
            per_setting.entry(setting.to_string()).or_default().push(EvalRunOut {
                dir: dir.display().to_string(),
                seed: manifest.seed,
                mean: report.mean_accuracy(),
                per_client: report
                    .per_client
                    .iter()
                    .map(|s| s.as_ref().map(|x| x.accuracy))
                    .collect(),
            });
        }
    }
    let mut doc: BTreeMap<String, EvalSettingOut> = BTreeMap::new();
    for (name, runs) in per_setting {
        let vals: Vec<f64> = runs.iter().filter_map(|r| r.mean).collect();
        let (mean, std) = mean_std(&vals);
        println!("{name}: {mean:.4} ± {std:.4} over {} run(s)", runs.len());
        doc.insert(name, EvalSettingOut { mean, std, runs });
    }
    if let Some(path) = out {
        write_json(path, &doc)?;
    } else {
        println!("{}", serde_json::to_string_pretty(&doc).map_err(|e| CliError::Data(e.to_string()))?);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// reliability
// ---------------------------------------------------------------------------

fn reliability_cells(modes: &[String], rimb: &[i32]) -> Result<Vec<ReliabilityMode>, CliError> {
    let mut cells = Vec::new();
    for m in modes {
        match m.as_str() {
            "head-degree" => cells.push(ReliabilityMode::HeadDegree),
            "tail-degree" => cells.push(ReliabilityMode::TailDegree),
            "balanced" => cells.push(ReliabilityMode::Balanced),
            "imbalance" => cells.extend(rimb.iter().map(|&r| ReliabilityMode::Imbalance(r))),
            other => {
                return Err(CliError::Config(format!(
                    "unknown reliability mode '{other}' (head-degree, tail-degree, balanced, imbalance)"
                )))
            }
        }
    }
    Ok(cells)
}

fn mode_columns(mode: ReliabilityMode) -> (&'static str, String) {
    match mode {
        ReliabilityMode::HeadDegree => ("head-degree", String::new()),
        ReliabilityMode::TailDegree => ("tail-degree", String::new()),
        ReliabilityMode::Balanced => ("balanced", String::new()),
        ReliabilityMode::Imbalance(r) => ("imbalance", r.to_string()),
    }
}

/// Contributor-reliability sweep: client 0 receives, the other clients'
/// training data is filtered by mode, and the receiver's accuracy on its
/// excised target class is recorded per (mode, seed).
pub fn cmd_reliability(
    cfg: &RunConfig,
    modes: &[String],
    rimb: &[i32],
    out: &Path,
) -> Result<(), CliError> {
    let g = load_data(cfg)?;
    let cells = reliability_cells(modes, rimb)?;
    let mut csv = String::from("mode,r_imb,seed,receiver_accuracy,target_nodes\n");
    let mut means: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for &mode in &cells {
        for &seed in &cfg.seeds {
            let params = ReliabilityParams {
                clients: cfg.clients,
                lambda: cfg.lambda,
                mode,
                target_class: cfg.reliability_target_class,
                hops: cfg.hops,
                train_ratio: cfg.train_ratio,
                valid_ratio: cfg.valid_ratio,
                seed,
            };
            let scenario = build_reliability_scenario(&g, &params)?;
            let generators = if cfg.algorithm == Algorithm::FedLog {
                Some(pretrain_clients(&g, &scenario, cfg, seed)?.0)
            } else {
                None
            };
            let mut p = Protocol::new(cfg.protocol(seed), &scenario, &g, generators);
            p.run()?;
            let report = evaluate(&p.eval_nets(), &scenario, &g, EvalSetting::MissingClass, cfg.lambda)?;
            let receiver = report.per_client[0]
                .as_ref()
                .ok_or_else(|| CliError::Protocol("receiver has no target-class nodes".into()))?;
            let (mode_name, r_str) = mode_columns(mode);
            csv.push_str(&format!(
                "{mode_name},{r_str},{seed},{:.6},{}\n",
                receiver.accuracy, receiver.nodes
            ));
            let key = if r_str.is_empty() { mode_name.to_string() } else { format!("{mode_name} {r_str}") };
            means.entry(key).or_default().push(receiver.accuracy);
            log::info!("reliability {mode:?} seed {seed}: receiver accuracy {:.4}", receiver.accuracy);
        }
    }
    std::fs::write(out, &csv).map_err(|e| CliError::Data(format!("{}: {e}", out.display())))?;
    for (key, vals) in &means {
        let (m, s) = mean_std(vals);
        println!("{key}: {m:.4} ± {s:.4}");
    }
    println!("rows written to {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// privacy
// ---------------------------------------------------------------------------

#[derive(serde::Serialize)]
struct PrivacyOut {
    a: f64,
    /// noise tag -> setting -> (mean, std) over seeds.
    noises: BTreeMap<String, BTreeMap<String, (f64, f64)>>,
}

/// Class-rate privacy experiment: train under no noise, Gaussian noise, and
/// random permutation, holding the scenario and the pretrained generators
/// fixed per seed (the mechanisms only perturb what the server sees).
pub fn cmd_privacy(cfg: &RunConfig, gn_a: f64, out: &Path) -> Result<(), CliError> {
    if cfg.algorithm != Algorithm::FedLog {
        return Err(CliError::Config("privacy compares noise mechanisms on the dual-branch algorithm".into()));
    }
    let g = load_data(cfg)?;
    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| CliError::Data(format!("{}: {e}", cfg.out_dir.display())))?;
    let noises: [(String, Noise); 3] = [
        ("none".to_string(), Noise::None),
        (format!("gn{gn_a}"), Noise::Gaussian { a: gn_a }),
        ("rp".to_string(), Noise::Permute),
    ];
    // accs[noise][setting] = per-seed means
    let mut accs: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for &seed in &cfg.seeds {
        let scenario = build_scenario(&g, &cfg.scenario_params(seed))?;
        // Pretraining never sees the noise, so one bank serves all three arms.
        let bank_file = cfg.out_dir.join(format!("privacy-bank-s{seed}.flt"));
        let generators = if bank_file.exists() {
            load_bank(&bank_file, scenario.clients, g.dim())?
        } else {
            let (gens, _) = pretrain_clients(&g, &scenario, cfg, seed)?;
            save_bank(&bank_file, &gens)?;
            gens
        };
        for (tag, noise) in &noises {
            let mut pc = cfg.protocol(seed);
            pc.noise = *noise;
            let mut p = Protocol::new(pc, &scenario, &g, Some(generators.clone()));
            p.run()?;
            let nets = p.eval_nets();
            for setting in EvalSetting::ALL {
                let report = evaluate(&nets, &scenario, &g, setting, cfg.lambda)?;
                if let Some(m) = report.mean_accuracy() {
                    accs.entry(tag.clone())
                        .or_default()
                        .entry(setting.to_string())
                        .or_default()
                        .push(m);
                }
            }
            log::info!("privacy {tag} seed {seed} done");
        }
    }
    let mut doc = PrivacyOut { a: gn_a, noises: BTreeMap::new() };
    for (tag, settings) in accs {
        let mut out_settings = BTreeMap::new();
        for (name, vals) in settings {
            out_settings.insert(name, mean_std(&vals));
        }
        doc.noises.insert(tag, out_settings);
    }
    for (tag, settings) in &doc.noises {
        if let Some((m, s)) = settings.get("seen-graph") {
            println!("{tag}: seen-graph {m:.4} ± {s:.4}");
        }
    }
    write_json(out, &doc)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// pca
// ---------------------------------------------------------------------------

/// Project original and synthetic features of one class onto their joint top
/// two principal components and write `source,pc1,pc2` rows.
pub fn cmd_pca(run: &Path, class: usize, out: &Path) -> Result<(), CliError> {
    let manifest: Manifest = read_json(&run.join(MANIFEST_FILE))?;
    let g = load_data(&manifest.config)?;
    if class >= g.n_classes() {
        return Err(CliError::Config(format!(
            "class {class} out of range for {} classes",
            g.n_classes()
        )));
    }
    let dglobal = load_dglobal(run)?
        .ok_or_else(|| CliError::Data(format!("{} holds no synthetic data (run at least 2 rounds)", run.display())))?;
    let original: Vec<Vec<f64>> = (0..g.n())
        .filter(|&v| g.label(v) == class)
        .map(|v| g.features().row(v).to_vec())
        .collect();
    let synthetic: Vec<Vec<f64>> = dglobal
        .labels
        .iter()
        .enumerate()
        .filter(|(_, &c)| c == class)
        .map(|(i, _)| dglobal.features.row(i).to_vec())
        .collect();
    if original.is_empty() || synthetic.is_empty() {
        return Err(CliError::Data(format!(
            "class {class}: {} original and {} synthetic rows; need both",
            original.len(),
            synthetic.len()
        )));
    }
    let n_orig = original.len();
    let mut rows = original;
    rows.extend(synthetic);
    let x = Tensor::from_rows(&rows).map_err(|e| CliError::Data(e.to_string()))?;
    let proj = top2_components(&x)?;
    let mut csv = String::from("source,pc1,pc2\n");
    for i in 0..rows.len() {
        let source = if i < n_orig { "original" } else { "synthetic" };
        csv.push_str(&format!("{source},{:.6},{:.6}\n", proj.pc1[i], proj.pc2[i]));
    }
    std::fs::write(out, &csv).map_err(|e| CliError::Data(format!("{}: {e}", out.display())))?;
    println!("{} original + {} synthetic rows -> {}", n_orig, rows.len() - n_orig, out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

#[derive(serde::Serialize)]
struct ReportRun {
    dir: String,
    algorithm: String,
    group: String,
    seed: u64,
    rounds: usize,
    settings: BTreeMap<String, Option<f64>>,
    upload_mb: f64,
    download_mb: f64,
    target_round: Option<usize>,
}

#[derive(serde::Serialize)]
struct Report {
    runs: Vec<ReportRun>,
    /// group -> setting -> (mean, std) across that group's runs.
    summary: BTreeMap<String, BTreeMap<String, (f64, f64)>>,
}

/// Aggregate every run directory under the output root into one document.
pub fn cmd_report(out_dir: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(out_dir)
        .map_err(|e| CliError::Data(format!("{}: {e}", out_dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST_FILE).exists())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(CliError::Data(format!("no run directories under {}", out_dir.display())));
    }
    let mut runs = Vec::new();
    let mut grouped: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for dir in &dirs {
        let manifest: Manifest = read_json(&dir.join(MANIFEST_FILE))?;
        let eval: RunEval = read_json(&dir.join("eval.json"))?;
        let view = load_ledger(dir)?;
        let group = run_group(&manifest.config);
        let mut settings = BTreeMap::new();
        for (name, score) in &eval.settings {
            settings.insert(name.clone(), score.mean);
            if let Some(m) = score.mean {
                grouped.entry(group.clone()).or_default().entry(name.clone()).or_default().push(m);
            }
        }
        runs.push(ReportRun {
            dir: dir.display().to_string(),
            algorithm: manifest.config.algorithm.to_string(),
            group,
            seed: manifest.seed,
            rounds: view.round,
            settings,
            upload_mb: view.ledger.total_upload() as f64 / 1e6,
            download_mb: view.ledger.total_download() as f64 / 1e6,
            target_round: view.ledger.target_round,
        });
    }
    let mut summary = BTreeMap::new();
    for (group, settings) in grouped {
        let mut per_setting = BTreeMap::new();
        for (name, vals) in settings {
            per_setting.insert(name, mean_std(&vals));
        }
        summary.insert(group, per_setting);
    }
    let mut stdout = std::io::stdout().lock();
    for (group, settings) in &summary {
        let line = settings
            .iter()
            .map(|(n, (m, s))| format!("{n} {m:.4} ± {s:.4}"))
            .collect::<Vec<_>>()
            .join("  ");
        writeln!(stdout, "{group}: {line}").ok();
    }
    let doc = Report { runs, summary };
    match out {
        Some(path) => write_json(path, &doc)?,
        None => {
            let text =
                serde_json::to_string_pretty(&doc).map_err(|e| CliError::Data(e.to_string()))?;
            writeln!(stdout, "{text}").ok();
        }
    }
    Ok(())
}
