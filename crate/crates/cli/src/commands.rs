use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use fedho::federated::{curve_to_csv, run_offline, run_online};
use fedho::handover::{comm_cost, evaluate_many, mean_metrics, CommCost, Scheme};
use fedho::neural::{self, accuracy, loss, sgd_train_with, DEFAULT_DIMS};
use fedho::topology::build_region;
use fedho::{rng, Classifier, Dataset, MlpParams, PolicyKind, PolicySpec, Sample, Scenario, SnrTrace, Split, Standardizer, TrainConfig, World};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::manifest::Output;

pub const TRAIN_CSV: &str = "train.csv";
pub const TEST_CSV: &str = "test.csv";
pub const TOPOLOGY_JSON: &str = "topology.json";
pub const OFFLINE_MODEL: &str = "offline_model.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const COMM_COST_JSON: &str = "comm_cost.json";
pub const REPORT_MD: &str = "report.md";

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum TrainMode {
    Centralized,
    FlOffline,
    FlOnline,
}

impl TrainMode {
    fn prefix(self) -> &'static str {
        match self {
            Self::Centralized => "centralized",
            Self::FlOffline => "offline",
            Self::FlOnline => "online",
        }
    }
}

/// Sub-seed for one consumer of the master seed.
fn seed_for(cfg: &RunConfig, tag: &str) -> u64 {
    rng::derive_seed(cfg.run.seed, tag, 0)
}

fn scenario(cfg: &RunConfig) -> Result<Scenario, CliError> {
    let topology = build_region(&cfg.topology, seed_for(cfg, "topology"))?;
    Ok(Scenario::new(topology, cfg.channel.clone(), cfg.mobility.clone(), cfg.window, seed_for(cfg, "scenario"))?)
}

fn network_dims(scenario: &Scenario) -> Vec<usize> {
    vec![scenario.input_dim(), DEFAULT_DIMS[1], scenario.num_sbs()]
}

fn read_text(path: &Path, hint: &str) -> Result<String, CliError> {
    if !path.exists() {
        return Err(CliError::MissingInput(format!("{} not found ({hint})", path.display())));
    }
    std::fs::read_to_string(path).map_err(|e| CliError::io(path.display(), e))
}

fn load_dataset(dir: &Path, name: &str, split: Split, input_dim: usize) -> Result<Dataset, CliError> {
    let text = read_text(&dir.join(name), "run `fedho generate` first")?;
    let data = Dataset::from_csv(&text, split)?;
    if let Some(s) = data.samples.iter().find(|s| s.x.len() != input_dim) {
        return Err(CliError::Config(format!(
            "{name} has {} features per sample but the configured windows and topology need {input_dim}",
            s.x.len()
        )));
    }
    Ok(data)
}

fn group_balance(data: &Dataset) -> serde_json::Value {
    json!({ "samples": data.len(), "group_1": data.group_count(1), "group_2": data.group_count(2) })
}

pub fn generate(cfg: &RunConfig) -> Result<(), CliError> {
    let scenario = scenario(cfg)?;
    let data_seed = seed_for(cfg, "datasets");
    let train = scenario.balanced_set(cfg.dataset.train_size, "train", data_seed, Split::Train)?;
    let test = scenario.balanced_set(cfg.dataset.test_size, "test", data_seed, Split::Test)?;
    let mut out = Output::open(cfg, "generate")?;
    out.write(TRAIN_CSV, train.to_csv().as_bytes())?;
    out.write(TEST_CSV, test.to_csv().as_bytes())?;
    out.write(TOPOLOGY_JSON, scenario.topology.to_json().as_bytes())?;
    out.summary(
        "generate",
        json!({
            "scenario": cfg.run.scenario,
            "seeds": {
                "master": cfg.run.seed,
                "topology": seed_for(cfg, "topology"),
                "scenario": seed_for(cfg, "scenario"),
                "datasets": data_seed,
            },
            "train": group_balance(&train),
            "test": group_balance(&test),
        }),
    );
    out.finish()?;
    eprintln!("generated {} training and {} test samples", train.len(), test.len());
    Ok(())
}

/// Standardized copies of the generated sets plus the scaler fit on training data.
struct Prepared {
    scenario: Scenario,
    scaler: Standardizer,
    train: Vec<Sample>,
    test: Vec<Sample>,
}

fn prepare(cfg: &RunConfig) -> Result<Prepared, CliError> {
    let scenario = scenario(cfg)?;
    let dir = &cfg.run.output_dir;
    let train = load_dataset(dir, TRAIN_CSV, Split::Train, scenario.input_dim())?;
    let test = load_dataset(dir, TEST_CSV, Split::Test, scenario.input_dim())?;
    let scaler = Standardizer::fit(&train.samples)?;
    Ok(Prepared {
        train: scaler.apply_all(&train.samples),
        test: scaler.apply_all(&test.samples),
        scenario,
        scaler,
    })
}

fn write_model(out: &mut Output, prefix: &str, params: &MlpParams, scaler: &Standardizer) -> Result<(), CliError> {
    let classifier = Classifier::new(params.clone(), scaler.clone())?;
    out.write(&format!("{prefix}_model.bin"), &neural::serialize(params))?;
    out.write(&format!("{prefix}_model.json"), classifier.to_json().as_bytes())
}

pub fn train(cfg: &RunConfig, mode: TrainMode) -> Result<(), CliError> {
    // Checked before any work so a missing checkpoint fails fast.
    let offline = match mode {
        TrainMode::FlOnline => Some(load_classifier(&cfg.run.output_dir.join(OFFLINE_MODEL), &cfg.run.output_dir)?),
        _ => None,
    };
    let prep = prepare(cfg)?;
    let init = MlpParams::init(&network_dims(&prep.scenario), seed_for(cfg, "init"))?;
    let prefix = mode.prefix();
    let mut out = Output::open(cfg, &format!("train {prefix}"))?;
    let summary = match mode {
        TrainMode::Centralized => {
            let tc = TrainConfig {
                learning_rate: cfg.train.learning_rate,
                epochs: cfg.train.epochs,
                batch_size: cfg.train.batch_size,
                shuffle_seed: seed_for(cfg, "centralized"),
            };
            let mut curve = String::from("epoch,train_loss,train_accuracy\n");
            let model = sgd_train_with(&init, &prep.train, &tc, |epoch, m| {
                let _ = writeln!(curve, "{},{:.6},{:.6}", epoch + 1, loss(m, &prep.train)?, accuracy(m, &prep.train)?);
                Ok(())
            })?;
            let test_accuracy = accuracy(&model, &prep.test)?;
            out.write(&format!("{prefix}_curve.csv"), curve.as_bytes())?;
            write_model(&mut out, prefix, &model, &prep.scaler)?;
            json!({ "epochs": tc.epochs, "train_samples": prep.train.len(), "test_accuracy": test_accuracy })
        }
        TrainMode::FlOffline => {
            let world = World::new(prep.scenario.clone(), seed_for(cfg, "world"), prep.scaler.clone())?;
            let (model, curve) = run_offline(&world, &cfg.fl, &init, &prep.test)?;
            out.write(&format!("{prefix}_curve.csv"), curve_to_csv(&curve).as_bytes())?;
            write_model(&mut out, prefix, &model, &prep.scaler)?;
            json!({
                "rounds": curve.len(),
                "final_test_accuracy": curve.last().map(|l| l.test_accuracy),
                "participants": curve.iter().map(|l| l.participants).sum::<usize>(),
            })
        }
        TrainMode::FlOnline => {
            let offline = offline.expect("loaded above");
            // The offline model keeps its own input scaling.
            let scaler = offline.scaler.clone();
            let shifted = prep.scenario.with_mobility(prep.scenario.mobility.with_speed_range(cfg.online.speed_range_mps));
            let test_raw = shifted.balanced_set(cfg.online.test_size, "online-test", seed_for(cfg, "online-test"), Split::Test)?;
            let test = scaler.apply_all(&test_raw.samples);
            let world = World::new(shifted, seed_for(cfg, "online-world"), scaler.clone())?;
            let report = run_online(&world, &offline.params, &cfg.online.fl, &test)?;
            out.write(&format!("{prefix}_curve.csv"), curve_to_csv(&report.curve).as_bytes())?;
            write_model(&mut out, prefix, &report.final_model, &scaler)?;
            let mut summary = json!({
                "speed_range_mps": cfg.online.speed_range_mps,
                "rounds": report.curve.len(),
                "initial_accuracy": report.initial_accuracy,
                "average_accuracy": report.average_accuracy,
            });
            if cfg.online.compare_scratch {
                let scratch = run_online(&world, &init, &cfg.online.fl, &test)?;
                out.write(&format!("{prefix}_scratch_curve.csv"), curve_to_csv(&scratch.curve).as_bytes())?;
                summary["scratch_average_accuracy"] = json!(scratch.average_accuracy);
            }
            summary
        }
    };
    eprintln!("train {prefix}: {summary}");
    out.summary(&format!("train.{prefix}"), summary);
    out.finish()?;
    Ok(())
}

/// Reads a classifier from JSON, or from a raw checkpoint paired with the
/// scaler of the generated training set.
pub fn load_classifier(path: &Path, data_dir: &Path) -> Result<Classifier, CliError> {
    if !path.exists() {
        return Err(CliError::MissingInput(format!(
            "model {} not found (train it first, e.g. `fedho train --mode fl_offline`)",
            path.display()
        )));
    }
    if path.extension().is_some_and(|e| e == "bin") {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path.display(), e))?;
        let params = neural::deserialize(&bytes)?;
        let train = load_dataset(data_dir, TRAIN_CSV, Split::Train, params.input_dim())?;
        return Ok(Classifier::new(params, Standardizer::fit(&train.samples)?)?);
    }
    let text = read_text(path, "model checkpoint")?;
    Classifier::from_json(&text).map_err(|e| CliError::Config(format!("incompatible model file {}: {e}", path.display())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub policy: String,
    pub scenario: String,
    pub traces: usize,
    pub mean_handovers: f64,
    pub mean_avg_snr_db: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommReport {
    pub sojourn_s: f64,
    pub frame_s: f64,
    pub num_sbs: usize,
    pub num_params: usize,
    pub quantization_bits: u32,
    pub centralized: CommCost,
    pub federated: CommCost,
}

fn scenario_label(range: [f64; 2]) -> String {
    format!("{}-{}", range[0], range[1])
}

pub fn evaluate(cfg: &RunConfig, model_path: Option<&Path>) -> Result<(), CliError> {
    let dir = cfg.run.output_dir.clone();
    let model_path: PathBuf = model_path.map(Path::to_path_buf).unwrap_or_else(|| dir.join(OFFLINE_MODEL));
    let classifier = load_classifier(&model_path, &dir)?;
    let base = scenario(cfg)?;
    if classifier.params.input_dim() != base.input_dim() || classifier.params.num_classes() != base.num_sbs() {
        return Err(CliError::Config(format!(
            "incompatible model file {}: network is {:?}, configuration needs input {} and {} classes",
            model_path.display(),
            classifier.params.dims(),
            base.input_dim(),
            base.num_sbs()
        )));
    }
    let gamma = base.gamma_th();
    let policies = [
        PolicyKind::ReactiveNoTtt,
        PolicyKind::ReactiveTtt { ttt_s: cfg.policy.ttt_s },
        PolicyKind::ProactiveModel(&classifier),
        PolicyKind::ProactivePerfect,
    ];
    let mut metrics_csv = String::from("policy,scenario,trace_id,handovers,avg_snr_db\n");
    let mut rows = Vec::new();
    let mut accuracies = serde_json::Map::new();
    for (si, &range) in cfg.policy.speed_ranges_mps.iter().enumerate() {
        let label = scenario_label(range);
        let scen = base.with_mobility(base.mobility.with_speed_range(range));
        let eval_seed = rng::derive_seed(seed_for(cfg, "evaluate"), "scenario", si as u64);
        let traces: Vec<SnrTrace> = (0..cfg.policy.traces_per_scenario as u64)
            .into_par_iter()
            .map(|i| Ok(scen.traversal((i % 2) as usize, rng::derive_seed(eval_seed, "trace", i))?.trace))
            .collect::<Result<_, CliError>>()?;
        let acc_set = scen.balanced_set(4_000, "accuracy", eval_seed, Split::Test)?;
        accuracies.insert(label.clone(), json!(classifier.accuracy(&acc_set.samples)?));
        for kind in policies {
            let name = kind.name();
            let per_trace = evaluate_many(&traces, &PolicySpec::new(kind, gamma, cfg.window))?;
            for (i, m) in per_trace.iter().enumerate() {
                let _ = writeln!(metrics_csv, "{name},{label},{i},{},{:.6}", m.handover_count, m.avg_snr_db);
            }
            let (mean_handovers, mean_avg_snr_db) = mean_metrics(&per_trace)?;
            rows.push(SummaryRow { policy: name.to_string(), scenario: label.clone(), traces: traces.len(), mean_handovers, mean_avg_snr_db });
        }
    }
    let mut summary_csv = String::from("policy,scenario,traces,mean_handovers,mean_avg_snr_db\n");
    for r in &rows {
        let _ = writeln!(summary_csv, "{},{},{},{:.6},{:.6}", r.policy, r.scenario, r.traces, r.mean_handovers, r.mean_avg_snr_db);
    }
    let frame_s = cfg.channel.frame_duration_s;
    let num_params = classifier.params.len();
    let cost = |scheme| {
        comm_cost(scheme, base.num_sbs(), cfg.policy.sojourn_s, frame_s, num_params, cfg.policy.quantization_bits)
    };
    let comm = CommReport {
        sojourn_s: cfg.policy.sojourn_s,
        frame_s,
        num_sbs: base.num_sbs(),
        num_params,
        quantization_bits: cfg.policy.quantization_bits,
        centralized: cost(Scheme::Centralized)?,
        federated: cost(Scheme::Federated)?,
    };
    let summary = json!({ "model": model_path.display().to_string(), "model_accuracy": accuracies, "rows": rows });

    let mut out = Output::open(cfg, "evaluate")?;
    out.write(METRICS_CSV, metrics_csv.as_bytes())?;
    out.write(SUMMARY_CSV, summary_csv.as_bytes())?;
    out.write(SUMMARY_JSON, (serde_json::to_string_pretty(&summary).expect("serializable") + "\n").as_bytes())?;
    out.write(COMM_COST_JSON, (serde_json::to_string_pretty(&comm).expect("serializable") + "\n").as_bytes())?;
    out.summary("evaluate", json!({ "rows": rows.len(), "traces_per_scenario": cfg.policy.traces_per_scenario }));
    out.finish()?;
    eprint!("{summary_csv}");
    Ok(())
}

fn last_csv_field(text: &str, column: &str) -> Option<String> {
    let mut lines = text.lines();
    let idx = lines.next()?.split(',').position(|h| h == column)?;
    lines.last()?.split(',').nth(idx).map(str::to_string)
}

pub fn report(cfg: &RunConfig) -> Result<(), CliError> {
    let dir = cfg.run.output_dir.clone();
    let summary: serde_json::Value = serde_json::from_str(&read_text(&dir.join(SUMMARY_JSON), "run `fedho evaluate` first")?)
        .map_err(|e| CliError::MissingInput(format!("corrupt {SUMMARY_JSON}: {e}")))?;
    let comm: CommReport = serde_json::from_str(&read_text(&dir.join(COMM_COST_JSON), "run `fedho evaluate` first")?)
        .map_err(|e| CliError::MissingInput(format!("corrupt {COMM_COST_JSON}: {e}")))?;
    let rows: Vec<SummaryRow> = serde_json::from_value(summary["rows"].clone())
        .map_err(|e| CliError::MissingInput(format!("corrupt {SUMMARY_JSON}: {e}")))?;

    let mut md = format!("# Run report: {} (seed {})\n\n", cfg.run.scenario, cfg.run.seed);
    md.push_str("## Training\n\n| run | metric | value |\n|---|---|---|\n");
    let curves = [
        ("centralized", "train_accuracy"),
        ("offline", "test_accuracy"),
        ("online", "test_accuracy"),
    ];
    for (prefix, column) in curves {
        if let Ok(text) = std::fs::read_to_string(dir.join(format!("{prefix}_curve.csv"))) {
            let rows = text.lines().count().saturating_sub(1);
            let last = last_csv_field(&text, column).unwrap_or_else(|| "-".into());
            let _ = writeln!(md, "| {prefix} | final {column} after {rows} steps | {last} |");
        }
    }
    md.push_str("\n## Handover\n\n| scenario (m/s) | policy | handovers | avg SNR (dB) |\n|---|---|---|---|\n");
    for r in &rows {
        let _ = writeln!(md, "| {} | {} | {:.2} | {:.2} |", r.scenario, r.policy, r.mean_handovers, r.mean_avg_snr_db);
    }
    if let Some(acc) = summary["model_accuracy"].as_object() {
        md.push_str("\nClassifier accuracy per scenario: ");
        let parts: Vec<String> = acc.iter().map(|(k, v)| format!("{k} m/s {:.4}", v.as_f64().unwrap_or(f64::NAN))).collect();
        md.push_str(&parts.join(", "));
        md.push('\n');
    }
    let _ = write!(
        md,
        "\n## Uplink cost per vehicle\n\n| scheme | Kbits | Kbps |\n|---|---|---|\n| centralized | {:.4} | {:.4} |\n| federated | {:.4} | {:.4} |\n",
        comm.centralized.total_kbits, comm.centralized.rate_kbps, comm.federated.total_kbits, comm.federated.rate_kbps
    );
    let mut out = Output::open(cfg, "report")?;
    out.write(REPORT_MD, md.as_bytes())?;
    out.finish()?;
    print!("{md}");
    Ok(())
}
