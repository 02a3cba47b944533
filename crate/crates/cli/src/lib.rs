//! Experiment configuration, orchestration, metrics emission, and run
//! comparison for the slimdp simulator.
//!
//! Config comes from a flat `key=value` file, command-line flags, or both
//! (flags override file values). Every run writes one CSV row per evaluated
//! round plus a JSON summary; `compare` computes speedups between finished
//! runs from their CSVs alone.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use slimdp_core::codec::QuantParams;
use slimdp_core::data::{gen_synthetic, load_csv, Dataset};
use slimdp_core::model::ModelSpec;
use slimdp_core::selection::{CMode, SignificanceConfig};
use slimdp_core::sim::{
    run_simulation, Aggregation, CostModel, LrDecay, Method, ProtocolConfig, RoundMetrics,
    SimOptions,
};

pub const CSV_HEADER: &str =
    "round,samples,train_loss,test_loss,test_acc,push_words,pull_words,sim_comp_s,sim_comm_s,wall_s";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config line {line}: expected key=value, got {text:?}")]
    BadConfigLine { line: usize, text: String },

    #[error("unknown config key {0:?}")]
    UnknownKey(String),

    #[error("invalid value for {key}: {msg}")]
    BadValue { key: String, msg: String },

    #[error("missing required key: method (choose one of plump, quant, slim)")]
    MissingMethod,

    #[error(transparent)]
    Core(#[from] slimdp_core::Error),

    #[error("csv schema mismatch in {path}: expected header {expected:?}, got {got:?}")]
    SchemaMismatch {
        path: String,
        expected: String,
        got: String,
    },

    #[error("csv {path} line {line}: {msg}")]
    BadCsv {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("runs processed different sample counts: {a} vs {b}")]
    UnequalData { a: u64, b: u64 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Where the training data comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic {
        dim: usize,
        classes: usize,
        samples: usize,
        noise: f64,
    },
    Csv(PathBuf),
}

/// Everything a run needs, validated before any compute.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub protocol: ProtocolConfig,
    pub hidden: Vec<usize>,
    pub data: DataSource,
    /// Held-out rows for evaluation, split off the end of the data.
    pub test_samples: usize,
    pub rounds: u32,
    pub eval_every: u32,
    pub cost: CostModel,
    pub target_acc: Option<f64>,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            protocol: default_protocol(),
            hidden: vec![64],
            data: DataSource::Synthetic {
                dim: 16,
                classes: 5,
                samples: 4000,
                noise: 0.05,
            },
            test_samples: 1000,
            rounds: 200,
            eval_every: 20,
            cost: CostModel {
                latency_s: 1e-3,
                bandwidth_bps: 1e8,
                compute_s: 5e-4,
            },
            target_acc: None,
            out: None,
        }
    }
}

fn default_protocol() -> ProtocolConfig {
    let mut p = ProtocolConfig::new(Method::Plump, 4, 1);
    p.alpha = 0.3;
    p.beta = 0.15;
    p
}

/// Parses a flat `key=value` config file body. `#` starts a comment.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CliError::BadConfigLine {
                line: i + 1,
                text: raw.to_string(),
            });
        };
        out.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(out)
}

fn parse_as<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| CliError::BadValue {
        key: key.to_string(),
        msg: format!("{e} (got {value:?})"),
    })
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|s| parse_as::<usize>(key, s.trim()))
        .collect()
}

/// Builds a validated config from ordered key=value pairs; later pairs
/// (e.g. command-line flags) override earlier ones (file values).
pub fn build_config(pairs: &[(String, String)]) -> Result<ExperimentConfig> {
    let mut map = BTreeMap::new();
    for (k, v) in pairs {
        map.insert(k.clone(), v.clone());
    }
    let mut cfg = ExperimentConfig::default();
    let mut method_seen = false;
    let mut lr_decay_every: Option<u32> = None;
    let mut lr_decay_factor: Option<f64> = None;

    // The data source decides which other keys are legal, so resolve it first.
    if let Some(value) = map.remove("data") {
        cfg.data = if value == "synthetic" {
            ExperimentConfig::default().data
        } else if let Some(path) = value.strip_prefix("csv:") {
            DataSource::Csv(PathBuf::from(path))
        } else {
            return Err(CliError::BadValue {
                key: "data".into(),
                msg: format!("expected synthetic or csv:PATH, got {value:?}"),
            });
        };
    }

    for (key, value) in &map {
        match key.as_str() {
            "method" => {
                cfg.protocol.method = value.parse().map_err(CliError::Core)?;
                method_seen = true;
            }
            "alpha" => cfg.protocol.alpha = parse_as(key, value)?,
            "beta" => cfg.protocol.beta = parse_as(key, value)?,
            "p" => cfg.protocol.p = parse_as(key, value)?,
            "q" => cfg.protocol.q = parse_as(key, value)?,
            "workers" => cfg.protocol.workers = parse_as(key, value)?,
            "seed" => cfg.protocol.seed = parse_as(key, value)?,
            "batch" => cfg.protocol.batch = parse_as(key, value)?,
            "lr" => cfg.protocol.lr = parse_as(key, value)?,
            "eta_prime" => cfg.protocol.eta_prime = parse_as(key, value)?,
            "lr_decay_every" => lr_decay_every = Some(parse_as(key, value)?),
            "lr_decay_factor" => lr_decay_factor = Some(parse_as(key, value)?),
            "quant_bits" => {
                let bits: u8 = parse_as(key, value)?;
                cfg.protocol.quant = QuantParams::new(bits, cfg.protocol.quant.bucket())
                    .map_err(CliError::Core)?;
            }
            "quant_bucket" => {
                let bucket: u32 = parse_as(key, value)?;
                cfg.protocol.quant = QuantParams::new(cfg.protocol.quant.bits(), bucket)
                    .map_err(CliError::Core)?;
            }
            "aggregation" => {
                cfg.protocol.aggregation = match value.as_str() {
                    "mean" => Aggregation::Mean,
                    "sum" => Aggregation::Sum,
                    "max" => Aggregation::Max,
                    other => {
                        return Err(CliError::BadValue {
                            key: key.clone(),
                            msg: format!("expected mean, sum, or max, got {other:?}"),
                        })
                    }
                };
            }
            "full_pull_on_sync" => cfg.protocol.full_pull_on_sync = parse_as(key, value)?,
            "sig_c" => {
                cfg.protocol.significance = if value == "auto" {
                    SignificanceConfig::default()
                } else {
                    SignificanceConfig::fixed(parse_as(key, value)?).map_err(CliError::Core)?
                };
            }
            "threads" => cfg.protocol.threads = Some(parse_as(key, value)?),
            "hidden" => cfg.hidden = parse_list(key, value)?,
            "dim" => set_synthetic(&mut cfg.data, key, parse_as(key, value)?)?,
            "classes" => set_synthetic(&mut cfg.data, key, parse_as(key, value)?)?,
            "samples" => set_synthetic(&mut cfg.data, key, parse_as(key, value)?)?,
            "noise" => {
                let noise: f64 = parse_as(key, value)?;
                match &mut cfg.data {
                    DataSource::Synthetic { noise: n, .. } => *n = noise,
                    DataSource::Csv(_) => {
                        return Err(CliError::BadValue {
                            key: key.clone(),
                            msg: "noise applies to synthetic data only".into(),
                        })
                    }
                }
            }
            "test_samples" => cfg.test_samples = parse_as(key, value)?,
            "rounds" => cfg.rounds = parse_as(key, value)?,
            "eval_every" => cfg.eval_every = parse_as(key, value)?,
            "latency" => cfg.cost.latency_s = parse_as(key, value)?,
            "bandwidth" => cfg.cost.bandwidth_bps = parse_as(key, value)?,
            "compute_s" => cfg.cost.compute_s = parse_as(key, value)?,
            "target_acc" => cfg.target_acc = Some(parse_as(key, value)?),
            "out" => cfg.out = Some(PathBuf::from(value)),
            other => return Err(CliError::UnknownKey(other.to_string())),
        }
    }

    match (lr_decay_every, lr_decay_factor) {
        (None, None) => {}
        (Some(every), Some(factor)) => cfg.protocol.lr_decay = Some(LrDecay { every, factor }),
        _ => {
            return Err(CliError::BadValue {
                key: "lr_decay_every".into(),
                msg: "lr_decay_every and lr_decay_factor must be set together".into(),
            })
        }
    }

    if !method_seen {
        return Err(CliError::MissingMethod);
    }
    validate(&cfg)?;
    Ok(cfg)
}

fn set_synthetic(data: &mut DataSource, key: &str, value: usize) -> Result<()> {
    match data {
        DataSource::Synthetic {
            dim,
            classes,
            samples,
            ..
        } => {
            match key {
                "dim" => *dim = value,
                "classes" => *classes = value,
                "samples" => *samples = value,
                _ => unreachable!(),
            }
            Ok(())
        }
        DataSource::Csv(_) => Err(CliError::BadValue {
            key: key.to_string(),
            msg: "synthetic-data keys require data=synthetic".into(),
        }),
    }
}

fn validate(cfg: &ExperimentConfig) -> Result<()> {
    cfg.protocol.validate().map_err(CliError::Core)?;
    cfg.cost.validate().map_err(CliError::Core)?;
    if cfg.rounds < 1 {
        return Err(CliError::BadValue {
            key: "rounds".into(),
            msg: "must be >= 1".into(),
        });
    }
    if cfg.eval_every < 1 {
        return Err(CliError::BadValue {
            key: "eval_every".into(),
            msg: "must be >= 1".into(),
        });
    }
    if cfg.test_samples < 1 {
        return Err(CliError::BadValue {
            key: "test_samples".into(),
            msg: "must be >= 1".into(),
        });
    }
    if cfg.hidden.contains(&0) {
        return Err(CliError::BadValue {
            key: "hidden".into(),
            msg: "hidden sizes must be >= 1".into(),
        });
    }
    if let DataSource::Synthetic { classes, samples, .. } = &cfg.data {
        if *classes < 2 {
            return Err(CliError::BadValue {
                key: "classes".into(),
                msg: "must be >= 2".into(),
            });
        }
        if *samples < cfg.protocol.workers {
            return Err(CliError::BadValue {
                key: "samples".into(),
                msg: "must cover at least one row per worker".into(),
            });
        }
    }
    if let Some(t) = cfg.target_acc {
        if !(0.0..=1.0).contains(&t) {
            return Err(CliError::BadValue {
                key: "target_acc".into(),
                msg: "must be in [0, 1]".into(),
            });
        }
    }
    Ok(())
}

/// Normalized serialization; `build_config(parse_key_values(x))` then this
/// yields a stable canonical form.
pub fn config_to_key_values(cfg: &ExperimentConfig) -> String {
    let mut s = String::new();
    let p = &cfg.protocol;
    let _ = writeln!(s, "method={}", p.method.name());
    let _ = writeln!(s, "alpha={}", p.alpha);
    let _ = writeln!(s, "beta={}", p.beta);
    let _ = writeln!(s, "p={}", p.p);
    let _ = writeln!(s, "q={}", p.q);
    let _ = writeln!(s, "workers={}", p.workers);
    let _ = writeln!(s, "seed={}", p.seed);
    let _ = writeln!(s, "batch={}", p.batch);
    let _ = writeln!(s, "lr={}", p.lr);
    if let Some(d) = p.lr_decay {
        let _ = writeln!(s, "lr_decay_every={}", d.every);
        let _ = writeln!(s, "lr_decay_factor={}", d.factor);
    }
    let _ = writeln!(s, "eta_prime={}", p.eta_prime);
    let _ = writeln!(s, "quant_bits={}", p.quant.bits());
    let _ = writeln!(s, "quant_bucket={}", p.quant.bucket());
    let agg = match p.aggregation {
        Aggregation::Mean => "mean",
        Aggregation::Sum => "sum",
        Aggregation::Max => "max",
    };
    let _ = writeln!(s, "aggregation={agg}");
    let _ = writeln!(s, "full_pull_on_sync={}", p.full_pull_on_sync);
    match p.significance.c_mode {
        CMode::Auto => {
            let _ = writeln!(s, "sig_c=auto");
        }
        CMode::Fixed(c) => {
            let _ = writeln!(s, "sig_c={c}");
        }
    }
    if let Some(t) = p.threads {
        let _ = writeln!(s, "threads={t}");
    }
    let _ = writeln!(s, "hidden={}", join_usizes(&cfg.hidden));
    match &cfg.data {
        DataSource::Synthetic {
            dim,
            classes,
            samples,
            noise,
        } => {
            let _ = writeln!(s, "data=synthetic");
            let _ = writeln!(s, "dim={dim}");
            let _ = writeln!(s, "classes={classes}");
            let _ = writeln!(s, "samples={samples}");
            let _ = writeln!(s, "noise={noise}");
        }
        DataSource::Csv(path) => {
            let _ = writeln!(s, "data=csv:{}", path.display());
        }
    }
    let _ = writeln!(s, "test_samples={}", cfg.test_samples);
    let _ = writeln!(s, "rounds={}", cfg.rounds);
    let _ = writeln!(s, "eval_every={}", cfg.eval_every);
    let _ = writeln!(s, "latency={}", cfg.cost.latency_s);
    let _ = writeln!(s, "bandwidth={}", cfg.cost.bandwidth_bps);
    let _ = writeln!(s, "compute_s={}", cfg.cost.compute_s);
    if let Some(t) = cfg.target_acc {
        let _ = writeln!(s, "target_acc={t}");
    }
    if let Some(out) = &cfg.out {
        let _ = writeln!(s, "out={}", out.display());
    }
    s
}

fn join_usizes(v: &[usize]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// One CSV row: a snapshot at an evaluated round with cumulative counters.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub round: u32,
    pub samples: u64,
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    pub push_words: u64,
    pub pull_words: u64,
    pub sim_comp_s: f64,
    pub sim_comm_s: f64,
    pub wall_s: f64,
}

impl CsvRow {
    pub fn sim_total_s(&self) -> f64 {
        self.sim_comp_s + self.sim_comm_s
    }
}

/// Collapses per-round metrics into cumulative rows at evaluated rounds.
pub fn csv_rows(metrics: &[RoundMetrics]) -> Vec<CsvRow> {
    let mut rows = Vec::new();
    let mut samples = 0u64;
    let mut push = 0u64;
    let mut pull = 0u64;
    let mut comp = 0.0f64;
    let mut comm = 0.0f64;
    let mut wall = 0.0f64;
    for rm in metrics {
        samples += rm.samples;
        push += rm.push_words_total;
        pull += rm.pull_words_total;
        comp += rm.sim_comp_s;
        comm += rm.sim_comm_s;
        wall += rm.wall_s;
        if let (Some(test_loss), Some(test_acc)) = (rm.test_loss, rm.test_accuracy) {
            rows.push(CsvRow {
                round: rm.round,
                samples,
                train_loss: rm.train_loss,
                test_loss,
                test_acc,
                push_words: push,
                pull_words: pull,
                sim_comp_s: comp,
                sim_comm_s: comm,
                wall_s: wall,
            });
        }
    }
    rows
}

pub fn write_csv(rows: &[CsvRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            r.round,
            r.samples,
            r.train_loss,
            r.test_loss,
            r.test_acc,
            r.push_words,
            r.pull_words,
            r.sim_comp_s,
            r.sim_comm_s,
            r.wall_s
        );
    }
    s
}

/// Drops the wall_s column; the rest of the CSV is deterministic.
pub fn strip_wall_column(csv: &str) -> String {
    csv.lines()
        .map(|line| match line.rfind(',') {
            Some(i) => &line[..i],
            None => line,
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn parse_csv(text: &str, path: &str) -> Result<Vec<CsvRow>> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    if header != CSV_HEADER {
        return Err(CliError::SchemaMismatch {
            path: path.to_string(),
            expected: CSV_HEADER.to_string(),
            got: header.to_string(),
        });
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 {
            return Err(CliError::BadCsv {
                path: path.to_string(),
                line: i + 2,
                msg: format!("expected 10 fields, found {}", fields.len()),
            });
        }
        let field = |j: usize| -> &str { fields[j] };
        let num = |j: usize| -> Result<f64> {
            field(j).parse().map_err(|_| CliError::BadCsv {
                path: path.to_string(),
                line: i + 2,
                msg: format!("non-numeric field {:?}", field(j)),
            })
        };
        let int = |j: usize| -> Result<u64> {
            field(j).parse().map_err(|_| CliError::BadCsv {
                path: path.to_string(),
                line: i + 2,
                msg: format!("non-integer field {:?}", field(j)),
            })
        };
        rows.push(CsvRow {
            round: int(0)? as u32,
            samples: int(1)?,
            train_loss: num(2)?,
            test_loss: num(3)?,
            test_acc: num(4)?,
            push_words: int(5)?,
            pull_words: int(6)?,
            sim_comp_s: num(7)?,
            sim_comm_s: num(8)?,
            wall_s: num(9)?,
        });
    }
    Ok(rows)
}

/// End-of-run summary written alongside the CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: String,
    pub alpha: f64,
    pub beta: f64,
    pub workers: usize,
    pub seed: u64,
    pub rounds: u32,
    pub final_accuracy: f64,
    pub final_test_loss: f64,
    pub total_samples: u64,
    pub total_push_words: u64,
    pub total_pull_words: u64,
    pub total_sim_comp_s: f64,
    pub total_sim_comm_s: f64,
    pub total_sim_s: f64,
    pub header_bytes: u64,
    pub frames: u64,
    pub target_accuracy: Option<f64>,
    pub rounds_to_target_accuracy: Option<u32>,
    /// Filled by `compare` against a baseline run; null for standalone runs.
    pub speed_d: Option<f64>,
    pub speed_a: Option<f64>,
    pub baseline: Option<String>,
}

/// The finished artifacts of one experiment.
pub struct RunOutput {
    pub rows: Vec<CsvRow>,
    pub summary: RunSummary,
    pub csv_text: String,
}

fn build_dataset(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let full = match &cfg.data {
        DataSource::Synthetic {
            dim,
            classes,
            samples,
            noise,
        } => gen_synthetic(
            *dim,
            *classes,
            samples + cfg.test_samples,
            cfg.protocol.seed,
            *noise,
        )?,
        DataSource::Csv(path) => load_csv(path)?,
    };
    Ok(full.split_holdout(cfg.test_samples)?)
}

/// Runs one experiment and assembles its CSV rows and summary.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    validate(cfg)?;
    let (train, test) = build_dataset(cfg)?;
    let mut layers = Vec::with_capacity(cfg.hidden.len() + 2);
    layers.push(train.dim());
    layers.extend_from_slice(&cfg.hidden);
    layers.push(train.class_count());
    let model = ModelSpec::new(layers, cfg.protocol.seed)?;

    let opts = SimOptions {
        rounds: cfg.rounds,
        eval_every: cfg.eval_every,
        cost: cfg.cost,
        record_param_trajectory: false,
    };
    let result = run_simulation(&cfg.protocol, &model, Arc::new(train), &test, &opts)?;

    let rows = csv_rows(&result.metrics);
    let csv_text = write_csv(&rows);
    let last = rows.last().expect("final round is always evaluated");
    let rounds_to_target = cfg.target_acc.and_then(|target| {
        rows.iter().find(|r| r.test_acc >= target).map(|r| r.round)
    });
    let summary = RunSummary {
        method: cfg.protocol.method.name().to_string(),
        alpha: cfg.protocol.alpha,
        beta: cfg.protocol.beta,
        workers: cfg.protocol.workers,
        seed: cfg.protocol.seed,
        rounds: cfg.rounds,
        final_accuracy: last.test_acc,
        final_test_loss: last.test_loss,
        total_samples: last.samples,
        total_push_words: last.push_words,
        total_pull_words: last.pull_words,
        total_sim_comp_s: last.sim_comp_s,
        total_sim_comm_s: last.sim_comm_s,
        total_sim_s: last.sim_total_s(),
        header_bytes: result.metrics.iter().map(|m| m.header_bytes).sum(),
        frames: result.metrics.iter().map(|m| m.frames).sum(),
        target_accuracy: cfg.target_acc,
        rounds_to_target_accuracy: rounds_to_target,
        speed_d: None,
        speed_a: None,
        baseline: None,
    };
    Ok(RunOutput {
        rows,
        summary,
        csv_text,
    })
}

/// Writes the CSV and the `.summary.json` sibling; returns the summary path.
pub fn write_outputs(out_csv: &Path, output: &RunOutput) -> Result<PathBuf> {
    if let Some(dir) = out_csv.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|source| CliError::Io {
                path: dir.display().to_string(),
                source,
            })?;
        }
    }
    std::fs::write(out_csv, &output.csv_text).map_err(|source| CliError::Io {
        path: out_csv.display().to_string(),
        source,
    })?;
    let summary_path = out_csv.with_extension("summary.json");
    let json = serde_json::to_string_pretty(&output.summary).expect("summary serializes");
    std::fs::write(&summary_path, json).map_err(|source| CliError::Io {
        path: summary_path.display().to_string(),
        source,
    })?;
    Ok(summary_path)
}

/// Comparison of one candidate run against the baseline.
#[derive(Debug, Clone, Serialize)]
pub struct RunComparison {
    pub name: String,
    pub final_accuracy: f64,
    /// Baseline sim seconds over candidate sim seconds at equal data.
    pub speed_d: f64,
    /// Speedup in time-to-baseline-final-accuracy; null if never reached.
    pub speed_a: Option<f64>,
    pub comm_seconds_saving_pct: f64,
    pub word_saving_pct: f64,
}

/// First row at which a run reaches the accuracy target, by simulated time.
fn time_to_accuracy(rows: &[CsvRow], target: f64) -> Option<f64> {
    rows.iter()
        .find(|r| r.test_acc >= target)
        .map(CsvRow::sim_total_s)
}

/// Computes Speed_d / Speed_a / savings of candidates against a baseline,
/// from CSV rows alone.
pub fn compare_rows(
    baseline: &[CsvRow],
    candidates: &[(String, Vec<CsvRow>)],
) -> Result<Vec<RunComparison>> {
    let base_last = baseline.last().ok_or_else(|| CliError::BadCsv {
        path: "baseline".into(),
        line: 0,
        msg: "no rows".into(),
    })?;
    let target = base_last.test_acc;
    let base_time_to_target =
        time_to_accuracy(baseline, target).expect("baseline reaches its own final accuracy");

    let mut out = Vec::new();
    for (name, rows) in candidates {
        let last = rows.last().ok_or_else(|| CliError::BadCsv {
            path: name.clone(),
            line: 0,
            msg: "no rows".into(),
        })?;
        if last.samples != base_last.samples {
            return Err(CliError::UnequalData {
                a: base_last.samples,
                b: last.samples,
            });
        }
        let speed_d = base_last.sim_total_s() / last.sim_total_s();
        let speed_a = time_to_accuracy(rows, target).map(|t| base_time_to_target / t);
        let base_words = base_last.push_words + base_last.pull_words;
        let cand_words = last.push_words + last.pull_words;
        out.push(RunComparison {
            name: name.clone(),
            final_accuracy: last.test_acc,
            speed_d,
            speed_a,
            comm_seconds_saving_pct: 100.0 * (1.0 - last.sim_comm_s / base_last.sim_comm_s),
            word_saving_pct: 100.0 * (1.0 - cand_words as f64 / base_words as f64),
        });
    }
    Ok(out)
}

/// File-level wrapper around [`compare_rows`].
pub fn compare_runs(baseline: &Path, candidates: &[PathBuf]) -> Result<Vec<RunComparison>> {
    let read = |p: &Path| -> Result<Vec<CsvRow>> {
        let text = std::fs::read_to_string(p).map_err(|source| CliError::Io {
            path: p.display().to_string(),
            source,
        })?;
        parse_csv(&text, &p.display().to_string())
    };
    let base = read(baseline)?;
    let cands: Vec<(String, Vec<CsvRow>)> = candidates
        .iter()
        .map(|p| Ok((p.display().to_string(), read(p)?)))
        .collect::<Result<_>>()?;
    compare_rows(&base, &cands)
}

/// Renders the comparison table.
pub fn format_comparison(baseline_name: &str, comparisons: &[RunComparison]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<40} {:>10} {:>8} {:>8} {:>12} {:>11}",
        "run", "final_acc", "speed_d", "speed_a", "comm_save_%", "word_save_%"
    );
    let _ = writeln!(s, "{:<40} {:>10} {:>8} {:>8} {:>12} {:>11}", baseline_name, "baseline", "1.00", "1.00", "0.0", "0.0");
    for c in comparisons {
        let speed_a = c
            .speed_a
            .map(|v| format!("{v:.2}"))
            .unwrap_or_else(|| "never".to_string());
        let _ = writeln!(
            s,
            "{:<40} {:>10.4} {:>8.2} {:>8} {:>12.1} {:>11.1}",
            c.name, c.final_accuracy, c.speed_d, speed_a, c.comm_seconds_saving_pct, c.word_saving_pct
        );
    }
    s
}

/// Cartesian sweep over (alpha, beta) pairs for the slim method, skipping
/// invalid combinations with beta > alpha.
pub fn sweep(
    base: &ExperimentConfig,
    alphas: &[f64],
    betas: &[f64],
    out_dir: &Path,
) -> Result<Vec<(f64, f64, RunSummary)>> {
    std::fs::create_dir_all(out_dir).map_err(|source| CliError::Io {
        path: out_dir.display().to_string(),
        source,
    })?;
    let mut results = Vec::new();
    for &alpha in alphas {
        for &beta in betas {
            if beta > alpha {
                continue;
            }
            let mut cfg = base.clone();
            cfg.protocol.method = Method::Slim;
            cfg.protocol.alpha = alpha;
            cfg.protocol.beta = beta;
            let output = run_experiment(&cfg)?;
            let path = out_dir.join(format!("slim_a{alpha}_b{beta}.csv"));
            write_outputs(&path, &output)?;
            results.push((alpha, beta, output.summary));
        }
    }
    Ok(results)
}
