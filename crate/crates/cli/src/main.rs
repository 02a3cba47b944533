use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use slimdp_cli::{
    build_config, compare_runs, format_comparison, parse_key_values, run_experiment, sweep,
    write_outputs, CliError, ExperimentConfig,
};

/// Deterministic simulator of communication-efficient data-parallel training.
#[derive(Parser)]
#[command(name = "slimdp", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment; writes a metrics CSV and a JSON summary.
    Train(TrainArgs),
    /// Compute speedups of candidate runs against a baseline run.
    Compare(CompareArgs),
    /// Cartesian sweep over alpha/beta lists with the slim method.
    Sweep(SweepArgs),
}

#[derive(Args, Clone)]
struct TrainArgs {
    /// Flat key=value config file; flags below override file values.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Synchronization protocol: plump, quant, or slim.
    #[arg(long)]
    method: Option<String>,

    /// Communication-set fraction of n (slim).
    #[arg(long)]
    alpha: Option<f64>,

    /// Core fraction of n (slim); must not exceed alpha.
    #[arg(long)]
    beta: Option<f64>,

    /// Local mini-batch steps per communication round.
    #[arg(long)]
    p: Option<usize>,

    /// Communication rounds per core reselection (slim).
    #[arg(long)]
    q: Option<u32>,

    #[arg(long)]
    workers: Option<usize>,

    #[arg(long)]
    seed: Option<u64>,

    /// Communication rounds to simulate.
    #[arg(long)]
    rounds: Option<u32>,

    /// Held-out evaluation cadence in rounds.
    #[arg(long = "eval-every")]
    eval_every: Option<u32>,

    #[arg(long)]
    lr: Option<f32>,

    #[arg(long = "eta-prime")]
    eta_prime: Option<f64>,

    #[arg(long = "quant-bits")]
    quant_bits: Option<u8>,

    #[arg(long = "quant-bucket")]
    quant_bucket: Option<u32>,

    /// Per-message latency in seconds.
    #[arg(long)]
    latency: Option<f64>,

    /// Link bandwidth in bytes per second.
    #[arg(long)]
    bandwidth: Option<f64>,

    /// Simulated seconds of compute per mini-batch.
    #[arg(long = "compute-s")]
    compute_s: Option<f64>,

    /// Data source: "synthetic" or "csv:PATH".
    #[arg(long)]
    data: Option<String>,

    /// Mini-batch size.
    #[arg(long)]
    batch: Option<usize>,

    /// Hidden layer sizes, comma separated.
    #[arg(long)]
    hidden: Option<String>,

    /// Synthetic input dimension.
    #[arg(long)]
    dim: Option<usize>,

    /// Synthetic class count.
    #[arg(long)]
    classes: Option<usize>,

    /// Synthetic training rows.
    #[arg(long)]
    samples: Option<usize>,

    /// Synthetic label-noise fraction in [0, 1].
    #[arg(long)]
    noise: Option<f64>,

    /// Held-out rows split off the end of the data.
    #[arg(long = "test-samples")]
    test_samples: Option<usize>,

    /// Worker-parallelism cap (also honored from SLIMDP_THREADS).
    #[arg(long)]
    threads: Option<usize>,

    /// Decay the learning rate by lr-decay-factor every this many rounds.
    #[arg(long = "lr-decay-every")]
    lr_decay_every: Option<u32>,

    #[arg(long = "lr-decay-factor")]
    lr_decay_factor: Option<f64>,

    /// Server aggregation: mean, sum, or max.
    #[arg(long)]
    aggregation: Option<String>,

    /// Pull the whole model on full-push rounds (slim).
    #[arg(long = "full-pull-on-sync")]
    full_pull_on_sync: Option<bool>,

    /// Significance coefficient: "auto" or a fixed value.
    #[arg(long = "sig-c")]
    sig_c: Option<String>,

    /// Record the first round reaching this accuracy in the summary.
    #[arg(long = "target-acc")]
    target_acc: Option<f64>,

    /// Metrics CSV path; the JSON summary lands next to it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// Baseline metrics CSV (speeds are normalized to this run).
    baseline: PathBuf,

    /// Candidate metrics CSVs.
    #[arg(required = true)]
    candidates: Vec<PathBuf>,

    /// Also write the comparison as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    train: TrainArgs,

    /// Alpha values, comma separated.
    #[arg(long, required = true)]
    alphas: String,

    /// Beta values, comma separated (pairs with beta > alpha are skipped).
    #[arg(long, required = true)]
    betas: String,

    /// Output directory for the per-pair CSVs.
    #[arg(long = "sweep-out", required = true)]
    sweep_out: PathBuf,
}

impl TrainArgs {
    /// Flags become key=value overrides appended after the file values.
    fn overrides(&self) -> Vec<(String, String)> {
        let mut kv: Vec<(String, String)> = Vec::new();
        let mut push = |key: &str, value: Option<String>| {
            if let Some(v) = value {
                kv.push((key.to_string(), v));
            }
        };
        push("method", self.method.clone());
        push("alpha", self.alpha.map(|v| v.to_string()));
        push("beta", self.beta.map(|v| v.to_string()));
        push("p", self.p.map(|v| v.to_string()));
        push("q", self.q.map(|v| v.to_string()));
        push("workers", self.workers.map(|v| v.to_string()));
        push("seed", self.seed.map(|v| v.to_string()));
        push("rounds", self.rounds.map(|v| v.to_string()));
        push("eval_every", self.eval_every.map(|v| v.to_string()));
        push("lr", self.lr.map(|v| v.to_string()));
        push("eta_prime", self.eta_prime.map(|v| v.to_string()));
        push("quant_bits", self.quant_bits.map(|v| v.to_string()));
        push("quant_bucket", self.quant_bucket.map(|v| v.to_string()));
        push("latency", self.latency.map(|v| v.to_string()));
        push("bandwidth", self.bandwidth.map(|v| v.to_string()));
        push("compute_s", self.compute_s.map(|v| v.to_string()));
        push("data", self.data.clone());
        push("batch", self.batch.map(|v| v.to_string()));
        push("hidden", self.hidden.clone());
        push("dim", self.dim.map(|v| v.to_string()));
        push("classes", self.classes.map(|v| v.to_string()));
        push("samples", self.samples.map(|v| v.to_string()));
        push("noise", self.noise.map(|v| v.to_string()));
        push("test_samples", self.test_samples.map(|v| v.to_string()));
        push(
            "threads",
            self.threads
                .map(|v| v.to_string())
                .or_else(|| std::env::var("SLIMDP_THREADS").ok()),
        );
        push("lr_decay_every", self.lr_decay_every.map(|v| v.to_string()));
        push("lr_decay_factor", self.lr_decay_factor.map(|v| v.to_string()));
        push("aggregation", self.aggregation.clone());
        push(
            "full_pull_on_sync",
            self.full_pull_on_sync.map(|v| v.to_string()),
        );
        push("sig_c", self.sig_c.clone());
        push("target_acc", self.target_acc.map(|v| v.to_string()));
        push(
            "out",
            self.out.as_ref().map(|p| p.display().to_string()),
        );
        kv
    }

    fn resolve(&self) -> anyhow::Result<ExperimentConfig> {
        let mut pairs = Vec::new();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            pairs.extend(parse_key_values(&text)?);
        }
        pairs.extend(self.overrides());
        Ok(build_config(&pairs)?)
    }
}

fn default_out_name(cfg: &ExperimentConfig) -> PathBuf {
    PathBuf::from(format!(
        "{}_a{}_b{}_seed{}.csv",
        cfg.protocol.method.name(),
        cfg.protocol.alpha,
        cfg.protocol.beta,
        cfg.protocol.seed
    ))
}

fn cmd_train(args: &TrainArgs) -> anyhow::Result<()> {
    let cfg = args.resolve()?;
    let output = run_experiment(&cfg)?;
    let out_csv = cfg.out.clone().unwrap_or_else(|| default_out_name(&cfg));
    let summary_path = write_outputs(&out_csv, &output)?;
    let s = &output.summary;
    println!(
        "{}: {} rounds, final accuracy {:.4}, {} push + {} pull words, sim {:.3}s (comp {:.3}s, comm {:.3}s)",
        s.method,
        s.rounds,
        s.final_accuracy,
        s.total_push_words,
        s.total_pull_words,
        s.total_sim_s,
        s.total_sim_comp_s,
        s.total_sim_comm_s
    );
    println!("wrote {} and {}", out_csv.display(), summary_path.display());
    Ok(())
}

fn cmd_compare(args: &CompareArgs) -> anyhow::Result<()> {
    let comparisons = compare_runs(&args.baseline, &args.candidates)?;
    print!(
        "{}",
        format_comparison(&args.baseline.display().to_string(), &comparisons)
    );
    if let Some(json_path) = &args.json {
        let json = serde_json::to_string_pretty(&comparisons)?;
        std::fs::write(json_path, json)
            .map_err(|source| CliError::Io {
                path: json_path.display().to_string(),
                source,
            })?;
        println!("wrote {}", json_path.display());
    }
    Ok(())
}

fn parse_f64_list(name: &str, text: &str) -> anyhow::Result<Vec<f64>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .with_context(|| format!("parsing --{name} entry {s:?}"))
        })
        .collect()
}

fn cmd_sweep(args: &SweepArgs) -> anyhow::Result<()> {
    let mut train = args.train.clone();
    // The sweep owns method/alpha/beta.
    train.method = Some("slim".to_string());
    let base = train.resolve()?;
    let alphas = parse_f64_list("alphas", &args.alphas)?;
    let betas = parse_f64_list("betas", &args.betas)?;
    let results = sweep(&base, &alphas, &betas, &args.sweep_out)?;
    for (alpha, beta, summary) in &results {
        println!(
            "slim({alpha}, {beta}): final accuracy {:.4}, sim {:.3}s, {} total words",
            summary.final_accuracy,
            summary.total_sim_s,
            summary.total_push_words + summary.total_pull_words
        );
    }
    println!("{} runs written to {}", results.len(), args.sweep_out.display());
    Ok(())
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Sweep(args) => cmd_sweep(args),
    }
}
