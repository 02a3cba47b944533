//! Config parsing, CSV schema, speedup math, and rerun determinism.

use slimdp_cli::{
    build_config, compare_rows, config_to_key_values, parse_csv, parse_key_values, run_experiment,
    strip_wall_column, write_csv, CliError, CsvRow, DataSource, CSV_HEADER,
};
use slimdp_core::sim::Method;

fn pairs(text: &str) -> Vec<(String, String)> {
    parse_key_values(text).unwrap()
}

#[test]
fn golden_csv_header() {
    assert_eq!(
        CSV_HEADER,
        "round,samples,train_loss,test_loss,test_acc,push_words,pull_words,sim_comp_s,sim_comm_s,wall_s"
    );
    let text = write_csv(&[]);
    assert_eq!(text, format!("{CSV_HEADER}\n"));
}

#[test]
fn config_round_trips_through_normalization() {
    let original = "\
# experiment
method=slim
alpha=0.3
beta=0.15
p=1
q=50
workers=4
seed=1
rounds=120
eval_every=30
lr=0.25
batch=16
hidden=24,12
data=synthetic
dim=10
classes=4
samples=600
noise=0.1
test_samples=150
latency=0.002
bandwidth=50000000
compute_s=0.0004
";
    let cfg = build_config(&pairs(original)).unwrap();
    let normalized = config_to_key_values(&cfg);
    let cfg2 = build_config(&pairs(&normalized)).unwrap();
    assert_eq!(config_to_key_values(&cfg2), normalized);
    assert_eq!(cfg2.protocol.alpha, 0.3);
    assert_eq!(cfg2.hidden, vec![24, 12]);
    assert_eq!(cfg2.rounds, 120);
}

#[test]
fn flags_override_file_values() {
    let mut kv = pairs("method=plump\nseed=3\nrounds=50\n");
    kv.push(("seed".into(), "9".into()));
    kv.push(("method".into(), "slim".into()));
    let cfg = build_config(&kv).unwrap();
    assert_eq!(cfg.protocol.seed, 9);
    assert_eq!(cfg.protocol.method, Method::Slim);
}

#[test]
fn beta_above_alpha_is_rejected_with_a_clear_message() {
    let err = build_config(&pairs("method=slim\nalpha=0.2\nbeta=0.3\n")).unwrap_err();
    assert!(
        err.to_string().contains("beta must not exceed alpha"),
        "{err}"
    );
}

#[test]
fn missing_method_lists_the_choices() {
    let err = build_config(&pairs("alpha=0.3\n")).unwrap_err();
    let msg = err.to_string();
    for m in ["plump", "quant", "slim"] {
        assert!(msg.contains(m), "{msg}");
    }
}

#[test]
fn unknown_keys_are_rejected() {
    let err = build_config(&pairs("method=plump\nbogus_key=1\n")).unwrap_err();
    assert!(matches!(err, CliError::UnknownKey(k) if k == "bogus_key"));
}

#[test]
fn degenerate_counts_are_rejected() {
    for bad in ["p=0", "q=0", "workers=0"] {
        let text = format!("method=plump\n{bad}\n");
        assert!(build_config(&pairs(&text)).is_err(), "{bad} must fail");
    }
}

#[test]
fn csv_data_source_rejects_synthetic_keys() {
    let err = build_config(&pairs("method=plump\ndata=csv:/tmp/x.csv\nclasses=5\n")).unwrap_err();
    assert!(err.to_string().contains("synthetic"), "{err}");
}

fn row(round: u32, samples: u64, acc: f64, comp: f64, comm: f64) -> CsvRow {
    CsvRow {
        round,
        samples,
        train_loss: 1.0,
        test_loss: 1.0,
        test_acc: acc,
        push_words: 100 * round as u64,
        pull_words: 100 * round as u64,
        sim_comp_s: comp,
        sim_comm_s: comm,
        wall_s: 0.1,
    }
}

#[test]
fn speedups_match_hand_computation_on_a_three_row_fixture() {
    // Baseline: totals 2, 4, 6 seconds; final accuracy 0.8 first reached on
    // the last row, so time-to-target is 6 seconds.
    let baseline = vec![
        row(1, 100, 0.50, 1.0, 1.0),
        row(2, 200, 0.70, 2.0, 2.0),
        row(3, 300, 0.80, 3.0, 3.0),
    ];
    // Candidate: totals 1.5, 3, 4.5 seconds; reaches 0.8 at row 2 (3 s).
    let candidate = vec![
        row(1, 100, 0.75, 0.75, 0.75),
        row(2, 200, 0.82, 1.5, 1.5),
        row(3, 300, 0.85, 2.25, 2.25),
    ];
    let out = compare_rows(&baseline, &[("fast".into(), candidate)]).unwrap();
    assert!((out[0].speed_d - 6.0 / 4.5).abs() < 1e-12);
    assert!((out[0].speed_a.unwrap() - 6.0 / 3.0).abs() < 1e-12);

    // A candidate identical to the baseline scores 1.0 on both.
    let out = compare_rows(&baseline, &[("same".into(), baseline.clone())]).unwrap();
    assert!((out[0].speed_d - 1.0).abs() < 1e-12);
    assert!((out[0].speed_a.unwrap() - 1.0).abs() < 1e-12);

    // A candidate that never reaches the baseline's final accuracy has no Speed_a.
    let slow = vec![
        row(1, 100, 0.40, 0.9, 0.9),
        row(2, 200, 0.60, 1.8, 1.8),
        row(3, 300, 0.79, 2.7, 2.7),
    ];
    let out = compare_rows(&baseline, &[("slow".into(), slow)]).unwrap();
    assert!(out[0].speed_a.is_none());
    assert!(out[0].speed_d > 1.0);
}

#[test]
fn unequal_data_is_rejected() {
    let baseline = vec![row(1, 100, 0.5, 1.0, 1.0)];
    let candidate = vec![row(1, 120, 0.5, 1.0, 1.0)];
    assert!(matches!(
        compare_rows(&baseline, &[("c".into(), candidate)]),
        Err(CliError::UnequalData { a: 100, b: 120 })
    ));
}

#[test]
fn csv_round_trips_and_schema_is_enforced() {
    let rows = vec![row(1, 100, 0.5, 1.0, 1.5), row(2, 200, 0.625, 2.0, 3.0)];
    let text = write_csv(&rows);
    let parsed = parse_csv(&text, "mem").unwrap();
    assert_eq!(parsed, rows);

    let bad = text.replace("test_acc", "accuracy");
    assert!(matches!(
        parse_csv(&bad, "mem"),
        Err(CliError::SchemaMismatch { .. })
    ));
}

#[test]
fn rerun_with_the_same_config_is_byte_identical_outside_wall_clock() {
    let cfg = build_config(&pairs(
        "method=slim\nalpha=0.4\nbeta=0.2\nq=5\nworkers=2\nseed=11\nrounds=12\neval_every=4\n\
         dim=6\nclasses=3\nsamples=300\ntest_samples=60\nhidden=10\nbatch=10\nlr=0.2\n",
    ))
    .unwrap();
    let a = run_experiment(&cfg).unwrap();
    let b = run_experiment(&cfg).unwrap();
    assert_eq!(strip_wall_column(&a.csv_text), strip_wall_column(&b.csv_text));
    assert_eq!(a.summary.final_accuracy, b.summary.final_accuracy);
    assert_eq!(a.summary.total_push_words, b.summary.total_push_words);
}

#[test]
fn run_experiment_totals_are_consistent_with_rows() {
    let cfg = build_config(&pairs(
        "method=quant\nworkers=2\nseed=5\nrounds=10\neval_every=5\ndim=6\nclasses=3\n\
         samples=200\ntest_samples=50\nhidden=8\nbatch=8\n",
    ))
    .unwrap();
    let out = run_experiment(&cfg).unwrap();
    let last = out.rows.last().unwrap();
    assert_eq!(out.summary.total_push_words, last.push_words);
    assert_eq!(out.summary.final_accuracy, last.test_acc);
    assert_eq!(out.rows.len(), 2);
    // Quant pushes fewer words than it pulls (pulls are dense).
    assert!(last.push_words < last.pull_words);
}

#[test]
fn slim_beats_plump_on_communication_seconds_under_one_cost_model() {
    let base = "workers=2\nseed=6\nrounds=20\neval_every=10\ndim=8\nclasses=3\nsamples=400\n\
                test_samples=80\nhidden=20,10\nbatch=10\nlatency=0.001\nbandwidth=100000000\ncompute_s=0.0005\n";
    let plump = build_config(&pairs(&format!("method=plump\n{base}"))).unwrap();
    let slim = build_config(&pairs(&format!("method=slim\nalpha=0.3\nbeta=0.15\nq=10\n{base}")))
        .unwrap();
    let plump_out = run_experiment(&plump).unwrap();
    let slim_out = run_experiment(&slim).unwrap();
    assert!(
        slim_out.summary.total_sim_comm_s < plump_out.summary.total_sim_comm_s,
        "slim {} vs plump {}",
        slim_out.summary.total_sim_comm_s,
        plump_out.summary.total_sim_comm_s
    );
}

#[test]
fn data_source_wiring_matches_the_flag_grammar() {
    let cfg = build_config(&pairs("method=plump\ndata=csv:/some/file.csv\n")).unwrap();
    assert_eq!(cfg.data, DataSource::Csv("/some/file.csv".into()));
    let err = build_config(&pairs("method=plump\ndata=parquet:/x\n")).unwrap_err();
    assert!(err.to_string().contains("synthetic or csv:PATH"), "{err}");
}

#[test]
fn outputs_land_next_to_each_other_and_summary_parses_back() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = build_config(&pairs(
        "method=plump\nworkers=2\nseed=2\nrounds=6\neval_every=3\ndim=4\nclasses=2\n\
         samples=100\ntest_samples=30\nhidden=6\nbatch=5\n",
    ))
    .unwrap();
    let out = run_experiment(&cfg).unwrap();
    let csv_path = dir.path().join("runs/exp.csv");
    let summary_path = slimdp_cli::write_outputs(&csv_path, &out).unwrap();
    assert_eq!(summary_path, dir.path().join("runs/exp.summary.json"));
    let csv_text = std::fs::read_to_string(&csv_path).unwrap();
    assert_eq!(csv_text, out.csv_text);
    let summary: slimdp_cli::RunSummary =
        serde_json::from_str(&std::fs::read_to_string(&summary_path).unwrap()).unwrap();
    assert_eq!(summary.final_accuracy, out.summary.final_accuracy);
    assert_eq!(summary.method, "plump");
}

#[test]
fn sweep_writes_one_run_per_valid_pair() {
    let dir = tempfile::tempdir().unwrap();
    let base = build_config(&pairs(
        "method=slim\nworkers=2\nseed=4\nrounds=6\neval_every=3\ndim=4\nclasses=2\n\
         samples=120\ntest_samples=30\nhidden=6\nbatch=5\nq=3\n",
    ))
    .unwrap();
    let results = slimdp_cli::sweep(&base, &[0.2, 0.4], &[0.1, 0.3], dir.path()).unwrap();
    // (0.2, 0.3) is skipped because beta > alpha.
    assert_eq!(results.len(), 3);
    for (alpha, beta, _) in &results {
        let path = dir.path().join(format!("slim_a{alpha}_b{beta}.csv"));
        assert!(path.exists(), "{} missing", path.display());
    }
}
