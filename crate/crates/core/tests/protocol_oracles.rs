//! Cross-module oracles: protocol equivalence, sequential-SGD equivalence,
//! accounting conservation, and thread-count determinism on small models.

use std::sync::Arc;

use slimdp_core::codec::QuantParams;
use slimdp_core::data::{gen_synthetic, partition, BatchStream, Dataset};
use slimdp_core::model::{Mlp, ModelSpec};
use slimdp_core::seeds::{self, role};
use slimdp_core::sim::{
    is_full_push_round, run_simulation, CostModel, Method, ProtocolConfig, SimOptions,
};
use slimdp_core::selection::fraction_size;

fn setup(layers: Vec<usize>, m: usize, seed: u64) -> (ModelSpec, Arc<Dataset>, Dataset) {
    let spec = ModelSpec::new(layers, seed).unwrap();
    let all = gen_synthetic(spec.input_dim(), spec.class_count(), m + 30, seed, 0.0).unwrap();
    let (train, test) = all.split_holdout(30).unwrap();
    (spec, Arc::new(train), test)
}

fn cheap_cost() -> CostModel {
    CostModel {
        latency_s: 1e-3,
        bandwidth_bps: 1e8,
        compute_s: 5e-4,
    }
}

#[test]
fn slim_with_full_fractions_is_bitwise_plump() {
    for (k, p) in [(1usize, 1usize), (2, 2)] {
        let (spec, train, test) = setup(vec![6, 10, 4], 80, 42);
        let opts = SimOptions {
            rounds: 12,
            eval_every: 6,
            cost: cheap_cost(),
            record_param_trajectory: true,
        };

        let mut plump = ProtocolConfig::new(Method::Plump, k, 42);
        plump.p = p;
        plump.q = 4;
        let plump_run = run_simulation(&plump, &spec, train.clone(), &test, &opts).unwrap();

        let mut slim = ProtocolConfig::new(Method::Slim, k, 42);
        slim.alpha = 1.0;
        slim.beta = 1.0;
        slim.p = p;
        slim.q = 4;
        let slim_run = run_simulation(&slim, &spec, train, &test, &opts).unwrap();

        let pt = plump_run.param_trajectory.unwrap();
        let st = slim_run.param_trajectory.unwrap();
        for (t, (a, b)) in pt.iter().zip(&st).enumerate() {
            for (i, (x, y)) in a.iter().zip(b).enumerate() {
                assert_eq!(
                    x.to_bits(),
                    y.to_bits(),
                    "K={k} p={p} round {t} coordinate {i}"
                );
            }
        }
    }
}

#[test]
fn single_worker_plump_replays_sequential_sgd() {
    let (spec, train, test) = setup(vec![5, 8, 3], 60, 7);
    let rounds = 30u32;
    let mut cfg = ProtocolConfig::new(Method::Plump, 1, 7);
    cfg.p = 1;
    cfg.lr = 0.05;
    let opts = SimOptions {
        rounds,
        eval_every: rounds,
        cost: cheap_cost(),
        record_param_trajectory: true,
    };
    let sim = run_simulation(&cfg, &spec, train.clone(), &test, &opts).unwrap();
    let trajectory = sim.param_trajectory.unwrap();

    // Direct sequential SGD on the same stream, no frames, no server.
    let mlp = Mlp::new(spec);
    let mut w = mlp.init_params();
    let shards = partition(&train, 1, cfg.seed).unwrap();
    let stream_seed = seeds::derive(cfg.seed, role::BATCH, 0, 0);
    let mut stream = BatchStream::new(train, &shards[0], cfg.batch, stream_seed).unwrap();
    for t in 0..rounds as usize {
        let batch = stream.next_batch();
        let (_, grad) = mlp.loss_and_grad(&w, &batch).unwrap();
        let ws = w.as_mut_slice();
        for (wi, gi) in ws.iter_mut().zip(grad.as_slice()) {
            *wi -= cfg.lr * gi;
        }
        for (i, (x, y)) in trajectory[t].iter().zip(w.as_slice()).enumerate() {
            assert_eq!(x.to_bits(), y.to_bits(), "round {t} coordinate {i}");
        }
    }
}

#[test]
fn word_accounting_matches_the_closed_forms() {
    // n = 1000 exactly.
    let (spec, train, test) = setup(vec![22, 30, 10], 100, 3);
    assert_eq!(spec.param_count(), 1000);
    let n = 1000usize;

    let mut slim = ProtocolConfig::new(Method::Slim, 3, 3);
    slim.alpha = 0.3;
    slim.beta = 0.15;
    slim.q = 4;
    slim.batch = 8;
    let opts = SimOptions {
        rounds: 9,
        eval_every: 9,
        cost: cheap_cost(),
        record_param_trajectory: false,
    };
    let run = run_simulation(&slim, &spec, train.clone(), &test, &opts).unwrap();

    let core_words = fraction_size(slim.beta, n) as u64;
    let kv_words = 2 * fraction_size(slim.alpha - slim.beta, n) as u64;
    for (t, rm) in run.metrics.iter().enumerate() {
        let expected_push = if is_full_push_round(t as u32, slim.q) {
            n as u64
        } else {
            core_words + kv_words
        };
        assert_eq!(rm.push_words_total, expected_push * slim.workers as u64);
        assert_eq!(rm.pull_words_total, (core_words + kv_words) * slim.workers as u64);
    }

    let mut quant = ProtocolConfig::new(Method::Quant, 3, 3);
    quant.quant = QuantParams::new(8, 512).unwrap();
    quant.batch = 8;
    let run = run_simulation(&quant, &spec, train, &test, &opts).unwrap();
    let quant_words = ((n * 9).div_ceil(32) + n.div_ceil(512)) as u64;
    for rm in &run.metrics {
        assert_eq!(rm.push_words_total, quant_words * quant.workers as u64);
        assert_eq!(rm.pull_words_total, (n * quant.workers) as u64);
    }
}

#[test]
fn thread_count_does_not_change_results() {
    let (spec, train, test) = setup(vec![6, 12, 4], 90, 11);
    let opts = SimOptions {
        rounds: 10,
        eval_every: 5,
        cost: cheap_cost(),
        record_param_trajectory: false,
    };
    let mut results = Vec::new();
    for threads in [1usize, 3] {
        let mut cfg = ProtocolConfig::new(Method::Slim, 3, 11);
        cfg.alpha = 0.4;
        cfg.beta = 0.2;
        cfg.q = 5;
        cfg.batch = 6;
        cfg.threads = Some(threads);
        results.push(run_simulation(&cfg, &spec, train.clone(), &test, &opts).unwrap());
    }
    let (a, b) = (&results[0], &results[1]);
    assert!(a.final_params.bitwise_eq(&b.final_params));
    for (x, y) in a.metrics.iter().zip(&b.metrics) {
        assert_eq!(x.train_loss.to_bits(), y.train_loss.to_bits());
        assert_eq!(x.test_accuracy.map(f64::to_bits), y.test_accuracy.map(f64::to_bits));
        assert_eq!(x.push_words_per_worker, y.push_words_per_worker);
        assert_eq!(x.pull_words_per_worker, y.pull_words_per_worker);
    }
}
