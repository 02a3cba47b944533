//! Synchronous parameter-server simulation.
//!
//! One server and K workers advance in lockstep rounds: local training, push,
//! server apply, pull, merge. Three protocols share the loop:
//!
//! * `plump` - full dense push and pull every round;
//! * `quant` - stochastically quantized push, full pull;
//! * `slim`  - push and pull restricted to the communication set
//!   (significance-selected core plus a per-worker random explorer), with a
//!   full push every q-th round to refresh the update magnitudes the next
//!   core selection needs.
//!
//! Worker results are reduced in ascending worker order regardless of the
//! thread count, so a run is bitwise reproducible from its config seed.

use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;

use crate::codec::{self, FrameKind, FrameMeta, QuantParams, SparseUpdate, WireFrame};
use crate::data::{partition, BatchStream, Dataset};
use crate::error::{Error, Result};
use crate::model::{apply_update, Mlp, ModelSpec, ParamVector};
use crate::seeds::{self, role};
use crate::selection::{
    explorer_seed, sample_explorer, select_core, significance, CoreSet, ExplorerSet,
    SignificanceConfig,
};

/// Synchronization protocol under test.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Plump,
    Quant,
    Slim,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Plump => "plump",
            Method::Quant => "quant",
            Method::Slim => "slim",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plump" => Ok(Method::Plump),
            "quant" => Ok(Method::Quant),
            "slim" => Ok(Method::Slim),
            other => Err(Error::InvalidConfig(format!(
                "unknown method {other:?}; choose one of plump, quant, slim"
            ))),
        }
    }
}

/// How the server combines per-worker contributions at one coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    /// Mean over the workers that pushed the coordinate (default: keeps the
    /// effective step independent of how many workers sampled it).
    #[default]
    Mean,
    Sum,
    /// Contribution with the largest magnitude wins.
    Max,
}

/// Optional step decay: lr is scaled by `factor` every `every` rounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrDecay {
    pub every: u32,
    pub factor: f64,
}

#[derive(Debug, Clone)]
pub struct ProtocolConfig {
    pub method: Method,
    /// Communication-set fraction of n.
    pub alpha: f64,
    /// Core fraction of n.
    pub beta: f64,
    /// Local mini-batch steps per communication round.
    pub p: usize,
    /// Communication rounds per core selection.
    pub q: u32,
    /// Server step scale.
    pub eta_prime: f64,
    /// Local learning rate.
    pub lr: f32,
    pub lr_decay: Option<LrDecay>,
    pub quant: QuantParams,
    pub workers: usize,
    pub seed: u64,
    pub batch: usize,
    pub aggregation: Aggregation,
    /// Pull the full model (instead of the communication set) on full-push rounds.
    pub full_pull_on_sync: bool,
    pub significance: SignificanceConfig,
    /// Worker-parallelism cap; defaults to the worker count.
    pub threads: Option<usize>,
}

impl ProtocolConfig {
    pub fn new(method: Method, workers: usize, seed: u64) -> Self {
        Self {
            method,
            alpha: 1.0,
            beta: 1.0,
            p: 1,
            q: 50,
            eta_prime: 1.0,
            lr: 0.1,
            lr_decay: None,
            quant: QuantParams::default(),
            workers,
            seed,
            batch: 25,
            aggregation: Aggregation::Mean,
            full_pull_on_sync: false,
            significance: SignificanceConfig::default(),
            threads: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidConfig(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::InvalidConfig(format!("beta {} outside [0, 1]", self.beta)));
        }
        if self.beta > self.alpha {
            return Err(Error::InvalidConfig(format!(
                "beta must not exceed alpha (beta={}, alpha={})",
                self.beta, self.alpha
            )));
        }
        if self.p < 1 {
            return Err(Error::InvalidConfig("p must be >= 1".into()));
        }
        if self.q < 1 {
            return Err(Error::InvalidConfig("q must be >= 1".into()));
        }
        if self.workers < 1 {
            return Err(Error::InvalidConfig("workers must be >= 1".into()));
        }
        if self.batch < 1 {
            return Err(Error::InvalidConfig("batch must be >= 1".into()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::InvalidConfig(format!("invalid lr {}", self.lr)));
        }
        if !self.eta_prime.is_finite() {
            return Err(Error::InvalidConfig("eta_prime must be finite".into()));
        }
        if let Some(d) = self.lr_decay {
            if d.every == 0 || d.factor <= 0.0 || d.factor.is_nan() {
                return Err(Error::InvalidConfig("lr decay needs every >= 1 and factor > 0".into()));
            }
        }
        Ok(())
    }

    fn lr_at(&self, round: u32) -> f32 {
        match self.lr_decay {
            None => self.lr,
            Some(d) => (self.lr as f64 * d.factor.powi((round / d.every) as i32)) as f32,
        }
    }

    fn effective_threads(&self) -> usize {
        self.threads
            .unwrap_or(self.workers)
            .clamp(1, self.workers)
    }
}

/// Latency/bandwidth/compute cost model for simulated time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel {
    /// Per-message latency, seconds.
    pub latency_s: f64,
    /// Link bandwidth, bytes per second.
    pub bandwidth_bps: f64,
    /// Seconds of compute per mini-batch step.
    pub compute_s: f64,
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        if self.latency_s < 0.0 || self.compute_s < 0.0 || self.bandwidth_bps <= 0.0 || self.bandwidth_bps.is_nan() {
            return Err(Error::InvalidConfig(format!("invalid cost model {self:?}")));
        }
        Ok(())
    }
}

/// One message direction: latency plus 4 bytes per payload word.
pub fn comm_time(words: u64, cost: &CostModel) -> f64 {
    cost.latency_s + 4.0 * words as f64 / cost.bandwidth_bps
}

/// Per-communication-round record.
#[derive(Debug, Clone)]
pub struct RoundMetrics {
    /// 1-based count of completed rounds.
    pub round: u32,
    /// Mean over workers of the mean local loss across the round's p batches.
    pub train_loss: f64,
    pub test_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
    /// Training samples consumed this round, all workers.
    pub samples: u64,
    pub push_words_per_worker: Vec<u64>,
    pub pull_words_per_worker: Vec<u64>,
    pub push_words_total: u64,
    pub pull_words_total: u64,
    pub header_bytes: u64,
    pub frames: u64,
    pub sim_comp_s: f64,
    pub sim_comm_s: f64,
    /// Measured wall time of the round; excluded from determinism claims.
    pub wall_s: f64,
}

/// Global server-side state.
pub struct ServerState {
    pub global: ParamVector,
    pub core: Arc<CoreSet>,
    /// Communication-round counter; increments once per applied round.
    pub t: u32,
    /// mean_k |delta_k| from the most recent full push.
    cached_update_magnitude: Option<Vec<f32>>,
    core_epoch: u32,
}

impl ServerState {
    pub fn new(global: ParamVector, core: CoreSet) -> Self {
        Self {
            global,
            core: Arc::new(core),
            t: 0,
            cached_update_magnitude: None,
            core_epoch: 0,
        }
    }

    pub fn cached_update_magnitude(&self) -> Option<&[f32]> {
        self.cached_update_magnitude.as_deref()
    }
}

/// Local worker state: parameters and the shard's batch stream.
pub struct WorkerState {
    pub worker: usize,
    pub local: ParamVector,
    pub stream: BatchStream,
}

/// What one worker hands the server for one round.
pub struct WorkerPush {
    pub frames: Vec<WireFrame>,
    pub explorer: Option<ExplorerSet>,
    pub train_loss: f64,
    pub samples: u64,
}

impl WorkerPush {
    pub fn payload_words(&self) -> u64 {
        self.frames.iter().map(|f| f.payload_words() as u64).sum()
    }

    pub fn header_bytes(&self) -> u64 {
        self.frames.iter().map(|f| f.header_bytes() as u64).sum()
    }
}

fn gather(values: &[f32], indices: &[u32]) -> Vec<f32> {
    indices.iter().map(|&i| values[i as usize]).collect()
}

/// Whether round `t` ends with a full push ("(t+1) % q == 0").
pub fn is_full_push_round(t: u32, q: u32) -> bool {
    (t + 1).is_multiple_of(q)
}

/// Runs local training and builds this round's push frames.
pub fn worker_round(
    ws: &mut WorkerState,
    mlp: &Mlp,
    core: &CoreSet,
    cfg: &ProtocolConfig,
    t: u32,
    lr: f32,
) -> Result<WorkerPush> {
    let mut batches = Vec::with_capacity(cfg.p);
    let mut samples = 0u64;
    for _ in 0..cfg.p {
        let b = ws.stream.next_batch();
        samples += b.batch_size() as u64;
        batches.push(b);
    }
    let out = mlp.local_train(&ws.local, &batches, lr)?;
    ws.local = out.w_out;
    let delta = out.delta;
    let n = delta.len() as u32;
    let meta = FrameMeta {
        round: t,
        worker: ws.worker as u32,
        n,
    };

    let (frames, explorer) = match cfg.method {
        Method::Plump => (vec![codec::encode_full(meta, delta.as_slice())?], None),
        Method::Quant => {
            let seed = seeds::derive(cfg.seed, role::QUANT, ws.worker as u64, t as u64);
            (
                vec![codec::quant_encode(meta, delta.as_slice(), &cfg.quant, seed)?],
                None,
            )
        }
        Method::Slim => {
            let explorer = sample_explorer(
                n as usize,
                core,
                cfg.alpha,
                cfg.beta,
                ws.worker,
                explorer_seed(cfg.seed, ws.worker, t),
            )?;
            let frames = if is_full_push_round(t, cfg.q) {
                vec![codec::encode_full(meta, delta.as_slice())?]
            } else {
                let core_frame =
                    codec::encode_core(meta, &gather(delta.as_slice(), core.indices()), core)?;
                let kv = SparseUpdate::new(
                    explorer.indices().to_vec(),
                    gather(delta.as_slice(), explorer.indices()),
                )?;
                vec![core_frame, codec::encode_kv(meta, &kv)?]
            };
            (frames, Some(explorer))
        }
    };

    Ok(WorkerPush {
        frames,
        explorer,
        train_loss: out.mean_loss,
        samples,
    })
}

/// Applies one synchronous round of pushes to the global model.
///
/// Every coordinate moves by `eta_prime` times the aggregate of the workers
/// that contributed there; aggregation order is fixed ascending in the worker
/// index. A round where every worker pushed a full frame also caches the mean
/// absolute update for the next core selection.
///
/// Under slim, a full-push round transfers the whole update but the server
/// still applies only the round's communication set (core plus the worker's
/// explorer); the rest of the full frame exists to feed the significance
/// cache. Plump and quant frames apply everywhere they address.
pub fn server_apply(ss: &mut ServerState, pushes: &[WorkerPush], cfg: &ProtocolConfig) -> Result<()> {
    if pushes.len() != cfg.workers {
        return Err(Error::MissingWorkerFrames {
            worker: pushes.len(),
        });
    }
    let n = ss.global.len();
    let all_full = pushes
        .iter()
        .all(|p| p.frames.iter().all(|f| f.kind() == FrameKind::Full));

    let mut sums = vec![0.0f64; n];
    let mut counts = vec![0u32; n];
    let mut maxes = match cfg.aggregation {
        Aggregation::Max => Some(vec![0.0f32; n]),
        _ => None,
    };
    let mut abs_sums = all_full.then(|| vec![0.0f64; n]);

    let add = |i: usize, v: f32, sums: &mut [f64], counts: &mut [u32], maxes: &mut Option<Vec<f32>>| {
        sums[i] += v as f64;
        counts[i] += 1;
        if let Some(m) = maxes {
            if v.abs() > m[i].abs() || counts[i] == 1 {
                m[i] = v;
            }
        }
    };

    for (k, push) in pushes.iter().enumerate() {
        for frame in &push.frames {
            if frame.meta.round != ss.t {
                return Err(Error::RoundMismatch {
                    expected: ss.t,
                    got: frame.meta.round,
                });
            }
            if frame.meta.n as usize != n {
                return Err(Error::ShapeMismatch {
                    what: "frame dimension",
                    expected: n,
                    got: frame.meta.n as usize,
                });
            }
            if frame.meta.worker as usize != k {
                return Err(Error::MissingWorkerFrames { worker: k });
            }
            match frame.kind() {
                FrameKind::Full => {
                    let values = codec::decode_full(frame)?;
                    if let Some(a) = &mut abs_sums {
                        for (i, v) in values.iter().enumerate() {
                            a[i] += v.abs() as f64;
                        }
                    }
                    if cfg.method == Method::Slim {
                        let explorer = push.explorer.as_ref().ok_or(Error::FrameKindMismatch {
                            expected: "slim full push with explorer",
                            got: "Full",
                        })?;
                        for &i in ss.core.indices().iter().chain(explorer.indices()) {
                            add(i as usize, values[i as usize], &mut sums, &mut counts, &mut maxes);
                        }
                    } else {
                        for (i, &v) in values.iter().enumerate() {
                            add(i, v, &mut sums, &mut counts, &mut maxes);
                        }
                    }
                }
                FrameKind::Core => {
                    for (i, v) in codec::decode_core(frame, &ss.core)?.iter() {
                        add(i as usize, v, &mut sums, &mut counts, &mut maxes);
                    }
                }
                FrameKind::Kv => {
                    for (i, v) in codec::decode_kv(frame)?.iter() {
                        add(i as usize, v, &mut sums, &mut counts, &mut maxes);
                    }
                }
                FrameKind::Quant => {
                    for (i, v) in codec::quant_decode(frame)?.into_iter().enumerate() {
                        add(i, v, &mut sums, &mut counts, &mut maxes);
                    }
                }
            }
        }
    }

    let w = ss.global.as_mut_slice();
    for i in 0..n {
        if counts[i] == 0 {
            continue;
        }
        w[i] = match cfg.aggregation {
            Aggregation::Mean => apply_update(w[i], sums[i], counts[i] as usize, cfg.eta_prime),
            Aggregation::Sum => apply_update(w[i], sums[i], 1, cfg.eta_prime),
            Aggregation::Max => {
                apply_update(w[i], maxes.as_ref().unwrap()[i] as f64, 1, cfg.eta_prime)
            }
        };
    }
    if ss.global.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what: "global parameters" });
    }

    if let Some(abs) = abs_sums {
        let inv_k = 1.0 / cfg.workers as f64;
        ss.cached_update_magnitude = Some(abs.iter().map(|&a| (a * inv_k) as f32).collect());
    }
    ss.t += 1;
    Ok(())
}

/// Reselects the core from significance scores built on the current global
/// magnitudes and the cached full-push update magnitudes.
pub fn core_selection_round(
    ss: &mut ServerState,
    beta: f64,
    sig_cfg: &SignificanceConfig,
) -> Result<Arc<CoreSet>> {
    let cached = ss
        .cached_update_magnitude
        .as_ref()
        .ok_or(Error::MissingGradientCache)?;
    let w_abs: Vec<f32> = ss.global.as_slice().iter().map(|v| v.abs()).collect();
    let scores = significance(&w_abs, cached, sig_cfg)?;
    ss.core_epoch += 1;
    let core = Arc::new(select_core(&scores, beta)?.with_epoch(ss.core_epoch));
    ss.core = core.clone();
    Ok(core)
}

/// Builds the pull frames for one worker from the current global model.
fn build_pull_frames(
    global: &ParamVector,
    core: &CoreSet,
    explorer: Option<&ExplorerSet>,
    cfg: &ProtocolConfig,
    t: u32,
    worker: usize,
) -> Result<Vec<WireFrame>> {
    let meta = FrameMeta {
        round: t,
        worker: worker as u32,
        n: global.len() as u32,
    };
    match cfg.method {
        Method::Plump | Method::Quant => Ok(vec![codec::encode_full(meta, global.as_slice())?]),
        Method::Slim => {
            if cfg.full_pull_on_sync && is_full_push_round(t, cfg.q) {
                return Ok(vec![codec::encode_full(meta, global.as_slice())?]);
            }
            let explorer = explorer.expect("slim pulls reuse the round's explorer");
            let core_frame =
                codec::encode_core(meta, &gather(global.as_slice(), core.indices()), core)?;
            let kv = SparseUpdate::new(
                explorer.indices().to_vec(),
                gather(global.as_slice(), explorer.indices()),
            )?;
            Ok(vec![core_frame, codec::encode_kv(meta, &kv)?])
        }
    }
}

/// Decodes pull frames and overwrites the pulled coordinates of the local model.
pub fn worker_pull_merge(
    ws: &mut WorkerState,
    frames: &[WireFrame],
    cached_core: &CoreSet,
) -> Result<()> {
    let local = ws.local.as_mut_slice();
    for frame in frames {
        match frame.kind() {
            FrameKind::Full => {
                for (i, v) in codec::decode_full(frame)?.into_iter().enumerate() {
                    local[i] = v;
                }
            }
            FrameKind::Core => {
                for (i, v) in codec::decode_core(frame, cached_core)?.iter() {
                    local[i as usize] = v;
                }
            }
            FrameKind::Kv => {
                for (i, v) in codec::decode_kv(frame)?.iter() {
                    local[i as usize] = v;
                }
            }
            FrameKind::Quant => {
                return Err(Error::FrameKindMismatch {
                    expected: "Full, Core, or Kv",
                    got: "Quant",
                })
            }
        }
    }
    Ok(())
}

/// Simulation horizon, evaluation cadence, and cost model.
#[derive(Debug, Clone)]
pub struct SimOptions {
    pub rounds: u32,
    /// Evaluate on the held-out set every this many rounds (and at the end).
    pub eval_every: u32,
    pub cost: CostModel,
    /// Record the global parameter vector after every round (tests only).
    pub record_param_trajectory: bool,
}

pub struct SimResult {
    pub metrics: Vec<RoundMetrics>,
    pub final_params: ParamVector,
    pub param_trajectory: Option<Vec<Vec<f32>>>,
}

/// Runs R communication rounds of the configured protocol.
pub fn run_simulation(
    cfg: &ProtocolConfig,
    model_spec: &ModelSpec,
    train: Arc<Dataset>,
    test: &Dataset,
    opts: &SimOptions,
) -> Result<SimResult> {
    cfg.validate()?;
    opts.cost.validate()?;
    if opts.rounds < 1 || opts.eval_every < 1 {
        return Err(Error::InvalidConfig("rounds and eval_every must be >= 1".into()));
    }
    let mlp = Mlp::new(model_spec.clone());
    let n = mlp.param_count();

    let global = mlp.init_params();
    // Bootstrap core before any gradients exist: magnitude-only significance.
    let initial_core = if cfg.method == Method::Slim {
        let w_abs: Vec<f32> = global.as_slice().iter().map(|v| v.abs()).collect();
        let scores = significance(&w_abs, &vec![0.0f32; n], &cfg.significance)?;
        select_core(&scores, cfg.beta)?
    } else {
        CoreSet::empty()
    };
    let mut ss = ServerState::new(global, initial_core);

    let shards = partition(&train, cfg.workers, cfg.seed)?;
    let mut workers: Vec<WorkerState> = shards
        .iter()
        .map(|shard| {
            let stream_seed = seeds::derive(cfg.seed, role::BATCH, shard.worker() as u64, 0);
            Ok(WorkerState {
                worker: shard.worker(),
                local: ss.global.clone(),
                stream: BatchStream::new(train.clone(), shard, cfg.batch, stream_seed)?,
            })
        })
        .collect::<Result<_>>()?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.effective_threads())
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;

    let mut metrics = Vec::with_capacity(opts.rounds as usize);
    let mut trajectory = opts.record_param_trajectory.then(Vec::new);

    for t in 0..opts.rounds {
        let round_start = Instant::now();
        let lr = cfg.lr_at(t);
        let core = ss.core.clone();

        // Phase 1: local training + push frame construction, worker-parallel.
        let pushes: Vec<WorkerPush> = pool.install(|| {
            workers
                .par_iter_mut()
                .map(|ws| worker_round(ws, &mlp, &core, cfg, t, lr))
                .collect::<Result<Vec<_>>>()
        })?;

        let train_loss =
            pushes.iter().map(|p| p.train_loss).sum::<f64>() / cfg.workers as f64;
        let samples: u64 = pushes.iter().map(|p| p.samples).sum();
        let push_words_per_worker: Vec<u64> = pushes.iter().map(|p| p.payload_words()).collect();
        let mut header_bytes: u64 = pushes.iter().map(|p| p.header_bytes()).sum();
        let mut frames: u64 = pushes.iter().map(|p| p.frames.len() as u64).sum();

        // Phase 2: synchronous apply.
        server_apply(&mut ss, &pushes, cfg)?;

        // Phase 3: pulls from the post-update global model, then merge.
        let pull_frame_sets: Vec<Vec<WireFrame>> = pushes
            .iter()
            .enumerate()
            .map(|(k, push)| {
                build_pull_frames(&ss.global, &core, push.explorer.as_ref(), cfg, t, k)
            })
            .collect::<Result<_>>()?;
        let pull_words_per_worker: Vec<u64> = pull_frame_sets
            .iter()
            .map(|fs| fs.iter().map(|f| f.payload_words() as u64).sum())
            .collect();
        header_bytes += pull_frame_sets
            .iter()
            .flat_map(|fs| fs.iter())
            .map(|f| f.header_bytes() as u64)
            .sum::<u64>();
        frames += pull_frame_sets.iter().map(|fs| fs.len() as u64).sum::<u64>();

        pool.install(|| {
            workers
                .par_iter_mut()
                .zip(pull_frame_sets.par_iter())
                .map(|(ws, frames)| worker_pull_merge(ws, frames, &core))
                .collect::<Result<Vec<_>>>()
        })?;

        // Phase 4: core reselection once the full-push round has been applied.
        if cfg.method == Method::Slim && ss.t.is_multiple_of(cfg.q) {
            core_selection_round(&mut ss, cfg.beta, &cfg.significance)?;
        }

        let (test_loss, test_accuracy) = if (t + 1) % opts.eval_every == 0 || t + 1 == opts.rounds {
            let (l, a) = mlp.evaluate(&ss.global, test.features(), test.labels())?;
            (Some(l), Some(a))
        } else {
            (None, None)
        };

        if let Some(traj) = &mut trajectory {
            traj.push(ss.global.as_slice().to_vec());
        }

        let max_push = push_words_per_worker.iter().copied().max().unwrap_or(0);
        let max_pull = pull_words_per_worker.iter().copied().max().unwrap_or(0);
        metrics.push(RoundMetrics {
            round: t + 1,
            train_loss,
            test_loss,
            test_accuracy,
            samples,
            push_words_total: push_words_per_worker.iter().sum(),
            pull_words_total: pull_words_per_worker.iter().sum(),
            push_words_per_worker,
            pull_words_per_worker,
            header_bytes,
            frames,
            sim_comp_s: cfg.p as f64 * opts.cost.compute_s,
            sim_comm_s: comm_time(max_push, &opts.cost) + comm_time(max_pull, &opts.cost),
            wall_s: round_start.elapsed().as_secs_f64(),
        });
    }

    Ok(SimResult {
        metrics,
        final_params: ss.global,
        param_trajectory: trajectory,
    })
}
