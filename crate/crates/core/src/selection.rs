//! Communication-set operators: significance scoring, core selection,
//! per-worker exploration, and their union.
//!
//! The score of parameter `i` is `|w_i| + c * |g_i|`. The core is the
//! top-scoring `round(beta * n)` indices (ties toward the lower index); each
//! worker additionally explores a uniform random subset of the non-core
//! indices, resampled every communication round.

use crate::error::{Error, Result};
use crate::seeds;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;

/// How the magnitude/gradient mixing coefficient is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CMode {
    /// Ratio of mean magnitudes, recomputed at every core selection.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignificanceConfig {
    pub c_mode: CMode,
    /// Guards the division in the auto scale.
    pub epsilon: f64,
}

impl Default for SignificanceConfig {
    fn default() -> Self {
        Self {
            c_mode: CMode::Auto,
            epsilon: 1e-12,
        }
    }
}

impl SignificanceConfig {
    pub fn fixed(c: f64) -> Result<Self> {
        if c < 0.0 || c.is_nan() {
            return Err(Error::InvalidConfig(format!("fixed c must be >= 0, got {c}")));
        }
        Ok(Self {
            c_mode: CMode::Fixed(c),
            epsilon: 1e-12,
        })
    }
}

/// FNV-1a over a byte stream; stable across platforms and releases.
fn fnv1a64(bytes: impl IntoIterator<Item = u8>) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// The exploited index set: top-significance parameters, cached on both
/// endpoints and addressed on the wire by signature + epoch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoreSet {
    indices: Vec<u32>,
    signature: u64,
    epoch: u32,
}

impl CoreSet {
    /// Builds from ascending unique indices.
    pub fn new(indices: Vec<u32>, epoch: u32) -> Result<Self> {
        for w in indices.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::UnsortedOrDuplicateIndex { index: w[1] });
            }
        }
        let signature = fnv1a64(indices.iter().flat_map(|i| i.to_le_bytes()));
        Ok(Self {
            indices,
            signature,
            epoch,
        })
    }

    pub fn empty() -> Self {
        Self::new(Vec::new(), 0).unwrap()
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn signature(&self) -> u64 {
        self.signature
    }

    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    pub fn with_epoch(mut self, epoch: u32) -> Self {
        self.epoch = epoch;
        self
    }

    pub fn contains(&self, index: u32) -> bool {
        self.indices.binary_search(&index).is_ok()
    }
}

/// A worker's random exploration set, disjoint from the core.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExplorerSet {
    worker: usize,
    indices: Vec<u32>,
}

impl ExplorerSet {
    pub fn worker(&self) -> usize {
        self.worker
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// `scores_i = w_abs_i + c * g_abs_i`, with `c` resolved by the config.
pub fn significance(w_abs: &[f32], g_abs: &[f32], cfg: &SignificanceConfig) -> Result<Vec<f64>> {
    if w_abs.len() != g_abs.len() {
        return Err(Error::ShapeMismatch {
            what: "significance inputs",
            expected: w_abs.len(),
            got: g_abs.len(),
        });
    }
    for arr in [w_abs, g_abs] {
        for (i, v) in arr.iter().enumerate() {
            if *v < 0.0 || !v.is_finite() {
                return Err(Error::NegativeMagnitude { index: i });
            }
        }
    }
    let c = match cfg.c_mode {
        CMode::Fixed(c) => c,
        CMode::Auto => auto_scale_c(w_abs, g_abs, cfg.epsilon),
    };
    Ok(w_abs
        .iter()
        .zip(g_abs)
        .map(|(&w, &g)| w as f64 + c * g as f64)
        .collect())
}

/// Brings the two magnitude terms to the same scale: mean(|w|) / (mean(|g|) + eps).
pub fn auto_scale_c(w_abs: &[f32], g_abs: &[f32], epsilon: f64) -> f64 {
    if w_abs.is_empty() {
        return 0.0;
    }
    let mean = |v: &[f32]| v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64;
    mean(w_abs) / (mean(g_abs) + epsilon)
}

/// Half-up rounding of a non-negative fraction of n, clamped to [0, n].
pub fn fraction_size(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64).round() as usize).min(n)
}

/// The `round(beta * n)` highest-scoring indices; ties break toward the lower
/// index; result sorted ascending, epoch 0.
pub fn select_core(scores: &[f64], beta: f64) -> Result<CoreSet> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidConfig(format!("beta {beta} outside [0, 1]")));
    }
    let n = scores.len();
    let size = fraction_size(beta, n);
    let mut order: Vec<u32> = (0..n as u32).collect();
    order.sort_by(|&a, &b| {
        scores[b as usize]
            .partial_cmp(&scores[a as usize])
            .expect("scores are finite")
            .then(a.cmp(&b))
    });
    let mut chosen = order[..size].to_vec();
    chosen.sort_unstable();
    CoreSet::new(chosen, 0)
}

/// Uniform sample without replacement of `min(round((alpha-beta)*n), n-|core|)`
/// indices from the complement of the core; deterministic in the seed.
pub fn sample_explorer(
    n: usize,
    core: &CoreSet,
    alpha: f64,
    beta: f64,
    worker: usize,
    rng_seed: u64,
) -> Result<ExplorerSet> {
    if !(0.0 <= beta && beta <= alpha && alpha <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "need 0 <= beta <= alpha <= 1, got alpha={alpha} beta={beta}"
        )));
    }
    let mut complement = Vec::with_capacity(n - core.len());
    let mut core_iter = core.indices().iter().peekable();
    for i in 0..n as u32 {
        if core_iter.peek() == Some(&&i) {
            core_iter.next();
        } else {
            complement.push(i);
        }
    }
    let target = fraction_size(alpha - beta, n).min(complement.len());
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(rng_seed);
    for i in 0..target {
        let j = rng.gen_range(i..complement.len());
        complement.swap(i, j);
    }
    let mut indices = complement[..target].to_vec();
    indices.sort_unstable();
    Ok(ExplorerSet { worker, indices })
}

/// Seed for one (worker, round) exploration draw.
pub fn explorer_seed(experiment_seed: u64, worker: usize, round: u32) -> u64 {
    seeds::derive(experiment_seed, seeds::role::EXPLORER, worker as u64, round as u64)
}

/// Sorted union of core and explorer; they must be disjoint.
pub fn comm_set(core: &CoreSet, explorer: &ExplorerSet) -> Result<Vec<u32>> {
    let mut merged = Vec::with_capacity(core.len() + explorer.len());
    let (mut a, mut b) = (core.indices().iter().peekable(), explorer.indices().iter().peekable());
    loop {
        match (a.peek(), b.peek()) {
            (Some(&&x), Some(&&y)) => {
                if x == y {
                    return Err(Error::ExplorerOverlapsCore);
                } else if x < y {
                    merged.push(x);
                    a.next();
                } else {
                    merged.push(y);
                    b.next();
                }
            }
            (Some(&&x), None) => {
                merged.push(x);
                a.next();
            }
            (None, Some(&&y)) => {
                merged.push(y);
                b.next();
            }
            (None, None) => break,
        }
    }
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn weighted_sum_arithmetic() {
        let cfg = SignificanceConfig::fixed(1.0).unwrap();
        let s = significance(&[0.5, 0.2, 0.05], &[0.1, 0.4, 0.0], &cfg).unwrap();
        for (got, want) in s.iter().zip([0.6, 0.6, 0.05]) {
            assert!((got - want).abs() < 1e-7);
        }
        // Exact-binary magnitudes make indices 0 and 1 a true tie, which
        // resolves to the lower index.
        let tied = significance(&[0.5, 0.25, 0.05], &[0.25, 0.5, 0.0], &cfg).unwrap();
        assert_eq!(tied[0].to_bits(), tied[1].to_bits());
        let core = select_core(&tied, 1.0 / 3.0).unwrap();
        assert_eq!(core.indices(), &[0]);
    }

    #[test]
    fn zero_c_reduces_to_magnitude_pruning() {
        let cfg = SignificanceConfig::fixed(0.0).unwrap();
        let s = significance(&[0.5, 0.2], &[9.0, 9.0], &cfg).unwrap();
        assert_eq!(s, vec![0.5f32 as f64, 0.2f32 as f64]);
    }

    #[test]
    fn zero_gradients_make_c_irrelevant() {
        let cfg = SignificanceConfig::default();
        let s = significance(&[0.5, 0.2], &[0.0, 0.0], &cfg).unwrap();
        assert_eq!(s, vec![0.5f32 as f64, 0.2f32 as f64]);
    }

    #[test]
    fn negative_magnitude_is_an_error() {
        let cfg = SignificanceConfig::default();
        assert!(matches!(
            significance(&[0.5, -0.2], &[0.0, 0.0], &cfg),
            Err(Error::NegativeMagnitude { .. })
        ));
    }

    #[test]
    fn auto_scale_is_the_mean_ratio() {
        let w = vec![0.1f32; 10];
        let g = vec![0.001f32; 10];
        let c = auto_scale_c(&w, &g, 1e-12);
        assert!((c - 100.0).abs() / 100.0 < 1e-6, "c={c}");
        // All-zero gradients fall back to the epsilon guard.
        let c0 = auto_scale_c(&w, &[0.0; 10], 1e-12);
        assert!(c0 > 1e10);
    }

    #[test]
    fn auto_scale_is_inverse_homogeneous_in_g() {
        let w = vec![0.3f32, 0.1, 0.2];
        let g = vec![0.02f32, 0.05, 0.01];
        let g10: Vec<f32> = g.iter().map(|x| x * 10.0).collect();
        let c = auto_scale_c(&w, &g, 1e-12);
        let c10 = auto_scale_c(&w, &g10, 1e-12);
        assert!((c10 - c / 10.0).abs() / (c / 10.0) < 1e-6);
    }

    #[test]
    fn beta_extremes() {
        let scores = vec![3.0, 1.0, 2.0];
        assert!(select_core(&scores, 0.0).unwrap().is_empty());
        assert_eq!(select_core(&scores, 1.0).unwrap().indices(), &[0, 1, 2]);
    }

    #[test]
    fn core_is_scale_invariant() {
        let scores = vec![0.3, 0.9, 0.1, 0.5, 0.7];
        let doubled: Vec<f64> = scores.iter().map(|s| s * 2.0).collect();
        assert_eq!(
            select_core(&scores, 0.4).unwrap().indices(),
            select_core(&doubled, 0.4).unwrap().indices()
        );
    }

    #[test]
    fn raising_a_gradient_never_drops_its_index_from_the_core() {
        let cfg = SignificanceConfig::fixed(2.0).unwrap();
        let w = vec![0.1f32, 0.2, 0.3, 0.05];
        let mut g = vec![0.0f32, 0.1, 0.0, 0.2];
        let base = significance(&w, &g, &cfg).unwrap();
        let core_before = select_core(&base, 0.5).unwrap();
        g[3] += 0.5;
        let bumped = significance(&w, &g, &cfg).unwrap();
        assert!(bumped[3] > base[3]);
        let core_after = select_core(&bumped, 0.5).unwrap();
        if core_before.contains(3) {
            assert!(core_after.contains(3));
        }
    }

    #[test]
    fn signature_tracks_index_sequence() {
        let a = CoreSet::new(vec![1, 5, 9], 0).unwrap();
        let b = CoreSet::new(vec![1, 5, 9], 3).unwrap();
        let c = CoreSet::new(vec![1, 5, 8], 0).unwrap();
        assert_eq!(a.signature(), b.signature());
        assert_ne!(a.signature(), c.signature());
    }

    #[test]
    fn equal_alpha_beta_disables_exploration() {
        let core = CoreSet::new(vec![0, 1, 2], 0).unwrap();
        let e = sample_explorer(10, &core, 0.3, 0.3, 0, 99).unwrap();
        assert!(e.is_empty());
    }

    #[test]
    fn explorer_draws_from_the_complement() {
        let core = CoreSet::new(vec![0, 1, 2], 0).unwrap();
        let e = sample_explorer(10, &core, 0.5, 0.3, 1, 5).unwrap();
        assert_eq!(e.len(), 2);
        for &i in e.indices() {
            assert!((3..10).contains(&i));
        }
        let again = sample_explorer(10, &core, 0.5, 0.3, 1, 5).unwrap();
        assert_eq!(e, again);
        let other_seed = sample_explorer(10, &core, 0.5, 0.3, 1, 6).unwrap();
        assert!(e != other_seed || e.len() <= 1);
    }

    #[test]
    fn explorer_sampling_is_uniform_over_the_complement() {
        // Monte-Carlo oracle: each non-core index should appear with
        // frequency size/|complement| within 3 sigma over 10^4 draws.
        let n = 20usize;
        let core = CoreSet::new(vec![0, 1, 2, 3, 4], 0).unwrap();
        let alpha = 0.45;
        let beta = 0.25; // size = round(0.2 * 20) = 4, complement = 15
        let trials = 10_000u32;
        let mut counts = vec![0u32; n];
        for t in 0..trials {
            let e = sample_explorer(n, &core, alpha, beta, 0, 1_000 + t as u64).unwrap();
            assert_eq!(e.len(), 4);
            for &i in e.indices() {
                counts[i as usize] += 1;
            }
        }
        let p = 4.0 / 15.0;
        let sigma = (p * (1.0 - p) / trials as f64).sqrt();
        for i in 5..n {
            let freq = counts[i] as f64 / trials as f64;
            assert!(
                (freq - p).abs() <= 3.0 * sigma,
                "index {i}: freq {freq} vs expected {p}"
            );
        }
        for i in 0..5 {
            assert_eq!(counts[i], 0, "core index {i} must never be explored");
        }
    }

    #[test]
    fn union_is_sorted_and_sized() {
        let core = CoreSet::new(vec![1, 5], 0).unwrap();
        let explorer = sample_explorer(10, &core, 0.4, 0.2, 0, 1).unwrap();
        let union = comm_set(&core, &explorer).unwrap();
        assert_eq!(union.len(), core.len() + explorer.len());
        assert!(union.windows(2).all(|w| w[0] < w[1]));

        let fixed = ExplorerSet {
            worker: 0,
            indices: vec![2, 9],
        };
        assert_eq!(comm_set(&core, &fixed).unwrap(), vec![1, 2, 5, 9]);

        let empty = ExplorerSet {
            worker: 0,
            indices: vec![],
        };
        assert_eq!(comm_set(&core, &empty).unwrap(), vec![1, 5]);
    }

    #[test]
    fn overlap_is_an_invariant_breach() {
        let core = CoreSet::new(vec![1, 5], 0).unwrap();
        let bad = ExplorerSet {
            worker: 0,
            indices: vec![5],
        };
        assert!(matches!(
            comm_set(&core, &bad),
            Err(Error::ExplorerOverlapsCore)
        ));
    }

    proptest! {
        #[test]
        fn size_law_holds(n in 1usize..300, alpha in 0.0f64..=1.0, cut in 0.0f64..=1.0) {
            let beta = alpha * cut;
            let scores: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7).sin().abs()).collect();
            let core = select_core(&scores, beta).unwrap();
            let expected_core = fraction_size(beta, n);
            prop_assert_eq!(core.len(), expected_core);
            let explorer = sample_explorer(n, &core, alpha, beta, 0, 7).unwrap();
            let expected_explorer = fraction_size(alpha - beta, n).min(n - core.len());
            prop_assert_eq!(explorer.len(), expected_explorer);
            let union = comm_set(&core, &explorer).unwrap();
            prop_assert!(union.len() <= n);
            prop_assert_eq!(union.len(), expected_core + expected_explorer);
        }

        #[test]
        fn explorer_always_disjoint_from_core(n in 1usize..100, seed in 0u64..500) {
            let scores: Vec<f64> = (0..n).map(|i| ((i * 37) % 11) as f64).collect();
            let core = select_core(&scores, 0.3).unwrap();
            let explorer = sample_explorer(n, &core, 0.6, 0.3, 0, seed).unwrap();
            for &i in explorer.indices() {
                prop_assert!(!core.contains(i));
            }
        }
    }
}
