//! Dataset generation, ingestion, sharding, and deterministic batch streams.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{MiniBatch, Mlp, ModelSpec};
use crate::seeds::{self, role};

/// An in-memory classification dataset, immutable after construction.
#[derive(Debug, Clone)]
pub struct Dataset {
    features: Vec<f32>,
    labels: Vec<u32>,
    dim: usize,
    class_count: usize,
}

impl Dataset {
    pub fn new(features: Vec<f32>, labels: Vec<u32>, dim: usize, class_count: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if features.len() != labels.len() * dim {
            return Err(Error::ShapeMismatch {
                what: "dataset features",
                expected: labels.len() * dim,
                got: features.len(),
            });
        }
        for &y in &labels {
            if y as usize >= class_count {
                return Err(Error::LabelOutOfRange {
                    label: y,
                    classes: class_count as u32,
                });
            }
        }
        Ok(Self {
            features,
            labels,
            dim,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn feature_row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Splits off the last `holdout` rows as a second dataset.
    pub fn split_holdout(self, holdout: usize) -> Result<(Dataset, Dataset)> {
        let m = self.len();
        if holdout == 0 || holdout >= m {
            return Err(Error::InvalidConfig(format!(
                "holdout {holdout} must be in 1..{m}"
            )));
        }
        let train_m = m - holdout;
        let (train_f, test_f) = self.features.split_at(train_m * self.dim);
        let (train_l, test_l) = self.labels.split_at(train_m);
        Ok((
            Dataset::new(train_f.to_vec(), train_l.to_vec(), self.dim, self.class_count)?,
            Dataset::new(test_f.to_vec(), test_l.to_vec(), self.dim, self.class_count)?,
        ))
    }
}

/// The teacher network architecture used by [`gen_synthetic`].
///
/// A narrow hidden layer keeps the label function smooth enough that a
/// desk-scale student can fit it within a few epochs.
pub fn teacher_spec(dim: usize, classes: usize, teacher_seed: u64) -> Result<ModelSpec> {
    ModelSpec::new(
        vec![dim, (5 * dim / 16).max(8), classes],
        seeds::derive(teacher_seed, role::TEACHER, 0, 0),
    )
}

/// Draws gaussian features and labels them with a frozen random teacher MLP,
/// then resamples a `noise` fraction of labels uniformly.
pub fn gen_synthetic(
    dim: usize,
    classes: usize,
    m: usize,
    teacher_seed: u64,
    noise: f64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::InvalidConfig(format!("need >= 2 classes, got {classes}")));
    }
    if m < classes {
        return Err(Error::InvalidConfig(format!(
            "need at least one sample per class: m={m} < classes={classes}"
        )));
    }
    if !(0.0..=1.0).contains(&noise) {
        return Err(Error::InvalidNoise(noise));
    }

    let teacher = Mlp::new(teacher_spec(dim, classes, teacher_seed)?);
    let teacher_w = teacher.init_params();

    let mut feat_rng = seeds::rng(teacher_seed, role::FEATURES, 0, 0);
    let mut features = vec![0.0f32; m * dim];
    for v in &mut features {
        let z: f64 = feat_rng.sample(StandardNormal);
        *v = z as f32;
    }

    let mut labels = vec![0u32; m];
    for i in 0..m {
        let logits = teacher.logits(teacher_w.as_slice(), &features[i * dim..(i + 1) * dim]);
        labels[i] = crate::model::argmax(&logits) as u32;
    }

    if noise > 0.0 {
        let mut noise_rng = seeds::rng(teacher_seed, role::LABEL_NOISE, 0, 0);
        for label in &mut labels {
            if noise_rng.gen::<f64>() < noise {
                *label = noise_rng.gen_range(0..classes as u32);
            }
        }
    }

    Dataset::new(features, labels, dim, classes)
}

/// A worker's slice of the dataset: row indices into the parent.
#[derive(Debug, Clone)]
pub struct Shard {
    worker: usize,
    indices: Vec<u32>,
}

impl Shard {
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

/// Random disjoint cover of the dataset: one permutation, contiguous slices,
/// remainder rows spread over the first `m % k` shards.
pub fn partition(ds: &Dataset, k: usize, seed: u64) -> Result<Vec<Shard>> {
    let m = ds.len();
    if k == 0 || k > m {
        return Err(Error::TooManyWorkers { k, m });
    }
    let mut perm: Vec<u32> = (0..m as u32).collect();
    perm.shuffle(&mut seeds::rng(seed, role::PARTITION, 0, 0));
    let base = m / k;
    let extra = m % k;
    let mut shards = Vec::with_capacity(k);
    let mut start = 0;
    for worker in 0..k {
        let size = base + usize::from(worker < extra);
        shards.push(Shard {
            worker,
            indices: perm[start..start + size].to_vec(),
        });
        start += size;
    }
    Ok(shards)
}

/// Deterministic mini-batch stream over one shard.
///
/// Each epoch reshuffles with a seed derived from (stream seed, epoch); the
/// short final batch of an epoch is emitted, so the per-epoch sample multiset
/// equals the shard exactly.
#[derive(Debug, Clone)]
pub struct BatchStream {
    dataset: Arc<Dataset>,
    shard_indices: Vec<u32>,
    batch: usize,
    seed: u64,
    epoch: u64,
    pos: usize,
    order: Vec<u32>,
}

impl BatchStream {
    pub fn new(dataset: Arc<Dataset>, shard: &Shard, batch: usize, seed: u64) -> Result<Self> {
        if batch == 0 || batch > shard.len() {
            return Err(Error::BatchTooLarge {
                batch,
                shard: shard.len(),
            });
        }
        let mut stream = Self {
            dataset,
            shard_indices: shard.indices().to_vec(),
            batch,
            seed,
            epoch: 0,
            pos: 0,
            order: Vec::new(),
        };
        stream.reshuffle();
        Ok(stream)
    }

    fn reshuffle(&mut self) {
        self.order = self.shard_indices.clone();
        self.order
            .shuffle(&mut seeds::rng(self.seed, role::BATCH, self.epoch, 0));
        self.pos = 0;
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.shard_indices.len().div_ceil(self.batch)
    }

    /// Next mini-batch; rolls into a freshly shuffled epoch when exhausted.
    pub fn next_batch(&mut self) -> MiniBatch {
        if self.pos >= self.order.len() {
            self.epoch += 1;
            self.reshuffle();
        }
        let end = (self.pos + self.batch).min(self.order.len());
        let rows = &self.order[self.pos..end];
        self.pos = end;
        let d = self.dataset.dim();
        let mut features = Vec::with_capacity(rows.len() * d);
        let mut labels = Vec::with_capacity(rows.len());
        for &r in rows {
            features.extend_from_slice(self.dataset.feature_row(r as usize));
            labels.push(self.dataset.labels()[r as usize]);
        }
        MiniBatch::new(features, labels, d).expect("stream rows are consistent")
    }
}

/// Parses `f1,...,fd,label` rows; infers the dimension from the first row and
/// the class count as max label + 1.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut dim = None;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let lineno = lineno + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 2 {
            return Err(Error::CsvParse {
                line: lineno,
                msg: format!("expected at least 2 comma-separated fields, found {}", fields.len()),
            });
        }
        let d = *dim.get_or_insert(fields.len() - 1);
        if fields.len() - 1 != d {
            return Err(Error::CsvParse {
                line: lineno,
                msg: format!("expected {} feature columns, found {}", d, fields.len() - 1),
            });
        }
        for cell in &fields[..d] {
            let v: f32 = cell.trim().parse().map_err(|_| Error::CsvParse {
                line: lineno,
                msg: format!("non-numeric feature {:?}", cell.trim()),
            })?;
            features.push(v);
        }
        let raw_label: i64 = fields[d].trim().parse().map_err(|_| Error::CsvParse {
            line: lineno,
            msg: format!("non-integer label {:?}", fields[d].trim()),
        })?;
        if raw_label < 0 {
            return Err(Error::CsvParse {
                line: lineno,
                msg: format!("negative label {raw_label}"),
            });
        }
        labels.push(raw_label as u32);
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let classes = labels.iter().max().copied().unwrap() as usize + 1;
    Dataset::new(features, labels, dim.unwrap(), classes.max(2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn synthetic_is_deterministic() {
        let a = gen_synthetic(6, 3, 50, 42, 0.0).unwrap();
        let b = gen_synthetic(6, 3, 50, 42, 0.0).unwrap();
        assert_eq!(a.features(), b.features());
        assert_eq!(a.labels(), b.labels());
        let c = gen_synthetic(6, 3, 50, 43, 0.0).unwrap();
        assert_ne!(a.labels(), c.labels());
    }

    #[test]
    fn teacher_classifies_its_own_labels_perfectly() {
        let ds = gen_synthetic(8, 4, 300, 9, 0.0).unwrap();
        let teacher = Mlp::new(teacher_spec(8, 4, 9).unwrap());
        let w = teacher.init_params();
        let (_, acc) = teacher.evaluate(&w, ds.features(), ds.labels()).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn full_noise_breaks_the_feature_label_link() {
        let ds = gen_synthetic(8, 4, 4000, 11, 1.0).unwrap();
        let teacher = Mlp::new(teacher_spec(8, 4, 11).unwrap());
        let w = teacher.init_params();
        let (_, acc) = teacher.evaluate(&w, ds.features(), ds.labels()).unwrap();
        let p = 0.25f64;
        let sigma = (p * (1.0 - p) / ds.len() as f64).sqrt();
        assert!((acc - p).abs() <= 3.0 * sigma, "acc={acc}");
    }

    #[test]
    fn noise_out_of_range_is_an_error() {
        assert!(matches!(
            gen_synthetic(4, 2, 10, 0, 1.5),
            Err(Error::InvalidNoise(_))
        ));
    }

    #[test]
    fn partition_balances_sizes() {
        let ds = gen_synthetic(4, 2, 10, 1, 0.0).unwrap();
        let shards = partition(&ds, 4, 5).unwrap();
        let sizes: Vec<usize> = shards.iter().map(Shard::len).collect();
        assert_eq!(sizes, vec![3, 3, 2, 2]);
    }

    #[test]
    fn partition_is_a_disjoint_cover() {
        let ds = gen_synthetic(4, 2, 53, 1, 0.0).unwrap();
        let shards = partition(&ds, 7, 3).unwrap();
        let mut seen = BTreeSet::new();
        for s in &shards {
            for &i in s.indices() {
                assert!(seen.insert(i), "duplicate index {i}");
            }
        }
        assert_eq!(seen.len(), 53);
        assert_eq!(*seen.iter().next_back().unwrap(), 52);
    }

    #[test]
    fn single_worker_gets_everything() {
        let ds = gen_synthetic(4, 2, 12, 1, 0.0).unwrap();
        let shards = partition(&ds, 1, 9).unwrap();
        assert_eq!(shards.len(), 1);
        let mut idx = shards[0].indices().to_vec();
        idx.sort_unstable();
        assert_eq!(idx, (0..12).collect::<Vec<u32>>());
    }

    #[test]
    fn too_many_workers_is_an_error() {
        let ds = gen_synthetic(4, 2, 3, 1, 0.0).unwrap();
        assert!(matches!(
            partition(&ds, 4, 0),
            Err(Error::TooManyWorkers { k: 4, m: 3 })
        ));
    }

    #[test]
    fn epoch_batch_sizes_split_as_expected() {
        let ds = Arc::new(gen_synthetic(4, 2, 5, 1, 0.0).unwrap());
        let shards = partition(&ds, 1, 0).unwrap();
        let mut stream = BatchStream::new(ds, &shards[0], 2, 7).unwrap();
        assert_eq!(stream.batches_per_epoch(), 3);
        let sizes: Vec<usize> = (0..3).map(|_| stream.next_batch().batch_size()).collect();
        assert_eq!(sizes, vec![2, 2, 1]);
    }

    #[test]
    fn identical_streams_yield_identical_batches() {
        let ds = Arc::new(gen_synthetic(4, 3, 17, 2, 0.1).unwrap());
        let shards = partition(&ds, 2, 4).unwrap();
        let mut a = BatchStream::new(ds.clone(), &shards[1], 4, 11).unwrap();
        let mut b = BatchStream::new(ds, &shards[1], 4, 11).unwrap();
        for _ in 0..10 {
            let ba = a.next_batch();
            let bb = b.next_batch();
            assert_eq!(ba.labels(), bb.labels());
            for i in 0..ba.batch_size() {
                assert_eq!(ba.feature_row(i), bb.feature_row(i));
            }
        }
    }

    #[test]
    fn epoch_multiset_equals_shard() {
        let ds = Arc::new(gen_synthetic(4, 2, 23, 3, 0.0).unwrap());
        let shards = partition(&ds, 3, 6).unwrap();
        let shard = &shards[0];
        let mut stream = BatchStream::new(ds.clone(), shard, 3, 5).unwrap();
        for epoch in 0..2 {
            let mut seen: Vec<(u32, Vec<u32>)> = Vec::new();
            for _ in 0..stream.batches_per_epoch() {
                let b = stream.next_batch();
                for i in 0..b.batch_size() {
                    let feats: Vec<u32> = b.feature_row(i).iter().map(|f| f.to_bits()).collect();
                    seen.push((b.labels()[i], feats));
                }
            }
            let mut expect: Vec<(u32, Vec<u32>)> = shard
                .indices()
                .iter()
                .map(|&r| {
                    let feats = ds.feature_row(r as usize).iter().map(|f| f.to_bits()).collect();
                    (ds.labels()[r as usize], feats)
                })
                .collect();
            seen.sort();
            expect.sort();
            assert_eq!(seen, expect, "epoch {epoch}");
        }
    }

    #[test]
    fn oversized_batch_is_an_error() {
        let ds = Arc::new(gen_synthetic(4, 2, 6, 1, 0.0).unwrap());
        let shards = partition(&ds, 2, 0).unwrap();
        assert!(matches!(
            BatchStream::new(ds, &shards[0], 4, 0),
            Err(Error::BatchTooLarge { batch: 4, shard: 3 })
        ));
    }

    #[test]
    fn csv_happy_path() {
        let dir = std::env::temp_dir().join("slimdp-csv-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ok.csv");
        std::fs::write(&path, "0.5,1.5,0\n-1.0,2.0,1\n").unwrap();
        let ds = load_csv(&path).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.class_count(), 2);
        assert_eq!(ds.feature_row(1), &[-1.0, 2.0]);
        assert_eq!(ds.labels(), &[0, 1]);
    }

    #[test]
    fn csv_empty_file_reports_no_rows() {
        let dir = std::env::temp_dir().join("slimdp-csv-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("empty.csv");
        std::fs::write(&path, "").unwrap();
        let err = load_csv(&path).unwrap_err();
        assert!(err.to_string().contains("no rows"), "{err}");
    }

    #[test]
    fn csv_ragged_row_names_the_line() {
        let dir = std::env::temp_dir().join("slimdp-csv-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ragged.csv");
        std::fs::write(&path, "0.5,1.5,0\n2.0,1\n").unwrap();
        let err = load_csv(&path).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn csv_negative_label_is_an_error() {
        let dir = std::env::temp_dir().join("slimdp-csv-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("neg.csv");
        std::fs::write(&path, "0.5,1.5,-2\n").unwrap();
        let err = load_csv(&path).unwrap_err();
        assert!(err.to_string().contains("negative label"), "{err}");
    }

    #[test]
    fn csv_non_numeric_cell_is_an_error() {
        let dir = std::env::temp_dir().join("slimdp-csv-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.csv");
        std::fs::write(&path, "0.5,abc,1\n").unwrap();
        let err = load_csv(&path).unwrap_err();
        assert!(err.to_string().contains("non-numeric"), "{err}");
    }
}
