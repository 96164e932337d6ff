//! Embedding datasets: synthetic generation, binary storage and splitting.

mod format;
mod synthetic;

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{check_dim, Error, Result};

pub use format::{load_embeddings, read_embeddings, save_embeddings, write_embeddings, MAGIC};
pub use synthetic::{generate, SyntheticKind, SyntheticSpec};

/// Shape of every record in a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetMeta {
    pub classes: usize,
    pub width: usize,
    pub height: usize,
    pub d_in: usize,
}

impl DatasetMeta {
    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    /// Number of feature values per record.
    pub fn record_len(&self) -> usize {
        self.cells() * self.d_in
    }
}

/// One `width x height x d_in` feature map, stored cell-major then channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub label: u32,
    pub features: Vec<f32>,
}

/// A labeled collection of feature maps.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    pub meta: DatasetMeta,
    pub records: Vec<Record>,
}

impl EmbeddingDataset {
    pub fn new(meta: DatasetMeta, records: Vec<Record>) -> Result<Self> {
        if meta.classes == 0 || meta.cells() == 0 || meta.d_in == 0 {
            return Err(Error::Configuration(format!(
                "degenerate dataset shape {meta:?}"
            )));
        }
        for r in &records {
            check_dim("record features", meta.record_len(), r.features.len())?;
            if r.label as usize >= meta.classes {
                return Err(Error::Configuration(format!(
                    "label {} out of range for {} classes",
                    r.label, meta.classes
                )));
            }
            if r.features.iter().any(|x| !x.is_finite()) {
                return Err(Error::Domain("non-finite feature value".into()));
            }
        }
        Ok(EmbeddingDataset { meta, records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.meta.classes];
        for r in &self.records {
            counts[r.label as usize] += 1;
        }
        counts
    }

    /// Per-class statistics as CSV:
    /// `class,count,mean_norm,min_norm,max_norm` (norms over whole records).
    pub fn stats_csv(&self) -> String {
        let mut rows: Vec<(usize, f64, f64, f64)> =
            vec![(0, 0.0, f64::INFINITY, f64::NEG_INFINITY); self.meta.classes];
        for r in &self.records {
            let n = r
                .features
                .iter()
                .map(|&x| f64::from(x) * f64::from(x))
                .sum::<f64>()
                .sqrt();
            let row = &mut rows[r.label as usize];
            row.0 += 1;
            row.1 += n;
            row.2 = row.2.min(n);
            row.3 = row.3.max(n);
        }
        let mut out = String::from("class,count,mean_norm,min_norm,max_norm\n");
        for (c, (count, sum, lo, hi)) in rows.into_iter().enumerate() {
            if count == 0 {
                let _ = writeln!(out, "{c},0,,,");
            } else {
                let _ = writeln!(out, "{c},{count},{},{lo},{hi}", sum / count as f64);
            }
        }
        out
    }
}

/// Train and test halves of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: EmbeddingDataset,
    pub test: EmbeddingDataset,
}

impl SplitDataset {
    pub fn new(train: EmbeddingDataset, test: EmbeddingDataset) -> Result<Self> {
        if train.meta != test.meta {
            return Err(Error::Configuration(format!(
                "train/test shapes differ: {:?} vs {:?}",
                train.meta, test.meta
            )));
        }
        if let Some(c) = train.class_counts().iter().position(|&n| n == 0) {
            return Err(Error::Configuration(format!(
                "class {c} has no training records"
            )));
        }
        if test.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(SplitDataset { train, test })
    }

    pub fn meta(&self) -> DatasetMeta {
        self.train.meta
    }
}

/// Stratified split: within each class, `round(test_fraction * n_c)`
/// records (after a seeded shuffle) go to the test half.
pub fn stratified_split(
    data: &EmbeddingDataset,
    test_fraction: f64,
    seed: u64,
) -> Result<SplitDataset> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Configuration(format!(
            "test fraction must be in [0, 1), got {test_fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.meta.classes];
    for (i, r) in data.records.iter().enumerate() {
        by_class[r.label as usize].push(i);
    }
    let mut test_idx = Vec::new();
    let mut train_idx = Vec::new();
    for mut idx in by_class {
        idx.shuffle(&mut rng);
        let n_test = (test_fraction * idx.len() as f64).round() as usize;
        test_idx.extend_from_slice(&idx[..n_test]);
        train_idx.extend_from_slice(&idx[n_test..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    let pick = |idx: &[usize]| EmbeddingDataset {
        meta: data.meta,
        records: idx.iter().map(|&i| data.records[i].clone()).collect(),
    };
    SplitDataset::new(pick(&train_idx), pick(&test_idx))
}
