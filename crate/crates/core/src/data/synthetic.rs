use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{stratified_split, DatasetMeta, EmbeddingDataset, Record, SplitDataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SyntheticKind {
    /// Isotropic Gaussian clusters around random class centers.
    EuclideanBlobs,
    /// Directions scattered around a class anchor, then scaled by a random
    /// per-record norm; the label is recoverable from direction only.
    HypersphericalVmf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub classes: usize,
    pub per_class: usize,
    pub d_in: usize,
    pub width: usize,
    pub height: usize,
    /// Standard deviation of the blob centers.
    pub center_spread: f64,
    /// Within-class standard deviation of the blobs.
    pub noise: f64,
    /// Directional concentration; `f64::INFINITY` gives noiseless directions.
    pub concentration: f64,
    /// Per-record norm drawn uniformly from this range (hyperspherical only).
    pub norm_range: Option<(f64, f64)>,
    pub test_fraction: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn blobs(classes: usize, per_class: usize, d_in: usize, seed: u64) -> Self {
        SyntheticSpec {
            kind: SyntheticKind::EuclideanBlobs,
            classes,
            per_class,
            d_in,
            width: 1,
            height: 1,
            center_spread: 2.0,
            noise: 0.2,
            concentration: f64::INFINITY,
            norm_range: None,
            test_fraction: 0.2,
            seed,
        }
    }

    pub fn hyperspherical(classes: usize, per_class: usize, d_in: usize, seed: u64) -> Self {
        SyntheticSpec {
            kind: SyntheticKind::HypersphericalVmf,
            classes,
            per_class,
            d_in,
            width: 1,
            height: 1,
            center_spread: 0.0,
            noise: 0.0,
            concentration: 50.0,
            norm_range: Some((0.5, 2.0)),
            test_fraction: 0.2,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Configuration(m));
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.per_class == 0 || self.d_in == 0 || self.width == 0 || self.height == 0 {
            return bad("counts and dimensions must be positive".into());
        }
        if !(self.noise >= 0.0 && self.center_spread >= 0.0 && self.concentration > 0.0) {
            return bad("noise, spread and concentration must be non-negative".into());
        }
        if let Some((lo, hi)) = self.norm_range {
            if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
                return bad(format!("invalid norm range [{lo}, {hi}]"));
            }
        }
        Ok(())
    }
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    n
}

/// Class anchors: antipodal for two classes, orthonormal when they fit,
/// random unit vectors otherwise.
fn class_anchors(classes: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let gauss =
        |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..d).map(|_| rng.sample(StandardNormal)).collect() };
    if classes == 2 {
        let mut a = gauss(rng);
        normalize(&mut a);
        let b = a.iter().map(|x| -x).collect();
        return vec![a, b];
    }
    let mut anchors: Vec<Vec<f64>> = Vec::with_capacity(classes);
    while anchors.len() < classes {
        let mut v = gauss(rng);
        if classes <= d {
            for a in &anchors {
                let c: f64 = v.iter().zip(a).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(a).for_each(|(x, y)| *x -= c * y);
            }
        }
        if normalize(&mut v) > 1e-6 {
            anchors.push(v);
        }
    }
    anchors
}

/// Generates a dataset and its stratified train/test split.
pub fn generate(spec: &SyntheticSpec) -> Result<SplitDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.d_in;
    let cells = spec.width * spec.height;
    let mut records = Vec::with_capacity(spec.classes * spec.per_class);

    match spec.kind {
        SyntheticKind::EuclideanBlobs => {
            let centers: Vec<Vec<f64>> = (0..spec.classes)
                .map(|_| {
                    (0..d)
                        .map(|_| spec.center_spread * rng.sample::<f64, _>(StandardNormal))
                        .collect()
                })
                .collect();
            let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE))
                .map_err(|e| Error::Configuration(e.to_string()))?;
            for c in 0..spec.classes {
                for _ in 0..spec.per_class {
                    let features = (0..cells)
                        .flat_map(|_| centers[c].iter())
                        .map(|m| (m + noise.sample(&mut rng)) as f32)
                        .collect();
                    records.push(Record {
                        label: c as u32,
                        features,
                    });
                }
            }
        }
        SyntheticKind::HypersphericalVmf => {
            let anchors = class_anchors(spec.classes, d, &mut rng);
            let tangent_sd = if spec.concentration.is_finite() {
                1.0 / spec.concentration.sqrt()
            } else {
                0.0
            };
            for (c, anchor) in anchors.iter().enumerate() {
                for _ in 0..spec.per_class {
                    let r = match spec.norm_range {
                        Some((lo, hi)) if hi > lo => rng.random_range(lo..hi),
                        Some((lo, _)) => lo,
                        None => 1.0,
                    };
                    let mut features = Vec::with_capacity(cells * d);
                    for _ in 0..cells {
                        let eps: Vec<f64> = (0..d)
                            .map(|_| tangent_sd * rng.sample::<f64, _>(StandardNormal))
                            .collect();
                        let along: f64 = eps.iter().zip(anchor).map(|(e, a)| e * a).sum();
                        let mut u: Vec<f64> = anchor
                            .iter()
                            .zip(&eps)
                            .map(|(a, e)| a + e - along * a)
                            .collect();
                        normalize(&mut u);
                        features.extend(u.iter().map(|x| (r * x) as f32));
                    }
                    records.push(Record {
                        label: c as u32,
                        features,
                    });
                }
            }
        }
    }

    let meta = DatasetMeta {
        classes: spec.classes,
        width: spec.width,
        height: spec.height,
        d_in: d,
    };
    let full = EmbeddingDataset::new(meta, records)?;
    stratified_split(&full, spec.test_fraction, spec.seed ^ 0x5eed_5eed)
}
