//! Finite-difference gradient oracle.
//!
//! The checks here only ever call forward evaluations
//! ([`Prototype::similarity`], [`model::batch_loss`](crate::model::batch_loss))
//! and compare central differences against the analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::data::{DatasetMeta, EmbeddingDataset, Record};
use crate::error::{Error, Result};
use crate::exec;
use crate::geometry::{
    norm, FisherBingham, Formulation, GaussianProto, HyperPg, MixtureHyperPg, PdfFamily, Prototype,
    VmfProto, DEFAULT_L2_EPS,
};
use crate::losses::LossWeights;
use crate::model::{self, ModelConfig, ModelParams, Trainable};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Maximum accepted relative error.
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Instances whose max-pool, loss-max or ReLU decisions are closer than this
/// to switching are redrawn; a central difference straddling a switch is
/// meaningless.
pub const TIE_MARGIN: f64 = 1e-3;

/// `|a - n| / max(|a|, |n|, 1)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Central differences of `f` at `x` with step `h`.
pub fn central_difference<F>(f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe)?;
        probe[i] = orig - h;
        let down = f(&probe)?;
        probe[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

fn max_rel(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| relative_error(*a, *n))
        .fold(0.0, f64::max)
}

fn unit_normal(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&v);
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn random_hyperpg(rng: &mut impl Rng, d: usize, family: PdfFamily) -> HyperPg {
    let anchor: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    HyperPg::new(
        anchor,
        rng.random_range(-0.5..1.0),
        rng.random_range(0.1..0.6),
        family,
    )
    .expect("sampled sigma is above the floor")
}

/// A random prototype with moderate parameters, away from the singular
/// regions of its formulation.
pub fn random_prototype(formulation: Formulation, d: usize, rng: &mut impl Rng) -> Prototype {
    let uniform = |rng: &mut dyn rand::RngCore| -> Vec<f64> {
        (0..d).map(|_| rng.random_range(0.0..1.0)).collect()
    };
    match formulation {
        Formulation::Euclidean => Prototype::Euclidean {
            point: uniform(rng),
            eps: DEFAULT_L2_EPS,
        },
        Formulation::Cosine => Prototype::Cosine(unit_normal(rng, d)),
        Formulation::ScaledDot => {
            Prototype::ScaledDot((0..d).map(|_| rng.sample(StandardNormal)).collect())
        }
        Formulation::Gaussian => Prototype::Gaussian(GaussianProto {
            mean: uniform(rng),
            log_var: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }),
        Formulation::HyperPg(family) => Prototype::HyperPg(random_hyperpg(rng, d, family)),
        Formulation::Vmf => Prototype::Vmf(VmfProto {
            anchor: (0..d).map(|_| rng.sample(StandardNormal)).collect(),
            log_kappa: rng.random_range(-1.0..2.0),
        }),
        Formulation::FisherBingham => {
            let mut fb = FisherBingham {
                dim: d,
                axes: (0..d * d).map(|_| rng.sample(StandardNormal)).collect(),
                log_kappa: rng.random_range(1.0f64..6.0).ln(),
                beta: (0..d.saturating_sub(1))
                    .map(|_| rng.random_range(-0.5..1.0))
                    .collect(),
            };
            fb.project();
            Prototype::FisherBingham(fb)
        }
        Formulation::Mixture => {
            let comps = (0..3)
                .map(|_| random_hyperpg(rng, d, PdfFamily::TruncGaussian))
                .collect();
            let logits = (0..3).map(|_| rng.sample(StandardNormal)).collect();
            Prototype::Mixture(MixtureHyperPg::new(comps, logits).expect("three components"))
        }
    }
}

/// Max relative error of [`Prototype::gradient`] against central differences
/// over `points` random `(prototype, z)` pairs.
pub fn check_similarity(formulation: Formulation, points: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..points {
        let d = rng.random_range(2..=6);
        let proto = random_prototype(formulation, d, &mut rng);
        let z: Vec<f64> = (0..d).map(|_| rng.random_range(-0.5..1.5)).collect();
        let analytic = proto.gradient(&z)?;

        let num_z = central_difference(|x| proto.similarity(x), &z, FD_STEP)?;
        let theta = proto.params();
        let num_p = central_difference(
            |t| {
                let mut q = proto.clone();
                q.set_params(t)?;
                q.similarity(&z)
            },
            &theta,
            FD_STEP,
        )?;
        worst = worst
            .max(max_rel(&analytic.grad_z, &num_z))
            .max(max_rel(&analytic.grad_params, &num_p));
    }
    Ok(worst)
}

/// A tiny random model/batch pair for end-to-end checks.
pub fn tiny_instance(
    formulation: Formulation,
    rng: &mut ChaCha8Rng,
) -> Result<(ModelParams, EmbeddingDataset)> {
    let cfg = ModelConfig {
        formulation,
        classes: 2,
        per_class: 1,
        dim: 3,
        d_in: 4,
        d_hidden: 3,
        eps: DEFAULT_L2_EPS,
        mixture_components: 2,
        zeta: (2, 2),
        patch: 1,
    };
    let mut params = ModelParams::init(&cfg, rng.random())?;
    // perturb the head so that no gradient path is trivially zero
    for w in params.head.weights.iter_mut() {
        *w += rng.random_range(-0.3..0.3);
    }
    let meta = DatasetMeta {
        classes: 2,
        width: 2,
        height: 2,
        d_in: 4,
    };
    let records = (0..3)
        .map(|i| Record {
            label: (i % 2) as u32,
            features: (0..16).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        })
        .collect();
    Ok((params, EmbeddingDataset::new(meta, records)?))
}

/// End-to-end check of [`model::batch_loss_and_grad`] on tiny random
/// instances (C=2, Q=1, D=3, 2x2 grid). Instances near a max-pool tie or a
/// ReLU kink are redrawn.
pub fn check_model(formulation: Formulation, instances: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = LossWeights::default();
    let mut worst = 0.0f64;
    let mut done = 0;
    let mut attempts = 0;
    while done < instances {
        attempts += 1;
        if attempts > instances * 50 {
            return Err(Error::Configuration(
                "could not draw tie-free gradient check instances".into(),
            ));
        }
        let (params, data) = tiny_instance(formulation, &mut rng)?;
        if model::min_decision_margin(&params, &data.records)? < TIE_MARGIN {
            continue;
        }
        let (_, analytic) =
            model::batch_loss_and_grad(&params, &data.records, &weights, Trainable::ALL, false)?;
        let theta = params.flatten();
        let numeric = central_difference(
            |t| {
                let mut q = params.clone();
                q.unflatten(t)?;
                Ok(model::batch_loss(&q, &data.records, &weights)?.total)
            },
            &theta,
            FD_STEP,
        )?;
        worst = worst.max(max_rel(&analytic, &numeric));
        done += 1;
    }
    Ok(worst)
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckRow {
    pub formulation: Formulation,
    pub similarity_max_rel_err: f64,
    pub model_max_rel_err: f64,
}

impl GradCheckRow {
    pub fn passed(&self) -> bool {
        self.similarity_max_rel_err < GRAD_TOLERANCE && self.model_max_rel_err < GRAD_TOLERANCE
    }
}

/// Runs both checks for every formulation in `formulations`.
pub fn check_all(
    formulations: &[Formulation],
    points: usize,
    model_instances: usize,
    seed: u64,
    parallel: bool,
) -> Result<Vec<GradCheckRow>> {
    exec::map_ordered(formulations, parallel, |&f| {
        let s = check_similarity(f, points, seed ^ u64::from(f.code()))?;
        let m = check_model(
            f,
            model_instances,
            seed.wrapping_add(7919 * u64::from(f.code())),
        )?;
        Ok(GradCheckRow {
            formulation: f,
            similarity_max_rel_err: s,
            model_max_rel_err: m,
        })
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floors_the_denominator() {
        assert_eq!(relative_error(1e-9, 2e-9), 1e-9);
        assert_eq!(relative_error(100.0, 101.0), 1.0 / 101.0);
    }

    #[test]
    fn central_difference_of_a_cubic() {
        let g = central_difference(|x| Ok(x[0].powi(3) + 2.0 * x[1]), &[2.0, -1.0], 1e-5).unwrap();
        assert!((g[0] - 12.0).abs() < 1e-8);
        assert!((g[1] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn every_formulation_passes_end_to_end() {
        let rows = check_all(&Formulation::ALL, 20, 10, 99, true).unwrap();
        for r in &rows {
            assert!(r.passed(), "{r:?}");
        }
    }
}
