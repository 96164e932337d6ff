//! Prototype formulations for prototypical part classifiers.
//!
//! A small, dependency-light library that compares latent patches against
//! learned prototypes. Point-based formulations (L2, cosine, scaled dot
//! product) sit next to probabilistic ones on the hypersphere (HyperPG with
//! Gaussian or Cauchy densities over the cosine, von Mises-Fisher,
//! Fisher-Bingham and HyperPG mixtures). Around them are a per-cell neck, a
//! global max-pooled prototype layer, a linear head, a hand-written reverse
//! pass, AdamW training, synthetic data and analysis exports.
//!
//! ```
//! use protoform::geometry::{cosine_similarity, l2_similarity};
//!
//! let z = [3.0, 4.0];
//! assert_eq!(cosine_similarity(&z, &[6.0, 8.0]).unwrap(), 1.0);
//! assert!((l2_similarity(&z, &z, 1e-4).unwrap() - 1e4f64.ln()).abs() < 1e-9);
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analysis;
pub mod data;
pub mod error;
pub mod exec;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod training;

pub use error::{Error, Result};
pub use geometry::{Formulation, PdfFamily, Prototype};
pub use model::{ModelConfig, ModelParams, Trainable};
pub use training::{train, RunReport, TrainConfig};
