//! Similarity measures and probability densities for every prototype
//! formulation, with analytic gradients.

pub mod density;
mod measures;
mod prototype;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use density::{erf, erfc, gaussian_cdf, pdf_eval, pdf_with_grad, PdfFamily, PdfGrad};
pub use measures::{
    cosine_grad, cosine_similarity, fb_log_similarity, gaussian_log_similarity, hyperpg_similarity,
    l2_grad, l2_similarity, mixture_similarity, scaled_dot_similarity, vmf_log_similarity,
    SimilarityGrad, DEFAULT_L2_EPS,
};
pub use prototype::{
    FisherBingham, GaussianProto, HyperPg, MixtureHyperPg, Prototype, VmfProto, MAX_TRUNC_OFFSET,
    SIGMA_FLOOR,
};

pub(crate) use measures::{dot, norm, sigmoid};

/// Analytic partial derivatives of `p`'s similarity score at `z`, with
/// respect to `z` and to every learnable parameter.
pub fn similarity_gradient(p: &Prototype, z: &[f64]) -> Result<SimilarityGrad> {
    p.gradient(z)
}

/// Formulation tag shared by every prototype in a bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Formulation {
    Euclidean,
    Cosine,
    ScaledDot,
    Gaussian,
    HyperPg(PdfFamily),
    Vmf,
    FisherBingham,
    Mixture,
}

impl Formulation {
    pub const ALL: [Formulation; 11] = [
        Formulation::Euclidean,
        Formulation::Cosine,
        Formulation::ScaledDot,
        Formulation::Gaussian,
        Formulation::HyperPg(PdfFamily::Gaussian),
        Formulation::HyperPg(PdfFamily::Cauchy),
        Formulation::HyperPg(PdfFamily::TruncGaussian),
        Formulation::HyperPg(PdfFamily::TruncCauchy),
        Formulation::Vmf,
        Formulation::FisherBingham,
        Formulation::Mixture,
    ];

    /// Command-line tag.
    pub fn tag(self) -> &'static str {
        match self {
            Formulation::Euclidean => "euclidean",
            Formulation::Cosine => "cosine",
            Formulation::ScaledDot => "sdot",
            Formulation::Gaussian => "gaussian",
            Formulation::HyperPg(PdfFamily::Gaussian) => "hyperpg",
            Formulation::HyperPg(PdfFamily::Cauchy) => "hyperpg-cauchy",
            Formulation::HyperPg(PdfFamily::TruncGaussian) => "hyperpg-trunc-gauss",
            Formulation::HyperPg(PdfFamily::TruncCauchy) => "hyperpg-trunc-cauchy",
            Formulation::Vmf => "vmf",
            Formulation::FisherBingham => "fb",
            Formulation::Mixture => "mixture",
        }
    }

    pub fn valid_tags() -> String {
        Formulation::ALL.map(|f| f.tag()).join(", ")
    }

    /// Stable numeric code used in checkpoint headers.
    pub fn code(self) -> u32 {
        Formulation::ALL
            .iter()
            .position(|f| *f == self)
            .expect("every formulation is listed") as u32
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Formulation::ALL.get(code as usize).copied()
    }

    /// Whether scores depend on latent vectors only through their direction.
    pub fn is_hyperspherical(self) -> bool {
        matches!(
            self,
            Formulation::Cosine
                | Formulation::HyperPg(_)
                | Formulation::Vmf
                | Formulation::FisherBingham
                | Formulation::Mixture
        )
    }

    pub fn matches(self, p: &Prototype) -> bool {
        match (self, p) {
            (Formulation::Euclidean, Prototype::Euclidean { .. })
            | (Formulation::Cosine, Prototype::Cosine(_))
            | (Formulation::ScaledDot, Prototype::ScaledDot(_))
            | (Formulation::Gaussian, Prototype::Gaussian(_))
            | (Formulation::Vmf, Prototype::Vmf(_))
            | (Formulation::FisherBingham, Prototype::FisherBingham(_))
            | (Formulation::Mixture, Prototype::Mixture(_)) => true,
            (Formulation::HyperPg(f), Prototype::HyperPg(h)) => h.family == f,
            _ => false,
        }
    }

    pub fn of(p: &Prototype) -> Formulation {
        match p {
            Prototype::Euclidean { .. } => Formulation::Euclidean,
            Prototype::Cosine(_) => Formulation::Cosine,
            Prototype::ScaledDot(_) => Formulation::ScaledDot,
            Prototype::Gaussian(_) => Formulation::Gaussian,
            Prototype::HyperPg(h) => Formulation::HyperPg(h.family),
            Prototype::Vmf(_) => Formulation::Vmf,
            Prototype::FisherBingham(_) => Formulation::FisherBingham,
            Prototype::Mixture(_) => Formulation::Mixture,
        }
    }
}

impl fmt::Display for Formulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Formulation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Formulation::ALL
            .into_iter()
            .find(|f| f.tag() == s)
            .ok_or_else(|| {
                Error::Configuration(format!(
                    "unknown formulation `{s}` (valid: {})",
                    Formulation::valid_tags()
                ))
            })
    }
}

#[cfg(test)]
mod tests;
