//! One-dimensional densities over cosine similarities.
//!
//! The truncated families live on the fixed support `[-1, 1]`, which is the
//! range of the cosine similarity they are evaluated on.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower truncation bound.
pub const TRUNC_LO: f64 = -1.0;
/// Upper truncation bound.
pub const TRUNC_HI: f64 = 1.0;
/// Truncation masses below this are treated as a degenerate distribution.
pub const MIN_TRUNC_MASS: f64 = 1e-300;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PdfFamily {
    Gaussian,
    Cauchy,
    TruncGaussian,
    TruncCauchy,
}

impl PdfFamily {
    pub const ALL: [PdfFamily; 4] = [
        PdfFamily::Gaussian,
        PdfFamily::Cauchy,
        PdfFamily::TruncGaussian,
        PdfFamily::TruncCauchy,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PdfFamily::Gaussian => "gaussian",
            PdfFamily::Cauchy => "cauchy",
            PdfFamily::TruncGaussian => "trunc-gauss",
            PdfFamily::TruncCauchy => "trunc-cauchy",
        }
    }

    pub fn is_truncated(self) -> bool {
        matches!(self, PdfFamily::TruncGaussian | PdfFamily::TruncCauchy)
    }
}

impl fmt::Display for PdfFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PdfFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PdfFamily::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::Configuration(format!("unknown pdf family `{s}`")))
    }
}

/// Error function. Backed by the musl/FreeBSD implementation (< 1 ulp).
#[inline]
pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

/// Complementary error function, accurate in the far tails where `1 - erf`
/// would cancel.
#[inline]
pub fn erfc(x: f64) -> f64 {
    libm::erfc(x)
}

#[inline]
fn std_normal_pdf(u: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * u * u).exp()
}

/// Standard normal CDF.
#[inline]
fn std_normal_cdf(u: f64) -> f64 {
    0.5 * erfc(-u * FRAC_1_SQRT_2)
}

/// Cumulative distribution of `N(mu, sigma^2)` at `x`.
pub fn gaussian_cdf(x: f64, mu: f64, sigma: f64) -> Result<f64> {
    check_scale(sigma)?;
    Ok(0.5 * (1.0 + erf((x - mu) / (sigma * std::f64::consts::SQRT_2))))
}

/// `Phi(b) - Phi(a)` for standardized bounds `a < b`, evaluated on the side
/// of the distribution where it does not cancel.
fn std_normal_interval(a: f64, b: f64) -> f64 {
    if a > 0.0 {
        // both bounds in the upper tail
        0.5 * (erfc(a * FRAC_1_SQRT_2) - erfc(b * FRAC_1_SQRT_2))
    } else if b < 0.0 {
        0.5 * (erfc(-b * FRAC_1_SQRT_2) - erfc(-a * FRAC_1_SQRT_2))
    } else {
        std_normal_cdf(b) - std_normal_cdf(a)
    }
}

fn check_scale(scale: f64) -> Result<()> {
    if scale > 0.0 && scale.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "scale must be positive and finite, got {scale}"
        )))
    }
}

/// Density value together with its partial derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PdfGrad {
    pub value: f64,
    pub d_x: f64,
    pub d_loc: f64,
    pub d_scale: f64,
}

/// Evaluates the density of `family` at `x`.
pub fn pdf_eval(family: PdfFamily, x: f64, loc: f64, scale: f64) -> Result<f64> {
    pdf_with_grad(family, x, loc, scale).map(|g| g.value)
}

/// Density and its gradient with respect to `(x, loc, scale)`.
pub fn pdf_with_grad(family: PdfFamily, x: f64, loc: f64, scale: f64) -> Result<PdfGrad> {
    check_scale(scale)?;
    if !x.is_finite() || !loc.is_finite() {
        return Err(Error::Domain(format!(
            "non-finite density argument x={x}, loc={loc}"
        )));
    }
    let u = (x - loc) / scale;
    // Each branch computes the value and d(log f) with respect to x, loc, scale.
    let (value, dl_x, dl_loc, dl_scale) = match family {
        PdfFamily::Gaussian => {
            let f = std_normal_pdf(u) / scale;
            (f, -u / scale, u / scale, (u * u - 1.0) / scale)
        }
        PdfFamily::Cauchy => {
            let q = 1.0 + u * u;
            let f = 1.0 / (PI * scale * q);
            let dx = -2.0 * u / (scale * q);
            (f, dx, -dx, (-1.0 + 2.0 * u * u / q) / scale)
        }
        PdfFamily::TruncGaussian => {
            let a = (TRUNC_LO - loc) / scale;
            let b = (TRUNC_HI - loc) / scale;
            let mass = std_normal_interval(a, b);
            if !(mass >= MIN_TRUNC_MASS) {
                return Err(Error::DegenerateDistribution { mass });
            }
            let (pa, pb) = (std_normal_pdf(a), std_normal_pdf(b));
            let f = std_normal_pdf(u) / (scale * mass);
            let dmass_loc = (pa - pb) / scale;
            let dmass_scale = (a * pa - b * pb) / scale;
            (
                f,
                -u / scale,
                u / scale - dmass_loc / mass,
                (u * u - 1.0) / scale - dmass_scale / mass,
            )
        }
        PdfFamily::TruncCauchy => {
            let a = (TRUNC_LO - loc) / scale;
            let b = (TRUNC_HI - loc) / scale;
            let mass = b.atan() - a.atan();
            if !(mass >= MIN_TRUNC_MASS) {
                return Err(Error::DegenerateDistribution { mass });
            }
            let q = 1.0 + u * u;
            let (qa, qb) = (1.0 + a * a, 1.0 + b * b);
            let f = 1.0 / (scale * q * mass);
            let dx = -2.0 * u / (scale * q);
            let dmass_loc = (-1.0 / qb + 1.0 / qa) / scale;
            let dmass_scale = (-b / qb + a / qa) / scale;
            (
                f,
                dx,
                -dx - dmass_loc / mass,
                (-1.0 + 2.0 * u * u / q) / scale - dmass_scale / mass,
            )
        }
    };
    Ok(PdfGrad {
        value,
        d_x: value * dl_x,
        d_loc: value * dl_loc,
        d_scale: value * dl_scale,
    })
}
