//! Similarity measures and their analytic gradients.
//!
//! Every `*_grad` function returns the score together with the partial
//! derivatives with respect to the latent vector and the prototype's
//! parameters in the order used by [`Prototype::params`](super::Prototype::params).

use crate::error::{check_dim, Error, Result};

use super::density::pdf_with_grad;
use super::prototype::{FisherBingham, GaussianProto, HyperPg, MixtureHyperPg, VmfProto};

/// Default `eps` of the inverted L2 similarity.
pub const DEFAULT_L2_EPS: f64 = 1e-4;

/// Orthonormality / simplex tolerance used when validating Fisher-Bingham
/// prototypes.
pub const FB_TOLERANCE: f64 = 1e-8;

const LOG_2PI: f64 = 1.837_877_066_409_345_5;

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nonzero_norm(v: &[f64], what: &str) -> Result<f64> {
    let n = norm(v);
    if n > 0.0 && n.is_finite() {
        Ok(n)
    } else {
        Err(Error::Domain(format!(
            "{what} must have positive finite norm, got {n}"
        )))
    }
}

/// `log((d + 1) / (d + eps))` with `d = |z - p|^2`.
pub fn l2_similarity(z: &[f64], p: &[f64], eps: f64) -> Result<f64> {
    check_dim("l2_similarity", p.len(), z.len())?;
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("eps must be positive, got {eps}")));
    }
    let d = sq_dist(z, p);
    Ok(((d + 1.0) / (d + eps)).ln())
}

/// Value and gradient with respect to `z`; the gradient with respect to `p`
/// is its negation.
pub fn l2_grad(z: &[f64], p: &[f64], eps: f64) -> Result<(f64, Vec<f64>)> {
    let value = l2_similarity(z, p, eps)?;
    let d = sq_dist(z, p);
    let ds_dd = 1.0 / (d + 1.0) - 1.0 / (d + eps);
    let grad = z
        .iter()
        .zip(p)
        .map(|(a, b)| 2.0 * ds_dd * (a - b))
        .collect();
    Ok((value, grad))
}

pub fn cosine_similarity(z: &[f64], p: &[f64]) -> Result<f64> {
    check_dim("cosine_similarity", p.len(), z.len())?;
    let nz = nonzero_norm(z, "latent vector")?;
    let np = nonzero_norm(p, "prototype vector")?;
    Ok((dot(z, p) / (nz * np)).clamp(-1.0, 1.0))
}

/// Cosine value and its gradients with respect to `z` and `p`.
pub fn cosine_grad(z: &[f64], p: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    check_dim("cosine_similarity", p.len(), z.len())?;
    let nz = nonzero_norm(z, "latent vector")?;
    let np = nonzero_norm(p, "prototype vector")?;
    // unclamped here so that the gradient stays consistent with the value
    let c = dot(z, p) / (nz * np);
    let gz = z
        .iter()
        .zip(p)
        .map(|(a, b)| (b / np - c * a / nz) / nz)
        .collect();
    let gp = z
        .iter()
        .zip(p)
        .map(|(a, b)| (a / nz - c * b / np) / np)
        .collect();
    Ok((c, gz, gp))
}

/// `z^T p / sqrt(D)`.
pub fn scaled_dot_similarity(z: &[f64], p: &[f64]) -> Result<f64> {
    check_dim("scaled_dot_similarity", p.len(), z.len())?;
    if z.is_empty() {
        return Err(Error::Domain("scaled dot product needs D >= 1".into()));
    }
    Ok(dot(z, p) / (z.len() as f64).sqrt())
}

/// Log-density of a diagonal Gaussian.
pub fn gaussian_log_similarity(z: &[f64], p: &GaussianProto) -> Result<f64> {
    check_dim("gaussian_log_similarity", p.mean.len(), z.len())?;
    let mut acc = 0.0;
    for ((x, m), lv) in z.iter().zip(&p.mean).zip(&p.log_var) {
        let r = x - m;
        acc += LOG_2PI + lv + r * r * (-lv).exp();
    }
    Ok(-0.5 * acc)
}

fn gaussian_grad(z: &[f64], p: &GaussianProto) -> Result<SimilarityGrad> {
    let value = gaussian_log_similarity(z, p)?;
    let d = z.len();
    let mut grad_z = Vec::with_capacity(d);
    let mut grad_params = vec![0.0; 2 * d];
    for (i, ((x, m), lv)) in z.iter().zip(&p.mean).zip(&p.log_var).enumerate() {
        let prec = (-lv).exp();
        let r = x - m;
        grad_z.push(-r * prec);
        grad_params[i] = r * prec;
        grad_params[d + i] = -0.5 * (1.0 - r * r * prec);
    }
    Ok(SimilarityGrad {
        value,
        grad_z,
        grad_params,
    })
}

/// Density of the prototype's PDF family evaluated at the cosine similarity
/// between `z` and the anchor.
pub fn hyperpg_similarity(z: &[f64], p: &HyperPg) -> Result<f64> {
    let c = cosine_similarity(z, &p.anchor)?;
    super::density::pdf_eval(p.family, c, p.mu, p.sigma())
}

fn hyperpg_grad(z: &[f64], p: &HyperPg) -> Result<SimilarityGrad> {
    let (c, dc_z, dc_a) = cosine_grad(z, &p.anchor)?;
    let g = pdf_with_grad(p.family, c.clamp(-1.0, 1.0), p.mu, p.sigma())?;
    let mut grad_params: Vec<f64> = dc_a.iter().map(|v| g.d_x * v).collect();
    grad_params.push(g.d_loc);
    grad_params.push(g.d_scale * sigmoid(p.raw_sigma));
    Ok(SimilarityGrad {
        value: g.value,
        grad_z: dc_z.iter().map(|v| g.d_x * v).collect(),
        grad_params,
    })
}

/// Log of the unnormalized vMF density, `kappa * cos(z, anchor)`.
pub fn vmf_log_similarity(z: &[f64], p: &VmfProto) -> Result<f64> {
    Ok(p.kappa() * cosine_similarity(z, &p.anchor)?)
}

fn vmf_grad(z: &[f64], p: &VmfProto) -> Result<SimilarityGrad> {
    let (c, dc_z, dc_a) = cosine_grad(z, &p.anchor)?;
    let k = p.kappa();
    let mut grad_params: Vec<f64> = dc_a.iter().map(|v| k * v).collect();
    grad_params.push(k * c);
    Ok(SimilarityGrad {
        value: k * c,
        grad_z: dc_z.iter().map(|v| k * v).collect(),
        grad_params,
    })
}

/// Log of the unnormalized Fisher-Bingham density. Validates the prototype's
/// constraints first.
pub fn fb_log_similarity(z: &[f64], p: &FisherBingham) -> Result<f64> {
    p.validate()?;
    fb_value(z, p)
}

pub(crate) fn fb_value(z: &[f64], p: &FisherBingham) -> Result<f64> {
    let d = p.dim;
    check_dim("fb_log_similarity", d, z.len())?;
    let nz = nonzero_norm(z, "latent vector")?;
    let mut acc = p.kappa() * dot(p.axis(0), z) / nz;
    for j in 1..d {
        let proj = dot(p.axis(j), z) / nz;
        acc += p.beta[j - 1] * proj * proj;
    }
    Ok(acc)
}

fn fb_grad(z: &[f64], p: &FisherBingham) -> Result<SimilarityGrad> {
    let value = fb_value(z, p)?;
    let d = p.dim;
    let nz = norm(z);
    let v: Vec<f64> = z.iter().map(|x| x / nz).collect();
    let k = p.kappa();
    let proj: Vec<f64> = (0..d).map(|j| dot(p.axis(j), &v)).collect();

    // d value / d v
    let mut g_v: Vec<f64> = p.axis(0).iter().map(|a| k * a).collect();
    for j in 1..d {
        let w = 2.0 * p.beta[j - 1] * proj[j];
        for (g, a) in g_v.iter_mut().zip(p.axis(j)) {
            *g += w * a;
        }
    }
    let radial = dot(&g_v, &v);
    let grad_z = g_v
        .iter()
        .zip(&v)
        .map(|(g, vi)| (g - radial * vi) / nz)
        .collect();

    let mut grad_params = Vec::with_capacity(d * d + d);
    grad_params.extend(v.iter().map(|vi| k * vi));
    for j in 1..d {
        let w = 2.0 * p.beta[j - 1] * proj[j];
        grad_params.extend(v.iter().map(|vi| w * vi));
    }
    grad_params.push(k * proj[0]);
    grad_params.extend(proj[1..].iter().map(|q| q * q));
    Ok(SimilarityGrad {
        value,
        grad_z,
        grad_params,
    })
}

/// Mixture of HyperPG components weighted by `softmax(logits)`.
pub fn mixture_similarity(z: &[f64], p: &MixtureHyperPg) -> Result<f64> {
    let weights = p.weights();
    let mut acc = 0.0;
    for (w, comp) in weights.iter().zip(&p.components) {
        acc += w * hyperpg_similarity(z, comp)?;
    }
    Ok(acc)
}

fn mixture_grad(z: &[f64], p: &MixtureHyperPg) -> Result<SimilarityGrad> {
    let weights = p.weights();
    let comps = p
        .components
        .iter()
        .map(|c| hyperpg_grad(z, c))
        .collect::<Result<Vec<_>>>()?;
    let value: f64 = weights.iter().zip(&comps).map(|(w, c)| w * c.value).sum();
    let mut grad_z = vec![0.0; z.len()];
    let mut grad_params = Vec::new();
    for (w, c) in weights.iter().zip(&comps) {
        for (g, v) in grad_z.iter_mut().zip(&c.grad_z) {
            *g += w * v;
        }
        grad_params.extend(c.grad_params.iter().map(|v| w * v));
    }
    grad_params.extend(
        weights
            .iter()
            .zip(&comps)
            .map(|(w, c)| w * (c.value - value)),
    );
    Ok(SimilarityGrad {
        value,
        grad_z,
        grad_params,
    })
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] for positive arguments.
pub(crate) fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Score plus partial derivatives with respect to the latent vector and to
/// the prototype's flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityGrad {
    pub value: f64,
    pub grad_z: Vec<f64>,
    pub grad_params: Vec<f64>,
}

pub(crate) fn euclidean_grad(z: &[f64], p: &[f64], eps: f64) -> Result<SimilarityGrad> {
    let (value, grad_z) = l2_grad(z, p, eps)?;
    let grad_params = grad_z.iter().map(|g| -g).collect();
    Ok(SimilarityGrad {
        value,
        grad_z,
        grad_params,
    })
}

pub(crate) fn cosine_grad_full(z: &[f64], p: &[f64]) -> Result<SimilarityGrad> {
    let (value, grad_z, grad_params) = cosine_grad(z, p)?;
    Ok(SimilarityGrad {
        value,
        grad_z,
        grad_params,
    })
}

fn scaled_dot_grad(z: &[f64], p: &[f64]) -> Result<SimilarityGrad> {
    let value = scaled_dot_similarity(z, p)?;
    let s = 1.0 / (z.len() as f64).sqrt();
    Ok(SimilarityGrad {
        value,
        grad_z: p.iter().map(|v| v * s).collect(),
        grad_params: z.iter().map(|v| v * s).collect(),
    })
}

pub(crate) fn dispatch_grad(p: &super::Prototype, z: &[f64]) -> Result<SimilarityGrad> {
    use super::Prototype as P;
    match p {
        P::Euclidean { point, eps } => euclidean_grad(z, point, *eps),
        P::Cosine(point) => cosine_grad_full(z, point),
        P::ScaledDot(point) => scaled_dot_grad(z, point),
        P::Gaussian(g) => gaussian_grad(z, g),
        P::HyperPg(h) => hyperpg_grad(z, h),
        P::Vmf(v) => vmf_grad(z, v),
        P::FisherBingham(fb) => fb_grad(z, fb),
        P::Mixture(m) => mixture_grad(z, m),
    }
}
