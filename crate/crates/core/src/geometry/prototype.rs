use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

use super::density::PdfFamily;
use super::measures::{self, dot, norm, softplus, softplus_inv, SimilarityGrad};

/// Lower bound added to `softplus(raw_sigma)`.
pub const SIGMA_FLOOR: f64 = 1e-3;

/// Largest distance, in units of sigma, that the location of a truncated
/// HyperPG density may sit outside `[-1, 1]` after projection. Keeps the
/// truncation mass far above the degeneracy threshold.
pub const MAX_TRUNC_OFFSET: f64 = 30.0;

/// Diagonal Gaussian prototype.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianProto {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

/// Anchor direction plus a one-dimensional density over the cosine to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperPg {
    pub anchor: Vec<f64>,
    pub mu: f64,
    pub raw_sigma: f64,
    pub family: PdfFamily,
}

impl HyperPg {
    pub fn new(anchor: Vec<f64>, mu: f64, sigma: f64, family: PdfFamily) -> Result<Self> {
        if !(sigma > SIGMA_FLOOR) {
            return Err(Error::InvalidPrototype(format!(
                "sigma must exceed the floor {SIGMA_FLOOR}, got {sigma}"
            )));
        }
        if !(norm(&anchor) > 0.0) {
            return Err(Error::InvalidPrototype("anchor must be nonzero".into()));
        }
        Ok(HyperPg {
            anchor,
            mu,
            raw_sigma: softplus_inv(sigma - SIGMA_FLOOR),
            family,
        })
    }

    /// Effective standard deviation (or scale, for the Cauchy families).
    pub fn sigma(&self) -> f64 {
        softplus(self.raw_sigma) + SIGMA_FLOOR
    }

    /// Pulls `mu` back to within [`MAX_TRUNC_OFFSET`] sigmas of `[-1, 1]`
    /// for truncated families.
    pub fn project(&mut self) {
        if self.family.is_truncated() {
            let limit = 1.0 + MAX_TRUNC_OFFSET * self.sigma();
            self.mu = self.mu.clamp(-limit, limit);
        }
    }
}

/// Unnormalized von Mises-Fisher prototype.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmfProto {
    pub anchor: Vec<f64>,
    pub log_kappa: f64,
}

impl VmfProto {
    pub fn kappa(&self) -> f64 {
        self.log_kappa.exp()
    }
}

/// Unnormalized Fisher-Bingham prototype over an orthonormal frame.
///
/// `axes` stores the frame row by row: axis `j` occupies
/// `axes[j * dim..(j + 1) * dim]`. Axis 0 is the mean direction; the
/// ellipticity factor `beta[j - 1]` belongs to axis `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherBingham {
    pub dim: usize,
    pub axes: Vec<f64>,
    pub log_kappa: f64,
    pub beta: Vec<f64>,
}

impl FisherBingham {
    /// Builds a prototype and checks every constraint.
    pub fn new(dim: usize, axes: Vec<f64>, kappa: f64, beta: Vec<f64>) -> Result<Self> {
        if !(kappa > 0.0) {
            return Err(Error::InvalidPrototype(format!(
                "kappa must be positive, got {kappa}"
            )));
        }
        let fb = FisherBingham {
            dim,
            axes,
            log_kappa: kappa.ln(),
            beta,
        };
        fb.validate()?;
        Ok(fb)
    }

    pub fn kappa(&self) -> f64 {
        self.log_kappa.exp()
    }

    pub fn axis(&self, j: usize) -> &[f64] {
        &self.axes[j * self.dim..(j + 1) * self.dim]
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim;
        if d < 2 {
            return Err(Error::InvalidPrototype(
                "Fisher-Bingham needs D >= 2".into(),
            ));
        }
        if self.axes.len() != d * d || self.beta.len() != d - 1 {
            return Err(Error::InvalidPrototype(format!(
                "expected {} axis entries and {} betas, got {} and {}",
                d * d,
                d - 1,
                self.axes.len(),
                self.beta.len()
            )));
        }
        for i in 0..d {
            for j in i..d {
                let target = if i == j { 1.0 } else { 0.0 };
                let g = dot(self.axis(i), self.axis(j));
                if (g - target).abs() > FB_ORTHO_TOL {
                    return Err(Error::InvalidPrototype(format!(
                        "axes {i} and {j} are not orthonormal (dot = {g})"
                    )));
                }
            }
        }
        let sum: f64 = self.beta.iter().sum();
        if (sum - 1.0).abs() > measures::FB_TOLERANCE {
            return Err(Error::InvalidPrototype(format!(
                "betas sum to {sum}, expected 1"
            )));
        }
        let kappa = self.kappa();
        if let Some(b) = self.beta.iter().find(|b| !(2.0 * b.abs() < kappa)) {
            return Err(Error::InvalidPrototype(format!(
                "beta {b} violates 2|beta| < kappa = {kappa}"
            )));
        }
        Ok(())
    }

    /// Restores the constraints after an unconstrained update:
    /// Gram-Schmidt on the frame, then the Euclidean projection of `beta`
    /// onto `{sum = 1, |beta_j| <= kappa / 2}`.
    pub fn project(&mut self) {
        let d = self.dim;
        for j in 0..d {
            let (head, tail) = self.axes.split_at_mut(j * d);
            let row = &mut tail[..d];
            if !orthonormalize_against(row, head, d) {
                // collapsed axis: replace it with the first basis vector that
                // is independent of the previous axes
                for k in 0..d {
                    row.iter_mut().for_each(|x| *x = 0.0);
                    row[k] = 1.0;
                    if orthonormalize_against(row, head, d) {
                        break;
                    }
                }
            }
        }

        let m = (d - 1) as f64;
        let min_kappa = 2.0 / m * (1.0 + 1e-3);
        if self.kappa() < min_kappa {
            self.log_kappa = min_kappa.ln();
        }
        let cap = 0.5 * self.kappa() * (1.0 - 1e-9);
        let clipped_sum = |t: f64, beta: &[f64]| -> f64 {
            beta.iter().map(|b| (b + t).clamp(-cap, cap)).sum::<f64>()
        };
        let lo_b = self.beta.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi_b = self.beta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let (mut lo, mut hi) = (-cap - hi_b - 1.0, cap - lo_b + 1.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if clipped_sum(mid, &self.beta) < 1.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let t = 0.5 * (lo + hi);
        for b in &mut self.beta {
            *b = (*b + t).clamp(-cap, cap);
        }
        // absorb the last rounding residue into the least constrained entry
        let residue = 1.0 - self.beta.iter().sum::<f64>();
        if let Some(b) = self
            .beta
            .iter_mut()
            .min_by(|a, b| a.abs().total_cmp(&b.abs()))
        {
            *b += residue;
        }
    }
}

const FB_ORTHO_TOL: f64 = 1e-8;

/// Modified Gram-Schmidt of `row` against the `dim`-wide rows in `prev`;
/// returns `false` if nothing independent is left.
fn orthonormalize_against(row: &mut [f64], prev: &[f64], dim: usize) -> bool {
    for p in prev.chunks_exact(dim) {
        let c = dot(p, row);
        for (x, q) in row.iter_mut().zip(p) {
            *x -= c * q;
        }
    }
    let n = norm(row);
    if n > 1e-9 {
        row.iter_mut().for_each(|x| *x /= n);
        true
    } else {
        false
    }
}

/// Mixture of HyperPG components with softmax weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureHyperPg {
    pub components: Vec<HyperPg>,
    pub logits: Vec<f64>,
}

impl MixtureHyperPg {
    pub fn new(components: Vec<HyperPg>, logits: Vec<f64>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidPrototype(
                "mixture needs K >= 1 components".into(),
            ));
        }
        check_dim("mixture logits", components.len(), logits.len())?;
        let d = components[0].anchor.len();
        for c in &components {
            check_dim("mixture component", d, c.anchor.len())?;
        }
        Ok(MixtureHyperPg { components, logits })
    }

    /// `softmax(logits)`.
    pub fn weights(&self) -> Vec<f64> {
        let m = self
            .logits
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = self.logits.iter().map(|l| (l - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }
}

/// One prototype, tagged by formulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Prototype {
    Euclidean { point: Vec<f64>, eps: f64 },
    Cosine(Vec<f64>),
    ScaledDot(Vec<f64>),
    Gaussian(GaussianProto),
    HyperPg(HyperPg),
    Vmf(VmfProto),
    FisherBingham(FisherBingham),
    Mixture(MixtureHyperPg),
}

impl Prototype {
    /// Dimensionality of the latent vectors this prototype compares against.
    pub fn dim(&self) -> usize {
        match self {
            Prototype::Euclidean { point, .. } => point.len(),
            Prototype::Cosine(p) | Prototype::ScaledDot(p) => p.len(),
            Prototype::Gaussian(g) => g.mean.len(),
            Prototype::HyperPg(h) => h.anchor.len(),
            Prototype::Vmf(v) => v.anchor.len(),
            Prototype::FisherBingham(fb) => fb.dim,
            Prototype::Mixture(m) => m.components[0].anchor.len(),
        }
    }

    /// Similarity score of `z` under this prototype. Gaussian, vMF and
    /// Fisher-Bingham prototypes report log-densities.
    pub fn similarity(&self, z: &[f64]) -> Result<f64> {
        match self {
            Prototype::Euclidean { point, eps } => measures::l2_similarity(z, point, *eps),
            Prototype::Cosine(p) => measures::cosine_similarity(z, p),
            Prototype::ScaledDot(p) => measures::scaled_dot_similarity(z, p),
            Prototype::Gaussian(g) => measures::gaussian_log_similarity(z, g),
            Prototype::HyperPg(h) => measures::hyperpg_similarity(z, h),
            Prototype::Vmf(v) => measures::vmf_log_similarity(z, v),
            // constraints are enforced on construction and after every update
            Prototype::FisherBingham(fb) => measures::fb_value(z, fb),
            Prototype::Mixture(m) => measures::mixture_similarity(z, m),
        }
    }

    pub fn num_params(&self) -> usize {
        let d = self.dim();
        match self {
            Prototype::Euclidean { .. } | Prototype::Cosine(_) | Prototype::ScaledDot(_) => d,
            Prototype::Gaussian(_) => 2 * d,
            Prototype::HyperPg(_) => d + 2,
            Prototype::Vmf(_) => d + 1,
            Prototype::FisherBingham(_) => d * d + d,
            Prototype::Mixture(m) => m.components.len() * (d + 3),
        }
    }

    /// Appends the learnable parameters in their canonical order.
    pub fn write_params(&self, out: &mut Vec<f64>) {
        match self {
            Prototype::Euclidean { point: p, .. }
            | Prototype::Cosine(p)
            | Prototype::ScaledDot(p) => out.extend_from_slice(p),
            Prototype::Gaussian(g) => {
                out.extend_from_slice(&g.mean);
                out.extend_from_slice(&g.log_var);
            }
            Prototype::HyperPg(h) => write_hyperpg(h, out),
            Prototype::Vmf(v) => {
                out.extend_from_slice(&v.anchor);
                out.push(v.log_kappa);
            }
            Prototype::FisherBingham(fb) => {
                out.extend_from_slice(&fb.axes);
                out.push(fb.log_kappa);
                out.extend_from_slice(&fb.beta);
            }
            Prototype::Mixture(m) => {
                m.components.iter().for_each(|c| write_hyperpg(c, out));
                out.extend_from_slice(&m.logits);
            }
        }
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.write_params(&mut out);
        out
    }

    /// Overwrites the learnable parameters from `src`, which must hold exactly
    /// [`num_params`](Self::num_params) values.
    pub fn set_params(&mut self, src: &[f64]) -> Result<()> {
        check_dim("prototype parameters", self.num_params(), src.len())?;
        let d = self.dim();
        match self {
            Prototype::Euclidean { point: p, .. }
            | Prototype::Cosine(p)
            | Prototype::ScaledDot(p) => p.copy_from_slice(src),
            Prototype::Gaussian(g) => {
                g.mean.copy_from_slice(&src[..d]);
                g.log_var.copy_from_slice(&src[d..]);
            }
            Prototype::HyperPg(h) => read_hyperpg(h, src),
            Prototype::Vmf(v) => {
                v.anchor.copy_from_slice(&src[..d]);
                v.log_kappa = src[d];
            }
            Prototype::FisherBingham(fb) => {
                fb.axes.copy_from_slice(&src[..d * d]);
                fb.log_kappa = src[d * d];
                fb.beta.copy_from_slice(&src[d * d + 1..]);
            }
            Prototype::Mixture(m) => {
                let k = m.components.len();
                for (i, c) in m.components.iter_mut().enumerate() {
                    read_hyperpg(c, &src[i * (d + 2)..(i + 1) * (d + 2)]);
                }
                m.logits.copy_from_slice(&src[k * (d + 2)..]);
            }
        }
        Ok(())
    }

    /// Per-parameter flag: `true` for direction/location vectors that take
    /// weight decay, `false` for distribution-shape scalars.
    pub fn decay_mask(&self) -> Vec<bool> {
        let d = self.dim();
        let mut mask = Vec::with_capacity(self.num_params());
        match self {
            Prototype::Euclidean { .. } | Prototype::Cosine(_) | Prototype::ScaledDot(_) => {
                mask.resize(d, true)
            }
            Prototype::Gaussian(_) => {
                mask.resize(d, true);
                mask.resize(2 * d, false);
            }
            Prototype::HyperPg(_) => {
                mask.resize(d, true);
                mask.resize(d + 2, false);
            }
            Prototype::Vmf(_) => {
                mask.resize(d, true);
                mask.push(false);
            }
            Prototype::FisherBingham(_) => {
                mask.resize(d * d, true);
                mask.resize(d * d + d, false);
            }
            Prototype::Mixture(m) => {
                for _ in &m.components {
                    mask.extend(std::iter::repeat_n(true, d));
                    mask.extend([false, false]);
                }
                mask.extend(std::iter::repeat_n(false, m.components.len()));
            }
        }
        mask
    }

    /// Name of the parameter at `offset` within this prototype's flat vector.
    pub fn param_name(&self, offset: usize) -> String {
        let d = self.dim();
        match self {
            Prototype::Euclidean { .. } | Prototype::Cosine(_) | Prototype::ScaledDot(_) => {
                format!("point[{offset}]")
            }
            Prototype::Gaussian(_) if offset < d => format!("mean[{offset}]"),
            Prototype::Gaussian(_) => format!("log_var[{}]", offset - d),
            Prototype::HyperPg(_) => hyperpg_param_name(d, offset),
            Prototype::Vmf(_) if offset < d => format!("anchor[{offset}]"),
            Prototype::Vmf(_) => "log_kappa".into(),
            Prototype::FisherBingham(_) if offset < d * d => {
                format!("axes[{}][{}]", offset / d, offset % d)
            }
            Prototype::FisherBingham(_) if offset == d * d => "log_kappa".into(),
            Prototype::FisherBingham(_) => format!("beta[{}]", offset - d * d - 1),
            Prototype::Mixture(m) => {
                let per = d + 2;
                if offset < m.components.len() * per {
                    format!(
                        "components[{}].{}",
                        offset / per,
                        hyperpg_param_name(d, offset % per)
                    )
                } else {
                    format!("logits[{}]", offset - m.components.len() * per)
                }
            }
        }
    }

    /// Restores parameter constraints after an optimizer step.
    pub fn project(&mut self) {
        match self {
            Prototype::FisherBingham(fb) => fb.project(),
            Prototype::HyperPg(h) => h.project(),
            Prototype::Mixture(m) => m.components.iter_mut().for_each(HyperPg::project),
            _ => {}
        }
    }

    /// Analytic gradient of [`similarity`](Self::similarity).
    pub fn gradient(&self, z: &[f64]) -> Result<SimilarityGrad> {
        check_dim("similarity_gradient", self.dim(), z.len())?;
        measures::dispatch_grad(self, z)
    }

    /// Learned `(mu, sigma)` of a HyperPG prototype.
    pub fn hyperpg_shape(&self) -> Option<(f64, f64)> {
        match self {
            Prototype::HyperPg(h) => Some((h.mu, h.sigma())),
            _ => None,
        }
    }

    /// Whether the score depends on `z` only through its direction.
    pub fn is_hyperspherical(&self) -> bool {
        matches!(
            self,
            Prototype::Cosine(_)
                | Prototype::HyperPg(_)
                | Prototype::Vmf(_)
                | Prototype::FisherBingham(_)
                | Prototype::Mixture(_)
        )
    }
}

fn write_hyperpg(h: &HyperPg, out: &mut Vec<f64>) {
    out.extend_from_slice(&h.anchor);
    out.push(h.mu);
    out.push(h.raw_sigma);
}

fn read_hyperpg(h: &mut HyperPg, src: &[f64]) {
    let d = h.anchor.len();
    h.anchor.copy_from_slice(&src[..d]);
    h.mu = src[d];
    h.raw_sigma = src[d + 1];
}

fn hyperpg_param_name(d: usize, offset: usize) -> String {
    match offset {
        o if o < d => format!("anchor[{o}]"),
        o if o == d => "mu".into(),
        _ => "raw_sigma".into(),
    }
}
