//! Encoder neck, prototype layer and linear head.
//!
//! All learnable values live in plain vectors and can be viewed as one flat
//! parameter vector in the order neck (`w1`, `b1`, `w2`, `b2`), prototype
//! bank (prototype by prototype, patch part by part), head (`weights`,
//! `bias`). Gradients, optimizer state and checkpoints use the same order.

mod checkpoint;
mod forward;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::geometry::{
    norm, FisherBingham, Formulation, GaussianProto, HyperPg, MixtureHyperPg, PdfFamily, Prototype,
    VmfProto, DEFAULT_L2_EPS,
};

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
};
pub use forward::{
    batch_loss, batch_loss_and_grad, batch_loss_with, forward, head_forward, min_decision_margin,
    neck_forward, predict, prototype_layer_forward, Forward, LatentMap, LayerOutput, LossBreakdown,
    SimilarityTensor,
};

/// HyperPG family used by the mixture formulation's components.
pub const MIXTURE_FAMILY: PdfFamily = PdfFamily::TruncGaussian;

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub formulation: Formulation,
    pub classes: usize,
    /// Prototypes per class (Q).
    pub per_class: usize,
    /// Prototype dimensionality (D).
    pub dim: usize,
    pub d_in: usize,
    pub d_hidden: usize,
    /// Epsilon of the L2 similarity.
    pub eps: f64,
    /// Components per mixture prototype.
    pub mixture_components: usize,
    /// Latent grid `(width, height)`.
    pub zeta: (usize, usize),
    /// Side of the square patch a prototype covers; above 1 only for the
    /// Euclidean and cosine formulations.
    pub patch: usize,
}

impl ModelConfig {
    /// Defaults: 10 prototypes per class, D = 128, hidden width `d_in / 2`.
    pub fn new(formulation: Formulation, classes: usize, d_in: usize) -> Self {
        ModelConfig {
            formulation,
            classes,
            per_class: 10,
            dim: 128,
            d_in,
            d_hidden: (d_in / 2).max(1),
            eps: DEFAULT_L2_EPS,
            mixture_components: 2,
            zeta: (1, 1),
            patch: 1,
        }
    }

    pub fn prototypes(&self) -> usize {
        self.classes * self.per_class
    }

    pub fn cells(&self) -> usize {
        self.zeta.0 * self.zeta.1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Configuration(m));
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.per_class == 0 || self.dim == 0 || self.d_in == 0 || self.d_hidden == 0 {
            return bad("prototype count and layer widths must be positive".into());
        }
        if self.zeta.0 == 0 || self.zeta.1 == 0 {
            return bad("latent grid must be at least 1x1".into());
        }
        if self.patch == 0 || self.patch > self.zeta.0.min(self.zeta.1) {
            return bad(format!(
                "patch size {} does not fit the {}x{} grid",
                self.patch, self.zeta.0, self.zeta.1
            ));
        }
        if self.patch > 1
            && !matches!(
                self.formulation,
                Formulation::Euclidean | Formulation::Cosine
            )
        {
            return Err(Error::Unsupported {
                got: format!("{} with patch {}", self.formulation, self.patch),
                supported: "euclidean, cosine".into(),
            });
        }
        if self.formulation == Formulation::FisherBingham && self.dim < 2 {
            return bad("the fb formulation needs dim >= 2".into());
        }
        if self.formulation == Formulation::Mixture && self.mixture_components == 0 {
            return bad("a mixture needs at least one component".into());
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        Ok(())
    }
}

/// Two per-cell affine maps, ReLU then sigmoid. `w1` is `d_in x d_hidden`
/// and `w2` is `d_hidden x dim`, both row-major, so the hidden unit `h` of a
/// cell `x` is `relu(sum_i x[i] * w1[i * d_hidden + h] + b1[h])`.
#[derive(Debug, Clone, PartialEq)]
pub struct NeckParams {
    pub d_in: usize,
    pub d_hidden: usize,
    pub dim: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl NeckParams {
    pub fn zeros(d_in: usize, d_hidden: usize, dim: usize) -> Self {
        NeckParams {
            d_in,
            d_hidden,
            dim,
            w1: vec![0.0; d_in * d_hidden],
            b1: vec![0.0; d_hidden],
            w2: vec![0.0; d_hidden * dim],
            b2: vec![0.0; dim],
        }
    }

    /// Fan-in scaled uniform weights, zero biases.
    pub fn kaiming_uniform(d_in: usize, d_hidden: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let mut n = NeckParams::zeros(d_in, d_hidden, dim);
        let b1 = (6.0 / d_in as f64).sqrt();
        n.w1.iter_mut().for_each(|w| *w = rng.random_range(-b1..b1));
        let b2 = (6.0 / d_hidden as f64).sqrt();
        n.w2.iter_mut().for_each(|w| *w = rng.random_range(-b2..b2));
        n
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    fn write(&self, out: &mut Vec<f64>) {
        for part in [&self.w1, &self.b1, &self.w2, &self.b2] {
            out.extend_from_slice(part);
        }
    }

    fn read(&mut self, src: &[f64]) {
        let mut at = 0;
        for part in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2] {
            let n = part.len();
            part.copy_from_slice(&src[at..at + n]);
            at += n;
        }
    }

    fn param_name(&self, i: usize) -> String {
        let (n1, nb1, n2) = (self.w1.len(), self.b1.len(), self.w2.len());
        if i < n1 {
            format!("neck.w1[{}][{}]", i / self.d_hidden, i % self.d_hidden)
        } else if i < n1 + nb1 {
            format!("neck.b1[{}]", i - n1)
        } else if i < n1 + nb1 + n2 {
            let j = i - n1 - nb1;
            format!("neck.w2[{}][{}]", j / self.dim, j % self.dim)
        } else {
            format!("neck.b2[{}]", i - n1 - nb1 - n2)
        }
    }
}

/// Class-exclusive prototypes sharing one formulation. Prototype `k` belongs
/// to class `k / per_class` and owns `patch * patch` consecutive parts, one
/// per patch offset `(dx, dy)` at index `dx * patch + dy`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    pub formulation: Formulation,
    pub classes: usize,
    pub per_class: usize,
    pub patch: usize,
    pub parts: Vec<Prototype>,
}

impl PrototypeBank {
    pub fn new(
        formulation: Formulation,
        classes: usize,
        per_class: usize,
        patch: usize,
        parts: Vec<Prototype>,
    ) -> Result<Self> {
        check_dim(
            "prototype bank parts",
            classes * per_class * patch * patch,
            parts.len(),
        )?;
        let dim = parts
            .first()
            .map(Prototype::dim)
            .ok_or(Error::EmptyDataset)?;
        for p in &parts {
            if !formulation.matches(p) {
                return Err(Error::Configuration(format!(
                    "bank of {formulation} prototypes contains a {} prototype",
                    Formulation::of(p)
                )));
            }
            check_dim("prototype dimensionality", dim, p.dim())?;
        }
        let len = parts[0].num_params();
        if parts.iter().any(|p| p.num_params() != len) {
            return Err(Error::Configuration(
                "prototypes in a bank must share their parameter layout".into(),
            ));
        }
        Ok(PrototypeBank {
            formulation,
            classes,
            per_class,
            patch,
            parts,
        })
    }

    /// Total prototype count `C * Q`.
    pub fn len(&self) -> usize {
        self.classes * self.per_class
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.parts[0].dim()
    }

    pub fn class_of(&self, k: usize) -> usize {
        k / self.per_class
    }

    pub fn proto_class(&self) -> Vec<usize> {
        (0..self.len()).map(|k| self.class_of(k)).collect()
    }

    /// Patch parts of prototype `k`.
    pub fn prototype(&self, k: usize) -> &[Prototype] {
        let pp = self.patch * self.patch;
        &self.parts[k * pp..(k + 1) * pp]
    }

    fn part_len(&self) -> usize {
        self.parts[0].num_params()
    }

    pub fn num_params(&self) -> usize {
        self.parts.len() * self.part_len()
    }
}

/// Linear classification head; `weights` is `classes x prototypes` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub classes: usize,
    pub prototypes: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Head {
    /// `+1` from each class's own prototypes, `-0.5` from all others.
    pub fn class_connections(classes: usize, per_class: usize) -> Self {
        let prototypes = classes * per_class;
        let weights = (0..classes * prototypes)
            .map(|i| {
                if (i % prototypes) / per_class == i / prototypes {
                    1.0
                } else {
                    -0.5
                }
            })
            .collect();
        Head {
            classes,
            prototypes,
            weights,
            bias: vec![0.0; classes],
        }
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Which parameter groups receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trainable {
    pub neck: bool,
    pub prototypes: bool,
    pub head: bool,
}

impl Trainable {
    pub const ALL: Trainable = Trainable {
        neck: true,
        prototypes: true,
        head: true,
    };
}

impl Default for Trainable {
    fn default() -> Self {
        Trainable::ALL
    }
}

/// The complete differentiable model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub neck: NeckParams,
    pub bank: PrototypeBank,
    pub head: Head,
}

fn unit_vector(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&v);
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn init_hyperpg(rng: &mut impl Rng, d: usize, family: PdfFamily) -> HyperPg {
    HyperPg::new(unit_vector(rng, d), 0.5, 0.3, family).expect("0.3 is above the sigma floor")
}

fn init_prototype(cfg: &ModelConfig, rng: &mut impl Rng) -> Prototype {
    let d = cfg.dim;
    match cfg.formulation {
        Formulation::Euclidean => Prototype::Euclidean {
            point: (0..d).map(|_| rng.random_range(0.0..1.0)).collect(),
            eps: cfg.eps,
        },
        Formulation::Cosine => Prototype::Cosine(unit_vector(rng, d)),
        Formulation::ScaledDot => Prototype::ScaledDot(unit_vector(rng, d)),
        Formulation::Gaussian => Prototype::Gaussian(GaussianProto {
            mean: (0..d).map(|_| rng.random_range(0.0..1.0)).collect(),
            log_var: vec![0.0; d],
        }),
        Formulation::HyperPg(family) => Prototype::HyperPg(init_hyperpg(rng, d, family)),
        Formulation::Vmf => Prototype::Vmf(VmfProto {
            anchor: unit_vector(rng, d),
            log_kappa: 0.0,
        }),
        Formulation::FisherBingham => {
            let mut fb = FisherBingham {
                dim: d,
                axes: (0..d * d).map(|_| rng.sample(StandardNormal)).collect(),
                log_kappa: 4f64.ln(),
                beta: vec![1.0 / (d - 1) as f64; d - 1],
            };
            fb.project();
            Prototype::FisherBingham(fb)
        }
        Formulation::Mixture => {
            let k = cfg.mixture_components;
            let comps = (0..k)
                .map(|_| init_hyperpg(rng, d, MIXTURE_FAMILY))
                .collect();
            Prototype::Mixture(
                MixtureHyperPg::new(comps, vec![0.0; k]).expect("component count checked"),
            )
        }
    }
}

impl ModelParams {
    /// Seeded initialization: fan-in scaled neck, formulation-specific
    /// prototypes, class-connection head.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let neck = NeckParams::kaiming_uniform(cfg.d_in, cfg.d_hidden, cfg.dim, &mut rng);
        let parts = (0..cfg.prototypes() * cfg.patch * cfg.patch)
            .map(|_| init_prototype(cfg, &mut rng))
            .collect();
        let bank = PrototypeBank::new(
            cfg.formulation,
            cfg.classes,
            cfg.per_class,
            cfg.patch,
            parts,
        )?;
        Ok(ModelParams {
            config: *cfg,
            neck,
            bank,
            head: Head::class_connections(cfg.classes, cfg.per_class),
        })
    }

    pub fn num_params(&self) -> usize {
        self.neck.num_params() + self.bank.num_params() + self.head.num_params()
    }

    /// Offset of the first prototype parameter in the flat vector.
    pub fn bank_offset(&self) -> usize {
        self.neck.num_params()
    }

    /// Offset of the first head parameter in the flat vector.
    pub fn head_offset(&self) -> usize {
        self.neck.num_params() + self.bank.num_params()
    }

    /// Offset of patch part `part` (an index into `bank.parts`).
    pub fn part_offset(&self, part: usize) -> usize {
        self.bank_offset() + part * self.bank.part_len()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.neck.write(&mut out);
        for p in &self.bank.parts {
            p.write_params(&mut out);
        }
        out.extend_from_slice(&self.head.weights);
        out.extend_from_slice(&self.head.bias);
        out
    }

    /// Inverse of [`flatten`](Self::flatten). No constraint projection is
    /// applied.
    pub fn unflatten(&mut self, src: &[f64]) -> Result<()> {
        check_dim("flat model parameters", self.num_params(), src.len())?;
        let nn = self.neck.num_params();
        self.neck.read(&src[..nn]);
        let len = self.bank.part_len();
        for (i, p) in self.bank.parts.iter_mut().enumerate() {
            p.set_params(&src[nn + i * len..nn + (i + 1) * len])?;
        }
        let h = self.head_offset();
        let nw = self.head.weights.len();
        self.head.weights.copy_from_slice(&src[h..h + nw]);
        self.head.bias.copy_from_slice(&src[h + nw..]);
        Ok(())
    }

    /// `true` where weight decay applies: everything except the
    /// distribution-shape scalars of the prototypes.
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut mask = vec![true; self.neck.num_params()];
        for p in &self.bank.parts {
            mask.extend(p.decay_mask());
        }
        mask.resize(self.num_params(), true);
        mask
    }

    pub fn trainable_mask(&self, t: Trainable) -> Vec<bool> {
        let mut mask = vec![t.neck; self.neck.num_params()];
        mask.resize(self.head_offset(), t.prototypes);
        mask.resize(self.num_params(), t.head);
        mask
    }

    /// Human-readable path of flat parameter `i`, e.g. `bank[3].anchor[0]`.
    pub fn param_path(&self, i: usize) -> String {
        let nn = self.neck.num_params();
        if i < nn {
            return self.neck.param_name(i);
        }
        let h = self.head_offset();
        if i < h {
            let len = self.bank.part_len();
            let part = (i - nn) / len;
            let pp = self.bank.patch * self.bank.patch;
            let name = self.bank.parts[part].param_name((i - nn) % len);
            return if pp == 1 {
                format!("bank[{part}].{name}")
            } else {
                format!("bank[{}].part[{}].{name}", part / pp, part % pp)
            };
        }
        let j = i - h;
        let nw = self.head.weights.len();
        if j < nw {
            format!(
                "head.weights[{}][{}]",
                j / self.head.prototypes,
                j % self.head.prototypes
            )
        } else {
            format!("head.bias[{}]", j - nw)
        }
    }

    /// Restores prototype constraints after an update.
    pub fn project(&mut self) {
        self.bank.parts.iter_mut().for_each(Prototype::project);
    }
}

#[cfg(test)]
mod tests;
