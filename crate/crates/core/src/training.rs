//! AdamW, the training loop and top-1 evaluation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{EmbeddingDataset, SplitDataset};
use crate::error::{Error, Result};
use crate::exec;
use crate::geometry::{Formulation, DEFAULT_L2_EPS};
use crate::losses::LossWeights;
use crate::model::{self, ModelConfig, ModelParams, Trainable};

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One AdamW update with bias correction and decoupled weight decay.
/// Entries with `trainable[i] == false` are left untouched; decay applies
/// where `decay[i]` is set. `path` names a parameter for error messages.
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    opt: &AdamW,
    decay: &[bool],
    trainable: &[bool],
    path: impl Fn(usize) -> String,
) -> Result<()> {
    let n = params.len();
    for (context, len) in [
        ("adamw grads", grads.len()),
        ("adamw first moment", state.m.len()),
        ("adamw second moment", state.v.len()),
        ("adamw decay mask", decay.len()),
        ("adamw trainable mask", trainable.len()),
    ] {
        crate::error::check_dim(context, n, len)?;
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NumericalFailure { path: path(i) });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - opt.beta1.powi(t);
    let c2 = 1.0 - opt.beta2.powi(t);
    for i in 0..n {
        if !trainable[i] {
            continue;
        }
        let g = grads[i];
        state.m[i] = opt.beta1 * state.m[i] + (1.0 - opt.beta1) * g;
        state.v[i] = opt.beta2 * state.v[i] + (1.0 - opt.beta2) * g * g;
        if decay[i] {
            params[i] *= 1.0 - opt.lr * opt.weight_decay;
        }
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= opt.lr * m_hat / (v_hat.sqrt() + opt.eps);
    }
    Ok(())
}

/// Everything that determines a training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub formulation: Formulation,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub weights: LossWeights,
    /// Prototypes per class (Q).
    pub per_class: usize,
    /// Prototype dimensionality (D).
    pub dim: usize,
    /// Hidden width of the neck; `None` means `d_in / 2`.
    pub d_hidden: Option<usize>,
    pub mixture_components: usize,
    pub patch: usize,
    pub eps: f64,
    pub trainable: Trainable,
    /// Fan per-sample work out over the thread pool.
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            formulation: Formulation::HyperPg(crate::geometry::PdfFamily::Gaussian),
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            batch_size: 48,
            epochs: 30,
            seed: 0,
            weights: LossWeights::default(),
            per_class: 10,
            dim: 128,
            d_hidden: None,
            mixture_components: 2,
            patch: 1,
            eps: DEFAULT_L2_EPS,
            trainable: Trainable::ALL,
            parallel: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Configuration(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            ));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        LossWeights::new(self.weights.lambda_clst, self.weights.lambda_sep)?;
        Ok(())
    }

    /// Model architecture for data of shape `meta`.
    pub fn model_config(&self, meta: &crate::data::DatasetMeta) -> ModelConfig {
        ModelConfig {
            formulation: self.formulation,
            classes: meta.classes,
            per_class: self.per_class,
            dim: self.dim,
            d_in: meta.d_in,
            d_hidden: self.d_hidden.unwrap_or((meta.d_in / 2).max(1)),
            eps: self.eps,
            mixture_components: self.mixture_components,
            zeta: (meta.width, meta.height),
            patch: self.patch,
        }
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW::new(self.learning_rate, self.weight_decay)
    }
}

/// Train-set loss components and test accuracy after one epoch; epoch 0 is
/// the untrained model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub ce: f64,
    pub clst: f64,
    pub sep: f64,
    pub total: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub config: TrainConfig,
    pub rows: Vec<EpochRow>,
    pub wall_time_secs: f64,
    /// FNV-1a over the bit patterns of the final flat parameters.
    pub checksum: String,
}

pub const REPORT_CSV_HEADER: &str = "epoch,ce,clst,sep,total,test_acc";

impl RunReport {
    pub fn final_test_acc(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.test_acc)
    }

    /// `epoch,ce,clst,sep,total,test_acc`, one row per epoch. Depends only
    /// on the configuration and data, never on timing.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.epoch, r.ce, r.clst, r.sep, r.total, r.test_acc
            );
        }
        out
    }

    pub fn summary_json(&self) -> String {
        let summary = serde_json::json!({
            "config": self.config,
            "epochs": self.rows.len().saturating_sub(1),
            "final_test_acc": self.final_test_acc(),
            "best_test_acc": self.rows.iter().map(|r| r.test_acc).fold(f64::NAN, f64::max),
            "final_total_loss": self.rows.last().map(|r| r.total),
            "wall_time_secs": self.wall_time_secs,
            "checksum": self.checksum,
        });
        serde_json::to_string_pretty(&summary).expect("summary is plain data")
    }

    /// Writes `report.csv`, `summary.json` and `model.ckpt` into `dir`.
    pub fn write_to(&self, dir: impl AsRef<Path>, params: &ModelParams) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.csv"), self.to_csv())?;
        fs::write(dir.join("summary.json"), self.summary_json())?;
        model::save_checkpoint(params, dir.join("model.ckpt"))
    }
}

pub fn params_checksum(params: &ModelParams) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in params.flatten() {
        for b in v.to_bits().to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}

/// Fraction of records whose predicted class (lowest index among tied
/// logits) equals the label.
pub fn evaluate_top1(params: &ModelParams, data: &EmbeddingDataset, parallel: bool) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let hits = exec::map_ordered(&data.records, parallel, |r| {
        model::predict(params, &r.features).map(|c| c == r.label as usize)
    })
    .into_iter()
    .collect::<Result<Vec<bool>>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}

fn epoch_row(
    params: &ModelParams,
    data: &SplitDataset,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochRow> {
    let loss = model::batch_loss_with(params, &data.train.records, &cfg.weights, cfg.parallel)?;
    if !loss.total.is_finite() {
        return Err(Error::Divergence { epoch });
    }
    Ok(EpochRow {
        epoch,
        ce: loss.ce,
        clst: loss.clst,
        sep: loss.sep,
        total: loss.total,
        test_acc: evaluate_top1(params, &data.test, cfg.parallel)?,
    })
}

/// Trains from scratch and reports per-epoch progress.
pub fn train(data: &SplitDataset, cfg: &TrainConfig) -> Result<(RunReport, ModelParams)> {
    train_with(data, cfg, |_| {})
}

/// [`train`] with a callback invoked after every epoch row is recorded.
pub fn train_with(
    data: &SplitDataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRow),
) -> Result<(RunReport, ModelParams)> {
    cfg.validate()?;
    let start = Instant::now();
    let mcfg = cfg.model_config(&data.meta());
    let mut params = ModelParams::init(&mcfg, cfg.seed)?;
    let decay = params.decay_mask();
    let trainable = params.trainable_mask(cfg.trainable);
    let opt = cfg.optimizer();
    let mut state = AdamState::new(params.num_params());
    let mut flat = params.flatten();

    let mut rows = Vec::with_capacity(cfg.epochs + 1);
    rows.push(epoch_row(&params, data, cfg, 0)?);
    on_epoch(&rows[0]);
    let mut order = data.train.records.clone();
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.clone_from(&data.train.records);
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let (loss, grad) = model::batch_loss_and_grad(
                &params,
                batch,
                &cfg.weights,
                cfg.trainable,
                cfg.parallel,
            )?;
            if !loss.total.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            adamw_step(
                &mut flat,
                &grad,
                &mut state,
                &opt,
                &decay,
                &trainable,
                |i| params.param_path(i),
            )?;
            params.unflatten(&flat)?;
            params.project();
            flat = params.flatten();
        }
        let row = epoch_row(&params, data, cfg, epoch)?;
        on_epoch(&row);
        rows.push(row);
    }
    let checksum = params_checksum(&params);
    Ok((
        RunReport {
            config: *cfg,
            rows,
            wall_time_secs: start.elapsed().as_secs_f64(),
            checksum,
        },
        params,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, DatasetMeta, Record, SyntheticSpec};

    #[test]
    fn zero_gradient_zero_decay_is_a_fixed_point() {
        let mut p = vec![0.3, -1.2];
        let mut s = AdamState::new(2);
        let opt = AdamW::new(0.1, 0.0);
        adamw_step(
            &mut p,
            &[0.0, 0.0],
            &mut s,
            &opt,
            &[true; 2],
            &[true; 2],
            |i| i.to_string(),
        )
        .unwrap();
        assert_eq!(p, vec![0.3, -1.2]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = vec![0.0];
        let mut s = AdamState::new(1);
        let opt = AdamW::new(0.1, 0.0);
        adamw_step(&mut p, &[1.0], &mut s, &opt, &[true], &[true], |i| {
            i.to_string()
        })
        .unwrap();
        // m_hat = 1, v_hat = 1
        assert!((p[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn decoupled_decay_only() {
        let mut p = vec![1.0, 1.0];
        let mut s = AdamState::new(2);
        let opt = AdamW::new(1.0, 0.01);
        adamw_step(
            &mut p,
            &[0.0, 0.0],
            &mut s,
            &opt,
            &[true, false],
            &[true; 2],
            |i| i.to_string(),
        )
        .unwrap();
        assert_eq!(p, vec![0.99, 1.0]);
    }

    #[test]
    fn frozen_entries_and_nan_gradients() {
        let mut p = vec![1.0, 1.0];
        let mut s = AdamState::new(2);
        let opt = AdamW::new(0.5, 0.1);
        adamw_step(
            &mut p,
            &[3.0, 3.0],
            &mut s,
            &opt,
            &[true; 2],
            &[false, true],
            |i| i.to_string(),
        )
        .unwrap();
        assert_eq!(p[0], 1.0);
        assert!(p[1] < 1.0);
        let err = adamw_step(
            &mut p,
            &[0.0, f64::NAN],
            &mut s,
            &opt,
            &[true; 2],
            &[true; 2],
            |i| format!("w{i}"),
        );
        assert!(matches!(err, Err(Error::NumericalFailure { path }) if path == "w1"));
    }

    fn toy_predictor_data(labels: &[u32]) -> EmbeddingDataset {
        let meta = DatasetMeta {
            classes: 2,
            width: 1,
            height: 1,
            d_in: 2,
        };
        let records = labels
            .iter()
            .map(|&l| Record {
                label: l,
                features: if l == 0 {
                    vec![1.0, 0.0]
                } else {
                    vec![0.0, 1.0]
                },
            })
            .collect();
        EmbeddingDataset::new(meta, records).unwrap()
    }

    fn identity_cosine_model() -> ModelParams {
        // (1, 0) maps close to (1, 0) and (0, 1) close to (0, 1)
        let cfg = ModelConfig {
            per_class: 1,
            dim: 2,
            d_hidden: 2,
            ..ModelConfig::new(Formulation::Cosine, 2, 2)
        };
        let mut p = ModelParams::init(&cfg, 0).unwrap();
        p.neck.w1 = vec![1.0, 0.0, 0.0, 1.0];
        p.neck.w2 = vec![8.0, -8.0, -8.0, 8.0];
        p.bank.parts = vec![
            crate::geometry::Prototype::Cosine(vec![1.0, 0.0]),
            crate::geometry::Prototype::Cosine(vec![0.0, 1.0]),
        ];
        p
    }

    #[test]
    fn top1_examples() {
        let p = identity_cosine_model();
        let d = toy_predictor_data(&[0, 1, 1, 0]);
        assert_eq!(evaluate_top1(&p, &d, false).unwrap(), 1.0);

        let mut constant = p.clone();
        constant.head.weights = vec![0.0; 4];
        assert_eq!(evaluate_top1(&constant, &d, true).unwrap(), 0.5);

        // three correct, one mislabeled
        let mut d = toy_predictor_data(&[0, 1, 1, 0]);
        d.records[3].label = 1;
        assert_eq!(evaluate_top1(&p, &d, false).unwrap(), 0.75);
    }

    fn small_blobs(seed: u64) -> SplitDataset {
        generate(&SyntheticSpec::blobs(2, 40, 6, seed)).unwrap()
    }

    fn small_cfg(f: Formulation) -> TrainConfig {
        TrainConfig {
            formulation: f,
            learning_rate: 1e-2,
            epochs: 3,
            per_class: 2,
            dim: 8,
            batch_size: 16,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_reports_initial_evaluation() {
        let cfg = TrainConfig {
            epochs: 0,
            ..small_cfg(Formulation::Cosine)
        };
        let (r, _) = train(&small_blobs(0), &cfg).unwrap();
        assert_eq!(r.rows.len(), 1);
        assert_eq!(r.rows[0].epoch, 0);
        assert_eq!(r.to_csv().lines().count(), 2);
    }

    #[test]
    fn identical_seeds_identical_reports() {
        let data = small_blobs(1);
        for f in [Formulation::Vmf, Formulation::FisherBingham] {
            let cfg = small_cfg(f);
            let (a, pa) = train(&data, &cfg).unwrap();
            let (b, pb) = train(
                &data,
                &TrainConfig {
                    parallel: false,
                    ..cfg
                },
            )
            .unwrap();
            assert_eq!(a.to_csv(), b.to_csv());
            assert_eq!(a.checksum, b.checksum);
            assert_eq!(pa, pb);
        }
    }

    #[test]
    fn separable_blobs_are_learned_by_every_formulation() {
        let data = small_blobs(2);
        for f in Formulation::ALL {
            let cfg = TrainConfig {
                epochs: 50,
                ..small_cfg(f)
            };
            let (r, _) = train(&data, &cfg).unwrap();
            assert!(r.final_test_acc() >= 0.99, "{f}: {}", r.final_test_acc());
        }
    }

    #[test]
    fn head_only_loss_decreases_on_average() {
        let data = small_blobs(3);
        let cfg = TrainConfig {
            epochs: 20,
            learning_rate: 1e-2,
            weight_decay: 0.0,
            trainable: Trainable {
                neck: false,
                prototypes: false,
                head: true,
            },
            ..small_cfg(Formulation::HyperPg(
                crate::geometry::PdfFamily::TruncGaussian,
            ))
        };
        let (r, _) = train(&data, &cfg).unwrap();
        let totals: Vec<f64> = r.rows.iter().map(|row| row.total).collect();
        let windows: Vec<f64> = totals
            .windows(5)
            .map(|w| w.iter().sum::<f64>() / 5.0)
            .collect();
        for w in windows.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{windows:?}");
        }
    }

    #[test]
    fn report_files_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let (r, p) = train(&small_blobs(4), &small_cfg(Formulation::Euclidean)).unwrap();
        r.write_to(dir.path(), &p).unwrap();
        let csv = fs::read_to_string(dir.path().join("report.csv")).unwrap();
        assert!(csv.starts_with(REPORT_CSV_HEADER));
        let back = model::load_checkpoint(dir.path().join("model.ckpt")).unwrap();
        assert_eq!(back, p);
        let json: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap())
                .unwrap();
        assert_eq!(
            json["checksum"],
            serde_json::Value::String(r.checksum.clone())
        );
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let data = small_blobs(0);
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(train(&data, &bad), Err(Error::Configuration(_))));
        let bad = TrainConfig {
            learning_rate: -1.0,
            ..TrainConfig::default()
        };
        assert!(train(&data, &bad).is_err());
    }
}
