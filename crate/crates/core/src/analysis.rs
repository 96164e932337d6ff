//! Interpretability exports: nearest training patches, activation grids on
//! the sphere, learned HyperPG shapes and ablation sweeps.

use std::fmt::Write as _;

use serde::Serialize;

use crate::data::{EmbeddingDataset, SplitDataset};
use crate::error::{check_dim, Error, Result};
use crate::exec;
use crate::geometry::{dot, norm, Formulation, PdfFamily, Prototype};
use crate::model::{self, ModelParams};
use crate::training::{self, TrainConfig};

/// One latent patch and its similarity to a prototype.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PatchMatch {
    pub record: usize,
    pub x: usize,
    pub y: usize,
    pub similarity: f64,
}

/// The `k` training patches most similar to prototype `proto`, best first;
/// equal scores keep (record, cell) order. Returns every patch when fewer
/// than `k` exist.
pub fn nearest_patches(
    params: &ModelParams,
    data: &EmbeddingDataset,
    proto: usize,
    k: usize,
) -> Result<Vec<PatchMatch>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if k == 0 {
        return Err(Error::Configuration("k must be at least 1".into()));
    }
    if proto >= params.bank.len() {
        return Err(Error::Configuration(format!(
            "prototype {proto} out of range (bank has {})",
            params.bank.len()
        )));
    }
    let per_record = exec::map_range(data.len(), true, |i| -> Result<Vec<PatchMatch>> {
        let f = model::forward(params, &data.records[i].features)?;
        let maps = &f.layer.maps;
        Ok(maps
            .map(proto)
            .iter()
            .enumerate()
            .map(|(pos, &s)| PatchMatch {
                record: i,
                x: pos / maps.height,
                y: pos % maps.height,
                similarity: s,
            })
            .collect())
    });
    let mut all = Vec::new();
    for r in per_record {
        all.extend(r?);
    }
    // stable sort keeps enumeration order among equal scores
    all.sort_by(|a, b| b.similarity.total_cmp(&a.similarity));
    all.truncate(k);
    Ok(all)
}

pub fn patches_csv(matches: &[PatchMatch]) -> String {
    let mut out = String::from("rank,record,x,y,similarity\n");
    for (i, m) in matches.iter().enumerate() {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            i + 1,
            m.record,
            m.x,
            m.y,
            m.similarity
        );
    }
    out
}

/// One sample of a prototype's activation on the unit sphere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpherePoint {
    /// Degrees in `[-180, 180)`.
    pub lon: f64,
    /// Degrees in `[-90, 90]`.
    pub lat: f64,
    pub v: [f64; 3],
    pub value: f64,
}

/// A longitude/latitude lattice of similarity values on S².
#[derive(Debug, Clone, PartialEq)]
pub struct SphereGrid {
    pub n_lat: usize,
    pub n_lon: usize,
    /// Row-major by latitude (south to north), then longitude.
    pub points: Vec<SpherePoint>,
}

fn rendering_tags() -> String {
    Formulation::ALL
        .into_iter()
        .filter(|f| f.is_hyperspherical())
        .map(|f| f.tag())
        .collect::<Vec<_>>()
        .join(", ")
}

fn unit_from_degrees(lon: f64, lat: f64) -> [f64; 3] {
    let (lo, la) = (lon.to_radians(), lat.to_radians());
    [la.cos() * lo.cos(), la.cos() * lo.sin(), la.sin()]
}

/// Evaluates a three-dimensional hyperspherical prototype on an
/// `n_lat x n_lon` lattice. Latitudes run from -90 to 90 inclusive,
/// longitudes from -180 in steps of `360 / n_lon`.
pub fn sphere_activation_grid(p: &Prototype, n_lat: usize, n_lon: usize) -> Result<SphereGrid> {
    if !p.is_hyperspherical() {
        return Err(Error::Unsupported {
            got: Formulation::of(p).tag().into(),
            supported: rendering_tags(),
        });
    }
    if p.dim() != 3 {
        return Err(Error::Configuration(format!(
            "sphere rendering needs dim 3, got {}; use a cosine profile instead",
            p.dim()
        )));
    }
    if n_lat < 2 || n_lon < 1 {
        return Err(Error::Configuration(format!(
            "grid resolution {n_lat}x{n_lon} is too small"
        )));
    }
    let rows = exec::map_range(n_lat, true, |i| -> Result<Vec<SpherePoint>> {
        let lat = -90.0 + 180.0 * i as f64 / (n_lat - 1) as f64;
        (0..n_lon)
            .map(|j| {
                let lon = -180.0 + 360.0 * j as f64 / n_lon as f64;
                let v = unit_from_degrees(lon, lat);
                Ok(SpherePoint {
                    lon,
                    lat,
                    v,
                    value: p.similarity(&v)?,
                })
            })
            .collect()
    });
    let mut points = Vec::with_capacity(n_lat * n_lon);
    for r in rows {
        points.extend(r?);
    }
    Ok(SphereGrid {
        n_lat,
        n_lon,
        points,
    })
}

impl SphereGrid {
    /// The first point with the largest value.
    pub fn argmax(&self) -> &SpherePoint {
        let mut best = &self.points[0];
        for p in &self.points {
            if p.value > best.value {
                best = p;
            }
        }
        best
    }

    pub fn max_value(&self) -> f64 {
        self.argmax().value
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("lon,lat,value\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{},{}", p.lon, p.lat, p.value);
        }
        out
    }

    /// Equirectangular heatmap, north up.
    pub fn to_svg(&self, cell_px: usize) -> String {
        let (lo, hi) = self
            .points
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| {
                (a.min(p.value), b.max(p.value))
            });
        let span = if hi > lo { hi - lo } else { 1.0 };
        let (w, h) = (self.n_lon * cell_px, self.n_lat * cell_px);
        let mut out = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
        );
        for (idx, p) in self.points.iter().enumerate() {
            let (i, j) = (idx / self.n_lon, idx % self.n_lon);
            let t = (p.value - lo) / span;
            let (r, g, b) = heat(t);
            let _ = writeln!(
                out,
                "<rect x=\"{}\" y=\"{}\" width=\"{cell_px}\" height=\"{cell_px}\" fill=\"#{r:02x}{g:02x}{b:02x}\"/>",
                j * cell_px,
                (self.n_lat - 1 - i) * cell_px,
            );
        }
        out.push_str("</svg>\n");
        out
    }
}

/// Dark blue through teal to yellow.
fn heat(t: f64) -> (u8, u8, u8) {
    let stops = [
        (0.0, [68.0, 1.0, 84.0]),
        (0.5, [33.0, 145.0, 140.0]),
        (1.0, [253.0, 231.0, 37.0]),
    ];
    let t = t.clamp(0.0, 1.0);
    let (a, b) = if t <= 0.5 {
        (stops[0], stops[1])
    } else {
        (stops[1], stops[2])
    };
    let u = (t - a.0) / (b.0 - a.0);
    let c = |k: usize| (a.1[k] + u * (b.1[k] - a.1[k])).round() as u8;
    (c(0), c(1), c(2))
}

/// Direction a prototype's activation is symmetric around, when it has one.
pub fn reference_direction(p: &Prototype) -> Option<Vec<f64>> {
    match p {
        Prototype::Cosine(a) => Some(a.clone()),
        Prototype::HyperPg(h) => Some(h.anchor.clone()),
        Prototype::Vmf(v) => Some(v.anchor.clone()),
        Prototype::FisherBingham(fb) => Some(fb.axis(0).to_vec()),
        Prototype::Mixture(m) => Some(m.components[0].anchor.clone()),
        _ => None,
    }
}

/// Similarity along a great circle through the reference direction, as
/// `(cosine, value)` pairs for `samples` cosines evenly spaced in `[-1, 1]`.
/// Works in any dimension >= 2.
pub fn cosine_profile(p: &Prototype, samples: usize) -> Result<Vec<(f64, f64)>> {
    let a = reference_direction(p).ok_or_else(|| Error::Unsupported {
        got: Formulation::of(p).tag().into(),
        supported: rendering_tags(),
    })?;
    let d = a.len();
    if d < 2 || samples < 2 {
        return Err(Error::Configuration(
            "cosine profile needs dim >= 2 and 2 samples".into(),
        ));
    }
    let na = norm(&a);
    let a: Vec<f64> = a.iter().map(|x| x / na).collect();
    // an orthogonal direction: the basis vector least aligned with a
    let e = (0..d)
        .min_by(|&i, &j| a[i].abs().total_cmp(&a[j].abs()))
        .expect("d >= 2");
    let mut u: Vec<f64> = a.iter().map(|x| -a[e] * x).collect();
    u[e] += 1.0;
    let nu = norm(&u);
    u.iter_mut().for_each(|x| *x /= nu);
    (0..samples)
        .map(|i| {
            let c = -1.0 + 2.0 * i as f64 / (samples - 1) as f64;
            let s = (1.0 - c * c).max(0.0).sqrt();
            let v: Vec<f64> = a.iter().zip(&u).map(|(x, y)| c * x + s * y).collect();
            debug_assert!((dot(&v, &v) - 1.0).abs() < 1e-9);
            Ok((c, p.similarity(&v)?))
        })
        .collect()
}

pub fn profile_csv(profile: &[(f64, f64)]) -> String {
    let mut out = String::from("cos,value\n");
    for (c, v) in profile {
        let _ = writeln!(out, "{c},{v}");
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScatterRow {
    pub proto_id: usize,
    pub mu: f64,
    pub sigma: f64,
}

/// Learned `(mu, sigma)` of every prototype in a HyperPG bank.
pub fn param_scatter(params: &ModelParams) -> Result<Vec<ScatterRow>> {
    if !matches!(params.bank.formulation, Formulation::HyperPg(_)) {
        return Err(Error::Unsupported {
            got: params.bank.formulation.tag().into(),
            supported: PdfFamily::ALL
                .map(|f| Formulation::HyperPg(f).tag())
                .join(", "),
        });
    }
    Ok(params
        .bank
        .parts
        .iter()
        .enumerate()
        .filter_map(|(k, p)| {
            p.hyperpg_shape().map(|(mu, sigma)| ScatterRow {
                proto_id: k,
                mu,
                sigma,
            })
        })
        .collect())
}

pub fn scatter_csv(rows: &[ScatterRow]) -> String {
    let mut out = String::from("proto_id,mu,sigma\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.proto_id, r.mu, r.sigma);
    }
    out
}

/// Hyperparameter varied by a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SweepAxis {
    /// Prototypes per class (Q).
    PerClass,
    /// Prototype dimensionality (D).
    Dim,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::PerClass => "q",
            SweepAxis::Dim => "dim",
        }
    }

    fn apply(self, cfg: &mut TrainConfig, value: usize) {
        match self {
            SweepAxis::PerClass => cfg.per_class = value,
            SweepAxis::Dim => cfg.dim = value,
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "q" => Ok(SweepAxis::PerClass),
            "dim" => Ok(SweepAxis::Dim),
            _ => Err(Error::Configuration(format!(
                "unknown sweep axis `{s}` (valid: q, dim)"
            ))),
        }
    }
}

/// Final test accuracy of one run; NaN when the run diverged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRun {
    pub formulation: Formulation,
    pub axis_value: usize,
    pub seed: u64,
    pub test_acc: f64,
}

/// Mean and standard deviation over seeds for one (formulation, value).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepCell {
    pub formulation: Formulation,
    pub axis_value: usize,
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub runs: Vec<SweepRun>,
}

impl SweepResult {
    /// `formulation,axis_value,seed,test_acc`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("formulation,axis_value,seed,test_acc\n");
        for r in &self.runs {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                r.formulation, r.axis_value, r.seed, r.test_acc
            );
        }
        out
    }

    /// One cell per (formulation, value) in first-seen order. Diverged runs
    /// make the mean NaN.
    pub fn aggregate(&self) -> Vec<SweepCell> {
        let mut keys: Vec<(Formulation, usize)> = Vec::new();
        for r in &self.runs {
            if !keys.contains(&(r.formulation, r.axis_value)) {
                keys.push((r.formulation, r.axis_value));
            }
        }
        keys.into_iter()
            .map(|(f, v)| {
                let acc: Vec<f64> = self
                    .runs
                    .iter()
                    .filter(|r| r.formulation == f && r.axis_value == v)
                    .map(|r| r.test_acc)
                    .collect();
                let n = acc.len() as f64;
                let mean = acc.iter().sum::<f64>() / n;
                let var = acc.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
                SweepCell {
                    formulation: f,
                    axis_value: v,
                    mean,
                    std: var.sqrt(),
                    runs: acc.len(),
                }
            })
            .collect()
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("formulation,axis_value,mean_test_acc,std_test_acc,runs\n");
        for c in self.aggregate() {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                c.formulation, c.axis_value, c.mean, c.std, c.runs
            );
        }
        out
    }

    /// Largest minus smallest mean accuracy of `f` across axis values.
    pub fn spread(&self, f: Formulation) -> f64 {
        let means: Vec<f64> = self
            .aggregate()
            .into_iter()
            .filter(|c| c.formulation == f)
            .map(|c| c.mean)
            .collect();
        if means.iter().any(|m| m.is_nan()) {
            return f64::NAN;
        }
        let hi = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lo = means.iter().cloned().fold(f64::INFINITY, f64::min);
        hi - lo
    }
}

/// Trains one model per (formulation, axis value, seed). Runs are
/// independent and may execute in parallel; results come back in
/// formulation, value, seed order. Diverged runs are recorded as NaN.
pub fn run_sweep(
    data: &SplitDataset,
    axis: SweepAxis,
    values: &[usize],
    formulations: &[Formulation],
    base: &TrainConfig,
    seeds: &[u64],
    parallel: bool,
) -> Result<SweepResult> {
    if values.is_empty() || seeds.is_empty() || formulations.is_empty() {
        return Err(Error::Configuration(
            "a sweep needs at least one value, formulation and seed".into(),
        ));
    }
    let mut jobs = Vec::new();
    for &f in formulations {
        for &v in values {
            for &s in seeds {
                jobs.push((f, v, s));
            }
        }
    }
    let runs = exec::map_ordered(&jobs, parallel, |&(f, v, s)| -> Result<SweepRun> {
        let mut cfg = TrainConfig {
            formulation: f,
            seed: s,
            ..*base
        };
        axis.apply(&mut cfg, v);
        let test_acc = match training::train(data, &cfg) {
            Ok((report, _)) => report.final_test_acc(),
            Err(Error::Divergence { .. } | Error::NumericalFailure { .. }) => f64::NAN,
            Err(e) => return Err(e),
        };
        Ok(SweepRun {
            formulation: f,
            axis_value: v,
            seed: s,
            test_acc,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    check_dim("sweep runs", jobs.len(), runs.len())?;
    Ok(SweepResult { axis, runs })
}
