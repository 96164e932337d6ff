use serde::Serialize;

use super::{Head, ModelParams, NeckParams, PrototypeBank, Trainable};
use crate::data::Record;
use crate::error::{check_dim, Error, Result};
use crate::exec;
use crate::geometry::sigmoid;
use crate::losses::{self, LossWeights};

/// Latent feature grid, stored cell by cell (`cell = x * height + y`), each
/// cell holding `dim` values.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentMap {
    pub width: usize,
    pub height: usize,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl LatentMap {
    pub fn new(width: usize, height: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Configuration(
                "latent grid must be at least 1x1".into(),
            ));
        }
        check_dim("latent map", width * height * dim, values.len())?;
        Ok(LatentMap {
            width,
            height,
            dim,
            values,
        })
    }

    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    pub fn cell(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }
}

/// Per-prototype similarity at every patch position, row-major
/// `prototypes x positions`; position `(x, y)` has index `x * height + y`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityTensor {
    pub prototypes: usize,
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl SimilarityTensor {
    pub fn positions(&self) -> usize {
        self.width * self.height
    }

    pub fn map(&self, k: usize) -> &[f64] {
        let n = self.positions();
        &self.values[k * n..(k + 1) * n]
    }

    pub fn get(&self, k: usize, x: usize, y: usize) -> f64 {
        self.map(k)[x * self.height + y]
    }
}

/// Output of the prototype layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerOutput {
    /// Max-pooled score per prototype.
    pub pooled: Vec<f64>,
    /// Position attaining each pooled score (first on ties).
    pub argmax: Vec<usize>,
    pub maps: SimilarityTensor,
}

/// Everything a forward pass computes for one record.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub latent: LatentMap,
    pub layer: LayerOutput,
    pub logits: Vec<f64>,
}

/// Batch-mean loss components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub clst: f64,
    pub sep: f64,
    pub total: f64,
}

struct NeckTrace {
    x: Vec<f64>,
    pre: Vec<f64>,
    latent: LatentMap,
}

fn neck_trace(features: &[f32], zeta: (usize, usize), p: &NeckParams) -> Result<NeckTrace> {
    let cells = zeta.0 * zeta.1;
    check_dim("neck input", cells * p.d_in, features.len())?;
    let x: Vec<f64> = features.iter().map(|&v| f64::from(v)).collect();
    let (dh, dim) = (p.d_hidden, p.dim);
    let mut pre = vec![0.0; cells * dh];
    let mut out = vec![0.0; cells * dim];
    let mut hidden = vec![0.0; dh];
    for c in 0..cells {
        let xc = &x[c * p.d_in..(c + 1) * p.d_in];
        let a1 = &mut pre[c * dh..(c + 1) * dh];
        a1.copy_from_slice(&p.b1);
        for (i, &xi) in xc.iter().enumerate() {
            let row = &p.w1[i * dh..(i + 1) * dh];
            a1.iter_mut().zip(row).for_each(|(a, w)| *a += xi * w);
        }
        hidden
            .iter_mut()
            .zip(a1.iter())
            .for_each(|(h, a)| *h = a.max(0.0));
        let a2 = &mut out[c * dim..(c + 1) * dim];
        a2.copy_from_slice(&p.b2);
        for (h, &hv) in hidden.iter().enumerate() {
            if hv != 0.0 {
                let row = &p.w2[h * dim..(h + 1) * dim];
                a2.iter_mut().zip(row).for_each(|(a, w)| *a += hv * w);
            }
        }
        a2.iter_mut().for_each(|a| *a = sigmoid(*a));
    }
    Ok(NeckTrace {
        x,
        pre,
        latent: LatentMap::new(zeta.0, zeta.1, dim, out)?,
    })
}

/// Per cell: `sigmoid(W2^T relu(W1^T x + b1) + b2)`.
pub fn neck_forward(features: &[f32], zeta: (usize, usize), p: &NeckParams) -> Result<LatentMap> {
    Ok(neck_trace(features, zeta, p)?.latent)
}

fn position_grid(z: &LatentMap, patch: usize) -> Result<(usize, usize)> {
    if patch == 0 || patch > z.width || patch > z.height {
        return Err(Error::Configuration(format!(
            "patch {patch} does not fit a {}x{} grid",
            z.width, z.height
        )));
    }
    Ok((z.width - patch + 1, z.height - patch + 1))
}

/// Latent cell covered by patch part `m` at position `pos`.
fn part_cell(z: &LatentMap, pos: usize, ph: usize, patch: usize, m: usize) -> usize {
    let (x, y) = (pos / ph, pos % ph);
    let (dx, dy) = (m / patch, m % patch);
    (x + dx) * z.height + (y + dy)
}

/// Similarity of every prototype at every patch position, followed by a
/// global max pool.
pub fn prototype_layer_forward(z: &LatentMap, bank: &PrototypeBank) -> Result<LayerOutput> {
    check_dim("prototype layer", bank.dim(), z.dim)?;
    let patch = bank.patch;
    let (pw, ph) = position_grid(z, patch)?;
    let positions = pw * ph;
    let n = bank.len();
    let mut values = Vec::with_capacity(n * positions);
    let mut pooled = Vec::with_capacity(n);
    let mut argmax = Vec::with_capacity(n);
    for k in 0..n {
        let parts = bank.prototype(k);
        let mut best = (0, f64::NEG_INFINITY);
        for pos in 0..positions {
            let mut s = 0.0;
            for (m, part) in parts.iter().enumerate() {
                s += part.similarity(z.cell(part_cell(z, pos, ph, patch, m)))?;
            }
            if s > best.1 || pos == 0 {
                best = (pos, s);
            }
            values.push(s);
        }
        argmax.push(best.0);
        pooled.push(best.1);
    }
    Ok(LayerOutput {
        pooled,
        argmax,
        maps: SimilarityTensor {
            prototypes: n,
            width: pw,
            height: ph,
            values,
        },
    })
}

/// `weights * scores + bias`.
pub fn head_forward(scores: &[f64], head: &Head) -> Result<Vec<f64>> {
    check_dim("head input", head.prototypes, scores.len())?;
    Ok((0..head.classes)
        .map(|c| {
            let row = &head.weights[c * head.prototypes..(c + 1) * head.prototypes];
            head.bias[c] + row.iter().zip(scores).map(|(w, s)| w * s).sum::<f64>()
        })
        .collect())
}

pub fn forward(params: &ModelParams, features: &[f32]) -> Result<Forward> {
    let latent = neck_forward(features, params.config.zeta, &params.neck)?;
    let layer = prototype_layer_forward(&latent, &params.bank)?;
    let logits = head_forward(&layer.pooled, &params.head)?;
    Ok(Forward {
        latent,
        layer,
        logits,
    })
}

/// Index of the largest value, lowest index on ties.
pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Predicted class (lowest index among tied logits).
pub fn predict(params: &ModelParams, features: &[f32]) -> Result<usize> {
    Ok(argmax(&forward(params, features)?.logits))
}

#[derive(Debug, Clone, Copy)]
struct Terms {
    ce: f64,
    clst: f64,
    sep: f64,
}

fn sample_terms(params: &ModelParams, rec: &Record) -> Result<Terms> {
    let f = forward(params, &rec.features)?;
    let y = rec.label as usize;
    let pc = params.bank.proto_class();
    Ok(Terms {
        ce: losses::cross_entropy(&f.logits, y)?,
        clst: -losses::cluster_term(&f.layer.pooled, &pc, y)?.1,
        sep: losses::separation_term(&f.layer.pooled, &pc, y)?.1,
    })
}

fn breakdown(terms: impl IntoIterator<Item = Terms>, n: usize, w: &LossWeights) -> LossBreakdown {
    let (mut ce, mut clst, mut sep) = (0.0, 0.0, 0.0);
    for t in terms {
        ce += t.ce;
        clst += t.clst;
        sep += t.sep;
    }
    let n = n as f64;
    let (ce, clst, sep) = (ce / n, clst / n, sep / n);
    LossBreakdown {
        ce,
        clst,
        sep,
        total: losses::total_loss(ce, clst, sep, w),
    }
}

/// Batch-mean loss of `records`.
pub fn batch_loss(
    params: &ModelParams,
    records: &[Record],
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    batch_loss_with(params, records, weights, true)
}

/// [`batch_loss`] with explicit control over parallel evaluation.
pub fn batch_loss_with(
    params: &ModelParams,
    records: &[Record],
    weights: &LossWeights,
    parallel: bool,
) -> Result<LossBreakdown> {
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let terms = exec::map_ordered(records, parallel, |r| sample_terms(params, r))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(breakdown(terms, records.len(), weights))
}

fn sample_grad(
    params: &ModelParams,
    rec: &Record,
    w: &LossWeights,
    t: Trainable,
) -> Result<(Terms, Vec<f64>)> {
    let cfg = &params.config;
    let trace = neck_trace(&rec.features, cfg.zeta, &params.neck)?;
    let z = &trace.latent;
    let bank = &params.bank;
    let layer = prototype_layer_forward(z, bank)?;
    let pooled = &layer.pooled;
    let logits = head_forward(pooled, &params.head)?;
    let y = rec.label as usize;
    let pc = bank.proto_class();
    let (ce, g_logits) = losses::cross_entropy_grad(&logits, y)?;
    let (ci, best_same) = losses::cluster_term(pooled, &pc, y)?;
    let (si, best_other) = losses::separation_term(pooled, &pc, y)?;
    let terms = Terms {
        ce,
        clst: -best_same,
        sep: best_other,
    };

    let mut grad = vec![0.0; params.num_params()];
    let head = &params.head;
    let np = head.prototypes;
    if t.head {
        let h0 = params.head_offset();
        for (c, g) in g_logits.iter().enumerate() {
            for (k, s) in pooled.iter().enumerate() {
                grad[h0 + c * np + k] = g * s;
            }
            grad[h0 + head.weights.len() + c] = *g;
        }
    }
    if !(t.prototypes || t.neck) {
        return Ok((terms, grad));
    }

    let mut g_pooled = vec![0.0; np];
    for (c, g) in g_logits.iter().enumerate() {
        let row = &head.weights[c * np..(c + 1) * np];
        g_pooled
            .iter_mut()
            .zip(row)
            .for_each(|(gp, wk)| *gp += g * wk);
    }
    g_pooled[ci] -= w.lambda_clst;
    g_pooled[si] += w.lambda_sep;

    let patch = bank.patch;
    let pp = patch * patch;
    let ph = layer.maps.height;
    let mut dz = if t.neck {
        vec![0.0; z.values.len()]
    } else {
        Vec::new()
    };
    for (k, &g) in g_pooled.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let pos = layer.argmax[k];
        for (m, part) in bank.prototype(k).iter().enumerate() {
            let cell = part_cell(z, pos, ph, patch, m);
            let sg = part.gradient(z.cell(cell))?;
            if t.prototypes {
                let off = params.part_offset(k * pp + m);
                for (dst, v) in grad[off..off + sg.grad_params.len()]
                    .iter_mut()
                    .zip(&sg.grad_params)
                {
                    *dst += g * v;
                }
            }
            if t.neck {
                let d = z.dim;
                for (dst, v) in dz[cell * d..(cell + 1) * d].iter_mut().zip(&sg.grad_z) {
                    *dst += g * v;
                }
            }
        }
    }

    if t.neck {
        neck_backward(&params.neck, &trace, &dz, &mut grad);
    }
    Ok((terms, grad))
}

/// Accumulates neck gradients into the leading segment of `grad`.
fn neck_backward(p: &NeckParams, trace: &NeckTrace, dz: &[f64], grad: &mut [f64]) {
    let (din, dh, dim) = (p.d_in, p.d_hidden, p.dim);
    let (o_b1, o_w2) = (p.w1.len(), p.w1.len() + dh);
    let o_b2 = o_w2 + p.w2.len();
    let mut da2 = vec![0.0; dim];
    let mut dh_buf = vec![0.0; dh];
    for c in 0..trace.latent.cells() {
        let zc = trace.latent.cell(c);
        let dzc = &dz[c * dim..(c + 1) * dim];
        for j in 0..dim {
            da2[j] = dzc[j] * zc[j] * (1.0 - zc[j]);
            grad[o_b2 + j] += da2[j];
        }
        let pre = &trace.pre[c * dh..(c + 1) * dh];
        for h in 0..dh {
            let hv = pre[h].max(0.0);
            let row = &p.w2[h * dim..(h + 1) * dim];
            let grow = &mut grad[o_w2 + h * dim..o_w2 + (h + 1) * dim];
            let mut acc = 0.0;
            for j in 0..dim {
                grow[j] += hv * da2[j];
                acc += row[j] * da2[j];
            }
            dh_buf[h] = if pre[h] > 0.0 { acc } else { 0.0 };
            grad[o_b1 + h] += dh_buf[h];
        }
        let xc = &trace.x[c * din..(c + 1) * din];
        for (i, &xi) in xc.iter().enumerate() {
            if xi != 0.0 {
                let grow = &mut grad[i * dh..(i + 1) * dh];
                grow.iter_mut().zip(&dh_buf).for_each(|(g, d)| *g += xi * d);
            }
        }
    }
}

/// Batch-mean loss and its gradient with respect to the flat parameter
/// vector. Groups excluded by `trainable` get zero gradient. Per-sample
/// gradients may be computed in parallel; they are summed in record order.
pub fn batch_loss_and_grad(
    params: &ModelParams,
    records: &[Record],
    weights: &LossWeights,
    trainable: Trainable,
    parallel: bool,
) -> Result<(LossBreakdown, Vec<f64>)> {
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let per_sample = exec::map_ordered(records, parallel, |r| {
        sample_grad(params, r, weights, trainable)
    });
    let mut grad = vec![0.0; params.num_params()];
    let mut terms = Vec::with_capacity(records.len());
    for r in per_sample {
        let (t, g) = r?;
        terms.push(t);
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    let n = records.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NumericalFailure {
            path: params.param_path(i),
        });
    }
    Ok((breakdown(terms, records.len(), weights), grad))
}

fn gap_to_second(values: impl Iterator<Item = f64>) -> f64 {
    let (mut a, mut b) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for v in values {
        if v > a {
            b = a;
            a = v;
        } else if v > b {
            b = v;
        }
    }
    if b == f64::NEG_INFINITY {
        f64::INFINITY
    } else {
        a - b
    }
}

/// Smallest distance of any piecewise decision in the loss (ReLU sign,
/// max-pool winner, best same-class and other-class prototype) from
/// switching, over `records`.
pub fn min_decision_margin(params: &ModelParams, records: &[Record]) -> Result<f64> {
    let mut margin = f64::INFINITY;
    let pc = params.bank.proto_class();
    for rec in records {
        let trace = neck_trace(&rec.features, params.config.zeta, &params.neck)?;
        margin = trace.pre.iter().fold(margin, |m, a| m.min(a.abs()));
        let layer = prototype_layer_forward(&trace.latent, &params.bank)?;
        for k in 0..layer.pooled.len() {
            margin = margin.min(gap_to_second(layer.maps.map(k).iter().copied()));
        }
        let y = rec.label as usize;
        let scores = || layer.pooled.iter().zip(&pc);
        margin = margin
            .min(gap_to_second(
                scores().filter(|(_, c)| **c == y).map(|(s, _)| *s),
            ))
            .min(gap_to_second(
                scores().filter(|(_, c)| **c != y).map(|(s, _)| *s),
            ));
    }
    Ok(margin)
}
