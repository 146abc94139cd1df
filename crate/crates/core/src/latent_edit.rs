//! Hyperplane editing in attribute space: label generated images by pixel
//! sum, fit a linear SVM on the attribute vectors, and walk along its
//! normal.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use vaeinfo_tensor::Array;

use crate::error::{Error, Result};
use crate::grd;
use crate::model::{sample_condition, unstack, Model, ModelKind};
use crate::raster::{lognorm_forward, lognorm_inverse, RasterImage, Space};
use crate::rng::substream;

/// Smallest sample count accepted for fitting.
pub const MIN_SAMPLES: usize = 100;
/// Walk length that matched a doubled observation interval on the
/// original data.
pub const CALIBRATION_ALPHA: f64 = 0.45;
const GEN_BATCH: usize = 64;

/// A road raster with its condition vector held fixed.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedCondition {
    pub z_c: Vec<f64>,
    /// `[1, C, r, r]` encoder features, empty without skip connections.
    pub skips: Vec<Array>,
}

impl FixedCondition {
    /// Draws `z_c` once from the posterior of `y` (its mixture mean for the
    /// cGAN kinds).
    pub fn new(model: &Model, y: &RasterImage, seed: u64) -> Result<Self> {
        let post = model.encode_condition(y)?;
        let z_c = if model.kind.is_variational() {
            sample_condition(&post, &mut substream(seed, "edit/condition"))
        } else {
            let d = post.means[0].len();
            (0..d).map(|j| post.weights.iter().zip(&post.means).map(|(w, m)| w * m[j]).sum()).collect()
        };
        let skips = if model.config.skip_connections { post.skips } else { Vec::new() };
        Ok(Self { z_c, skips })
    }

    /// Count-space images for each attribute vector.
    pub fn generate(&self, model: &Model, attrs: &[Vec<f64>]) -> Result<Vec<RasterImage>> {
        let mut out = Vec::with_capacity(attrs.len());
        let skips = model.config.skip_connections.then_some(self.skips.as_slice());
        for chunk in attrs.chunks(GEN_BATCH) {
            let mut z = Vec::with_capacity(chunk.len() * model.config.latent_dim());
            for a in chunk {
                z.extend(model.form_latent(&self.z_c, a)?);
            }
            let z = Array::new(vec![chunk.len(), model.config.latent_dim()], z);
            let x = model.generate_batch(&z, skips)?;
            if !x.all_finite() {
                return Err(Error::Numeric("generator produced non-finite values".into()));
            }
            out.extend(unstack(&x, Space::Lognorm).iter().map(lognorm_inverse));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledAttributeSet {
    pub samples: Vec<Vec<f64>>,
    pub pixel_sums: Vec<f64>,
    /// Mean pixel sum.
    pub threshold: f64,
    /// +1 when the pixel sum exceeds the threshold, else −1.
    pub labels: Vec<i8>,
}

impl LabeledAttributeSet {
    pub fn from_sums(samples: Vec<Vec<f64>>, pixel_sums: Vec<f64>) -> Result<Self> {
        if samples.len() != pixel_sums.len() || samples.is_empty() {
            return Err(Error::Contract(format!("{} samples for {} pixel sums", samples.len(), pixel_sums.len())));
        }
        let threshold = pixel_sums.iter().sum::<f64>() / pixel_sums.len() as f64;
        let labels = pixel_sums.iter().map(|&s| if s > threshold { 1 } else { -1 }).collect();
        Ok(Self { samples, pixel_sums, threshold, labels })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Concatenation of per-condition sets, each keeping its own labels.
    pub fn pooled(sets: &[LabeledAttributeSet]) -> Result<Self> {
        let mut out = Self { samples: Vec::new(), pixel_sums: Vec::new(), threshold: f64::NAN, labels: Vec::new() };
        for s in sets {
            out.samples.extend(s.samples.iter().cloned());
            out.pixel_sums.extend(&s.pixel_sums);
            out.labels.extend(&s.labels);
        }
        if out.is_empty() {
            return Err(Error::Domain("no sets to pool".into()));
        }
        Ok(out)
    }
}

/// Draws `count` attributes from `U[0,1]^{d_a}`, generates under the fixed
/// condition and labels by count-space pixel sum.
pub fn collect_attribute_samples(model: &Model, cond: &FixedCondition, count: usize, seed: u64) -> Result<LabeledAttributeSet> {
    if count < MIN_SAMPLES {
        return Err(Error::Domain(format!("{count} samples is below the minimum of {MIN_SAMPLES}")));
    }
    if model.kind == ModelKind::CvaePlc {
        return Err(Error::Contract(format!("{} ignores the attribute slot", model.kind)));
    }
    let mut rng = substream(seed, "edit/attributes");
    let flat = crate::model::uniform(&mut rng, vec![count, model.config.d_a]);
    let samples: Vec<Vec<f64>> = flat.data().chunks_exact(model.config.d_a).map(<[f64]>::to_vec).collect();
    let sums = cond.generate(model, &samples)?.iter().map(RasterImage::sum).collect();
    LabeledAttributeSet::from_sums(samples, sums)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperplane {
    pub w: Vec<f64>,
    pub b: f64,
}

impl Hyperplane {
    pub fn new(w: Vec<f64>, b: f64) -> Result<Self> {
        if !(norm(&w) > 0.0) || !b.is_finite() {
            return Err(Error::DegenerateData("hyperplane has a zero or non-finite normal".into()));
        }
        Ok(Self { w, b })
    }

    pub fn score(&self, a: &[f64]) -> f64 {
        dot(&self.w, a) + self.b
    }

    pub fn norm(&self) -> f64 {
        norm(&self.w)
    }

    pub fn normal(&self) -> Vec<f64> {
        let n = self.norm();
        self.w.iter().map(|v| v / n).collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SvmConfig {
    /// Weight of the mean hinge loss against `½‖w‖²`.
    pub c: f64,
    pub epochs: usize,
    pub train_fraction: f64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self { c: 1.0, epochs: 200, train_fraction: 0.9 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvmFit {
    pub hyperplane: Hyperplane,
    pub train_accuracy: f64,
    /// Accuracy on the held-out part; `None` if it is empty.
    pub val_accuracy: Option<f64>,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

fn accuracy(h: &Hyperplane, set: &LabeledAttributeSet, idx: &[usize]) -> Option<f64> {
    if idx.is_empty() {
        return None;
    }
    let hits = idx.iter().filter(|&&i| (h.score(&set.samples[i]) > 0.0) == (set.labels[i] > 0)).count();
    Some(hits as f64 / idx.len() as f64)
}

/// Linear SVM by Pegasos subgradient descent on
/// `λ/2·‖(w, b)‖² + mean hinge`, `λ = 1/(C·n)`, with the bias carried as a
/// constant feature. Samples are split and reshuffled per epoch from
/// `seed`.
pub fn fit_linear_svm(set: &LabeledAttributeSet, cfg: &SvmConfig, seed: u64) -> Result<SvmFit> {
    if !(cfg.train_fraction > 0.0 && cfg.train_fraction <= 1.0) || !(cfg.c > 0.0) || cfg.epochs == 0 {
        return Err(Error::Domain(format!("invalid SVM settings {cfg:?}")));
    }
    let n = set.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut substream(seed, "svm/split"));
    let n_train = ((n as f64 * cfg.train_fraction).round() as usize).clamp(1, n);
    let (train, val) = order.split_at(n_train);
    let (mut train, val) = (train.to_vec(), val.to_vec());
    let pos = train.iter().filter(|&&i| set.labels[i] > 0).count();
    if pos == 0 || pos == train.len() {
        return Err(Error::DegenerateData("training split holds a single class".into()));
    }
    let d = set.samples[0].len();
    let lambda = 1.0 / (cfg.c * train.len() as f64);
    let radius = 1.0 / lambda.sqrt();
    let mut w = vec![0.0; d + 1];
    let mut t = 0u64;
    let mut rng = substream(seed, "svm/epochs");
    for _ in 0..cfg.epochs {
        train.shuffle(&mut rng);
        for &i in &train {
            t += 1;
            let eta = 1.0 / (lambda * t as f64);
            let x = &set.samples[i];
            let y = f64::from(set.labels[i]);
            let margin = y * (dot(&w[..d], x) + w[d]);
            let shrink = 1.0 - eta * lambda;
            for v in &mut w {
                *v *= shrink;
            }
            if margin < 1.0 {
                for (v, xi) in w.iter_mut().zip(x.iter().chain(std::iter::once(&1.0))) {
                    *v += eta * y * xi;
                }
            }
            let nw = norm(&w);
            if nw > radius {
                for v in &mut w {
                    *v *= radius / nw;
                }
            }
        }
    }
    let b = w.pop().expect("bias");
    let hyperplane = Hyperplane::new(w, b)?;
    let train_accuracy = accuracy(&hyperplane, set, &train).expect("non-empty");
    let val_accuracy = accuracy(&hyperplane, set, &val);
    train.sort_unstable();
    Ok(SvmFit { hyperplane, train_accuracy, val_accuracy, train_indices: train, val_indices: val })
}

/// `a + α·n`, unclipped.
pub fn edit_along_normal(a: &[f64], h: &Hyperplane, alpha: f64) -> Vec<f64> {
    a.iter().zip(h.normal()).map(|(x, n)| x + alpha * n).collect()
}

/// The training sample closest to the decision boundary.
pub fn boundary_sample(set: &LabeledAttributeSet, fit: &SvmFit) -> Vec<f64> {
    let best = fit
        .train_indices
        .iter()
        .copied()
        .min_by(|&i, &j| fit.hyperplane.score(&set.samples[i]).abs().total_cmp(&fit.hyperplane.score(&set.samples[j]).abs()))
        .expect("non-empty training split");
    set.samples[best].clone()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub alpha: f64,
    pub score: f64,
    pub pixel_sum: f64,
    /// Set for the calibration walk length.
    pub calibration_point: bool,
}

/// One count-space image per α at `a_boundary + α·n`.
pub fn alpha_sweep(
    model: &Model,
    cond: &FixedCondition,
    h: &Hyperplane,
    a_boundary: &[f64],
    alphas: &[f64],
) -> Result<(Vec<SweepPoint>, Vec<RasterImage>)> {
    let attrs: Vec<Vec<f64>> = alphas.iter().map(|&al| edit_along_normal(a_boundary, h, al)).collect();
    let images = cond.generate(model, &attrs)?;
    let points = alphas
        .iter()
        .zip(&attrs)
        .zip(&images)
        .map(|((&alpha, a), img)| SweepPoint {
            alpha,
            score: h.score(a),
            pixel_sum: img.sum(),
            calibration_point: (alpha - CALIBRATION_ALPHA).abs() < 1e-12,
        })
        .collect();
    Ok((points, images))
}

/// Writes `alpha_<k>.grd` per point (lognorm space, since generated
/// counts are not whole numbers) and `sweep.json`.
pub fn write_sweep(dir: &Path, points: &[SweepPoint], images: &[RasterImage]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (k, img) in images.iter().enumerate() {
        grd::write(&lognorm_forward(img)?.round_to_binary32(), dir.join(format!("alpha_{k:03}.grd")))?;
    }
    let path = dir.join("sweep.json");
    fs::write(&path, serde_json::to_vec_pretty(points)?).map_err(|e| Error::io(&path, e))
}

/// Evenly spaced values `start..=stop`, `count` of them.
pub fn linspace(start: f64, stop: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![start],
        _ => (0..count).map(|i| start + (stop - start) * i as f64 / (count - 1) as f64).collect(),
    }
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties; `None` when
/// either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    (va > 0.0 && vb > 0.0).then(|| cov / (va * vb).sqrt())
}

/// Settings of a multi-condition editing study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EditSettings {
    /// Test conditions to edit.
    pub conditions: usize,
    /// Attribute samples per condition.
    pub count: usize,
    pub alphas: Vec<f64>,
    pub svm: SvmConfig,
    /// One hyperplane over all conditions instead of one per condition.
    pub pooled: bool,
}

impl Default for EditSettings {
    fn default() -> Self {
        Self { conditions: 10, count: 10_000, alphas: vec![-10.0, -5.0, -2.0, 0.0, 2.0, 5.0, 10.0], svm: SvmConfig::default(), pooled: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionEdit {
    /// Caller-supplied identifier of the road raster.
    pub id: usize,
    pub threshold: f64,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
    pub hyperplane: Hyperplane,
    pub a_boundary: Vec<f64>,
    pub sweep: Vec<SweepPoint>,
    /// Rank correlation of α against pixel sum.
    pub spearman: Option<f64>,
    /// Largest deviation from `score(a + αn) = score(a) + α‖w‖`.
    pub linearity_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditStudy {
    pub settings: EditSettings,
    pub conditions: Vec<ConditionEdit>,
}

fn condition_seed(seed: u64, id: usize) -> u64 {
    use rand::Rng as _;
    crate::rng::indexed(seed, "edit", id as u64).random()
}

/// Samples, fits and sweeps each `(id, road)` condition. Returns the study
/// and the sweep images per condition.
pub fn run_edit_study(
    model: &Model,
    roads: &[(usize, &RasterImage)],
    settings: &EditSettings,
    seed: u64,
) -> Result<(EditStudy, Vec<Vec<RasterImage>>)> {
    let mut prepared = Vec::with_capacity(roads.len());
    for &(id, y) in roads.iter().take(settings.conditions) {
        let s = condition_seed(seed, id);
        let cond = FixedCondition::new(model, y, s)?;
        let set = collect_attribute_samples(model, &cond, settings.count, s)?;
        prepared.push((id, s, cond, set));
    }
    let pooled_fit = if settings.pooled {
        let sets: Vec<LabeledAttributeSet> = prepared.iter().map(|p| p.3.clone()).collect();
        Some(fit_linear_svm(&LabeledAttributeSet::pooled(&sets)?, &settings.svm, seed)?)
    } else {
        None
    };
    let mut conditions = Vec::new();
    let mut images = Vec::new();
    for (id, s, cond, set) in prepared {
        let (fit, a_b) = match &pooled_fit {
            Some(f) => {
                let h = &f.hyperplane;
                let all: Vec<usize> = (0..set.len()).collect();
                let local = SvmFit {
                    hyperplane: h.clone(),
                    train_accuracy: accuracy(h, &set, &all).expect("non-empty"),
                    val_accuracy: f.val_accuracy,
                    train_indices: all,
                    val_indices: Vec::new(),
                };
                let a_b = boundary_sample(&set, &local);
                (local, a_b)
            }
            None => {
                let fit = fit_linear_svm(&set, &settings.svm, s)?;
                let a_b = boundary_sample(&set, &fit);
                (fit, a_b)
            }
        };
        let (sweep, imgs) = alpha_sweep(model, &cond, &fit.hyperplane, &a_b, &settings.alphas)?;
        let base = fit.hyperplane.score(&a_b);
        let linearity_error =
            sweep.iter().map(|p| (p.score - base - p.alpha * fit.hyperplane.norm()).abs()).fold(0.0, f64::max);
        let sums: Vec<f64> = sweep.iter().map(|p| p.pixel_sum).collect();
        conditions.push(ConditionEdit {
            id,
            threshold: set.threshold,
            train_accuracy: fit.train_accuracy,
            val_accuracy: fit.val_accuracy,
            hyperplane: fit.hyperplane,
            a_boundary: a_b,
            spearman: spearman(&settings.alphas, &sums),
            linearity_error,
            sweep,
        });
        images.push(imgs);
    }
    Ok((EditStudy { settings: settings.clone(), conditions }, images))
}
