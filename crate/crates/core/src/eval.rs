//! APND metric, attribute calibration, and the model comparison report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grd;
use crate::model::{stack, AttrSource, Model, ModelKind};
use crate::raster::{lognorm_forward, lognorm_inverse, RasterImage, RasterMode, Space};
use crate::rng::substream;
use crate::sim::Example;

/// Examples per inference batch.
pub const EVAL_BATCH: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApndResult {
    pub mean_percent: f64,
    /// Half-width of the normal-approximation 95% interval.
    pub ci95_percent: f64,
    /// Examples that entered the mean.
    pub n: usize,
    /// Examples skipped because the reference image is all zero.
    pub excluded: usize,
}

/// Mean of `100·‖x − x̃‖₂ / ‖x‖₂` over `(x, x̃)` count-space pairs.
pub fn apnd(pairs: &[(&RasterImage, &RasterImage)]) -> Result<ApndResult> {
    let mut scores = Vec::with_capacity(pairs.len());
    let mut excluded = 0;
    for (x, xh) in pairs {
        if (x.h, x.w, x.c) != (xh.h, xh.w, xh.c) {
            return Err(Error::Contract(format!("APND on {}×{}×{} vs {}×{}×{}", x.h, x.w, x.c, xh.h, xh.w, xh.c)));
        }
        let norm = x.values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            excluded += 1;
            continue;
        }
        let diff = x.values.iter().zip(&xh.values).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        scores.push(100.0 * diff / norm);
    }
    if scores.is_empty() {
        return Err(Error::Domain(format!("no example with a non-zero reference ({excluded} excluded)")));
    }
    let n = scores.len();
    let mean = scores.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 { (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
    Ok(ApndResult { mean_percent: mean, ci95_percent: 1.96 * sd / (n as f64).sqrt(), n, excluded })
}

/// Mean attribute encoding of the lognorm-transformed `targets`.
pub fn calibrate_attribute(model: &Model, targets: &[&RasterImage]) -> Result<Vec<f64>> {
    if targets.is_empty() {
        return Err(Error::Domain("calibration split is empty".into()));
    }
    if !model.kind.has_ae() {
        return Err(Error::Contract(format!("{} has no attribute encoder", model.kind)));
    }
    let d_a = model.config.d_a;
    let mut sum = vec![0.0; d_a];
    for chunk in targets.chunks(EVAL_BATCH) {
        let logs: Vec<RasterImage> = chunk.iter().map(|x| lognorm_forward(x)).collect::<Result<_>>()?;
        let refs: Vec<&RasterImage> = logs.iter().collect();
        let a = model.encode_attribute_batch(&stack(&refs));
        for row in a.data().chunks_exact(d_a) {
            for (s, v) in sum.iter_mut().zip(row) {
                *s += v;
            }
        }
    }
    Ok(sum.into_iter().map(|s| s / targets.len() as f64).collect())
}

/// Count-space generations for `examples`, following the model's
/// generation contract with `a_cal` in the attribute slot where it has one.
pub fn generate_examples(model: &Model, examples: &[&Example], a_cal: Option<&[f64]>, seed: u64) -> Result<Vec<RasterImage>> {
    let mut rng = substream(seed, "eval-sampling");
    let attrs = match a_cal {
        Some(a) => AttrSource::Fixed(a.to_vec()),
        None => AttrSource::Uniform,
    };
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(EVAL_BATCH) {
        let roads: Vec<&RasterImage> = chunk.iter().map(|e| &e.road).collect();
        for (img, ex) in model.generate_for_roads(&roads, &attrs, &mut rng)?.into_iter().zip(chunk) {
            let mut img = lognorm_inverse(&img);
            img.georef = Some(ex.window);
            out.push(img);
        }
    }
    Ok(out)
}

/// Calibrates on `val` (when the model has an attribute encoder) and
/// scores generations on `test`.
pub fn evaluate_model(model: &Model, mode: RasterMode, val: &[&Example], test: &[&Example], seed: u64) -> Result<(ApndResult, Vec<RasterImage>)> {
    let a_cal = if model.kind.has_ae() {
        let targets: Vec<&RasterImage> = val.iter().map(|e| e.target(mode)).collect();
        Some(calibrate_attribute(model, &targets)?)
    } else {
        None
    };
    let generated = generate_examples(model, test, a_cal.as_deref(), seed)?;
    let pairs: Vec<(&RasterImage, &RasterImage)> = test.iter().map(|e| e.target(mode)).zip(&generated).collect();
    Ok((apnd(&pairs)?, generated))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub model: ModelKind,
    /// `None` when the checkpoint was missing.
    pub apnd: Option<ApndResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: RasterMode,
    pub seed: u64,
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    /// Fixed-width text table, lower APND is better.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let task = match self.task {
            RasterMode::Crm => "CRM",
            RasterMode::Hcrm => "HCRM",
        };
        let _ = writeln!(s, "{:<20} {:>22}", "Model", format!("APND % ({task})"));
        let _ = writeln!(s, "{}", "-".repeat(43));
        for row in &self.rows {
            let cell = match &row.apnd {
                Some(r) => format!("{:.2} ± {:.2} (n={})", r.mean_percent, r.ci95_percent, r.n),
                None => "absent".to_string(),
            };
            let _ = writeln!(s, "{:<20} {:>22}", row.label, cell);
        }
        s
    }

    pub fn get(&self, kind: ModelKind) -> Option<&ApndResult> {
        self.rows.iter().find(|r| r.model == kind).and_then(|r| r.apnd.as_ref())
    }
}

/// Scores every present model on the test split, one row per kind in the
/// fixed table order; missing models are listed as absent.
pub fn evaluate_models(
    models: &BTreeMap<ModelKind, Model>,
    mode: RasterMode,
    val: &[&Example],
    test: &[&Example],
    seed: u64,
) -> Result<(EvalReport, BTreeMap<ModelKind, Vec<RasterImage>>)> {
    let mut rows = Vec::new();
    let mut generated = BTreeMap::new();
    for kind in ModelKind::ALL {
        let apnd = match models.get(&kind) {
            Some(model) => {
                let (r, imgs) = evaluate_model(model, mode, val, test, seed)?;
                generated.insert(kind, imgs);
                Some(r)
            }
            None => None,
        };
        rows.push(ReportRow { label: kind.label().to_string(), model: kind, apnd });
    }
    Ok((EvalReport { task: mode, seed, rows }, generated))
}

fn channel_sum(img: &RasterImage) -> Vec<f64> {
    img.values.chunks_exact(img.c).map(|px| px.iter().sum()).collect()
}

/// Side-by-side panel `road | ground truth | generated`, one channel,
/// lognorm space: the road panel holds its binary values, the other two
/// hold `ln(1 + Σ_channels count)`.
pub fn figure_panel(road: &RasterImage, truth: &RasterImage, generated: &RasterImage) -> RasterImage {
    let (h, w) = (road.h, road.w);
    let panels = [road.values.clone(), channel_sum(truth).iter().map(|v| v.ln_1p()).collect(), channel_sum(generated).iter().map(|v| v.ln_1p()).collect()];
    let mut out = RasterImage::zeros(h, 3 * w, 1, Space::Lognorm);
    for (p, vals) in panels.iter().enumerate() {
        for i in 0..h {
            for j in 0..w {
                out.set(i, p * w + j, 0, vals[i * w + j]);
            }
        }
    }
    out.round_to_binary32()
}

/// 8-bit grayscale PNG. Each of the `panels` equal-width vertical strips is
/// scaled by its own maximum (display only; an all-zero strip stays black).
pub fn write_preview_png(img: &RasterImage, panels: usize, path: &Path) -> Result<()> {
    let (h, w) = (img.h, img.w);
    let strip = w / panels.max(1);
    let vals = channel_sum(img);
    let mut pixels = vec![0u8; h * w];
    for p in 0..panels.max(1) {
        let cols = p * strip..if p + 1 == panels { w } else { (p + 1) * strip };
        let max = (0..h).flat_map(|i| cols.clone().map(move |j| (i, j))).map(|(i, j)| vals[i * w + j]).fold(0.0, f64::max);
        for i in 0..h {
            for j in cols.clone() {
                let v = if max > 0.0 { vals[i * w + j] / max } else { 0.0 };
                pixels[i * w + j] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::format("png", e.to_string()))?;
    writer.write_image_data(&pixels).map_err(|e| Error::format("png", e.to_string()))?;
    writer.finish().map_err(|e| Error::format("png", e.to_string()))
}

/// Writes `report.json`, `report.txt` and, per model, the first
/// `figures` panels as GRD1 and PNG under `figures/<model>/`.
pub fn write_report(
    dir: &Path,
    report: &EvalReport,
    generated: &BTreeMap<ModelKind, Vec<RasterImage>>,
    test: &[&Example],
    figures: usize,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = dir.join("report.json");
    fs::write(&json, serde_json::to_vec_pretty(report)?).map_err(|e| Error::io(&json, e))?;
    let txt = dir.join("report.txt");
    fs::write(&txt, report.render()).map_err(|e| Error::io(&txt, e))?;
    for (kind, imgs) in generated {
        let sub = dir.join("figures").join(kind.slug());
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        for (k, (ex, img)) in test.iter().zip(imgs).take(figures).enumerate() {
            let panel = figure_panel(&ex.road, ex.target(report.task), img);
            grd::write(&panel, sub.join(format!("{k:03}.grd")))?;
            write_preview_png(&panel, 3, &sub.join(format!("{k:03}.png")))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(values: Vec<f64>) -> RasterImage {
        let n = values.len();
        RasterImage::new(1, n, 1, values, Space::Count).unwrap()
    }

    #[test]
    fn hand_values() {
        let (x, xh) = (img(vec![3.0, 4.0]), img(vec![3.0, 0.0]));
        let r = apnd(&[(&x, &xh)]).unwrap();
        assert!((r.mean_percent - 80.0).abs() < 1e-12);
        assert_eq!((r.n, r.ci95_percent), (1, 0.0));
        assert_eq!(apnd(&[(&x, &x)]).unwrap().mean_percent, 0.0);
        let zero = img(vec![0.0, 0.0]);
        assert_eq!(apnd(&[(&x, &zero)]).unwrap().mean_percent, 100.0);
    }

    #[test]
    fn zero_reference_is_excluded() {
        let (x, zero) = (img(vec![1.0, 2.0]), img(vec![0.0, 0.0]));
        let r = apnd(&[(&zero, &x), (&x, &x)]).unwrap();
        assert_eq!((r.n, r.excluded, r.mean_percent), (1, 1, 0.0));
        assert!(matches!(apnd(&[(&zero, &x)]), Err(Error::Domain(_))));
        assert!(apnd(&[]).is_err());
    }

    #[test]
    fn confidence_interval() {
        let x = img(vec![1.0]);
        let a = img(vec![1.1]);
        let b = img(vec![1.3]);
        let r = apnd(&[(&x, &a), (&x, &b)]).unwrap();
        assert!((r.mean_percent - 20.0).abs() < 1e-9);
        let sd = (2.0 * 10.0f64.powi(2)).sqrt();
        assert!((r.ci95_percent - 1.96 * sd / 2f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn scale_covariance_and_permutation() {
        let x = img(vec![0.5, 2.0, 7.0, 1.0]);
        for delta in [-1.0, -0.3, 0.0, 0.25, 2.0] {
            let xh = img(x.values.iter().map(|v| v + delta * v).collect());
            assert!((apnd(&[(&x, &xh)]).unwrap().mean_percent - 100.0 * f64::abs(delta)).abs() < 1e-9);
        }
        let xh = img(vec![1.0, 1.0, 6.0, 3.0]);
        let perm = [2, 0, 3, 1];
        let xp = img(perm.iter().map(|&i| x.values[i]).collect());
        let xhp = img(perm.iter().map(|&i| xh.values[i]).collect());
        let a = apnd(&[(&x, &xh)]).unwrap().mean_percent;
        let b = apnd(&[(&xp, &xhp)]).unwrap().mean_percent;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch() {
        assert!(matches!(apnd(&[(&img(vec![1.0]), &img(vec![1.0, 2.0]))]), Err(Error::Contract(_))));
    }

    #[test]
    fn report_rows_in_table_order() {
        let report = EvalReport {
            task: RasterMode::Crm,
            seed: 1,
            rows: ModelKind::ALL.iter().map(|k| ReportRow { label: k.label().into(), model: *k, apnd: None }).collect(),
        };
        let labels: Vec<&str> = report.rows.iter().map(|r| r.label.as_str()).collect();
        assert_eq!(labels, ["cVAE (only PLC)", "cVAE (PLC and FLC)", "cGAN (only PLC)", "cGAN (PLC and FLC)", "VAE-Info-cGAN"]);
        assert!(report.render().contains("absent"));
    }
}
