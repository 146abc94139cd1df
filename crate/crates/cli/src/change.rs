//! Synthetic change-detection triples `(x, x̃, label)`: each example's road
//! network is perturbed `k` times, the model renders the perturbed roads,
//! and the label marks the pixels where the roads differ.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use vaeinfo_core::grd;
use vaeinfo_core::model::{AttrSource, Model};
use vaeinfo_core::raster::{lognorm_forward, RasterImage, RasterMode};
use vaeinfo_core::rng::indexed;
use vaeinfo_core::sim::{perturb_road_graph, rasterize_road_graph, Example};
use vaeinfo_core::{Error, Result};

use crate::config::ChangeSettings;

#[derive(Clone, Debug, PartialEq)]
pub struct Triple {
    pub example: usize,
    pub variant: usize,
    /// Observed target of the unperturbed example, count space.
    pub x: RasterImage,
    /// Generated from the perturbed roads, count space.
    pub x_tilde: RasterImage,
    /// Binary change mask.
    pub label: RasterImage,
    pub perturbed_road: RasterImage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripleRecord {
    pub example: usize,
    pub variant: usize,
    pub x: String,
    pub x_tilde: String,
    pub label: String,
    pub road: String,
    pub changed_pixels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChangeManifest {
    pub task: RasterMode,
    pub seed: u64,
    pub k: usize,
    pub examples: usize,
    /// Variants dropped because the perturbation left the roads unchanged.
    pub skipped: usize,
    pub triples: Vec<TripleRecord>,
}

/// Emits up to `examples.len() · k` triples. The attribute slot of
/// feature-conditioned models takes the encoding of the example's own
/// target; the other kinds follow their generation contract.
pub fn emit_change_dataset(
    model: &Model,
    examples: &[&Example],
    task: RasterMode,
    settings: &ChangeSettings,
    seed: u64,
) -> Result<(ChangeManifest, Vec<Triple>)> {
    if settings.k == 0 {
        return Err(Error::Domain("k must be ≥ 1".into()));
    }
    let mut triples = Vec::new();
    let mut skipped = 0;
    for ex in examples {
        let mut draws = indexed(seed, "change/perturb", ex.id as u64);
        let mut variants = Vec::new();
        for i in 0..settings.k {
            let p = perturb_road_graph(&ex.graph, &settings.ops, draws.random());
            if p.mask.values.iter().all(|&v| v == 0.0) {
                skipped += 1;
                continue;
            }
            variants.push((i, p));
        }
        if variants.is_empty() {
            continue;
        }
        let roads: Vec<RasterImage> = variants.iter().map(|(_, p)| RasterImage { georef: ex.road.georef, ..rasterize_road_graph(&p.graph) }).collect();
        let refs: Vec<&RasterImage> = roads.iter().collect();
        let attrs = if model.kind.has_ae() {
            AttrSource::Fixed(model.encode_attribute(&lognorm_forward(ex.target(task))?)?)
        } else {
            AttrSource::Uniform
        };
        let mut rng = indexed(seed, "change/generate", ex.id as u64);
        let generated = model.generate_for_roads(&refs, &attrs, &mut rng)?;
        for (((i, p), road), gen) in variants.into_iter().zip(roads).zip(generated) {
            triples.push(Triple {
                example: ex.id,
                variant: i,
                x: ex.target(task).clone(),
                x_tilde: vaeinfo_core::raster::lognorm_inverse(&gen),
                label: p.mask,
                perturbed_road: road,
            });
        }
    }
    let records = triples
        .iter()
        .map(|t| {
            let stem = format!("{:05}_{}", t.example, t.variant);
            TripleRecord {
                example: t.example,
                variant: t.variant,
                x: format!("x/{:05}.grd", t.example),
                x_tilde: format!("x_tilde/{stem}.grd"),
                label: format!("label/{stem}.grd"),
                road: format!("road/{stem}.grd"),
                changed_pixels: t.label.values.iter().filter(|&&v| v != 0.0).count(),
            }
        })
        .collect();
    let manifest = ChangeManifest { task, seed, k: settings.k, examples: examples.len(), skipped, triples: records };
    Ok((manifest, triples))
}

/// Writes the GRD1 files named in the manifest plus `manifest.json`.
/// Generated images are stored in lognorm space.
pub fn write_change_dataset(dir: &Path, manifest: &ChangeManifest, triples: &[Triple]) -> Result<()> {
    for sub in ["x", "x_tilde", "label", "road"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for (rec, t) in manifest.triples.iter().zip(triples) {
        let x_path = dir.join(&rec.x);
        if !x_path.exists() {
            grd::write(&t.x, &x_path)?;
        }
        grd::write(&lognorm_forward(&t.x_tilde)?.round_to_binary32(), dir.join(&rec.x_tilde))?;
        grd::write(&t.label, dir.join(&rec.label))?;
        grd::write(&t.perturbed_road, dir.join(&rec.road))?;
    }
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_vec_pretty(manifest)?).map_err(|e| Error::io(&path, e))
}
