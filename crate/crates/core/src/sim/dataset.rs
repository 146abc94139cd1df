//! Simulated (road, CRM, HCRM) datasets with train/validation/test splits.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grd;
use crate::probes::{write_jsonl, ProbeRecord};
use crate::raster::{hcrm_to_crm, lonlat_to_tile, rasterize_probes, window_zoom_for, GeoPoint, RasterImage, RasterMode, TileCoord};
use crate::rng::{indexed, substream};
use crate::sim::graph::{rasterize_road_graph, synth_road_graph, GraphParams, RoadGraph, RoadStyle};
use crate::sim::probes::{simulate_probes, SimConfig};

pub const MANIFEST: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n_tiles: usize,
    /// Image side in pixels; the window zoom is `24 − log2(size)`.
    pub size: usize,
    pub styles: Vec<RoadStyle>,
    /// Road density, drawn uniformly per tile.
    pub density_range: [f64; 2],
    /// Per-tile multiplier of `sim.delta_t`, drawn log-uniformly.
    pub delta_t_scale: [f64; 2],
    /// Only probes with this modality are rasterized.
    pub modality: String,
    /// Longitude and latitude of the first window.
    pub origin: [f64; 2],
    pub sim: SimConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_tiles: 500,
            size: 128,
            styles: RoadStyle::ALL.to_vec(),
            density_range: [0.2, 0.9],
            delta_t_scale: [0.3, 3.0],
            modality: "driving".into(),
            origin: [-122.45, 37.75],
            sim: SimConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: usize,
    pub split: Split,
    pub window: TileCoord,
    pub style: RoadStyle,
    pub density: f64,
    /// Observation interval used for this tile.
    pub delta_t: f64,
    pub graph: RoadGraph,
    pub road: RasterImage,
    pub crm: RasterImage,
    pub hcrm: RasterImage,
}

impl Example {
    pub fn target(&self, mode: RasterMode) -> &RasterImage {
        match mode {
            RasterMode::Crm => &self.crm,
            RasterMode::Hcrm => &self.hcrm,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub seed: u64,
    pub examples: Vec<Example>,
}

/// Split sizes ⌊0.7n⌋, ⌊0.2n⌋ and the remainder.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 7 / 10;
    let val = n * 2 / 10;
    (train, val, n - train - val)
}

fn validate(cfg: &DatasetConfig) -> Result<()> {
    if cfg.n_tiles < 10 {
        return Err(Error::Domain(format!("n_tiles = {} is below 10", cfg.n_tiles)));
    }
    if cfg.styles.is_empty() {
        return Err(Error::Domain("no road styles configured".into()));
    }
    let [d0, d1] = cfg.density_range;
    if !(d0 > 0.0 && d0 <= d1 && d1 <= 1.0) {
        return Err(Error::Domain(format!("density range {:?} outside (0, 1]", cfg.density_range)));
    }
    let [s0, s1] = cfg.delta_t_scale;
    if !(s0 > 0.0 && s0 <= s1 && s1.is_finite()) {
        return Err(Error::Domain(format!("invalid delta_t_scale {:?}", cfg.delta_t_scale)));
    }
    cfg.sim.validate()
}

fn window_for(cfg: &DatasetConfig, id: usize) -> Result<TileCoord> {
    let zoom = window_zoom_for(cfg.size)?;
    let origin = lonlat_to_tile(GeoPoint::new(cfg.origin[0], cfg.origin[1])?, zoom)?;
    TileCoord::new(zoom, origin.x + (id % 64) as u64, origin.y + (id / 64) as u64)
}

/// Simulates tile `id`: road graph, probes, and both rasters.
pub fn simulate_tile(cfg: &DatasetConfig, seed: u64, id: usize, split: Split) -> Result<(Example, Vec<ProbeRecord>)> {
    let mut rng = indexed(seed, "tile", id as u64);
    let style = cfg.styles[rng.random_range(0..cfg.styles.len())];
    let [d0, d1] = cfg.density_range;
    let density = if d1 > d0 { rng.random_range(d0..=d1) } else { d0 };
    let [s0, s1] = cfg.delta_t_scale;
    let scale = if s1 > s0 { (rng.random_range(s0.ln()..=s1.ln())).exp() } else { s0 };
    let pitch_div = [3usize, 4, 5][rng.random_range(0..3)];
    let params = GraphParams { size: cfg.size, grid_pitch: (cfg.size / pitch_div).max(2) };
    let graph_seed: u64 = rng.random();
    let probe_seed: u64 = rng.random();
    let graph = synth_road_graph(style, density, graph_seed, &params)?;
    let window = window_for(cfg, id)?;
    let sim = SimConfig { delta_t: cfg.sim.delta_t * scale, ..cfg.sim.clone() };
    let probes = simulate_probes(&graph, window, &sim, probe_seed)?;
    let road = rasterize_road_graph(&graph).with_georef(window);
    let crm = rasterize_probes(&probes, window, RasterMode::Crm, &cfg.modality)?;
    let hcrm = rasterize_probes(&probes, window, RasterMode::Hcrm, &cfg.modality)?;
    debug_assert_eq!(hcrm_to_crm(&hcrm)?, crm);
    let ex = Example { id, split, window, style, density, delta_t: sim.delta_t, graph, road, crm, hcrm };
    Ok((ex, probes))
}

fn assign_splits(n: usize, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = substream(seed, "splits");
    order.shuffle(&mut rng);
    let (train, val, _) = split_sizes(n);
    let mut splits = vec![Split::Test; n];
    for (rank, &id) in order.iter().enumerate() {
        splits[id] = if rank < train {
            Split::Train
        } else if rank < train + val {
            Split::Val
        } else {
            Split::Test
        };
    }
    splits
}

pub fn build_dataset(cfg: &DatasetConfig, seed: u64) -> Result<Dataset> {
    validate(cfg)?;
    let splits = assign_splits(cfg.n_tiles, seed);
    let examples = splits
        .iter()
        .enumerate()
        .map(|(id, &split)| simulate_tile(cfg, seed, id, split).map(|(ex, _)| ex))
        .collect::<Result<_>>()?;
    Ok(Dataset { config: cfg.clone(), seed, examples })
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    id: usize,
    split: Split,
    window: TileCoord,
    style: RoadStyle,
    density: f64,
    delta_t: f64,
    graph: RoadGraph,
    road: PathBuf,
    crm: PathBuf,
    hcrm: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    probes: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    seed: u64,
    config: DatasetConfig,
    examples: Vec<ManifestEntry>,
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&Example> {
        self.examples.iter().filter(|e| e.split == split).collect()
    }

    /// Writes the manifest and one GRD1 file per raster. With `probes`, the
    /// simulated probe stream of every tile is written as JSON lines too.
    pub fn save(&self, dir: impl AsRef<Path>, probes: bool) -> Result<()> {
        let dir = dir.as_ref();
        for sub in ["roads", "crm", "hcrm"] {
            create_dir(&dir.join(sub))?;
        }
        if probes {
            create_dir(&dir.join("probes"))?;
        }
        let mut entries = Vec::new();
        for ex in &self.examples {
            let name = format!("{:05}", ex.id);
            let road = PathBuf::from(format!("roads/{name}.grd"));
            let crm = PathBuf::from(format!("crm/{name}.grd"));
            let hcrm = PathBuf::from(format!("hcrm/{name}.grd"));
            grd::write(&ex.road, dir.join(&road))?;
            grd::write(&ex.crm, dir.join(&crm))?;
            grd::write(&ex.hcrm, dir.join(&hcrm))?;
            let probe_path = if probes {
                let (_, recs) = simulate_tile(&self.config, self.seed, ex.id, ex.split)?;
                let rel = PathBuf::from(format!("probes/{name}.jsonl"));
                let path = dir.join(&rel);
                let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
                write_jsonl(std::io::BufWriter::new(file), &recs)?;
                Some(rel)
            } else {
                None
            };
            entries.push(ManifestEntry {
                id: ex.id,
                split: ex.split,
                window: ex.window,
                style: ex.style,
                density: ex.density,
                delta_t: ex.delta_t,
                graph: ex.graph.clone(),
                road,
                crm,
                hcrm,
                probes: probe_path,
            });
        }
        let manifest = Manifest { version: MANIFEST_VERSION, seed: self.seed, config: self.config.clone(), examples: entries };
        let path = dir.join(MANIFEST);
        fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_slice(&bytes)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::format("manifest version", format!("unsupported version {}", manifest.version)));
        }
        let examples = manifest
            .examples
            .into_iter()
            .map(|e| {
                Ok(Example {
                    id: e.id,
                    split: e.split,
                    window: e.window,
                    style: e.style,
                    density: e.density,
                    delta_t: e.delta_t,
                    graph: e.graph,
                    road: grd::read(dir.join(e.road))?,
                    crm: grd::read(dir.join(e.crm))?,
                    hcrm: grd::read(dir.join(e.hcrm))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { config: manifest.config, seed: manifest.seed, examples })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize) -> DatasetConfig {
        DatasetConfig { n_tiles: n, size: 16, ..DatasetConfig::default() }
    }

    #[test]
    fn split_sizes_70_20_10() {
        assert_eq!(split_sizes(100), (70, 20, 10));
        assert_eq!(split_sizes(15), (10, 3, 2));
        let ds = build_dataset(&small(100), 4).unwrap();
        assert_eq!(ds.split(Split::Train).len(), 70);
        assert_eq!(ds.split(Split::Val).len(), 20);
        assert_eq!(ds.split(Split::Test).len(), 10);
    }

    #[test]
    fn deterministic_and_consistent() {
        let a = build_dataset(&small(12), 9).unwrap();
        let b = build_dataset(&small(12), 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, build_dataset(&small(12), 10).unwrap());
        for ex in &a.examples {
            assert_eq!(hcrm_to_crm(&ex.hcrm).unwrap(), ex.crm);
            assert_eq!((ex.road.h, ex.crm.c, ex.hcrm.c), (16, 1, 12));
            assert_eq!(ex.road.georef, Some(ex.window));
        }
        let windows: std::collections::BTreeSet<_> = a.examples.iter().map(|e| (e.window.x, e.window.y)).collect();
        assert_eq!(windows.len(), 12);
    }

    #[test]
    fn too_few_tiles() {
        assert!(matches!(build_dataset(&small(9), 1), Err(Error::Domain(_))));
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = build_dataset(&small(10), 2).unwrap();
        ds.save(dir.path(), true).unwrap();
        assert!(dir.path().join("probes/00000.jsonl").exists());
        assert_eq!(Dataset::load(dir.path()).unwrap(), ds);
    }
}
