//! Poisson probe emission along road pixels.

use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probes::ProbeRecord;
use crate::raster::{frac_to_lonlat, TileCoord, PIXEL_ZOOM};
use crate::rng::substream;
use crate::sim::graph::{bearing, RoadGraph};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    /// Observation interval in seconds.
    pub delta_t: f64,
    /// Expected probes per road pixel per second.
    pub probe_rate: f64,
    /// Positional jitter in pixels.
    pub gps_noise_sigma: f64,
    /// Heading jitter in degrees.
    pub heading_noise_sigma: f64,
    /// Modality tag to proportion; proportions sum to 1.
    pub modality_mix: BTreeMap<String, f64>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            delta_t: 60.0,
            probe_rate: 0.1,
            gps_noise_sigma: 0.3,
            heading_noise_sigma: 5.0,
            modality_mix: BTreeMap::from([("driving".to_string(), 0.85), ("walking".to_string(), 0.15)]),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("delta_t", self.delta_t),
            ("probe_rate", self.probe_rate),
            ("gps_noise_sigma", self.gps_noise_sigma),
            ("heading_noise_sigma", self.heading_noise_sigma),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Domain(format!("{name} = {v} must be finite and ≥ 0")));
            }
        }
        if self.modality_mix.is_empty() || self.modality_mix.values().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::Domain("modality_mix needs non-negative proportions".into()));
        }
        let total: f64 = self.modality_mix.values().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!("modality proportions sum to {total}, not 1")));
        }
        Ok(())
    }

    fn pick_modality(&self, u: f64) -> &str {
        let mut acc = 0.0;
        for (tag, p) in &self.modality_mix {
            acc += p;
            if u < acc {
                return tag;
            }
        }
        self.modality_mix.keys().next_back().expect("validated non-empty")
    }
}

/// Emits probes for one window. Each road pixel draws a Poisson count with
/// mean `probe_rate · delta_t`; each event picks an incident edge and a
/// permitted travel direction uniformly. Probes sharing an edge direction
/// form one trace, ordered by time.
pub fn simulate_probes(g: &RoadGraph, window: TileCoord, cfg: &SimConfig, seed: u64) -> Result<Vec<ProbeRecord>> {
    cfg.validate()?;
    if window.pixel_extent() != g.size {
        return Err(Error::Contract(format!("graph size {} does not match window extent {}", g.size, window.pixel_extent())));
    }
    let mean = cfg.probe_rate * cfg.delta_t;
    if mean == 0.0 {
        return Ok(Vec::new());
    }
    let mut rng = substream(seed, "probes");
    let poisson = Poisson::new(mean).map_err(|e| Error::Domain(e.to_string()))?;
    let gps = Normal::new(0.0, cfg.gps_noise_sigma).map_err(|e| Error::Domain(e.to_string()))?;
    let head = Normal::new(0.0, cfg.heading_noise_sigma).map_err(|e| Error::Domain(e.to_string()))?;
    let (ox, oy) = window.pixel(0, 0);
    let mut traces: BTreeMap<(usize, bool), Vec<ProbeRecord>> = BTreeMap::new();
    for (px, edges) in g.pixel_edges() {
        let count = poisson.sample(&mut rng) as u64;
        for _ in 0..count {
            let k = edges[rng.random_range(0..edges.len())];
            let e = &g.edges[k];
            let forward = !e.two_way || rng.random_bool(0.5);
            let (from, to) = if forward { (e.a, e.b) } else { (e.b, e.a) };
            let heading = (bearing(g.vertices[from], g.vertices[to]) + head.sample(&mut rng)).rem_euclid(360.0);
            let col = f64::from(px[0]) + 0.5 + gps.sample(&mut rng);
            let row = f64::from(px[1]) + 0.5 + gps.sample(&mut rng);
            let p = frac_to_lonlat(ox as f64 + col, oy as f64 + row, PIXEL_ZOOM);
            let t = rng.random_range(0.0..cfg.delta_t.max(f64::MIN_POSITIVE));
            let modality = cfg.pick_modality(rng.random()).to_string();
            traces.entry((k, forward)).or_default().push(ProbeRecord {
                trace_id: format!("{}-{}-{k}{}", window.x, window.y, if forward { "f" } else { "r" }),
                t,
                lon: p.lon,
                lat: p.lat,
                heading: if heading >= 360.0 { 0.0 } else { heading },
                modality,
            });
        }
    }
    let mut out = Vec::new();
    for (_, mut trace) in traces {
        trace.sort_by(|a, b| a.t.total_cmp(&b.t));
        out.extend(trace);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{lonlat_to_tile, rasterize_probes, GeoPoint, RasterMode};
    use crate::sim::graph::{rasterize_road_graph, synth_road_graph, GraphParams, RoadStyle};

    fn window(size: usize) -> TileCoord {
        let z = crate::raster::window_zoom_for(size).unwrap();
        lonlat_to_tile(GeoPoint::new(-122.41, 37.77).unwrap(), z).unwrap()
    }

    #[test]
    fn zero_noise_probes_sit_on_roads_with_exact_bearings() {
        let g = synth_road_graph(RoadStyle::Organic, 0.6, 5, &GraphParams::for_size(64)).unwrap();
        let w = window(64);
        let cfg = SimConfig { gps_noise_sigma: 0.0, heading_noise_sigma: 0.0, ..SimConfig::default() };
        let probes = simulate_probes(&g, w, &cfg, 11).unwrap();
        assert!(!probes.is_empty());
        let road = rasterize_road_graph(&g);
        let bearings: Vec<f64> = g
            .edges
            .iter()
            .flat_map(|e| [bearing(g.vertices[e.a], g.vertices[e.b]), bearing(g.vertices[e.b], g.vertices[e.a])])
            .collect();
        for p in &probes {
            let t = lonlat_to_tile(GeoPoint::new(p.lon, p.lat).unwrap(), 24).unwrap();
            let (ox, oy) = w.pixel(0, 0);
            assert_eq!(road.get((t.y - oy) as usize, (t.x - ox) as usize, 0), 1.0);
            assert!(bearings.contains(&p.heading), "heading {} is not an edge bearing", p.heading);
        }
        let all = SimConfig { modality_mix: BTreeMap::from([("driving".into(), 1.0)]), ..cfg };
        let probes = simulate_probes(&g, w, &all, 11).unwrap();
        let crm = rasterize_probes(&probes, w, RasterMode::Crm, "driving").unwrap();
        assert_eq!(crm.sum(), probes.len() as f64);
    }

    #[test]
    fn traces_are_time_ordered() {
        let g = synth_road_graph(RoadStyle::Grid, 0.5, 2, &GraphParams::for_size(32)).unwrap();
        let probes = simulate_probes(&g, window(32), &SimConfig::default(), 3).unwrap();
        for w in probes.windows(2) {
            if w[0].trace_id == w[1].trace_id {
                assert!(w[0].t <= w[1].t);
            }
        }
        assert!(probes.iter().all(|p| (0.0..360.0).contains(&p.heading)));
    }

    #[test]
    fn zero_rate_gives_no_probes() {
        let g = synth_road_graph(RoadStyle::Radial, 0.5, 2, &GraphParams::for_size(32)).unwrap();
        let cfg = SimConfig { probe_rate: 0.0, ..SimConfig::default() };
        assert!(simulate_probes(&g, window(32), &cfg, 1).unwrap().is_empty());
    }

    #[test]
    fn count_scales_with_delta_t() {
        let params = GraphParams::for_size(32);
        let (mut base, mut doubled) = (0usize, 0usize);
        for seed in 0..20 {
            let g = synth_road_graph(RoadStyle::Grid, 0.5, seed, &params).unwrap();
            let cfg = SimConfig::default();
            base += simulate_probes(&g, window(32), &cfg, 1000 + seed).unwrap().len();
            let cfg2 = SimConfig { delta_t: 2.0 * cfg.delta_t, ..cfg };
            doubled += simulate_probes(&g, window(32), &cfg2, 1000 + seed).unwrap().len();
        }
        let ratio = doubled as f64 / base as f64;
        assert!((1.8..=2.2).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn expected_count_matches_rate() {
        let g = synth_road_graph(RoadStyle::Grid, 1.0, 9, &GraphParams::for_size(64)).unwrap();
        let road_pixels = rasterize_road_graph(&g).sum();
        let cfg = SimConfig::default();
        let n: usize = (0..20).map(|s| simulate_probes(&g, window(64), &cfg, s).unwrap().len()).sum();
        let expect = 20.0 * cfg.probe_rate * cfg.delta_t * road_pixels;
        assert!((n as f64 / expect - 1.0).abs() < 0.1, "{n} vs {expect}");
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = SimConfig { modality_mix: BTreeMap::from([("driving".into(), 0.5)]), ..SimConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = SimConfig { delta_t: -1.0, ..SimConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
