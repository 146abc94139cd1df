//! Web Mercator tile geometry, probe accumulation into count rasters, and
//! the log(1 + x) transform.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probes::ProbeRecord;

/// Latitude limit of the Web Mercator square, as used for validation.
pub const MAX_LAT: f64 = 85.0511;

/// Zoom level of a single raster pixel.
pub const PIXEL_ZOOM: u8 = 24;

/// Number of 30° heading buckets (HCRM channels).
pub const HEADING_BUCKETS: usize = 12;

/// The paper-scale window zoom: 128×128 zoom-24 pixels.
pub const WINDOW_ZOOM: u8 = 17;

/// A WGS84 coordinate inside the Web Mercator validity band.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lon: f64,
    pub lat: f64,
}

impl GeoPoint {
    /// Validates latitude and wraps longitude into [−180, 180).
    pub fn new(lon: f64, lat: f64) -> Result<Self> {
        if !lon.is_finite() || !lat.is_finite() {
            return Err(Error::Domain(format!("non-finite coordinate ({lon}, {lat})")));
        }
        if lat.abs() >= MAX_LAT {
            return Err(Error::Domain(format!("latitude {lat} outside the Web Mercator band")));
        }
        let mut lon = (lon + 180.0).rem_euclid(360.0) - 180.0;
        if lon >= 180.0 {
            lon -= 360.0;
        }
        Ok(Self { lon, lat })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TileCoord {
    pub zoom: u8,
    pub x: u64,
    pub y: u64,
}

impl TileCoord {
    pub fn new(zoom: u8, x: u64, y: u64) -> Result<Self> {
        if zoom > PIXEL_ZOOM {
            return Err(Error::Domain(format!("zoom {zoom} exceeds {PIXEL_ZOOM}")));
        }
        let n = 1u64 << zoom;
        if x >= n || y >= n {
            return Err(Error::Domain(format!("tile ({x}, {y}) outside zoom-{zoom} grid")));
        }
        Ok(Self { zoom, x, y })
    }

    /// Side length of this tile in zoom-24 pixels.
    pub fn pixel_extent(&self) -> usize {
        1usize << (PIXEL_ZOOM - self.zoom)
    }

    /// Zoom-24 pixel at row `i`, column `j` of this window.
    pub fn pixel(&self, i: usize, j: usize) -> (u64, u64) {
        let s = self.pixel_extent() as u64;
        (self.x * s + j as u64, self.y * s + i as u64)
    }
}

/// Window zoom whose tiles are `size` zoom-24 pixels on a side.
pub fn window_zoom_for(size: usize) -> Result<u8> {
    if !size.is_power_of_two() || size > 1 << PIXEL_ZOOM {
        return Err(Error::Domain(format!("window size {size} is not a power of two")));
    }
    Ok(PIXEL_ZOOM - size.trailing_zeros() as u8)
}

/// Fractional tile coordinates of `p` at `zoom`.
pub fn lonlat_to_frac(p: GeoPoint, zoom: u8) -> (f64, f64) {
    let n = (1u64 << zoom) as f64;
    let x = (p.lon + 180.0) / 360.0 * n;
    let y = (1.0 - p.lat.to_radians().tan().asinh() / std::f64::consts::PI) / 2.0 * n;
    (x, y)
}

/// Inverse of [`lonlat_to_frac`].
pub fn frac_to_lonlat(x: f64, y: f64, zoom: u8) -> GeoPoint {
    let n = (1u64 << zoom) as f64;
    let lon = x / n * 360.0 - 180.0;
    let lat = (std::f64::consts::PI * (1.0 - 2.0 * y / n)).sinh().atan().to_degrees();
    GeoPoint { lon, lat }
}

pub fn lonlat_to_tile(p: GeoPoint, zoom: u8) -> Result<TileCoord> {
    if zoom > PIXEL_ZOOM {
        return Err(Error::Domain(format!("zoom {zoom} exceeds {PIXEL_ZOOM}")));
    }
    if !(p.lat.abs() < MAX_LAT) {
        return Err(Error::Domain(format!("latitude {} outside the Web Mercator band", p.lat)));
    }
    let max = (1u64 << zoom) - 1;
    let (fx, fy) = lonlat_to_frac(p, zoom);
    let clamp = |v: f64| (v.floor().max(0.0) as u64).min(max);
    Ok(TileCoord { zoom, x: clamp(fx), y: clamp(fy) })
}

pub fn heading_to_bucket(heading: f64) -> Result<usize> {
    if !heading.is_finite() {
        return Err(Error::Domain(format!("heading {heading} is not finite")));
    }
    let h = heading.rem_euclid(360.0);
    // rem_euclid can round up to exactly 360 for tiny negative inputs
    Ok(((h / 30.0).floor() as usize).min(HEADING_BUCKETS - 1))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    Count,
    Lognorm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RasterMode {
    Crm,
    Hcrm,
}

impl RasterMode {
    pub fn channels(self) -> usize {
        match self {
            RasterMode::Crm => 1,
            RasterMode::Hcrm => HEADING_BUCKETS,
        }
    }
}

/// An `h × w × c` grid stored row-major in `(h, w, c)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct RasterImage {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub values: Vec<f64>,
    pub georef: Option<TileCoord>,
    pub space: Space,
}

impl RasterImage {
    pub fn zeros(h: usize, w: usize, c: usize, space: Space) -> Self {
        Self { h, w, c, values: vec![0.0; h * w * c], georef: None, space }
    }

    /// Checked constructor: values must be finite and non-negative.
    pub fn new(h: usize, w: usize, c: usize, values: Vec<f64>, space: Space) -> Result<Self> {
        if values.len() != h * w * c {
            return Err(Error::Contract(format!("{} values for a {h}×{w}×{c} raster", values.len())));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Contract(format!("raster value {v} is not a finite non-negative number")));
        }
        Ok(Self { h, w, c, values, georef: None, space })
    }

    pub fn with_georef(mut self, georef: TileCoord) -> Self {
        self.georef = Some(georef);
        self
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.w + j) * self.c + k
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.index(i, j, k)]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let idx = self.index(i, j, k);
        self.values[idx] = v;
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Rounds every value to the nearest binary32, the on-disk precision of
    /// lognorm rasters.
    pub fn round_to_binary32(mut self) -> Self {
        for v in &mut self.values {
            *v = f64::from(*v as f32);
        }
        self
    }

    /// Channel-first copy, `(c, h, w)`, as consumed by the networks.
    pub fn to_chw(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.values.len()];
        for i in 0..self.h {
            for j in 0..self.w {
                for k in 0..self.c {
                    out[(k * self.h + i) * self.w + j] = self.values[self.index(i, j, k)];
                }
            }
        }
        out
    }

    /// Inverse of [`RasterImage::to_chw`].
    pub fn from_chw(h: usize, w: usize, c: usize, chw: &[f64], space: Space) -> Self {
        assert_eq!(chw.len(), h * w * c);
        let mut values = vec![0.0; chw.len()];
        for k in 0..c {
            for i in 0..h {
                for j in 0..w {
                    values[(i * w + j) * c + k] = chw[(k * h + i) * w + j];
                }
            }
        }
        Self { h, w, c, values, georef: None, space }
    }
}

/// Accumulates probes of `modality` into a count raster over `window`.
///
/// The window may be any zoom in 17..=24; zoom 17 gives the standard
/// 128×128 image.
pub fn rasterize_probes(
    probes: &[ProbeRecord],
    window: TileCoord,
    mode: RasterMode,
    modality: &str,
) -> Result<RasterImage> {
    if !(WINDOW_ZOOM..=PIXEL_ZOOM).contains(&window.zoom) {
        return Err(Error::Domain(format!("window zoom {} outside {WINDOW_ZOOM}..={PIXEL_ZOOM}", window.zoom)));
    }
    let size = window.pixel_extent();
    let mut img = RasterImage::zeros(size, size, mode.channels(), Space::Count).with_georef(window);
    let s = size as u64;
    for p in probes.iter().filter(|p| p.modality == modality) {
        let Ok(pt) = GeoPoint::new(p.lon, p.lat) else { continue };
        let t = lonlat_to_tile(pt, PIXEL_ZOOM)?;
        if t.x / s != window.x || t.y / s != window.y {
            continue;
        }
        let (i, j) = ((t.y % s) as usize, (t.x % s) as usize);
        let k = match mode {
            RasterMode::Crm => 0,
            RasterMode::Hcrm => heading_to_bucket(p.heading)?,
        };
        let idx = img.index(i, j, k);
        img.values[idx] += 1.0;
    }
    Ok(img)
}

pub fn hcrm_to_crm(hcrm: &RasterImage) -> Result<RasterImage> {
    if hcrm.c != HEADING_BUCKETS {
        return Err(Error::Contract(format!("expected {HEADING_BUCKETS} channels, got {}", hcrm.c)));
    }
    if hcrm.space != Space::Count {
        return Err(Error::Contract("HCRM must be in count space".into()));
    }
    let values = hcrm.values.chunks_exact(HEADING_BUCKETS).map(|px| px.iter().sum()).collect();
    Ok(RasterImage { h: hcrm.h, w: hcrm.w, c: 1, values, georef: hcrm.georef, space: Space::Count })
}

pub fn lognorm_forward(x: &RasterImage) -> Result<RasterImage> {
    if x.space != Space::Count {
        return Err(Error::Contract("lognorm_forward expects a count-space raster".into()));
    }
    if let Some(v) = x.values.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::Contract(format!("negative or NaN count {v}")));
    }
    Ok(RasterImage { values: x.values.iter().map(|v| v.ln_1p()).collect(), space: Space::Lognorm, ..x.clone() })
}

/// `exp(x′) − 1`, clamped at zero.
pub fn lognorm_inverse(x: &RasterImage) -> RasterImage {
    RasterImage { values: x.values.iter().map(|v| v.exp_m1().max(0.0)).collect(), space: Space::Count, ..x.clone() }
}
