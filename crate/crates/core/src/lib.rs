//! Conditional generation of probe-density rasters from road networks.
//!
//! The crate covers the whole pipeline: Web Mercator tiling and probe
//! rasterization, a road/traffic simulator, the VAE-Info-cGAN networks and
//! their baselines, training, APND evaluation, and hyperplane-based latent
//! editing.

pub mod error;
pub mod eval;
pub mod grd;
pub mod latent_edit;
pub mod losses;
pub mod model;
pub mod probes;
pub mod raster;
pub mod rng;
pub mod sim;
pub mod train;

pub use error::{Error, Result};
pub use raster::{GeoPoint, RasterImage, RasterMode, Space, TileCoord};
