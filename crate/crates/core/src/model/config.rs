use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Convolution family of the attribute encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvKind {
    /// Channels are feature maps.
    Conv2d,
    /// Channels form a depth axis of a single-channel volume.
    Conv3d,
}

/// Network shapes. Channel widths follow `base_width · 2^level`, capped at
/// `max_width`, then multiplied by `width_scale` (minimum 1), where `level`
/// counts the stride-2 reductions applied so far.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_h: usize,
    pub image_w: usize,
    /// 1 for CRM, 12 for HCRM.
    pub channels: usize,
    pub d_a: usize,
    pub d_c: usize,
    /// Mixture components of the condition posterior.
    pub m: usize,
    /// Convolutions in the attribute encoder before its inception block.
    pub ae_depth: usize,
    pub ae_conv_kind: ConvKind,
    pub ce_use_inception: bool,
    pub skip_connections: bool,
    /// Resize-convolution stages of the generator, `log2(image_h)`.
    pub gen_upsample_stages: usize,
    /// Convolutions in the discriminator before its inception block.
    pub disc_depth: usize,
    pub width_scale: f64,
    pub base_width: usize,
    pub max_width: usize,
    /// One shared variance per mixture component instead of one per dimension.
    pub homoscedastic: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_h: 128,
            image_w: 128,
            channels: 1,
            d_a: 32,
            d_c: 32,
            m: 20,
            ae_depth: 15,
            ae_conv_kind: ConvKind::Conv2d,
            ce_use_inception: true,
            skip_connections: true,
            gen_upsample_stages: 7,
            disc_depth: 6,
            width_scale: 1.0,
            base_width: 32,
            max_width: 256,
            homoscedastic: false,
        }
    }
}

impl ModelConfig {
    /// Defaults for a square image of side `size` with `channels` channels;
    /// 12-channel inputs get a 3D attribute encoder.
    pub fn for_image(size: usize, channels: usize, width_scale: f64) -> Self {
        Self {
            image_h: size,
            image_w: size,
            channels,
            ae_conv_kind: if channels == 1 { ConvKind::Conv2d } else { ConvKind::Conv3d },
            gen_upsample_stages: size.trailing_zeros() as usize,
            width_scale,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Domain(msg));
        if self.image_h != self.image_w {
            return bad(format!("images must be square, got {}×{}", self.image_h, self.image_w));
        }
        if !self.image_h.is_power_of_two() || self.image_h < 8 {
            return bad(format!("image extent {} must be a power of two ≥ 8", self.image_h));
        }
        if self.gen_upsample_stages != self.image_h.trailing_zeros() as usize {
            return bad(format!(
                "gen_upsample_stages = {} but a {} image needs {}",
                self.gen_upsample_stages,
                self.image_h,
                self.image_h.trailing_zeros()
            ));
        }
        if self.channels == 0 || self.d_a == 0 || self.d_c == 0 || self.m == 0 {
            return bad("channels, d_a, d_c and m must be ≥ 1".into());
        }
        if self.ae_depth == 0 || self.disc_depth == 0 {
            return bad("encoder and discriminator depths must be ≥ 1".into());
        }
        if !(self.width_scale > 0.0 && self.width_scale.is_finite()) || self.base_width == 0 || self.max_width == 0 {
            return bad(format!("invalid width settings (scale {})", self.width_scale));
        }
        Ok(())
    }

    pub fn size(&self) -> usize {
        self.image_h
    }

    pub fn latent_dim(&self) -> usize {
        self.d_c + self.d_a
    }

    /// Channel width after `level` stride-2 reductions.
    pub fn width(&self, level: usize) -> usize {
        let raw = (self.base_width << level.min(16)).min(self.max_width);
        ((raw as f64 * self.width_scale).round() as usize).max(1)
    }
}
