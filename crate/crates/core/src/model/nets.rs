//! Attribute encoder, condition encoder, generator and discriminator.
//!
//! All image tensors are channel-first: `[N, C, H, W]`.

use vaeinfo_tensor::Var;

use super::config::{ConvKind, ModelConfig};
use super::layers::{channel_bias, conv, conv_bn_relu, dense, global_avg_pool, inception, ConvSpec};
use super::params::Ctx;

/// Attribute encoder: `[N, c, S, S] → [N, d_a]` in (0, 1).
///
/// Odd-indexed layers halve the resolution until 4×4; every fourth layer
/// starting at index 2 is dilated instead. The 3D variant views the channels
/// as depth and also halves depth on the reducing layers.
pub fn attribute_encoder<'t>(ctx: &Ctx<'t>, cfg: &ModelConfig, x: Var<'t>) -> Var<'t> {
    let shape = x.shape();
    let volumetric = cfg.ae_conv_kind == ConvKind::Conv3d;
    let mut h = if volumetric { x.reshape(&[shape[0], 1, shape[1], shape[2], shape[3]]) } else { x };
    let (mut res, mut depth, mut level) = (shape[2], if volumetric { shape[1] } else { 1 }, 0);
    for i in 0..cfg.ae_depth {
        let mut spec = ConvSpec::k3(0, volumetric);
        if i % 2 == 1 && res > 4 {
            let ds = if depth > 1 { 2 } else { 1 };
            spec = spec.strided(2, ds);
            depth = depth.div_ceil(ds);
            res /= 2;
            level += 1;
        } else if i % 4 == 2 {
            spec = spec.dilated(2);
        }
        spec.out = cfg.width(level);
        h = conv_bn_relu(ctx, &format!("ae.conv{i}"), h, spec);
    }
    h = inception(ctx, "ae.inception", h, cfg.width(level));
    dense(ctx, "ae.out", global_avg_pool(h), cfg.d_a).sigmoid()
}

/// Raw condition-encoder outputs.
pub struct ConditionVars<'t> {
    /// `[N, m]` mixture logits.
    pub logits: Var<'t>,
    /// `[N, m, d_c]`.
    pub means: Var<'t>,
    /// `[N, m, d_c]`, or `[N, m, 1]` when homoscedastic.
    pub logvar: Var<'t>,
    /// Feature maps at resolutions 2, 4, …, S (index k holds 2^(k+1)).
    pub skips: Vec<Var<'t>>,
}

/// Condition encoder over the road raster `[N, 1, S, S]`.
pub fn condition_encoder<'t>(ctx: &Ctx<'t>, cfg: &ModelConfig, y: Var<'t>) -> ConditionVars<'t> {
    let n = y.shape()[0];
    let mut res = y.shape()[2];
    let mut h = conv_bn_relu(ctx, "ce.conv0", y, ConvSpec::k3(cfg.width(0), false));
    let mut skips = vec![h];
    let mut level = 0;
    while res > 2 {
        level += 1;
        res /= 2;
        h = conv_bn_relu(ctx, &format!("ce.down{level}"), h, ConvSpec::k3(cfg.width(level), false).strided(2, 1));
        if res == 4 && cfg.ce_use_inception {
            h = inception(ctx, "ce.inception", h, cfg.width(level));
        }
        skips.push(h);
    }
    skips.reverse();
    let pooled = global_avg_pool(h);
    let (m, d) = (cfg.m, cfg.d_c);
    let logits = dense(ctx, "ce.weights", pooled, m);
    let means = dense(ctx, "ce.means", pooled, m * d).reshape(&[n, m, d]);
    let logvar = if cfg.homoscedastic {
        dense(ctx, "ce.logvar", pooled, m).reshape(&[n, m, 1])
    } else {
        dense(ctx, "ce.logvar", pooled, m * d).reshape(&[n, m, d])
    };
    ConditionVars { logits, means, logvar, skips }
}

/// Generator: `[N, d_c + d_a]` plus skips → `[N, c, S, S]`, non-negative.
///
/// Each stage is nearest-neighbour ×2 resize, optional skip concatenation,
/// then a 3×3 convolution with batch norm and ReLU.
pub fn generator<'t>(ctx: &Ctx<'t>, cfg: &ModelConfig, z: Var<'t>, skips: Option<&[Var<'t>]>) -> Var<'t> {
    let (n, d) = (z.shape()[0], z.shape()[1]);
    let stages = cfg.gen_upsample_stages;
    let mut h = z.reshape(&[n, d, 1, 1]);
    for s in 1..=stages {
        h = h.upsample2x();
        if let Some(skips) = skips {
            h = Var::concat(&[h, skips[s - 1]], 1);
        }
        h = conv_bn_relu(ctx, &format!("g.up{s}"), h, ConvSpec::k3(cfg.width(stages - s), false));
    }
    let out = conv(ctx, "g.out", h, ConvSpec::k3(cfg.channels, false));
    channel_bias(ctx, "g.out.b", out).softplus()
}

pub struct DiscVars<'t> {
    /// `[N, 1]`.
    pub logit: Var<'t>,
    /// `[N, d_a]` each, present when the Q head is built.
    pub q: Option<(Var<'t>, Var<'t>)>,
}

/// Discriminator over `[N, c + 1, S, S]` (sample and road raster stacked on
/// channels), with the Q head on the shared dense features when `with_q`.
pub fn discriminator<'t>(ctx: &Ctx<'t>, cfg: &ModelConfig, x: Var<'t>, with_q: bool) -> DiscVars<'t> {
    let mut res = x.shape()[2];
    let mut level = 0;
    let mut h = x;
    for i in 0..cfg.disc_depth {
        let mut spec = ConvSpec::k3(0, false);
        if res > 4 {
            spec = spec.strided(2, 1);
            res /= 2;
            level += 1;
        }
        spec.out = cfg.width(level);
        h = conv_bn_relu(ctx, &format!("d.conv{i}"), h, spec);
    }
    h = inception(ctx, "d.inception", h, cfg.width(level));
    let width = cfg.width(level);
    let f = dense(ctx, "d.fc10", global_avg_pool(h), width);
    let f = ctx.batch_norm("d.fc10.bn", f).relu();
    let logit = dense(ctx, "d.logit11b", f, 1);
    let q = with_q.then(|| {
        let g = dense(ctx, "q.fc11a1", f, width);
        let g = ctx.batch_norm("q.fc11a1.bn", g).relu();
        let out = dense(ctx, "q.fc11a2", g, 2 * cfg.d_a);
        (out.narrow(1, 0, cfg.d_a), out.narrow(1, cfg.d_a, cfg.d_a))
    });
    DiscVars { logit, q }
}
