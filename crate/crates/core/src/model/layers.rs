//! Building blocks shared by the four networks.

use vaeinfo_tensor::{ConvGeom, Var};

use super::params::{Ctx, Init};

/// A "same"-padded convolution: output extent is `ceil(input / stride)`.
#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub out: usize,
    /// `(depth, height, width)`; depth is ignored by rank-4 inputs.
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub dilation: [usize; 3],
}

impl ConvSpec {
    pub fn k3(out: usize, volumetric: bool) -> Self {
        Self { out, kernel: [if volumetric { 3 } else { 1 }, 3, 3], stride: [1; 3], dilation: [1; 3] }
    }

    pub fn pointwise(out: usize) -> Self {
        Self { out, kernel: [1; 3], stride: [1; 3], dilation: [1; 3] }
    }

    pub fn strided(mut self, spatial: usize, depth: usize) -> Self {
        self.stride = [depth, spatial, spatial];
        self
    }

    pub fn dilated(mut self, d: usize) -> Self {
        self.dilation = [1, d, d];
        self
    }
}

pub fn conv<'t>(ctx: &Ctx<'t>, name: &str, x: Var<'t>, spec: ConvSpec) -> Var<'t> {
    let shape = x.shape();
    let cin = shape[1];
    let volumetric = shape.len() == 5;
    let kernel = if volumetric { spec.kernel } else { [1, spec.kernel[1], spec.kernel[2]] };
    let mut wshape = vec![spec.out, cin];
    if volumetric {
        wshape.push(kernel[0]);
    }
    wshape.extend_from_slice(&kernel[1..]);
    let fan_in = cin * kernel.iter().product::<usize>();
    let w = ctx.param(&format!("{name}.w"), &wshape, Init::He { fan_in });
    let pad = [0, 1, 2].map(|a| spec.dilation[a] * (kernel[a] - 1) / 2);
    let stride = if volumetric { spec.stride } else { [1, spec.stride[1], spec.stride[2]] };
    x.conv(&w, ConvGeom { stride, pad, dilation: spec.dilation })
}

/// Convolution, batch norm, ReLU.
pub fn conv_bn_relu<'t>(ctx: &Ctx<'t>, name: &str, x: Var<'t>, spec: ConvSpec) -> Var<'t> {
    let y = conv(ctx, name, x, spec);
    ctx.batch_norm(&format!("{name}.bn"), y).relu()
}

/// Adds a per-channel bias to an `[N, C, ...]` tensor.
pub fn channel_bias<'t>(ctx: &Ctx<'t>, name: &str, x: Var<'t>) -> Var<'t> {
    let shape = x.shape();
    let mut bshape = vec![1; shape.len()];
    bshape[1] = shape[1];
    let b = ctx.param(name, &[shape[1]], Init::Const(0.0));
    x + b.reshape(&bshape).broadcast_as(&shape)
}

/// Affine map of `[N, F]` to `[N, out]`.
pub fn dense<'t>(ctx: &Ctx<'t>, name: &str, x: Var<'t>, out: usize) -> Var<'t> {
    let shape = x.shape();
    let w = ctx.param(&format!("{name}.w"), &[shape[1], out], Init::He { fan_in: shape[1] });
    let b = ctx.param(&format!("{name}.b"), &[out], Init::Const(0.0));
    x.matmul(&w) + b.reshape(&[1, out]).broadcast_as(&[shape[0], out])
}

/// Mean over all axes after the channel axis: `[N, C, ...] → [N, C]`.
pub fn global_avg_pool(x: Var<'_>) -> Var<'_> {
    let shape = x.shape();
    let (n, c) = (shape[0], shape[1]);
    let len: usize = shape[2..].iter().product();
    x.reshape(&[n, c, len]).sum_axis(2).scale(1.0 / len as f64)
}

/// Four parallel branches concatenated on channels: 1×1; 1×1 → 3×3;
/// 1×1 → dilated 3×3; 3×3 average pool → 1×1. Each branch yields
/// `max(1, out / 4)` channels.
pub fn inception<'t>(ctx: &Ctx<'t>, name: &str, x: Var<'t>, out: usize) -> Var<'t> {
    let volumetric = x.shape().len() == 5;
    let bw = (out / 4).max(1);
    let b1 = conv_bn_relu(ctx, &format!("{name}.b1"), x, ConvSpec::pointwise(bw));
    let b2 = conv_bn_relu(ctx, &format!("{name}.b2a"), x, ConvSpec::pointwise(bw));
    let b2 = conv_bn_relu(ctx, &format!("{name}.b2b"), b2, ConvSpec::k3(bw, volumetric));
    let b3 = conv_bn_relu(ctx, &format!("{name}.b3a"), x, ConvSpec::pointwise(bw));
    let b3 = conv_bn_relu(ctx, &format!("{name}.b3b"), b3, ConvSpec::k3(bw, volumetric).dilated(2));
    let pooled = x.avg_pool_same([if volumetric { 3 } else { 1 }, 3, 3]);
    let b4 = conv_bn_relu(ctx, &format!("{name}.b4"), pooled, ConvSpec::pointwise(bw));
    Var::concat(&[b1, b2, b3, b4], 1)
}
