//! Slice-level compute kernels used by the tape's forward and backward passes.

/// Stride, zero padding and dilation of a convolution, per spatial axis
/// `(depth, height, width)`. Two-dimensional convolutions use a depth of 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub dilation: [usize; 3],
}

impl Default for ConvGeom {
    fn default() -> Self {
        Self { stride: [1; 3], pad: [0; 3], dilation: [1; 3] }
    }
}

impl ConvGeom {
    /// Output extents for the given input and kernel extents.
    pub fn out_extent(&self, input: [usize; 3], kernel: [usize; 3]) -> [usize; 3] {
        let mut out = [0; 3];
        for i in 0..3 {
            let span = self.dilation[i] * (kernel[i] - 1) + 1;
            let padded = input[i] + 2 * self.pad[i];
            assert!(
                padded >= span,
                "kernel span {span} exceeds padded input {padded} on axis {i}"
            );
            out[i] = (padded - span) / self.stride[i] + 1;
        }
        out
    }
}

#[inline]
fn src_index(o: usize, k: usize, stride: usize, dil: usize, pad: usize, extent: usize) -> Option<usize> {
    let i = (o * stride + k * dil) as isize - pad as isize;
    if i >= 0 && (i as usize) < extent {
        Some(i as usize)
    } else {
        None
    }
}

/// Range `[lo, hi)` of output positions whose source index along one axis is
/// in bounds, and the source index of position `lo`.
#[inline]
fn valid_run(out: usize, k: usize, stride: usize, dil: usize, pad: usize, extent: usize) -> (usize, usize, usize) {
    let off = (k * dil) as isize - pad as isize;
    // smallest o with o*stride + off >= 0
    let lo = if off >= 0 { 0 } else { ((-off) as usize).div_ceil(stride) };
    // largest o with o*stride + off < extent
    let hi = if (extent as isize) <= off {
        0
    } else {
        ((extent as isize - off - 1) as usize / stride + 1).min(out)
    };
    let lo = lo.min(hi);
    let first = (lo as isize * stride as isize + off).max(0) as usize;
    (lo, hi, first)
}

/// Unfolds one example `[C, D, H, W]` into a `[C*kd*kh*kw, Do*Ho*Wo]` column matrix.
pub(crate) fn im2col(
    src: &[f64],
    channels: usize,
    dims: [usize; 3],
    kernel: [usize; 3],
    geom: &ConvGeom,
    out: [usize; 3],
    col: &mut [f64],
) {
    let [id, ih, iw] = dims;
    let [kd, kh, kw] = kernel;
    let [od, oh, ow] = out;
    let p = od * oh * ow;
    debug_assert_eq!(col.len(), channels * kd * kh * kw * p);
    let mut row = 0;
    for c in 0..channels {
        let plane = &src[c * id * ih * iw..(c + 1) * id * ih * iw];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let dst = &mut col[row * p..(row + 1) * p];
                    for oz in 0..od {
                        let iz = src_index(oz, kz, geom.stride[0], geom.dilation[0], geom.pad[0], id);
                        for oy in 0..oh {
                            let seg = &mut dst[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                            let iy = src_index(oy, ky, geom.stride[1], geom.dilation[1], geom.pad[1], ih);
                            match (iz, iy) {
                                (Some(iz), Some(iy)) => {
                                    let line = &plane[(iz * ih + iy) * iw..(iz * ih + iy + 1) * iw];
                                    let (lo, hi, first) = valid_run(ow, kx, geom.stride[2], geom.dilation[2], geom.pad[2], iw);
                                    seg[..lo].fill(0.0);
                                    seg[hi..].fill(0.0);
                                    let sx = geom.stride[2];
                                    if sx == 1 {
                                        seg[lo..hi].copy_from_slice(&line[first..first + hi - lo]);
                                    } else {
                                        for (i, v) in seg[lo..hi].iter_mut().enumerate() {
                                            *v = line[first + i * sx];
                                        }
                                    }
                                }
                                _ => seg.fill(0.0),
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters a column matrix back onto `[C, D, H, W]`, accumulating.
pub(crate) fn col2im(
    col: &[f64],
    channels: usize,
    dims: [usize; 3],
    kernel: [usize; 3],
    geom: &ConvGeom,
    out: [usize; 3],
    dst: &mut [f64],
) {
    let [id, ih, iw] = dims;
    let [kd, kh, kw] = kernel;
    let [od, oh, ow] = out;
    let p = od * oh * ow;
    let mut row = 0;
    for c in 0..channels {
        let plane = &mut dst[c * id * ih * iw..(c + 1) * id * ih * iw];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let src = &col[row * p..(row + 1) * p];
                    for oz in 0..od {
                        let Some(iz) = src_index(oz, kz, geom.stride[0], geom.dilation[0], geom.pad[0], id) else {
                            continue;
                        };
                        for oy in 0..oh {
                            let Some(iy) = src_index(oy, ky, geom.stride[1], geom.dilation[1], geom.pad[1], ih) else {
                                continue;
                            };
                            let seg = &src[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                            let line = &mut plane[(iz * ih + iy) * iw..(iz * ih + iy + 1) * iw];
                            let (lo, hi, first) = valid_run(ow, kx, geom.stride[2], geom.dilation[2], geom.pad[2], iw);
                            let sx = geom.stride[2];
                            if sx == 1 {
                                for (d, v) in line[first..first + hi - lo].iter_mut().zip(&seg[lo..hi]) {
                                    *d += v;
                                }
                            } else {
                                for (i, v) in seg[lo..hi].iter().enumerate() {
                                    line[first + i * sx] += v;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// `c = a · b + beta · c` where `a` is `[m, k]` (or `[k, m]` when `a_t`),
/// `b` is `[k, n]` (or `[n, k]` when `b_t`), all row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserted slice lengths cover every index reachable from the
    // given extents and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Stride-1 "same" average pooling over `[C, D, H, W]`, zero padding counted.
pub(crate) fn avg_pool_same(src: &[f64], channels: usize, dims: [usize; 3], kernel: [usize; 3], dst: &mut [f64]) {
    let [d, h, w] = dims;
    let r = [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2];
    let norm = 1.0 / (kernel[0] * kernel[1] * kernel[2]) as f64;
    for c in 0..channels {
        let base = c * d * h * w;
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for zz in z.saturating_sub(r[0])..(z + r[0] + 1).min(d) {
                        for yy in y.saturating_sub(r[1])..(y + r[1] + 1).min(h) {
                            let line = base + (zz * h + yy) * w;
                            for xx in x.saturating_sub(r[2])..(x + r[2] + 1).min(w) {
                                acc += src[line + xx];
                            }
                        }
                    }
                    dst[base + (z * h + y) * w + x] = acc * norm;
                }
            }
        }
    }
}

/// Adjoint of [`avg_pool_same`], accumulating into `dst`.
pub(crate) fn avg_pool_same_backward(grad: &[f64], channels: usize, dims: [usize; 3], kernel: [usize; 3], dst: &mut [f64]) {
    let [d, h, w] = dims;
    let r = [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2];
    let norm = 1.0 / (kernel[0] * kernel[1] * kernel[2]) as f64;
    for c in 0..channels {
        let base = c * d * h * w;
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let g = grad[base + (z * h + y) * w + x] * norm;
                    for zz in z.saturating_sub(r[0])..(z + r[0] + 1).min(d) {
                        for yy in y.saturating_sub(r[1])..(y + r[1] + 1).min(h) {
                            let line = base + (zz * h + yy) * w;
                            for xx in x.saturating_sub(r[2])..(x + r[2] + 1).min(w) {
                                dst[line + xx] += g;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Row-major strides for a shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Visits every index of `dst_shape`, passing the flat destination offset and
/// the flat offset into a source whose broadcast axes (extent 1) are pinned.
pub(crate) fn for_each_broadcast(src_shape: &[usize], dst_shape: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = dst_shape.len();
    let src_strides: Vec<usize> = strides(src_shape)
        .into_iter()
        .zip(src_shape)
        .map(|(s, &e)| if e == 1 { 0 } else { s })
        .collect();
    let total: usize = dst_shape.iter().product();
    if total == 0 {
        return;
    }
    let mut idx = vec![0usize; rank];
    let mut src_off = 0usize;
    for dst_off in 0..total {
        f(dst_off, src_off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src_off += src_strides[ax];
            if idx[ax] < dst_shape[ax] {
                break;
            }
            src_off -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_walk_matches_manual_indexing() {
        let src = [2, 1, 3];
        let dst = [2, 4, 3];
        let mut seen = Vec::new();
        for_each_broadcast(&src, &dst, |d, s| seen.push((d, s)));
        assert_eq!(seen.len(), 24);
        for (d, s) in seen {
            let (i, rem) = (d / 12, d % 12);
            let k = rem % 3;
            assert_eq!(s, i * 3 + k);
        }
    }

    #[test]
    fn conv_out_extent() {
        let g = ConvGeom { stride: [1, 2, 2], pad: [0, 1, 1], dilation: [1, 1, 1] };
        assert_eq!(g.out_extent([1, 32, 32], [1, 3, 3]), [1, 16, 16]);
        let g = ConvGeom { stride: [1; 3], pad: [0, 2, 2], dilation: [1, 2, 2] };
        assert_eq!(g.out_extent([1, 8, 8], [1, 3, 3]), [1, 8, 8]);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
        assert!((sigmoid(-800.0)).abs() < 1e-300);
    }
}
