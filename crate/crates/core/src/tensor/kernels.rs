//! Forward and backward kernels over raw `f32` slices.
//!
//! All convolutions are cross-correlations (no kernel flip). Inner loops run
//! over contiguous rows so the compiler can vectorize them; reductions that
//! feed statistics or scalar gradients accumulate in `f64`.
//!
//! Parallel sections split work so that every output element is written by
//! exactly one task with a fixed per-element accumulation order, which keeps
//! results bit-identical regardless of thread count.

use rayon::prelude::*;

/// Output-coordinate box (start, end) per spatial axis (d, h, w).
pub type Region = [(usize, usize); 3];

/// Work below this many output elements runs serially.
const PAR_THRESHOLD: usize = 1 << 14;

/// Geometry of a 3-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_d: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_d: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn in_vol(&self) -> usize {
        self.in_d * self.in_h * self.in_w
    }
    pub fn out_vol(&self) -> usize {
        self.out_d * self.out_h * self.out_w
    }
    pub fn full_region(&self) -> Region {
        [(0, self.out_d), (0, self.out_h), (0, self.out_w)]
    }
}

/// `(dim + 2*pad - k) / stride + 1` when integral and positive.
pub fn conv_out_extent(dim: usize, k: usize, pad: usize, stride: usize) -> Option<usize> {
    let padded = dim + 2 * pad;
    if padded < k || stride == 0 {
        return None;
    }
    let span = padded - k;
    if span % stride != 0 {
        return None;
    }
    Some(span / stride + 1)
}

#[inline]
fn axpy(w: f32, x: &[f32], out: &mut [f32]) {
    for (o, &xv) in out.iter_mut().zip(x.iter()) {
        *o = xv.mul_add(w, *o);
    }
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (ac, bc) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            lanes[l] = ac[l].mul_add(bc[l], lanes[l]);
        }
    }
    let mut s = lanes.iter().sum::<f32>();
    for i in chunks * 8..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Valid output range along one axis for a kernel offset, intersected with a
/// region: keeps `0 <= o*stride + k_off - pad < in_extent`.
#[inline]
fn valid_out_range(
    region: (usize, usize),
    k_off: usize,
    pad: usize,
    stride: usize,
    in_extent: usize,
) -> (usize, usize) {
    // o*stride + k_off - pad >= 0  =>  o >= ceil((pad - k_off)/stride)
    let lo = if pad > k_off {
        (pad - k_off).div_ceil(stride)
    } else {
        0
    };
    // o*stride + k_off - pad < in_extent  =>  o <= (in_extent-1+pad-k_off)/stride
    let hi = if in_extent + pad > k_off {
        (in_extent - 1 + pad - k_off) / stride + 1
    } else {
        0
    };
    (region.0.max(lo), region.1.min(hi))
}

/// Dense 3-D convolution forward. When `region` is given, only output cells
/// inside the box are computed; everything outside is left at 0.
pub fn conv3d_fwd(
    x: &[f32],
    w: &[f32],
    bias: &[f32],
    g: &ConvGeom,
    region: &Region,
    out: &mut [f32],
) {
    let in_vol = g.in_vol();
    let out_vol = g.out_vol();
    let k3 = g.k * g.k * g.k;
    debug_assert_eq!(out.len(), g.batch * g.c_out * out_vol);

    let run = |bc: usize, out_slab: &mut [f32]| {
        let b = bc / g.c_out;
        let co = bc % g.c_out;
        out_slab.fill(0.0);
        for od in region[0].0..region[0].1 {
            for oh in region[1].0..region[1].1 {
                let row = od * g.out_h * g.out_w + oh * g.out_w;
                out_slab[row + region[2].0..row + region[2].1].fill(bias[co]);
            }
        }
        for ci in 0..g.c_in {
            let x_ch = &x[(b * g.c_in + ci) * in_vol..][..in_vol];
            let w_f = &w[(co * g.c_in + ci) * k3..][..k3];
            accum_channel(x_ch, w_f, g, region, out_slab);
        }
    };

    let total = g.batch * g.c_out * out_vol;
    if total >= PAR_THRESHOLD {
        out.par_chunks_mut(out_vol)
            .enumerate()
            .for_each(|(bc, slab)| run(bc, slab));
    } else {
        for (bc, slab) in out.chunks_mut(out_vol).enumerate() {
            run(bc, slab);
        }
    }
}

/// Accumulate one input channel through one k³ filter into an output slab.
#[inline]
fn accum_channel(x_ch: &[f32], w_f: &[f32], g: &ConvGeom, region: &Region, out_slab: &mut [f32]) {
    for kd in 0..g.k {
        let (od_lo, od_hi) = valid_out_range(region[0], kd, g.pad, g.stride, g.in_d);
        for kh in 0..g.k {
            let (oh_lo, oh_hi) = valid_out_range(region[1], kh, g.pad, g.stride, g.in_h);
            for kw in 0..g.k {
                let wv = w_f[(kd * g.k + kh) * g.k + kw];
                let (ow_lo, ow_hi) = valid_out_range(region[2], kw, g.pad, g.stride, g.in_w);
                if ow_lo >= ow_hi {
                    continue;
                }
                for od in od_lo..od_hi {
                    let id = od * g.stride + kd - g.pad;
                    for oh in oh_lo..oh_hi {
                        let ih = oh * g.stride + kh - g.pad;
                        let out_row = od * g.out_h * g.out_w + oh * g.out_w;
                        let in_row = id * g.in_h * g.in_w + ih * g.in_w;
                        if g.stride == 1 {
                            let off = ow_lo + kw - g.pad;
                            axpy(
                                wv,
                                &x_ch[in_row + off..in_row + off + (ow_hi - ow_lo)],
                                &mut out_slab[out_row + ow_lo..out_row + ow_hi],
                            );
                        } else {
                            for ow in ow_lo..ow_hi {
                                let iw = ow * g.stride + kw - g.pad;
                                out_slab[out_row + ow] += wv * x_ch[in_row + iw];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient w.r.t. the convolution input. `dout` is zero outside `region`.
pub fn conv3d_bwd_x(
    dout: &[f32],
    w: &[f32],
    g: &ConvGeom,
    region: &Region,
    dx: &mut [f32],
) {
    let in_vol = g.in_vol();
    let out_vol = g.out_vol();
    let k3 = g.k * g.k * g.k;

    let run = |bc: usize, dx_slab: &mut [f32]| {
        let b = bc / g.c_in;
        let ci = bc % g.c_in;
        for co in 0..g.c_out {
            let d_ch = &dout[(b * g.c_out + co) * out_vol..][..out_vol];
            let w_f = &w[(co * g.c_in + ci) * k3..][..k3];
            for kd in 0..g.k {
                let (od_lo, od_hi) = valid_out_range(region[0], kd, g.pad, g.stride, g.in_d);
                for kh in 0..g.k {
                    let (oh_lo, oh_hi) = valid_out_range(region[1], kh, g.pad, g.stride, g.in_h);
                    for kw in 0..g.k {
                        let wv = w_f[(kd * g.k + kh) * g.k + kw];
                        let (ow_lo, ow_hi) =
                            valid_out_range(region[2], kw, g.pad, g.stride, g.in_w);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        for od in od_lo..od_hi {
                            let id = od * g.stride + kd - g.pad;
                            for oh in oh_lo..oh_hi {
                                let ih = oh * g.stride + kh - g.pad;
                                let out_row = od * g.out_h * g.out_w + oh * g.out_w;
                                let in_row = id * g.in_h * g.in_w + ih * g.in_w;
                                if g.stride == 1 {
                                    let off = ow_lo + kw - g.pad;
                                    axpy(
                                        wv,
                                        &d_ch[out_row + ow_lo..out_row + ow_hi],
                                        &mut dx_slab[in_row + off..in_row + off + (ow_hi - ow_lo)],
                                    );
                                } else {
                                    for ow in ow_lo..ow_hi {
                                        let iw = ow * g.stride + kw - g.pad;
                                        dx_slab[in_row + iw] += wv * d_ch[out_row + ow];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    };

    let total = g.batch * g.c_in * in_vol;
    if total >= PAR_THRESHOLD {
        dx.par_chunks_mut(in_vol)
            .enumerate()
            .for_each(|(bc, slab)| run(bc, slab));
    } else {
        for (bc, slab) in dx.chunks_mut(in_vol).enumerate() {
            run(bc, slab);
        }
    }
}

/// Gradients w.r.t. convolution weights and bias.
pub fn conv3d_bwd_w(
    x: &[f32],
    dout: &[f32],
    g: &ConvGeom,
    region: &Region,
    dw: &mut [f32],
    db: &mut [f32],
) {
    let in_vol = g.in_vol();
    let out_vol = g.out_vol();
    let k3 = g.k * g.k * g.k;
    let filter_len = g.c_in * k3;

    let run = |co: usize, dw_f: &mut [f32]| {
        for ci in 0..g.c_in {
            for kd in 0..g.k {
                let (od_lo, od_hi) = valid_out_range(region[0], kd, g.pad, g.stride, g.in_d);
                for kh in 0..g.k {
                    let (oh_lo, oh_hi) = valid_out_range(region[1], kh, g.pad, g.stride, g.in_h);
                    for kw in 0..g.k {
                        let (ow_lo, ow_hi) =
                            valid_out_range(region[2], kw, g.pad, g.stride, g.in_w);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        let mut acc = 0f64;
                        for b in 0..g.batch {
                            let d_ch = &dout[(b * g.c_out + co) * out_vol..][..out_vol];
                            let x_ch = &x[(b * g.c_in + ci) * in_vol..][..in_vol];
                            for od in od_lo..od_hi {
                                let id = od * g.stride + kd - g.pad;
                                for oh in oh_lo..oh_hi {
                                    let ih = oh * g.stride + kh - g.pad;
                                    let out_row = od * g.out_h * g.out_w + oh * g.out_w;
                                    let in_row = id * g.in_h * g.in_w + ih * g.in_w;
                                    if g.stride == 1 {
                                        let off = ow_lo + kw - g.pad;
                                        acc += dot(
                                            &d_ch[out_row + ow_lo..out_row + ow_hi],
                                            &x_ch[in_row + off..in_row + off + (ow_hi - ow_lo)],
                                        ) as f64;
                                    } else {
                                        for ow in ow_lo..ow_hi {
                                            let iw = ow * g.stride + kw - g.pad;
                                            acc += (d_ch[out_row + ow] * x_ch[in_row + iw]) as f64;
                                        }
                                    }
                                }
                            }
                        }
                        dw_f[ci * k3 + (kd * g.k + kh) * g.k + kw] += acc as f32;
                    }
                }
            }
        }
    };

    if g.batch * g.c_out * out_vol >= PAR_THRESHOLD {
        dw.par_chunks_mut(filter_len)
            .enumerate()
            .for_each(|(co, f)| run(co, f));
    } else {
        for (co, f) in dw.chunks_mut(filter_len).enumerate() {
            run(co, f);
        }
    }

    for co in 0..g.c_out {
        let mut acc = 0f64;
        for b in 0..g.batch {
            let d_ch = &dout[(b * g.c_out + co) * out_vol..][..out_vol];
            for od in region[0].0..region[0].1 {
                for oh in region[1].0..region[1].1 {
                    let row = od * g.out_h * g.out_w + oh * g.out_w;
                    for v in &d_ch[row + region[2].0..row + region[2].1] {
                        acc += *v as f64;
                    }
                }
            }
        }
        db[co] += acc as f32;
    }
}

/// Depthwise 3-D convolution forward: one k³ filter per channel.
pub fn depthwise_fwd(x: &[f32], w: &[f32], bias: &[f32], g: &ConvGeom, out: &mut [f32]) {
    debug_assert_eq!(g.c_in, g.c_out);
    let in_vol = g.in_vol();
    let out_vol = g.out_vol();
    let k3 = g.k * g.k * g.k;
    let region = g.full_region();

    let run = |bc: usize, out_slab: &mut [f32]| {
        let c = bc % g.c_out;
        out_slab.fill(bias[c]);
        let x_ch = &x[bc * in_vol..][..in_vol];
        let w_f = &w[c * k3..][..k3];
        accum_channel(x_ch, w_f, g, &region, out_slab);
    };

    if g.batch * g.c_out * out_vol >= PAR_THRESHOLD {
        out.par_chunks_mut(out_vol)
            .enumerate()
            .for_each(|(bc, slab)| run(bc, slab));
    } else {
        for (bc, slab) in out.chunks_mut(out_vol).enumerate() {
            run(bc, slab);
        }
    }
}

/// Depthwise backward: input, weight, and bias gradients in one pass over
/// channels (each channel is independent).
pub fn depthwise_bwd(
    x: &[f32],
    dout: &[f32],
    w: &[f32],
    g: &ConvGeom,
    dx: &mut [f32],
    dw: &mut [f32],
    db: &mut [f32],
) {
    let in_vol = g.in_vol();
    let out_vol = g.out_vol();
    let k3 = g.k * g.k * g.k;
    let region = g.full_region();

    // dx: each (b, c) slab independent.
    let run_dx = |bc: usize, dx_slab: &mut [f32]| {
        let c = bc % g.c_out;
        let d_ch = &dout[bc * out_vol..][..out_vol];
        let w_f = &w[c * k3..][..k3];
        for kd in 0..g.k {
            let (od_lo, od_hi) = valid_out_range(region[0], kd, g.pad, g.stride, g.in_d);
            for kh in 0..g.k {
                let (oh_lo, oh_hi) = valid_out_range(region[1], kh, g.pad, g.stride, g.in_h);
                for kw in 0..g.k {
                    let wv = w_f[(kd * g.k + kh) * g.k + kw];
                    let (ow_lo, ow_hi) = valid_out_range(region[2], kw, g.pad, g.stride, g.in_w);
                    if ow_lo >= ow_hi {
                        continue;
                    }
                    for od in od_lo..od_hi {
                        let id = od * g.stride + kd - g.pad;
                        for oh in oh_lo..oh_hi {
                            let ih = oh * g.stride + kh - g.pad;
                            let out_row = od * g.out_h * g.out_w + oh * g.out_w;
                            let in_row = id * g.in_h * g.in_w + ih * g.in_w;
                            if g.stride == 1 {
                                let off = ow_lo + kw - g.pad;
                                axpy(
                                    wv,
                                    &d_ch[out_row + ow_lo..out_row + ow_hi],
                                    &mut dx_slab[in_row + off..in_row + off + (ow_hi - ow_lo)],
                                );
                            } else {
                                for ow in ow_lo..ow_hi {
                                    let iw = ow * g.stride + kw - g.pad;
                                    dx_slab[in_row + iw] += wv * d_ch[out_row + ow];
                                }
                            }
                        }
                    }
                }
            }
        }
    };

    if g.batch * g.c_in * in_vol >= PAR_THRESHOLD {
        dx.par_chunks_mut(in_vol)
            .enumerate()
            .for_each(|(bc, slab)| run_dx(bc, slab));
    } else {
        for (bc, slab) in dx.chunks_mut(in_vol).enumerate() {
            run_dx(bc, slab);
        }
    }

    // dw, db: reduce over batch per channel.
    for c in 0..g.c_out {
        let mut bias_acc = 0f64;
        for kd in 0..g.k {
            let (od_lo, od_hi) = valid_out_range(region[0], kd, g.pad, g.stride, g.in_d);
            for kh in 0..g.k {
                let (oh_lo, oh_hi) = valid_out_range(region[1], kh, g.pad, g.stride, g.in_h);
                for kw in 0..g.k {
                    let (ow_lo, ow_hi) = valid_out_range(region[2], kw, g.pad, g.stride, g.in_w);
                    let mut acc = 0f64;
                    for b in 0..g.batch {
                        let d_ch = &dout[(b * g.c_out + c) * out_vol..][..out_vol];
                        let x_ch = &x[(b * g.c_in + c) * in_vol..][..in_vol];
                        for od in od_lo..od_hi {
                            let id = od * g.stride + kd - g.pad;
                            for oh in oh_lo..oh_hi {
                                let ih = oh * g.stride + kh - g.pad;
                                let out_row = od * g.out_h * g.out_w + oh * g.out_w;
                                let in_row = id * g.in_h * g.in_w + ih * g.in_w;
                                if g.stride == 1 && ow_lo < ow_hi {
                                    let off = ow_lo + kw - g.pad;
                                    acc += dot(
                                        &d_ch[out_row + ow_lo..out_row + ow_hi],
                                        &x_ch[in_row + off..in_row + off + (ow_hi - ow_lo)],
                                    ) as f64;
                                } else {
                                    for ow in ow_lo..ow_hi {
                                        let iw = ow * g.stride + kw - g.pad;
                                        acc += (d_ch[out_row + ow] * x_ch[in_row + iw]) as f64;
                                    }
                                }
                            }
                        }
                    }
                    dw[c * k3 + (kd * g.k + kh) * g.k + kw] += acc as f32;
                }
            }
        }
        for b in 0..g.batch {
            for v in &dout[(b * g.c_out + c) * out_vol..][..out_vol] {
                bias_acc += *v as f64;
            }
        }
        db[c] += bias_acc as f32;
    }
}

/// Max pooling forward; records the argmax (first occurrence on ties) as a
/// linear index into the (b, c) spatial slab.
#[allow(clippy::too_many_arguments)]
pub fn maxpool_fwd(
    x: &[f32],
    channels: usize,
    in_dims: [usize; 3],
    k: usize,
    s: usize,
    out_dims: [usize; 3],
    out: &mut [f32],
    argmax: &mut [u32],
) {
    let in_vol = in_dims.iter().product::<usize>();
    let out_vol = out_dims.iter().product::<usize>();
    assert!(in_vol < u32::MAX as usize);
    let slabs = x.len() / in_vol;
    debug_assert_eq!(slabs % channels.max(1), 0);
    for bc in 0..slabs {
        let x_ch = &x[bc * in_vol..][..in_vol];
        let o_base = bc * out_vol;
        for od in 0..out_dims[0] {
            for oh in 0..out_dims[1] {
                for ow in 0..out_dims[2] {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0u32;
                    for kd in 0..k {
                        let id = od * s + kd;
                        for kh in 0..k {
                            let ih = oh * s + kh;
                            let row = id * in_dims[1] * in_dims[2] + ih * in_dims[2];
                            for kw in 0..k {
                                let iw = ow * s + kw;
                                let v = x_ch[row + iw];
                                if v > best {
                                    best = v;
                                    best_idx = (row + iw) as u32;
                                }
                            }
                        }
                    }
                    let oi = (od * out_dims[1] + oh) * out_dims[2] + ow;
                    out[o_base + oi] = best;
                    argmax[o_base + oi] = best_idx;
                }
            }
        }
    }
}

/// Max pooling backward: route each output gradient to its argmax.
pub fn maxpool_bwd(dout: &[f32], argmax: &[u32], in_vol: usize, out_vol: usize, dx: &mut [f32]) {
    for bc in 0..dout.len() / out_vol {
        let d = &dout[bc * out_vol..][..out_vol];
        let a = &argmax[bc * out_vol..][..out_vol];
        let dx_ch = &mut dx[bc * in_vol..][..in_vol];
        for (g, &idx) in d.iter().zip(a.iter()) {
            dx_ch[idx as usize] += *g;
        }
    }
}

/// Global average pool over the spatial axes of (B, C, D, H, W).
pub fn gap_fwd(x: &[f32], vol: usize, out: &mut [f32]) {
    for (bc, o) in out.iter_mut().enumerate() {
        let mut acc = 0f64;
        for v in &x[bc * vol..][..vol] {
            acc += *v as f64;
        }
        *o = (acc / vol as f64) as f32;
    }
}

pub fn gap_bwd(dout: &[f32], vol: usize, dx: &mut [f32]) {
    for (bc, g) in dout.iter().enumerate() {
        let gv = *g / vol as f32;
        for d in &mut dx[bc * vol..][..vol] {
            *d += gv;
        }
    }
}

/// Per-channel batch statistics over (B, spatial) of a (B, C, spatial)
/// layout, population variance, `f64` accumulation.
pub fn batch_stats(x: &[f32], batch: usize, channels: usize, vol: usize) -> (Vec<f32>, Vec<f32>) {
    let n = (batch * vol) as f64;
    let mut mean = vec![0f32; channels];
    let mut var = vec![0f32; channels];
    for c in 0..channels {
        let mut s = 0f64;
        let mut s2 = 0f64;
        for b in 0..batch {
            for v in &x[(b * channels + c) * vol..][..vol] {
                let vf = *v as f64;
                s += vf;
                s2 += vf * vf;
            }
        }
        let m = s / n;
        mean[c] = m as f32;
        var[c] = ((s2 / n - m * m).max(0.0)) as f32;
    }
    (mean, var)
}

/// Batchnorm forward given per-channel mean/var: writes `xhat` and the
/// affine output.
#[allow(clippy::too_many_arguments)]
pub fn bn_fwd(
    x: &[f32],
    batch: usize,
    channels: usize,
    vol: usize,
    mean: &[f32],
    var: &[f32],
    gamma: &[f32],
    beta: &[f32],
    eps: f32,
    xhat: &mut [f32],
    out: &mut [f32],
    inv_std: &mut [f32],
) {
    for c in 0..channels {
        inv_std[c] = 1.0 / (var[c] + eps).sqrt();
    }
    for b in 0..batch {
        for c in 0..channels {
            let base = (b * channels + c) * vol;
            let (m, is, g, bt) = (mean[c], inv_std[c], gamma[c], beta[c]);
            for i in base..base + vol {
                let xh = (x[i] - m) * is;
                xhat[i] = xh;
                out[i] = xh.mul_add(g, bt);
            }
        }
    }
}

/// Batchnorm backward (training mode, batch statistics).
#[allow(clippy::too_many_arguments)]
pub fn bn_bwd_train(
    dout: &[f32],
    xhat: &[f32],
    inv_std: &[f32],
    gamma: &[f32],
    batch: usize,
    channels: usize,
    vol: usize,
    dx: &mut [f32],
    dgamma: &mut [f32],
    dbeta: &mut [f32],
) {
    let n = (batch * vol) as f64;
    for c in 0..channels {
        let mut sum_dy = 0f64;
        let mut sum_dy_xhat = 0f64;
        for b in 0..batch {
            let base = (b * channels + c) * vol;
            for i in base..base + vol {
                sum_dy += dout[i] as f64;
                sum_dy_xhat += (dout[i] * xhat[i]) as f64;
            }
        }
        dgamma[c] += sum_dy_xhat as f32;
        dbeta[c] += sum_dy as f32;
        let g_is = gamma[c] as f64 * inv_std[c] as f64;
        for b in 0..batch {
            let base = (b * channels + c) * vol;
            for i in base..base + vol {
                let term =
                    dout[i] as f64 - sum_dy / n - xhat[i] as f64 * (sum_dy_xhat / n);
                dx[i] += (g_is * term) as f32;
            }
        }
    }
}

/// Batchnorm backward (eval mode, frozen statistics: a per-channel affine).
#[allow(clippy::too_many_arguments)]
pub fn bn_bwd_eval(
    dout: &[f32],
    xhat: &[f32],
    inv_std: &[f32],
    gamma: &[f32],
    batch: usize,
    channels: usize,
    vol: usize,
    dx: &mut [f32],
    dgamma: &mut [f32],
    dbeta: &mut [f32],
) {
    for c in 0..channels {
        let mut sum_dy = 0f64;
        let mut sum_dy_xhat = 0f64;
        let scale = gamma[c] * inv_std[c];
        for b in 0..batch {
            let base = (b * channels + c) * vol;
            for i in base..base + vol {
                sum_dy += dout[i] as f64;
                sum_dy_xhat += (dout[i] * xhat[i]) as f64;
                dx[i] += scale * dout[i];
            }
        }
        dgamma[c] += sum_dy_xhat as f32;
        dbeta[c] += sum_dy as f32;
    }
}

const GELU_C: f32 = 0.797_884_57; // sqrt(2/pi)
const GELU_A: f32 = 0.044715;

pub fn gelu_fwd(x: &[f32], out: &mut [f32]) {
    for (o, &v) in out.iter_mut().zip(x.iter()) {
        let u = GELU_C * (v + GELU_A * v * v * v);
        *o = 0.5 * v * (1.0 + u.tanh());
    }
}

pub fn gelu_bwd(x: &[f32], dout: &[f32], dx: &mut [f32]) {
    for ((d, &v), &g) in dx.iter_mut().zip(x.iter()).zip(dout.iter()) {
        let u = GELU_C * (v + GELU_A * v * v * v);
        let t = u.tanh();
        let sech2 = 1.0 - t * t;
        let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
        *d += g * (0.5 * (1.0 + t) + 0.5 * v * sech2 * du);
    }
}

pub fn sigmoid_fwd(x: &[f32], out: &mut [f32]) {
    for (o, &v) in out.iter_mut().zip(x.iter()) {
        *o = 1.0 / (1.0 + (-v).exp());
    }
}

pub fn sigmoid_bwd(y: &[f32], dout: &[f32], dx: &mut [f32]) {
    for ((d, &yv), &g) in dx.iter_mut().zip(y.iter()).zip(dout.iter()) {
        *d += g * yv * (1.0 - yv);
    }
}

/// Affine map forward: out (B, F_out) = x (B, F_in) · wᵀ + b.
pub fn linear_fwd(x: &[f32], w: &[f32], bias: &[f32], batch: usize, f_in: usize, f_out: usize, out: &mut [f32]) {
    for b in 0..batch {
        let xr = &x[b * f_in..][..f_in];
        for fo in 0..f_out {
            out[b * f_out + fo] = bias[fo] + dot(xr, &w[fo * f_in..][..f_in]);
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn linear_bwd(
    x: &[f32],
    dout: &[f32],
    w: &[f32],
    batch: usize,
    f_in: usize,
    f_out: usize,
    dx: &mut [f32],
    dw: &mut [f32],
    db: &mut [f32],
) {
    for b in 0..batch {
        let dr = &dout[b * f_out..][..f_out];
        let xr = &x[b * f_in..][..f_in];
        let dxr = &mut dx[b * f_in..][..f_in];
        for fo in 0..f_out {
            let g = dr[fo];
            axpy(g, &w[fo * f_in..][..f_in], dxr);
            axpy(g, xr, &mut dw[fo * f_in..][..f_in]);
            db[fo] += g;
        }
    }
}

/// Mean cross-entropy over a batch of logits with integer labels.
/// Returns the loss and writes softmax probabilities for the backward pass.
pub fn softmax_ce_fwd(logits: &[f32], labels: &[usize], classes: usize, probs: &mut [f32]) -> f32 {
    let batch = labels.len();
    let mut total = 0f64;
    for (b, &y) in labels.iter().enumerate() {
        let row = &logits[b * classes..][..classes];
        let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let mut z = 0f64;
        for &v in row {
            z += ((v as f64) - m).exp();
        }
        let lse = m + z.ln();
        total += lse - row[y] as f64;
        for (k, &v) in row.iter().enumerate() {
            probs[b * classes + k] = (((v as f64) - lse).exp()) as f32;
        }
    }
    (total / batch as f64) as f32
}

pub fn softmax_ce_bwd(probs: &[f32], labels: &[usize], classes: usize, gscale: f32, dlogits: &mut [f32]) {
    let inv_b = gscale / labels.len() as f32;
    for (b, &y) in labels.iter().enumerate() {
        for k in 0..classes {
            let p = probs[b * classes + k];
            let t = if k == y { 1.0 } else { 0.0 };
            dlogits[b * classes + k] += (p - t) * inv_b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv3d(
        x: &[f32],
        w: &[f32],
        bias: &[f32],
        g: &ConvGeom,
    ) -> Vec<f32> {
        let mut out = vec![0f32; g.batch * g.c_out * g.out_vol()];
        for b in 0..g.batch {
            for co in 0..g.c_out {
                for od in 0..g.out_d {
                    for oh in 0..g.out_h {
                        for ow in 0..g.out_w {
                            let mut acc = bias[co] as f64;
                            for ci in 0..g.c_in {
                                for kd in 0..g.k {
                                    for kh in 0..g.k {
                                        for kw in 0..g.k {
                                            let id = od * g.stride + kd;
                                            let ih = oh * g.stride + kh;
                                            let iw = ow * g.stride + kw;
                                            if id < g.pad || ih < g.pad || iw < g.pad {
                                                continue;
                                            }
                                            let (id, ih, iw) = (id - g.pad, ih - g.pad, iw - g.pad);
                                            if id >= g.in_d || ih >= g.in_h || iw >= g.in_w {
                                                continue;
                                            }
                                            let xi = ((b * g.c_in + ci) * g.in_d + id) * g.in_h * g.in_w
                                                + ih * g.in_w
                                                + iw;
                                            let wi = ((co * g.c_in + ci) * g.k + kd) * g.k * g.k
                                                + kh * g.k
                                                + kw;
                                            acc += (x[xi] * w[wi]) as f64;
                                        }
                                    }
                                }
                            }
                            let oi = ((b * g.c_out + co) * g.out_d + od) * g.out_h * g.out_w
                                + oh * g.out_w
                                + ow;
                            out[oi] = acc as f32;
                        }
                    }
                }
            }
        }
        out
    }

    fn geom(b: usize, ci: usize, co: usize, d: usize, k: usize, s: usize, p: usize) -> ConvGeom {
        let o = conv_out_extent(d, k, p, s).unwrap();
        ConvGeom {
            batch: b,
            c_in: ci,
            c_out: co,
            k,
            stride: s,
            pad: p,
            in_d: d,
            in_h: d,
            in_w: d,
            out_d: o,
            out_h: o,
            out_w: o,
        }
    }

    #[test]
    fn conv_matches_naive_reference() {
        let mut seed = 1234u32;
        let mut next = move || {
            seed = seed.wrapping_mul(1664525).wrapping_add(1013904223);
            (seed >> 8) as f32 / (1 << 24) as f32 - 0.5
        };
        for &(b, ci, co, d, k, s, p) in
            &[(1, 1, 1, 3, 3, 1, 1), (2, 3, 4, 4, 3, 1, 1), (1, 2, 2, 5, 3, 2, 0), (2, 2, 3, 4, 1, 1, 0)]
        {
            let g = geom(b, ci, co, d, k, s, p);
            let x: Vec<f32> = (0..b * ci * g.in_vol()).map(|_| next()).collect();
            let w: Vec<f32> = (0..co * ci * k * k * k).map(|_| next()).collect();
            let bias: Vec<f32> = (0..co).map(|_| next()).collect();
            let mut out = vec![0f32; b * co * g.out_vol()];
            conv3d_fwd(&x, &w, &bias, &g, &g.full_region(), &mut out);
            let want = naive_conv3d(&x, &w, &bias, &g);
            for (a, e) in out.iter().zip(&want) {
                assert!((a - e).abs() <= 1e-5 * e.abs().max(1.0), "{a} vs {e}");
            }
        }
    }

    #[test]
    fn conv_all_ones_k3_sums_to_27() {
        let g = geom(1, 1, 1, 3, 3, 1, 0);
        let x = vec![1f32; 27];
        let w = vec![1f32; 27];
        let mut out = vec![0f32; 1];
        conv3d_fwd(&x, &w, &[0.0], &g, &g.full_region(), &mut out);
        assert_eq!(out[0], 27.0);
    }

    #[test]
    fn conv_scalar_affine() {
        // 1x1x1x1x1 input [2], k=1 weight [3], bias [1] -> [7]
        let g = geom(1, 1, 1, 1, 1, 1, 0);
        let mut out = vec![0f32; 1];
        conv3d_fwd(&[2.0], &[3.0], &[1.0], &g, &g.full_region(), &mut out);
        assert_eq!(out[0], 7.0);
    }

    #[test]
    fn region_matches_dense_inside() {
        let g = geom(1, 2, 2, 4, 3, 1, 1);
        let x: Vec<f32> = (0..2 * 64).map(|i| (i as f32 * 0.37).sin()).collect();
        let w: Vec<f32> = (0..2 * 2 * 27).map(|i| (i as f32 * 0.11).cos()).collect();
        let bias = [0.25, -0.5];
        let mut dense = vec![0f32; 2 * 64];
        conv3d_fwd(&x, &w, &bias, &g, &g.full_region(), &mut dense);
        let region: Region = [(1, 3), (1, 3), (1, 3)];
        let mut boxed = vec![0f32; 2 * 64];
        conv3d_fwd(&x, &w, &bias, &g, &region, &mut boxed);
        for od in 0..4 {
            for oh in 0..4 {
                for ow in 0..4 {
                    for c in 0..2 {
                        let i = c * 64 + od * 16 + oh * 4 + ow;
                        let inside = (1..3).contains(&od) && (1..3).contains(&oh) && (1..3).contains(&ow);
                        if inside {
                            assert_eq!(boxed[i], dense[i]);
                        } else {
                            assert_eq!(boxed[i], 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn depthwise_per_channel_scalar() {
        // C=2, k=1, weights [1, -1]: channel 0 passthrough, channel 1 negated.
        let g = geom(1, 2, 2, 2, 1, 1, 0);
        let x: Vec<f32> = (0..16).map(|i| i as f32).collect();
        let mut out = vec![0f32; 16];
        depthwise_fwd(&x, &[1.0, -1.0], &[0.0, 0.0], &g, &mut out);
        for i in 0..8 {
            assert_eq!(out[i], x[i]);
            assert_eq!(out[8 + i], -x[8 + i]);
        }
    }

    #[test]
    fn maxpool_enumeration() {
        let x: Vec<f32> = (0..8).map(|i| i as f32).collect();
        let mut out = vec![0f32; 1];
        let mut arg = vec![0u32; 1];
        maxpool_fwd(&x, 1, [2, 2, 2], 2, 2, [1, 1, 1], &mut out, &mut arg);
        assert_eq!(out[0], 7.0);
        assert_eq!(arg[0], 7);
    }

    #[test]
    fn maxpool_tie_routes_to_first() {
        let x = vec![3.0f32; 8];
        let mut out = vec![0f32; 1];
        let mut arg = vec![0u32; 1];
        maxpool_fwd(&x, 1, [2, 2, 2], 2, 2, [1, 1, 1], &mut out, &mut arg);
        assert_eq!(arg[0], 0);
        let mut dx = vec![0f32; 8];
        maxpool_bwd(&[1.0], &arg, 8, 1, &mut dx);
        assert_eq!(dx.iter().sum::<f32>(), 1.0);
        assert_eq!(dx[0], 1.0);
    }

    #[test]
    fn gelu_reference_points() {
        let mut out = vec![0f32; 2];
        gelu_fwd(&[0.0, 1.0], &mut out);
        assert_eq!(out[0], 0.0);
        assert!((out[1] - 0.8412).abs() < 1e-4, "{}", out[1]);
    }

    #[test]
    fn sigmoid_reference_points() {
        let mut out = vec![0f32; 2];
        sigmoid_fwd(&[0.0, 100.0], &mut out);
        assert_eq!(out[0], 0.5);
        assert!((out[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn ce_uniform_logits_is_ln3() {
        let logits = vec![0.7f32; 6];
        let mut probs = vec![0f32; 6];
        let loss = softmax_ce_fwd(&logits, &[0, 2], 3, &mut probs);
        assert!((loss - 3f32.ln()).abs() < 1e-6);
    }
}
