//! Raw NCHW compute kernels used by the autodiff graph.

use crate::tensor::Float;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        conv_out_hw(self.h, self.w, self.k, self.stride, self.pad)
    }

    fn is_depthwise(&self) -> bool {
        self.groups > 1 && self.groups == self.cin && self.groups == self.cout
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

pub fn conv_out_hw(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    (
        (h + 2 * pad - k) / stride + 1,
        (w + 2 * pad - k) / stride + 1,
    )
}

/// Range of output positions whose input index `o*stride - pad + kk` lies in `[0, len)`.
#[inline]
fn valid_range(len: usize, out: usize, stride: usize, pad: usize, kk: usize) -> (usize, usize) {
    // o*stride + kk >= pad  and  o*stride + kk < len + pad
    let lo = if kk >= pad { 0 } else { (pad - kk).div_ceil(stride).min(out) };
    let hi = if len + pad > kk {
        ((len + pad - kk - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Unfold one image's channel range into a `[c*k*k, ho*wo]` column matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Float>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    cols: &mut [T],
) {
    let (ho, wo) = conv_out_hw(h, w, k, stride, pad);
    let l = ho * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            let (oy0, oy1) = valid_range(h, ho, stride, pad, ky);
            for kx in 0..k {
                let (ox0, ox1) = valid_range(w, wo, stride, pad, kx);
                let row = &mut cols[((ci * k + ky) * k + kx) * l..((ci * k + ky) * k + kx + 1) * l];
                row.fill(T::zero());
                for oy in oy0..oy1 {
                    let iy = oy * stride + ky - pad;
                    let src = &plane[iy * w..(iy + 1) * w];
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if ox0 == ox1 {
                        continue;
                    }
                    if stride == 1 {
                        let ix0 = ox0 + kx - pad;
                        dst[ox0..ox1].copy_from_slice(&src[ix0..ix0 + (ox1 - ox0)]);
                    } else {
                        for ox in ox0..ox1 {
                            dst[ox] = src[ox * stride + kx - pad];
                        }
                    }
                }
            }
        }
    }
}

/// Accumulate a column matrix back into image gradients (adjoint of `im2col`).
#[allow(clippy::too_many_arguments)]
fn col2im<T: Float>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dx: &mut [T],
) {
    let (ho, wo) = conv_out_hw(h, w, k, stride, pad);
    let l = ho * wo;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            let (oy0, oy1) = valid_range(h, ho, stride, pad, ky);
            for kx in 0..k {
                let (ox0, ox1) = valid_range(w, wo, stride, pad, kx);
                let row = &cols[((ci * k + ky) * k + kx) * l..((ci * k + ky) * k + kx + 1) * l];
                for oy in oy0..oy1 {
                    let iy = oy * stride + ky - pad;
                    let src = &row[oy * wo..(oy + 1) * wo];
                    let dst = &mut plane[iy * w..(iy + 1) * w];
                    for ox in ox0..ox1 {
                        dst[ox * stride + kx - pad] += src[ox];
                    }
                }
            }
        }
    }
}

/// Convolution forward. `weight` is `[cout, cin/groups, k, k]`.
pub fn conv2d_forward<T: Float>(g: &ConvGeom, x: &[T], weight: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let l = ho * wo;
    let mut out = vec![T::zero(); g.n * g.cout * l];
    if g.is_depthwise() {
        depthwise_forward(g, x, weight, &mut out);
    } else {
        let cin_g = g.cin / g.groups;
        let cout_g = g.cout / g.groups;
        let kk = cin_g * g.k * g.k;
        let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kk * l] };
        for n in 0..g.n {
            let xn = &x[n * g.cin * g.h * g.w..(n + 1) * g.cin * g.h * g.w];
            for gi in 0..g.groups {
                let xg = &xn[gi * cin_g * g.h * g.w..(gi + 1) * cin_g * g.h * g.w];
                let wg = &weight[gi * cout_g * kk..(gi + 1) * cout_g * kk];
                let og = &mut out[(n * g.cout + gi * cout_g) * l..(n * g.cout + (gi + 1) * cout_g) * l];
                let b: &[T] = if g.is_pointwise() {
                    xg
                } else {
                    im2col(xg, cin_g, g.h, g.w, g.k, g.stride, g.pad, &mut cols);
                    &cols
                };
                T::gemm(false, false, cout_g, kk, l, T::one(), wg, b, T::zero(), og);
            }
        }
    }
    if let Some(bias) = bias {
        for n in 0..g.n {
            for co in 0..g.cout {
                let b = bias[co];
                for v in &mut out[(n * g.cout + co) * l..(n * g.cout + co + 1) * l] {
                    *v += b;
                }
            }
        }
    }
    out
}

fn depthwise_forward<T: Float>(g: &ConvGeom, x: &[T], weight: &[T], out: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let k = g.k;
    for n in 0..g.n {
        for c in 0..g.cin {
            let plane = &x[(n * g.cin + c) * g.h * g.w..(n * g.cin + c + 1) * g.h * g.w];
            let o = &mut out[(n * g.cout + c) * ho * wo..(n * g.cout + c + 1) * ho * wo];
            let wc = &weight[c * k * k..(c + 1) * k * k];
            for ky in 0..k {
                let (oy0, oy1) = valid_range(g.h, ho, g.stride, g.pad, ky);
                for kx in 0..k {
                    let (ox0, ox1) = valid_range(g.w, wo, g.stride, g.pad, kx);
                    let wv = wc[ky * k + kx];
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let src = &plane[iy * g.w..(iy + 1) * g.w];
                        let dst = &mut o[oy * wo..(oy + 1) * wo];
                        if g.stride == 1 {
                            let ix0 = ox0 + kx - g.pad;
                            for (d, &s) in dst[ox0..ox1].iter_mut().zip(&src[ix0..]) {
                                *d += wv * s;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                dst[ox] += wv * src[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Convolution backward: returns (dx, dweight, dbias).
pub fn conv2d_backward<T: Float>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    dy: &[T],
    want_dx: bool,
    with_bias: bool,
) -> (Vec<T>, Vec<T>, Option<Vec<T>>) {
    let (ho, wo) = g.out_hw();
    let l = ho * wo;
    let mut dx = if want_dx { vec![T::zero(); x.len()] } else { Vec::new() };
    let mut dw = vec![T::zero(); weight.len()];
    if g.is_depthwise() {
        depthwise_backward(g, x, weight, dy, want_dx, &mut dx, &mut dw);
    } else {
        let cin_g = g.cin / g.groups;
        let cout_g = g.cout / g.groups;
        let kk = cin_g * g.k * g.k;
        let pointwise = g.is_pointwise();
        let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); kk * l] };
        let mut dcols = if pointwise || !want_dx { Vec::new() } else { vec![T::zero(); kk * l] };
        let hw = g.h * g.w;
        for n in 0..g.n {
            for gi in 0..g.groups {
                let xoff = (n * g.cin + gi * cin_g) * hw;
                let xg = &x[xoff..xoff + cin_g * hw];
                let wg = &weight[gi * cout_g * kk..(gi + 1) * cout_g * kk];
                let dyg = &dy[(n * g.cout + gi * cout_g) * l..(n * g.cout + (gi + 1) * cout_g) * l];
                let b: &[T] = if pointwise {
                    xg
                } else {
                    im2col(xg, cin_g, g.h, g.w, g.k, g.stride, g.pad, &mut cols);
                    &cols
                };
                let dwg = &mut dw[gi * cout_g * kk..(gi + 1) * cout_g * kk];
                T::gemm(false, true, cout_g, l, kk, T::one(), dyg, b, T::one(), dwg);
                if want_dx {
                    if pointwise {
                        let dxg = &mut dx[xoff..xoff + cin_g * hw];
                        T::gemm(true, false, kk, cout_g, l, T::one(), wg, dyg, T::one(), dxg);
                    } else {
                        T::gemm(true, false, kk, cout_g, l, T::one(), wg, dyg, T::zero(), &mut dcols);
                        col2im(&dcols, cin_g, g.h, g.w, g.k, g.stride, g.pad, &mut dx[xoff..xoff + cin_g * hw]);
                    }
                }
            }
        }
    }
    let db = with_bias.then(|| {
        let mut db = vec![T::zero(); g.cout];
        for n in 0..g.n {
            for (co, d) in db.iter_mut().enumerate() {
                *d += dy[(n * g.cout + co) * l..(n * g.cout + co + 1) * l].iter().copied().sum();
            }
        }
        db
    });
    (dx, dw, db)
}

#[allow(clippy::too_many_arguments)]
fn depthwise_backward<T: Float>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    dy: &[T],
    want_dx: bool,
    dx: &mut [T],
    dw: &mut [T],
) {
    let (ho, wo) = g.out_hw();
    let k = g.k;
    for n in 0..g.n {
        for c in 0..g.cin {
            let base = (n * g.cin + c) * g.h * g.w;
            let plane = &x[base..base + g.h * g.w];
            let d = &dy[(n * g.cout + c) * ho * wo..(n * g.cout + c + 1) * ho * wo];
            for ky in 0..k {
                let (oy0, oy1) = valid_range(g.h, ho, g.stride, g.pad, ky);
                for kx in 0..k {
                    let (ox0, ox1) = valid_range(g.w, wo, g.stride, g.pad, kx);
                    let wv = weight[c * k * k + ky * k + kx];
                    let mut acc = T::zero();
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let drow = &d[oy * wo..(oy + 1) * wo];
                        if g.stride == 1 {
                            let ix0 = ox0 + kx - g.pad;
                            let src = &plane[iy * g.w + ix0..iy * g.w + ix0 + (ox1 - ox0)];
                            for (&dv, &sv) in drow[ox0..ox1].iter().zip(src) {
                                acc += dv * sv;
                            }
                            if want_dx {
                                let dst = &mut dx[base + iy * g.w + ix0..base + iy * g.w + ix0 + (ox1 - ox0)];
                                for (dd, &dv) in dst.iter_mut().zip(&drow[ox0..ox1]) {
                                    *dd += wv * dv;
                                }
                            }
                        } else {
                            for (ox, &dv) in drow.iter().enumerate().take(ox1).skip(ox0) {
                                let ix = ox * g.stride + kx - g.pad;
                                acc += dv * plane[iy * g.w + ix];
                                if want_dx {
                                    dx[base + iy * g.w + ix] += wv * dv;
                                }
                            }
                        }
                    }
                    dw[c * k * k + ky * k + kx] += acc;
                }
            }
        }
    }
}

/// Per-channel batch statistics over N, H, W: (mean, biased variance).
pub fn channel_stats<T: Float>(x: &[T], n: usize, c: usize, hw: usize) -> (Vec<T>, Vec<T>) {
    let m = T::from_usize(n * hw).unwrap();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ci in 0..c {
        let mut s = T::zero();
        for ni in 0..n {
            s += x[(ni * c + ci) * hw..(ni * c + ci + 1) * hw].iter().copied().sum();
        }
        let mu = s / m;
        let mut v = T::zero();
        for ni in 0..n {
            for &xv in &x[(ni * c + ci) * hw..(ni * c + ci + 1) * hw] {
                let d = xv - mu;
                v += d * d;
            }
        }
        mean[ci] = mu;
        var[ci] = v / m;
    }
    (mean, var)
}

#[inline]
pub fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `out[c*r*r + i*r + j, h, w] = x[c, h*r + i, w*r + j]`.
pub fn space_to_depth<T: Float>(x: &[T], n: usize, c: usize, h: usize, w: usize, r: usize) -> Vec<T> {
    let (ho, wo) = (h / r, w / r);
    let mut out = vec![T::zero(); x.len()];
    for ni in 0..n {
        for ci in 0..c {
            let src = &x[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
            for i in 0..r {
                for j in 0..r {
                    let oc = ci * r * r + i * r + j;
                    let dst = &mut out[(ni * c * r * r + oc) * ho * wo..(ni * c * r * r + oc + 1) * ho * wo];
                    for y in 0..ho {
                        for xx in 0..wo {
                            dst[y * wo + xx] = src[(y * r + i) * w + xx * r + j];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Inverse of [`space_to_depth`]; `c` is the output channel count.
pub fn depth_to_space<T: Float>(x: &[T], n: usize, c: usize, h: usize, w: usize, r: usize) -> Vec<T> {
    let (ho, wo) = (h * r, w * r);
    let mut out = vec![T::zero(); x.len()];
    for ni in 0..n {
        for ci in 0..c {
            let dst = &mut out[(ni * c + ci) * ho * wo..(ni * c + ci + 1) * ho * wo];
            for i in 0..r {
                for j in 0..r {
                    let ic = ci * r * r + i * r + j;
                    let src = &x[(ni * c * r * r + ic) * h * w..(ni * c * r * r + ic + 1) * h * w];
                    for y in 0..h {
                        for xx in 0..w {
                            dst[(y * r + i) * wo + xx * r + j] = src[y * w + xx];
                        }
                    }
                }
            }
        }
    }
    out
}
