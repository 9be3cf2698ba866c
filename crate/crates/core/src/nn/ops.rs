//! Layer kernels: forward, backward (data and parameters) for every layer kind.
//!
//! Every kernel parallelises over independent output planes only, so the
//! per-element summation order is fixed and results do not depend on the
//! thread count.

use rayon::prelude::*;

use crate::tensor::{Real, Tensor};

/// Geometry of a learnable linear layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinearGeom {
    /// Square kernel of odd size, stride 1, same padding.
    Conv(usize),
    /// 2x2 transposed convolution with stride 2.
    Up2,
}

impl LinearGeom {
    pub fn out_spatial(self, h: usize, w: usize) -> (usize, usize) {
        match self {
            LinearGeom::Conv(_) => (h, w),
            LinearGeom::Up2 => (2 * h, 2 * w),
        }
    }

    pub fn kernel(self) -> usize {
        match self {
            LinearGeom::Conv(k) => k,
            LinearGeom::Up2 => 2,
        }
    }
}

/// Output plane = bias + sum over input channels and taps. Weights are laid
/// out `(out, in, k, k)` for both geometries.
pub fn linear_forward<T: Real>(
    geom: LinearGeom,
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&[T]>,
) -> Tensor<T> {
    let (n, c, h, wd) = x.nchw().expect("4-D input");
    let o = w.dims()[0];
    let k = geom.kernel();
    let (oh, ow) = geom.out_spatial(h, wd);
    let wdata = w.data();
    let xdata = x.data();
    let mut out = Tensor::zeros(&[n, o, oh, ow]);
    out.data_mut()
        .par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(plane_idx, plane)| {
            let (ni, oi) = (plane_idx / o, plane_idx % o);
            let b = bias.map_or(T::zero(), |b| b[oi]);
            plane.iter_mut().for_each(|v| *v = b);
            for ci in 0..c {
                let src = &xdata[(ni * c + ci) * h * wd..(ni * c + ci + 1) * h * wd];
                let wk = &wdata[(oi * c + ci) * k * k..(oi * c + ci + 1) * k * k];
                match geom {
                    LinearGeom::Conv(k) => conv_accumulate(plane, src, wk, k, h, wd),
                    LinearGeom::Up2 => {
                        for y in 0..h {
                            let srow = &src[y * wd..(y + 1) * wd];
                            for dy in 0..2 {
                                let orow = &mut plane[(2 * y + dy) * ow..(2 * y + dy + 1) * ow];
                                let (w0, w1) = (wk[dy * 2], wk[dy * 2 + 1]);
                                for (xi, &s) in srow.iter().enumerate() {
                                    orow[2 * xi] = orow[2 * xi] + w0 * s;
                                    orow[2 * xi + 1] = orow[2 * xi + 1] + w1 * s;
                                }
                            }
                        }
                    }
                }
            }
        });
    out
}

/// `plane[y, x] += sum_{ky,kx} wk[ky,kx] * src[y+ky-p, x+kx-p]` with zero padding.
fn conv_accumulate<T: Real>(plane: &mut [T], src: &[T], wk: &[T], k: usize, h: usize, w: usize) {
    let p = k / 2;
    for ky in 0..k {
        for kx in 0..k {
            let wv = wk[ky * k + kx];
            let x_lo = p.saturating_sub(kx);
            let x_hi = (w + p).saturating_sub(kx).min(w);
            if x_lo >= x_hi {
                continue;
            }
            for y in 0..h {
                let sy = y + ky;
                if sy < p || sy - p >= h {
                    continue;
                }
                let sy = sy - p;
                let orow = &mut plane[y * w + x_lo..y * w + x_hi];
                let srow = &src[sy * w + x_lo + kx - p..sy * w + x_hi + kx - p];
                for (o, &s) in orow.iter_mut().zip(srow) {
                    *o = *o + wv * s;
                }
            }
        }
    }
}

/// Adjoint of `linear_forward` with respect to its input (bias ignored).
pub fn linear_backward_data<T: Real>(
    geom: LinearGeom,
    g: &Tensor<T>,
    w: &Tensor<T>,
    in_dims: &[usize],
) -> Tensor<T> {
    let (c, h, wd) = (in_dims[1], in_dims[2], in_dims[3]);
    let (_, o, oh, ow) = g.nchw().expect("4-D gradient");
    let k = geom.kernel();
    let wdata = w.data();
    let gdata = g.data();
    let mut gx = Tensor::zeros(in_dims);
    gx.data_mut()
        .par_chunks_mut(h * wd)
        .enumerate()
        .for_each(|(plane_idx, plane)| {
            let (ni, ci) = (plane_idx / c, plane_idx % c);
            for oi in 0..o {
                let gp = &gdata[(ni * o + oi) * oh * ow..(ni * o + oi + 1) * oh * ow];
                let wk = &wdata[(oi * c + ci) * k * k..(oi * c + ci + 1) * k * k];
                match geom {
                    LinearGeom::Conv(k) => {
                        // Correlation with the 180-degree rotated kernel.
                        let mut flipped = wk.to_vec();
                        flipped.reverse();
                        conv_accumulate(plane, gp, &flipped, k, h, wd);
                    }
                    LinearGeom::Up2 => {
                        for y in 0..h {
                            let prow = &mut plane[y * wd..(y + 1) * wd];
                            for dy in 0..2 {
                                let grow = &gp[(2 * y + dy) * ow..(2 * y + dy + 1) * ow];
                                let (w0, w1) = (wk[dy * 2], wk[dy * 2 + 1]);
                                for (xi, p) in prow.iter_mut().enumerate() {
                                    *p = *p + w0 * grow[2 * xi] + w1 * grow[2 * xi + 1];
                                }
                            }
                        }
                    }
                }
            }
        });
    gx
}

/// Gradients of `linear_forward` with respect to weights and bias.
pub fn linear_backward_params<T: Real>(
    geom: LinearGeom,
    x: &Tensor<T>,
    g: &Tensor<T>,
    w_dims: &[usize],
) -> (Tensor<T>, Vec<T>) {
    let (n, c, h, wd) = x.nchw().expect("4-D input");
    let (_, o, oh, ow) = g.nchw().expect("4-D gradient");
    let k = geom.kernel();
    let xdata = x.data();
    let gdata = g.data();
    let mut gw = Tensor::zeros(w_dims);
    gw.data_mut()
        .par_chunks_mut(c * k * k)
        .enumerate()
        .for_each(|(oi, wrow)| {
            for ni in 0..n {
                let gp = &gdata[(ni * o + oi) * oh * ow..(ni * o + oi + 1) * oh * ow];
                for ci in 0..c {
                    let xp = &xdata[(ni * c + ci) * h * wd..(ni * c + ci + 1) * h * wd];
                    let wk = &mut wrow[ci * k * k..(ci + 1) * k * k];
                    match geom {
                        LinearGeom::Conv(k) => {
                            let p = k / 2;
                            for ky in 0..k {
                                for kx in 0..k {
                                    let x_lo = p.saturating_sub(kx);
                                    let x_hi = (wd + p).saturating_sub(kx).min(wd);
                                    let mut acc = T::zero();
                                    for y in 0..h {
                                        let sy = y + ky;
                                        if sy < p || sy - p >= h || x_lo >= x_hi {
                                            continue;
                                        }
                                        let sy = sy - p;
                                        let grow = &gp[y * wd + x_lo..y * wd + x_hi];
                                        let xrow = &xp[sy * wd + x_lo + kx - p..sy * wd + x_hi + kx - p];
                                        for (&a, &b) in grow.iter().zip(xrow) {
                                            acc = acc + a * b;
                                        }
                                    }
                                    wk[ky * k + kx] = wk[ky * k + kx] + acc;
                                }
                            }
                        }
                        LinearGeom::Up2 => {
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let mut acc = T::zero();
                                    for y in 0..h {
                                        for xi in 0..wd {
                                            acc = acc
                                                + gp[(2 * y + dy) * ow + 2 * xi + dx] * xp[y * wd + xi];
                                        }
                                    }
                                    wk[dy * 2 + dx] = wk[dy * 2 + dx] + acc;
                                }
                            }
                        }
                    }
                }
            }
        });
    let mut gb = vec![T::zero(); o];
    for (oi, b) in gb.iter_mut().enumerate() {
        for ni in 0..n {
            *b = *b + g.plane(ni, oi).iter().copied().sum::<T>();
        }
    }
    (gw, gb)
}

/// Per-channel affine map `y = x * scale[c] + shift[c]`.
pub fn channel_affine<T: Real>(x: &Tensor<T>, scale: &[T], shift: &[T]) -> Tensor<T> {
    let (_, c, h, w) = x.nchw().expect("4-D input");
    let mut out = x.clone();
    out.data_mut()
        .chunks_mut(h * w)
        .enumerate()
        .for_each(|(i, plane)| {
            let ci = i % c;
            for v in plane {
                *v = *v * scale[ci] + shift[ci];
            }
        });
    out
}

/// Batch statistics over `(n, h, w)` for each channel: `(mean, biased variance)`.
pub fn channel_stats<T: Real>(x: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let (n, c, h, w) = x.nchw().expect("4-D input");
    let count = T::from_usize(n * h * w).unwrap();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ci in 0..c {
        let mut s = T::zero();
        for ni in 0..n {
            s = s + x.plane(ni, ci).iter().copied().sum::<T>();
        }
        let m = s / count;
        let mut v = T::zero();
        for ni in 0..n {
            for &e in x.plane(ni, ci) {
                v = v + (e - m) * (e - m);
            }
        }
        mean[ci] = m;
        var[ci] = v / count;
    }
    (mean, var)
}

/// Training-mode batch-norm backward. `xhat` is the normalised input.
/// Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm_train_backward<T: Real>(
    g: &Tensor<T>,
    xhat: &Tensor<T>,
    gamma: &[T],
    inv_std: &[T],
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let (n, c, h, w) = g.nchw().expect("4-D gradient");
    let m = T::from_usize(n * h * w).unwrap();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ci in 0..c {
        for ni in 0..n {
            for (&gv, &xv) in g.plane(ni, ci).iter().zip(xhat.plane(ni, ci)) {
                dbeta[ci] = dbeta[ci] + gv;
                dgamma[ci] = dgamma[ci] + gv * xv;
            }
        }
    }
    let mut dx = Tensor::zeros(g.dims());
    let gd = g.data();
    let xd = xhat.data();
    dx.data_mut()
        .chunks_mut(h * w)
        .enumerate()
        .for_each(|(i, plane)| {
            let ci = i % c;
            let k = gamma[ci] * inv_std[ci] / m;
            let base = i * h * w;
            for (j, v) in plane.iter_mut().enumerate() {
                *v = k * (m * gd[base + j] - dbeta[ci] - xd[base + j] * dgamma[ci]);
            }
        });
    (dx, dgamma, dbeta)
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Real>(x: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    x.zip_map(g, |xv, gv| if xv > T::zero() { gv } else { T::zero() })
}

/// Index within the 2x2 window `(dy * 2 + dx)` of the first maximum in raster order.
fn window_argmax<T: Real>(plane: &[T], w: usize, y: usize, x: usize) -> usize {
    let mut best = 0;
    let mut best_v = plane[2 * y * w + 2 * x];
    for k in 1..4 {
        let v = plane[(2 * y + k / 2) * w + 2 * x + k % 2];
        if v > best_v {
            best = k;
            best_v = v;
        }
    }
    best
}

pub fn maxpool2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.nchw().expect("4-D input");
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    for (i, plane) in out.data_mut().chunks_mut(oh * ow).enumerate() {
        let src = &x.data()[i * h * w..(i + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                let k = window_argmax(src, w, y, xx);
                plane[y * ow + xx] = src[(2 * y + k / 2) * w + 2 * xx + k % 2];
            }
        }
    }
    out
}

/// Routes each output value entirely to the argmax input of its window.
/// Serves as both the gradient and the relevance rule.
pub fn maxpool2_route<T: Real>(x: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let (_, _, h, w) = x.nchw().expect("4-D input");
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(x.dims());
    for (i, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
        let src = &x.data()[i * h * w..(i + 1) * h * w];
        let gp = &g.data()[i * oh * ow..(i + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                let k = window_argmax(src, w, y, xx);
                let idx = (2 * y + k / 2) * w + 2 * xx + k % 2;
                plane[idx] = plane[idx] + gp[y * ow + xx];
            }
        }
    }
    out
}

/// Channel concatenation `[a, b]`.
pub fn concat<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (n, ca, h, w) = a.nchw().expect("4-D input");
    let cb = b.dims()[1];
    let mut data = Vec::with_capacity(n * (ca + cb) * h * w);
    for ni in 0..n {
        data.extend_from_slice(&a.data()[ni * ca * h * w..(ni + 1) * ca * h * w]);
        data.extend_from_slice(&b.data()[ni * cb * h * w..(ni + 1) * cb * h * w]);
    }
    Tensor::new(vec![n, ca + cb, h, w], data).expect("concat dims")
}

/// Splits a concatenated tensor back into its first `ca` channels and the rest.
pub fn split_channels<T: Real>(g: &Tensor<T>, ca: usize) -> (Tensor<T>, Tensor<T>) {
    let (n, c, h, w) = g.nchw().expect("4-D input");
    let cb = c - ca;
    let mut a = Vec::with_capacity(n * ca * h * w);
    let mut b = Vec::with_capacity(n * cb * h * w);
    for ni in 0..n {
        let s = &g.data()[ni * c * h * w..(ni + 1) * c * h * w];
        a.extend_from_slice(&s[..ca * h * w]);
        b.extend_from_slice(&s[ca * h * w..]);
    }
    (
        Tensor::new(vec![n, ca, h, w], a).expect("split dims"),
        Tensor::new(vec![n, cb, h, w], b).expect("split dims"),
    )
}

/// Softmax across channels at every pixel.
pub fn softmax_channel<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.nchw().expect("4-D input");
    let hw = h * w;
    let mut out = Tensor::zeros(x.dims());
    let xd = x.data();
    let od = out.data_mut();
    for ni in 0..n {
        let base = ni * c * hw;
        for p in 0..hw {
            let mut m = T::neg_infinity();
            for ci in 0..c {
                m = m.max(xd[base + ci * hw + p]);
            }
            let mut s = T::zero();
            for ci in 0..c {
                let e = (xd[base + ci * hw + p] - m).exp();
                od[base + ci * hw + p] = e;
                s = s + e;
            }
            for ci in 0..c {
                od[base + ci * hw + p] = od[base + ci * hw + p] / s;
            }
        }
    }
    out
}

/// Backward through softmax given its output `p`.
pub fn softmax_channel_backward<T: Real>(p: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = p.nchw().expect("4-D input");
    let hw = h * w;
    let mut out = Tensor::zeros(p.dims());
    let (pd, gd) = (p.data(), g.data());
    let od = out.data_mut();
    for ni in 0..n {
        let base = ni * c * hw;
        for px in 0..hw {
            let mut dot = T::zero();
            for ci in 0..c {
                dot = dot + pd[base + ci * hw + px] * gd[base + ci * hw + px];
            }
            for ci in 0..c {
                let i = base + ci * hw + px;
                od[i] = pd[i] * (gd[i] - dot);
            }
        }
    }
    out
}
