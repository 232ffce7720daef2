//! Per-sample volumetric kernels with hand-written adjoints.
//!
//! Activations are `(channels, d, h, w)` in one contiguous buffer.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, ArrayView2, ArrayViewMut2};

use super::real::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub channels: usize,
    pub dims: [usize; 3],
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(channels: usize, dims: [usize; 3]) -> Self {
        Self {
            channels,
            dims,
            data: vec![T::zero(); channels * dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn from_vec(channels: usize, dims: [usize; 3], data: Vec<T>) -> Self {
        assert_eq!(data.len(), channels * dims.iter().product::<usize>());
        Self { channels, dims, data }
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }
}

fn view2<T>(data: &[T], rows: usize, cols: usize) -> ArrayView2<'_, T> {
    ArrayView2::from_shape((rows, cols), data).expect("matrix shape")
}

fn view2_mut<T>(data: &mut [T], rows: usize, cols: usize) -> ArrayViewMut2<'_, T> {
    ArrayViewMut2::from_shape((rows, cols), data).expect("matrix shape")
}

/// Unfolds the 3x3x3 same-padded neighborhoods of output planes `z0..z1`
/// into `cols`: rows are `(cin, kz, ky, kx)`, columns are output voxels.
fn im2col3_slab<T: Real>(x: &Tensor<T>, z0: usize, z1: usize, cols: &mut Vec<T>) {
    let [d, h, w] = x.dims;
    let plane = h * w;
    let m = (z1 - z0) * plane;
    cols.clear();
    cols.resize(x.channels * 27 * m, T::zero());
    for ci in 0..x.channels {
        let src = x.channel(ci);
        for kz in 0..3 {
            let (z_lo, z_hi) = (z0.max(usize::from(kz == 0)), z1.min(if kz == 2 { d - 1 } else { d }));
            for ky in 0..3 {
                let (y_lo, y_hi) = (usize::from(ky == 0), if ky == 2 { h - 1 } else { h });
                for kx in 0..3 {
                    let (x_lo, x_hi) = (usize::from(kx == 0), if kx == 2 { w - 1 } else { w });
                    if x_lo >= x_hi {
                        continue;
                    }
                    let row = ((ci * 3 + kz) * 3 + ky) * 3 + kx;
                    let dst = &mut cols[row * m..(row + 1) * m];
                    for z in z_lo..z_hi {
                        let sz = z + kz - 1;
                        for y in y_lo..y_hi {
                            let sy = y + ky - 1;
                            let so = (sz * h + sy) * w + kx;
                            let dof = ((z - z0) * h + y) * w;
                            dst[dof + x_lo..dof + x_hi].copy_from_slice(&src[so + x_lo - 1..so + x_hi - 1]);
                        }
                    }
                }
            }
        }
    }
}

/// Dot product with independent partial sums so it vectorizes.
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let tail: T = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    acc.iter().copied().sum::<T>() + tail
}

/// Output planes per im2col slab, keeping a slab near 128K elements.
fn slab_planes(rows: usize, dims: [usize; 3]) -> usize {
    (131_072 / (rows * dims[1] * dims[2]).max(1)).clamp(1, dims[0])
}

/// Reorders `(cout, cin, kz, ky, kx)` weights into the kernel of the
/// adjoint convolution: `(cin, cout, 2-kz, 2-ky, 2-kx)`.
fn flipped_transpose<T: Real>(weight: &[T], cout: usize, cin: usize) -> Vec<T> {
    let mut out = vec![T::zero(); weight.len()];
    for co in 0..cout {
        for ci in 0..cin {
            for k in 0..27 {
                out[(ci * cout + co) * 27 + (26 - k)] = weight[(co * cin + ci) * 27 + k];
            }
        }
    }
    out
}

/// Same-padded stride-1 convolution with kernel size 1 or 3.
pub fn conv_forward<T: Real>(x: &Tensor<T>, weight: &[T], bias: &[T], cout: usize, k: usize) -> Tensor<T> {
    let n = x.voxels();
    let kk = x.channels * k * k * k;
    debug_assert_eq!(weight.len(), cout * kk);
    let mut out = Tensor::zeros(cout, x.dims);
    for (c, b) in bias.iter().enumerate() {
        out.data[c * n..(c + 1) * n].iter_mut().for_each(|v| *v = *b);
    }
    let wv = view2(weight, cout, kk);
    let mut ov = view2_mut(&mut out.data, cout, n);
    if k == 1 {
        general_mat_mul(T::one(), &wv, &view2(&x.data, kk, n), T::one(), &mut ov);
        return out;
    }
    let [d, h, w] = x.dims;
    let step = slab_planes(kk, x.dims);
    let mut cols = Vec::new();
    for z0 in (0..d).step_by(step) {
        let z1 = (z0 + step).min(d);
        im2col3_slab(x, z0, z1, &mut cols);
        let (a, b) = (z0 * h * w, z1 * h * w);
        general_mat_mul(
            T::one(),
            &wv,
            &view2(&cols, kk, b - a),
            T::one(),
            &mut ov.slice_mut(s![.., a..b]),
        );
    }
    out
}

/// Backward pass of [`conv_forward`]: accumulates weight and bias gradients
/// and returns the input gradient when requested.
pub fn conv_backward<T: Real>(
    x: &Tensor<T>,
    weight: &[T],
    grad_out: &Tensor<T>,
    grad_w: &mut [T],
    grad_b: &mut [T],
    k: usize,
    need_input_grad: bool,
) -> Option<Tensor<T>> {
    let n = x.voxels();
    let cout = grad_out.channels;
    let kk = x.channels * k * k * k;
    for (c, gb) in grad_b.iter_mut().enumerate() {
        *gb += grad_out.data[c * n..(c + 1) * n].iter().copied().sum::<T>();
    }
    let gy = view2(&grad_out.data, cout, n);
    let mut gwv = view2_mut(grad_w, cout, kk);
    if k == 1 {
        general_mat_mul(T::one(), &gy, &view2(&x.data, kk, n).t(), T::one(), &mut gwv);
        if !need_input_grad {
            return None;
        }
        let mut gx = Tensor::zeros(x.channels, x.dims);
        general_mat_mul(
            T::one(),
            &view2(weight, cout, kk).t(),
            &gy,
            T::zero(),
            &mut view2_mut(&mut gx.data, x.channels, n),
        );
        return Some(gx);
    }
    let [d, h, w] = x.dims;
    let mut cols = Vec::new();
    let step = slab_planes(kk, x.dims);
    for z0 in (0..d).step_by(step) {
        let z1 = (z0 + step).min(d);
        im2col3_slab(x, z0, z1, &mut cols);
        let (a, b) = (z0 * h * w, z1 * h * w);
        let m = b - a;
        if cout >= 16 {
            general_mat_mul(
                T::one(),
                &gy.slice(s![.., a..b]),
                &view2(&cols, kk, m).t(),
                T::one(),
                &mut gwv,
            );
            continue;
        }
        for co in 0..cout {
            let g = &grad_out.data[co * n + a..co * n + b];
            let dst = &mut gwv.row_mut(co);
            for (r, out) in dst.iter_mut().enumerate() {
                *out += dot(g, &cols[r * m..(r + 1) * m]);
            }
        }
    }
    if !need_input_grad {
        return None;
    }
    let wt = flipped_transpose(weight, cout, x.channels);
    let wtv = view2(&wt, x.channels, cout * 27);
    let mut gx = Tensor::zeros(x.channels, x.dims);
    let mut gxv = view2_mut(&mut gx.data, x.channels, n);
    let step = slab_planes(cout * 27, x.dims);
    for z0 in (0..d).step_by(step) {
        let z1 = (z0 + step).min(d);
        im2col3_slab(grad_out, z0, z1, &mut cols);
        let (a, b) = (z0 * h * w, z1 * h * w);
        general_mat_mul(
            T::one(),
            &wtv,
            &view2(&cols, cout * 27, b - a),
            T::zero(),
            &mut gxv.slice_mut(s![.., a..b]),
        );
    }
    Some(gx)
}

pub fn relu_inplace<T: Real>(t: &mut Tensor<T>) {
    let zero = T::zero();
    t.data.iter_mut().for_each(|v| {
        if !(*v > zero) {
            *v = zero
        }
    });
}

/// Zeroes gradient entries where the ReLU output was not positive.
pub fn relu_backward<T: Real>(out: &Tensor<T>, grad: &mut Tensor<T>) {
    let zero = T::zero();
    grad.data.iter_mut().zip(&out.data).for_each(|(g, &o)| {
        if !(o > zero) {
            *g = zero
        }
    });
}

/// 2x2x2 max pooling; returns the pooled tensor and the flat argmax indices.
pub fn maxpool2_forward<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let [d, h, w] = x.dims;
    let od = [d / 2, h / 2, w / 2];
    let mut out = Tensor::zeros(x.channels, od);
    let mut idx = vec![0u32; out.data.len()];
    let mut o = 0;
    for c in 0..x.channels {
        let base = c * d * h * w;
        for z in 0..od[0] {
            for y in 0..od[1] {
                for xx in 0..od[2] {
                    let mut best_i = base + ((2 * z) * h + 2 * y) * w + 2 * xx;
                    let mut best = x.data[best_i];
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = base + ((2 * z + dz) * h + 2 * y + dy) * w + 2 * xx + dx;
                                if x.data[i] > best {
                                    best = x.data[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    out.data[o] = best;
                    idx[o] = best_i as u32;
                    o += 1;
                }
            }
        }
    }
    (out, idx)
}

pub fn maxpool2_backward<T: Real>(grad_out: &Tensor<T>, idx: &[u32], in_channels: usize, in_dims: [usize; 3]) -> Tensor<T> {
    let mut g = Tensor::zeros(in_channels, in_dims);
    for (&i, &v) in idx.iter().zip(&grad_out.data) {
        g.data[i as usize] += v;
    }
    g
}

/// Linear x2 upsampling along one axis (half-pixel centers, edge clamped).
fn upsample_axis<T: Real>(data: &[T], outer: usize, n: usize, inner: usize) -> Vec<T> {
    let (q, tq) = (T::from_f64(0.25), T::from_f64(0.75));
    let mut out = vec![T::zero(); outer * 2 * n * inner];
    for o in 0..outer {
        let src = &data[o * n * inner..(o + 1) * n * inner];
        let dst = &mut out[o * 2 * n * inner..(o + 1) * 2 * n * inner];
        for i in 0..n {
            let prev = i.saturating_sub(1);
            let next = (i + 1).min(n - 1);
            for k in 0..inner {
                let c = src[i * inner + k];
                dst[(2 * i) * inner + k] = tq * c + q * src[prev * inner + k];
                dst[(2 * i + 1) * inner + k] = tq * c + q * src[next * inner + k];
            }
        }
    }
    out
}

fn upsample_axis_adjoint<T: Real>(grad: &[T], outer: usize, n: usize, inner: usize) -> Vec<T> {
    let (q, tq) = (T::from_f64(0.25), T::from_f64(0.75));
    let mut out = vec![T::zero(); outer * n * inner];
    for o in 0..outer {
        let src = &grad[o * 2 * n * inner..(o + 1) * 2 * n * inner];
        let dst = &mut out[o * n * inner..(o + 1) * n * inner];
        for i in 0..n {
            let prev = i.saturating_sub(1);
            let next = (i + 1).min(n - 1);
            for k in 0..inner {
                let g0 = src[(2 * i) * inner + k];
                let g1 = src[(2 * i + 1) * inner + k];
                dst[i * inner + k] += tq * (g0 + g1);
                dst[prev * inner + k] += q * g0;
                dst[next * inner + k] += q * g1;
            }
        }
    }
    out
}

/// Trilinear x2 upsampling, applied separably along z, y, x.
pub fn upsample2_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [d, h, w] = x.dims;
    let c = x.channels;
    let a = upsample_axis(&x.data, c, d, h * w);
    let b = upsample_axis(&a, c * 2 * d, h, w);
    let out = upsample_axis(&b, c * 2 * d * 2 * h, w, 1);
    Tensor::from_vec(c, [2 * d, 2 * h, 2 * w], out)
}

pub fn upsample2_backward<T: Real>(grad_out: &Tensor<T>, in_dims: [usize; 3]) -> Tensor<T> {
    let [d, h, w] = in_dims;
    let c = grad_out.channels;
    let gb = upsample_axis_adjoint(&grad_out.data, c * 2 * d * 2 * h, w, 1);
    let ga = upsample_axis_adjoint(&gb, c * 2 * d, h, w);
    let gx = upsample_axis_adjoint(&ga, c, d, h * w);
    Tensor::from_vec(c, in_dims, gx)
}

/// Channel concatenation `[a; b]`.
pub fn concat<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!(a.dims, b.dims);
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor::from_vec(a.channels + b.channels, a.dims, data)
}

/// Splits a gradient of `[a; b]` back into its parts.
pub fn split<T: Real>(g: Tensor<T>, first_channels: usize) -> (Tensor<T>, Tensor<T>) {
    let n = g.voxels();
    let mut data = g.data;
    let tail = data.split_off(first_channels * n);
    (
        Tensor::from_vec(first_channels, g.dims, data),
        Tensor::from_vec(g.channels - first_channels, g.dims, tail),
    )
}

/// Channel softmax of a `(C, ...)` logit tensor.
pub fn softmax_channels<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let n = logits.voxels();
    let c = logits.channels;
    let mut out = Tensor::zeros(c, logits.dims);
    for v in 0..n {
        let mut m = logits.data[v];
        for k in 1..c {
            m = m.max(logits.data[k * n + v]);
        }
        let mut s = T::zero();
        for k in 0..c {
            let e = (logits.data[k * n + v] - m).exp();
            out.data[k * n + v] = e;
            s += e;
        }
        for k in 0..c {
            out.data[k * n + v] = out.data[k * n + v] / s;
        }
    }
    out
}

/// Maps a probability gradient through the channel softmax to logits.
pub fn softmax_backward<T: Real>(probs: &Tensor<T>, grad_probs: &Tensor<T>) -> Tensor<T> {
    let n = probs.voxels();
    let c = probs.channels;
    let mut out = Tensor::zeros(c, probs.dims);
    for v in 0..n {
        let mut dot = T::zero();
        for k in 0..c {
            dot += probs.data[k * n + v] * grad_probs.data[k * n + v];
        }
        for k in 0..c {
            let p = probs.data[k * n + v];
            out.data[k * n + v] = p * (grad_probs.data[k * n + v] - dot);
        }
    }
    out
}
