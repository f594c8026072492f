//! Convolution and normalization kernels with their adjoints.
//!
//! Feature maps are `[channels, height, width]`, row-major. All 3x3
//! convolutions use padding 1; a stride-2 convolution maps `2h x 2w` onto
//! `h x w`, and the transposed convolution is exactly its adjoint.

use super::scalar::{gemm, Mat, Scalar};

pub(crate) const KERNEL: usize = 3;
pub(crate) const TAPS: usize = KERNEL * KERNEL;

#[inline]
pub(crate) fn conv_out_dim(input: usize, stride: usize) -> usize {
    (input + 2 - KERNEL) / stride + 1
}

/// Unfolds `x` (`[c, h, w]`) into `[c * 9, oh * ow]` patches.
pub(crate) fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, stride: usize, col: &mut Vec<T>) {
    let oh = conv_out_dim(h, stride);
    let ow = conv_out_dim(w, stride);
    let p = oh * ow;
    col.clear();
    col.resize(c * TAPS * p, T::zero());
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..KERNEL {
            for kj in 0..KERNEL {
                let row = &mut col[((ch * TAPS) + ki * KERNEL + kj) * p..][..p];
                for oi in 0..oh {
                    let si = (oi * stride + ki) as isize - 1;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let src = &plane[si as usize * w..(si as usize + 1) * w];
                    let dst = &mut row[oi * ow..(oi + 1) * ow];
                    if stride == 1 {
                        // sj = oj + kj - 1
                        let lo = usize::from(kj == 0);
                        let hi = if kj == 2 { ow - 1 } else { ow };
                        let s0 = lo + kj - 1;
                        dst[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                    } else {
                        for (oj, d) in dst.iter_mut().enumerate() {
                            let sj = (oj * stride + kj) as isize - 1;
                            if sj >= 0 && sj < w as isize {
                                *d = src[sj as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `[c * 9, oh * ow]` patches back onto
/// `x` (`[c, h, w]`), accumulating.
pub(crate) fn col2im<T: Scalar>(col: &[T], c: usize, h: usize, w: usize, stride: usize, x: &mut [T]) {
    let oh = conv_out_dim(h, stride);
    let ow = conv_out_dim(w, stride);
    let p = oh * ow;
    for ch in 0..c {
        let plane = &mut x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..KERNEL {
            for kj in 0..KERNEL {
                let row = &col[((ch * TAPS) + ki * KERNEL + kj) * p..][..p];
                for oi in 0..oh {
                    let si = (oi * stride + ki) as isize - 1;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[si as usize * w..(si as usize + 1) * w];
                    let src = &row[oi * ow..(oi + 1) * ow];
                    if stride == 1 {
                        let lo = usize::from(kj == 0);
                        let hi = if kj == 2 { ow - 1 } else { ow };
                        let s0 = lo + kj - 1;
                        for (d, &s) in dst[s0..s0 + (hi - lo)].iter_mut().zip(&src[lo..hi]) {
                            *d = *d + s;
                        }
                    } else {
                        for (oj, &s) in src.iter().enumerate() {
                            let sj = (oj * stride + kj) as isize - 1;
                            if sj >= 0 && sj < w as isize {
                                let d = &mut dst[sj as usize];
                                *d = *d + s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adds a per-channel bias to `y` (`[c, p]`).
pub(crate) fn add_bias<T: Scalar>(y: &mut [T], bias: &[T], p: usize) {
    for (plane, &b) in y.chunks_exact_mut(p).zip(bias) {
        for v in plane {
            *v = *v + b;
        }
    }
}

/// Accumulates per-channel sums of `dy` (`[c, p]`) into `dbias`.
pub(crate) fn bias_grad<T: Scalar>(dy: &[T], dbias: &mut [T], p: usize) {
    for (plane, db) in dy.chunks_exact(p).zip(dbias) {
        *db = *db + plane.iter().copied().sum::<T>();
    }
}

/// 3x3 convolution, `x` `[cin, h, w]` → `[cout, oh, ow]`; leaves the
/// unfolded input in `col` for the backward pass.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3x3<T: Scalar>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    stride: usize,
    weight: &[T],
    bias: &[T],
    cout: usize,
    col: &mut Vec<T>,
) -> Vec<T> {
    im2col(x, cin, h, w, stride, col);
    let p = conv_out_dim(h, stride) * conv_out_dim(w, stride);
    let mut y = vec![T::zero(); cout * p];
    gemm(Mat::new(weight, cout, cin * TAPS), Mat::new(col, cin * TAPS, p), &mut y, false);
    add_bias(&mut y, bias, p);
    y
}

/// Backward of [`conv3x3`]. Accumulates into `dweight`/`dbias`, returns `dx`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3x3_backward<T: Scalar>(
    dy: &[T],
    col: &[T],
    cin: usize,
    h: usize,
    w: usize,
    stride: usize,
    weight: &[T],
    cout: usize,
    dweight: &mut [T],
    dbias: &mut [T],
    need_dx: bool,
) -> Vec<T> {
    let p = conv_out_dim(h, stride) * conv_out_dim(w, stride);
    let k = cin * TAPS;
    gemm(Mat::new(dy, cout, p), Mat::new(col, k, p).t(), dweight, true);
    bias_grad(dy, dbias, p);
    if !need_dx {
        return Vec::new();
    }
    let mut dcol = vec![T::zero(); k * p];
    gemm(Mat::new(weight, cout, k).t(), Mat::new(dy, cout, p), &mut dcol, false);
    let mut dx = vec![T::zero(); cin * h * w];
    col2im(&dcol, cin, h, w, stride, &mut dx);
    dx
}

/// Stride-2 transposed 3x3 convolution, `x` `[cin, h, w]` → `[cout, 2h, 2w]`.
/// `weight` is `[cin, cout * 9]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose3x3<T: Scalar>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[T],
    bias: &[T],
    cout: usize,
) -> Vec<T> {
    let p = h * w;
    let (oh, ow) = (2 * h, 2 * w);
    let mut cols = vec![T::zero(); cout * TAPS * p];
    gemm(Mat::new(weight, cin, cout * TAPS).t(), Mat::new(x, cin, p), &mut cols, false);
    let mut y = vec![T::zero(); cout * oh * ow];
    col2im(&cols, cout, oh, ow, 2, &mut y);
    add_bias(&mut y, bias, oh * ow);
    y
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose3x3_backward<T: Scalar>(
    dy: &[T],
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[T],
    cout: usize,
    dweight: &mut [T],
    dbias: &mut [T],
) -> Vec<T> {
    let p = h * w;
    let (oh, ow) = (2 * h, 2 * w);
    let mut dcols = Vec::new();
    im2col(dy, cout, oh, ow, 2, &mut dcols);
    gemm(Mat::new(x, cin, p), Mat::new(&dcols, cout * TAPS, p).t(), dweight, true);
    bias_grad(dy, dbias, oh * ow);
    let mut dx = vec![T::zero(); cin * p];
    gemm(Mat::new(weight, cin, cout * TAPS), Mat::new(&dcols, cout * TAPS, p), &mut dx, false);
    dx
}

/// 1x1 convolution: `[cin, p]` → `[cout, p]`.
pub(crate) fn conv1x1<T: Scalar>(x: &[T], cin: usize, p: usize, weight: &[T], bias: &[T], cout: usize) -> Vec<T> {
    let mut y = vec![T::zero(); cout * p];
    gemm(Mat::new(weight, cout, cin), Mat::new(x, cin, p), &mut y, false);
    add_bias(&mut y, bias, p);
    y
}

/// Backward of [`conv1x1`]; accumulates `dx` into `dx_acc`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv1x1_backward<T: Scalar>(
    dy: &[T],
    x: &[T],
    cin: usize,
    p: usize,
    weight: &[T],
    cout: usize,
    dweight: &mut [T],
    dbias: &mut [T],
    dx_acc: &mut [T],
) {
    gemm(Mat::new(dy, cout, p), Mat::new(x, cin, p).t(), dweight, true);
    bias_grad(dy, dbias, p);
    gemm(Mat::new(weight, cout, cin).t(), Mat::new(dy, cout, p), dx_acc, true);
}

pub(crate) const NORM_EPS: f64 = 1e-5;

/// Cached statistics from a group-norm forward pass.
pub(crate) struct NormCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub groups: usize,
}

/// Group normalization over `[c, p]` followed by a per-channel affine map.
pub(crate) fn group_norm<T: Scalar>(
    x: &[T],
    c: usize,
    p: usize,
    groups: usize,
    scale: &[T],
    shift: &[T],
) -> (Vec<T>, NormCache<T>) {
    let per_group = c / groups * p;
    let n = T::of(per_group as f64);
    let eps = T::of(NORM_EPS);
    let mut xhat = vec![T::zero(); c * p];
    let mut inv_std = Vec::with_capacity(groups);
    for g in 0..groups {
        let xs = &x[g * per_group..(g + 1) * per_group];
        let mean = xs.iter().copied().sum::<T>() / n;
        let var = xs
            .iter()
            .map(|&v| {
                let d = v - mean;
                d * d
            })
            .sum::<T>()
            / n;
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        for (o, &v) in xhat[g * per_group..(g + 1) * per_group].iter_mut().zip(xs) {
            *o = (v - mean) * is;
        }
    }
    let mut y = vec![T::zero(); c * p];
    for ch in 0..c {
        let (s, b) = (scale[ch], shift[ch]);
        for (o, &v) in y[ch * p..(ch + 1) * p].iter_mut().zip(&xhat[ch * p..(ch + 1) * p]) {
            *o = v * s + b;
        }
    }
    (y, NormCache { xhat, inv_std, groups })
}

/// Backward of [`group_norm`]; accumulates scale/shift gradients, returns `dx`.
pub(crate) fn group_norm_backward<T: Scalar>(
    dy: &[T],
    cache: &NormCache<T>,
    c: usize,
    p: usize,
    scale: &[T],
    dscale: &mut [T],
    dshift: &mut [T],
) -> Vec<T> {
    let groups = cache.groups;
    let per_group = c / groups * p;
    let n = T::of(per_group as f64);
    let mut dxhat = vec![T::zero(); c * p];
    for ch in 0..c {
        let range = ch * p..(ch + 1) * p;
        let mut ds = T::zero();
        let mut db = T::zero();
        for ((d, &g), &xh) in dxhat[range.clone()].iter_mut().zip(&dy[range.clone()]).zip(&cache.xhat[range]) {
            ds = ds + g * xh;
            db = db + g;
            *d = g * scale[ch];
        }
        dscale[ch] = dscale[ch] + ds;
        dshift[ch] = dshift[ch] + db;
    }
    let mut dx = vec![T::zero(); c * p];
    for g in 0..groups {
        let range = g * per_group..(g + 1) * per_group;
        let dxh = &dxhat[range.clone()];
        let xh = &cache.xhat[range.clone()];
        let sum_d = dxh.iter().copied().sum::<T>();
        let sum_dx = dxh.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>();
        let k = cache.inv_std[g] / n;
        for ((o, &d), &xv) in dx[range].iter_mut().zip(dxh).zip(xh) {
            *o = k * (n * d - sum_d - xv * sum_dx);
        }
    }
    dx
}

pub(crate) fn relu_in_place<T: Scalar>(x: &mut [T]) {
    for v in x {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zeroes `dy` wherever the activation output was not positive.
pub(crate) fn relu_backward_in_place<T: Scalar>(dy: &mut [T], out: &[T]) {
    for (d, &o) in dy.iter_mut().zip(out) {
        if o <= T::zero() {
            *d = T::zero();
        }
    }
}
