//! Single-sample layer kernels with explicit backward passes.
//!
//! Activations are channel-major `C x H x W` buffers. Each forward returns
//! whatever its backward needs; backwards accumulate parameter gradients
//! into caller-provided slices and return the input gradient.

use crate::real::Real;

/// Channel-major activation buffer for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Features<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Real> Features<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![T::zero(); channels * height * width],
        }
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    /// Stacks `other` after `self` along the channel axis.
    pub fn concat(mut self, other: &Features<T>) -> Self {
        debug_assert_eq!((self.height, self.width), (other.height, other.width));
        self.channels += other.channels;
        self.data.extend_from_slice(&other.data);
        self
    }

    /// Splits off the trailing channels, returning `(head, tail)`.
    pub fn split(mut self, head_channels: usize) -> (Self, Self) {
        let p = self.plane();
        let tail_data = self.data.split_off(head_channels * p);
        let tail = Features {
            channels: self.channels - head_channels,
            height: self.height,
            width: self.width,
            data: tail_data,
        };
        self.channels = head_channels;
        (self, tail)
    }

    pub fn add_assign(&mut self, other: &Features<T>) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }
}

#[inline]
fn fast_sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

// ---------------------------------------------------------------------------
// Convolution (stride 1, "same" zero padding, odd square kernel)

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl ConvShape {
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.patch_len()
    }
}

pub struct ConvCache<T> {
    /// im2col matrix, `patch_len x (H*W)`; the raw input for 1x1 kernels.
    col: Vec<T>,
    height: usize,
    width: usize,
}

fn im2col<T: Real>(x: &Features<T>, kernel: usize) -> Vec<T> {
    let (h, w) = (x.height, x.width);
    let pad = (kernel / 2) as isize;
    let plane = h * w;
    let mut col = vec![T::zero(); x.channels * kernel * kernel * plane];
    for c in 0..x.channels {
        let src = x.channel(c);
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (c * kernel + ky) * kernel + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx).min(w as isize) as usize;
                    let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                    let drow = &mut dst[y * w..(y + 1) * w];
                    for xx in x_lo..x_hi {
                        drow[xx] = srow[(xx as isize + dx) as usize];
                    }
                }
            }
        }
    }
    col
}

fn col2im<T: Real>(col: &[T], channels: usize, h: usize, w: usize, kernel: usize) -> Features<T> {
    let pad = (kernel / 2) as isize;
    let plane = h * w;
    let mut out = Features::zeros(channels, h, w);
    for c in 0..channels {
        let dst = &mut out.data[c * plane..(c + 1) * plane];
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (c * kernel + ky) * kernel + kx;
                let src = &col[row * plane..(row + 1) * plane];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx).min(w as isize) as usize;
                    let srow = &src[y * w..(y + 1) * w];
                    let drow = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                    for xx in x_lo..x_hi {
                        let d = &mut drow[(xx as isize + dx) as usize];
                        *d = *d + srow[xx];
                    }
                }
            }
        }
    }
    out
}

pub fn conv_forward<T: Real>(
    shape: ConvShape,
    weight: &[T],
    bias: &[T],
    x: &Features<T>,
) -> (Features<T>, ConvCache<T>) {
    debug_assert_eq!(x.channels, shape.in_channels);
    debug_assert_eq!(weight.len(), shape.weight_len());
    let (h, w) = (x.height, x.width);
    let plane = h * w;
    let col = if shape.kernel == 1 {
        x.data.clone()
    } else {
        im2col(x, shape.kernel)
    };
    let mut out = Features::zeros(shape.out_channels, h, w);
    for (c, &b) in bias.iter().enumerate() {
        out.data[c * plane..(c + 1) * plane].fill(b);
    }
    let k = shape.patch_len();
    T::gemm(
        shape.out_channels,
        k,
        plane,
        T::one(),
        weight,
        k as isize,
        1,
        &col,
        plane as isize,
        1,
        T::one(),
        &mut out.data,
        plane as isize,
        1,
    );
    (
        out,
        ConvCache {
            col,
            height: h,
            width: w,
        },
    )
}

pub fn conv_backward<T: Real>(
    shape: ConvShape,
    weight: &[T],
    cache: &ConvCache<T>,
    grad_out: &Features<T>,
    grad_weight: &mut [T],
    grad_bias: &mut [T],
) -> Features<T> {
    let plane = cache.height * cache.width;
    let k = shape.patch_len();
    for (c, gb) in grad_bias.iter_mut().enumerate() {
        *gb = *gb + grad_out.data[c * plane..(c + 1) * plane].iter().copied().sum::<T>();
    }
    // dW += dY * col^T
    T::gemm(
        shape.out_channels,
        plane,
        k,
        T::one(),
        &grad_out.data,
        plane as isize,
        1,
        &cache.col,
        1,
        plane as isize,
        T::one(),
        grad_weight,
        k as isize,
        1,
    );
    // dcol = W^T * dY
    let mut dcol = vec![T::zero(); k * plane];
    T::gemm(
        k,
        shape.out_channels,
        plane,
        T::one(),
        weight,
        1,
        k as isize,
        &grad_out.data,
        plane as isize,
        1,
        T::zero(),
        &mut dcol,
        plane as isize,
        1,
    );
    if shape.kernel == 1 {
        Features {
            channels: shape.in_channels,
            height: cache.height,
            width: cache.width,
            data: dcol,
        }
    } else {
        col2im(&dcol, shape.in_channels, cache.height, cache.width, shape.kernel)
    }
}

// ---------------------------------------------------------------------------
// Group normalization

pub const GROUP_NORM_EPS: f64 = 1e-5;

pub struct NormCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

/// Zero-mean, unit-variance normalization per group, before the affine step.
pub fn group_normalize<T: Real>(x: &Features<T>, groups: usize) -> (Vec<T>, Vec<T>) {
    debug_assert_eq!(x.channels % groups, 0);
    let group_len = x.channels / groups * x.plane();
    let n = T::from_usize(group_len).unwrap();
    let eps = T::from_f64_lossy(GROUP_NORM_EPS);
    let mut xhat = vec![T::zero(); x.data.len()];
    let mut inv_std = Vec::with_capacity(groups);
    for g in 0..groups {
        let span = g * group_len..(g + 1) * group_len;
        let src = &x.data[span.clone()];
        let mean = src.iter().copied().sum::<T>() / n;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + eps).sqrt();
        for (d, &v) in xhat[span].iter_mut().zip(src) {
            *d = (v - mean) * inv;
        }
        inv_std.push(inv);
    }
    (xhat, inv_std)
}

pub fn group_norm_forward<T: Real>(
    groups: usize,
    gamma: &[T],
    beta: &[T],
    x: &Features<T>,
) -> (Features<T>, NormCache<T>) {
    let (xhat, inv_std) = group_normalize(x, groups);
    let plane = x.plane();
    let mut out = Features::zeros(x.channels, x.height, x.width);
    for c in 0..x.channels {
        let span = c * plane..(c + 1) * plane;
        for (o, &v) in out.data[span.clone()].iter_mut().zip(&xhat[span]) {
            *o = gamma[c] * v + beta[c];
        }
    }
    (out, NormCache { xhat, inv_std })
}

pub fn group_norm_backward<T: Real>(
    groups: usize,
    gamma: &[T],
    cache: &NormCache<T>,
    grad_out: &Features<T>,
    grad_gamma: &mut [T],
    grad_beta: &mut [T],
) -> Features<T> {
    let channels = grad_out.channels;
    let plane = grad_out.plane();
    let per_group = channels / groups;
    let group_len = per_group * plane;
    let n = T::from_usize(group_len).unwrap();
    let mut dx = Features::zeros(channels, grad_out.height, grad_out.width);
    for g in 0..groups {
        let mut sum_d = T::zero();
        let mut sum_dx = T::zero();
        for c in g * per_group..(g + 1) * per_group {
            let span = c * plane..(c + 1) * plane;
            let mut gg = T::zero();
            let mut gb = T::zero();
            for (&dy, &xh) in grad_out.data[span.clone()].iter().zip(&cache.xhat[span.clone()]) {
                gg = gg + dy * xh;
                gb = gb + dy;
                let dxh = dy * gamma[c];
                sum_d = sum_d + dxh;
                sum_dx = sum_dx + dxh * xh;
            }
            grad_gamma[c] = grad_gamma[c] + gg;
            grad_beta[c] = grad_beta[c] + gb;
        }
        let inv = cache.inv_std[g];
        let scale = inv / n;
        for c in g * per_group..(g + 1) * per_group {
            let span = c * plane..(c + 1) * plane;
            for ((d, &dy), &xh) in dx.data[span.clone()]
                .iter_mut()
                .zip(&grad_out.data[span.clone()])
                .zip(&cache.xhat[span])
            {
                let dxh = dy * gamma[c];
                *d = scale * (n * dxh - sum_d - xh * sum_dx);
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// SiLU

pub fn silu_forward<T: Real>(x: Features<T>) -> (Features<T>, Vec<T>) {
    let pre = x.data.clone();
    let mut out = x;
    for v in out.data.iter_mut() {
        *v = *v * fast_sigmoid(*v);
    }
    (out, pre)
}

pub fn silu_backward<T: Real>(pre: &[T], mut grad: Features<T>) -> Features<T> {
    for (g, &x) in grad.data.iter_mut().zip(pre) {
        let s = fast_sigmoid(x);
        *g = *g * s * (T::one() + x * (T::one() - s));
    }
    grad
}

pub fn silu_vec<T: Real>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v * fast_sigmoid(v)).collect()
}

pub fn silu_vec_backward<T: Real>(pre: &[T], grad: &[T]) -> Vec<T> {
    pre.iter()
        .zip(grad)
        .map(|(&x, &g)| {
            let s = fast_sigmoid(x);
            g * s * (T::one() + x * (T::one() - s))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Pooling and resampling

pub fn max_pool_forward<T: Real>(x: &Features<T>) -> (Features<T>, Vec<u32>) {
    let (h, w) = (x.height / 2, x.width / 2);
    let mut out = Features::zeros(x.channels, h, w);
    let mut argmax = Vec::with_capacity(out.data.len());
    let in_plane = x.plane();
    for c in 0..x.channels {
        for y in 0..h {
            for xx in 0..w {
                let base = c * in_plane + 2 * y * x.width + 2 * xx;
                let candidates = [base, base + 1, base + x.width, base + x.width + 1];
                let mut best = candidates[0];
                for &i in &candidates[1..] {
                    if x.data[i] > x.data[best] {
                        best = i;
                    }
                }
                out.data[(c * h + y) * w + xx] = x.data[best];
                argmax.push(best as u32);
            }
        }
    }
    (out, argmax)
}

pub fn max_pool_backward<T: Real>(
    argmax: &[u32],
    grad_out: &Features<T>,
    in_height: usize,
    in_width: usize,
) -> Features<T> {
    let mut dx = Features::zeros(grad_out.channels, in_height, in_width);
    for (&i, &g) in argmax.iter().zip(&grad_out.data) {
        let d = &mut dx.data[i as usize];
        *d = *d + g;
    }
    dx
}

pub fn upsample_forward<T: Real>(x: &Features<T>) -> Features<T> {
    let (h, w) = (x.height * 2, x.width * 2);
    let mut out = Features::zeros(x.channels, h, w);
    for c in 0..x.channels {
        let src = x.channel(c);
        for y in 0..h {
            for xx in 0..w {
                out.data[(c * h + y) * w + xx] = src[(y / 2) * x.width + xx / 2];
            }
        }
    }
    out
}

pub fn upsample_backward<T: Real>(grad_out: &Features<T>) -> Features<T> {
    let (h, w) = (grad_out.height / 2, grad_out.width / 2);
    let mut dx = Features::zeros(grad_out.channels, h, w);
    for c in 0..grad_out.channels {
        let src = grad_out.channel(c);
        for y in 0..grad_out.height {
            for xx in 0..grad_out.width {
                let d = &mut dx.data[(c * h + y / 2) * w + xx / 2];
                *d = *d + src[y * grad_out.width + xx];
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Dense layers (row-major `out x in` weights)

pub fn linear_forward<T: Real>(weight: &[T], bias: &[T], x: &[T]) -> Vec<T> {
    let n_in = x.len();
    bias.iter()
        .enumerate()
        .map(|(o, &b)| {
            weight[o * n_in..(o + 1) * n_in]
                .iter()
                .zip(x)
                .fold(b, |acc, (&wv, &xv)| acc + wv * xv)
        })
        .collect()
}

pub fn linear_backward<T: Real>(
    weight: &[T],
    x: &[T],
    grad_out: &[T],
    grad_weight: &mut [T],
    grad_bias: &mut [T],
) -> Vec<T> {
    let n_in = x.len();
    let mut dx = vec![T::zero(); n_in];
    for (o, &g) in grad_out.iter().enumerate() {
        grad_bias[o] = grad_bias[o] + g;
        let row = &weight[o * n_in..(o + 1) * n_in];
        let grow = &mut grad_weight[o * n_in..(o + 1) * n_in];
        for i in 0..n_in {
            grow[i] = grow[i] + g * x[i];
            dx[i] = dx[i] + g * row[i];
        }
    }
    dx
}
