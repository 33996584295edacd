//! Layer primitives with explicit backward passes.

use super::{Real, Tensor};

fn out_len(n: usize, k: usize, stride: usize) -> usize {
    (n + 2 * (k / 2) - k) / stride + 1
}

/// Unrolls `k x k` patches (zero padding `k/2`) into a `[c*k*k, ho*wo]` matrix.
pub(crate) fn im2col<T: Real>(x: &Tensor<T>, k: usize, stride: usize) -> (Vec<T>, usize, usize) {
    let (ho, wo) = (out_len(x.h, k, stride), out_len(x.w, k, stride));
    let pad = (k / 2) as isize;
    let n = ho * wo;
    let mut col = vec![T::zero(); x.c * k * k * n];
    for ci in 0..x.c {
        let plane = x.plane(ci);
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * n..][..n];
                let (lo, hi) = valid_range(x.w, wo, kx, pad, stride);
                for oy in 0..ho {
                    let iy = (oy * stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= x.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * x.w..][..x.w];
                    let dst = &mut row[oy * wo..][..wo];
                    if stride == 1 {
                        let off = (lo as isize + kx as isize - pad) as usize;
                        dst[lo..hi].copy_from_slice(&src[off..off + (hi - lo)]);
                    } else {
                        for ox in lo..hi {
                            dst[ox] = src[(ox as isize * stride as isize + kx as isize - pad) as usize];
                        }
                    }
                }
            }
        }
    }
    (col, ho, wo)
}

/// Output columns `[lo, hi)` whose tap `kx` lands inside the input row.
fn valid_range(w: usize, wo: usize, kx: usize, pad: isize, stride: usize) -> (usize, usize) {
    let s = stride as isize;
    let off = kx as isize - pad;
    // ox*s + off >= 0 and ox*s + off <= w-1
    let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
    let hi = ((w as isize - 1 - off).div_euclid(s) + 1).clamp(0, wo as isize);
    (lo.clamp(0, wo as isize) as usize, hi.max(lo) as usize)
}

/// Adjoint of [`im2col`].
pub(crate) fn col2im<T: Real>(col: &[T], c: usize, h: usize, w: usize, k: usize, stride: usize) -> Tensor<T> {
    let (ho, wo) = (out_len(h, k, stride), out_len(w, k, stride));
    let pad = (k / 2) as isize;
    let n = ho * wo;
    let mut x = Tensor::zeros(c, h, w);
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * n..][..n];
                let (lo, hi) = valid_range(w, wo, kx, pad, stride);
                for oy in 0..ho {
                    let iy = (oy * stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut x.data[(ci * h + iy as usize) * w..][..w];
                    let src = &row[oy * wo..][..wo];
                    for ox in lo..hi {
                        dst[(ox as isize * stride as isize + kx as isize - pad) as usize] += src[ox];
                    }
                }
            }
        }
    }
    x
}

/// Convolution with weights `[cout, cin, k, k]` and optional bias.
pub(crate) fn conv_forward<T: Real>(
    x: &Tensor<T>,
    weight: &[T],
    bias: Option<&[T]>,
    cout: usize,
    k: usize,
    stride: usize,
) -> Tensor<T> {
    let kk = x.c * k * k;
    debug_assert_eq!(weight.len(), cout * kk);
    let owned;
    let (col, ho, wo): (&[T], usize, usize) = if k == 1 && stride == 1 {
        (&x.data, x.h, x.w)
    } else {
        let (c, ho, wo) = im2col(x, k, stride);
        owned = c;
        (&owned, ho, wo)
    };
    let n = ho * wo;
    let mut out = Tensor::zeros(cout, ho, wo);
    T::gemm(
        cout,
        kk,
        n,
        (weight, kk as isize, 1),
        (col, n as isize, 1),
        T::zero(),
        (&mut out.data, n as isize, 1),
    );
    if let Some(b) = bias {
        for (o, &bv) in b.iter().enumerate() {
            for v in &mut out.data[o * n..(o + 1) * n] {
                *v += bv;
            }
        }
    }
    out
}

/// Accumulates weight/bias gradients and returns the input gradient if asked.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Real>(
    x: &Tensor<T>,
    weight: &[T],
    dy: &Tensor<T>,
    k: usize,
    stride: usize,
    dw: &mut [T],
    db: Option<&mut [T]>,
    need_dx: bool,
) -> Option<Tensor<T>> {
    let kk = x.c * k * k;
    let cout = dy.c;
    let n = dy.h * dy.w;
    let owned;
    let col: &[T] = if k == 1 && stride == 1 {
        &x.data
    } else {
        owned = im2col(x, k, stride).0;
        &owned
    };
    // dW += dY colᵀ
    T::gemm(
        cout,
        n,
        kk,
        (&dy.data, n as isize, 1),
        (col, 1, n as isize),
        T::one(),
        (dw, kk as isize, 1),
    );
    if let Some(db) = db {
        for (o, g) in db.iter_mut().enumerate() {
            *g += dy.data[o * n..(o + 1) * n].iter().copied().sum::<T>();
        }
    }
    if !need_dx {
        return None;
    }
    // dcol = Wᵀ dY
    let mut dcol = vec![T::zero(); kk * n];
    T::gemm(
        kk,
        cout,
        n,
        (weight, 1, kk as isize),
        (&dy.data, n as isize, 1),
        T::zero(),
        (&mut dcol, n as isize, 1),
    );
    if k == 1 && stride == 1 {
        return Some(Tensor {
            c: x.c,
            h: x.h,
            w: x.w,
            data: dcol,
        });
    }
    Some(col2im(&dcol, x.c, x.h, x.w, k, stride))
}

/// Per-channel normalization over the spatial axes, then `gamma * xhat + beta`.
/// Returns `(y, xhat, inv_std)`.
pub(crate) fn instance_norm_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let n = x.h * x.w;
    let mut y = Tensor::zeros(x.c, x.h, x.w);
    let mut xhat = vec![T::zero(); x.data.len()];
    let mut inv_std = Vec::with_capacity(x.c);
    for ch in 0..x.c {
        let plane = x.plane(ch);
        let mean = plane.iter().map(|v| v.f64()).sum::<f64>() / n as f64;
        let var = plane.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / n as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std.push(T::of(is));
        let (g, b) = (gamma[ch], beta[ch]);
        let range = ch * n..(ch + 1) * n;
        for ((xh, yv), &v) in xhat[range.clone()].iter_mut().zip(&mut y.data[range]).zip(plane) {
            *xh = T::of((v.f64() - mean) * is);
            *yv = g * *xh + b;
        }
    }
    (y, xhat, inv_std)
}

pub(crate) fn instance_norm_backward<T: Real>(
    dy: &Tensor<T>,
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Tensor<T> {
    let n = dy.h * dy.w;
    let nf = n as f64;
    let mut dx = Tensor::zeros(dy.c, dy.h, dy.w);
    for ch in 0..dy.c {
        let range = ch * n..(ch + 1) * n;
        let d = &dy.data[range.clone()];
        let xh = &xhat[range.clone()];
        let sum_d: f64 = d.iter().map(|v| v.f64()).sum();
        let sum_dx: f64 = d.iter().zip(xh).map(|(a, b)| a.f64() * b.f64()).sum();
        dgamma[ch] += T::of(sum_dx);
        dbeta[ch] += T::of(sum_d);
        let g = gamma[ch].f64();
        let k = g * inv_std[ch].f64() / nf;
        for ((o, &dv), &xv) in dx.data[range].iter_mut().zip(d).zip(xh) {
            *o = T::of(k * (nf * dv.f64() - sum_d - xv.f64() * sum_dx));
        }
    }
    dx
}

pub(crate) fn leaky_relu<T: Real>(x: &mut [T], slope: T) {
    for v in x {
        if *v < T::zero() {
            *v *= slope;
        }
    }
}

/// Gradient through the activation given its input `pre`.
pub(crate) fn leaky_relu_backward<T: Real>(dy: &mut [T], pre: &[T], slope: T) {
    for (d, &p) in dy.iter_mut().zip(pre) {
        if p < T::zero() {
            *d *= slope;
        }
    }
}

pub(crate) fn upsample2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut out = Tensor::zeros(x.c, h, w);
    for ch in 0..x.c {
        for r in 0..h {
            let src = &x.data[(ch * x.h + r / 2) * x.w..][..x.w];
            let dst = &mut out.data[(ch * h + r) * w..][..w];
            for (c, d) in dst.iter_mut().enumerate() {
                *d = src[c / 2];
            }
        }
    }
    out
}

/// Adjoint of [`upsample2`]: sums each 2x2 block.
pub(crate) fn upsample2_backward<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut out = Tensor::zeros(dy.c, h, w);
    for ch in 0..dy.c {
        for r in 0..dy.h {
            let src = &dy.data[(ch * dy.h + r) * dy.w..][..dy.w];
            let dst = &mut out.data[(ch * h + r / 2) * w..][..w];
            for (c, &v) in src.iter().enumerate() {
                dst[c / 2] += v;
            }
        }
    }
    out
}

pub(crate) fn concat<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    debug_assert_eq!((a.h, a.w), (b.h, b.w));
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor {
        c: a.c + b.c,
        h: a.h,
        w: a.w,
        data,
    }
}

pub(crate) fn split<T: Real>(x: Tensor<T>, first: usize) -> (Tensor<T>, Tensor<T>) {
    let n = x.h * x.w;
    let mut data = x.data;
    let rest = data.split_off(first * n);
    (
        Tensor {
            c: first,
            h: x.h,
            w: x.w,
            data,
        },
        Tensor {
            c: x.c - first,
            h: x.h,
            w: x.w,
            data: rest,
        },
    )
}
