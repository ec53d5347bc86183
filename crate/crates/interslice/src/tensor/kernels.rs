//! Convolution and rearrangement kernels.
//!
//! Convolution is im2col + gemm. Work is split into fixed-size pixel chunks
//! and distributed with rayon; chunk boundaries depend only on tensor shapes
//! and gradient reductions sum partials in a fixed order, so results are
//! bit-identical for any thread count.

use rayon::prelude::*;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Pixel columns per gemm task.
const GEMM_COL_CHUNK: usize = 1024;

pub(crate) struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub h_out: usize,
    pub w_out: usize,
}

pub(crate) fn check_conv_shapes<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    padding: usize,
) -> Result<ConvDims> {
    let xs = x.shape();
    let ws = weight.shape();
    if xs.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            detail: format!("input must be [N,C,H,W], got {xs:?}"),
        });
    }
    if ws.len() != 4 || ws[2] != ws[3] {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            detail: format!("weight must be [Cout,Cin,k,k], got {ws:?}"),
        });
    }
    let (n, c_in, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (c_out, k) = (ws[0], ws[2]);
    if k % 2 == 0 {
        return Err(Error::InvalidArgument { detail: format!("conv2d kernel size {k} must be odd") });
    }
    if ws[1] != c_in {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            detail: format!("input has {c_in} channels but weight expects {} (dim 1 of weight)", ws[1]),
        });
    }
    if bias.shape() != [c_out] {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            detail: format!("bias shape {:?} must be [{c_out}] (dim 0 of weight)", bias.shape()),
        });
    }
    if h + 2 * padding < k || w + 2 * padding < k {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            detail: format!("spatial dims {h}x{w} too small for kernel {k} with padding {padding}"),
        });
    }
    let h_out = h + 2 * padding - k + 1;
    let w_out = w + 2 * padding - k + 1;
    Ok(ConvDims { n, c_in, h, w, c_out, k, h_out, w_out })
}

/// Reusable im2col buffers; owned by a graph so repeated convolutions stop
/// paying large-allocation cost.
pub struct ConvScratch<T> {
    cols: Vec<T>,
    dcols: Vec<T>,
}

impl<T> Default for ConvScratch<T> {
    fn default() -> Self {
        ConvScratch { cols: Vec::new(), dcols: Vec::new() }
    }
}

fn resize_scratch<T: Scalar>(buf: &mut Vec<T>, len: usize) {
    if buf.len() < len {
        buf.resize(len, T::zero());
    }
}

/// Unpack one sample into a `[Cin*k*k, H'*W']` column matrix, zero-padded.
/// Only segments the copy loop cannot reach are zeroed, so a dirty scratch
/// buffer is fine.
fn im2col<T: Scalar>(x: &[T], d: &ConvDims, padding: usize, cols: &mut [T]) {
    let p = d.h_out * d.w_out;
    debug_assert_eq!(cols.len(), d.c_in * d.k * d.k * p);
    for ci in 0..d.c_in {
        let x_ch = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.k {
            for kx in 0..d.k {
                let row = (ci * d.k + ky) * d.k + kx;
                let out_row = &mut cols[row * p..(row + 1) * p];
                // valid ox satisfy 0 <= ox + kx - padding < w
                let ox_lo = padding.saturating_sub(kx);
                let ox_hi = (d.w + padding - kx).min(d.w_out);
                for oy in 0..d.h_out {
                    let iy = oy + ky;
                    let dst = &mut out_row[oy * d.w_out..(oy + 1) * d.w_out];
                    if iy < padding || iy >= d.h + padding {
                        dst.fill(T::zero());
                        continue;
                    }
                    let iy = iy - padding;
                    if ox_lo >= ox_hi {
                        dst.fill(T::zero());
                        continue;
                    }
                    dst[..ox_lo].fill(T::zero());
                    dst[ox_hi..].fill(T::zero());
                    let ix_lo = ox_lo + kx - padding;
                    let len = ox_hi - ox_lo;
                    dst[ox_lo..ox_hi].copy_from_slice(&x_ch[iy * d.w + ix_lo..iy * d.w + ix_lo + len]);
                }
            }
        }
    }
}

/// Scatter-add a column matrix back into one sample's `[Cin,H,W]` image.
fn col2im<T: Scalar>(cols: &[T], d: &ConvDims, padding: usize, x: &mut [T]) {
    let p = d.h_out * d.w_out;
    for ci in 0..d.c_in {
        let x_ch = &mut x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.k {
            for kx in 0..d.k {
                let row = (ci * d.k + ky) * d.k + kx;
                let col_row = &cols[row * p..(row + 1) * p];
                for oy in 0..d.h_out {
                    let iy = oy + ky;
                    if iy < padding || iy >= d.h + padding {
                        continue;
                    }
                    let iy = iy - padding;
                    let ox_lo = padding.saturating_sub(kx);
                    let ox_hi = (d.w + padding - kx).min(d.w_out);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let ix_lo = ox_lo + kx - padding;
                    for (dst, src) in x_ch[iy * d.w + ix_lo..iy * d.w + ix_lo + (ox_hi - ox_lo)]
                        .iter_mut()
                        .zip(&col_row[oy * d.w_out + ox_lo..oy * d.w_out + ox_hi])
                    {
                        *dst = *dst + *src;
                    }
                }
            }
        }
    }
}

fn chunk_starts(total: usize) -> Vec<(usize, usize)> {
    let mut v = Vec::with_capacity(total.div_ceil(GEMM_COL_CHUNK));
    let mut s = 0;
    while s < total {
        let e = (s + GEMM_COL_CHUNK).min(total);
        v.push((s, e));
        s = e;
    }
    v
}

/// Cross-correlation with zero padding: `y[n,co] = sum_ci x[n,ci] * w[co,ci] + b[co]`.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    padding: usize,
) -> Result<Tensor<T>> {
    conv2d_forward_with(x, weight, bias, padding, &mut ConvScratch::default())
}

pub(crate) fn conv2d_forward_with<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    padding: usize,
    scratch: &mut ConvScratch<T>,
) -> Result<Tensor<T>> {
    let d = check_conv_shapes(x, weight, bias, padding)?;
    let p = d.h_out * d.w_out;
    let ckk = d.c_in * d.k * d.k;

    resize_scratch(&mut scratch.cols, d.n * ckk * p);
    let cols = &mut scratch.cols[..d.n * ckk * p];
    cols.par_chunks_mut(ckk * p).enumerate().for_each(|(n, c)| {
        im2col(&x.data()[n * d.c_in * d.h * d.w..], &d, padding, c);
    });

    // Seed the output with the bias, then accumulate the gemm on top.
    let mut y = vec![T::zero(); d.n * d.c_out * p];
    y.par_chunks_mut(p).enumerate().for_each(|(i, row)| {
        let co = i % d.c_out;
        let b = bias.data()[co];
        for v in row.iter_mut() {
            *v = b;
        }
    });

    let w_data = weight.data();
    let tasks: Vec<(usize, usize, usize)> =
        (0..d.n).flat_map(|n| chunk_starts(p).into_iter().map(move |(s, e)| (n, s, e))).collect();
    // Tasks write disjoint column ranges of disjoint samples.
    struct SendPtr<T>(*mut T);
    unsafe impl<T> Send for SendPtr<T> {}
    unsafe impl<T> Sync for SendPtr<T> {}
    impl<T> SendPtr<T> {
        fn get(&self) -> *mut T {
            self.0
        }
    }
    let y_ptr = SendPtr(y.as_mut_ptr());
    let cols_ref: &[T] = cols;
    tasks.par_iter().for_each(|&(n, s, e)| {
        let y_base = unsafe { y_ptr.get().add(n * d.c_out * p + s) };
        unsafe {
            T::gemm_strided(
                d.c_out, ckk, e - s, T::one(),
                w_data.as_ptr(), ckk as isize, 1,
                cols_ref.as_ptr().add(n * ckk * p + s), p as isize, 1,
                T::one(),
                y_base, p as isize, 1,
            );
        }
    });

    Tensor::new(vec![d.n, d.c_out, d.h_out, d.w_out], y)
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

/// Gradients of `conv2d_forward` given upstream `dy`.
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    dy: &Tensor<T>,
    padding: usize,
    need_dx: bool,
    scratch: &mut ConvScratch<T>,
) -> Result<ConvGrads<T>> {
    let d = check_conv_shapes(x, weight, bias, padding)?;
    let p = d.h_out * d.w_out;
    let ckk = d.c_in * d.k * d.k;
    debug_assert_eq!(dy.shape(), [d.n, d.c_out, d.h_out, d.w_out]);

    resize_scratch(&mut scratch.cols, d.n * ckk * p);
    let cols = &mut scratch.cols[..d.n * ckk * p];
    cols.par_chunks_mut(ckk * p).enumerate().for_each(|(n, c)| {
        im2col(&x.data()[n * d.c_in * d.h * d.w..], &d, padding, c);
    });
    let cols: &[T] = cols;

    // dW = sum over (sample, pixel chunk) of dy_chunk . cols_chunk^T,
    // partials reduced in task order.
    let tasks: Vec<(usize, usize, usize)> =
        (0..d.n).flat_map(|n| chunk_starts(p).into_iter().map(move |(s, e)| (n, s, e))).collect();
    let partials: Vec<Vec<T>> = tasks
        .par_iter()
        .map(|&(n, s, e)| {
            let mut part = vec![T::zero(); d.c_out * ckk];
            unsafe {
                T::gemm_strided(
                    d.c_out, e - s, ckk, T::one(),
                    dy.data().as_ptr().add(n * d.c_out * p + s), p as isize, 1,
                    cols.as_ptr().add(n * ckk * p + s), 1, p as isize,
                    T::zero(),
                    part.as_mut_ptr(), ckk as isize, 1,
                );
            }
            part
        })
        .collect();
    let mut dw = vec![T::zero(); d.c_out * ckk];
    for part in &partials {
        for (a, &b) in dw.iter_mut().zip(part) {
            *a = *a + b;
        }
    }

    let mut db = vec![T::zero(); d.c_out];
    for n in 0..d.n {
        for co in 0..d.c_out {
            let row = &dy.data()[(n * d.c_out + co) * p..(n * d.c_out + co + 1) * p];
            let mut acc = T::zero();
            for &v in row {
                acc = acc + v;
            }
            db[co] = db[co] + acc;
        }
    }

    let dx = if need_dx {
        let w_data = weight.data();
        resize_scratch(&mut scratch.dcols, d.n * ckk * p);
        let dcols_all = &mut scratch.dcols[..d.n * ckk * p];
        let mut dx = vec![T::zero(); d.n * d.c_in * d.h * d.w];
        dcols_all
            .par_chunks_mut(ckk * p)
            .zip(dx.par_chunks_mut(d.c_in * d.h * d.w))
            .enumerate()
            .for_each(|(n, (dcols, dx_n))| {
                unsafe {
                    // dcols = W^T . dy_n
                    T::gemm_strided(
                        ckk, d.c_out, p, T::one(),
                        w_data.as_ptr(), 1, ckk as isize,
                        dy.data().as_ptr().add(n * d.c_out * p), p as isize, 1,
                        T::zero(),
                        dcols.as_mut_ptr(), p as isize, 1,
                    );
                }
                col2im(dcols, &d, padding, dx_n);
            });
        Some(Tensor::new(vec![d.n, d.c_in, d.h, d.w], dx)?)
    } else {
        None
    };

    Ok(ConvGrads {
        dx,
        dw: Tensor::new(weight.shape().to_vec(), dw)?,
        db: Tensor::new(vec![d.c_out], db)?,
    })
}

fn check_nchw<T: Scalar>(x: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::ShapeMismatch { op: "pixel_shuffle", detail: format!("{op} expects [N,C,H,W], got {s:?}") });
    }
    Ok((s[0], s[1], s[2], s[3]))
}

/// Space-to-depth: `[N,C,H,W] -> [N,C*r^2,H/r,W/r]` with output channel
/// `c*r^2 + dy*r + dx`. A pure permutation; no arithmetic.
pub fn pixel_unshuffle<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = check_nchw(x, "pixel_unshuffle")?;
    if r == 0 || h % r != 0 {
        return Err(Error::Indivisible { op: "pixel_unshuffle", extent: h, factor: r });
    }
    if w % r != 0 {
        return Err(Error::Indivisible { op: "pixel_unshuffle", extent: w, factor: r });
    }
    let (ho, wo) = (h / r, w / r);
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for ni in 0..n {
        for ci in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    let co = ci * r * r + dy * r + dx;
                    for oy in 0..ho {
                        let iy = oy * r + dy;
                        let src_row = &src[((ni * c + ci) * h + iy) * w..];
                        let dst_row = &mut out[((ni * c * r * r + co) * ho + oy) * wo..];
                        for ox in 0..wo {
                            dst_row[ox] = src_row[ox * r + dx];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, c * r * r, ho, wo], out)
}

/// Depth-to-space; exact inverse of [`pixel_unshuffle`].
pub fn pixel_shuffle<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = check_nchw(x, "pixel_shuffle")?;
    if r == 0 || c % (r * r) != 0 {
        return Err(Error::Indivisible { op: "pixel_shuffle", extent: c, factor: r * r });
    }
    let co_total = c / (r * r);
    let (ho, wo) = (h * r, w * r);
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for ni in 0..n {
        for co in 0..co_total {
            for dy in 0..r {
                for dx in 0..r {
                    let ci = co * r * r + dy * r + dx;
                    for iy in 0..h {
                        let src_row = &src[((ni * c + ci) * h + iy) * w..];
                        let dst_row = &mut out[((ni * co_total + co) * ho + iy * r + dy) * wo..];
                        for ix in 0..w {
                            dst_row[ix * r + dx] = src_row[ix];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, co_total, ho, wo], out)
}

/// Copy channels `[from, to)` of an NCHW tensor.
pub(crate) fn channel_slice<T: Scalar>(x: &Tensor<T>, from: usize, to: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = check_nchw(x, "channel_slice")?;
    debug_assert!(from < to && to <= c);
    let span = to - from;
    let hw = h * w;
    let mut out = vec![T::zero(); n * span * hw];
    for ni in 0..n {
        let src = &x.data()[(ni * c + from) * hw..(ni * c + to) * hw];
        out[ni * span * hw..(ni + 1) * span * hw].copy_from_slice(src);
    }
    Tensor::new(vec![n, span, h, w], out)
}

/// Concatenate two NCHW tensors along the channel axis.
pub(crate) fn channel_concat<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, ca, h, w) = check_nchw(a, "channel_concat")?;
    let (nb, cb, hb, wb) = check_nchw(b, "channel_concat")?;
    if n != nb || h != hb || w != wb {
        return Err(Error::ShapeMismatch {
            op: "channel_concat",
            detail: format!("non-channel dims differ: {:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    let hw = h * w;
    let mut out = vec![T::zero(); n * (ca + cb) * hw];
    for ni in 0..n {
        out[ni * (ca + cb) * hw..ni * (ca + cb) * hw + ca * hw]
            .copy_from_slice(&a.data()[ni * ca * hw..(ni + 1) * ca * hw]);
        out[ni * (ca + cb) * hw + ca * hw..(ni + 1) * (ca + cb) * hw]
            .copy_from_slice(&b.data()[ni * cb * hw..(ni + 1) * cb * hw]);
    }
    Tensor::new(vec![n, ca + cb, h, w], out)
}
