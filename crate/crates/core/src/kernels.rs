//! Raw forward/backward numerics behind the graph operations.
//!
//! These work on plain tensors and know nothing about the graph; shapes
//! are validated by the callers in [`crate::graph`].

use crate::error::{Error, Result};
use crate::parallel;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Kernel size, stride and asymmetric zero padding of a 2-D convolution.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct ConvGeometry {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    /// top, left, bottom, right
    pub pad: [usize; 4],
}

impl ConvGeometry {
    /// Stride-1 padding that keeps the spatial size. Even kernels put the
    /// extra row/column on the bottom/right.
    pub fn same(k: usize) -> Self {
        let lo = (k - 1) / 2;
        let hi = k - 1 - lo;
        ConvGeometry {
            kh: k,
            kw: k,
            stride: 1,
            pad: [lo, lo, hi, hi],
        }
    }

    pub fn valid(k: usize, stride: usize) -> Self {
        ConvGeometry {
            kh: k,
            kw: k,
            stride,
            pad: [0; 4],
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.stride == 0 {
            return Err(Error::invalid("convolution stride must be positive"));
        }
        if self.stride == 2 && (!h.is_multiple_of(2) || !w.is_multiple_of(2)) {
            return Err(Error::shape(
                "conv2d",
                format!("stride-2 convolution needs even spatial size, got {h}x{w}"),
            ));
        }
        let ph = h + self.pad[0] + self.pad[2];
        let pw = w + self.pad[1] + self.pad[3];
        if ph < self.kh || pw < self.kw {
            return Err(Error::shape(
                "conv2d",
                format!("{}x{} kernel larger than padded input {ph}x{pw}", self.kh, self.kw),
            ));
        }
        Ok(((ph - self.kh) / self.stride + 1, (pw - self.kw) / self.stride + 1))
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == [0; 4]
    }
}

fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, g: &ConvGeometry, oh: usize, ow: usize) -> Vec<T> {
    let p = oh * ow;
    let mut col = vec![T::zero(); c * g.kh * g.kw * p];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad[0] as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad[1] as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im<T: Scalar>(col: &[T], c: usize, h: usize, w: usize, g: &ConvGeometry, oh: usize, ow: usize, dx: &mut [T]) {
    let p = oh * ow;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad[0] as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad[1] as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation plus bias. `weight` is `(out, in, kh, kw)`, `bias` is `(1, out, 1, 1)`.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    g: &ConvGeometry,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = weight.shape();
    if ws.c != xs.c {
        return Err(Error::shape(
            "conv2d",
            format!("input has {} channels, weights expect {}", xs.c, ws.c),
        ));
    }
    if ws.h != g.kh || ws.w != g.kw {
        return Err(Error::shape(
            "conv2d",
            format!(
                "weight kernel {}x{} does not match geometry {}x{}",
                ws.h, ws.w, g.kh, g.kw
            ),
        ));
    }
    bias.expect_shape(Shape::channels(ws.n), "conv2d bias")?;
    let (oh, ow) = g.output_hw(xs.h, xs.w)?;
    let out_shape = Shape::new(xs.n, ws.n, oh, ow);
    let mut out = Tensor::zeros(out_shape);
    let k = xs.c * g.kh * g.kw;
    let p = oh * ow;
    let in_len = xs.c * xs.plane();
    let (xd, wd, bd) = (x.data(), weight.data(), bias.data());
    parallel::for_each_chunk(out.data_mut(), ws.n * p, |n, o| {
        let xn = &xd[n * in_len..(n + 1) * in_len];
        let owned;
        let col: &[T] = if g.is_pointwise() {
            xn
        } else {
            owned = im2col(xn, xs.c, xs.h, xs.w, g, oh, ow);
            &owned
        };
        for (co, row) in o.chunks_mut(p).enumerate() {
            row.iter_mut().for_each(|v| *v = bd[co]);
        }
        T::gemm(
            ws.n,
            k,
            p,
            T::one(),
            wd,
            (k as isize, 1),
            col,
            (p as isize, 1),
            T::one(),
            o,
            (p as isize, 1),
        );
    });
    Ok(out)
}

pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    g: &ConvGeometry,
    dout: &Tensor<T>,
) -> ConvGrads<T> {
    let xs = x.shape();
    let ws = weight.shape();
    let os = dout.shape();
    let k = xs.c * g.kh * g.kw;
    let p = os.plane();
    let in_len = xs.c * xs.plane();
    let (xd, wd, dd) = (x.data(), weight.data(), dout.data());

    let per_sample = parallel::map_indexed(xs.n, |n| {
        let xn = &xd[n * in_len..(n + 1) * in_len];
        let dn = &dd[n * ws.n * p..(n + 1) * ws.n * p];
        let owned;
        let col: &[T] = if g.is_pointwise() {
            xn
        } else {
            owned = im2col(xn, xs.c, xs.h, xs.w, g, os.h, os.w);
            &owned
        };
        // dW_n = dout_n . col^T
        let mut dw = vec![T::zero(); ws.n * k];
        T::gemm(
            ws.n,
            p,
            k,
            T::one(),
            dn,
            (p as isize, 1),
            col,
            (1, p as isize),
            T::zero(),
            &mut dw,
            (k as isize, 1),
        );
        // dcol = W^T . dout_n
        let mut dx = vec![T::zero(); in_len];
        if g.is_pointwise() {
            T::gemm(
                k,
                ws.n,
                p,
                T::one(),
                wd,
                (1, k as isize),
                dn,
                (p as isize, 1),
                T::zero(),
                &mut dx,
                (p as isize, 1),
            );
        } else {
            let mut dcol = vec![T::zero(); k * p];
            T::gemm(
                k,
                ws.n,
                p,
                T::one(),
                wd,
                (1, k as isize),
                dn,
                (p as isize, 1),
                T::zero(),
                &mut dcol,
                (p as isize, 1),
            );
            col2im(&dcol, xs.c, xs.h, xs.w, g, os.h, os.w, &mut dx);
        }
        let db: Vec<T> = dn.chunks(p).map(|r| r.iter().copied().sum()).collect();
        (dx, dw, db)
    });

    let mut dx_all = Vec::with_capacity(xs.numel());
    let mut dw_all = vec![T::zero(); ws.numel()];
    let mut db_all = vec![T::zero(); ws.n];
    for (dx, dw, db) in per_sample {
        dx_all.extend_from_slice(&dx);
        for (a, b) in dw_all.iter_mut().zip(dw) {
            *a += b;
        }
        for (a, b) in db_all.iter_mut().zip(db) {
            *a += b;
        }
    }
    ConvGrads {
        input: Tensor::from_vec(xs, dx_all).expect("input grad shape"),
        weight: Tensor::from_vec(ws, dw_all).expect("weight grad shape"),
        bias: Tensor::from_vec(Shape::channels(ws.n), db_all).expect("bias grad shape"),
    }
}

/// Per-channel `(mean, biased variance)` over batch and spatial positions.
pub fn channel_moments<T: Scalar>(x: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let s = x.shape();
    let count = T::lit((s.n * s.plane()) as f64);
    let mut mean = vec![T::zero(); s.c];
    let mut var = vec![T::zero(); s.c];
    for c in 0..s.c {
        let mut acc = T::zero();
        for n in 0..s.n {
            acc += x.plane(n, c).iter().copied().sum::<T>();
        }
        let m = acc / count;
        let mut sq = T::zero();
        for n in 0..s.n {
            sq += x.plane(n, c).iter().map(|&v| (v - m) * (v - m)).sum::<T>();
        }
        mean[c] = m;
        var[c] = sq / count;
    }
    (mean, var)
}

/// `(x - mean) * inv_std` per channel.
pub fn normalize<T: Scalar>(x: &Tensor<T>, mean: &[T], inv_std: &[T]) -> Tensor<T> {
    let s = x.shape();
    let plane = s.plane();
    let mut out = x.clone();
    for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let c = i % s.c;
        for v in chunk {
            *v = (*v - mean[c]) * inv_std[c];
        }
    }
    out
}

/// `gamma * xhat + beta` per channel.
pub fn scale_shift<T: Scalar>(xhat: &Tensor<T>, gamma: &[T], beta: &[T]) -> Tensor<T> {
    let s = xhat.shape();
    let plane = s.plane();
    let mut out = xhat.clone();
    for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let c = i % s.c;
        for v in chunk {
            *v = gamma[c] * *v + beta[c];
        }
    }
    out
}

/// Per-channel sums of `a` and of `a * b` over batch and spatial positions.
pub fn channel_sums<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let s = a.shape();
    let plane = s.plane();
    let mut sa = vec![T::zero(); s.c];
    let mut sab = vec![T::zero(); s.c];
    for (i, (ca, cb)) in a.data().chunks(plane).zip(b.data().chunks(plane)).enumerate() {
        let c = i % s.c;
        sa[c] += ca.iter().copied().sum::<T>();
        sab[c] += ca.iter().zip(cb).map(|(&x, &y)| x * y).sum::<T>();
    }
    (sa, sab)
}

/// Input gradient of training-mode batch normalization given the saved
/// normalized activations.
pub fn batch_norm_input_grad<T: Scalar>(xhat: &Tensor<T>, inv_std: &[T], gamma: &[T], dout: &Tensor<T>) -> Tensor<T> {
    let s = xhat.shape();
    let plane = s.plane();
    let m = T::lit((s.n * plane) as f64);
    let (sum_dy, sum_dy_xhat) = channel_sums(dout, xhat);
    let mut dx = dout.clone();
    for (i, (chunk, xh)) in dx
        .data_mut()
        .chunks_mut(plane)
        .zip(xhat.data().chunks(plane))
        .enumerate()
    {
        let c = i % s.c;
        let k = gamma[c] * inv_std[c] / m;
        for (d, &xv) in chunk.iter_mut().zip(xh) {
            *d = k * (m * *d - sum_dy[c] - xv * sum_dy_xhat[c]);
        }
    }
    dx
}

pub fn prelu_forward<T: Scalar>(x: &Tensor<T>, slope: &[T]) -> Tensor<T> {
    let s = x.shape();
    let plane = s.plane();
    let mut out = x.clone();
    for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let a = slope[i % s.c];
        for v in chunk {
            if *v < T::zero() {
                *v = a * *v;
            }
        }
    }
    out
}

/// Returns `(d input, d slope)`.
pub fn prelu_backward<T: Scalar>(x: &Tensor<T>, slope: &[T], dout: &Tensor<T>) -> (Tensor<T>, Vec<T>) {
    let s = x.shape();
    let plane = s.plane();
    let mut dx = dout.clone();
    let mut da = vec![T::zero(); s.c];
    for (i, (chunk, xs)) in dx.data_mut().chunks_mut(plane).zip(x.data().chunks(plane)).enumerate() {
        let c = i % s.c;
        for (d, &xv) in chunk.iter_mut().zip(xs) {
            if xv < T::zero() {
                da[c] += xv * *d;
                *d = slope[c] * *d;
            }
        }
    }
    (dx, da)
}

/// Nearest-neighbour 2x replication: every pixel becomes a 2x2 block.
pub fn upsample2x<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let os = Shape::new(s.n, s.c, 2 * s.h, 2 * s.w);
    let mut out = Tensor::zeros(os);
    let (ih, iw, ow) = (s.h, s.w, os.w);
    for (src, dst) in x.data().chunks(ih * iw).zip(out.data_mut().chunks_mut(os.plane())) {
        for y in 0..2 * ih {
            for xx in 0..ow {
                dst[y * ow + xx] = src[(y / 2) * iw + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2x_backward<T: Scalar>(dout: &Tensor<T>) -> Tensor<T> {
    let os = dout.shape();
    let s = Shape::new(os.n, os.c, os.h / 2, os.w / 2);
    let mut dx = Tensor::zeros(s);
    for (dst, src) in dx.data_mut().chunks_mut(s.plane()).zip(dout.data().chunks(os.plane())) {
        for y in 0..os.h {
            for xx in 0..os.w {
                dst[(y / 2) * s.w + xx / 2] += src[y * os.w + xx];
            }
        }
    }
    dx
}

/// Softmax across channels at every pixel, shifted by the per-pixel max.
pub fn softmax_channels<T: Scalar>(z: &Tensor<T>) -> Tensor<T> {
    let s = z.shape();
    let plane = s.plane();
    let mut out = z.clone();
    let zd = z.data();
    let od = out.data_mut();
    for n in 0..s.n {
        let base = n * s.c * plane;
        for p in 0..plane {
            let idx = |c: usize| base + c * plane + p;
            let mut zmax = T::neg_infinity();
            for c in 0..s.c {
                zmax = zmax.max(zd[idx(c)]);
            }
            let mut total = T::zero();
            for c in 0..s.c {
                let e = (zd[idx(c)] - zmax).exp();
                od[idx(c)] = e;
                total += e;
            }
            for c in 0..s.c {
                od[idx(c)] /= total;
            }
        }
    }
    out
}

pub fn softmax_channels_backward<T: Scalar>(probs: &Tensor<T>, dout: &Tensor<T>) -> Tensor<T> {
    let s = probs.shape();
    let plane = s.plane();
    let mut dz = Tensor::zeros(s);
    let (pd, dd) = (probs.data(), dout.data());
    let zd = dz.data_mut();
    for n in 0..s.n {
        let base = n * s.c * plane;
        for p in 0..plane {
            let mut dot = T::zero();
            for c in 0..s.c {
                let i = base + c * plane + p;
                dot += pd[i] * dd[i];
            }
            for c in 0..s.c {
                let i = base + c * plane + p;
                zd[i] = pd[i] * (dd[i] - dot);
            }
        }
    }
    dz
}
